#!/usr/bin/env python3
"""TimeMachine Forecaster - Entry Point.

Langzeit-Vorhersage multivariater Zeitreihen mit vier integrierten Mambas.
Kommandos: train, eval, verify, predict (siehe `python main.py --help`).
"""

import sys
import logging

from src.cli.commands import build_parser, run


def setup_logging(verbose: bool = False):
    """Konfiguriert das Logging für die Anwendung."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=[
            logging.StreamHandler(sys.stdout),
        ]
    )


def main():
    """Startet das gewählte TimeMachine-Kommando."""
    args = build_parser().parse_args()
    setup_logging(args.verbose)
    logger = logging.getLogger(__name__)
    logger.info(f"Starte TimeMachine: {args.command}")

    sys.exit(run(args))


if __name__ == "__main__":
    main()
