"""Textberichte über Jinja2-Templates aus templates/."""

from pathlib import Path

from jinja2 import Environment, FileSystemLoader, StrictUndefined


def get_template_dir() -> Path:
    """Gibt den Pfad zum Template-Verzeichnis zurück."""
    # Vom src/core/ aus zwei Ebenen hoch, dann in templates/
    return Path(__file__).parent.parent.parent / "templates"


def _environment() -> Environment:
    return Environment(
        loader=FileSystemLoader(get_template_dir()),
        undefined=StrictUndefined,
        keep_trailing_newline=True,
        trim_blocks=True,
        lstrip_blocks=True,
    )


def render_verify_report(results: list) -> str:
    """Pass/Fail-Tabelle mit maximalem Fehler je Prüfung."""
    template = _environment().get_template("verify_report.txt")
    return template.render(
        results=results,
        passed=sum(1 for r in results if r.passed),
        total=len(results),
        width=max((len(r.name) for r in results), default=10),
    )


def render_metrics_report(
    dataset: str,
    model_config: dict,
    metrics: dict,
    baseline: dict | None = None,
    best_epoch: int | None = None,
) -> str:
    """Metrikbericht für train/eval (standardisierte Skala)."""
    template = _environment().get_template("metrics_report.txt")
    return template.render(
        dataset=dataset,
        config=model_config,
        metrics=metrics,
        baseline=baseline,
        best_epoch=best_epoch,
    )
