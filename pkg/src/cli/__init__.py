"""Kommandozeilen-Oberfläche (train, eval, verify, predict)."""
