"""Shared record of acceptance outcomes, printed by the terminal-summary hook."""

RESULTS: list[str] = []
