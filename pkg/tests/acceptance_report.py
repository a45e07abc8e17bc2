"""Shared registry so the acceptance suite can print one line per criterion."""

RESULTS = []


def record(criterion: str, ok: bool, detail: str = "") -> None:
    RESULTS.append((criterion, bool(ok), detail))
