"""Collects one pass/fail line per acceptance criterion for the run summary."""

LINES: list[str] = []


def record(criterion: str, passed: bool, detail: str) -> None:
    line = f"{'PASS' if passed else 'FAIL'}  criterion {criterion}: {detail}"
    LINES.append(line)
    print(line)
    assert passed, line
