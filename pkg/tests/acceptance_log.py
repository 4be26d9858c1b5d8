"""Collects one pass/fail line per acceptance criterion for the terminal summary."""

RESULTS = []


def record(criterion, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}"
    RESULTS.append(line)
    print(line)
    return passed
