"""Shared state between the acceptance tests and the terminal summary hook."""

RESULTS: list[str] = []


def report(criterion: str, ok: bool, detail: str) -> None:
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
