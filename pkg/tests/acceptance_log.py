"""Collects one verdict line per acceptance criterion for the terminal summary."""

RESULTS = []


def report(number, title, passed, detail=""):
    status = "PASS" if passed else "FAIL"
    line = f"[{status}] criterion {number}: {title}" + (f" ({detail})" if detail else "")
    RESULTS.append(line)
    print(line)
    return passed


def skip(number, title, reason):
    line = f"[SKIP] criterion {number}: {title} ({reason})"
    RESULTS.append(line)
    print(line)
