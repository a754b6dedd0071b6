"""Shared record of acceptance outcomes, printed at the end of the session."""

import time

TITLES = {
    1: "loss oracle suite",
    2: "gradient checks against central differences",
    3: "attention invariants",
    4: "metric oracle equivalence",
    5: "training contracts",
    6: "end-to-end phantom adaptation experiment",
    7: "attention ablation direction",
    8: "report fidelity",
}
RESULTS = {}


def run_checks(number, checks, budget_s, detail=""):
    """Run named zero-argument callables; record one PASS/FAIL outcome for the criterion."""
    start = time.perf_counter()
    failures = []
    for name, fn in checks:
        try:
            fn()
        except Exception as exc:  # recorded, then re-raised below as one assertion
            failures.append(f"{name}: {type(exc).__name__}: {exc}"[:300])
    elapsed = time.perf_counter() - start
    if elapsed > budget_s:
        failures.append(f"runtime {elapsed:.1f}s exceeds budget {budget_s}s")
    note = f"{len(checks)} checks in {elapsed:.1f}s" + (f"; {detail}" if detail else "")
    record(number, not failures, note if not failures else "; ".join(failures))
    assert not failures, failures


def record(number, passed, detail):
    RESULTS[number] = (passed, detail)
