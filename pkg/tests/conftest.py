import torch

from criteria import RESULTS, TITLES

torch.set_num_threads(1)
_acceptance_selected = False


def pytest_collection_finish(session):
    global _acceptance_selected
    _acceptance_selected = any(item.module.__name__ == "test_acceptance" for item in session.items)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_selected:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n, title in TITLES.items():
        passed, detail = RESULTS.get(n, (False, "not run"))
        terminalreporter.write_line(f"criterion {n} [{'PASS' if passed else 'FAIL'}] {title}: {detail}")
