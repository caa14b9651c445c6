import pytest

_RESULTS = pytest.StashKey[dict]()

CRITERIA = {
    1: "EMA algebra",
    2: "closed-form teacher oracle",
    3: "focal loss suite",
    4: "no regression gradient from pseudo-labels",
    5: "NMS and AP oracle equivalence",
    6: "gradient correctness",
    7: "loss x EMA grid: KL and teacher mAP ordering",
    8: "semi-supervised gain at 5% labels",
    9: "teacher >= student",
    10: "threshold sweep monotonicity",
    11: "determinism of cmd_train",
    12: "burn-in ablation",
}


def pytest_configure(config):
    config.stash[_RESULTS] = {}


@pytest.fixture
def criterion(request):
    """Record the outcome of one acceptance criterion.

    Call ``criterion(number, passed, detail)``; the line is printed right
    away and again in the terminal summary.
    """
    results = request.config.stash[_RESULTS]

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number:2d} [{'PASS' if passed else 'FAIL'}] {CRITERIA[number]}: {detail}"
        results[number] = line
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash[_RESULTS]
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        terminalreporter.write_line(results.get(n, f"criterion {n:2d} [NOT RUN] {name}"))
