import pytest

CRITERIA = {
    1: "BER model round-trip",
    2: "Jacobian correctness",
    3: "solver convergence at N=128, 20 dB",
    4: "constraint audits on converged trials",
    5: "SNR sweep structure",
    6: "alpha sweep structure",
    7: "power-cap sweep structure",
    8: "baseline comparison",
    9: "N=2 grid-oracle equivalence",
    10: "sweep determinism",
}

_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_KEY] = {}


@pytest.fixture(scope="session")
def acceptance(request):
    """Record one ``(passed, detail)`` outcome per acceptance criterion."""
    log = request.config.stash[_KEY]

    def record(number, passed, detail=""):
        log[number] = (bool(passed), detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = config.stash.get(_KEY, {})
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        if n in log:
            ok, detail = log[n]
            status = "PASS" if ok else "FAIL"
        else:
            status, detail = "NOT RUN", ""
        terminalreporter.write_line(f"criterion {n:>2} {status:<7} {name}: {detail}")
