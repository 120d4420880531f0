import numpy as np
import pytest
from hypothesis import settings

from smarttmle import cli, tmle
from smarttmle.data import from_arrays
from smarttmle.simulation import SimParams, simulate_trial

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

EE_TOL = 1e-8

# Every TMLE fit produced anywhere in the suite is checked against the
# estimating-equation tolerance (see the autouse fixture below).
EE_LOG = {"fits": 0, "max_residual": 0.0, "violations": []}


@pytest.fixture(autouse=True)
def estimating_equation_guard(monkeypatch):
    original = tmle.estimate_regime_mean
    violations = []

    def checked(*args, **kwargs):
        fit = original(*args, **kwargs)
        worst = float(np.max(np.abs(fit.diagnostics["ee_residuals"])))
        EE_LOG["fits"] += 1
        EE_LOG["max_residual"] = max(EE_LOG["max_residual"], worst)
        if not worst <= EE_TOL:
            violations.append((fit.regime.label, worst))
        return fit

    monkeypatch.setattr(tmle, "estimate_regime_mean", checked)
    monkeypatch.setattr(cli, "estimate_regime_mean", checked)
    yield
    EE_LOG["violations"].extend(violations)
    assert not violations, f"estimating equations not solved: {violations}"


@pytest.fixture(scope="session")
def sim_data():
    return simulate_trial(SimParams(n=300, gamma1=-0.22, gamma3=-0.22), seed=3)


@pytest.fixture(scope="session")
def null_data():
    return simulate_trial(SimParams(n=400), seed=11)


def dataset(rows, **kw):
    """Build a dataset from (a0, y0, c1, y1, a1, c2, y2, c3, y3[, w0]) tuples."""
    cols = {k: [] for k in ("w0", "y0", "a0", "c1", "w1", "y1", "a1", "c2", "w2", "y2", "c3", "y3")}
    nan = np.nan
    for r in rows:
        a0, y0, c1, y1, a1, c2, y2, c3, y3 = r[:9]
        w0 = r[9] if len(r) > 9 else 0.0
        cols["w0"].append(w0)
        cols["y0"].append(y0)
        cols["a0"].append(a0)
        cols["c1"].append(c1)
        cols["w1"].append(0.0 if c1 else nan)
        cols["y1"].append(y1 if c1 else nan)
        cols["a1"].append(a1 if c1 else nan)
        cols["c2"].append(c2)
        cols["w2"].append(0.0 if c2 else nan)
        cols["y2"].append(y2 if c2 else nan)
        cols["c3"].append(c3)
        cols["y3"].append(y3 if c3 else nan)
    return from_arrays([f"s{i}" for i in range(len(rows))], **cols, **kw)


# One line per acceptance criterion, echoed in the terminal summary.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
    if EE_LOG["fits"]:
        terminalreporter.write_line(
            f"estimating equations over the whole run: {EE_LOG['fits']} fits, "
            f"max |residual| = {EE_LOG['max_residual']:.2e}, violations = {len(EE_LOG['violations'])}")
