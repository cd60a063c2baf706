import numpy as np
import pytest

from smart_rar.core_model import SEQUENTIAL, UPFRONT, fig1_design
from smart_rar.engine import SR, mask_to_week, run_trial
from smart_rar.rng import TrialStreams
from smart_rar.scenario import ScenarioParams, oracle_true_values


@pytest.fixture(scope="session")
def design():
    return fig1_design()


@pytest.fixture(scope="session")
def params():
    return ScenarioParams()


@pytest.fixture(scope="session")
def oracle(design, params):
    return oracle_true_values(params, design, 10_000_000, rng=20240101)


def small_snapshot(design, n=30, seed=0, mode=UPFRONT, week=None, policy=None):
    """A small trial's snapshot; ``week=None`` gives the completed trial."""
    p = ScenarioParams(n_subjects=n)
    pol = policy or SR(mode)
    rec = run_trial(design, p, pol, TrialStreams(seed, 0, 0))
    return rec.final if week is None else mask_to_week(rec.final, week)


def perturbed_probabilities(data, seed):
    """Replace stored probability vectors with random positive ones (keeps a2 as drawn)."""
    rng = np.random.default_rng(seed)
    p1 = rng.dirichlet(np.ones(data.p1.shape[1]) * 2.0, size=data.n)
    p2 = data.p2.copy()
    for i in range(data.n):
        k = int(np.sum(~np.isnan(p2[i])))
        if k:
            p2[i, :k] = rng.dirichlet(np.ones(k) * 2.0)
    return p1, p2


@pytest.fixture
def snap_factory(design):
    def make(**kw):
        return small_snapshot(design, **kw)
    return make


def synthetic_case(design, seed, mode=UPFRONT, n=30, week=None):
    """A small dataset with randomized stored propensities, L coefficients and weights.

    Seeds are scanned upward until every regime has a consistent completer,
    so all estimators are defined.
    """
    from dataclasses import replace
    from smart_rar.estimators import LModelCache, LModelSet

    s = seed
    while True:
        data = small_snapshot(design, n=n, seed=s, mode=mode, week=week)
        cc = (data.consistent & data.completed[:, None]).sum(axis=0)
        if np.all(cc >= 1):
            break
        s += 1000
    p1, p2 = perturbed_probabilities(data, seed)
    data = replace(data, p1=p1, p2=p2)
    rng = np.random.default_rng(seed + 77)
    beta2 = rng.normal(size=8)
    beta1 = rng.normal(size=(design.m, 2))
    cache = LModelCache()
    cache.add(LModelSet(beta2=beta2, beta1=beta1, week=0))
    weights = rng.uniform(0.5, 2.0, size=(data.n, design.m))
    return data, cache, beta1, beta2, weights


def synthetic_cases(design):
    """Ten fixed 30-subject cases: completed trials in both modes plus mid-trial snapshots."""
    out = []
    for k in range(10):
        mode = UPFRONT if k % 2 == 0 else SEQUENTIAL
        week = None if k < 6 else 28
        out.append(synthetic_case(design, 100 + k, mode=mode, week=week))
    return out


ACCEPTANCE: list[str] = []


def report_criterion(number: int, ok: bool, detail: str) -> bool:
    """Record and print one acceptance line; the terminal summary repeats them all."""
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
