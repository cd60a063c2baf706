import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smart_rar import adapt_weights as aw
from smart_rar.core_model import UPFRONT, AccruedDataset, PositivityError, SubjectRecord, fig1_design
from smart_rar.engine import SR, UpfrontTS, run_trial
from smart_rar.rng import TrialStreams
from smart_rar.scenario import ScenarioParams

import oracles
from conftest import synthetic_cases


def one_completer(design, y=3.0, response=1):
    rec = SubjectRecord(id=0, tau=1, kappa=2, gamma=1, delta=1, x1=5.0, a1=0, stage2_week=7,
                        x21=4.0, response=response, a2=0 if response else 1, y=y,
                        p1=(1 / 8,) * 8, p2=(0.5, 0.5))
    return AccruedDataset.from_records(40, design, UPFRONT, [rec])


def test_stratum_moments_single_completer(design):
    data = one_completer(design)
    assert aw.stratum_second_moments(data, 0, 2.0) == pytest.approx((0.0, 4.0))
    assert aw.stratum_second_moments(data, 0, 3.0) == (0.0, 0.0)


def test_xi_and_weight_examples():
    assert aw.xi_wipw(1, 1, 0.5, 0.5, 0.5) == pytest.approx(8.0)
    assert aw.xi_wipw(0, 2, 0.5, 0.25, 0.5) == pytest.approx(2 / (0.25 * 0.5))
    assert aw.wipw_weight(8.0, 2.0) == pytest.approx(2.0)
    assert aw.wipw_weight(3.0, 3.0) == 1.0
    assert aw.wipw_weight(8.0, 0.0) == 1.0
    assert aw.xi_waipw(2.5, 9, 9, 9, 1.0, 1.0, 1.0) == 2.5
    assert aw.xi_waipw(1, 1, 0, 0, 0.5, 0.3, 0.7) == pytest.approx(2.0)
    with pytest.raises(PositivityError):
        aw.xi_wipw(1, 1, 0.0, 0.5, 0.5)
    with pytest.raises(PositivityError):
        aw.xi_waipw(1, 1, 1, 1, 0.5, -0.1, 0.5)


def test_xi_uniform_regime_one_by_hand(design):
    pi1, pi2 = aw.upfront_stratum_propensities(np.full(8, 1 / 8), design)
    assert np.allclose(pi1, 0.5) and np.allclose(pi2, 0.5)
    mu = np.tile([0.3, 1.1], (8, 1))
    xi = aw.xi_from_moments(aw.WIPW, mu, pi1, pi2)
    assert xi[0] == pytest.approx(1.1 / 0.25 + 0.3 / 0.25, rel=1e-15)
    nu = np.tile([1.0, 0.5, 0.2, 0.4], (8, 1))
    xa = aw.xi_from_moments(aw.WAIPW, nu, pi1, pi2)
    assert xa[0] == pytest.approx(1.0 + 0.5 + 0.2 * 0.5 / 0.25 + 0.4 * 0.5 / 0.25, rel=1e-15)


def test_sequential_stratum_propensities(design):
    p2 = {(0, 0): np.array([0.2, 0.8]), (0, 1): np.array([0.6, 0.4]),
          (1, 0): np.array([0.5, 0.5]), (1, 1): np.array([0.9, 0.1])}
    pi1, pi2 = aw.sequential_stratum_propensities(np.array([0.3, 0.7]), p2, design)
    assert pi1[0] == 0.3 and pi1[7] == 0.7
    # regime 1 = (0, 0, 1): responders take option 0, nonresponders option 1
    assert tuple(pi2[0]) == (0.2, 0.6)
    # regime 8 = (1, 4, 4): responders option 4 of (3, 4), nonresponders 4 of (2, 4)
    assert tuple(pi2[7]) == (0.5, 0.1)


@pytest.mark.parametrize("k", range(10))
def test_moments_match_direct_summation(design, k):
    data, cache, b1, b2, _ = synthetic_cases(design)[k]
    theta = np.linspace(1.0, 4.0, design.m)
    mu = aw.stratum_moments(data, theta)
    l1, l2 = cache.evaluate(data)
    nu = aw.nu_moments(data, theta, l1, l2)
    l_fn = lambda i, rec, j: oracles.l_values(rec, j, b1, b2)
    for j in range(design.m):
        ref = oracles.stratum_moments(data.records, j, data.mode, theta[j])
        assert mu[j] == pytest.approx(ref, rel=1e-12, abs=1e-300)
        ref_nu = oracles.nu_moments(data.records, j, data.mode, theta[j], l_fn)
        assert nu[j] == pytest.approx(ref_nu, rel=1e-12, abs=1e-300)


def test_nu_reductions(design):
    data, *_ = synthetic_cases(design)[0]
    zero = np.zeros((data.n, design.m))
    theta = np.zeros(design.m)
    nu = aw.nu_moments(data, theta, zero, zero)
    mu = aw.stratum_moments(data, theta)
    # with Q = 0 and theta = 0 every component is a raw weighted second moment of Y
    assert np.allclose(nu[:, 0], nu[:, 1])
    assert np.allclose(nu[:, 2:], mu)
    assert np.allclose(nu[:, 0], mu.sum(axis=1))
    # perfect fits leave no residual
    data1 = one_completer(design)
    y = np.full((1, design.m), 3.0)
    assert np.all(aw.nu_moments(data1, np.full(design.m, 3.0), y, y)[0] == 0)


@settings(max_examples=200)
@given(st.floats(1e-6, 1e6, allow_nan=False))
def test_equal_moments_give_unit_weight(x):
    assert aw.wipw_weight(x, x) == 1.0


@settings(max_examples=100)
@given(st.floats(1e-3, 1e3), st.floats(1e-3, 1e3), st.floats(1.01, 10))
def test_weight_decreases_in_xi(b, xi, k):
    assert aw.wipw_weight(b, xi * k) < aw.wipw_weight(b, xi)


def test_guard_counts_fallbacks():
    state = aw.WeightState(burn_in_week=16, xi_burnin={aw.WIPW: np.array([4.0, 4.0, 4.0])},
                           theta_tilde=np.zeros(3))
    w = state.record(aw.WIPW, 20, np.array([1.0, 1e-12, 2.0]), np.array([True, True, False]))
    assert np.allclose(w, [2.0, 1.0, 1.0])
    assert state.fallbacks == 2
    assert np.array_equal(state.weight_for_week(aw.WIPW, 20), w)
    assert np.all(state.weight_for_week(aw.WIPW, 16) == 1)
    assert np.all(state.weight_for_week(aw.WIPW, 21) == 1)


def test_burn_in_subjects_get_unit_weight(design):
    rec = run_trial(design, ScenarioParams(), UpfrontTS("WAIPW", 1.0), TrialStreams(3, 0, 0))
    assert rec.t_star is not None
    for kind in (aw.WIPW, aw.WAIPW):
        w = rec.weights(kind)
        early = rec.final.tau <= rec.t_star
        assert np.all(w[early] == 1.0)
        assert np.all(np.isfinite(w)) and np.all(w > 0)
        assert np.all(aw.weights_for_dataset(rec.final, 7, kind, rec.weight_state) == w[:, 7])
    assert np.all(aw.weights_for_dataset(rec.final, 0, aw.WIPW, None) == 1.0)
    assert np.all(rec.weight_state.xi_burnin[aw.WIPW] > 0)


def test_frozen_probabilities_give_weights_near_one(design):
    # SR keeps the burn-in probabilities, so Xi changes only through the moment estimates
    rec = run_trial(design, ScenarioParams(), SR(), TrialStreams(8, 0, 0))
    w = rec.weights(aw.WIPW)[rec.final.tau > rec.t_star]
    assert abs(np.median(w) - 1.0) < 0.15


def test_stratum_support(design):
    data = one_completer(design)
    assert not aw.stratum_support(data).any()
    full = synthetic_cases(design)[0][0]
    assert aw.stratum_support(full).all()
