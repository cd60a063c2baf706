"""One test per acceptance criterion, each printing a PASS/FAIL line."""
import time

import numpy as np
import pytest

from smart_rar import adapt_weights as aw
from smart_rar.confidence_ts import damp_clip_normalize
from smart_rar.engine import SR, SequentialTS, UpfrontTS
from smart_rar.estimators import aipw_values, iaipw_values, ipw_values
from smart_rar.harness import aggregate, oracle_table, parse_config, run_monte_carlo
from smart_rar.inference import martingale_diagnostics
from smart_rar.rng import TrialStreams
from smart_rar.scenario import ScenarioParams

import oracles
from conftest import report_criterion, synthetic_case, synthetic_cases

STUDY = """
[study]
n_reps = 2000
master_seed = 20240101
threads = 1

[policy SR]
kind = sr
mode = upfront

[policy WAIPW(1)]
kind = upfront_ts
estimator = WAIPW
c = 1

[policy TS(1)]
kind = sequential_ts
c = 1
belief_mode = individual
"""

OPT = "d8"
ESTIMATORS = ("IPW", "WIPW", "AIPW", "WAIPW")


@pytest.fixture(scope="session")
def report(oracle):
    config = parse_config(STUDY)
    table = run_monte_carlo(config, oracle.theta, threads=1)
    return aggregate(table, oracle.theta, oracle.labels, "minimize", oracle)


def test_criterion_01_oracle_structure(oracle):
    th = oracle.theta
    print(oracle_table(oracle).to_string(index=False))
    ordered = th[4:].max() < th[:4].min()
    contrast = th[5] - th[7]
    ok = ordered and oracle.optimal == 7 and abs(contrast - 0.100) <= 0.005
    report_criterion(1, ok, f"a1=1 regimes better: {ordered}, optimal d{oracle.optimal + 1}, "
                            f"theta6-theta8 = {contrast:.4f}")
    assert ok


def test_criterion_02_sr_sanity(report):
    a1 = report.value("SR", "prop_a1_opt")
    reg = report.value("SR", "prop_regime_opt")
    ok = abs(a1 - 0.5) <= 0.005 and abs(reg - 0.25) <= 0.01
    report_criterion(2, ok, f"prop A1 opt {a1:.4f}, prop regime opt {reg:.4f}")
    assert ok


def test_criterion_03_upfront_ts_benefit(report, oracle):
    a1 = report.value("WAIPW(1)", "prop_a1_opt")
    reg = report.value("WAIPW(1)", "prop_regime_opt")
    reg_sr = report.value("SR", "prop_regime_opt")
    gain = report.value("SR", "mean_y") - report.value("WAIPW(1)", "mean_y")
    gap = abs(report.value("oracle", "sr_mixture_mean") - oracle.theta[oracle.optimal])
    checks = {"a1": a1 >= 0.76, "regime": reg - reg_sr >= 0.15, "mean_y": gain >= 0.6 * gap}
    ok = all(checks.values())
    report_criterion(3, ok, f"prop A1 opt {a1:.4f} (>= 0.76), regime gain {reg - reg_sr:.4f} "
                            f"(>= 0.15), mean Y gain {gain:.4f} vs 60% gap {0.6 * gap:.4f}")
    assert ok, checks


def _coverage_cells(report, policy):
    return {(est, kind): report.value(policy, f"coverage_{kind}", est)
            for est in ESTIMATORS for kind in ("ci", "lb", "ub")}


def test_criterion_04_coverage(report):
    cells = {}
    for pol in ("SR", "WAIPW(1)"):
        cells.update({(pol,) + k: v for k, v in _coverage_cells(report, pol).items()})
    bad = {k: round(v, 4) for k, v in cells.items() if not 0.93 <= v <= 0.965}
    ok = not bad
    report_criterion(4, ok, f"{len(cells) - len(bad)}/{len(cells)} cells in [0.93, 0.965]; "
                            f"range {min(cells.values()):.4f}..{max(cells.values()):.4f}")
    assert ok, bad


def test_criterion_05_weighted_normality(report):
    pol = "WAIPW(1)"
    stats = {est: (report.value(pol, "z_mean", est), report.value(pol, "z_sd", est),
                   report.value(pol, "z_skew", est)) for est in ESTIMATORS}
    ok = True
    for est in ("WIPW", "WAIPW"):
        mean, sd, skew = stats[est]
        ok &= abs(mean) < 0.08 and 0.92 <= sd <= 1.08 and abs(skew) < 0.20
    ok &= abs(stats["WIPW"][2]) <= abs(stats["IPW"][2]) + 0.02
    ok &= abs(stats["WAIPW"][2]) <= abs(stats["AIPW"][2]) + 0.02
    detail = ", ".join(f"{e} (mean {m:+.3f}, sd {s:.3f}, skew {k:+.3f})"
                       for e, (m, s, k) in stats.items())
    report_criterion(5, ok, detail)
    assert ok


def test_criterion_06_efficiency(report):
    aipw = report.value("SR", f"mse_x100_{OPT}", "AIPW")
    ipw = report.value("SR", f"mse_x100_{OPT}", "IPW")
    ok = aipw / ipw < 0.85
    report_criterion(6, ok, f"MSE x100 AIPW {aipw:.4f}, IPW {ipw:.4f}, ratio {aipw / ipw:.3f}")
    assert ok


def test_criterion_07_sequential_ts(report):
    reg = report.value("TS(1)", "prop_regime_opt")
    reg_up = report.value("WAIPW(1)", "prop_regime_opt")
    cells = _coverage_cells(report, "TS(1)")
    bad = {k: round(v, 4) for k, v in cells.items() if not 0.93 <= v <= 0.965}
    ok = reg >= 0.50 and reg > reg_up and not bad
    report_criterion(7, ok, f"prop regime opt {reg:.4f} (>= 0.50, up-front {reg_up:.4f}); "
                            f"coverage {12 - len(bad)}/12 cells in range")
    assert ok, bad


def test_criterion_08_exact_reductions(design):
    t0 = time.perf_counter()
    checks = dict.fromkeys(("wipw=ipw", "waipw=aipw", "iaipw=aipw", "c=0 uniform", "w(x,x)=1",
                            "threads"), True)
    for k in range(10):
        data, cache, *_ = synthetic_case(design, 500 + k, mode=("upfront", "sequential")[k % 2])
        ones = np.ones((data.n, design.m))
        checks["wipw=ipw"] &= np.array_equal(ipw_values(data, ones).theta, ipw_values(data).theta)
        checks["waipw=aipw"] &= np.array_equal(aipw_values(data, cache, ones).theta,
                                               aipw_values(data, cache).theta)
        checks["iaipw=aipw"] &= np.array_equal(iaipw_values(data, cache).theta,
                                               aipw_values(data, cache).theta)
    rng = np.random.default_rng(0)
    for _ in range(100):
        rho = rng.dirichlet(np.ones(8))
        checks["c=0 uniform"] &= np.array_equal(damp_clip_normalize(rho, 0.0, 0.05, 0.95),
                                                np.full(8, 1 / 8))
        x = float(rng.lognormal(0, 5))
        checks["w(x,x)=1"] &= aw.wipw_weight(x, x) == 1.0
    config = parse_config(STUDY.replace("n_reps = 2000", "n_reps = 50"))
    truth = np.linspace(4, 1, 8)
    one = run_monte_carlo(config, truth, threads=1, policies=["SR"])
    two = run_monte_carlo(config, truth, threads=2, policies=["SR"])
    checks["threads"] = one.to_csv(index=False) == two.to_csv(index=False)
    elapsed = time.perf_counter() - t0
    failed = [k for k, v in checks.items() if not v]
    ok = not failed and elapsed < 10.0
    report_criterion(8, ok, f"{len(checks) - len(failed)}/{len(checks)} exact checks hold"
                            f"{' (failed: ' + ', '.join(failed) + ')' if failed else ''}, "
                            f"{elapsed:.1f} s")
    assert ok, failed


def test_criterion_09_martingale_conditions(design, oracle):
    t0 = time.perf_counter()
    rep = martingale_diagnostics(design, ScenarioParams(), UpfrontTS("WAIPW", 1.0), 20, 100_000,
                                 TrialStreams(20240101, 0, 0), oracle.theta)
    elapsed = time.perf_counter() - t0
    parts, ok = [], len(rep.checkpoints) == 20 and elapsed < 180
    for kind in (aw.WIPW, aw.WAIPW):
        t = rep.max_abs_t(kind, weighted=True)
        rw = rep.second_moment_ratio(kind, weighted=True)
        ru = rep.second_moment_ratio(kind, weighted=False)
        ok &= t < 4.0 and rw <= 1.10
        parts.append(f"{kind}: max|t| {t:.2f}, weighted ratio {rw:.3f}, unweighted {ru:.3f}")
    report_criterion(9, ok, "; ".join(parts) + f"; {elapsed:.0f} s")
    assert ok


def test_criterion_10_estimator_oracles(design):
    worst = 0.0
    for data, cache, b1, b2, w in synthetic_cases(design):
        recs = data.records
        l_fn = lambda i, rec, j: oracles.l_values(rec, j, b1, b2)
        pairs = [(iaipw_values(data, cache).theta,
                  [oracles.iaipw(recs, j, data.mode, l_fn) for j in range(design.m)])]
        if data.completed.all():
            pairs += [
                (ipw_values(data).theta, [oracles.ipw(recs, j, data.mode) for j in range(8)]),
                (ipw_values(data, w).theta,
                 [oracles.ipw(recs, j, data.mode, w[:, j]) for j in range(8)]),
                (aipw_values(data, cache).theta,
                 [oracles.aipw(recs, j, data.mode, l_fn) for j in range(8)]),
                (aipw_values(data, cache, w).theta,
                 [oracles.aipw(recs, j, data.mode, l_fn, w[:, j]) for j in range(8)]),
            ]
        for got, ref in pairs:
            ref = np.array(ref)
            worst = max(worst, float(np.max(np.abs(got - ref) / np.abs(ref))))
    ok = worst <= 1e-12
    report_criterion(10, ok, f"max relative error {worst:.2e} over 10 datasets")
    assert ok
