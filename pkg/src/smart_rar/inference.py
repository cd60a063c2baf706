"""Post-trial estimation, normal-theory intervals and martingale diagnostics."""
from __future__ import annotations

from dataclasses import dataclass
from statistics import NormalDist

import numpy as np

from . import adapt_weights as aw
from .confidence_ts import InferenceError
from .core_model import UPFRONT, TrialDesign
from .engine import TrialRecord, run_trial
from .estimators import ValueEstimate, ValueEstimates, aipw_values, ipw_values
from .rng import TrialStreams
from .scenario import ScenarioParams, draw_potential_table, outcome_mean, stage2_score

POST_TRIAL_ESTIMATORS = ("IPW", "WIPW", "AIPW", "WAIPW")
_STD_NORMAL = NormalDist()


def normal_quantile(p: float) -> float:
    return _STD_NORMAL.inv_cdf(p)


def standard_error(est: ValueEstimate | ValueEstimates, n: int | None = None):
    """sigma / (|delta| sqrt(n)) with n the number of contributing subjects."""
    n = est.n_used if n is None else n
    deriv = np.asarray(est.derivative, float)
    if np.any(deriv == 0.0):
        raise InferenceError("zero derivative")
    se = np.sqrt(np.asarray(est.second_moment, float)) / (np.abs(deriv) * np.sqrt(n))
    return float(se) if se.ndim == 0 else se


def interval_and_bounds(theta_hat, se, level: float = 0.95):
    """Two-sided interval and one-sided lower/upper bounds at ``level``."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    z2 = normal_quantile(0.5 + level / 2.0)
    z1 = normal_quantile(level)
    theta_hat = np.asarray(theta_hat, float)
    se = np.asarray(se, float)
    return (theta_hat - z2 * se, theta_hat + z2 * se), theta_hat - z1 * se, theta_hat + z1 * se


def identify_optimal(theta_hats, direction: str = "minimize") -> int:
    t = np.asarray(theta_hats, float)
    if not np.all(np.isfinite(t)):
        raise ValueError("non-finite value estimates")
    return int(np.argmin(t) if direction == "minimize" else np.argmax(t))


def standardized_statistic(theta_hat, truth, est, n: int | None = None):
    return (np.asarray(theta_hat, float) - np.asarray(truth, float)) / standard_error(est, n)


@dataclass(frozen=True)
class EstimatorResult:
    theta_hat: np.ndarray
    se: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    z: np.ndarray | None
    identified_optimal: int


@dataclass(frozen=True)
class InferenceResult:
    level: float
    by_estimator: dict  # name -> EstimatorResult
    labels: tuple[str, ...]

    def rows(self) -> list[dict]:
        out = []
        for name, r in self.by_estimator.items():
            for j, lab in enumerate(self.labels):
                out.append({"regime": lab, "estimator": name, "theta_hat": r.theta_hat[j],
                            "se": r.se[j], "ci_lo": r.ci_lo[j], "ci_hi": r.ci_hi[j],
                            "lb": r.lb[j], "ub": r.ub[j],
                            "z": np.nan if r.z is None else r.z[j]})
        return out


def final_estimates(record: TrialRecord) -> dict:
    data = record.final
    return {
        "IPW": ipw_values(data),
        "WIPW": ipw_values(data, record.weights(aw.WIPW)),
        "AIPW": aipw_values(data, record.lmodels),
        "WAIPW": aipw_values(data, record.lmodels, record.weights(aw.WAIPW)),
    }


def post_trial_inference(record: TrialRecord, truth=None, level: float = 0.95
                         ) -> InferenceResult:
    design = record.final.design
    out = {}
    for name, est in final_estimates(record).items():
        se = standard_error(est)
        (lo, hi), lb, ub = interval_and_bounds(est.theta, se, level)
        z = None if truth is None else (est.theta - np.asarray(truth)) / se
        out[name] = EstimatorResult(theta_hat=est.theta, se=se, ci_lo=lo, ci_hi=hi, lb=lb, ub=ub,
                                    z=z, identified_optimal=identify_optimal(est.theta,
                                                                             design.direction))
    labels = tuple(r.label for r in design.regimes)
    return InferenceResult(level=level, by_estimator=out, labels=labels)


# --------------------------------------------------------------------------
# martingale diagnostics
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CheckpointReport:
    week: int
    kind: str          # wipw or waipw
    weighted: bool
    mean: float
    mean_se: float
    second_moment: float
    second_moment_se: float
    weight: float


def _inner_subjects(week: int, record: TrialRecord, params: ScenarioParams, n: int,
                    rng: np.random.Generator):
    """Fresh subjects randomized under the probabilities published for ``week``."""
    d = record.final.design
    table = draw_potential_table(n, params, rng)
    u1, u2 = rng.random(n), rng.random(n)
    state = record.published[week]
    if record.mode == UPFRONT:
        r = state["r"]
        reg = np.minimum(np.searchsorted(np.cumsum(r), u1, side="right"), d.m - 1)
        a1 = d.regime_a1[reg]
        x21, resp = stage2_score(table.x1, a1, table.eps1, params)
        a2 = d.regime_a2[reg, resp]
        pi1, pi2s = aw.upfront_stratum_propensities(r, d)
    else:
        cohort = week - d.timeline.stage_delay_weeks
        p1 = record.published.get(cohort, state)["p1"]
        k = np.minimum(np.searchsorted(np.cumsum(p1), u1, side="right"), p1.size - 1)
        a1 = np.asarray(d.stage1_options)[k]
        x21, resp = stage2_score(table.x1, a1, table.eps1, params)
        a2 = np.empty(n, int)
        for (ga1, s), vec in state["p2"].items():
            sel = (a1 == ga1) & (resp == s)
            kk = np.minimum((u2[sel, None] >= np.cumsum(vec)[None, :]).sum(axis=1), vec.size - 1)
            a2[sel] = np.asarray(d.feasible(ga1, s))[kk]
        pi1, pi2s = aw.sequential_stratum_propensities(p1, state["p2"], d)
    y = outcome_mean(table.x1, a1, x21, a2, params) + table.eps2
    return table.x1, a1, x21, resp, a2, y, pi1, pi2s


def conditional_contributions(week: int, record: TrialRecord, params: ScenarioParams,
                              regime: int, truth: float, n_inner: int,
                              rng: np.random.Generator) -> dict:
    """Draws of M_t at the true value for a fresh week-``week`` subject, by kind.

    Returns kind -> (weight, unweighted M draws).  The WAIPW entry is left
    out when no augmentation model could ever be fitted in this trial.
    """
    d = record.final.design
    x1, a1, x21, resp, a2, y, pi1, pi2s = _inner_subjects(week, record, params, n_inner, rng)
    reg = d.regimes[regime]
    cb = a1 == reg.a1
    c = cb & (a2 == np.where(resp == 1, reg.a2_responder, reg.a2_nonresponder))
    p1 = pi1[regime]
    p12 = p1 * pi2s[regime, resp]
    ipw_m = np.where(c, (y - truth) / p12, 0.0)
    ws = record.weight_state
    w_ipw = float(ws.weight_for_week(aw.WIPW, week)[regime]) if ws else 1.0
    out = {aw.WIPW: (w_ipw, ipw_m)}
    if len(record.lmodels) == 0:
        return out

    model = record.lmodels.resolve(week)
    l1 = model.maps.lstage1(x1) @ model.beta1[regime]
    d2 = np.where(resp == 1, reg.a2_responder, reg.a2_nonresponder)
    l2 = model.maps.stage2(x1, reg.a1, x21, d2) @ model.beta2
    s1 = np.where(cb, 1.0 / p1, 0.0)
    s2 = np.where(c, 1.0 / p12, 0.0)
    psi = np.where(c, y / p12, 0.0) + (1.0 - s1) * l1 + (s1 - s2) * l2
    aipw_m = psi - truth

    w_aipw = float(ws.weight_for_week(aw.WAIPW, week)[regime]) if ws else 1.0
    out[aw.WAIPW] = (w_aipw, aipw_m)
    return out


def _summaries(week, kind, w, m_draws) -> list[CheckpointReport]:
    out = []
    n = m_draws.size
    for weighted in (True, False):
        mm = m_draws * (w if weighted else 1.0)
        sq = mm ** 2
        out.append(CheckpointReport(
            week=week, kind=kind, weighted=weighted, mean=float(mm.mean()),
            mean_se=float(mm.std(ddof=1) / np.sqrt(n)), second_moment=float(sq.mean()),
            second_moment_se=float(sq.std(ddof=1) / np.sqrt(n)),
            weight=float(w if weighted else 1.0)))
    return out


@dataclass(frozen=True)
class MartingaleReport:
    record: TrialRecord
    checkpoints: tuple[int, ...]
    rows: tuple[CheckpointReport, ...]

    def select(self, kind: str, weighted: bool) -> list[CheckpointReport]:
        return [r for r in self.rows if r.kind == kind and r.weighted == weighted]

    def second_moment_ratio(self, kind: str, weighted: bool) -> float:
        sm = [r.second_moment for r in self.select(kind, weighted)]
        return max(sm) / min(sm)

    def max_abs_t(self, kind: str, weighted: bool) -> float:
        return max(abs(r.mean) / r.mean_se if r.mean_se > 0 else 0.0
                   for r in self.select(kind, weighted))


def default_checkpoints(record: TrialRecord, n_histories: int) -> tuple[int, ...]:
    d = record.final.design
    start = (record.t_star or 0) + 1
    weeks = [w for w in range(start, d.horizon) if w in record.published]
    return tuple(weeks[:n_histories])


def martingale_diagnostics(design: TrialDesign, params: ScenarioParams, policy,
                           n_histories: int, n_inner: int, streams: TrialStreams,
                           truth: np.ndarray, regime: int | None = None,
                           checkpoints=None) -> MartingaleReport:
    """Freeze the accrued history at checkpoint weeks of one trial and redraw the next subject.

    At each checkpoint the probabilities, weights and augmentation models of
    that week are held fixed while ``n_inner`` fresh subjects are randomized
    and followed up, giving Monte Carlo estimates of the conditional mean
    and second moment of the estimating function at the true value.
    """
    truth = np.asarray(truth, float)
    if regime is None:
        regime = int(np.argmin(truth) if design.direction == "minimize" else np.argmax(truth))
    record = run_trial(design, params, policy, streams, extend=True)
    weeks = tuple(checkpoints) if checkpoints else default_checkpoints(record, n_histories)
    rng = streams["diagnostics"]
    rows = []
    for week in weeks:
        draws = conditional_contributions(week, record, params, regime, float(truth[regime]),
                                          n_inner, rng)
        for kind, (w, m_draws) in draws.items():
            rows.extend(_summaries(week, kind, w, m_draws))
    return MartingaleReport(record=record, checkpoints=weeks, rows=tuple(rows))
