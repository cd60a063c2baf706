"""Weekly trial clock: enrollment, stage transitions, burn-in and adaptive randomization."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import adapt_weights as aw
from .confidence_ts import (damp_clip_normalize, projection_beta_sampler,
                            sequential_beliefs_configuration, sequential_beliefs_individual,
                            thompson_regime_probabilities)
from .core_model import SEQUENTIAL, UPFRONT, AccruedDataset, TrialDesign
from .estimators import (DEFAULT_MAPS, EstimationUndefined, FeatureMaps, LModelCache,
                         ProvenanceError, SingularFitError, aipw_values, fit_l_models,
                         iaipw_values, ipw_values, qlearning_fit)
from .rng import TrialStreams
from .scenario import (ScenarioParams, draw_enrollment_weeks, draw_potential_table,
                       outcome_mean, stage2_score)

log = logging.getLogger(__name__)

ESTIMATORS = ("IPW", "WIPW", "AIPW", "WAIPW", "IAIPW")
_RECOVERABLE = (EstimationUndefined, SingularFitError, ProvenanceError, np.linalg.LinAlgError,
                ValueError, FloatingPointError)


# --------------------------------------------------------------------------
# policies
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SR:
    """Uniform randomization over regimes (up-front) or feasible options (sequential)."""

    mode: str = UPFRONT

    @property
    def adaptive(self) -> bool:
        return False


@dataclass(frozen=True)
class UpfrontTS:
    estimator: str = "WAIPW"
    c: float = 1.0

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}; choose from {ESTIMATORS}")
        if not 0.0 <= self.c <= 1.0:
            raise ValueError("damping constant must lie in [0, 1]")

    mode = UPFRONT
    adaptive = True

    def damping(self, week: int) -> float:
        return self.c


@dataclass(frozen=True)
class SequentialTS:
    c: float = 1.0
    belief_mode: str = "individual"

    def __post_init__(self):
        if self.belief_mode not in ("individual", "configuration"):
            raise ValueError(f"unknown belief mode {self.belief_mode!r}")
        if not 0.0 <= self.c <= 1.0:
            raise ValueError("damping constant must lie in [0, 1]")

    mode = SEQUENTIAL
    adaptive = True

    def damping(self, week: int) -> float:
        return self.c


# --------------------------------------------------------------------------
# snapshots
# --------------------------------------------------------------------------

def mask_to_week(full: AccruedDataset, week: int) -> AccruedDataset:
    """Snapshot D_week of a (possibly partially filled) full-trial dataset.

    Subjects enrolled after ``week`` are dropped; stage-2 fields and outcomes
    are hidden until the week they become available, so a snapshot never
    sees data from later weeks.
    """
    followup = full.design.timeline.followup_weeks
    keep = full.tau <= week
    tau = full.tau[keep]
    s2w = full.stage2_week[keep]
    staged = s2w <= week
    done = s2w + followup <= week
    return AccruedDataset(
        week=week, design=full.design, mode=full.mode,
        id=full.id[keep], tau=tau, kappa=np.where(staged, 2, 1), delta=done.astype(int),
        x1=full.x1[keep], a1=full.a1[keep], stage2_week=s2w,
        x21=np.where(staged, full.x21[keep], np.nan),
        response=np.where(staged, full.response[keep], -1),
        a2=np.where(staged, full.a2[keep], -1),
        y=np.where(done, full.y[keep], np.nan),
        p1=full.p1[keep], p2=np.where(staged[:, None], full.p2[keep], np.nan),
        assigned_regime=full.assigned_regime[keep], validate=False,
    )


def burn_in_satisfied(data: AccruedDataset, design: TrialDesign | None = None) -> bool:
    design = design or data.design
    need = design.burn_in.per_regime_completers
    if need <= 0:
        return True
    return bool(np.all(data.consistent_completers() >= need))


# --------------------------------------------------------------------------
# trial record
# --------------------------------------------------------------------------

@dataclass
class TrialRecord:
    final: AccruedDataset
    prob_history: list                 # (week, unit, probability)
    published: dict                    # week -> published probability state
    t_star: int | None
    fallbacks: int
    weight_state: aw.WeightState | None
    lmodels: LModelCache
    estimates: dict = field(default_factory=dict)  # week -> in-trial theta (up-front TS)
    policy: object = None

    @property
    def burn_in_done(self) -> bool:
        return self.t_star is not None

    @property
    def mode(self) -> str:
        return self.final.mode

    def snapshot(self, week: int) -> AccruedDataset:
        return mask_to_week(self.final, week)

    def weights(self, kind: str) -> np.ndarray:
        if self.weight_state is None:
            return np.ones((self.final.n, self.final.design.m))
        return self.weight_state.weight_matrix(self.final, kind)

    @property
    def mean_y(self) -> float:
        return float(np.mean(self.final.y))

    def frac_a1(self, a1: int) -> float:
        return float(np.mean(self.final.a1 == a1))

    @property
    def frac_consistent(self) -> np.ndarray:
        return self.final.consistent.mean(axis=0)

    def metrics(self, optimal_regime: int) -> dict:
        a1_opt = int(self.final.design.regime_a1[optimal_regime])
        return {"mean_y": self.mean_y, "prop_a1_opt": self.frac_a1(a1_opt),
                "prop_regime_opt": float(self.frac_consistent[optimal_regime])}


# --------------------------------------------------------------------------
# engine
# --------------------------------------------------------------------------

class _Trial:
    """Mutable state of one running trial; only touched by :func:`run_trial`."""

    def __init__(self, design: TrialDesign, params: ScenarioParams, policy, streams: TrialStreams,
                 maps: FeatureMaps, extend: bool):
        self.design, self.params, self.policy, self.maps = design, params, policy, maps
        self.mode = policy.mode
        self.assign_rng = streams["assignment"]
        self.draw_rng = streams["draws"]
        tl = design.timeline
        if params.enroll_window != tl.enroll_weeks:
            raise ValueError("scenario enroll_window and design timeline disagree")
        n = params.n_subjects
        tau = draw_enrollment_weeks(params, streams["enroll"])
        self.table = draw_potential_table(n, params, streams["covariates"])
        n_p1 = design.m if self.mode == UPFRONT else len(design.stage1_options)
        self.full = AccruedDataset(
            week=0, design=design, mode=self.mode, id=np.arange(n), tau=tau,
            kappa=np.ones(n, int), delta=np.zeros(n, int), x1=self.table.x1,
            a1=-np.ones(n, int), stage2_week=tau + tl.stage_delay_weeks,
            x21=np.full(n, np.nan), response=-np.ones(n, int), a2=-np.ones(n, int),
            y=np.full(n, np.nan), p1=np.full((n, n_p1), np.nan),
            p2=np.full((n, design.max_feasible), np.nan), assigned_regime=-np.ones(n, int),
            validate=False)
        self.lcache = LModelCache()
        self.t_star: int | None = None
        self.weight_state: aw.WeightState | None = None
        self.fallbacks = 0
        self.prob_history: list = []
        self.published: dict = {}
        self.estimates: dict = {}
        last_enroll = tl.enroll_weeks
        last_stage2 = tl.enroll_weeks + tl.stage_delay_weeks
        self.last_anchor = last_stage2 if self.mode == SEQUENTIAL else last_enroll
        self.last_decision = design.horizon - 1 if extend else self.last_anchor
        self.current = self._uniform_state()

    # -- probability states ----------------------------------------------

    def _uniform_state(self) -> dict:
        d = self.design
        if self.mode == UPFRONT:
            return {"r": d.uniform_p1(UPFRONT)}
        groups = {(a1, s): d.uniform_p2(a1, s) for a1 in d.stage1_options for s in (0, 1)}
        return {"p1": d.uniform_p1(SEQUENTIAL), "p2": groups}

    def stratum_propensities(self, state: dict, stage1_state: dict | None = None):
        """Per-regime (pi1, pi2[:, s]) under a published state.

        Sequentially, pi1 comes from the stage-1 vector of the cohort now
        reaching stage 2 (``stage1_state``) and pi2 from ``state``.
        """
        if self.mode == UPFRONT:
            return aw.upfront_stratum_propensities(state["r"], self.design)
        p1 = (stage1_state or state)["p1"]
        return aw.sequential_stratum_propensities(p1, state["p2"], self.design)

    def publish(self, week: int, state: dict) -> None:
        self.published[week] = state
        d = self.design
        if self.mode == UPFRONT:
            for j, reg in enumerate(d.regimes):
                self.prob_history.append((week, f"regime:{reg.label}", float(state["r"][j])))
        else:
            for a, p in zip(d.stage1_options, state["p1"]):
                self.prob_history.append((week, f"stage1:a1={a}", float(p)))
            for (a1, s), vec in sorted(state["p2"].items()):
                for a2, p in zip(d.feasible(a1, s), vec):
                    self.prob_history.append((week, f"stage2:a1={a1},r={s}:a2={a2}", float(p)))

    # -- adaptive computations -------------------------------------------

    def _upfront_estimate(self, data: AccruedDataset):
        kind = self.policy.estimator
        if kind == "IPW":
            return ipw_values(data)
        if kind == "WIPW":
            return ipw_values(data, self._weight_matrix(data, aw.WIPW))
        if kind == "AIPW":
            return aipw_values(data, self.lcache)
        if kind == "WAIPW":
            return aipw_values(data, self.lcache, self._weight_matrix(data, aw.WAIPW))
        return iaipw_values(data, self.lcache)

    def _weight_matrix(self, data, kind):
        if self.weight_state is None:
            return np.ones((data.n, self.design.m))
        return self.weight_state.weight_matrix(data, kind)

    def _upfront_probabilities(self, week: int, data: AccruedDataset) -> dict:
        ts = self.design.ts_config
        est = self._upfront_estimate(data)
        r, _ = thompson_regime_probabilities(est, self.policy.damping(week), ts.clip_lo,
                                             ts.clip_hi, ts.n_value_draws,
                                             self.design.direction, self.draw_rng)
        self.estimates[week] = est.theta
        return {"r": r}

    def _representative(self, data: AccruedDataset, a1: int, s: int) -> dict:
        grp = data.staged & (data.a1 == a1) & (data.response == s)
        if not grp.any():
            grp = data.staged
        return {"x1": np.array([data.x1[grp].mean()]), "a1": a1,
                "x21": np.array([data.x21[grp].mean()])}

    def _sequential_probabilities(self, week: int, data: AccruedDataset) -> dict:
        d, ts = self.design, self.design.ts_config
        c = self.policy.damping(week)
        qfit = qlearning_fit(data, self.maps)
        b1, b2 = ts.beta_draw_sizes
        draws = projection_beta_sampler(data, qfit, (b1, b2), self.draw_rng,
                                        n_stage2=ts.stage2_draws, maps=self.maps)
        x1bar = {"x1": np.array([data.x1.mean()])}
        rho1 = sequential_beliefs_individual(x1bar, d.stage1_options, draws.stage1, 1,
                                             d.direction, self.maps)[0]
        p1 = damp_clip_normalize(rho1, c, ts.clip_lo, ts.clip_hi)
        groups = {}
        for a1 in d.stage1_options:
            for s in (0, 1):
                opts = d.feasible(a1, s)
                rho = sequential_beliefs_individual(self._representative(data, a1, s), opts,
                                                    draws.stage2, 2, d.direction, self.maps)[0]
                groups[(a1, s)] = (np.ones(1) if len(opts) == 1
                                   else damp_clip_normalize(rho, c, ts.clip_lo, ts.clip_hi))
        return {"p1": p1, "p2": groups, "draws": draws, "c": c}

    def _configuration_p2(self, state: dict, idx: np.ndarray, a1: int, s: int) -> np.ndarray:
        """Per-subject stage-2 vectors for configuration-mode sequential TS."""
        d, ts = self.design, self.design.ts_config
        opts = d.feasible(a1, s)
        if len(opts) == 1 or "draws" not in state:
            return np.repeat(state["p2"][(a1, s)][None, :], idx.size, axis=0)
        group = {"x1": self.full.x1[idx], "a1": a1, "x21": self.full.x21[idx]}
        rho = sequential_beliefs_configuration(group, opts, state["draws"].stage2, 2,
                                               d.direction, self.maps)
        return damp_clip_normalize(rho, state["c"], ts.clip_lo, ts.clip_hi)

    # -- weights -----------------------------------------------------------

    def _l_for_weights(self, data: AccruedDataset, week: int):
        if self.mode == UPFRONT:
            model_week = np.full(data.n, week)
            return self.lcache.evaluate(data, model_week, model_week)
        return self.lcache.evaluate(data, data.stage2_week, data.stage2_week)

    def _moments(self, data: AccruedDataset, week: int, theta_tilde=None):
        theta = ipw_values(data, strict=False).theta if theta_tilde is None else theta_tilde
        mu = aw.stratum_moments(data, np.nan_to_num(theta))
        try:
            l1, l2 = self._l_for_weights(data, week)
            nu = aw.nu_moments(data, np.nan_to_num(theta), l1, l2)
        except ProvenanceError:
            nu = np.full((self.design.m, 4), np.nan)
        valid = aw.stratum_support(data) & np.isfinite(theta)
        return theta, mu, nu, valid

    def _anchor(self, week: int, data: AccruedDataset) -> None:
        """Fix the burn-in moments from D_{t*} under the burn-in probabilities."""
        theta, mu, nu, valid = self._moments(data, week)
        burn = self._uniform_state()
        pi1, pi2 = self.stratum_propensities(burn, burn)
        xi = {aw.WIPW: np.where(valid, aw.xi_from_moments(aw.WIPW, mu, pi1, pi2), np.nan),
              aw.WAIPW: np.where(valid, aw.xi_from_moments(aw.WAIPW, nu, pi1, pi2), np.nan)}
        self.weight_state = aw.WeightState(burn_in_week=self.t_star, xi_burnin=xi,
                                           theta_tilde=theta)

    def _record_weights(self, week: int, data: AccruedDataset) -> None:
        if self.mode == UPFRONT:
            pi1, pi2 = self.stratum_propensities(self.published[week])
        else:
            cohort_week = week - self.design.timeline.stage_delay_weeks
            stage1 = self.published.get(cohort_week, self._uniform_state())
            pi1, pi2 = self.stratum_propensities(self.published[week], stage1)
        _, mu, nu, valid = self._moments(data, week, self.weight_state.theta_tilde)
        for kind, mom in ((aw.WIPW, mu), (aw.WAIPW, nu)):
            xi = aw.xi_from_moments(kind, mom, pi1, pi2)
            self.weight_state.record(kind, week, xi, valid & np.isfinite(xi))

    # -- the weekly step ---------------------------------------------------

    def step(self, week: int) -> None:
        d, tl = self.design, self.design.timeline
        data = mask_to_week(self.full, week - 1)
        deciding = week <= self.last_decision

        if deciding and data.completed.any():
            try:
                self.lcache.add(fit_l_models(data, self.maps, week=week))
            except SingularFitError:
                pass

        if self.t_star is None and burn_in_satisfied(data, d):
            self.t_star = week - 1
            self._anchor(week, data)

        if deciding:
            adaptive = self.policy.adaptive and self.t_star is not None
            refresh = (week - 1) % tl.update_period_weeks == 0
            if adaptive and refresh:
                try:
                    if self.mode == UPFRONT:
                        self.current = self._upfront_probabilities(week, data)
                    else:
                        self.current = self._sequential_probabilities(week, data)
                except _RECOVERABLE as exc:
                    self.fallbacks += 1
                    log.warning("week %d: probability update failed (%s); reusing previous",
                                week, exc)
            self.publish(week, self.current)

        self._fire_stage2(week)
        self._enroll(week)
        self._assign_stage2(week)
        self._fire_outcomes(week)

        if self.t_star is not None and week > self.t_star and deciding:
            self._record_weights(week, data)

    def _enroll(self, week: int) -> None:
        idx = np.flatnonzero(self.full.tau == week)
        if idx.size == 0:
            return
        d, f = self.design, self.full
        u = self.assign_rng.random(idx.size)
        if self.mode == UPFRONT:
            r = self.published[week]["r"]
            reg = np.minimum(np.searchsorted(np.cumsum(r), u, side="right"), d.m - 1)
            f.assigned_regime[idx] = reg
            f.a1[idx] = d.regime_a1[reg]
            f.p1[idx] = r
        else:
            p1 = self.published[week]["p1"]
            k = np.minimum(np.searchsorted(np.cumsum(p1), u, side="right"), p1.size - 1)
            f.a1[idx] = np.asarray(d.stage1_options)[k]
            f.p1[idx] = p1

    def _fire_stage2(self, week: int) -> None:
        idx = np.flatnonzero(self.full.stage2_week == week)
        if idx.size == 0:
            return
        f = self.full
        x21, resp = stage2_score(f.x1[idx], f.a1[idx], self.table.eps1[idx], self.params)
        f.x21[idx] = x21
        f.response[idx] = resp

    def _assign_stage2(self, week: int) -> None:
        idx = np.flatnonzero(self.full.stage2_week == week)
        if idx.size == 0:
            return
        d, f = self.design, self.full
        u = self.assign_rng.random(idx.size)
        if self.mode == UPFRONT:
            reg = f.assigned_regime[idx]
            resp = f.response[idx]
            f.a2[idx] = d.regime_a2[reg, resp]
            for i, j, s in zip(idx, reg, resp):
                opts = d.feasible(d.regime_a1[j], s)
                r = f.p1[i]
                share = d.share_a1[j]
                pi1 = r[share].sum()
                f.p2[i, :len(opts)] = [r[share & (d.regime_a2[:, s] == o)].sum() / pi1
                                       for o in opts]
            return
        state = self.published[week]
        for a1 in d.stage1_options:
            for s in (0, 1):
                sel = idx[(f.a1[idx] == a1) & (f.response[idx] == s)]
                if sel.size == 0:
                    continue
                opts = d.feasible(a1, s)
                if self.policy.adaptive and getattr(self.policy, "belief_mode", "") == \
                        "configuration" and self.t_star is not None:
                    probs = self._configuration_p2(state, sel, a1, s)
                else:
                    probs = np.repeat(state["p2"][(a1, s)][None, :], sel.size, axis=0)
                uu = u[np.searchsorted(idx, sel)]
                k = (uu[:, None] >= np.cumsum(probs, axis=1)).sum(axis=1)
                k = np.minimum(k, len(opts) - 1)
                f.a2[sel] = np.asarray(opts)[k]
                f.p2[sel, :len(opts)] = probs

    def _fire_outcomes(self, week: int) -> None:
        f = self.full
        idx = np.flatnonzero(f.stage2_week + self.design.timeline.followup_weeks == week)
        if idx.size == 0:
            return
        f.y[idx] = outcome_mean(f.x1[idx], f.a1[idx], f.x21[idx], f.a2[idx],
                                self.params) + self.table.eps2[idx]


def run_trial(design: TrialDesign, scenario: ScenarioParams, policy, streams: TrialStreams,
              maps: FeatureMaps = DEFAULT_MAPS, extend: bool = False) -> TrialRecord:
    """Simulate one trial week by week.

    With ``extend=True`` probabilities, models and weights keep being
    computed through the last week before the horizon even after all
    assignments are done (used by the martingale diagnostics).
    """
    trial = _Trial(design, scenario, policy, streams, maps, extend)
    for week in range(1, design.horizon + 1):
        trial.step(week)
    final = mask_to_week(trial.full, design.horizon)
    final = AccruedDataset(**{**{k: getattr(final, k) for k in _FIELDS}, "validate": True})
    if not np.all(final.completed):
        raise RuntimeError("horizon reached with incomplete subjects")
    return TrialRecord(final=final, prob_history=trial.prob_history, published=trial.published,
                       t_star=trial.t_star, fallbacks=trial.fallbacks,
                       weight_state=trial.weight_state, lmodels=trial.lcache,
                       estimates=trial.estimates, policy=policy)


_FIELDS = ("week", "design", "mode", "id", "tau", "kappa", "delta", "x1", "a1", "stage2_week",
           "x21", "response", "a2", "y", "p1", "p2", "assigned_regime")
