"""Variance-stabilizing adaptive weights for the weighted IPW and AIPW estimators.

For each regime the conditional second moment of the estimating function
at week t is estimated as Xi_t from the accrued data and the week's
published propensities; subjects anchored at week t get
W_t = sqrt(Xi_anchor / Xi_t), where Xi_anchor is evaluated once at the end
of burn-in with the (fixed) burn-in probabilities.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core_model import SEQUENTIAL, AccruedDataset, PositivityError, TrialDesign

XI_FLOOR = 1e-8
WIPW = "wipw"
WAIPW = "waipw"


def _check_pi(*pis):
    for p in pis:
        if np.any(np.asarray(p) <= 0.0):
            raise PositivityError("propensities must be positive")


def stratum_moments(data: AccruedDataset, theta_tilde: np.ndarray) -> np.ndarray:
    """(m, 2) inverse-propensity-weighted second moments by response stratum.

    Column s holds N_t^{-1} sum over completers of I(R=s) C (Y - theta)^2 / (pi1 pi2),
    with N_t the number of completers.
    """
    m = data.design.m
    rows = np.flatnonzero(data.completed)
    out = np.zeros((m, 2))
    if rows.size == 0:
        return out
    c = data.consistent[rows]
    pi1, pi2 = data.propensities
    pi = pi1[rows] * pi2[rows]
    resid2 = (data.y[rows][:, None] - np.asarray(theta_tilde)[None, :]) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(c, resid2 / pi, 0.0)
    resp = data.response[rows]
    for s in (0, 1):
        out[:, s] = term[resp == s].sum(axis=0) / rows.size
    return out


def stratum_second_moments(data: AccruedDataset, reg_index: int,
                           theta_tilde: float) -> tuple[float, float]:
    theta = np.zeros(data.design.m)
    theta[reg_index] = theta_tilde
    mu = stratum_moments(data, theta)
    return float(mu[reg_index, 0]), float(mu[reg_index, 1])


def xi_wipw(mu0, mu1, pi1, pi2_resp, pi2_nonresp):
    _check_pi(pi1, pi2_resp, pi2_nonresp)
    return mu1 / (pi2_resp * pi1) + mu0 / (pi2_nonresp * pi1)


def wipw_weight(xi_burnin, xi_t, floor: float = XI_FLOOR):
    """sqrt(xi_burnin / xi_t), or 1 where either moment is degenerate."""
    xi_burnin = np.asarray(xi_burnin, float)
    xi_t = np.asarray(xi_t, float)
    ok = (xi_t >= floor) & (xi_burnin >= floor) & np.isfinite(xi_t) & np.isfinite(xi_burnin)
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(ok, np.sqrt(xi_burnin / np.where(ok, xi_t, 1.0)), 1.0)
    return float(w) if w.ndim == 0 else w


def nu_moments(data: AccruedDataset, theta_tilde: np.ndarray, l1: np.ndarray,
               l2: np.ndarray) -> np.ndarray:
    """(m, 4) columns nu, nu1, nu2_0, nu2_1 for the WAIPW weight.

    ``l1`` and ``l2`` are the (n, m) fitted stage-1 and stage-2 Q values
    used for the residuals; pass the models appropriate to the week.
    """
    m = data.design.m
    rows = np.flatnonzero(data.completed)
    out = np.zeros((m, 4))
    if rows.size == 0:
        return out
    c = data.consistent[rows]
    pi1, pi2 = data.propensities
    pi = pi1[rows] * pi2[rows]
    y = data.y[rows][:, None]
    resp = data.response[rows]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(c, 1.0 / pi, 0.0)
    n = rows.size
    out[:, 0] = (inv * (y - np.asarray(theta_tilde)[None, :]) ** 2).sum(axis=0) / n
    out[:, 1] = (inv * (y - l1[rows]) ** 2).sum(axis=0) / n
    r2 = inv * (y - l2[rows]) ** 2
    for s in (0, 1):
        out[:, 2 + s] = r2[resp == s].sum(axis=0) / n
    return out


def nu_components(data: AccruedDataset, reg_index: int, l1: np.ndarray, l2: np.ndarray,
                  theta_tilde: float) -> tuple[float, float, float, float]:
    theta = np.zeros(data.design.m)
    theta[reg_index] = theta_tilde
    nu = nu_moments(data, theta, l1, l2)[reg_index]
    return tuple(float(v) for v in nu)


def xi_waipw(nu, nu1, nu2_0, nu2_1, pi1, pi2_0, pi2_1):
    _check_pi(pi1, pi2_0, pi2_1)
    return (nu + nu1 * (1 - pi1) / pi1 + nu2_0 * (1 - pi2_0) / (pi2_0 * pi1)
            + nu2_1 * (1 - pi2_1) / (pi2_1 * pi1))


# --------------------------------------------------------------------------
# published propensities per regime and stratum
# --------------------------------------------------------------------------

def upfront_stratum_propensities(r: np.ndarray, design: TrialDesign
                                 ) -> tuple[np.ndarray, np.ndarray]:
    """pi1 (m,) and pi2 (m, 2) implied by regime vector r; pi2[:, s] is for response s."""
    r = np.asarray(r, float)
    pi1 = design.share_a1.astype(float) @ r
    pi2 = np.column_stack([design.share_a2[s].astype(float) @ r for s in (0, 1)]) / pi1[:, None]
    return pi1, pi2


def sequential_stratum_propensities(p1: np.ndarray, p2_groups: dict,
                                    design: TrialDesign) -> tuple[np.ndarray, np.ndarray]:
    """pi1 (m,) from a stage-1 vector and pi2 (m, 2) from per-(a1, response) vectors."""
    p1 = np.asarray(p1, float)
    pi1 = p1[design.a1_index(design.regime_a1)]
    pi2 = np.empty((design.m, 2))
    for j, reg in enumerate(design.regimes):
        for s in (0, 1):
            opts = design.feasible(reg.a1, s)
            pi2[j, s] = p2_groups[(reg.a1, s)][opts.index(reg.a2_for(s))]
    return pi1, pi2


def xi_from_moments(kind: str, moments: np.ndarray, pi1: np.ndarray, pi2: np.ndarray
                    ) -> np.ndarray:
    """Vectorized Xi over regimes for ``kind`` in {wipw, waipw}."""
    if kind == WIPW:
        return xi_wipw(moments[:, 0], moments[:, 1], pi1, pi2[:, 1], pi2[:, 0])
    return xi_waipw(moments[:, 0], moments[:, 1], moments[:, 2], moments[:, 3],
                    pi1, pi2[:, 0], pi2[:, 1])


# --------------------------------------------------------------------------
# weight state
# --------------------------------------------------------------------------

@dataclass
class WeightState:
    """Burn-in anchor and the per-week weight cache.

    The anchor fields are set once when burn-in completes; ``weekly`` maps
    kind -> week -> (xi_t, W_t) and is appended to by the engine only.
    """

    burn_in_week: int
    xi_burnin: dict            # kind -> (m,)
    theta_tilde: np.ndarray    # pilot estimate on the burn-in data
    weekly: dict = field(default_factory=lambda: {WIPW: {}, WAIPW: {}})
    fallbacks: int = 0         # (week, regime, kind) cells where W fell back to 1

    def record(self, kind: str, week: int, xi_t: np.ndarray, valid: np.ndarray) -> np.ndarray:
        xi_t = np.asarray(xi_t, float)
        b = np.asarray(self.xi_burnin[kind], float)
        ok = (np.asarray(valid, bool) & np.isfinite(xi_t) & (xi_t >= XI_FLOOR)
              & np.isfinite(b) & (b >= XI_FLOOR))
        self.fallbacks += int((~ok).sum())
        w = np.where(ok, wipw_weight(b, xi_t), 1.0)
        self.weekly[kind][week] = (np.asarray(xi_t, float), w)
        return w

    def weight_for_week(self, kind: str, week: int) -> np.ndarray:
        if week <= self.burn_in_week or week not in self.weekly[kind]:
            return np.ones_like(self.theta_tilde)
        return self.weekly[kind][week][1]

    def weight_matrix(self, data: AccruedDataset, kind: str) -> np.ndarray:
        """(n, m) weights keyed by each subject's anchor week."""
        anchor = data.stage2_week if data.mode == SEQUENTIAL else data.tau
        m = data.design.m
        out = np.ones((data.n, m))
        for week in np.unique(anchor):
            if week <= self.burn_in_week or week not in self.weekly[kind]:
                continue
            out[anchor == week] = self.weekly[kind][week][1]
        return out


def weights_for_dataset(data: AccruedDataset, reg_index: int, kind: str,
                        state: WeightState | None) -> np.ndarray:
    """Per-subject weight for one regime; all ones before burn-in completes."""
    if state is None:
        return np.ones(data.n)
    return state.weight_matrix(data, kind)[:, reg_index]


def stratum_support(data: AccruedDataset) -> np.ndarray:
    """(m,) True where both response strata hold a consistent completer."""
    c = data.consistent & data.completed[:, None]
    ok = np.ones(data.design.m, dtype=bool)
    for s in (0, 1):
        ok &= (c & (data.response == s)[:, None]).any(axis=0)
    return ok


__all__ = [
    "WIPW", "WAIPW", "WeightState", "stratum_moments", "stratum_second_moments",
    "xi_wipw", "wipw_weight", "nu_moments", "nu_components", "xi_waipw",
    "upfront_stratum_propensities", "sequential_stratum_propensities", "xi_from_moments",
    "weights_for_dataset", "stratum_support",
]
