"""Value estimators for embedded regimes and the Q-learning recursion.

All estimators are vectorized over the m regimes: they return a
:class:`ValueEstimates` bundle whose ``regime(j)`` view is the per-regime
:class:`ValueEstimate`.  Per-subject contributions are the estimating
function evaluated at the point estimate, so they sum to zero.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import linalg

from .core_model import SEQUENTIAL, AccruedDataset, TrialDesign


class SingularFitError(np.linalg.LinAlgError):
    """Design matrix is rank deficient at the configured pivot tolerance."""


class EstimationUndefined(ValueError):
    """No data to support the estimate (e.g. zero consistent completers)."""


class ProvenanceError(KeyError):
    """A fitted model needed for a subject's anchor week is not available."""


# --------------------------------------------------------------------------
# OLS kernel
# --------------------------------------------------------------------------

PIVOT_TOL = 1e-10


@dataclass(frozen=True)
class OlsFit:
    beta: np.ndarray       # (p,) or (p, k) for k stacked responses
    gram_inv: np.ndarray   # (X'X)^{-1}
    sigma2: np.ndarray     # mean squared residual, scalar or (k,)
    n: int

    @property
    def cov(self) -> np.ndarray:
        """sigma2 * (X'X)^{-1}; stacked along a leading axis for multi-response fits."""
        s2 = np.asarray(self.sigma2)
        if s2.ndim == 0:
            return s2 * self.gram_inv
        return s2[:, None, None] * self.gram_inv[None]


def ols(X: np.ndarray, y: np.ndarray, tol: float = PIVOT_TOL) -> OlsFit:
    """Least squares through the normal equations with a Cholesky factorization.

    The Gram matrix is equilibrated to unit diagonal first; a squared pivot
    below ``tol`` (relative to the largest) is treated as rank deficiency
    and raised rather than regularized.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    if n < p:
        raise SingularFitError(f"{n} rows for {p} features")
    gram = X.T @ X
    scale = np.sqrt(np.diag(gram))
    if np.any(scale == 0.0) or not np.all(np.isfinite(gram)):
        raise SingularFitError("design has an all-zero or non-finite column")
    gs = gram / scale[:, None] / scale[None, :]
    try:
        chol = np.linalg.cholesky(gs)
    except np.linalg.LinAlgError as exc:
        raise SingularFitError(f"Gram matrix not positive definite ({exc})") from None
    piv = np.diag(chol) ** 2
    if piv.min() < tol * piv.max():
        raise SingularFitError(
            f"rank deficient design: pivot ratio {piv.min() / piv.max():.3e} "
            f"(condition estimate {piv.max() / piv.min():.3e})")
    factor = (chol, True)
    xty = (X.T @ y) / (scale if y.ndim == 1 else scale[:, None])
    beta = linalg.cho_solve(factor, xty)
    beta = beta / (scale if y.ndim == 1 else scale[:, None])
    gram_inv = linalg.cho_solve(factor, np.eye(p)) / scale[:, None] / scale[None, :]
    resid = y - X @ beta
    sigma2 = np.mean(resid ** 2, axis=0)
    return OlsFit(beta=beta, gram_inv=gram_inv, sigma2=sigma2, n=n)


# --------------------------------------------------------------------------
# feature maps
# --------------------------------------------------------------------------

def q2_features(x1, a1, x21, a2) -> np.ndarray:
    """Intercept, x1, I(a1=1), x21 and dummies for a2 in 1..4."""
    x1 = np.asarray(x1, float)
    n = x1.shape[0]
    a1 = np.broadcast_to(np.asarray(a1), (n,))
    a2 = np.broadcast_to(np.asarray(a2), (n,))
    return np.column_stack([np.ones(n), x1, (a1 == 1).astype(float),
                            np.broadcast_to(np.asarray(x21, float), (n,)),
                            (a2 == 1), (a2 == 2), (a2 == 3), (a2 == 4)]).astype(float)


def q1_features(x1, a1) -> np.ndarray:
    """Intercept, x1 and a1 for the stage-1 Q-function."""
    x1 = np.asarray(x1, float)
    n = x1.shape[0]
    return np.column_stack([np.ones(n), x1, np.broadcast_to(np.asarray(a1, float), (n,))])


def l1_features(x1) -> np.ndarray:
    """Stage-1 augmentation model features.

    The regime-specific stage-1 fit only uses subjects with a1 equal to the
    regime's a1, where a1 and x1*a1 are constant or collinear with the other
    columns; intercept and slope in x1 span the same model.
    """
    x1 = np.asarray(x1, float)
    return np.column_stack([np.ones(x1.shape[0]), x1])


@dataclass(frozen=True)
class FeatureMaps:
    stage2: Callable = q2_features
    stage1: Callable = q1_features
    lstage1: Callable = l1_features


DEFAULT_MAPS = FeatureMaps()


def feasible_options(data: AccruedDataset) -> np.ndarray:
    """(n, max_feasible) feasible stage-2 options for staged subjects, -1 padded."""
    resp = np.where(data.staged, data.response, 0)
    return data.design.feasible_table[data.a1_idx, resp]


def pseudo_outcomes(data: AccruedDataset, beta2: np.ndarray, maps: FeatureMaps = DEFAULT_MAPS
                    ) -> np.ndarray:
    """Optimized stage-2 fitted value over each subject's feasible set.

    ``beta2`` may be one coefficient vector or a (b, p) matrix of draws, in
    which case an (n, b) matrix is returned.  Subjects whose feasible set has
    a single option carry their observed outcome back instead.
    """
    design = data.design
    opts = feasible_options(data)
    b2 = np.atleast_2d(beta2)
    best = None
    for k in range(opts.shape[1]):
        col = opts[:, k]
        feats = maps.stage2(data.x1, data.a1, data.x21, np.maximum(col, 0))
        q = feats @ b2.T
        q = np.where((col >= 0)[:, None], q, np.nan)
        if best is None:
            best = q
        elif design.direction == "maximize":
            best = np.where(np.isnan(q) | (best >= q), best, q)
        else:
            best = np.where(np.isnan(q) | (best <= q), best, q)
    single = (opts >= 0).sum(axis=1) == 1
    best = np.where(single[:, None], data.y[:, None], best)
    return best[:, 0] if np.ndim(beta2) == 1 else best


# --------------------------------------------------------------------------
# augmentation models
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class LModelSet:
    beta2: np.ndarray   # (p2,)
    beta1: np.ndarray   # (m, p1)
    week: int
    maps: FeatureMaps = field(default=DEFAULT_MAPS)

    def __post_init__(self):
        p2 = self.maps.stage2(np.zeros(1), 0, np.zeros(1), 0).shape[1]
        p1 = self.maps.lstage1(np.zeros(1)).shape[1]
        if self.beta2.shape != (p2,) or self.beta1.shape[1] != p1:
            raise ValueError("coefficient lengths do not match feature maps")


def regime_stage2_values(data: AccruedDataset, beta2: np.ndarray,
                         maps: FeatureMaps = DEFAULT_MAPS) -> np.ndarray:
    """(n, m) Q2 evaluated at each regime's (a1, a2-for-observed-response); 0 before stage 2.

    ``beta2`` is one vector or an (n, p) matrix of per-subject coefficients.
    """
    d = data.design
    out = np.zeros((data.n, d.m))
    d2 = data.regime_a2_for_subject
    x21 = np.where(data.staged, data.x21, 0.0)
    for j in range(d.m):
        feats = maps.stage2(data.x1, d.regime_a1[j], x21, d2[:, j])
        out[:, j] = feats @ beta2 if np.ndim(beta2) == 1 else np.einsum("ip,ip->i", feats, beta2)
    return np.where(data.staged[:, None], out, 0.0)


def fit_l_models(data: AccruedDataset, maps: FeatureMaps = DEFAULT_MAPS,
                 week: int | None = None) -> LModelSet:
    """Backward fit of the augmentation functions on the completers of ``data``."""
    d = data.design
    comp = data.completed
    if not comp.any():
        raise SingularFitError("no completers")
    sub = data.subset(comp)
    feats2 = maps.stage2(sub.x1, sub.a1, sub.x21, sub.a2)
    beta2 = ols(feats2, sub.y).beta
    v2 = regime_stage2_values(sub, beta2, maps)
    resp = sub.response
    sizes = (d.feasible_table[sub.a1_idx, resp] >= 0).sum(axis=1)
    v2 = np.where((sizes == 1)[:, None], sub.y[:, None], v2)
    f1 = maps.lstage1(sub.x1)
    beta1 = np.empty((d.m, f1.shape[1]))
    for j in range(d.m):
        rows = sub.cbar1[:, j]
        beta1[j] = ols(f1[rows], v2[rows, j]).beta
    return LModelSet(beta2=beta2, beta1=beta1, week=data.week + 1 if week is None else week,
                     maps=maps)


class LModelCache:
    """Augmentation models keyed by the week they are used in.

    ``resolve(w)`` returns the latest model fitted at or before week w.  For
    weeks before the first fittable model it returns the earliest one when
    ``backfill`` is true (the default) and raises otherwise.
    """

    def __init__(self, backfill: bool = True):
        self.backfill = backfill
        self._models: dict[int, LModelSet] = {}
        self._stack = None

    def add(self, model: LModelSet) -> None:
        self._models[model.week] = model
        self._stack = None

    def __len__(self) -> int:
        return len(self._models)

    def __contains__(self, week: int) -> bool:
        return week in self._models

    @property
    def weeks(self) -> list[int]:
        return sorted(self._models)

    def resolve(self, week: int) -> LModelSet:
        return self._models[self.weeks[int(self._index(np.array([week]))[0])]]

    def _index(self, weeks: np.ndarray) -> np.ndarray:
        ws = np.array(self.weeks)
        if ws.size == 0:
            raise ProvenanceError("no augmentation model has been fitted")
        idx = np.searchsorted(ws, weeks, side="right") - 1
        if np.any(idx < 0):
            if not self.backfill:
                raise ProvenanceError(f"no model at or before week {int(np.min(weeks))}")
            idx = np.maximum(idx, 0)
        return idx

    def _stacked(self):
        if self._stack is None:
            if not self._models:
                raise ProvenanceError("no augmentation model has been fitted")
            models = [self._models[w] for w in self.weeks]
            self._stack = (np.stack([m.beta2 for m in models]),
                           np.stack([m.beta1 for m in models]), models[0].maps)
        return self._stack

    def evaluate(self, data: AccruedDataset, stage1_weeks=None, stage2_weeks=None
                 ) -> tuple[np.ndarray, np.ndarray]:
        """(L1, L2) as (n, m) arrays using each subject's anchor week.

        By default both stages use the enrollment week up-front, while
        sequentially stage 1 uses the enrollment week and stage 2 the
        stage-2 assignment week.  Either can be overridden per subject.
        """
        b2, b1, maps = self._stacked()
        if stage1_weeks is None:
            stage1_weeks = data.tau
        if stage2_weeks is None:
            stage2_weeks = data.stage2_week if data.mode == SEQUENTIAL else data.tau
        k1 = self._index(np.broadcast_to(stage1_weeks, (data.n,)))
        k2 = self._index(np.broadcast_to(stage2_weeks, (data.n,)))
        l1 = np.einsum("ip,ijp->ij", maps.lstage1(data.x1), b1[k1])
        l2 = regime_stage2_values(data, b2[k2], maps)
        return l1, l2


# --------------------------------------------------------------------------
# value estimates
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ValueEstimate:
    theta: float
    contributions: np.ndarray
    derivative: float
    second_moment: float
    n_used: int


@dataclass(frozen=True)
class ValueEstimates:
    theta: np.ndarray          # (m,)
    contributions: np.ndarray  # (n_used, m)
    derivative: np.ndarray     # (m,)
    second_moment: np.ndarray  # (m,)
    n_used: int
    rows: np.ndarray           # dataset row indices of the contributing subjects

    def regime(self, j: int) -> ValueEstimate:
        return ValueEstimate(theta=float(self.theta[j]), contributions=self.contributions[:, j],
                             derivative=float(self.derivative[j]),
                             second_moment=float(self.second_moment[j]), n_used=self.n_used)


def _weights(weights, n: int, m: int) -> np.ndarray:
    if weights is None:
        return np.ones((n, m))
    w = np.asarray(weights, dtype=float)
    if w.ndim == 1:
        w = np.repeat(w[:, None], m, axis=1)
    if w.shape != (n, m):
        raise ValueError(f"weights must have shape ({n},) or ({n}, {m})")
    return w


def _undefined(mask: np.ndarray, what: str, strict: bool):
    if strict and mask.any():
        raise EstimationUndefined(f"{what} undefined for regimes {np.flatnonzero(mask).tolist()}")


def ipw_values(data: AccruedDataset, weights=None, strict: bool = True) -> ValueEstimates:
    """Weighted IPW in ratio form over completers; W=1 gives plain IPW.

    With ``strict=False`` regimes without consistent completers get NaN
    instead of raising.
    """
    m = data.design.m
    rows = np.flatnonzero(data.completed)
    w = _weights(weights, data.n, m)[rows]
    c = data.consistent[rows]
    pi1, pi2 = data.propensities
    pi = pi1[rows] * pi2[rows]
    y = data.y[rows]
    with np.errstate(divide="ignore", invalid="ignore"):
        mass = np.where(c, w / pi, 0.0)
    total = mass.sum(axis=0)
    bad = total <= 0.0
    _undefined(bad, "IPW", strict)
    with np.errstate(invalid="ignore", divide="ignore"):
        theta = (mass * y[:, None]).sum(axis=0) / total
    theta = np.where(bad, np.nan, theta)
    contrib = mass * (y[:, None] - np.where(bad, 0.0, theta)[None, :])
    n = rows.size
    return ValueEstimates(theta=theta, contributions=contrib, derivative=-mass.mean(axis=0),
                          second_moment=np.mean(contrib ** 2, axis=0), n_used=n, rows=rows)


def _l_arrays(data: AccruedDataset, lmodels):
    if isinstance(lmodels, LModelCache):
        return lmodels.evaluate(data)
    l1, l2 = lmodels
    return np.asarray(l1, float), np.asarray(l2, float)


def aipw_values(data: AccruedDataset, lmodels, weights=None) -> ValueEstimates:
    """Weighted AIPW normalized by the weighted completer count.

    ``lmodels`` is an :class:`LModelCache` or a pair of (n, m) arrays
    giving L1 and L2 for every subject and regime.
    """
    m = data.design.m
    rows = np.flatnonzero(data.completed)
    if rows.size == 0:
        raise EstimationUndefined("AIPW needs at least one completer")
    w = _weights(weights, data.n, m)[rows]
    l1, l2 = _l_arrays(data, lmodels)
    l1, l2 = l1[rows], l2[rows]
    c = data.consistent[rows]
    cb = data.cbar1[rows]
    pi1, pi2 = data.propensities
    pi1, pi12 = pi1[rows], pi1[rows] * pi2[rows]
    y = data.y[rows][:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_y = np.where(c, y / pi12, 0.0)
        s1 = np.where(cb, 1.0 / pi1, 0.0)
        s2 = np.where(c, 1.0 / pi12, 0.0)
    psi = t_y + (1.0 - s1) * l1 + (s1 - s2) * l2
    wsum = w.sum(axis=0)
    if np.any(wsum <= 0.0):
        raise EstimationUndefined("AIPW weights sum to zero")
    theta = (w * psi).sum(axis=0) / wsum
    contrib = w * (psi - theta[None, :])
    return ValueEstimates(theta=theta, contributions=contrib, derivative=-w.mean(axis=0),
                          second_moment=np.mean(contrib ** 2, axis=0), n_used=rows.size,
                          rows=rows)


def iaipw_values(data: AccruedDataset, lmodels) -> ValueEstimates:
    """Interim AIPW over all enrolled subjects, with unit weights."""
    n = data.n
    if n == 0:
        raise EstimationUndefined("IAIPW needs at least one enrolled subject")
    nu_delta = data.completed.sum() / n
    nu2 = data.staged.sum() / n
    if nu_delta == 0:
        raise EstimationUndefined("IAIPW needs at least one completer")
    l1, l2 = _l_arrays(data, lmodels)
    c = data.consistent & data.completed[:, None]
    cb2 = data.cbar1 & data.staged[:, None]
    pi1, pi2 = data.propensities
    pi12 = pi1 * pi2
    y = np.where(data.completed, data.y, 0.0)[:, None]
    # same operation order as aipw_values so that all-complete data reduce bit-for-bit
    with np.errstate(divide="ignore", invalid="ignore"):
        t_y = np.where(c, y / (pi12 * nu_delta), 0.0)
        s1 = np.where(cb2, 1.0 / (pi1 * nu2), 0.0)
        s2 = np.where(c, 1.0 / (pi12 * nu_delta), 0.0)
    l2 = np.where(data.staged[:, None], l2, 0.0)
    psi = t_y + (1.0 - s1) * l1 + (s1 - s2) * l2
    theta = psi.sum(axis=0) / n
    contrib = psi - theta[None, :]
    m = data.design.m
    return ValueEstimates(theta=theta, contributions=contrib, derivative=-np.ones(m),
                          second_moment=np.mean(contrib ** 2, axis=0), n_used=n,
                          rows=np.arange(n))


def ipw_value(data: AccruedDataset, reg_index: int, weights=None) -> ValueEstimate:
    w = None if weights is None else _column(weights, reg_index)
    est = ipw_values(data, w, strict=False)
    _undefined(np.isnan(est.theta[[reg_index]]), "IPW", True)
    return est.regime(reg_index)


def aipw_value(data: AccruedDataset, reg_index: int, lmodels, weights=None) -> ValueEstimate:
    w = None if weights is None else _column(weights, reg_index)
    return aipw_values(data, lmodels, w).regime(reg_index)


def iaipw_value(data: AccruedDataset, reg_index: int, lmodels) -> ValueEstimate:
    return iaipw_values(data, lmodels).regime(reg_index)


def _column(weights, j):
    w = np.asarray(weights, float)
    return w[:, j] if w.ndim == 2 else w


# --------------------------------------------------------------------------
# Q-learning
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class QFit:
    stage2: OlsFit
    stage1: OlsFit
    maps: FeatureMaps = field(default=DEFAULT_MAPS)

    @property
    def beta(self) -> tuple[np.ndarray, np.ndarray]:
        return self.stage1.beta, self.stage2.beta

    @property
    def cov(self) -> tuple[np.ndarray, np.ndarray]:
        return self.stage1.cov, self.stage2.cov


def qlearning_stage1(data: AccruedDataset, v2: np.ndarray,
                     maps: FeatureMaps = DEFAULT_MAPS) -> OlsFit:
    """Stage-1 OLS of pseudo outcomes on completers (``data`` already restricted)."""
    return ols(maps.stage1(data.x1, data.a1), v2)


def qlearning_fit(data: AccruedDataset, maps: FeatureMaps = DEFAULT_MAPS,
                  design: TrialDesign | None = None) -> QFit:
    """Backward OLS recursion on the completers of ``data``."""
    sub = data.subset(data.completed)
    if sub.n == 0:
        raise SingularFitError("no completers")
    fit2 = ols(maps.stage2(sub.x1, sub.a1, sub.x21, sub.a2), sub.y)
    v2 = pseudo_outcomes(sub, fit2.beta, maps)
    fit1 = qlearning_stage1(sub, v2, maps)
    return QFit(stage2=fit2, stage1=fit1, maps=maps)
