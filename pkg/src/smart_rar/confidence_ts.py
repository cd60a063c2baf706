"""Confidence distributions and the Thompson-sampling map to probabilities."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .core_model import AccruedDataset
from .estimators import DEFAULT_MAPS, FeatureMaps, QFit, ValueEstimates, ols, pseudo_outcomes


class InferenceError(ValueError):
    """Covariance or derivative is unusable (singular, non-finite)."""


class DegenerateBeliefError(ValueError):
    """Beliefs are all zero so no probability vector can be formed."""


EIG_FLOOR = 1e-12


@dataclass(frozen=True)
class ValueConfidence:
    mean: np.ndarray
    cov: np.ndarray


def sandwich_cov(estimates, n: int | None = None) -> np.ndarray:
    """Stacked M-estimator covariance A^{-1} B A^{-T} / n with A = diag(derivatives).

    ``estimates`` is a :class:`ValueEstimates` bundle or a sequence of
    per-regime estimates sharing the same subjects.  B is the average outer
    product of the per-subject contribution vectors.
    """
    if isinstance(estimates, ValueEstimates):
        contrib, deriv = estimates.contributions, estimates.derivative
    else:
        contrib = np.column_stack([e.contributions for e in estimates])
        deriv = np.array([e.derivative for e in estimates])
    if n is None:
        n = contrib.shape[0]
    if n <= 0:
        raise InferenceError("no contributing subjects")
    if np.any(deriv == 0.0) or not np.all(np.isfinite(deriv)):
        raise InferenceError("derivative matrix is singular")
    b = contrib.T @ contrib / contrib.shape[0]
    return b / np.outer(deriv, deriv) / n


def _sym_sqrt(cov: np.ndarray) -> np.ndarray:
    cov = np.asarray(cov, float)
    if not np.all(np.isfinite(cov)):
        raise InferenceError("covariance has non-finite entries")
    cov = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(cov)
    floor = EIG_FLOOR * max(np.trace(cov), 0.0)
    vals = np.maximum(vals, floor)
    return (vecs * np.sqrt(vals)) @ vecs.T


def draw_value_samples(conf: ValueConfidence, B: int, rng: np.random.Generator | None = None,
                       z: np.ndarray | None = None) -> np.ndarray:
    """B multivariate-normal draws using the symmetric square root of the covariance.

    The symmetric root makes the draws equivariant under simultaneous
    permutation of the regimes and of the columns of ``z``.
    """
    if B < 1:
        raise ValueError("B must be >= 1")
    root = _sym_sqrt(conf.cov)
    if z is None:
        z = rng.standard_normal((B, root.shape[0]))
    return np.asarray(conf.mean, float)[None, :] + z @ root


def beliefs_from_draws(draws: np.ndarray, direction: str = "minimize") -> np.ndarray:
    """Fraction of rows in which each column is optimal; ties go to the lowest index."""
    draws = np.atleast_2d(draws)
    best = np.argmin(draws, axis=1) if direction == "minimize" else np.argmax(draws, axis=1)
    return np.bincount(best, minlength=draws.shape[1]) / draws.shape[0]


def damp_clip_normalize(rho, c: float, lo: float, hi: float) -> np.ndarray:
    """Damp beliefs with exponent c, normalize, clip to [lo, hi] and renormalize.

    After the final renormalization entries can fall below ``lo``; they are
    always at least lo / (1 + m * hi).
    """
    rho = np.asarray(rho, float)
    if not 0.0 <= c <= 1.0:
        raise ValueError("damping exponent must lie in [0, 1]")
    p = np.power(rho, c)  # 0**0 == 1
    total = p.sum(axis=-1, keepdims=True)
    if np.any(total <= 0.0):
        raise DegenerateBeliefError("all beliefs are zero")
    p = np.clip(p / total, lo, hi)
    return p / p.sum(axis=-1, keepdims=True)


def thompson_regime_probabilities(est: ValueEstimates, c: float, lo: float, hi: float, B: int,
                                  direction: str, rng: np.random.Generator):
    """Regime randomization vector from a value-estimate bundle; returns (r, rho)."""
    conf = ValueConfidence(mean=est.theta, cov=sandwich_cov(est))
    draws = draw_value_samples(conf, B, rng)
    rho = beliefs_from_draws(draws, direction)
    return damp_clip_normalize(rho, c, lo, hi), rho


# --------------------------------------------------------------------------
# Q-learning coefficient draws
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class BetaDraws:
    stage1: np.ndarray         # (b2 * b1, p1)
    stage2: np.ndarray         # (B2, p2)
    stage1_parent: np.ndarray  # outer stage-2 draw that generated each stage-1 row

    @property
    def sizes(self) -> tuple[int, int]:
        return self.stage1.shape[0], self.stage2.shape[0]


def projection_beta_sampler(data: AccruedDataset, qfit: QFit, sizes: tuple[int, int],
                            rng: np.random.Generator, n_stage2: int = 1000,
                            maps: FeatureMaps = DEFAULT_MAPS) -> BetaDraws:
    """Nested draws propagating stage-2 uncertainty into the stage-1 coefficients.

    ``sizes`` is (b1, b2).  Each of the b2 outer stage-2 draws rebuilds the
    pseudo outcomes, refits stage 1, and contributes b1 stage-1 draws.  The
    stage-2 set itself is ``n_stage2`` direct draws from the stage-2 fit.
    """
    b1, b2 = sizes
    sub = data.subset(data.completed)
    root2 = _sym_sqrt(qfit.stage2.cov)
    outer = qfit.stage2.beta[None, :] + rng.standard_normal((b2, root2.shape[0])) @ root2
    v2 = pseudo_outcomes(sub, outer, maps)
    refit = ols(maps.stage1(sub.x1, sub.a1), v2)  # (p1, b2) coefficients
    root_g = _sym_sqrt(refit.gram_inv)
    p1 = root_g.shape[0]
    z = rng.standard_normal((b2, b1, p1)) @ root_g
    inner = refit.beta.T[:, None, :] + np.sqrt(refit.sigma2)[:, None, None] * z
    stage2 = qfit.stage2.beta[None, :] + rng.standard_normal((n_stage2, root2.shape[0])) @ root2
    parent = np.repeat(np.arange(b2), b1)
    return BetaDraws(stage1=inner.reshape(b2 * b1, p1), stage2=stage2, stage1_parent=parent)


def _q_matrix(history: dict, feasible, draws: np.ndarray, stage: int,
              maps: FeatureMaps) -> np.ndarray:
    """(n_subjects, B, |feasible|) Q values under each coefficient draw."""
    x1 = np.atleast_1d(np.asarray(history["x1"], float))
    out = []
    for a in feasible:
        if stage == 1:
            feats = maps.stage1(x1, a)
        else:
            feats = maps.stage2(x1, history["a1"], history["x21"], a)
        out.append(feats @ draws.T)
    return np.stack(out, axis=-1)


def _argbest(q: np.ndarray, direction: str) -> np.ndarray:
    return np.argmin(q, axis=-1) if direction == "minimize" else np.argmax(q, axis=-1)


def sequential_beliefs_individual(history: dict, feasible, draws: np.ndarray, stage: int,
                                  direction: str = "minimize",
                                  maps: FeatureMaps = DEFAULT_MAPS) -> np.ndarray:
    """Per-subject beliefs over ``feasible`` options, shape (n_subjects, |feasible|)."""
    feasible = tuple(feasible)
    n = np.atleast_1d(history["x1"]).shape[0]
    if len(feasible) == 1:
        return np.ones((n, 1))
    best = _argbest(_q_matrix(history, feasible, draws, stage, maps), direction)
    counts = np.stack([(best == k).sum(axis=1) for k in range(len(feasible))], axis=1)
    return counts / draws.shape[0]


def sequential_beliefs_configuration(group: dict, feasible, draws: np.ndarray, stage: int,
                                     direction: str = "minimize",
                                     maps: FeatureMaps = DEFAULT_MAPS,
                                     max_bits: float = 12.0) -> np.ndarray:
    """Beliefs from the configuration optimizing the group-average Q, marginalized per subject.

    Each subject's Q term depends only on its own option, so the group
    average is separable and its optimum is the per-subject optimum.  Past
    ``max_bits`` bits of configurations the enumeration is skipped and the
    (identical) individual beliefs are returned.
    """
    feasible = tuple(feasible)
    n = np.atleast_1d(group["x1"]).shape[0]
    z = len(feasible)
    if z == 1:
        return np.ones((n, 1))
    if n * math.log2(z) > max_bits:
        return sequential_beliefs_individual(group, feasible, draws, stage, direction, maps)
    q = _q_matrix(group, feasible, draws, stage, maps)  # (n, B, z)
    configs = np.array(list(itertools.product(range(z), repeat=n)))  # (z^n, n)
    avg = np.zeros((configs.shape[0], draws.shape[0]))
    for v in range(n):
        avg += q[v][:, configs[:, v]].T
    avg /= n
    best = np.argmin(avg, axis=0) if direction == "minimize" else np.argmax(avg, axis=0)
    belief = np.bincount(best, minlength=configs.shape[0]) / draws.shape[0]
    out = np.zeros((n, z))
    for v in range(n):
        np.add.at(out[v], configs[:, v], belief)
    return out
