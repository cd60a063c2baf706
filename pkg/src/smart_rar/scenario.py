"""Generative model for the benchmark trial and a brute-force value oracle.

Each subject carries a baseline score X1 and two standard-normal-scaled
noise terms (eps1 for the interim score, eps2 for the outcome).  Because the
same triple evaluates every regime, potential outcomes are coupled across
regimes, which is what the oracle exploits.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core_model import TrialDesign


@dataclass(frozen=True)
class ScenarioParams:
    n_subjects: int = 1000
    enroll_window: int = 24
    gamma1: tuple[float, float, float] = (0.0, 0.9, -1.5)
    gamma2: tuple[float, ...] = (0.0, 0.3, -0.75, 0.6, -0.25, -0.75, -0.75, -0.85)
    x1_mean: float = 5.0
    x1_sd: float = 1.0
    eps1_sd: float = 1.0
    eps2_sd: float = 1.0
    response_fraction: float = 0.7
    stage_delay: int = 6
    followup: int = 6

    def __post_init__(self):
        if self.n_subjects < 1:
            raise ValueError("n_subjects must be >= 1")
        if self.enroll_window < 1:
            raise ValueError("enroll_window must be >= 1")
        if min(self.x1_sd, self.eps1_sd, self.eps2_sd) < 0:
            raise ValueError("standard deviations must be nonnegative")
        if not 0.0 < self.response_fraction < 1.0:
            raise ValueError("response_fraction must lie in (0, 1)")
        if len(self.gamma1) != 3 or len(self.gamma2) != 8:
            raise ValueError("gamma1 needs 3 and gamma2 needs 8 coefficients")


@dataclass(frozen=True)
class PotentialTable:
    """Per-subject draws that determine every regime's potential trajectory."""

    x1: np.ndarray
    eps1: np.ndarray
    eps2: np.ndarray

    def __len__(self) -> int:
        return int(self.x1.shape[0])


def draw_enrollment_weeks(params: ScenarioParams, rng: np.random.Generator) -> np.ndarray:
    """Each subject's enrollment week, independently uniform on 1..window."""
    return rng.integers(1, params.enroll_window + 1, size=params.n_subjects)


def draw_potential_table(n: int, params: ScenarioParams,
                         rng: np.random.Generator) -> PotentialTable:
    x1 = params.x1_mean + params.x1_sd * rng.standard_normal(n)
    eps1 = params.eps1_sd * rng.standard_normal(n)
    eps2 = params.eps2_sd * rng.standard_normal(n)
    return PotentialTable(x1=x1, eps1=eps1, eps2=eps2)


def enroll_cohort(week: int, enrollment_weeks: np.ndarray) -> np.ndarray:
    """Indices of subjects whose pre-drawn enrollment week equals ``week``."""
    return np.flatnonzero(enrollment_weeks == week)


def stage2_score(x1, a1, eps1, params: ScenarioParams):
    g0, g1, g2 = params.gamma1
    x21 = g0 + g1 * np.asarray(x1, float) + g2 * np.asarray(a1, float) + eps1
    response = (x21 < params.response_fraction * np.asarray(x1, float)).astype(int)
    return x21, response


def gen_stage2(x1, a1, params: ScenarioParams, rng: np.random.Generator | None = None,
               eps1=None):
    """Interim score and response indicator; noise from ``eps1`` or drawn from ``rng``."""
    if eps1 is None:
        eps1 = params.eps1_sd * rng.standard_normal(np.shape(x1))
    return stage2_score(x1, a1, eps1, params)


def outcome_mean(x1, a1, x21, a2, params: ScenarioParams):
    g = params.gamma2
    a2 = np.asarray(a2)
    return (g[0] + g[1] * np.asarray(x1, float) + g[2] * np.asarray(a1, float)
            + g[3] * np.asarray(x21, float)
            + g[4] * (a2 == 1) + g[5] * (a2 == 2) + g[6] * (a2 == 3) + g[7] * (a2 == 4))


def gen_outcome(x1, a1, x21, a2, params: ScenarioParams,
                rng: np.random.Generator | None = None, eps2=None):
    if eps2 is None:
        eps2 = params.eps2_sd * rng.standard_normal(np.shape(x1))
    return outcome_mean(x1, a1, x21, a2, params) + eps2


def potential_outcomes(table: PotentialTable, design: TrialDesign,
                       params: ScenarioParams) -> np.ndarray:
    """(n, m) matrix of Y*(d^j) evaluated on a shared potential table."""
    n = len(table)
    out = np.empty((n, design.m))
    for j, reg in enumerate(design.regimes):
        x21, resp = stage2_score(table.x1, reg.a1, table.eps1, params)
        a2 = np.where(resp == 1, reg.a2_responder, reg.a2_nonresponder)
        out[:, j] = outcome_mean(table.x1, reg.a1, x21, a2, params) + table.eps2
    return out


@dataclass(frozen=True)
class OracleResult:
    theta: np.ndarray
    mc_se: np.ndarray
    n_mc: int
    labels: tuple[str, ...]
    direction: str = "minimize"

    @property
    def optimal(self) -> int:
        score = self.theta if self.direction == "minimize" else -self.theta
        return int(np.argmin(score))


def oracle_true_values(params: ScenarioParams, design: TrialDesign, n_mc: int,
                       rng: np.random.Generator | int | None = None,
                       chunk: int = 1_000_000) -> OracleResult:
    """Monte Carlo regime values under coupled potential outcomes.

    Draws are processed in chunks; the per-chunk sums are combined with
    ``math.fsum`` so the result does not depend on chunk order.
    """
    if n_mc < 10_000:
        raise ValueError("n_mc must be at least 1e4")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(rng)))
    sums = [[] for _ in range(design.m)]
    sq = [[] for _ in range(design.m)]
    done = 0
    while done < n_mc:
        k = min(chunk, n_mc - done)
        ys = potential_outcomes(draw_potential_table(k, params, rng), design, params)
        for j in range(design.m):
            sums[j].append(float(ys[:, j].sum()))
            sq[j].append(float(np.square(ys[:, j]).sum()))
        done += k
    theta = np.array([math.fsum(s) / n_mc for s in sums])
    second = np.array([math.fsum(s) / n_mc for s in sq])
    var = np.maximum(second - theta ** 2, 0.0) * n_mc / (n_mc - 1)
    se = np.sqrt(var / n_mc)
    labels = tuple(r.label or f"d{j + 1}" for j, r in enumerate(design.regimes))
    return OracleResult(theta=theta, mc_se=se, n_mc=n_mc, labels=labels,
                        direction=design.direction)


# published benchmark values, reported next to the oracle but never used as truth
REFERENCE_VALUES = (-0.126, -0.374, -0.500, -0.251, -2.408, -2.401, -2.494, -2.501)
