"""Domain types for a two-stage SMART with response-based stage-2 options.

The central objects are :class:`TrialDesign` (treatments, feasible sets and
embedded regimes), :class:`SubjectRecord` (one subject's trajectory together
with the probability vectors that were actually used to randomize them) and
:class:`AccruedDataset`, an array-backed snapshot of all enrolled subjects at
a given week.  Estimators work on the dataset's columns directly; the record
view exists for serialization and for small hand-built examples.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterable, Sequence

import numpy as np

UPFRONT = "upfront"
SEQUENTIAL = "sequential"
MODES = (UPFRONT, SEQUENTIAL)

RECORD_COLUMNS = (
    "id", "tau", "kappa", "gamma", "delta", "x1", "a1", "stage2_week", "x21",
    "response", "a2", "y", "p1_json", "p2_json", "assigned_regime",
)


class PositivityError(ValueError):
    """A propensity that must be positive is zero or negative."""


class StagedDataError(ValueError):
    """Stage-2 quantities were requested for a subject still in stage 1."""


class CorruptRecordError(ValueError):
    """A record violates the SubjectRecord invariants."""


# --------------------------------------------------------------------------
# design types
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class EmbeddedRegime:
    a1: int
    a2_responder: int
    a2_nonresponder: int
    label: str = ""

    def a2_for(self, response: int) -> int:
        return self.a2_responder if response == 1 else self.a2_nonresponder

    @property
    def triple(self) -> tuple[int, int, int]:
        return (self.a1, self.a2_responder, self.a2_nonresponder)


@dataclass(frozen=True)
class Timeline:
    enroll_weeks: int = 24
    stage_delay_weeks: int = 6
    followup_weeks: int = 6
    update_period_weeks: int = 1

    def __post_init__(self):
        for name in ("enroll_weeks", "stage_delay_weeks", "followup_weeks",
                     "update_period_weeks"):
            if getattr(self, name) < 1:
                raise ValueError(f"timeline.{name} must be >= 1")

    @property
    def horizon(self) -> int:
        return self.enroll_weeks + self.stage_delay_weeks + self.followup_weeks + 1


@dataclass(frozen=True)
class BurnInRule:
    per_regime_completers: int = 25

    def __post_init__(self):
        if self.per_regime_completers < 0:
            raise ValueError("burn_in.per_regime_completers must be >= 0")


@dataclass(frozen=True)
class ConstantDamping:
    """Damping schedule c_t = c for every week."""

    c: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.c <= 1.0:
            raise ValueError(f"damping constant must lie in [0, 1], got {self.c}")

    def __call__(self, week: int) -> float:
        return self.c


@dataclass(frozen=True)
class TsConfig:
    damping_schedule: Callable[[int], float] = field(default_factory=ConstantDamping)
    clip_lo: float = 0.05
    clip_hi: float = 0.95
    n_value_draws: int = 1000
    beta_draw_sizes: tuple[int, ...] = (32, 32)
    stage2_draws: int = 1000
    sequential_belief_mode: str = "individual"

    def __post_init__(self):
        if not 0.0 < self.clip_lo < self.clip_hi < 1.0:
            raise ValueError("need 0 < clip_lo < clip_hi < 1")
        if self.n_value_draws < 1 or self.stage2_draws < 1:
            raise ValueError("draw counts must be >= 1")
        if any(b < 1 for b in self.beta_draw_sizes):
            raise ValueError("beta draw sizes must be >= 1")
        if self.sequential_belief_mode not in ("individual", "configuration"):
            raise ValueError(f"unknown belief mode {self.sequential_belief_mode!r}")


@dataclass(frozen=True)
class TrialDesign:
    stage1_options: tuple[int, ...]
    stage2_options: tuple[int, ...]
    feasible_rule: dict  # (a1, response) -> tuple of stage-2 options
    regimes: tuple[EmbeddedRegime, ...]
    timeline: Timeline = field(default_factory=Timeline)
    burn_in: BurnInRule = field(default_factory=BurnInRule)
    ts_config: TsConfig = field(default_factory=TsConfig)
    direction: str = "minimize"
    n_stages: int = 2

    def __post_init__(self):
        if self.n_stages != 2:
            raise NotImplementedError("only two-stage designs are implemented")
        if self.direction not in ("minimize", "maximize"):
            raise ValueError(f"direction must be minimize or maximize, got {self.direction!r}")
        if len(self.regimes) < 2:
            raise ValueError("a design needs at least two embedded regimes")
        for a1 in self.stage1_options:
            for s in (0, 1):
                opts = self.feasible_rule.get((a1, s))
                if not opts:
                    raise ValueError(f"empty feasible set for a1={a1}, response={s}")
                if any(o not in self.stage2_options for o in opts):
                    raise ValueError(f"feasible set {opts} not within stage-2 options")
        seen = set()
        for reg in self.regimes:
            if reg.a1 not in self.stage1_options:
                raise ValueError(f"regime {reg.label}: a1={reg.a1} is not a stage-1 option")
            if reg.a2_responder not in self.feasible_rule[(reg.a1, 1)]:
                raise ValueError(f"regime {reg.label}: responder option infeasible")
            if reg.a2_nonresponder not in self.feasible_rule[(reg.a1, 0)]:
                raise ValueError(f"regime {reg.label}: nonresponder option infeasible")
            if reg.triple in seen:
                raise ValueError(f"duplicate regime {reg.triple}")
            seen.add(reg.triple)

    @property
    def m(self) -> int:
        return len(self.regimes)

    @property
    def horizon(self) -> int:
        return self.timeline.horizon

    @property
    def sign(self) -> float:
        """+1 when larger outcomes are better, -1 when smaller are better."""
        return 1.0 if self.direction == "maximize" else -1.0

    def feasible(self, a1: int, response: int) -> tuple[int, ...]:
        return tuple(self.feasible_rule[(a1, response)])

    @cached_property
    def regime_a1(self) -> np.ndarray:
        return np.array([r.a1 for r in self.regimes])

    @cached_property
    def regime_a2(self) -> np.ndarray:
        """(m, 2) array; column s is the stage-2 choice for response s."""
        return np.array([[r.a2_nonresponder, r.a2_responder] for r in self.regimes])

    @cached_property
    def max_feasible(self) -> int:
        return max(len(v) for v in self.feasible_rule.values())

    @cached_property
    def stage2_position(self) -> np.ndarray:
        """(n_a1, 2, m) position of each regime's stage-2 choice in a feasible set, -1 if absent.

        Indexed by the *subject's* a1 index and response, so regimes whose
        choice lies outside the subject's feasible set map to -1.
        """
        out = -np.ones((len(self.stage1_options), 2, self.m), dtype=int)
        for ia, a1 in enumerate(self.stage1_options):
            for s in (0, 1):
                opts = self.feasible(a1, s)
                for j in range(self.m):
                    choice = self.regime_a2[j, s]
                    if choice in opts:
                        out[ia, s, j] = opts.index(choice)
        return out

    @cached_property
    def feasible_table(self) -> np.ndarray:
        """(n_a1, 2, max_feasible) feasible stage-2 options padded with -1."""
        out = -np.ones((len(self.stage1_options), 2, self.max_feasible), dtype=int)
        for ia, a1 in enumerate(self.stage1_options):
            for s in (0, 1):
                opts = self.feasible(a1, s)
                out[ia, s, :len(opts)] = opts
        return out

    def a1_index(self, a1) -> np.ndarray:
        lookup = {a: i for i, a in enumerate(self.stage1_options)}
        return np.vectorize(lookup.__getitem__, otypes=[int])(np.asarray(a1))

    @cached_property
    def share_a1(self) -> np.ndarray:
        """(m, m) indicator that regimes j and k start with the same a1."""
        a1 = self.regime_a1
        return a1[:, None] == a1[None, :]

    @cached_property
    def share_a2(self) -> np.ndarray:
        """(2, m, m) indicator of sharing a1 and the stage-2 choice for response s."""
        a2 = self.regime_a2
        return np.stack([self.share_a1 & (a2[:, s][:, None] == a2[:, s][None, :])
                         for s in (0, 1)])

    def uniform_p1(self, mode: str) -> np.ndarray:
        n = self.m if mode == UPFRONT else len(self.stage1_options)
        return np.full(n, 1.0 / n)

    def uniform_p2(self, a1: int, response: int) -> np.ndarray:
        k = len(self.feasible(a1, response))
        return np.full(k, 1.0 / k)


def fig1_design(timeline: Timeline | None = None, burn_in: BurnInRule | None = None,
                ts_config: TsConfig | None = None,
                direction: str = "minimize") -> TrialDesign:
    """The eight-regime benchmark design.

    Stage 1 offers {0, 1}.  After a1=0 responders choose from {0, 1} and
    nonresponders from {1, 2}; after a1=1 responders choose from {3, 4} and
    nonresponders from {2, 4}.
    """
    feasible = {(0, 1): (0, 1), (0, 0): (1, 2), (1, 1): (3, 4), (1, 0): (2, 4)}
    triples = [(0, 0, 1), (0, 0, 2), (0, 1, 2), (0, 1, 1),
               (1, 3, 4), (1, 3, 2), (1, 4, 2), (1, 4, 4)]
    regimes = tuple(EmbeddedRegime(a, r, nr, label=f"d{j + 1}")
                    for j, (a, r, nr) in enumerate(triples))
    return TrialDesign(
        stage1_options=(0, 1),
        stage2_options=(0, 1, 2, 3, 4),
        feasible_rule=feasible,
        regimes=regimes,
        timeline=timeline or Timeline(),
        burn_in=burn_in or BurnInRule(),
        ts_config=ts_config or TsConfig(),
        direction=direction,
    )


# --------------------------------------------------------------------------
# subject records
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SubjectRecord:
    id: int
    tau: int
    kappa: int
    gamma: int
    delta: int
    x1: float
    a1: int
    stage2_week: int | None = None
    x21: float | None = None
    response: int | None = None
    a2: int | None = None
    y: float | None = None
    p1: tuple[float, ...] = ()
    p2: tuple[float, ...] = ()
    assigned_regime: int | None = None

    def validate(self) -> None:
        if self.delta == 1 and (self.kappa < 2 or self.y is None):
            raise CorruptRecordError(f"subject {self.id}: completed without stage-2 data or y")
        if self.kappa >= 2 and (self.x21 is None or self.response is None
                                or self.a2 is None or not self.p2):
            raise CorruptRecordError(f"subject {self.id}: stage 2 reached but fields missing")
        for name, p in (("p1", self.p1), ("p2", self.p2)):
            if p and (min(p) <= 0.0 or abs(sum(p) - 1.0) > 1e-9):
                raise CorruptRecordError(f"subject {self.id}: {name}={p} is not a positive "
                                         "probability vector")

    def to_row(self) -> dict:
        def opt(v):
            return "" if v is None else repr(v) if isinstance(v, float) else str(v)

        return {
            "id": str(self.id), "tau": str(self.tau), "kappa": str(self.kappa),
            "gamma": str(self.gamma), "delta": str(self.delta), "x1": repr(float(self.x1)),
            "a1": str(self.a1), "stage2_week": opt(self.stage2_week), "x21": opt(self.x21),
            "response": opt(self.response), "a2": opt(self.a2), "y": opt(self.y),
            "p1_json": json.dumps([float(v) for v in self.p1]),
            "p2_json": json.dumps([float(v) for v in self.p2]) if self.p2 else "",
            "assigned_regime": opt(self.assigned_regime),
        }

    @classmethod
    def from_row(cls, row: dict) -> "SubjectRecord":
        def oi(v):
            return None if v in ("", None) else int(v)

        def of(v):
            return None if v in ("", None) else float(v)

        return cls(
            id=int(row["id"]), tau=int(row["tau"]), kappa=int(row["kappa"]),
            gamma=int(row["gamma"]), delta=int(row["delta"]), x1=float(row["x1"]),
            a1=int(row["a1"]), stage2_week=oi(row["stage2_week"]), x21=of(row["x21"]),
            response=oi(row["response"]), a2=oi(row["a2"]), y=of(row["y"]),
            p1=tuple(json.loads(row["p1_json"])) if row["p1_json"] else (),
            p2=tuple(json.loads(row["p2_json"])) if row["p2_json"] else (),
            assigned_regime=oi(row["assigned_regime"]),
        )


def write_records_csv(records: Iterable[SubjectRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RECORD_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for rec in records:
            writer.writerow(rec.to_row())


def read_records_csv(path) -> list[SubjectRecord]:
    with open(path, newline="") as fh:
        return [SubjectRecord.from_row(row) for row in csv.DictReader(fh)]


# --------------------------------------------------------------------------
# scalar consistency and propensity operations
# --------------------------------------------------------------------------

def consistency_indicators(rec: SubjectRecord, reg: EmbeddedRegime) -> tuple[int, int]:
    """Return (cbar1, c): stage-1 and full-path consistency with ``reg``."""
    if rec.gamma != 1:
        raise ValueError("consistency is only defined for enrolled subjects")
    cbar1 = int(rec.a1 == reg.a1)
    if rec.kappa < 2 or rec.a2 is None or rec.response is None:
        if rec.delta == 1:
            raise CorruptRecordError(f"subject {rec.id}: completed but stage-2 fields absent")
        return cbar1, 0
    c = int(cbar1 == 1 and rec.a2 == reg.a2_for(rec.response))
    return cbar1, c


def upfront_propensities(reg_index: int, response: int, r: Sequence[float],
                         design: TrialDesign) -> tuple[float, float]:
    """Propensity of following regime ``reg_index`` at stage 1 and stage 2 under regime vector r."""
    r = np.asarray(r, dtype=float)
    if r.shape != (design.m,) or abs(r.sum() - 1.0) > 1e-9:
        raise ValueError("r must be a probability vector over the m regimes")
    pi1 = float(r[design.share_a1[reg_index]].sum())
    if pi1 <= 0.0:
        raise PositivityError(f"regime {reg_index}: stage-1 propensity is zero")
    pi2 = float(r[design.share_a2[response, reg_index]].sum()) / pi1
    return pi1, pi2


def subject_propensities(rec: SubjectRecord, reg: EmbeddedRegime, mode: str,
                         design: TrialDesign) -> tuple[float, float]:
    if rec.kappa < 2 or rec.response is None:
        raise StagedDataError(f"subject {rec.id} has not reached stage 2")
    if mode == UPFRONT:
        j = design.regimes.index(reg)
        return upfront_propensities(j, rec.response, rec.p1, design)
    if mode != SEQUENTIAL:
        raise ValueError(f"unknown mode {mode!r}")
    pi1 = float(rec.p1[design.stage1_options.index(reg.a1)])
    opts = design.feasible(rec.a1, rec.response)
    choice = reg.a2_for(rec.response)
    pi2 = float(rec.p2[opts.index(choice)]) if choice in opts else 0.0
    return pi1, pi2


# --------------------------------------------------------------------------
# array-backed snapshot
# --------------------------------------------------------------------------

def _col(values, dtype):
    return np.asarray(values, dtype=dtype)


@dataclass(frozen=True, eq=False)
class AccruedDataset:
    """Snapshot of every subject enrolled by ``week`` in column form.

    Missing integer fields are stored as -1 and missing reals as NaN.  ``p1``
    has one column per stage-1 randomization unit (m regimes up-front, the
    stage-1 options sequentially); ``p2`` is padded with NaN up to the largest
    feasible set.
    """

    week: int
    design: TrialDesign
    mode: str
    id: np.ndarray
    tau: np.ndarray
    kappa: np.ndarray
    delta: np.ndarray
    x1: np.ndarray
    a1: np.ndarray
    stage2_week: np.ndarray
    x21: np.ndarray
    response: np.ndarray
    a2: np.ndarray
    y: np.ndarray
    p1: np.ndarray
    p2: np.ndarray
    assigned_regime: np.ndarray
    validate: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.validate:
            self._check()

    def _check(self) -> None:
        n = self.n
        if n and self.tau.max() > self.week:
            raise CorruptRecordError("snapshot contains subjects enrolled after its week")
        done = self.delta == 1
        staged = self.kappa >= 2
        if np.any(done & (~staged | np.isnan(self.y))):
            raise CorruptRecordError("completed subject without stage-2 data or outcome")
        if np.any(staged & (np.isnan(self.x21) | (self.response < 0) | (self.a2 < 0))):
            raise CorruptRecordError("subject at stage 2 with missing stage-2 fields")
        if n:
            if np.any(self.p1 <= 0.0) or np.any(np.abs(self.p1.sum(axis=1) - 1.0) > 1e-9):
                raise CorruptRecordError("stage-1 probability vectors must be positive and sum to 1")
            p2 = self.p2[staged]
            if p2.size:
                tot = np.nansum(p2, axis=1)
                if np.any(np.nan_to_num(p2, nan=1.0) <= 0.0) or np.any(np.abs(tot - 1.0) > 1e-9):
                    raise CorruptRecordError("stage-2 probability vectors must be positive and sum to 1")

    @property
    def n(self) -> int:
        return int(self.id.shape[0])

    @classmethod
    def from_records(cls, week: int, design: TrialDesign, mode: str,
                     records: Sequence[SubjectRecord]) -> "AccruedDataset":
        for rec in records:
            rec.validate()
        n_p1 = design.m if mode == UPFRONT else len(design.stage1_options)
        p1 = np.full((len(records), n_p1), np.nan)
        p2 = np.full((len(records), design.max_feasible), np.nan)
        for i, rec in enumerate(records):
            p1[i, :len(rec.p1)] = rec.p1
            p2[i, :len(rec.p2)] = rec.p2

        def ints(name):
            return _col([-1 if getattr(r, name) is None else getattr(r, name) for r in records], int)

        def reals(name):
            return _col([np.nan if getattr(r, name) is None else getattr(r, name) for r in records],
                        float)

        return cls(
            week=week, design=design, mode=mode,
            id=ints("id"), tau=ints("tau"), kappa=ints("kappa"), delta=ints("delta"),
            x1=reals("x1"), a1=ints("a1"), stage2_week=ints("stage2_week"), x21=reals("x21"),
            response=ints("response"), a2=ints("a2"), y=reals("y"), p1=p1, p2=p2,
            assigned_regime=ints("assigned_regime"),
        )

    @property
    def records(self) -> list[SubjectRecord]:
        out = []
        for i in range(self.n):
            staged = self.kappa[i] >= 2
            p2 = tuple(float(v) for v in self.p2[i] if not math.isnan(v)) if staged else ()
            out.append(SubjectRecord(
                id=int(self.id[i]), tau=int(self.tau[i]), kappa=int(self.kappa[i]), gamma=1,
                delta=int(self.delta[i]), x1=float(self.x1[i]), a1=int(self.a1[i]),
                stage2_week=int(self.stage2_week[i]) if staged else None,
                x21=float(self.x21[i]) if staged else None,
                response=int(self.response[i]) if staged else None,
                a2=int(self.a2[i]) if staged else None,
                y=float(self.y[i]) if self.delta[i] == 1 else None,
                p1=tuple(float(v) for v in self.p1[i]), p2=p2,
                assigned_regime=(int(self.assigned_regime[i])
                                 if self.assigned_regime[i] >= 0 else None),
            ))
        return out

    def subset(self, mask: np.ndarray) -> "AccruedDataset":
        cols = {name: getattr(self, name)[mask] for name in _ARRAY_FIELDS}
        return AccruedDataset(week=self.week, design=self.design, mode=self.mode,
                              validate=False, **cols)

    # -- derived quantities -------------------------------------------------

    @cached_property
    def completed(self) -> np.ndarray:
        return self.delta == 1

    @cached_property
    def staged(self) -> np.ndarray:
        return self.kappa >= 2

    @cached_property
    def a1_idx(self) -> np.ndarray:
        return self.design.a1_index(self.a1) if self.n else np.zeros(0, dtype=int)

    @cached_property
    def regime_a2_for_subject(self) -> np.ndarray:
        """(n, m) stage-2 choice of each regime given the subject's response (-1 if unknown)."""
        resp = np.where(self.staged, self.response, 0)
        d2 = self.design.regime_a2.T[resp]
        return np.where(self.staged[:, None], d2, -1)

    @cached_property
    def cbar1(self) -> np.ndarray:
        return self.a1[:, None] == self.design.regime_a1[None, :]

    @cached_property
    def consistent(self) -> np.ndarray:
        """(n, m) full-path consistency C^j."""
        return self.cbar1 & self.staged[:, None] & (self.a2[:, None] == self.regime_a2_for_subject)

    @cached_property
    def propensities(self) -> tuple[np.ndarray, np.ndarray]:
        """(pi1, pi2) as (n, m) arrays; pi2 is NaN for subjects still in stage 1."""
        d = self.design
        if self.mode == UPFRONT:
            pi1 = self.p1 @ d.share_a1.T.astype(float)
            resp = np.where(self.staged, self.response, 0)
            num = np.stack([self.p1 @ d.share_a2[s].T.astype(float) for s in (0, 1)])
            num = np.take_along_axis(num, resp[None, :, None], axis=0)[0]
            pi2 = num / pi1
        else:
            pi1 = self.p1[:, d.a1_index(d.regime_a1)]
            resp = np.where(self.staged, self.response, 0)
            pos = d.stage2_position[self.a1_idx, resp]  # (n, m)
            got = np.take_along_axis(self.p2, np.maximum(pos, 0), axis=1)
            pi2 = np.where(pos >= 0, got, 0.0)
        pi2 = np.where(self.staged[:, None], pi2, np.nan)
        return pi1, pi2

    def consistent_completers(self) -> np.ndarray:
        """Per-regime count of completers with C^j = 1."""
        return (self.consistent & self.completed[:, None]).sum(axis=0)


_ARRAY_FIELDS = ("id", "tau", "kappa", "delta", "x1", "a1", "stage2_week", "x21",
                 "response", "a2", "y", "p1", "p2", "assigned_regime")
