"""Counter-based random streams keyed by (master seed, policy, replication, phase).

Every stream is an independent Philox generator derived through a numpy
SeedSequence spawn key, so the draws a replication sees do not depend on
which worker runs it or in what order.
"""
from __future__ import annotations

import numpy as np

PHASES = ("enroll", "covariates", "assignment", "draws", "diagnostics")


def stream(master_seed: int, policy_index: int, replication: int, phase: str
           ) -> np.random.Generator:
    if phase not in PHASES:
        raise ValueError(f"unknown phase {phase!r}; expected one of {PHASES}")
    seq = np.random.SeedSequence(entropy=int(master_seed),
                                 spawn_key=(int(policy_index), int(replication),
                                            PHASES.index(phase)))
    return np.random.Generator(np.random.Philox(seq))


class TrialStreams:
    """Lazily created per-phase generators for one replication."""

    def __init__(self, master_seed: int, policy_index: int = 0, replication: int = 0):
        self.key = (int(master_seed), int(policy_index), int(replication))
        self._gens: dict[str, np.random.Generator] = {}

    def __getitem__(self, phase: str) -> np.random.Generator:
        if phase not in self._gens:
            self._gens[phase] = stream(*self.key, phase)
        return self._gens[phase]
