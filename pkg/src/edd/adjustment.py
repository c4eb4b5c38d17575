"""End-of-task slot freezing and capacity expansion."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import ContractViolation

BASES = ("total_slots", "unfrozen_slots")


@dataclass
class AdjustmentPolicy:
    pruning_ratio: float = 0.15
    basis: str = "total_slots"
    init_stddev: float = 0.01

    def __post_init__(self):
        if not 0.0 <= self.pruning_ratio <= 1.0:
            raise ContractViolation(f"pruning_ratio must lie in [0, 1], got {self.pruning_ratio}")
        if self.basis not in BASES:
            raise ContractViolation(f"basis must be one of {BASES}, got {self.basis!r}")

    def basis_count(self, bank):
        return bank.num_slots if self.basis == "total_slots" else bank.num_slots - bank.num_frozen


@dataclass
class CapacityTrajectory:
    """Slot counts ``slots[t]`` after task t (``slots[0]`` is the initial size)
    and the number of slots frozen at each task (``frozen[0] == 0``)."""

    slots: list = field(default_factory=list)
    frozen: list = field(default_factory=list)

    def rows(self):
        return [(t, L, f) for t, (L, f) in enumerate(zip(self.slots, self.frozen))]


def _exact(r):
    # exact rational so floor() agrees with integer arithmetic on every platform
    return Fraction(str(r)) if isinstance(r, float) else Fraction(r)


def importance_scores(bank):
    """L2 drift of each slot's key plus value since the snapshot; frozen slots get -inf."""
    if bank.snapshot_keys is None or bank.snapshot_keys.shape != bank.keys.shape \
            or bank.snapshot_values.shape != bank.values.shape:
        raise ContractViolation("importance scoring needs a snapshot matching the current bank shape")
    dk = bank.keys.data.astype(np.float64) - bank.snapshot_keys
    dv = bank.values.data.astype(np.float64) - bank.snapshot_values
    scores = np.linalg.norm(dk, axis=1) + np.linalg.norm(dv, axis=1)
    scores[bank.frozen] = -np.inf
    return scores


def freeze_count(classes_new, classes_total, basis_count, r):
    """``floor(r * classes_new / classes_total * basis_count)``, computed exactly."""
    if classes_total <= 0:
        raise ContractViolation("classes_total must be positive")
    if not 1 <= classes_new <= classes_total:
        raise ContractViolation(f"need 1 <= classes_new <= classes_total, got {classes_new}/{classes_total}")
    if basis_count < 0:
        raise ContractViolation("basis_count must be non-negative")
    return math.floor(_exact(r) * Fraction(classes_new, classes_total) * basis_count)


def prune_and_expand(bank, k, policy, rng=None):
    """Freeze the ``k`` trainable slots that drifted most, then append ``k`` fresh ones.

    Ties go to the lower slot index. The snapshot is refreshed afterwards so
    the next task measures drift from the post-expansion parameters.
    """
    unfrozen = bank.unfrozen_indices()
    if k < 0 or k > len(unfrozen):
        raise ContractViolation(f"cannot freeze {k} slots, only {len(unfrozen)} are trainable")
    if k:
        scores = importance_scores(bank)[unfrozen]
        order = np.lexsort((unfrozen, -scores))
        bank.frozen[unfrozen[order[:k]]] = True
        bank.append_slots(k, policy.init_stddev, rng)
    bank.take_snapshot()
    return k


def capacity_projection(L0, r, T=None, max_steps=1_000_000):
    """Slot counts under ``L(t) = L(t-1) + floor(r * L(t-1) / t)``.

    With ``T=None`` the recurrence runs until the increment reaches zero,
    giving up after ``max_steps`` tasks (large ratios saturate very late).
    """
    if L0 < 1:
        raise ContractViolation("L0 must be >= 1")
    if T is not None and T < 1:
        raise ContractViolation("T must be >= 1")
    ratio = _exact(r)
    if T is None and ratio >= 1:
        raise ContractViolation("saturation only exists for ratios below 1")
    traj = CapacityTrajectory([L0], [0])
    t = 0
    while T is None or t < T:
        t += 1
        inc = math.floor(ratio * traj.slots[-1] / t)
        if T is None and inc == 0:
            break
        if T is None and t > max_steps:
            raise ContractViolation(f"no saturation within {max_steps} tasks")
        traj.slots.append(traj.slots[-1] + inc)
        traj.frozen.append(inc)
    return traj


def orthogonality_feasible(total_frozen, key_dim):
    """Whether ``total_frozen`` directions still fit in a ``key_dim``-dimensional space."""
    return total_frozen <= key_dim
