import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edd.adjustment import (AdjustmentPolicy, capacity_projection, freeze_count, importance_scores,
                            orthogonality_feasible, prune_and_expand)
from edd.autodiff import Tensor
from edd.errors import ContractViolation
from edd.memory import MemoryBank


def bank_with_drift(deltas, dim=2):
    """Bank whose slot i drifted by ``deltas[i]`` along the first key axis."""
    bank = MemoryBank(len(deltas), dim, rng=0, dtype=np.float64)
    bank.keys = Tensor(np.zeros((len(deltas), dim)), requires_grad=True, dtype=np.float64)
    bank.values = Tensor(np.zeros((len(deltas), dim)), requires_grad=True, dtype=np.float64)
    bank.take_snapshot()
    bank.keys.data[:, 0] = deltas
    return bank


def test_key_change_three_four_five():
    bank = bank_with_drift([0.0, 0.0])
    bank.keys.data[0] = [3.0, 4.0]
    np.testing.assert_allclose(importance_scores(bank), [5.0, 0.0])


def test_key_and_value_norms_add():
    bank = bank_with_drift([5.0])
    bank.values.data[0] = [0.0, 2.0]
    assert importance_scores(bank)[0] == pytest.approx(7.0)


def test_missing_snapshot():
    bank = MemoryBank(3, 2, rng=0)
    bank.snapshot_keys = None
    with pytest.raises(ContractViolation):
        importance_scores(bank)


@pytest.mark.parametrize("args,expected", [
    ((10, 20, 1000, 0.15), 75),
    ((2, 2, 1000, 0.15), 150),
    ((2, 2, 1000, 0.0), 0),
    # 0.15 * 1/3 * 60 is exactly 3; naive float arithmetic gives 2.9999999999999996
    ((1, 3, 60, 0.15), 3),
])
def test_freeze_count(args, expected):
    assert freeze_count(*args) == expected


def test_freeze_count_preconditions():
    with pytest.raises(ContractViolation):
        freeze_count(1, 0, 100, 0.1)
    with pytest.raises(ContractViolation):
        freeze_count(3, 2, 100, 0.1)


def test_prune_freezes_the_top_k_and_grows():
    bank = bank_with_drift([5.0, 1.0, 7.0, 3.0])
    prune_and_expand(bank, 2, AdjustmentPolicy(), np.random.default_rng(0))
    assert bank.num_slots == 6
    assert bank.frozen_indices().tolist() == [0, 2]
    np.testing.assert_array_equal(bank.snapshot_keys, bank.keys.data)


def test_prune_with_zero_only_refreshes_the_snapshot():
    bank = bank_with_drift([5.0, 1.0])
    keys = bank.keys.data.copy()
    prune_and_expand(bank, 0, AdjustmentPolicy())
    assert bank.num_slots == 2 and bank.num_frozen == 0
    np.testing.assert_array_equal(bank.keys.data, keys)
    np.testing.assert_array_equal(bank.snapshot_keys, keys)


def test_ties_go_to_the_lower_index():
    bank = bank_with_drift([5.0, 5.0, 1.0])
    prune_and_expand(bank, 1, AdjustmentPolicy(), np.random.default_rng(0))
    assert bank.frozen_indices().tolist() == [0]


def test_already_frozen_slots_are_never_picked_again():
    bank = bank_with_drift([9.0, 1.0, 2.0])
    bank.frozen[0] = True
    prune_and_expand(bank, 1, AdjustmentPolicy(), np.random.default_rng(0))
    assert bank.frozen_indices().tolist() == [0, 2]
    with pytest.raises(ContractViolation):
        prune_and_expand(bank, 3, AdjustmentPolicy())


def test_new_slots_use_the_policy_scale():
    bank = bank_with_drift([1.0] * 4, dim=50)
    prune_and_expand(bank, 2, AdjustmentPolicy(init_stddev=0.01), np.random.default_rng(0))
    fresh = bank.keys.data[4:]
    assert 0.005 < fresh.std() < 0.02


def test_capacity_reference_values():
    traj = capacity_projection(1000, 0.15, T=20)
    assert traj.slots[1] == 1150
    assert traj.slots[20] == 1677
    assert capacity_projection(1000, 0.15).slots[-1] == 2418


def test_capacity_first_increment_and_saturation_conditions():
    traj = capacity_projection(1000, 0.15)
    t = len(traj.slots) - 1
    assert 0.15 * traj.slots[-1] / (t + 1) < 1
    assert traj.frozen[1:] == [b - a for a, b in zip(traj.slots, traj.slots[1:])]
    with pytest.raises(ContractViolation):
        capacity_projection(10, 1.0)
    with pytest.raises(ContractViolation):
        capacity_projection(0, 0.1, T=3)


def test_capacity_ratio_zero_never_grows():
    assert capacity_projection(500, 0.0, T=5).slots == [500] * 6


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5000), st.floats(0, 0.9), st.integers(1, 40))
def test_capacity_is_monotone_and_matches_integer_arithmetic(L0, r, T):
    traj = capacity_projection(L0, r, T=T)
    assert all(b >= a for a, b in zip(traj.slots, traj.slots[1:]))
    # integer-only oracle: floor(p/q * L / t) with r = p/q as an exact decimal
    from fractions import Fraction
    frac = Fraction(str(r))
    L = L0
    for t in range(1, T + 1):
        L += (frac.numerator * L) // (frac.denominator * t)
        assert traj.slots[t] == L


@pytest.mark.parametrize("frozen,dim,ok", [(200, 256, True), (256, 256, True), (300, 256, False)])
def test_orthogonality_feasible(frozen, dim, ok):
    assert orthogonality_feasible(frozen, dim) is ok


def test_policy_validation():
    with pytest.raises(ContractViolation):
        AdjustmentPolicy(pruning_ratio=1.5)
    with pytest.raises(ContractViolation):
        AdjustmentPolicy(basis="nope")
    bank = MemoryBank(10, 2, rng=0)
    bank.frozen[:3] = True
    assert AdjustmentPolicy().basis_count(bank) == 10
    assert AdjustmentPolicy(basis="unfrozen_slots").basis_count(bank) == 7
