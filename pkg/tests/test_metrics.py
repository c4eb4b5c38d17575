import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from edd.errors import ContractViolation, DegenerateInputError
from edd.metrics import (avg_acc, class_pair_table, dispersion_gap, export_features, forgetting, gaussian_kl,
                         gaussian_w2, mean_feature_distance, mean_pairwise_cosine, read_features)
from edd.model import Model, ModelConfig
from edd.streams import Dataset

e1, e2 = np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])


def fitted(mean, std, n=1000):
    """1-D sample whose population mean and std are exactly ``mean`` and ``std``."""
    z = np.random.default_rng(0).normal(size=n)
    z = (z - z.mean()) / z.std()
    return (mean + std * z).reshape(-1, 1)


def test_avg_acc():
    assert avg_acc([[1.0, np.nan], [1.0, 0.5]]) == 0.75
    assert avg_acc(np.ones((3, 3))) == 1.0
    assert avg_acc([[0.4]]) == pytest.approx(0.4)
    with pytest.raises(ContractViolation):
        avg_acc([[1.0, np.nan]])


def test_forgetting():
    A = [[0.9, np.nan, np.nan], [0.7, 0.8, np.nan], [0.5, 0.85, 0.9]]
    np.testing.assert_allclose(forgetting(A), [0.4, -0.05])


def test_cosine_examples():
    assert mean_pairwise_cosine(e1, e1) == pytest.approx(1.0)
    assert mean_pairwise_cosine(e1, e2) == pytest.approx(0.0)
    assert mean_pairwise_cosine(np.vstack([e1, e2]), e1) == pytest.approx(0.5)
    with pytest.raises(DegenerateInputError):
        mean_pairwise_cosine(np.zeros((1, 2)), e1)


def test_gaussian_kl_examples():
    a = fitted(0.0, 1.0)
    assert gaussian_kl(a, a) == pytest.approx(0.0, abs=1e-12)
    assert gaussian_kl(a, fitted(1.0, 1.0)) == pytest.approx(0.5, abs=1e-5)
    wide = fitted(0.0, 3.0)
    assert gaussian_kl(a, wide) != pytest.approx(gaussian_kl(wide, a))


def test_gaussian_w2_examples():
    a, b = fitted(0.0, 1.0), fitted(3.0, 1.0)
    assert gaussian_w2(a, a) == 0.0
    assert gaussian_w2(a, b) == pytest.approx(3.0, abs=1e-9)
    assert gaussian_w2(a, b) == gaussian_w2(b, a)


def test_gaussian_fit_needs_two_samples():
    with pytest.raises(ContractViolation):
        gaussian_kl(np.ones((1, 2)), np.ones((3, 2)))


def test_feature_distance_examples():
    assert mean_feature_distance([[1.0, 2.0]], [[1.0, 2.0]]) == 0.0
    assert mean_feature_distance([[0.0, 0.0]], [[3.0, 4.0]]) == pytest.approx(5.0)


sets = arrays(np.float64, st.tuples(st.integers(2, 6), st.just(3)), elements=st.floats(-10, 10))


@settings(max_examples=40, deadline=None)
@given(sets, sets, sets, arrays(np.float64, 3, elements=st.floats(-10, 10)))
def test_metric_properties(a, b, c, shift):
    assert gaussian_kl(a, b) >= -1e-9
    assert gaussian_w2(a, b) == pytest.approx(gaussian_w2(b, a))
    assert gaussian_w2(a, c) <= gaussian_w2(a, b) + gaussian_w2(b, c) + 1e-9
    assert mean_feature_distance(a + shift, b + shift) == pytest.approx(mean_feature_distance(a, b), abs=1e-9)
    if np.linalg.norm(a, axis=1).min() > 1e-6 and np.linalg.norm(b, axis=1).min() > 1e-6:
        assert -1 - 1e-9 <= mean_pairwise_cosine(a, b) <= 1 + 1e-9


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, 5, elements=st.floats(0, 1)), st.permutations(range(5)))
def test_avg_acc_is_permutation_invariant(row, perm):
    assert avg_acc([row]) == pytest.approx(avg_acc([row[list(perm)]]))
    assert 0 <= avg_acc([row]) <= 1


def test_pair_table_and_gap():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(30, 4)) + np.repeat(np.eye(3, 4) * 5, 10, axis=0)
    y = np.repeat([0, 1, 2], 10)
    table = class_pair_table(z, y)
    assert len(table) == 6
    assert set(table[(0, 1)]) == {"cos", "kl", "w2", "fdist"}
    # scale-free: a rescaled copy has the same table
    gap = dispersion_gap(class_pair_table(3 * z, y), table)
    assert max(gap.values()) < 1e-9
    with pytest.raises(ContractViolation):
        dispersion_gap({}, table)


def test_export_features(tmp_path):
    model = Model(ModelConfig(input_dim=4, num_classes=2, layer_sizes=(5, 5), memory_slots_init=3), rng=0)
    ds = Dataset(np.random.default_rng(1).normal(size=(7, 4)), [0, 1, 0, 1, 1, 0, 0])
    first, second, empty = tmp_path / "a.csv", tmp_path / "b.csv", tmp_path / "e.csv"
    export_features(model, ds, first)
    export_features(model, ds, second)
    lines = first.read_text().splitlines()
    assert lines[0] == "class_id,z0,z1,z2,z3,z4"
    assert len(lines) == 8
    assert first.read_bytes() == second.read_bytes()
    feats, labels = read_features(first)
    np.testing.assert_allclose(feats, model.features(ds.features), rtol=1e-7)
    assert labels.tolist() == ds.labels.tolist()
    export_features(model, Dataset(np.zeros((0, 4)), []), empty)
    assert empty.read_text() == lines[0] + "\n"
