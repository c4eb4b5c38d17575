import numpy as np
import pytest

from edd import autodiff as ad
from edd.errors import ContractViolation
from edd.model import Model, ModelConfig, bn_adapt, deep_copy
from edd.streams import Dataset


def small(**kw):
    cfg = dict(input_dim=6, num_classes=2, layer_sizes=(8, 8), memory_slots_init=5)
    cfg.update(kw)
    return Model(ModelConfig(**cfg), rng=0)


def test_single_sample_two_class_head():
    logits, attn_s, attn_t = small()(np.ones(6, np.float32))
    assert logits.shape == (1, 2)
    assert attn_s.shape == (1, 5) and attn_t.shape == (1, 5)


def test_eval_forward_is_deterministic():
    m = small()
    x = np.random.default_rng(0).normal(size=(4, 6)).astype(np.float32)
    assert m(x)[0].data.tobytes() == m(x)[0].data.tobytes()


@pytest.mark.parametrize("mode,channels,queries", [("vector", 1, 1), ("spatial", 2, 2), ("channel", 2, 4)])
def test_attention_rows_per_query(mode, channels, queries):
    m = small(query_mode=mode, map_channels=channels)
    _, attn_s, attn_t = m(np.zeros((3, 6), np.float32))
    assert attn_s.shape == (3 * queries, 5)
    assert attn_t.shape == (3 * queries, 5)


def test_wrong_width_is_rejected():
    with pytest.raises(ContractViolation):
        small()(np.ones((2, 7), np.float32))


def test_without_memory_there_are_no_banks():
    m = small(use_memory=False)
    assert m.memories == []
    _, a, b = m(np.ones((2, 6), np.float32))
    assert a is None and b is None


def test_deep_copy_is_state_disjoint():
    m = small()
    m.task_memory.frozen[1] = True
    m.task_memory.take_snapshot()
    c = deep_copy(m)
    x = np.random.default_rng(1).normal(size=(3, 6)).astype(np.float32)
    assert c(x)[0].data.tobytes() == m(x)[0].data.tobytes()
    assert c.task_memory.frozen.tolist() == m.task_memory.frozen.tolist()
    c.classifier.weight.data[...] = 0
    c.task_memory.frozen[2] = True
    c.layers[0][1].running_mean[...] = 7
    assert m.classifier.weight.data.any()
    assert not m.task_memory.frozen[2]
    assert not np.any(m.layers[0][1].running_mean == 7)


def test_bn_adapt_moves_only_running_statistics():
    m = small()
    before = {k: v.copy() for k, v in m.state_arrays().items() if v is not None}
    data = Dataset(np.random.default_rng(2).normal(3.0, 1.0, size=(40, 6)), np.zeros(40))
    bn_adapt(m, data, epochs=3, momentum=0.1, batch_size=16)
    after = m.state_arrays()
    for name, value in before.items():
        same = value.tobytes() == after[name].tobytes()
        assert same != ("running_" in name), name


def test_bn_adapt_reaches_the_constant_input_mean():
    # first linear+BN layer: its pre-BN activation for constant input c is W c + b
    m = Model(ModelConfig(input_dim=3, num_classes=2, layer_sizes=(4, 4), use_memory=False), rng=0)
    c = 1.5
    data = Dataset(np.full((32, 3), c), np.zeros(32))
    bn_adapt(m, data, epochs=200, momentum=0.1, batch_size=32)
    lin, bn = m.layers[0]
    target = np.full(3, c) @ lin.weight.data.astype(np.float64) + lin.bias.data
    np.testing.assert_allclose(bn.running_mean, target, atol=1e-3)


def test_bn_adapt_preconditions():
    m = small()
    with pytest.raises(ContractViolation):
        bn_adapt(m, Dataset(np.ones((4, 6)), np.zeros(4)), epochs=0, momentum=0.1)
    with pytest.raises(ContractViolation):
        bn_adapt(m, Dataset(np.zeros((0, 6)), np.zeros(0)), epochs=1, momentum=0.1)


def test_training_forward_updates_running_stats_and_eval_does_not():
    m = small()
    rm = m.layers[0][1].running_mean.copy()
    m(np.ones((4, 6), np.float32))
    np.testing.assert_array_equal(m.layers[0][1].running_mean, rm)
    m.forward(np.random.default_rng(0).normal(size=(4, 6)).astype(np.float32), train=True)
    assert not np.array_equal(m.layers[0][1].running_mean, rm)


def test_astype_float64_keeps_outputs():
    m = small()
    x = np.random.default_rng(3).normal(size=(2, 6)).astype(np.float32)
    m64 = m.astype(np.float64)
    with ad.no_grad():
        np.testing.assert_allclose(m64(x.astype(np.float64))[0].data, m(x)[0].data, atol=1e-5)
    assert m64.classifier.weight.dtype == np.float64
