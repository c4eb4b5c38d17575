"""Finite-difference verification of every backward rule the trainer relies on.

Each check scalarizes an operation as ``sum(op(x) * R)`` with a fixed random
``R`` and compares reverse-mode gradients to central differences in float64.
All operations are looked up through the ``autodiff`` module at call time, so
patching a rule there is seen by every check that uses it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .losses import LossWeights, alignment_loss, classification_with_distillation, orthogonality_loss, total_loss
from .memory import TASK_SPECIFIC, MemoryBank, memory_read
from .model import Model, ModelConfig, deep_copy

TOLERANCE = 1e-4


@dataclass(frozen=True)
class CheckResult:
    name: str
    error: float

    @property
    def passed(self):
        return bool(np.isfinite(self.error) and self.error < TOLERANCE)


def _weighted(op, rng):
    """``x -> sum(op(x) * R)`` with ``R`` drawn once, on first use, to match the output shape."""
    cache = {}

    def f(x):
        out = op(x)
        if "R" not in cache:
            cache["R"] = rng.normal(size=out.shape)
        return ad.sum(ad.mul(out, Tensor(cache["R"], dtype=np.float64)))

    return f


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def primitive_checks(rng):
    """One check per primitive and differentiable argument."""
    f64 = np.float64
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    row = rng.normal(size=(4,))
    m = rng.normal(size=(4, 5))
    labels = rng.integers(0, 4, size=3)
    gamma, beta = rng.normal(size=4) + 1.5, rng.normal(size=4)
    running = (rng.normal(size=4), rng.uniform(0.5, 2.0, size=4))

    def const(v):
        return Tensor(v, dtype=f64)

    def bn(x, g, bt, training):
        stats = (np.zeros(4), np.ones(4)) if training else (running[0].copy(), running[1].copy())
        return ad.batchnorm(x, g, bt, *stats, training)

    cases = {
        "add": (lambda x: ad.add(x, const(b)), a),
        "add/broadcast": (lambda x: ad.add(const(a), x), row),
        "sub": (lambda x: ad.sub(const(a), x), b),
        "mul": (lambda x: ad.mul(x, const(b)), a),
        "mul/broadcast": (lambda x: ad.mul(const(a), x), row),
        "neg": (ad.neg, a),
        "scale": (lambda x: ad.scale(x, -2.5), a),
        "square": (ad.square, a),
        "relu": (ad.relu, _away_from_zero(rng, (3, 4))),
        "matmul/left": (lambda x: ad.matmul(x, const(m)), a),
        "matmul/right": (lambda x: ad.matmul(const(a), x), m),
        "matmul/vector": (lambda x: ad.matmul(x, const(m)), row),
        "reshape": (lambda x: ad.reshape(x, (2, 6)), a),
        "transpose": (ad.transpose, a),
        "take": (lambda x: ad.take(x, np.array([2, 0, 2]), axis=0), a),
        "sum/axis": (lambda x: ad.sum(x, axis=0), a),
        "mean/axis": (lambda x: ad.mean(x, axis=1), a),
        "mean/all": (lambda x: ad.reshape(ad.mean(x), (1,)), a),
        "inner_product": (lambda x: ad.inner_product(x, const(b)), a),
        "softmax": (ad.softmax, a),
        "log_softmax": (ad.log_softmax, a),
        "l2_normalize": (ad.l2_normalize, a),
        "cosine_similarity": (lambda x: ad.cosine_similarity(x, const(b)), a),
        "cross_entropy_with_logits": (lambda x: ad.reshape(ad.cross_entropy_with_logits(x, labels), (1,)), a),
        "batchnorm/train/x": (lambda x: bn(x, const(gamma), const(beta), True), a),
        "batchnorm/train/gamma": (lambda g: bn(const(a), g, const(beta), True), gamma),
        "batchnorm/train/beta": (lambda bt: bn(const(a), const(gamma), bt, True), beta),
        "batchnorm/eval/x": (lambda x: bn(x, const(gamma), const(beta), False), a),
        "batchnorm/eval/gamma": (lambda g: bn(const(a), g, const(beta), False), gamma),
    }
    return [CheckResult(f"primitive/{name}", ad.grad_check(_weighted(op, rng), x)) for name, (op, x) in cases.items()]


def _t(v):
    return v if isinstance(v, Tensor) else Tensor(v, dtype=np.float64)


def memory_read_checks(rng, slots=5, dim=4, batch=3):
    keys, values = rng.normal(size=(slots, dim)), rng.normal(size=(slots, dim))
    queries = rng.normal(size=(batch, dim))

    def read(k=keys, v=values, q=queries):
        bank = MemoryBank(slots, dim, dim, dtype=np.float64)
        bank.keys, bank.values = _t(k), _t(v)
        return memory_read(bank, _t(q))

    return [
        CheckResult("memory_read/keys", ad.grad_check(_weighted(lambda k: read(k=k)[0], rng), keys)),
        CheckResult("memory_read/values", ad.grad_check(_weighted(lambda v: read(v=v)[0], rng), values)),
        CheckResult("memory_read/query", ad.grad_check(_weighted(lambda q: read(q=q)[0], rng), queries)),
        CheckResult("memory_read/attention_wrt_keys", ad.grad_check(_weighted(lambda k: read(k=k)[1], rng), keys)),
    ]


def orthogonality_checks(rng, dim=6, frozen=3, active=3):
    keys = rng.normal(size=(frozen + active, dim))
    values = rng.normal(size=(frozen + active, dim))
    mask = np.arange(frozen + active) < frozen
    active_coords = np.flatnonzero(np.repeat(~mask, dim))

    def loss(k=keys, v=values):
        bank = MemoryBank(frozen + active, dim, dim, TASK_SPECIFIC, dtype=np.float64)
        bank.keys, bank.values, bank.frozen = _t(k), _t(v), mask
        return orthogonality_loss(bank, orth_scale=3.0)

    return [
        CheckResult("orthogonality/active_keys", ad.grad_check(lambda k: loss(k=k), keys, coords=active_coords)),
        CheckResult("orthogonality/active_values", ad.grad_check(lambda v: loss(v=v), values, coords=active_coords)),
    ]


def alignment_checks(rng, batch=4, slots=6):
    old = [ad.softmax(_t(rng.normal(size=(batch, slots)))).data for _ in range(2)]
    new_task = rng.normal(size=(batch, slots))
    new_shared = ad.softmax(_t(rng.normal(size=(batch, slots))))

    def loss(logits):
        return alignment_loss(old, [new_shared, ad.softmax(logits)])

    direct = rng.dirichlet(np.ones(slots), size=batch)
    return [
        CheckResult("alignment/new_attention_logits", ad.grad_check(loss, new_task)),
        CheckResult("alignment/new_attention", ad.grad_check(lambda a: alignment_loss(old[:1], [a]), direct)),
    ]


def desk_model(rng, num_classes=6, input_dim=5, width=6, slots=5, frozen=2):
    """A float64 two-layer model with both memories and a few frozen slots."""
    config = ModelConfig(input_dim=input_dim, num_classes=num_classes, layer_sizes=(width, width),
                         shared_memory_after=1, task_memory_after=2, memory_slots_init=slots, slot_init_stddev=0.5)
    model = Model(config, rng=rng, dtype=np.float64)
    for bank in model.memories:
        bank.frozen[:frozen] = True
    return model


def _parameter_owners(model):
    owners = []
    for i, (linear, bn) in enumerate(model.layers):
        owners += [(f"layers.{i}.weight", linear, "weight"), (f"layers.{i}.bias", linear, "bias"),
                   (f"layers.{i}.bn.gamma", bn, "gamma"), (f"layers.{i}.bn.beta", bn, "beta")]
    for name in ("shared_memory", "task_memory"):
        bank = getattr(model, name)
        if bank is not None:
            owners += [(f"{name}.keys", bank, "keys"), (f"{name}.values", bank, "values")]
    owners += [("classifier.weight", model.classifier, "weight"), ("classifier.bias", model.classifier, "bias")]
    return owners


def end_to_end_checks(rng, batch=8):
    """``total_loss`` against every trainable parameter of a desk model with a teacher."""
    model = desk_model(rng)
    teacher = deep_copy(model)
    for p in teacher.parameters():
        p.data += 0.05 * rng.normal(size=p.shape)
    x = rng.normal(size=(batch, model.config.input_dim))
    labels = rng.integers(3, 6, size=batch)
    weights = LossWeights(lambda_mem=2.0, lambda_orth=0.5, orth_scale=4.0)
    with ad.no_grad():
        old_logits, old_s, old_t = teacher.forward(x, train=False)

    def objective():
        logits, attn_s, attn_t = model.forward(x, train=True)
        ce = classification_with_distillation(logits, old_logits, labels, weights, [3, 4, 5], [0, 1, 2])
        align = alignment_loss([old_s, old_t], [attn_s, attn_t])
        orth = orthogonality_loss(model.task_memory, weights.orth_scale)
        return total_loss(ce, align, orth, weights)

    results = []
    for name, owner, attr in _parameter_owners(model):
        original = getattr(owner, attr)
        coords = None
        if isinstance(owner, MemoryBank):
            coords = np.flatnonzero(np.repeat(~owner.frozen, original.shape[1]))

        def f(p, owner=owner, attr=attr):
            setattr(owner, attr, p)
            return objective()

        try:
            err = ad.grad_check(f, original, coords=coords)
        finally:
            setattr(owner, attr, original)
        results.append(CheckResult(f"total_loss/{name}", err))
    return results


def run_suite(seed=0, trials=3):
    """Every check, repeated over ``trials`` random draws; returns CheckResults in a fixed order."""
    results = []
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        for group in (primitive_checks, memory_read_checks, orthogonality_checks, alignment_checks):
            results += [CheckResult(f"{r.name}#{trial}", r.error) for r in group(rng)]
    results += end_to_end_checks(np.random.default_rng([seed, trials]))
    return results


def format_report(results):
    lines = [f"{r.name:<48} {r.error:.3e} {'ok' if r.passed else 'FAIL'}" for r in results]
    worst = max((r.error for r in results), default=0.0)
    failed = sum(not r.passed for r in results)
    lines.append(f"{len(results)} checks, max relative error {worst:.3e}, {failed} failed")
    return "\n".join(lines)
