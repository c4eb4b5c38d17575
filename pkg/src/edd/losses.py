"""Training objective: classification with output distillation, memory
alignment, and frozen/active orthogonality."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation
from .memory import TASK_SPECIFIC


@dataclass
class LossWeights:
    lambda_mem: float = 20.0
    lambda_orth: float = 10.0
    orth_scale: float = 1000.0
    distill_alpha: float = 0.5
    distill_temperature: float = 2.0

    def __post_init__(self):
        for name in ("lambda_mem", "lambda_orth", "orth_scale", "distill_alpha"):
            if getattr(self, name) < 0:
                raise ContractViolation(f"{name} must be non-negative")
        if self.distill_temperature <= 0:
            raise ContractViolation("distill_temperature must be positive")


def _zero(like=None):
    return Tensor(0.0, dtype=like.dtype if like is not None else np.float32)


def orthogonality_penalty(frozen_keys, active_keys, frozen_values, active_values):
    """Mean squared cosine between every frozen/active pair, for keys plus values."""
    total = None
    for frozen, active in ((frozen_keys, active_keys), (frozen_values, active_values)):
        cross = ad.matmul(ad.l2_normalize(frozen), ad.transpose(ad.l2_normalize(active)))
        term = ad.mean(ad.square(cross))
        total = term if total is None else ad.add(total, term)
    return total


def orthogonality_loss(bank, orth_scale=1.0):
    """Orthogonality of the task-specific bank's active slots to its frozen ones.

    Frozen rows enter as constants, so only active rows receive gradient.
    Zero when either group is empty.
    """
    if bank.level != TASK_SPECIFIC:
        raise ContractViolation("orthogonality applies to the task-specific memory only")
    frozen, active = bank.frozen_indices(), bank.unfrozen_indices()
    if len(frozen) == 0 or len(active) == 0:
        return _zero(bank.keys)
    penalty = orthogonality_penalty(
        Tensor(bank.keys.data[frozen]), ad.take(bank.keys, active, axis=0),
        Tensor(bank.values.data[frozen]), ad.take(bank.values, active, axis=0))
    return ad.scale(penalty, orth_scale)


def alignment_loss(attn_old, attn_new):
    """Average over memories of ``mean(1 - cos(new, old))`` across samples and queries.

    Each argument is a sequence with one ``(N, L)`` attention matrix per
    memory; old attentions are treated as constants.
    """
    if len(attn_old) != len(attn_new) or not attn_new:
        raise ContractViolation("need one old and one new attention matrix per memory")
    total = None
    for old, new in zip(attn_old, attn_new):
        old_data = old.data if isinstance(old, Tensor) else np.asarray(old)
        new = new if isinstance(new, Tensor) else Tensor(new)
        if old_data.shape != new.shape:
            raise ContractViolation(
                f"attention shapes differ ({old_data.shape} vs {new.shape}); "
                "the old model must be expanded before it is copied")
        # 1 - cos(a, b) == |a/|a| - b/|b||^2 / 2; this form is exactly 0 for identical rows
        gap = ad.sub(ad.l2_normalize(new, axis=-1), Tensor(ad.l2_normalize(Tensor(old_data, dtype=new.dtype)).data))
        term = ad.scale(ad.mean(ad.sum(ad.square(gap), axis=-1)), 0.5)
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / len(attn_new))


def classification_with_distillation(logits_new, logits_old, labels, weights, ce_classes, distill_classes=()):
    """Cross-entropy restricted to ``ce_classes`` plus softened-logit distillation.

    ``labels`` are global class ids and must all lie in ``ce_classes``. When
    ``logits_old`` is given and ``distill_classes`` is non-empty, adds
    ``alpha * T^2 * KL(softmax(old/T) || softmax(new/T))`` over those classes.
    """
    ce_classes = np.asarray(ce_classes, dtype=np.intp)
    labels = np.asarray(labels)
    position = {int(c): i for i, c in enumerate(ce_classes)}
    try:
        local = np.array([position[int(y)] for y in labels], dtype=np.intp)
    except KeyError as exc:
        raise ContractViolation(f"label {exc.args[0]} is not among the current classes") from None
    loss = ad.cross_entropy_with_logits(ad.take(logits_new, ce_classes, axis=1), local)
    distill_classes = np.asarray(distill_classes, dtype=np.intp)
    if logits_old is None or distill_classes.size == 0 or weights.distill_alpha == 0:
        return loss
    T = weights.distill_temperature
    old = (logits_old.data if isinstance(logits_old, Tensor) else np.asarray(logits_old))[:, distill_classes]
    old = old.astype(logits_new.dtype) / T
    old = old - old.max(axis=1, keepdims=True)
    log_p = old - np.log(np.exp(old).sum(axis=1, keepdims=True))
    p = np.exp(log_p)
    log_q = ad.log_softmax(ad.scale(ad.take(logits_new, distill_classes, axis=1), 1.0 / T), axis=1)
    # KL(p || q) = sum p log p - sum p log q; the first sum is a constant
    cross = ad.sum(ad.mul(Tensor(p, dtype=logits_new.dtype), log_q), axis=1)
    kl = ad.sub(Tensor(np.sum(p * log_p, axis=1), dtype=logits_new.dtype), cross)
    return ad.add(loss, ad.scale(ad.mean(kl), weights.distill_alpha * T * T))


def total_loss(ce, align, orth, weights):
    """``ce + lambda_mem * align + lambda_orth * orth``."""
    ce, align, orth = (x if isinstance(x, Tensor) else Tensor(x) for x in (ce, align, orth))
    out = ad.add(ce, ad.scale(align, weights.lambda_mem))
    return ad.add(out, ad.scale(orth, weights.lambda_orth))
