"""Task-by-task training: distillation from the previous model, BN
adaptation, and post-task memory adjustment, plus FT/JT reference modes."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .adjustment import AdjustmentPolicy, freeze_count, orthogonality_feasible, prune_and_expand
from .errors import ContractViolation
from .losses import LossWeights, alignment_loss, classification_with_distillation, orthogonality_loss, total_loss
from .memory import mask_frozen_gradients
from .metrics import accuracy_matrix, avg_acc
from .model import Model, ModelConfig, bn_adapt, deep_copy
from .optim import make_optimizer

logger = logging.getLogger(__name__)

MODES = ("edd", "finetune", "joint")


@dataclass
class TrainConfig:
    epochs_per_task: int = 50
    batch_size: int = 128
    learning_rate: float = 0.001
    optimizer: str = "adam"
    loss_weights: LossWeights = field(default_factory=LossWeights)
    adjustment: AdjustmentPolicy = field(default_factory=AdjustmentPolicy)
    ba_epochs: int = 20
    ba_momentum: float = 0.0001
    seed: int = 0
    mode: str = "edd"

    def __post_init__(self):
        if self.epochs_per_task < 1 or self.batch_size < 1:
            raise ContractViolation("epochs_per_task and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ContractViolation("learning_rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ContractViolation(f"unknown optimizer {self.optimizer!r}")
        if self.mode not in MODES:
            raise ContractViolation(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.ba_epochs < 0:
            raise ContractViolation("ba_epochs must be >= 0 (0 disables BN adaptation)")


@dataclass
class ExperimentReport:
    mode: str
    seed: int
    accuracy: np.ndarray
    losses: list = field(default_factory=list)
    capacity: list = field(default_factory=list)
    model: Model = None
    stream_signature: str = ""

    @property
    def avg_acc(self):
        return avg_acc(self.accuracy)


def _task_rng(seed, task_index):
    return np.random.default_rng([seed, task_index])


def train_task(prev_model, task, config, model_config=None, trace=None):
    """Learn ``task`` starting from ``prev_model`` and return the new model.

    In ``edd`` mode the previous model is BN-adapted to the task, copied,
    and kept as a frozen teacher for output distillation and attention
    alignment; after training both memories freeze their most-changed slots
    and grow by the same amount. ``finetune`` and ``joint`` train with plain
    cross-entropy over every class seen so far.
    """
    if prev_model is None and model_config is None:
        raise ContractViolation("the first task needs a model_config")
    previous = list(prev_model.seen_classes) if prev_model is not None else []
    current = [int(c) for c in task.classes]
    overlap = set(previous) & set(current)
    if overlap:
        raise ContractViolation(f"classes {sorted(overlap)} were already learned")
    task_index = (prev_model.task_index if prev_model is not None else 0) + 1
    rng = _task_rng(config.seed, task_index)
    edd = config.mode == "edd"

    if prev_model is not None:
        if edd and config.ba_epochs > 0:
            bn_adapt(prev_model, task.train, config.ba_epochs, config.ba_momentum, config.batch_size)
        model = deep_copy(prev_model)
    else:
        model = Model(model_config, rng=_task_rng(config.seed, 0))
    teacher = prev_model if edd else None
    ce_classes = current if edd else previous + current
    weights = config.loss_weights
    params = model.parameters()
    opt = make_optimizer(config.optimizer, params, config.learning_rate)

    features, labels = task.train.features, task.train.labels
    n = len(labels)
    if n == 0:
        raise ContractViolation("task has no training samples")
    step = 0
    for epoch in range(config.epochs_per_task):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            x, y = features[idx], labels[idx]
            logits, attn_s, attn_t = model.forward(x, train=True)
            old_logits = None
            align = orth = ad.Tensor(0.0)
            if teacher is not None:
                with ad.no_grad():
                    old_logits, old_s, old_t = teacher.forward(x, train=False)
                if model.memories:
                    align = alignment_loss([old_s, old_t], [attn_s, attn_t])
                    orth = orthogonality_loss(model.task_memory, weights.orth_scale)
            ce = classification_with_distillation(logits, old_logits, y, weights, ce_classes, previous)
            loss = total_loss(ce, align, orth, weights)
            opt.zero_grad()
            loss.backward(params)
            for bank in model.memories:
                mask_frozen_gradients(bank)
            opt.step()
            step += 1
            if trace is not None:
                trace.append(dict(task=task_index, epoch=epoch + 1, step=step, ce=float(ce.data),
                                  align=float(align.data), orth=float(orth.data), total=float(loss.data)))

    if edd:
        policy = config.adjustment
        for bank in model.memories:
            k = freeze_count(len(current), len(previous) + len(current), policy.basis_count(bank),
                             policy.pruning_ratio)
            prune_and_expand(bank, k, policy, rng)
        tm = model.task_memory
        if tm is not None and not orthogonality_feasible(tm.num_frozen, tm.key_dim):
            logger.warning("task memory has %d frozen slots but key dim %d; orthogonality cannot be met",
                           tm.num_frozen, tm.key_dim)
    model.seen_classes = previous + current
    model.task_index = task_index
    return model


def evaluate(model, datasets, seen_classes=None):
    """Accuracy of argmax over seen-class logits on each dataset (NaN if empty)."""
    seen = np.asarray(model.seen_classes if seen_classes is None else seen_classes, dtype=np.intp)
    if seen.size == 0:
        raise ContractViolation("evaluation needs at least one seen class")
    out = []
    with ad.no_grad():
        for ds in datasets:
            if len(ds) == 0:
                out.append(float("nan"))
                continue
            logits = model.forward(ds.features, train=False)[0].data[:, seen]
            pred = seen[np.argmax(logits, axis=1)]
            out.append(float(np.mean(pred == ds.labels)))
    return np.array(out)


def _capacity_rows(model, t):
    rows = []
    for name, bank in (("shared", model.shared_memory), ("task", model.task_memory)):
        if bank is not None:
            rows.append((t, name, bank.num_slots, bank.num_frozen))
    return rows


def default_model_config(stream, mode="edd", **overrides):
    mc = ModelConfig(input_dim=stream.input_dim, num_classes=stream.num_classes, **overrides)
    return replace(mc, use_memory=False) if mode == "finetune" else mc


def run_stream(stream, config, model_config=None, on_task_end=None):
    """Train through ``stream`` and record the task-by-task accuracy matrix.

    ``joint`` mode trains once on the union of all tasks (one accuracy row).
    ``on_task_end(t, model)`` is called after each task with 1-based ``t``.
    """
    if len(stream) == 0:
        raise ContractViolation("the task stream is empty")
    mc = model_config or default_model_config(stream, config.mode)
    if config.mode == "finetune" and mc.use_memory:
        mc = replace(mc, use_memory=False)
    T = len(stream)
    losses = []
    if config.mode == "joint":
        model = train_task(None, stream.joint(), config, mc, losses)
        A = accuracy_matrix(T, rows=1)
        A[0] = evaluate(model, [task.test for task in stream.tasks])
        capacity = _capacity_rows(model, 1)
        if on_task_end:
            on_task_end(1, model)
    else:
        A = accuracy_matrix(T)
        model = None
        capacity = []
        fresh = Model(mc, rng=_task_rng(config.seed, 0))
        capacity += _capacity_rows(fresh, 0)
        for t, task in enumerate(stream.tasks, start=1):
            model = train_task(model, task, config, mc, losses)
            A[t - 1, :t] = evaluate(model, [s.test for s in stream.tasks[:t]])
            capacity += _capacity_rows(model, t)
            logger.info("task %d/%d accuracies %s", t, T, np.round(A[t - 1, :t], 3).tolist())
            if on_task_end:
                on_task_end(t, model)
    return ExperimentReport(config.mode, config.seed, A, losses, capacity, model, stream.signature)
