"""Differentiable key-value memory read through cosine-similarity attention."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation

SHARED = "shared"
TASK_SPECIFIC = "task_specific"
QUERY_MODES = ("spatial", "channel", "vector")


class MemoryBank:
    """Learnable keys ``(L, d)`` and values ``(L, d')`` with a frozen-slot mask.

    ``snapshot_keys``/``snapshot_values`` hold the parameters as they were at
    the start of the current task; importance scoring measures drift from
    them.
    """

    def __init__(self, num_slots, key_dim, value_dim=None, level=SHARED, init_std=0.01, rng=None, dtype=np.float32):
        if num_slots < 1:
            raise ContractViolation("a memory bank needs at least one slot")
        if level not in (SHARED, TASK_SPECIFIC):
            raise ContractViolation(f"unknown memory level {level!r}")
        rng = np.random.default_rng(rng)
        value_dim = key_dim if value_dim is None else value_dim
        self.level = level
        self.keys = Tensor(rng.normal(0.0, init_std, (num_slots, key_dim)), requires_grad=True, dtype=dtype)
        self.values = Tensor(rng.normal(0.0, init_std, (num_slots, value_dim)), requires_grad=True, dtype=dtype)
        self.frozen = np.zeros(num_slots, dtype=bool)
        self.take_snapshot()

    @property
    def num_slots(self):
        return self.keys.shape[0]

    @property
    def key_dim(self):
        return self.keys.shape[1]

    @property
    def value_dim(self):
        return self.values.shape[1]

    @property
    def num_frozen(self):
        return int(self.frozen.sum())

    def frozen_indices(self):
        return np.flatnonzero(self.frozen)

    def unfrozen_indices(self):
        return np.flatnonzero(~self.frozen)

    def take_snapshot(self):
        self.snapshot_keys = self.keys.data.copy()
        self.snapshot_values = self.values.data.copy()

    def parameters(self):
        return [self.keys, self.values]

    def read(self, queries):
        return memory_read(self, queries)

    def append_slots(self, count, init_std, rng):
        """Append ``count`` trainable slots drawn from N(0, init_std^2)."""
        if count <= 0:
            return
        rng = np.random.default_rng(rng)
        dt = self.keys.dtype
        new_keys = rng.normal(0.0, init_std, (count, self.key_dim)).astype(dt)
        new_values = rng.normal(0.0, init_std, (count, self.value_dim)).astype(dt)
        self.keys = Tensor(np.concatenate([self.keys.data, new_keys]), requires_grad=True, dtype=dt)
        self.values = Tensor(np.concatenate([self.values.data, new_values]), requires_grad=True, dtype=dt)
        self.frozen = np.concatenate([self.frozen, np.zeros(count, dtype=bool)])

    def astype(self, dtype):
        self.keys = Tensor(self.keys.data, requires_grad=True, dtype=dtype)
        self.values = Tensor(self.values.data, requires_grad=True, dtype=dtype)
        self.snapshot_keys = self.snapshot_keys.astype(dtype)
        self.snapshot_values = self.snapshot_values.astype(dtype)
        return self

    def __repr__(self):
        return (f"MemoryBank(level={self.level!r}, slots={self.num_slots}, frozen={self.num_frozen}, "
                f"key_dim={self.key_dim}, value_dim={self.value_dim})")


def memory_read(bank, queries):
    """Attend over ``bank`` with one query ``(d,)`` or a batch ``(N, d)``.

    Keys and queries are l2-normalised, so the attention logits are cosine
    similarities. Returns ``(readout, attention)`` with shapes ``(N, d')`` and
    ``(N, L)`` (leading axis dropped for a single query).
    """
    if not isinstance(queries, Tensor):
        queries = Tensor(queries, dtype=bank.keys.dtype)
    if queries.ndim not in (1, 2) or queries.shape[-1] != bank.key_dim:
        raise ContractViolation(f"query shape {queries.shape} does not match key dim {bank.key_dim}")
    q = ad.l2_normalize(queries, axis=-1)
    k = ad.l2_normalize(bank.keys, axis=-1)
    attention = ad.softmax(ad.matmul(q, ad.transpose(k)), axis=-1)
    readout = ad.matmul(attention, bank.values)
    return readout, attention


def extract_queries(feature_map, mode="spatial"):
    """Turn a feature map into memory queries.

    ``spatial``: a ``(C, H, W)`` map yields C queries of dimension H*W.
    ``channel``: the same map yields H*W queries of dimension C.
    ``vector``: a 1-D activation is its own single query.

    A leading batch axis is accepted; queries from all samples are stacked
    sample-major into an ``(N, d)`` tensor.
    """
    x = feature_map if isinstance(feature_map, Tensor) else Tensor(feature_map)
    if mode == "vector":
        if x.ndim not in (1, 2):
            raise ContractViolation(f"vector mode needs a 1-D activation, got shape {x.shape}")
        return ad.reshape(x, (-1, x.shape[-1]))
    if mode not in QUERY_MODES:
        raise ContractViolation(f"unknown query mode {mode!r}")
    if x.ndim not in (3, 4):
        raise ContractViolation(f"{mode} mode needs a C x H x W map, got shape {x.shape}")
    batched = x if x.ndim == 4 else ad.reshape(x, (1,) + x.shape)
    b, c, h, w = batched.shape
    flat = ad.reshape(batched, (b, c, h * w))
    if mode == "spatial":
        return ad.reshape(flat, (b * c, h * w))
    return ad.reshape(ad.transpose(flat, (0, 2, 1)), (b * h * w, c))


def assemble_readout(readouts, original_shape, mode="spatial"):
    """Inverse of :func:`extract_queries`: place each readout where its query came from."""
    r = readouts if isinstance(readouts, Tensor) else Tensor(readouts)
    shape = tuple(original_shape)
    if r.ndim == 1:
        r = ad.reshape(r, (1, -1))
    if mode == "vector":
        expected = (int(np.prod(shape[:-1])) if len(shape) > 1 else 1, shape[-1])
        if r.shape != expected:
            raise ContractViolation(f"readouts {r.shape} cannot fill shape {shape}")
        return ad.reshape(r, shape)
    if mode not in QUERY_MODES:
        raise ContractViolation(f"unknown query mode {mode!r}")
    if len(shape) not in (3, 4):
        raise ContractViolation(f"{mode} mode needs a C x H x W target shape, got {shape}")
    b, c, h, w = shape if len(shape) == 4 else (1,) + shape
    if mode == "spatial":
        if r.shape != (b * c, h * w):
            raise ContractViolation(f"readouts {r.shape} cannot fill shape {shape}")
        return ad.reshape(r, shape)
    if r.shape != (b * h * w, c):
        raise ContractViolation(f"readouts {r.shape} cannot fill shape {shape}")
    back = ad.transpose(ad.reshape(r, (b, h * w, c)), (0, 2, 1))
    return ad.reshape(back, shape)


def mask_frozen_gradients(bank):
    """Zero the gradient rows of frozen slots so the optimizer leaves them alone."""
    if not bank.frozen.any():
        return
    for p in bank.parameters():
        if p.grad is not None:
            p.grad[bank.frozen] = 0
