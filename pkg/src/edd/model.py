"""Dense encoder-classifier with shared and task-specific memories."""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation
from .memory import QUERY_MODES, SHARED, TASK_SPECIFIC, MemoryBank, assemble_readout, extract_queries


@dataclass
class ModelConfig:
    """Architecture of the desk-scale backbone.

    Layer indices are 1-based: ``shared_memory_after=1`` places the shared
    memory behind the first hidden layer. In ``spatial``/``channel`` query
    mode each hidden activation of width ``w`` is viewed as a
    ``(map_channels, w // map_channels, 1)`` feature map.
    """

    input_dim: int
    num_classes: int
    layer_sizes: tuple = (64, 64, 64)
    shared_memory_after: int = 1
    task_memory_after: int = 2
    memory_slots_init: int = 64
    query_mode: str = "vector"
    map_channels: int = 1
    slot_init_stddev: float = 0.01
    use_memory: bool = True
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.layer_sizes = tuple(int(w) for w in self.layer_sizes)
        n = len(self.layer_sizes)
        if self.input_dim < 1 or self.num_classes < 1 or n == 0:
            raise ContractViolation("input_dim, num_classes and layer_sizes must be positive")
        if not (1 <= self.shared_memory_after < self.task_memory_after <= n):
            raise ContractViolation(
                f"need 1 <= shared_memory_after < task_memory_after <= {n}, "
                f"got {self.shared_memory_after}, {self.task_memory_after}")
        if self.memory_slots_init < 1:
            raise ContractViolation("memory_slots_init must be >= 1")
        if self.query_mode not in QUERY_MODES:
            raise ContractViolation(f"unknown query mode {self.query_mode!r}")
        if self.query_mode != "vector":
            for idx in (self.shared_memory_after, self.task_memory_after):
                if self.layer_sizes[idx - 1] % self.map_channels:
                    raise ContractViolation(
                        f"layer {idx} width {self.layer_sizes[idx - 1]} not divisible by map_channels")

    def key_dim(self, layer):
        width = self.layer_sizes[layer - 1]
        if self.query_mode == "vector":
            return width
        if self.query_mode == "spatial":
            return width // self.map_channels
        return self.map_channels

    def to_dict(self):
        d = asdict(self)
        d["layer_sizes"] = list(self.layer_sizes)
        return d


class Linear:
    def __init__(self, fan_in, fan_out, rng, dtype=np.float32):
        self.weight = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out)), requires_grad=True, dtype=dtype)
        self.bias = Tensor(np.zeros(fan_out), requires_grad=True, dtype=dtype)

    def __call__(self, x):
        return ad.add(ad.matmul(x, self.weight), self.bias)

    def parameters(self):
        return [self.weight, self.bias]


class BatchNorm:
    def __init__(self, features, momentum=0.1, eps=1e-5, dtype=np.float32):
        self.gamma = Tensor(np.ones(features), requires_grad=True, dtype=dtype)
        self.beta = Tensor(np.zeros(features), requires_grad=True, dtype=dtype)
        self.running_mean = np.zeros(features, dtype=dtype)
        self.running_var = np.ones(features, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x, training, momentum=None):
        m = self.momentum if momentum is None else momentum
        return ad.batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var, training, m, self.eps)

    def parameters(self):
        return [self.gamma, self.beta]


class Model:
    """``C(E(x))`` with memories read at two points inside ``E``.

    ``seen_classes`` and ``task_index`` record the protocol position of the
    model so that a copied or reloaded model knows what it has learned.
    """

    def __init__(self, config, rng=None, dtype=np.float32):
        self.config = config
        rng = np.random.default_rng(rng)
        widths = (config.input_dim,) + config.layer_sizes
        self.layers = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            self.layers.append((Linear(fan_in, fan_out, rng, dtype),
                                BatchNorm(fan_out, config.bn_momentum, config.bn_eps, dtype)))
        self.shared_memory = self.task_memory = None
        if config.use_memory:
            for attr, level, where in (("shared_memory", SHARED, config.shared_memory_after),
                                       ("task_memory", TASK_SPECIFIC, config.task_memory_after)):
                d = config.key_dim(where)
                setattr(self, attr, MemoryBank(config.memory_slots_init, d, d, level, config.slot_init_stddev, rng, dtype))
        self.classifier = Linear(widths[-1], config.num_classes, rng, dtype)
        self.seen_classes = []
        self.task_index = 0

    @property
    def memories(self):
        return [m for m in (self.shared_memory, self.task_memory) if m is not None]

    def parameters(self):
        params = []
        for linear, bn in self.layers:
            params += linear.parameters() + bn.parameters()
        for bank in self.memories:
            params += bank.parameters()
        return params + self.classifier.parameters()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def _apply_memory(self, bank, h):
        mode = self.config.query_mode
        if mode == "vector":
            readout, attention = bank.read(h)
            return readout, attention
        c = self.config.map_channels
        shape = (h.shape[0], c, h.shape[1] // c, 1)
        fmap = ad.reshape(h, shape)
        readout, attention = bank.read(extract_queries(fmap, mode))
        return ad.reshape(assemble_readout(readout, shape, mode), h.shape), attention

    def encode(self, x, train=False, bn_momentum=None):
        """Return ``(features, attn_shared, attn_task)``; attention rows are per query."""
        if not isinstance(x, Tensor):
            x = Tensor(x, dtype=self.layers[0][0].weight.dtype)
        if x.ndim == 1:
            x = ad.reshape(x, (1, -1))
        if x.ndim != 2 or x.shape[1] != self.config.input_dim:
            raise ContractViolation(f"expected input of width {self.config.input_dim}, got shape {x.shape}")
        attn = {}
        h = x
        for i, (linear, bn) in enumerate(self.layers, start=1):
            h = ad.relu(bn(linear(h), train, bn_momentum))
            if i == self.config.shared_memory_after and self.shared_memory is not None:
                h, attn["shared"] = self._apply_memory(self.shared_memory, h)
            elif i == self.config.task_memory_after and self.task_memory is not None:
                h, attn["task"] = self._apply_memory(self.task_memory, h)
        return h, attn.get("shared"), attn.get("task")

    def forward(self, x, train=False):
        """Return ``(logits, attn_shared, attn_task)``."""
        features, attn_s, attn_t = self.encode(x, train)
        return self.classifier(features), attn_s, attn_t

    __call__ = forward

    def features(self, x):
        with ad.no_grad():
            return self.encode(x, train=False)[0].data

    def batchnorms(self):
        return [bn for _, bn in self.layers]

    def state_arrays(self):
        """Every array of model state, in a fixed order, keyed by name."""
        state = {}
        for i, (linear, bn) in enumerate(self.layers):
            state[f"layers.{i}.weight"] = linear.weight.data
            state[f"layers.{i}.bias"] = linear.bias.data
            state[f"layers.{i}.bn.gamma"] = bn.gamma.data
            state[f"layers.{i}.bn.beta"] = bn.beta.data
            state[f"layers.{i}.bn.running_mean"] = bn.running_mean
            state[f"layers.{i}.bn.running_var"] = bn.running_var
        for name in ("shared_memory", "task_memory"):
            bank = getattr(self, name)
            if bank is None:
                continue
            state[f"{name}.keys"] = bank.keys.data
            state[f"{name}.values"] = bank.values.data
            state[f"{name}.snapshot_keys"] = bank.snapshot_keys
            state[f"{name}.snapshot_values"] = bank.snapshot_values
        state["classifier.weight"] = self.classifier.weight.data
        state["classifier.bias"] = self.classifier.bias.data
        return state

    def astype(self, dtype):
        """Copy of the model with every array cast to ``dtype``."""
        other = deep_copy(self)
        for linear, bn in other.layers:
            for mod, names in ((linear, ("weight", "bias")), (bn, ("gamma", "beta"))):
                for n in names:
                    setattr(mod, n, Tensor(getattr(mod, n).data, requires_grad=True, dtype=dtype))
            bn.running_mean = bn.running_mean.astype(dtype)
            bn.running_var = bn.running_var.astype(dtype)
        for bank in other.memories:
            bank.astype(dtype)
        for n in ("weight", "bias"):
            setattr(other.classifier, n, Tensor(getattr(other.classifier, n).data, requires_grad=True, dtype=dtype))
        return other


def deep_copy(model):
    """State-disjoint copy, including frozen masks, snapshots and BN statistics."""
    model.zero_grad()
    return copy.deepcopy(model)


def bn_adapt(model, data, epochs, momentum, batch_size=128):
    """Recalibrate BN running statistics on ``data`` without touching any weight.

    Batches are visited in dataset order; ``momentum`` is the coefficient of
    the running-statistics moving average.
    """
    if epochs < 1:
        raise ContractViolation("bn_adapt needs epochs >= 1")
    features = data.features if hasattr(data, "features") else np.asarray(data)
    if len(features) == 0:
        raise ContractViolation("bn_adapt needs a non-empty dataset")
    with ad.no_grad():
        for _ in range(epochs):
            for start in range(0, len(features), batch_size):
                model.encode(features[start:start + batch_size], train=True, bn_momentum=momentum)
