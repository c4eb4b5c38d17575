"""Experiment configuration, checkpoints, and result files.

A configuration is one flat JSON object. Every key is optional; missing
keys take the defaults in :data:`DEFAULTS`. A checkpoint is a directory
holding ``manifest.json`` (shapes, byte offsets, CRC32 checksums, frozen
masks, protocol position) and ``tensors.bin`` (little-endian float32).
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
import warnings
import zlib
from dataclasses import dataclass

import numpy as np

from .adjustment import AdjustmentPolicy
from .autodiff import Tensor
from .errors import ContractViolation, IntegrityError, ParseError
from .losses import LossWeights
from .metrics import forgetting
from .model import Model, ModelConfig
from .streams import load_dataset, make_synthetic_stream, split_class_incremental, standardize_stream, stream_signature
from .trainer import MODES, TrainConfig

CHECKPOINT_FORMAT = 1
BLOB_DTYPE = np.dtype("<f4")

# name -> (default, accepted python types); floats also accept ints
DEFAULTS = {
    # stream
    "dataset": ("synthetic", (str,)),
    "train_path": (None, (str,)),
    "test_path": (None, (str,)),
    "train_labels_path": (None, (str,)),
    "test_labels_path": (None, (str,)),
    "num_classes": (10, (int,)),
    "num_tasks": (5, (int,)),
    "input_dim": (16, (int,)),
    "samples_per_class": (250, (int,)),
    "separation": (6.0, (float,)),
    "standardize": (True, (bool,)),
    # model
    "layer_sizes": ([64, 64, 64], (list,)),
    "shared_memory_after": (1, (int,)),
    "task_memory_after": (2, (int,)),
    "memory_slots_init": (1000, (int,)),
    "query_mode": ("vector", (str,)),
    "map_channels": (1, (int,)),
    "slot_init_stddev": (0.01, (float,)),
    "bn_momentum": (0.1, (float,)),
    # training
    "mode": ("edd", (str,)),
    "seed": (0, (int,)),
    "epochs_per_task": (50, (int,)),
    "batch_size": (128, (int,)),
    "learning_rate": (0.001, (float,)),
    "optimizer": ("adam", (str,)),
    "ba_epochs": (20, (int,)),
    "ba_momentum": (0.0001, (float,)),
    # objective
    "lambda_mem": (20.0, (float,)),
    "lambda_orth": (10.0, (float,)),
    "orth_scale": (1000.0, (float,)),
    "distill_alpha": (0.5, (float,)),
    "distill_temperature": (2.0, (float,)),
    # memory adjustment
    "pruning_ratio": (0.15, (float,)),
    "basis": ("total_slots", (str,)),
    "init_stddev": (0.01, (float,)),
}


class ConfigError(ParseError):
    """A configuration document with an unknown key or a mistyped value."""


def _coerce(key, value):
    default, types = DEFAULTS[key]
    if value is None:
        if default is None:
            return None
        raise ConfigError(f"config key {key!r} must not be null")
    if types == (float,):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {key!r} expects a number, got {type(value).__name__} {value!r}")
        return float(value)
    if types == (int,):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key {key!r} expects an integer, got {type(value).__name__} {value!r}")
        return value
    if types == (list,):
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"config key {key!r} expects a list of integers, got {value!r}")
        return list(value)
    if not isinstance(value, types):
        raise ConfigError(f"config key {key!r} expects {types[0].__name__}, got {type(value).__name__} {value!r}")
    return value


@dataclass(frozen=True)
class ExperimentConfig:
    """A fully resolved configuration; ``values`` has every key of DEFAULTS."""

    values: dict

    @classmethod
    def from_dict(cls, document=None):
        document = {} if document is None else document
        if not isinstance(document, dict):
            raise ConfigError("a configuration must be a JSON object")
        unknown = sorted(set(document) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config key {unknown[0]!r}")
        values = {key: _coerce(key, document[key]) if key in document else _copy(default)
                  for key, (default, _) in DEFAULTS.items()}
        if values["mode"] not in MODES:
            raise ConfigError(f"config key 'mode' must be one of {MODES}, got {values['mode']!r}")
        return cls(values)

    def __getitem__(self, key):
        return self.values[key]

    def to_dict(self):
        return {k: _copy(v) for k, v in self.values.items()}

    def replace(self, **changes):
        return ExperimentConfig.from_dict({**self.values, **changes})

    @property
    def hash(self):
        text = json.dumps(self.values, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def loss_weights(self):
        v = self.values
        return LossWeights(v["lambda_mem"], v["lambda_orth"], v["orth_scale"], v["distill_alpha"],
                           v["distill_temperature"])

    def adjustment(self):
        v = self.values
        return AdjustmentPolicy(v["pruning_ratio"], v["basis"], v["init_stddev"])

    def train_config(self):
        v = self.values
        return TrainConfig(epochs_per_task=v["epochs_per_task"], batch_size=v["batch_size"],
                           learning_rate=v["learning_rate"], optimizer=v["optimizer"],
                           loss_weights=self.loss_weights(), adjustment=self.adjustment(),
                           ba_epochs=v["ba_epochs"], ba_momentum=v["ba_momentum"], seed=v["seed"], mode=v["mode"])

    def model_config(self, stream):
        v = self.values
        return ModelConfig(input_dim=stream.input_dim, num_classes=stream.num_classes,
                           layer_sizes=tuple(v["layer_sizes"]), shared_memory_after=v["shared_memory_after"],
                           task_memory_after=v["task_memory_after"], memory_slots_init=v["memory_slots_init"],
                           query_mode=v["query_mode"], map_channels=v["map_channels"],
                           slot_init_stddev=v["slot_init_stddev"], use_memory=v["mode"] != "finetune",
                           bn_momentum=v["bn_momentum"])

    def build_stream(self):
        """The task stream described by the stream keys.

        The synthetic generator's seed is ``seed``, so runs that share a
        seed and stream keys see the same data whatever their mode.
        """
        v = self.values
        if v["dataset"] == "synthetic":
            return make_synthetic_stream(v["num_classes"], v["num_tasks"], v["input_dim"], v["samples_per_class"],
                                         v["separation"], v["seed"], v["standardize"])
        if v["dataset"] not in ("csv", "idx"):
            raise ConfigError(f"config key 'dataset' must be synthetic, csv or idx, got {v['dataset']!r}")
        if not v["train_path"] or not v["test_path"]:
            raise ContractViolation("file datasets need train_path and test_path")
        train = load_dataset(v["train_path"], v["dataset"], v["train_labels_path"])
        test = load_dataset(v["test_path"], v["dataset"], v["test_labels_path"])
        stream = split_class_incremental(train, test, v["num_tasks"])
        stream.metadata = {"kind": v["dataset"], "train": _file_digest(v["train_path"]),
                           "test": _file_digest(v["test_path"]), "num_tasks": v["num_tasks"],
                           "standardize": v["standardize"]}
        stream.signature = stream_signature(stream.metadata)
        return standardize_stream(stream) if v["standardize"] else stream


def _copy(value):
    return list(value) if isinstance(value, list) else value


def _file_digest(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()[:16]


def load_config(path):
    """Read and resolve a JSON configuration file."""
    with open(path) as fh:
        text = fh.read()
    try:
        document = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc.msg}", f"line {exc.lineno}") from None
    return ExperimentConfig.from_dict(document)


# -- checkpoints ------------------------------------------------------------


def _write_json(path, obj):
    with open(path, "w", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def save_checkpoint(model, path, seed=None, config_hash=None, extra=None):
    """Write ``model`` to the directory ``path`` (created if needed)."""
    os.makedirs(path, exist_ok=True)
    entries, offset = [], 0
    with open(os.path.join(path, "tensors.bin"), "wb") as blob:
        for name, array in model.state_arrays().items():
            raw = np.ascontiguousarray(array, dtype=BLOB_DTYPE).tobytes()
            blob.write(raw)
            entries.append({"name": name, "shape": list(array.shape), "offset": offset, "nbytes": len(raw),
                            "crc32": zlib.crc32(raw)})
            offset += len(raw)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "dtype": "float32-le",
        "model_config": model.config.to_dict(),
        "frozen": {name: getattr(model, name).frozen.astype(int).tolist()
                   for name in ("shared_memory", "task_memory") if getattr(model, name) is not None},
        "seen_classes": [int(c) for c in model.seen_classes],
        "task_index": int(model.task_index),
        "seed": seed,
        "config_hash": config_hash,
        "extra": extra or {},
        "tensors": entries,
    }
    _write_json(os.path.join(path, "manifest.json"), manifest)


def _read_manifest(path):
    try:
        with open(os.path.join(path, "manifest.json")) as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"{path}: manifest.json is corrupt ({exc.msg})", "manifest.json") from None
    required = ("tensors", "model_config", "seen_classes", "task_index")
    if not isinstance(manifest, dict) or any(k not in manifest for k in required):
        raise IntegrityError(f"{path}: manifest.json lacks one of {required}", "manifest.json")
    return manifest


def load_checkpoint(path, config_hash=None):
    """Rebuild the model saved at ``path``; returns ``(model, state)``.

    ``state`` holds the seed, config hash, and any extra fields. A
    ``config_hash`` that differs from the stored one only warns.
    """
    manifest = _read_manifest(path)
    with open(os.path.join(path, "tensors.bin"), "rb") as fh:
        blob = fh.read()
    arrays = {}
    for entry in manifest["tensors"]:
        name = entry["name"]
        start, nbytes = entry["offset"], entry["nbytes"]
        expected = int(np.prod(entry["shape"], dtype=np.int64)) * BLOB_DTYPE.itemsize
        if nbytes != expected:
            raise IntegrityError(f"tensor {name!r}: shape {entry['shape']} needs {expected} bytes, "
                                 f"manifest says {nbytes}", name)
        if start + nbytes > len(blob):
            raise IntegrityError(f"tensor {name!r}: blob ends at byte {len(blob)}, tensor needs "
                                 f"{start}..{start + nbytes}", name)
        raw = blob[start:start + nbytes]
        if zlib.crc32(raw) != entry["crc32"]:
            raise IntegrityError(f"tensor {name!r}: checksum mismatch", name)
        arrays[name] = np.frombuffer(raw, dtype=BLOB_DTYPE).reshape(entry["shape"]).astype(np.float32)
    end = max((e["offset"] + e["nbytes"] for e in manifest["tensors"]), default=0)
    if end != len(blob):
        raise IntegrityError(f"{path}: tensors.bin has {len(blob) - end} unexpected trailing bytes", "tensors.bin")

    model = Model(ModelConfig(**manifest["model_config"]), rng=0)
    _install(model, arrays, manifest.get("frozen", {}))
    model.seen_classes = list(manifest["seen_classes"])
    model.task_index = manifest["task_index"]
    stored = manifest.get("config_hash")
    if config_hash is not None and stored != config_hash:
        warnings.warn(f"checkpoint config hash {stored} differs from {config_hash}; loading anyway", stacklevel=2)
    state = {"seed": manifest.get("seed"), "config_hash": stored, "extra": manifest.get("extra", {})}
    return model, state


def _install(model, arrays, frozen):
    expected = set(model.state_arrays())
    if set(arrays) != expected:
        missing = sorted(expected - set(arrays)) or sorted(set(arrays) - expected)
        raise IntegrityError(f"checkpoint tensor set does not match the model: {missing[0]!r}", missing[0])

    def param(name):
        return Tensor(arrays[name], requires_grad=True)

    for i, (linear, bn) in enumerate(model.layers):
        linear.weight, linear.bias = param(f"layers.{i}.weight"), param(f"layers.{i}.bias")
        bn.gamma, bn.beta = param(f"layers.{i}.bn.gamma"), param(f"layers.{i}.bn.beta")
        bn.running_mean = arrays[f"layers.{i}.bn.running_mean"].copy()
        bn.running_var = arrays[f"layers.{i}.bn.running_var"].copy()
    for name in ("shared_memory", "task_memory"):
        bank = getattr(model, name)
        if bank is None:
            continue
        bank.keys, bank.values = param(f"{name}.keys"), param(f"{name}.values")
        bank.snapshot_keys = arrays[f"{name}.snapshot_keys"].copy()
        bank.snapshot_values = arrays[f"{name}.snapshot_values"].copy()
        mask = np.asarray(frozen.get(name, []), dtype=bool)
        if mask.shape != (bank.num_slots,):
            raise IntegrityError(f"frozen mask of {name} has {mask.size} entries for {bank.num_slots} slots",
                                 f"{name}.frozen")
        bank.frozen = mask
    model.classifier.weight, model.classifier.bias = param("classifier.weight"), param("classifier.bias")


# -- result files -----------------------------------------------------------


def _fmt(x):
    return "" if x is None or (isinstance(x, float) and np.isnan(x)) else format(float(x), ".9g")


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def write_accuracy_matrix(A, path):
    """One row per training stage: ``after_task,task_1,...,task_T`` (blank = not yet seen)."""
    A = np.atleast_2d(A)
    _write_rows(path, ["after_task"] + [f"task_{i + 1}" for i in range(A.shape[1])],
                [[t + 1] + [_fmt(a) for a in row] for t, row in enumerate(A)])


def read_accuracy_matrix(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[float(v) if v else np.nan for v in r[1:]] for r in rows if r])


LOSS_COLUMNS = ("task", "epoch", "step", "ce", "align", "orth", "total")


def write_losses(trace, path):
    _write_rows(path, LOSS_COLUMNS, [[r["task"], r["epoch"], r["step"]] + [_fmt(r[k]) for k in LOSS_COLUMNS[3:]]
                                     for r in trace])


def write_capacity(rows, path):
    _write_rows(path, ["t", "memory", "slots", "frozen"], rows)


def write_run_json(report, config, path):
    A = report.accuracy
    _write_json(path, {
        "mode": report.mode,
        "seed": report.seed,
        "config_hash": config.hash,
        "stream_signature": report.stream_signature,
        "avg_acc": report.avg_acc,
        "final_accuracies": [float(a) for a in A[-1]],
        "forgetting": [float(f) for f in forgetting(A)],
        "config": config.to_dict(),
    })


def read_run_json(path):
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: {exc.msg}", f"line {exc.lineno}") from None
