"""Class-incremental task streams: synthetic Gaussian clusters and file ingestion."""
from __future__ import annotations

import csv
import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, ParseError


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float32)
        if features.ndim == 1:
            features = features.reshape(len(features), -1)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(features) != len(labels):
            raise ContractViolation(f"{len(features)} feature rows but {len(labels)} labels")
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    @property
    def class_set(self):
        return np.unique(self.labels)

    def __len__(self):
        return len(self.labels)

    def subset(self, mask):
        return Dataset(self.features[mask], self.labels[mask])

    def with_features(self, features):
        return Dataset(features, self.labels)


@dataclass(frozen=True)
class TaskSpec:
    train: Dataset
    test: Dataset
    classes: tuple


@dataclass
class TaskStream:
    tasks: list
    num_classes: int
    signature: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        for task in self.tasks:
            overlap = seen.intersection(task.classes)
            if overlap:
                raise ContractViolation(f"classes {sorted(overlap)} appear in more than one task")
            seen.update(task.classes)

    def __len__(self):
        return len(self.tasks)

    @property
    def input_dim(self):
        return self.tasks[0].train.features.shape[1]

    def joint(self):
        """All tasks merged into one, for the joint-training upper bound."""
        train = Dataset(np.concatenate([t.train.features for t in self.tasks]),
                        np.concatenate([t.train.labels for t in self.tasks]))
        test = Dataset(np.concatenate([t.test.features for t in self.tasks]),
                       np.concatenate([t.test.labels for t in self.tasks]))
        classes = tuple(c for t in self.tasks for c in t.classes)
        return TaskSpec(train, test, classes)


def split_class_incremental(train, test, num_tasks):
    """Partition classes in ascending id order into ``num_tasks`` equal groups."""
    classes = np.union1d(train.class_set, test.class_set)
    if num_tasks < 1 or len(classes) % num_tasks:
        raise ContractViolation(f"{len(classes)} classes cannot be split into {num_tasks} equal tasks")
    per_task = len(classes) // num_tasks
    tasks = []
    for i in range(num_tasks):
        group = classes[i * per_task:(i + 1) * per_task]
        tasks.append(TaskSpec(train.subset(np.isin(train.labels, group)),
                              test.subset(np.isin(test.labels, group)),
                              tuple(int(c) for c in group)))
    return TaskStream(tasks, int(classes.max()) + 1 if len(classes) else 0)


def standardize_stream(stream):
    """Zero-mean/unit-variance scaling fitted on the first task's training data only."""
    ref = stream.tasks[0].train.features.astype(np.float64)
    mu = ref.mean(axis=0)
    sd = ref.std(axis=0)
    sd[sd == 0] = 1.0

    def scale(ds):
        return ds.with_features(((ds.features - mu) / sd).astype(np.float32))

    tasks = [TaskSpec(scale(t.train), scale(t.test), t.classes) for t in stream.tasks]
    return TaskStream(tasks, stream.num_classes, stream.signature, dict(stream.metadata))


def _cluster_means(num_classes, dim, separation, rng, max_tries=2000):
    # N(0, s^2 I) draws sit about s * sqrt(2 * dim) apart; aim for ~1.4x separation
    spread = separation / np.sqrt(dim)
    means = []
    for _ in range(num_classes):
        for _ in range(max_tries):
            m = rng.normal(0.0, spread, dim)
            if all(np.linalg.norm(m - other) >= separation for other in means):
                means.append(m)
                break
        else:
            raise ContractViolation(
                f"could not place {num_classes} means {separation} apart in {dim} dimensions")
    return np.array(means)


def make_synthetic_stream(num_classes=10, num_tasks=5, dim=16, samples_per_class=250, separation=6.0, seed=0,
                          standardize=True):
    """Unit-covariance Gaussian clusters split 80/20 per class into train/test."""
    if separation <= 0:
        raise ContractViolation("separation must be positive")
    if num_tasks < 1 or num_classes % num_tasks:
        raise ContractViolation(f"{num_classes} classes cannot be split into {num_tasks} equal tasks")
    if samples_per_class < 2:
        raise ContractViolation("samples_per_class must be at least 2")
    rng = np.random.default_rng(seed)
    means = _cluster_means(num_classes, dim, separation, rng)
    n_train = int(round(0.8 * samples_per_class))
    xs_tr, ys_tr, xs_te, ys_te = [], [], [], []
    for c, mu in enumerate(means):
        x = rng.normal(0.0, 1.0, (samples_per_class, dim)) + mu
        xs_tr.append(x[:n_train])
        xs_te.append(x[n_train:])
        ys_tr.append(np.full(n_train, c))
        ys_te.append(np.full(samples_per_class - n_train, c))
    train = Dataset(np.concatenate(xs_tr), np.concatenate(ys_tr))
    test = Dataset(np.concatenate(xs_te), np.concatenate(ys_te))
    stream = split_class_incremental(train, test, num_tasks)
    params = dict(kind="synthetic", num_classes=num_classes, num_tasks=num_tasks, dim=dim,
                  samples_per_class=samples_per_class, separation=separation, seed=seed, standardize=standardize)
    stream.metadata = params
    stream.signature = stream_signature(params)
    return standardize_stream(stream) if standardize else stream


def stream_signature(params):
    text = ",".join(f"{k}={params[k]!r}" for k in sorted(params))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# -- file ingestion ---------------------------------------------------------


def _finish(features, labels, integer_typed):
    features = np.asarray(features, dtype=np.float64)
    if integer_typed and features.size:
        top = features.max()
        features = features / (255.0 if top <= 255 else top)
    labels = np.asarray(labels, dtype=np.int64)
    present = np.unique(labels)
    if len(present) and not np.array_equal(present, np.arange(len(present))):
        raise ContractViolation(f"labels must be contiguous from 0, found {present.tolist()}")
    return Dataset(features.astype(np.float32), labels)


def _load_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file", "line 1") from None
        if not header or header[0].strip() != "label":
            raise ParseError(f"{path}: header must start with 'label'", "line 1")
        width = len(header) - 1
        labels, rows = [], []
        integer_typed = True
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width + 1:
                raise ParseError(f"{path}: expected {width + 1} fields, got {len(row)}", f"line {lineno}")
            try:
                label = int(row[0])
                values = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise ParseError(f"{path}: {exc}", f"line {lineno}") from None
            integer_typed = integer_typed and all(v.strip().lstrip("-").isdigit() for v in row[1:])
            labels.append(label)
            rows.append(values)
    return _finish(np.array(rows, dtype=np.float64).reshape(len(rows), width), labels, integer_typed and bool(rows))


_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path):
    """Read an IDX file (big-endian magic, dimension sizes, then data)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise ParseError(f"{path}: truncated header", f"byte {len(raw)}")
    zero, code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or code not in _IDX_TYPES:
        raise ParseError(f"{path}: bad IDX magic 0x{raw[:4].hex()}", "byte 0")
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise ParseError(f"{path}: truncated dimension header", f"byte {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    dtype = np.dtype(_IDX_TYPES[code])
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(raw) - header_end != expected:
        raise ParseError(f"{path}: expected {expected} data bytes, found {len(raw) - header_end}",
                         f"byte {len(raw)}")
    return np.frombuffer(raw, dtype=dtype, offset=header_end).reshape(dims), code


def _load_idx(path, labels_path):
    if labels_path is None:
        raise ContractViolation("IDX images need a companion labels file")
    images, code = read_idx(path)
    labels, _ = read_idx(labels_path)
    if labels.ndim != 1 or len(labels) != len(images):
        raise ParseError(f"{labels_path}: {labels.shape} labels for {len(images)} images", "byte 4")
    features = images.reshape(len(images), -1)
    return _finish(features, labels, code in (0x08, 0x09, 0x0B, 0x0C))


def load_dataset(path, format="csv", labels_path=None):
    """Load a labelled dataset.

    ``csv``: header ``label,f0,...``; one sample per row, label first.
    ``idx``: an IDX image/feature file plus an IDX label file.
    Integer-typed features are scaled into [0, 1].
    """
    if format == "csv":
        return _load_csv(path)
    if format == "idx":
        return _load_idx(path, labels_path)
    raise ContractViolation(f"unknown dataset format {format!r}")
