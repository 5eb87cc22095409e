"""Synthetic class-incremental task generation and the binary dataset file.

Reproducibility: every random draw in the package comes from a numpy
Generator over the Philox4x32-10 counter-based bit generator, keyed as

    key = (seed << 64) | (purpose << 32) | index

with the purpose codes below. Draw order within a stream is documented at
each site, so fixtures are reproducible bit-exactly from (seed, spec).

Synthetic data: each class has a center drawn uniformly on the sphere of
radius ``separation`` in pixel space (one standard-normal vector,
normalized, scaled); samples are center + noise * standard normal. Class
draw order per class stream: center vector, then the train block, then the
test block. The separation/noise ratio is the separability knob.

Dataset file (optional real data), little-endian throughout:

    bytes 0-3   magic b"DLDS"
    u32         version (1)
    u64         count
    u32         side
    u32         channels
    float32     count * side * side * channels image values
    uint16      count labels
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

__all__ = [
    "PURPOSE_CLASS",
    "PURPOSE_MODEL_INIT",
    "PURPOSE_ADAPTER_INIT",
    "PURPOSE_COLLECT",
    "PURPOSE_SHUFFLE",
    "PURPOSE_SPLIT",
    "stream_rng",
    "SyntheticTaskSpec",
    "TaskData",
    "GeneratedTasks",
    "generate_tasks",
    "DataFormatError",
    "write_dataset",
    "read_dataset",
    "load_file_tasks",
]

PURPOSE_CLASS = 1
PURPOSE_MODEL_INIT = 2
PURPOSE_ADAPTER_INIT = 3
PURPOSE_COLLECT = 4
PURPOSE_SHUFFLE = 5
PURPOSE_SPLIT = 6


def stream_rng(seed: int, purpose: int, index: int = 0) -> np.random.Generator:
    """Philox generator for an independent, documented stream."""
    if not (0 <= seed < 2**64):
        raise ValueError("seed must fit in 64 bits")
    key = (int(seed) << 64) | (int(purpose) << 32) | int(index)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass
class SyntheticTaskSpec:
    tasks: int
    classes_per_task: int
    samples_per_class: int
    test_per_class: int
    image_side: int
    patch_side: int
    separation: float = 5.0
    noise: float = 0.5
    channels: int = 1
    pretext_classes: int = 4
    pretext_samples_per_class: int = 32

    def __post_init__(self):
        if self.tasks < 1 or self.classes_per_task < 1:
            raise ValueError("tasks and classes_per_task must be positive")
        if self.image_side % self.patch_side != 0:
            raise ValueError("patch_side must divide image_side")
        if self.noise < 0 or self.separation <= 0:
            raise ValueError("separation must be positive, noise non-negative")

    @property
    def pixel_dim(self) -> int:
        return self.image_side * self.image_side * self.channels


@dataclass
class TaskData:
    train_x: np.ndarray
    train_y: np.ndarray       # global labels
    test_x: np.ndarray
    test_y: np.ndarray
    label_base: int
    classes: int


@dataclass
class GeneratedTasks:
    pretext: TaskData
    tasks: list


def _class_samples(seed: int, class_uid: int, dim: int, separation: float,
                   noise: float, n_train: int, n_test: int):
    rng = stream_rng(seed, PURPOSE_CLASS, class_uid)
    g = rng.standard_normal(dim)
    center = separation * g / np.linalg.norm(g)
    train = center + noise * rng.standard_normal((n_train, dim))
    test = center + noise * rng.standard_normal((n_test, dim))
    return train, test


def generate_tasks(spec: SyntheticTaskSpec, seed: int) -> GeneratedTasks:
    """Pretext set plus T task datasets with globally disjoint labels.

    Task classes take labels 0 .. T*classes_per_task-1 in task order;
    pretext classes use the class-uid range after them (their labels are
    local to the pretext head and never enter the classifier bank).
    """
    dim = spec.pixel_dim
    tasks = []
    for t in range(spec.tasks):
        xs_train, ys_train, xs_test, ys_test = [], [], [], []
        base = t * spec.classes_per_task
        for c in range(spec.classes_per_task):
            label = base + c
            tr, te = _class_samples(seed, label, dim, spec.separation,
                                    spec.noise, spec.samples_per_class,
                                    spec.test_per_class)
            xs_train.append(tr)
            ys_train.append(np.full(len(tr), label))
            xs_test.append(te)
            ys_test.append(np.full(len(te), label))
        tasks.append(TaskData(
            train_x=np.concatenate(xs_train), train_y=np.concatenate(ys_train),
            test_x=np.concatenate(xs_test), test_y=np.concatenate(ys_test),
            label_base=base, classes=spec.classes_per_task))

    first_pretext_uid = spec.tasks * spec.classes_per_task
    xs, ys = [], []
    for c in range(spec.pretext_classes):
        tr, _ = _class_samples(seed, first_pretext_uid + c, dim,
                               spec.separation, spec.noise,
                               spec.pretext_samples_per_class, 0)
        xs.append(tr)
        ys.append(np.full(len(tr), c))
    pretext = TaskData(train_x=np.concatenate(xs), train_y=np.concatenate(ys),
                       test_x=np.zeros((0, dim)), test_y=np.zeros(0, dtype=int),
                       label_base=0, classes=spec.pretext_classes)
    return GeneratedTasks(pretext=pretext, tasks=tasks)


# ---------------------------------------------------------------------------
# Binary dataset container
# ---------------------------------------------------------------------------

_MAGIC = b"DLDS"
_HEADER = struct.Struct("<4sIQII")


class DataFormatError(ValueError):
    """Malformed dataset container."""


def write_dataset(path, images: np.ndarray, labels: np.ndarray, side: int,
                  channels: int = 1) -> None:
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels)
    if images.ndim != 2 or images.shape[1] != side * side * channels:
        raise DataFormatError("images must be (count, side*side*channels)")
    if labels.shape != (images.shape[0],):
        raise DataFormatError("labels must be one per image")
    if labels.min(initial=0) < 0 or labels.max(initial=0) > np.iinfo(np.uint16).max:
        raise DataFormatError("labels must fit in uint16")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_MAGIC, 1, images.shape[0], side, channels))
        f.write(images.astype("<f4").tobytes())
        f.write(labels.astype("<u2").tobytes())


def read_dataset(path):
    """Returns (images float64 (count, side*side*channels), labels, side, channels)."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise DataFormatError("file too short for header")
    magic, version, count, side, channels = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise DataFormatError(f"bad magic {magic!r}")
    if version != 1:
        raise DataFormatError(f"unsupported version {version}")
    pix = side * side * channels
    need = _HEADER.size + count * pix * 4 + count * 2
    if len(raw) != need:
        raise DataFormatError(f"expected {need} bytes, found {len(raw)}")
    off = _HEADER.size
    images = np.frombuffer(raw, dtype="<f4", count=count * pix, offset=off)
    images = images.reshape(count, pix).astype(np.float64)
    off += count * pix * 4
    labels = np.frombuffer(raw, dtype="<u2", count=count, offset=off).astype(np.int64)
    return images, labels, side, channels


def load_file_tasks(path, tasks: int, classes_per_task: int,
                    pretext_classes: int, test_fraction: float,
                    seed: int) -> GeneratedTasks:
    """Split a dataset file into pretext + T class-incremental tasks.

    Class ids are shuffled with the PURPOSE_SPLIT stream; the first
    ``pretext_classes`` become the pretext set and the rest fill tasks in
    order. Labels are remapped to 0 .. T*classes_per_task-1. Within each
    class the sample order is shuffled on the same stream and the first
    ``test_fraction`` share becomes the test split.
    """
    images, labels, side, channels = read_dataset(path)
    classes = np.unique(labels)
    needed = pretext_classes + tasks * classes_per_task
    if len(classes) < needed:
        raise DataFormatError(f"need {needed} classes, file has {len(classes)}")
    rng = stream_rng(seed, PURPOSE_SPLIT)
    order = rng.permutation(classes)
    pre_ids = order[:pretext_classes]
    task_ids = order[pretext_classes:needed]

    def split_class(cid):
        idx = np.flatnonzero(labels == cid)
        idx = idx[rng.permutation(len(idx))]
        n_test = max(1, int(round(test_fraction * len(idx))))
        return images[idx[n_test:]], images[idx[:n_test]]

    task_list = []
    for t in range(tasks):
        xs_train, ys_train, xs_test, ys_test = [], [], [], []
        base = t * classes_per_task
        for c in range(classes_per_task):
            new_label = base + c
            tr, te = split_class(task_ids[base + c])
            xs_train.append(tr)
            ys_train.append(np.full(len(tr), new_label))
            xs_test.append(te)
            ys_test.append(np.full(len(te), new_label))
        task_list.append(TaskData(
            train_x=np.concatenate(xs_train), train_y=np.concatenate(ys_train),
            test_x=np.concatenate(xs_test), test_y=np.concatenate(ys_test),
            label_base=base, classes=classes_per_task))

    xs, ys = [], []
    for local, cid in enumerate(pre_ids):
        tr, _te = split_class(cid)
        xs.append(tr)
        ys.append(np.full(len(tr), local))
    dim = side * side * channels
    if xs:
        pre_x, pre_y = np.concatenate(xs), np.concatenate(ys)
    else:
        pre_x, pre_y = np.zeros((0, dim)), np.zeros(0, dtype=int)
    pretext = TaskData(train_x=pre_x, train_y=pre_y,
                       test_x=np.zeros((0, dim)), test_y=np.zeros(0, dtype=int),
                       label_base=0, classes=pretext_classes)
    return GeneratedTasks(pretext=pretext, tasks=task_list)
