"""Synthetic pools with feature-identifiable label noise.

A :class:`DataPool` holds features, labels, clean/noisy provenance and the
labeled/unlabeled partition. Acquisition code never sees a pool directly; it
gets a :class:`PoolView`, which has no field for labels of unlabeled rows or
for provenance.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Optional, Union

import numpy as np

from hetal.errors import InputError

IMAGE_SHAPE = (3, 4, 4)  # channels-first, so each channel is a contiguous block


class NoiseKind(str, Enum):
    NONE = "none"
    NOISY_BLANK = "noisy_blank"
    NOISY_DIVERSE = "noisy_diverse"
    NOISY_CLASS = "noisy_class"


@dataclass(frozen=True)
class NoiseSpec:
    kind: NoiseKind
    n_noisy: int = 0
    k_unique: int = 1
    target_class: Optional[int] = None
    choices_per_type: int = 3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", NoiseKind(self.kind))
        if self.kind is NoiseKind.NONE:
            return
        if self.n_noisy < self.k_unique or self.k_unique < 1:
            raise InputError(f"need N >= K >= 1, got N={self.n_noisy}, K={self.k_unique}")
        if self.kind is NoiseKind.NOISY_BLANK and self.k_unique != 1:
            raise InputError("noisy_blank has exactly one unique example (K=1)")
        if self.kind is NoiseKind.NOISY_CLASS and self.target_class is None:
            raise InputError("noisy_class needs a target_class")


@dataclass(frozen=True)
class DataPool:
    features: np.ndarray
    labels: np.ndarray
    is_noisy: np.ndarray
    labeled_idx: np.ndarray
    unlabeled_idx: np.ndarray
    n_classes: int

    def __post_init__(self):
        n = len(self.features)
        if self.features.ndim != 2:
            raise InputError("features must be a 2-D matrix")
        if self.labels.shape != (n,) or self.is_noisy.shape != (n,):
            raise InputError("labels and is_noisy must have one entry per example")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise InputError(f"labels must lie in [0, {self.n_classes})")
        if not np.isfinite(self.features).all():
            raise InputError("features must be finite")
        both = np.concatenate([self.labeled_idx, self.unlabeled_idx])
        if len(both) != n or not np.array_equal(np.sort(both), np.arange(n)):
            raise InputError("labeled and unlabeled indices must partition 0..n-1")

    @classmethod
    def unlabeled(cls, features, labels, is_noisy, n_classes: int) -> "DataPool":
        features = np.asarray(features, dtype=float)
        return cls(
            features=features,
            labels=np.asarray(labels, dtype=np.int64),
            is_noisy=np.asarray(is_noisy, dtype=bool),
            labeled_idx=np.empty(0, dtype=np.int64),
            unlabeled_idx=np.arange(len(features), dtype=np.int64),
            n_classes=n_classes,
        )

    @property
    def n(self) -> int:
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def label(self, idx) -> "DataPool":
        """Move ``idx`` (which must all be unlabeled) into the labeled set."""
        idx = np.asarray(idx, dtype=np.int64)
        if len(np.unique(idx)) != len(idx):
            raise InputError("indices to label must be distinct")
        mask = np.isin(self.unlabeled_idx, idx)
        if mask.sum() != len(idx):
            raise InputError("can only label indices that are currently unlabeled")
        return replace(
            self,
            labeled_idx=np.concatenate([self.labeled_idx, idx]),
            unlabeled_idx=self.unlabeled_idx[~mask],
        )

    def labeled_data(self) -> tuple[np.ndarray, np.ndarray]:
        return self.features[self.labeled_idx], self.labels[self.labeled_idx]

    def view(self) -> "PoolView":
        return PoolView(
            labeled_idx=self.labeled_idx.copy(),
            unlabeled_idx=self.unlabeled_idx.copy(),
            x_labeled=self.features[self.labeled_idx],
            x_unlabeled=self.features[self.unlabeled_idx],
            n_classes=self.n_classes,
        )


@dataclass(frozen=True, slots=True)
class PoolView:
    """What an acquisition strategy may see: features and the partition, nothing else."""

    labeled_idx: np.ndarray
    unlabeled_idx: np.ndarray
    x_labeled: np.ndarray
    x_unlabeled: np.ndarray
    n_classes: int


def _two_moons(n: int, rng: np.random.Generator, flip: bool) -> np.ndarray:
    t = rng.uniform(0.0, np.pi, size=n)
    if flip:
        return np.column_stack([1.0 - np.cos(t), 0.5 - np.sin(t)])
    return np.column_stack([np.cos(t), np.sin(t)])


MOON_OFFSETS = np.array([[0.0, 0.0], [0.0, 0.0], [0.0, 1.5], [0.0, 1.5]])


def make_four_moons(
    n_per_class: int,
    noise_std: float = 0.1,
    noisy_class_id: Optional[int] = 2,
    seed: int = 0,
) -> DataPool:
    """Two interleaved two-moons pairs, the second shifted up; one moon per class.

    Every point of moon ``noisy_class_id`` gets a label drawn uniformly from the
    four classes and is flagged noisy. Pass ``None`` for a fully clean pool.
    """
    if n_per_class < 1:
        raise InputError("n_per_class must be >= 1")
    if noisy_class_id is not None and noisy_class_id not in range(4):
        raise InputError(f"noisy_class_id must be in 0..3, got {noisy_class_id}")
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for c in range(4):
        pts = _two_moons(n_per_class, rng, flip=bool(c % 2)) + MOON_OFFSETS[c]
        xs.append(pts + rng.normal(0.0, noise_std, size=pts.shape))
        ys.append(np.full(n_per_class, c))
    features = np.concatenate(xs)
    labels = np.concatenate(ys)
    is_noisy = np.zeros(len(labels), dtype=bool)
    if noisy_class_id is not None:
        is_noisy = labels == noisy_class_id
        labels = labels.copy()
        labels[is_noisy] = rng.integers(0, 4, size=is_noisy.sum())
    return DataPool.unlabeled(features, labels, is_noisy, n_classes=4)


def _append_noisy(base: DataPool, features: np.ndarray, labels: np.ndarray) -> DataPool:
    n0 = base.n
    return DataPool(
        features=np.concatenate([base.features, features]),
        labels=np.concatenate([base.labels, labels.astype(np.int64)]),
        is_noisy=np.concatenate([base.is_noisy, np.ones(len(labels), dtype=bool)]),
        labeled_idx=base.labeled_idx.copy(),
        unlabeled_idx=np.concatenate([base.unlabeled_idx, np.arange(n0, n0 + len(labels))]),
        n_classes=base.n_classes,
    )


def make_noisy_blank(base: DataPool, n_noisy: int, seed: int = 0, value: Optional[float] = None) -> DataPool:
    """Append ``n_noisy`` copies of one "black" example with uniform random labels.

    Black is the smallest feature value of ``base`` repeated across all
    coordinates, unless ``value`` overrides it.
    """
    if n_noisy < 1:
        raise InputError("n_noisy must be >= 1")
    rng = np.random.default_rng(seed)
    fill = float(base.features.min()) if value is None else float(value)
    features = np.full((n_noisy, base.dim), fill)
    labels = rng.integers(0, base.n_classes, size=n_noisy)
    return _append_noisy(base, features, labels)


def _channel_blocks(dim: int, n_channels: int) -> np.ndarray:
    if dim % n_channels:
        raise InputError(f"dim {dim} is not divisible into {n_channels} channels")
    return np.repeat(np.arange(n_channels), dim // n_channels)


def _near_uniform_types(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % k)


def make_noisy_diverse(
    base: DataPool,
    n_noisy: int,
    k_unique: int = 100,
    choices_per_type: int = 3,
    seed: int = 0,
    n_channels: Optional[int] = None,
) -> DataPool:
    """Append ``n_noisy`` solid-colour examples of ``k_unique`` colours.

    Each colour is a random level per channel block (3 channels when the
    dimension allows, otherwise 1) and owns ``choices_per_type`` distinct
    classes; its copies draw labels uniformly from those.
    """
    if n_noisy < k_unique or k_unique < 1:
        raise InputError(f"need N >= K >= 1, got N={n_noisy}, K={k_unique}")
    if not 1 <= choices_per_type <= base.n_classes:
        raise InputError(f"choices_per_type must lie in 1..{base.n_classes}")
    if n_channels is None:
        n_channels = 3 if base.dim % 3 == 0 else 1
    rng = np.random.default_rng(seed)
    lo, hi = float(base.features.min()), float(base.features.max())
    channel_of = _channel_blocks(base.dim, n_channels)
    colours = rng.uniform(lo, hi, size=(k_unique, n_channels))[:, channel_of]
    choices = np.stack([rng.choice(base.n_classes, choices_per_type, replace=False) for _ in range(k_unique)])
    types = _near_uniform_types(n_noisy, k_unique, rng)
    labels = choices[types, rng.integers(0, choices_per_type, size=n_noisy)]
    return _append_noisy(base, colours[types], labels)


def make_noisy_class(base: DataPool, k_unique: int, n_noisy: int, target_class: int, seed: int = 0) -> DataPool:
    """Copy ``k_unique`` clean examples of ``target_class``, relabel, repeat to ``n_noisy``.

    Each prototype gets one label drawn uniformly over all classes; its
    repetitions carry that label. The originals stay in the pool unchanged.
    """
    if n_noisy < k_unique or k_unique < 1:
        raise InputError(f"need N >= K >= 1, got N={n_noisy}, K={k_unique}")
    if target_class not in range(base.n_classes):
        raise InputError(f"target_class must be in 0..{base.n_classes - 1}")
    candidates = np.flatnonzero((base.labels == target_class) & ~base.is_noisy)
    if len(candidates) < k_unique:
        raise InputError(
            f"only {len(candidates)} clean examples of class {target_class}, need {k_unique}"
        )
    rng = np.random.default_rng(seed)
    protos = rng.choice(candidates, size=k_unique, replace=False)
    proto_labels = rng.integers(0, base.n_classes, size=k_unique)
    types = _near_uniform_types(n_noisy, k_unique, rng)
    return _append_noisy(base, base.features[protos][types], proto_labels[types])


def _class_prototypes(n_classes: int, dim: int, seed: int) -> np.ndarray:
    """Two smooth "image" modes per class, values in [0.2, 0.8]."""
    rng = np.random.default_rng(seed)
    c, h, w = IMAGE_SHAPE if dim == 48 else (1, 1, dim)
    yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    protos = np.empty((n_classes, 2, dim))
    for k in range(n_classes):
        for m in range(2):
            chans = []
            for _ in range(c):
                a, b, phase = rng.uniform(-1.5, 1.5, size=3)
                chans.append(np.sin(a * xx + b * yy + phase * np.pi))
            img = np.stack(chans).reshape(-1)
            protos[k, m] = 0.5 + 0.3 * img
    return protos


def make_mini_images(
    n_per_class: int,
    n_classes: int = 10,
    d: int = 48,
    seed: int = 0,
    noise_std: float = 0.2,
    prototype_seed: int = 0,
) -> DataPool:
    """Class-conditional Gaussian 4x4x3 "images" clipped to [0, 1].

    Each class is a two-mode mixture around smooth prototypes, which keeps
    the classes learnable but not linearly separable. ``prototype_seed``
    fixes the class geometry so separate draws (train/test) share it.
    """
    if n_per_class < 1:
        raise InputError("n_per_class must be >= 1")
    if n_classes < 2:
        raise InputError("need at least two classes")
    protos = _class_prototypes(n_classes, d, prototype_seed)
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    modes = rng.integers(0, 2, size=len(labels))
    features = protos[labels, modes] + rng.normal(0.0, noise_std, size=(len(labels), d))
    features = np.clip(features, 0.0, 1.0)
    return DataPool.unlabeled(features, labels, np.zeros(len(labels), dtype=bool), n_classes)


def class_means(n_classes: int = 10, d: int = 48, prototype_seed: int = 0) -> np.ndarray:
    return _class_prototypes(n_classes, d, prototype_seed).mean(axis=1)


def apply_noise(base: DataPool, spec: NoiseSpec) -> DataPool:
    if spec.kind is NoiseKind.NONE:
        return base
    if spec.kind is NoiseKind.NOISY_BLANK:
        return make_noisy_blank(base, spec.n_noisy, seed=spec.seed)
    if spec.kind is NoiseKind.NOISY_DIVERSE:
        return make_noisy_diverse(base, spec.n_noisy, spec.k_unique, spec.choices_per_type, seed=spec.seed)
    return make_noisy_class(base, spec.k_unique, spec.n_noisy, spec.target_class, seed=spec.seed)


def init_pool(
    pool: DataPool,
    n_initial_labeled: int,
    mix: Optional[float] = None,
    seed: int = 0,
) -> DataPool:
    """Subsample to a noisy fraction of ``mix`` and draw the initial labeled set.

    The subsample keeps as many examples as the available clean/noisy counts
    allow. ``mix=None`` keeps the pool as is. Any existing partition is reset.
    """
    rng = np.random.default_rng(seed)
    keep = np.arange(pool.n)
    if mix is not None:
        if not 0.0 <= mix <= 1.0:
            raise InputError(f"mix must lie in [0, 1], got {mix}")
        noisy = np.flatnonzero(pool.is_noisy)
        clean = np.flatnonzero(~pool.is_noisy)
        caps = []
        if mix > 0:
            caps.append(len(noisy) / mix)
        if mix < 1:
            caps.append(len(clean) / (1.0 - mix))
        total = int(np.floor(min(caps) + 1e-9))
        n_noisy = int(round(mix * total))
        n_clean = total - n_noisy
        if n_noisy > len(noisy) or n_clean > len(clean) or total == 0:
            raise InputError(f"mix {mix} is not achievable from {len(clean)} clean / {len(noisy)} noisy")
        keep = np.sort(np.concatenate([
            rng.choice(noisy, n_noisy, replace=False),
            rng.choice(clean, n_clean, replace=False),
        ]))
    if not 0 <= n_initial_labeled <= len(keep):
        raise InputError(f"cannot label {n_initial_labeled} of {len(keep)} examples")
    labeled = np.sort(rng.choice(len(keep), n_initial_labeled, replace=False)).astype(np.int64)
    unlabeled = np.setdiff1d(np.arange(len(keep)), labeled).astype(np.int64)
    return DataPool(
        features=pool.features[keep],
        labels=pool.labels[keep],
        is_noisy=pool.is_noisy[keep],
        labeled_idx=labeled,
        unlabeled_idx=unlabeled,
        n_classes=pool.n_classes,
    )


# Text format: "n d n_y" header, then one line per example:
#   d floats, label, noisy flag (0/1), partition tag (L/U)
# Floats are written with repr() so a round trip is exact.

def save_pool(pool: DataPool, path: Union[str, Path]) -> None:
    tags = np.full(pool.n, "U")
    tags[pool.labeled_idx] = "L"
    lines = [f"{pool.n} {pool.dim} {pool.n_classes}"]
    for i in range(pool.n):
        feats = " ".join(repr(float(v)) for v in pool.features[i])
        lines.append(f"{feats} {int(pool.labels[i])} {int(pool.is_noisy[i])} {tags[i]}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_pool(path: Union[str, Path]) -> DataPool:
    """Read a pool written by :func:`save_pool`. Labeled order is by row index."""
    text = Path(path).read_text().splitlines()
    try:
        n, d, n_y = (int(v) for v in text[0].split())
    except (IndexError, ValueError) as exc:
        raise InputError(f"{path}: bad header") from exc
    rows = text[1:1 + n]
    if len(rows) != n:
        raise InputError(f"{path}: expected {n} rows, found {len(rows)}")
    features = np.empty((n, d))
    labels = np.empty(n, dtype=np.int64)
    noisy = np.empty(n, dtype=bool)
    tags = []
    for i, row in enumerate(rows):
        parts = row.split()
        if len(parts) != d + 3:
            raise InputError(f"{path}:{i + 2}: expected {d + 3} fields, got {len(parts)}")
        features[i] = [float(v) for v in parts[:d]]
        labels[i] = int(parts[d])
        noisy[i] = parts[d + 1] == "1"
        tags.append(parts[d + 2])
    tags = np.array(tags)
    return DataPool(
        features=features,
        labels=labels,
        is_noisy=noisy,
        labeled_idx=np.flatnonzero(tags == "L").astype(np.int64),
        unlabeled_idx=np.flatnonzero(tags == "U").astype(np.int64),
        n_classes=n_y,
    )
