"""Pseudo-label fine-tuning on confident, augmented unlabeled examples."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from hetal.data import PoolView
from hetal.errors import ConfigurationError, InputError
from hetal.nn import EmaState, ModelConfig, ModelState, forward, train

AUGMENT_FAMILIES = ("tabular", "image")


@dataclass(frozen=True)
class AugmentSpec:
    """Random perturbations applied per example.

    ``tabular`` enables Gaussian jitter and feature dropout; ``image`` adds
    per-channel intensity scaling and a cutout block on top of jitter. When
    ``ops_per_example`` is set, each example gets that many of the enabled
    ops, drawn at random; otherwise every enabled op is applied.
    """

    family: str = "tabular"
    jitter_std: float = 0.0
    feature_dropout: float = 0.0
    channel_scale: float = 0.0
    cutout_frac: float = 0.0
    n_channels: int = 3
    ops_per_example: Optional[int] = None

    def __post_init__(self):
        if self.family not in AUGMENT_FAMILIES:
            raise ConfigurationError(f"unknown augmentation family {self.family!r}")
        if self.jitter_std < 0 or self.channel_scale < 0:
            raise InputError("jitter_std and channel_scale must be >= 0")
        for name in ("feature_dropout", "cutout_frac"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise InputError(f"{name} must lie in [0, 1)")
        if self.family == "tabular" and (self.channel_scale or self.cutout_frac):
            raise ConfigurationError("channel_scale and cutout are image-only augmentations")

    def enabled_ops(self) -> list[str]:
        ops = []
        if self.jitter_std > 0:
            ops.append("jitter")
        if self.feature_dropout > 0:
            ops.append("dropout")
        if self.channel_scale > 0:
            ops.append("channel_scale")
        if self.cutout_frac > 0:
            ops.append("cutout")
        return ops


@dataclass(frozen=True)
class FinetuneConfig:
    confidence_threshold: float = 0.8
    ft_epochs: int = 100
    ft_lr: float = 1e-3
    batch_size: int = 64
    augmentation: AugmentSpec = field(default_factory=AugmentSpec)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.confidence_threshold < 1.0:
            raise InputError("confidence_threshold must lie in (0, 1)")
        if self.ft_lr <= 0:
            raise InputError("ft_lr must be positive")
        if self.ft_epochs < 0:
            raise InputError("ft_epochs must be >= 0")


def select_confident(probs: np.ndarray, threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Rows whose top probability reaches ``threshold``, with their argmax labels."""
    idx = np.flatnonzero(probs.max(axis=1) >= threshold)
    return idx, probs[idx].argmax(axis=1)


def augment(x: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    n, d = x.shape
    ops = spec.enabled_ops()
    if not ops or n == 0:
        return x.copy()
    if spec.ops_per_example is None or spec.ops_per_example >= len(ops):
        use = np.ones((n, len(ops)), dtype=bool)
    else:
        keys = rng.random((n, len(ops)))
        use = keys < np.sort(keys, axis=1)[:, [spec.ops_per_example]]

    out = x.copy()
    for j, op in enumerate(ops):
        rows = use[:, j]
        m = int(rows.sum())
        if not m:
            continue
        if op == "jitter":
            out[rows] += rng.normal(0.0, spec.jitter_std, size=(m, d))
        elif op == "dropout":
            out[rows] *= rng.random((m, d)) >= spec.feature_dropout
        elif op == "channel_scale":
            if d % spec.n_channels:
                raise ConfigurationError(f"dim {d} does not split into {spec.n_channels} channels")
            scale = 1.0 + rng.uniform(-spec.channel_scale, spec.channel_scale, size=(m, spec.n_channels))
            out[rows] *= np.repeat(scale, d // spec.n_channels, axis=1)
        else:
            width = int(np.floor(spec.cutout_frac * d))
            if width:
                starts = rng.integers(0, d - width + 1, size=m)
                cols = starts[:, None] + np.arange(width)
                block = out[rows]
                block[np.arange(m)[:, None], cols] = 0.0
                out[rows] = block
    return out


def finetune(
    state: ModelState,
    ema: Optional[EmaState],
    config: ModelConfig,
    view: PoolView,
    ft_config: FinetuneConfig,
    rng: Optional[np.random.Generator] = None,
) -> tuple[ModelState, Optional[EmaState], int]:
    """Fine-tune on confident unlabeled examples under their predicted labels.

    The confident set is chosen once, up front. Training uses a fresh Adam
    state, re-augments every epoch and keeps updating the EMA. Returns the
    new state, the new EMA and the size of the confident set; an empty set
    or ``ft_epochs == 0`` returns the inputs untouched.
    """
    if rng is None:
        rng = np.random.default_rng(ft_config.seed)
    if ft_config.ft_epochs == 0 or len(view.x_unlabeled) == 0:
        return state, ema, 0
    probs = forward(state, config, view.x_unlabeled).probs
    idx, pseudo = select_confident(probs, ft_config.confidence_threshold)
    if len(idx) == 0:
        return state, ema, 0
    spec = ft_config.augmentation
    tuned, ema, _ = train(
        state.fresh_optimizer(),
        ema,
        config,
        view.x_unlabeled[idx],
        pseudo,
        epochs=ft_config.ft_epochs,
        batch_size=ft_config.batch_size,
        lr=ft_config.ft_lr,
        rng=rng,
        augment=lambda xb, r: augment(xb, spec, r),
    )
    return tuned, ema, len(idx)
