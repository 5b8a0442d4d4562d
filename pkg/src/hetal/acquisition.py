"""Acquisition strategies and the selection primitives behind them.

Score-based selectors (conf, marg, bald) and the k-center greedy return
positions into the array they were given, in selection order, breaking ties
toward the lower position. :func:`acquire` maps positions back to pool
indices.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np
from scipy.spatial.distance import cdist

from hetal.data import PoolView
from hetal.errors import ConfigurationError, DimensionError, InputError
from hetal.nn import EmaState, ModelConfig, ModelState, cross_entropy, forward


class Strategy(str, Enum):
    RAND = "rand"
    CONF = "conf"
    MARG = "marg"
    BALD = "bald"
    CORESET = "coreset"
    BADGE = "badge"
    LHD = "lhd"


@dataclass(frozen=True)
class AcquisitionRequest:
    strategy: Strategy
    k: int
    seed: int = 0
    bald_passes: int = 10

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if self.k < 1:
            raise InputError("k must be >= 1")


@dataclass
class StateDifference:
    delta_l: np.ndarray  # (n,)
    delta_h: np.ndarray  # (n, d_h)

    @property
    def lh(self) -> np.ndarray:
        return self.delta_l[:, None] * self.delta_h

    def lh_norms(self) -> np.ndarray:
        return np.linalg.norm(self.lh, axis=1)


def _check_k(k: int, n: int) -> None:
    if not 1 <= k <= n:
        raise InputError(f"cannot select k={k} from {n} candidates")


def _lowest_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Positions of the k smallest scores; equal scores go to the lower position."""
    _check_k(k, len(scores))
    return np.argsort(scores, kind="stable")[:k]


def select_random(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    _check_k(k, n)
    return rng.choice(n, size=k, replace=False)


def confidence_scores(probs: np.ndarray) -> np.ndarray:
    return probs.max(axis=1)


def margin_scores(probs: np.ndarray) -> np.ndarray:
    if probs.shape[1] < 2:
        return np.ones(len(probs))
    top2 = -np.partition(-probs, 1, axis=1)[:, :2]
    return top2[:, 0] - top2[:, 1]


def select_conf(probs: np.ndarray, k: int) -> np.ndarray:
    """The k rows whose most likely class has the least probability."""
    return _lowest_k(confidence_scores(probs), k)


def select_margin(probs: np.ndarray, k: int) -> np.ndarray:
    """The k rows with the smallest gap between the two most likely classes."""
    return _lowest_k(margin_scores(probs), k)


def entropy(probs: np.ndarray) -> np.ndarray:
    p = np.clip(probs, 1e-300, 1.0)
    return -(probs * np.log(p)).sum(axis=-1)


def bald_scores_from_passes(pass_probs: np.ndarray) -> np.ndarray:
    """Mutual information from stacked dropout passes of shape (T, n, C)."""
    return entropy(pass_probs.mean(axis=0)) - entropy(pass_probs).mean(axis=0)


def bald_scores(
    state: ModelState, config: ModelConfig, x: np.ndarray, passes: int, rng: np.random.Generator
) -> np.ndarray:
    if config.dropout_rate <= 0.0:
        raise ConfigurationError("BALD needs a model with dropout_rate > 0")
    if passes < 2:
        raise InputError("BALD needs at least two dropout passes")
    stacked = np.stack([forward(state, config, x, dropout_rng=rng).probs for _ in range(passes)])
    return bald_scores_from_passes(stacked)


def select_bald(
    state: ModelState,
    config: ModelConfig,
    x: np.ndarray,
    k: int,
    passes: int,
    rng: np.random.Generator,
) -> np.ndarray:
    scores = bald_scores(state, config, x, passes, rng)
    return _lowest_k(-scores, k)


def _sq_dist_to(points: np.ndarray, center: np.ndarray) -> np.ndarray:
    diff = points - center
    return np.einsum("ij,ij->i", diff, diff)


def kcenter_greedy(unlabeled: np.ndarray, labeled: np.ndarray, k: int, chunk: int = 2048) -> np.ndarray:
    """Greedy farthest-point selection over ``unlabeled`` given already-covered ``labeled``.

    Each step takes the unlabeled point farthest (Euclidean) from its nearest
    labeled-or-selected point. With no labeled points the first pick is
    position 0.
    """
    n = len(unlabeled)
    _check_k(k, n)
    if len(labeled) and labeled.shape[1] != unlabeled.shape[1]:
        raise DimensionError("labeled and unlabeled embeddings differ in dimension")
    min_d2 = np.full(n, np.inf)
    for start in range(0, len(labeled), chunk):
        block = cdist(unlabeled, labeled[start:start + chunk], "sqeuclidean")
        np.minimum(min_d2, block.min(axis=1), out=min_d2)
    chosen = np.empty(k, dtype=np.int64)
    for step in range(k):
        pick = 0 if step == 0 and not len(labeled) else int(np.argmax(min_d2))
        chosen[step] = pick
        np.minimum(min_d2, _sq_dist_to(unlabeled, unlabeled[pick]), out=min_d2)
        min_d2[pick] = -1.0  # never re-pick, even when everything else is at distance 0
    return chosen


def kmeanspp_seed(vectors: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: uniform first pick, then D^2 sampling.

    Points at distance zero from every chosen center are never drawn unless
    all remaining distances are zero, in which case the draw is uniform over
    the points not yet chosen.
    """
    n = len(vectors)
    _check_k(k, n)
    chosen = np.empty(k, dtype=np.int64)
    taken = np.zeros(n, dtype=bool)
    min_d2 = np.full(n, np.inf)
    for step in range(k):
        if step == 0:
            pick = int(rng.integers(n))
        else:
            weights = np.where(taken, 0.0, min_d2)
            total = weights.sum()
            if total > 0.0:
                cum = np.cumsum(weights)
                pick = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
                pick = min(pick, n - 1)
                while weights[pick] == 0.0:  # float edge at the top of the cumsum
                    pick -= 1
            else:
                free = np.flatnonzero(~taken)
                pick = int(free[rng.integers(len(free))])
        chosen[step] = pick
        taken[pick] = True
        np.minimum(min_d2, _sq_dist_to(vectors, vectors[pick]), out=min_d2)
    return chosen


def badge_embeddings(probs: np.ndarray, hidden: np.ndarray) -> np.ndarray:
    """Output-layer cross-entropy gradients at the predicted label.

    Row i is ``outer(p_i - onehot(argmax p_i), h_i)`` flattened class-major,
    i.e. the transpose of the (d_h, C) weight gradient.
    """
    if len(probs) != len(hidden):
        raise DimensionError("probs and hidden have different row counts")
    residual = probs.copy()
    residual[np.arange(len(probs)), probs.argmax(axis=1)] -= 1.0
    return (residual[:, :, None] * hidden[:, None, :]).reshape(len(probs), -1)


def select_badge(probs: np.ndarray, hidden: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    return kmeanspp_seed(badge_embeddings(probs, hidden), k, rng)


def lhd_state_difference(
    main: ModelState, ema: EmaState, config: ModelConfig, x: np.ndarray
) -> StateDifference:
    """Loss and penultimate-feature gaps between the main and EMA models.

    Both losses are taken against the EMA model's predicted label.
    """
    shadow = ema.as_model()
    shadow.check(config)
    out_main = forward(main, config, x)
    out_ema = forward(shadow, config, x)
    pseudo = out_ema.predictions
    l_main = cross_entropy(out_main.probs, pseudo)
    l_ema = cross_entropy(out_ema.probs, pseudo)
    return StateDifference(delta_l=np.abs(l_ema - l_main), delta_h=out_ema.hidden - out_main.hidden)


def select_lhd(
    main: ModelState,
    ema: EmaState,
    config: ModelConfig,
    x: np.ndarray,
    k: int,
    rng: np.random.Generator,
) -> np.ndarray:
    return kmeanspp_seed(lhd_state_difference(main, ema, config, x).lh, k, rng)


def acquire(
    request: AcquisitionRequest,
    view: PoolView,
    state: Optional[ModelState] = None,
    ema: Optional[EmaState] = None,
    config: Optional[ModelConfig] = None,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Run one strategy on a pool view and return the chosen pool indices."""
    if not isinstance(view, PoolView):
        raise TypeError("strategies only accept a PoolView")
    if rng is None:
        rng = np.random.default_rng(request.seed)
    k, x = request.k, view.x_unlabeled
    _check_k(k, len(x))
    strategy = request.strategy
    if strategy is Strategy.RAND:
        pos = select_random(len(x), k, rng)
    else:
        if state is None or config is None:
            raise ConfigurationError(f"{strategy.value} needs a trained model")
        if strategy is Strategy.BALD:
            pos = select_bald(state, config, x, k, request.bald_passes, rng)
        elif strategy is Strategy.LHD:
            if ema is None:
                raise ConfigurationError("lhd needs the EMA model")
            pos = select_lhd(state, ema, config, x, k, rng)
        else:
            out = forward(state, config, x)
            if strategy is Strategy.CONF:
                pos = select_conf(out.probs, k)
            elif strategy is Strategy.MARG:
                pos = select_margin(out.probs, k)
            elif strategy is Strategy.BADGE:
                pos = select_badge(out.probs, out.hidden, k, rng)
            else:
                h_lab = forward(state, config, view.x_labeled).hidden if len(view.x_labeled) else np.empty((0, out.hidden.shape[1]))
                pos = kcenter_greedy(out.hidden, h_lab, k)
    return view.unlabeled_idx[pos]
