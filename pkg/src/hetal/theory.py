"""Computable pieces of the top-q-biased generalization bound.

Rank weights ``gamma_j`` are the probability that the example with the j-th
largest loss is drawn into a uniform size-s minibatch (without replacement)
and is among that minibatch's q largest losses. Exhaustive enumeration is the
reference; the hypergeometric closed form is what large problems use.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import combinations
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.stats import hypergeom

from hetal.errors import DimensionError, InputError
from hetal.nn import Gradients, ModelConfig, ModelState, cross_entropy, forward, loss_and_grads

ENUMERATION_LIMIT = 200_000

Sampler = Callable[[int, np.random.Generator], tuple[np.ndarray, np.ndarray]]


def _check_nsq(n: int, s: int, q: int) -> None:
    if not 1 <= q <= s <= n:
        raise InputError(f"need 1 <= q <= s <= n, got n={n}, s={s}, q={q}")


def gamma_enumerate(n: int, s: int, q: int) -> list[Fraction]:
    """Exact rank weights by walking every size-s minibatch of ranks 1..n."""
    _check_nsq(n, s, q)
    if math.comb(n, s) > ENUMERATION_LIMIT:
        raise InputError(f"C({n},{s}) minibatches is too many to enumerate")
    counts = [0] * n
    total = 0
    for batch in combinations(range(n), s):  # tuples come out sorted: best rank first
        for rank in batch[:q]:
            counts[rank] += 1
        total += 1
    return [Fraction(c, total) for c in counts]


def gamma_closed_form(n: int, s: int, q: int) -> np.ndarray:
    """(s/n) * P(at most q-1 of the other s-1 draws outrank j)."""
    _check_nsq(n, s, q)
    if q == s:
        return np.full(n, s / n)  # also sidesteps the degenerate n=1 hypergeometric
    j = np.arange(1, n + 1)
    return (s / n) * hypergeom.cdf(q - 1, n - 1, j - 1, s - 1)


def gamma_weights(n: int, s: int, q: int) -> np.ndarray:
    _check_nsq(n, s, q)
    if q == s:
        return np.full(n, s / n)
    if math.comb(n, s) <= 5000:
        return np.array([float(g) for g in gamma_enumerate(n, s, q)])
    return gamma_closed_form(n, s, q)


@dataclass(frozen=True)
class TopQSpec:
    n: int
    s: int
    q: int
    gamma: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        _check_nsq(self.n, self.s, self.q)
        object.__setattr__(self, "gamma", gamma_weights(self.n, self.s, self.q))


@dataclass(frozen=True)
class OrderedLossProfile:
    """Losses with their descending order; ties keep original index order."""

    losses: np.ndarray
    order: np.ndarray

    @classmethod
    def of(cls, losses) -> "OrderedLossProfile":
        losses = np.asarray(losses, dtype=float)
        return cls(losses=losses, order=np.argsort(-losses, kind="stable"))

    @property
    def sorted_losses(self) -> np.ndarray:
        return self.losses[self.order]


def _profile(losses, spec: TopQSpec) -> OrderedLossProfile:
    prof = OrderedLossProfile.of(losses)
    if len(prof.losses) != spec.n:
        raise InputError(f"expected {spec.n} losses, got {len(prof.losses)}")
    return prof


def topq_loss(losses, spec: TopQSpec) -> float:
    """(1/q) * sum_j gamma_j * L_(j)."""
    prof = _profile(losses, spec)
    return float(spec.gamma @ prof.sorted_losses) / spec.q


def r_weights(losses, spec: TopQSpec) -> np.ndarray:
    """gamma moved back to original indices: r[order[j]] = gamma_j."""
    prof = _profile(losses, spec)
    r = np.empty(spec.n)
    r[prof.order] = spec.gamma
    return r


def rademacher_bound(B: float, layer_norm_caps: Sequence[float], n: int) -> float:
    """B * (sqrt(2 ln(2) T) + 1) * prod(M_l) / sqrt(n) for a depth-T ReLU net."""
    caps = [float(m) for m in layer_norm_caps]
    if B <= 0 or not caps or any(m <= 0 for m in caps) or n < 1:
        raise InputError("need B > 0, at least one positive layer cap and n >= 1")
    T = len(caps)
    return B * (math.sqrt(2.0 * math.log(2.0) * T) + 1.0) * math.prod(caps) / math.sqrt(n)


@dataclass(frozen=True)
class CorruptionSpec:
    """Per-index corruption: additive feature noise and/or uniform relabeling.

    ``indices`` is the fixed subset the maps act on; everything else passes
    through unchanged. Relabeling draws a fresh uniform label per dataset.
    """

    indices: tuple[int, ...] = ()
    relabel: bool = False
    n_classes: int = 2
    feature_noise: float = 0.0

    @classmethod
    def identity(cls) -> "CorruptionSpec":
        return cls()

    @classmethod
    def uniform_relabel(cls, indices, n_classes: int) -> "CorruptionSpec":
        return cls(indices=tuple(int(i) for i in indices), relabel=True, n_classes=n_classes)

    @property
    def is_identity(self) -> bool:
        return not self.indices or (not self.relabel and self.feature_noise == 0.0)

    def apply(self, x: np.ndarray, y: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        if self.is_identity:
            return x, y
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.max() >= len(x):
            raise InputError("corruption indices exceed the dataset size")
        gx, gy = x.copy(), y.copy()
        if self.feature_noise:
            gx[idx] += rng.normal(0.0, self.feature_noise, size=(len(idx), x.shape[1]))
        if self.relabel:
            gy[idx] = rng.integers(0, self.n_classes, size=len(idx))
        return gx, gy


@dataclass(frozen=True)
class ThetaSpec:
    """The parameter set Theta: bias-free nets with per-layer Frobenius caps.

    With ``fixed`` set, Theta is that single point and no optimisation runs.
    """

    config: ModelConfig
    norm_caps: Optional[tuple[float, ...]] = None
    fixed: Optional[ModelState] = None

    def project(self, state: ModelState) -> ModelState:
        if self.norm_caps is None:
            return state
        weights = []
        for w, cap in zip(state.weights, self.norm_caps):
            norm = np.linalg.norm(w)
            weights.append(w * (cap / norm) if norm > cap else w)
        return ModelState(weights=weights, biases=[np.zeros_like(b) for b in state.biases])


def linear_teacher_sampler(d: int, n_classes: int = 2, seed: int = 0) -> Sampler:
    """Gaussian inputs labeled by a fixed random linear teacher."""
    teacher = np.random.default_rng(seed).normal(size=(d, n_classes))

    def sample(n: int, rng: np.random.Generator):
        x = rng.normal(size=(n, d))
        return x, np.argmax(x @ teacher, axis=1)

    return sample


def q_objective(
    state: ModelState,
    config: ModelConfig,
    x: np.ndarray,
    y: np.ndarray,
    gx: np.ndarray,
    gy: np.ndarray,
    spec: TopQSpec,
) -> float:
    """(1/n) sum_i [ r_i n / q * loss(corrupted_i) - loss(clean_i) ]."""
    corrupted = cross_entropy(forward(state, config, gx).probs, gy)
    clean = cross_entropy(forward(state, config, x).probs, y)
    return topq_loss(corrupted, spec) - float(clean.mean())


def _q_gradient(state, config, x, y, gx, gy, spec) -> tuple[float, Gradients]:
    corrupted = cross_entropy(forward(state, config, gx).probs, gy)
    r = r_weights(corrupted, spec)
    top, g_top = loss_and_grads(state, config, gx, gy, sample_weights=r / spec.q)
    mean, g_mean = loss_and_grads(state, config, x, y)
    grads = Gradients(
        weights=[a - b for a, b in zip(g_top.weights, g_mean.weights)],
        biases=[np.zeros_like(b) for b in g_top.biases],
    )
    return top - mean, grads


def minimize_q_objective(
    theta: ThetaSpec,
    x, y, gx, gy,
    spec: TopQSpec,
    rng: np.random.Generator,
    restarts: int = 5,
    steps: int = 500,
    lr: float = 0.05,
) -> float:
    """Best objective value seen by projected (sub)gradient descent from random starts.

    This only upper-bounds the infimum over Theta.
    """
    config = theta.config
    if theta.fixed is not None:
        return q_objective(theta.fixed, config, x, y, gx, gy, spec)
    best = math.inf
    for _ in range(restarts):
        weights = [rng.normal(0.0, 1.0 / math.sqrt(w_in), size=(w_in, w_out))
                   for w_in, w_out in zip(config.layer_widths[:-1], config.layer_widths[1:])]
        state = theta.project(ModelState(weights=weights, biases=[np.zeros(w) for w in config.layer_widths[1:]]))
        for _ in range(steps):
            value, grads = _q_gradient(state, config, x, y, gx, gy, spec)
            if not math.isfinite(value):
                return math.nan
            best = min(best, value)
            stepped = ModelState(
                weights=[w - lr * g for w, g in zip(state.weights, grads.weights)],
                biases=state.biases,
            )
            state = theta.project(stepped)
        best = min(best, q_objective(state, config, x, y, gx, gy, spec))
    return best


@dataclass
class QEstimate:
    estimate: float
    std_error: float
    values: np.ndarray
    n_diverged: int

    def write_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["trial", "q_value"])
            for i, v in enumerate(self.values):
                writer.writerow([i, repr(float(v))])


def estimate_Q(
    theta: ThetaSpec,
    sampler: Sampler,
    corruption: CorruptionSpec,
    spec: TopQSpec,
    trials: int = 20,
    restarts: int = 5,
    steps: int = 500,
    lr: float = 0.05,
    seed: int = 0,
) -> QEstimate:
    """Monte-Carlo estimate of the top-q-biased factor.

    Each trial draws a clean dataset of size ``spec.n``, corrupts it and
    approximately minimises the objective over Theta. Diverged trials are
    dropped and counted. Because the inner minimum is approximate, the
    estimate is biased upward.
    """
    if trials < 2:
        raise InputError("need at least two trials")
    rng = np.random.default_rng(seed)
    values, diverged = [], 0
    for _ in range(trials):
        x, y = sampler(spec.n, rng)
        gx, gy = corruption.apply(x, y, rng)
        v = minimize_q_objective(theta, x, y, gx, gy, spec, rng, restarts, steps, lr)
        if math.isfinite(v):
            values.append(v)
        else:
            diverged += 1
    vals = np.array(values)
    if len(vals) < 2:
        raise InputError(f"{diverged} of {trials} trials diverged; nothing to average")
    return QEstimate(
        estimate=float(vals.mean()),
        std_error=float(vals.std(ddof=1) / math.sqrt(len(vals))),
        values=vals,
        n_diverged=diverged,
    )


@dataclass
class GapReport:
    expected_loss: float
    topq_train_loss: float
    rademacher_term: float
    confidence_term: float
    q_factor: float
    loss_range: float
    delta: float

    @property
    def bound(self) -> float:
        return self.topq_train_loss + self.rademacher_term + self.confidence_term - self.q_factor

    def terms(self) -> dict[str, float]:
        return {
            "expected_loss (lhs)": self.expected_loss,
            "L_q(train)": self.topq_train_loss,
            "2 * rademacher": self.rademacher_term,
            "confidence": self.confidence_term,
            "Q factor": self.q_factor,
            "bound (rhs)": self.bound,
        }

    def to_table(self) -> str:
        rows = [f"{name:<22}{value:>14.6f}" for name, value in self.terms().items()]
        head = f"{'term':<22}{'value':>14}"
        return "\n".join([head, "-" * len(head), *rows]) + "\n"


def _losses(state, config, x, y, loss: str) -> np.ndarray:
    out = forward(state, config, x)
    if loss == "zero_one":
        return (out.predictions != y).astype(float)
    if loss == "cross_entropy":
        return cross_entropy(out.probs, y)
    raise InputError(f"unknown loss {loss!r}")


def generalization_gap_report(
    state: ModelState,
    config: ModelConfig,
    test: tuple[np.ndarray, np.ndarray],
    corrupted_train: tuple[np.ndarray, np.ndarray],
    spec: TopQSpec,
    q_factor: float,
    delta: float = 0.05,
    loss: str = "cross_entropy",
) -> GapReport:
    """Evaluate every term of the bound for one trained model.

    M is 1 for the 0-1 loss and the observed max-min loss otherwise; the
    Rademacher term uses the model's measured weight norms and the largest
    input norm seen. Nothing is asserted about the inequality itself.
    """
    if not 0.0 < delta <= 1.0:
        raise InputError("delta must lie in (0, 1]")
    x_tr, y_tr = corrupted_train
    x_te, y_te = test
    if len(x_tr) != spec.n:
        raise DimensionError(f"spec is for n={spec.n}, train set has {len(x_tr)} rows")
    train_losses = _losses(state, config, x_tr, y_tr, loss)
    test_losses = _losses(state, config, x_te, y_te, loss)
    if loss == "zero_one":
        m_range = 1.0
    else:
        both = np.concatenate([train_losses, test_losses])
        m_range = float(both.max() - both.min())
    B = float(max(np.linalg.norm(x_tr, axis=1).max(), np.linalg.norm(x_te, axis=1).max()))
    caps = [float(np.linalg.norm(w)) for w in state.weights]
    rad = 2.0 * rademacher_bound(max(B, 1e-300), [max(c, 1e-300) for c in caps], spec.n)
    conf = m_range * (2.0 + spec.s / spec.q) * math.sqrt(math.log(2.0 / delta) / (2.0 * spec.n))
    return GapReport(
        expected_loss=float(test_losses.mean()),
        topq_train_loss=topq_loss(train_losses, spec),
        rademacher_term=rad,
        confidence_term=conf,
        q_factor=q_factor,
        loss_range=m_range,
        delta=delta,
    )
