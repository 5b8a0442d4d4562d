"""Dense ReLU classifier with hand-written backprop, Adam and an EMA shadow model.

Everything here is functional: operations take a state and return a new one,
so the same inputs and seed always give bitwise-identical results.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from hetal.errors import DimensionError, InputError, NumericError, PreconditionError

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of a feedforward classifier.

    ``layer_widths`` runs from the input dimension through the hidden widths to
    the number of classes, so ``[2, 64, 4]`` is a one-hidden-layer net for 2-D
    inputs and four classes.
    """

    layer_widths: tuple[int, ...]
    activation: str = "relu"
    dropout_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise InputError("layer_widths needs at least an input and an output width")
        if any(w < 1 for w in widths):
            raise InputError(f"layer widths must be positive, got {widths}")
        if self.activation != "relu":
            raise InputError(f"unsupported activation {self.activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InputError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.seed < 0:
            raise InputError("seed must be non-negative")

    @property
    def n_inputs(self) -> int:
        return self.layer_widths[0]

    @property
    def n_classes(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def hidden_dim(self) -> int:
        # a net without hidden layers exposes its input as the "hidden" features
        return self.layer_widths[-2]


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])


@dataclass
class ModelState:
    """Parameters plus Adam moments. ``weights[l]`` has shape (fan_in, fan_out)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    adam_m: list[np.ndarray] = field(default_factory=list)
    adam_v: list[np.ndarray] = field(default_factory=list)
    step_count: int = 0

    def __post_init__(self):
        if not self.adam_m:
            self.adam_m = [np.zeros_like(p) for p in self.params]
        if not self.adam_v:
            self.adam_v = [np.zeros_like(p) for p in self.params]

    @property
    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    @classmethod
    def from_params(cls, params: Sequence[np.ndarray], **kwargs) -> "ModelState":
        return cls(weights=list(params[0::2]), biases=list(params[1::2]), **kwargs)

    def copy(self) -> "ModelState":
        return ModelState(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            adam_m=[m.copy() for m in self.adam_m],
            adam_v=[v.copy() for v in self.adam_v],
            step_count=self.step_count,
        )

    def fresh_optimizer(self) -> "ModelState":
        """Same parameters, zeroed Adam moments and step counter."""
        return ModelState(weights=[w.copy() for w in self.weights], biases=[b.copy() for b in self.biases])

    def check(self, config: ModelConfig) -> None:
        widths = config.layer_widths
        if len(self.weights) != config.n_layers or len(self.biases) != config.n_layers:
            raise DimensionError(
                f"state has {len(self.weights)} layers, config expects {config.n_layers}"
            )
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (widths[l], widths[l + 1]) or b.shape != (widths[l + 1],):
                raise DimensionError(
                    f"layer {l}: weight {w.shape} / bias {b.shape} do not match "
                    f"widths {widths[l]}->{widths[l + 1]}"
                )


@dataclass
class EmaState:
    shadow_weights: list[np.ndarray]
    shadow_biases: list[np.ndarray]
    alpha: float

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise InputError(f"EMA decay must lie in [0, 1], got {self.alpha}")

    @classmethod
    def track(cls, state: ModelState, alpha: float) -> "EmaState":
        """Start a shadow copy at the current parameters (beta_0 = theta_0)."""
        return cls(
            shadow_weights=[w.copy() for w in state.weights],
            shadow_biases=[b.copy() for b in state.biases],
            alpha=alpha,
        )

    def as_model(self) -> ModelState:
        """The shadow parameters wrapped as a ModelState so ``forward`` accepts them."""
        return ModelState(weights=list(self.shadow_weights), biases=list(self.shadow_biases))


@dataclass
class PredictionBatch:
    probs: np.ndarray
    hidden: np.ndarray
    logits: np.ndarray
    losses: Optional[np.ndarray] = None

    @property
    def predictions(self) -> np.ndarray:
        return np.argmax(self.probs, axis=1)


def init_state(config: ModelConfig, rng: Optional[np.random.Generator] = None) -> ModelState:
    """He-normal weights, zero biases. Uses ``config.seed`` unless ``rng`` is given."""
    if rng is None:
        rng = np.random.default_rng(config.seed)
    widths = config.layer_widths
    weights = [
        rng.normal(0.0, np.sqrt(2.0 / widths[l]), size=(widths[l], widths[l + 1]))
        for l in range(config.n_layers)
    ]
    biases = [np.zeros(widths[l + 1]) for l in range(config.n_layers)]
    return ModelState(weights=weights, biases=biases)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-example cross-entropy from probabilities, floored at 1e-12 before the log."""
    p = probs[np.arange(len(labels)), labels]
    return -np.log(np.maximum(p, PROB_FLOOR))


def _check_inputs(state: ModelState, config: ModelConfig, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != config.n_inputs:
        raise DimensionError(f"expected inputs of shape (n, {config.n_inputs}), got {x.shape}")
    if not np.isfinite(x).all():
        raise InputError("inputs contain non-finite values")
    state.check(config)
    return x


def _check_labels(labels, n: int, n_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise InputError("labels must be integers")
    if n and (y.min() < 0 or y.max() >= n_classes):
        raise InputError(f"labels must lie in [0, {n_classes})")
    return y


def _forward_cached(state: ModelState, config: ModelConfig, x: np.ndarray, dropout_rng):
    """Forward pass keeping what backprop needs: layer inputs, pre-activations, masks."""
    rate = config.dropout_rate
    use_dropout = dropout_rng is not None and rate > 0.0
    inputs, pre, masks = [], [], []
    a = x
    for l in range(config.n_layers - 1):
        inputs.append(a)
        z = a @ state.weights[l] + state.biases[l]
        pre.append(z)
        a = np.maximum(z, 0.0)
        if use_dropout:
            mask = (dropout_rng.random(a.shape) >= rate) / (1.0 - rate)
            a = a * mask
            masks.append(mask)
        else:
            masks.append(None)
    inputs.append(a)
    logits = a @ state.weights[-1] + state.biases[-1]
    return logits, inputs, pre, masks


def forward(
    state: ModelState,
    config: ModelConfig,
    x: np.ndarray,
    *,
    dropout_rng: Optional[np.random.Generator] = None,
    labels: Optional[np.ndarray] = None,
) -> PredictionBatch:
    """Run the network on ``x``.

    Dropout is off unless ``dropout_rng`` is given (and the config rate is
    positive). When ``labels`` are supplied the batch also carries per-example
    cross-entropy losses.
    """
    x = _check_inputs(state, config, x)
    logits, inputs, _, _ = _forward_cached(state, config, x, dropout_rng)
    probs = softmax(logits)
    losses = None
    if labels is not None:
        y = _check_labels(labels, len(x), config.n_classes)
        losses = cross_entropy(probs, y)
    return PredictionBatch(probs=probs, hidden=inputs[-1], logits=logits, losses=losses)


def _backward(state, config, logits, inputs, pre, masks, y, sample_weights=None) -> tuple[float, Gradients]:
    n = len(y)
    logp = log_softmax(logits)
    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    if sample_weights is None:
        loss = float(-logp[np.arange(n), y].mean())
        delta /= n
    else:
        loss = float(-(sample_weights * logp[np.arange(n), y]).sum())
        delta *= sample_weights[:, None]

    gw = [None] * config.n_layers
    gb = [None] * config.n_layers
    for l in range(config.n_layers - 1, -1, -1):
        gw[l] = inputs[l].T @ delta
        gb[l] = delta.sum(axis=0)
        if l == 0:
            break
        delta = delta @ state.weights[l].T
        if masks[l - 1] is not None:
            delta = delta * masks[l - 1]
        delta = delta * (pre[l - 1] > 0.0)
    return loss, Gradients(weights=gw, biases=gb)


def loss_and_grads(
    state: ModelState,
    config: ModelConfig,
    x: np.ndarray,
    labels: np.ndarray,
    *,
    dropout_rng: Optional[np.random.Generator] = None,
    sample_weights: Optional[np.ndarray] = None,
) -> tuple[float, Gradients]:
    """Mean cross-entropy over the batch and its gradient for every parameter.

    With ``sample_weights`` the loss is the weighted sum ``sum_i w_i * loss_i``
    instead of the mean.
    """
    x = _check_inputs(state, config, x)
    y = _check_labels(labels, len(x), config.n_classes)
    if len(y) == 0:
        raise InputError("empty batch")
    if sample_weights is not None:
        sample_weights = np.asarray(sample_weights, dtype=float)
        if sample_weights.shape != (len(y),):
            raise DimensionError("need one sample weight per example")
    logits, inputs, pre, masks = _forward_cached(state, config, x, dropout_rng)
    return _backward(state, config, logits, inputs, pre, masks, y, sample_weights)


def adam_step(
    state: ModelState,
    grads: Gradients,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ModelState:
    """One bias-corrected Adam update; returns a new state."""
    flat_grads = [g for pair in zip(grads.weights, grads.biases) for g in pair]
    if not all(np.isfinite(g).all() for g in flat_grads):
        raise NumericError("non-finite gradient")
    t = state.step_count + 1
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    params, ms, vs = [], [], []
    for p, m, v, g in zip(state.params, state.adam_m, state.adam_v, flat_grads):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        params.append(p - lr * (m / c1) / (np.sqrt(v / c2) + eps))
        ms.append(m)
        vs.append(v)
    return ModelState.from_params(params, adam_m=ms, adam_v=vs, step_count=t)


def ema_update(ema: EmaState, state: ModelState) -> EmaState:
    """beta <- alpha * beta + (1 - alpha) * theta, tensor by tensor."""
    if len(ema.shadow_weights) != len(state.weights) or any(
        s.shape != w.shape for s, w in zip(ema.shadow_weights + ema.shadow_biases, state.weights + state.biases)
    ):
        raise DimensionError("EMA shadow shapes do not match the tracked model")
    a = ema.alpha
    return EmaState(
        shadow_weights=[a * s + (1.0 - a) * w for s, w in zip(ema.shadow_weights, state.weights)],
        shadow_biases=[a * s + (1.0 - a) * b for s, b in zip(ema.shadow_biases, state.biases)],
        alpha=a,
    )


def train(
    state: ModelState,
    ema: Optional[EmaState],
    config: ModelConfig,
    x: np.ndarray,
    y: np.ndarray,
    *,
    epochs: int,
    batch_size: int = 64,
    lr: float = 1e-3,
    rng: np.random.Generator,
    augment: Optional[Callable[[np.ndarray, np.random.Generator], np.ndarray]] = None,
) -> tuple[ModelState, Optional[EmaState], np.ndarray]:
    """Shuffled minibatch Adam for ``epochs`` passes over (x, y).

    The EMA (if any) is updated once at the end of every epoch. ``augment``,
    when given, is applied to the whole training matrix at the start of each
    epoch. Returns the final state, the final EMA and the per-epoch mean loss.
    """
    x = _check_inputs(state, config, x)
    y = _check_labels(y, len(x), config.n_classes)
    if len(x) == 0:
        raise PreconditionError("cannot train on an empty labeled set")
    if epochs < 0 or batch_size < 1:
        raise InputError("epochs must be >= 0 and batch_size >= 1")
    dropout_rng = rng if config.dropout_rate > 0.0 else None
    n = len(x)
    trace = np.empty(epochs)
    for epoch in range(epochs):
        xe = augment(x, rng) if augment is not None else x
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            logits, inputs, pre, masks = _forward_cached(state, config, xe[idx], dropout_rng)
            loss, grads = _backward(state, config, logits, inputs, pre, masks, y[idx])
            state = adam_step(state, grads, lr)
            total += loss * len(idx)
        trace[epoch] = total / n
        if ema is not None:
            ema = ema_update(ema, state)
    return state, ema, trace


def accuracy(state: ModelState, config: ModelConfig, x: np.ndarray, y: np.ndarray) -> float:
    if len(x) == 0:
        return float("nan")
    return float(np.mean(forward(state, config, x).predictions == np.asarray(y)))
