"""Feed-forward classifier over a flat parameter vector, with hand-written backprop.

Layout convention: for every layer ``l`` the flat vector holds ``W{l}`` with
shape ``(fan_in, fan_out)`` (row-major) followed by ``b{l}`` with shape
``(fan_out,)``, so that ``logits = x @ W + b``.

Token-labeling examples are flattened into prediction points; each point gets
weight ``1 / (n_tokens * batch_size)`` so the loss is the mean over tokens
within an example, then the mean over examples.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, InputError, NumericError

ACTIVATIONS = ("tanh", "relu")
HEAD_KINDS = ("sequence_classification", "token_labeling")


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    hidden_dims: tuple[int, ...] = ()
    num_labels: int = 2
    activation: str = "tanh"
    head_kind: str = "sequence_classification"
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if int(self.input_dim) < 1:
            raise ConfigError(f"input_dim must be positive, got {self.input_dim}")
        if any(h < 1 for h in self.hidden_dims):
            raise ConfigError(f"hidden_dims must be positive, got {self.hidden_dims}")
        if int(self.num_labels) < 2:
            raise ConfigError(f"num_labels must be >= 2, got {self.num_labels}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.head_kind not in HEAD_KINDS:
            raise ConfigError(f"head_kind must be one of {HEAD_KINDS}, got {self.head_kind!r}")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim, *self.hidden_dims, self.num_labels]

    def layout(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        sizes = self.layer_sizes
        out = []
        for l, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            out.append((f"W{l}", (fan_in, fan_out)))
            out.append((f"b{l}", (fan_out,)))
        return tuple(out)

    @property
    def num_params(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.layout())


@dataclass
class ParameterVector:
    values: np.ndarray
    layout: tuple[tuple[str, tuple[int, ...]], ...]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        expected = sum(int(np.prod(shape)) for _, shape in self.layout)
        if self.values.ndim != 1 or self.values.size != expected:
            raise InputError(
                f"parameter vector has {self.values.size} values, layout needs {expected}"
            )

    def __len__(self) -> int:
        return self.values.size

    def copy(self) -> "ParameterVector":
        return ParameterVector(self.values.copy(), self.layout)

    def unpack(self) -> dict[str, np.ndarray]:
        """Views (not copies) of each weight matrix / bias vector, keyed by layer name."""
        out, offset = {}, 0
        for name, shape in self.layout:
            size = int(np.prod(shape))
            out[name] = self.values[offset:offset + size].reshape(shape)
            offset += size
        return out


@dataclass
class GradientVector:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)

    def __len__(self) -> int:
        return self.values.size


@dataclass(eq=False)
class Example:
    """One labeled instance.

    ``features`` is ``(input_dim,)`` with an int ``label`` for sequence tasks, or
    ``(n_tokens, input_dim)`` with an int array ``label`` of length ``n_tokens``
    for token tasks.
    """
    features: np.ndarray
    label: int | np.ndarray
    task_id: str = ""
    meta: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 2:
            self.label = np.asarray(self.label, dtype=np.int64).reshape(-1)
            if self.label.size != self.features.shape[0]:
                raise InputError(
                    f"token example has {self.features.shape[0]} tokens but {self.label.size} labels"
                )
        elif self.features.ndim == 1:
            self.label = int(self.label)
        else:
            raise InputError(f"features must be 1-D or 2-D, got shape {self.features.shape}")

    @property
    def is_token(self) -> bool:
        return self.features.ndim == 2

    @property
    def labels(self) -> np.ndarray:
        return np.atleast_1d(np.asarray(self.label, dtype=np.int64))

    @property
    def points(self) -> np.ndarray:
        return np.atleast_2d(self.features)


def init_model(config: ModelConfig) -> ParameterVector:
    """Glorot-uniform weights per layer (a = sqrt(6 / (fan_in + fan_out))), zero biases."""
    rng = np.random.default_rng(config.init_seed)
    chunks = []
    for name, shape in config.layout():
        if name.startswith("W"):
            a = np.sqrt(6.0 / (shape[0] + shape[1]))
            chunks.append(rng.uniform(-a, a, size=shape).ravel())
        else:
            chunks.append(np.zeros(shape))
    return ParameterVector(np.concatenate(chunks), config.layout())


def _check_theta(theta: ParameterVector, config: ModelConfig) -> None:
    if tuple(theta.layout) != config.layout():
        raise InputError("parameter layout does not match model config")


def _check_example(example: Example, config: ModelConfig) -> None:
    token = config.head_kind == "token_labeling"
    if example.is_token != token:
        raise InputError(
            f"{'token' if example.is_token else 'sequence'} example given to a {config.head_kind} model"
        )
    if example.features.shape[-1] != config.input_dim:
        raise InputError(
            f"example has feature dim {example.features.shape[-1]}, model expects {config.input_dim}"
        )
    labels = example.labels
    if labels.size and (labels.min() < 0 or labels.max() >= config.num_labels):
        raise InputError(f"label ids must lie in [0, {config.num_labels})")


def stack_batch(batch: Sequence[Example], config: ModelConfig):
    """Flatten a batch into prediction points.

    Returns ``(X, y, w, owner)`` where ``w`` are per-point loss weights (summing
    to 1) and ``owner[i]`` is the batch index of point ``i``.
    """
    if len(batch) == 0:
        raise InputError("batch must be nonempty")
    for ex in batch:
        _check_example(ex, config)
    X = np.concatenate([ex.points for ex in batch], axis=0)
    y = np.concatenate([ex.labels for ex in batch])
    counts = np.array([ex.points.shape[0] for ex in batch])
    if np.any(counts == 0):
        raise InputError("token examples must have at least one token")
    owner = np.repeat(np.arange(len(batch)), counts)
    w = np.repeat(1.0 / (counts * len(batch)), counts)
    return X, y, w, owner


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    return np.tanh(z) if kind == "tanh" else np.maximum(z, 0.0)


def _activate_grad(z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    return 1.0 - a * a if kind == "tanh" else (z > 0).astype(np.float64)


def _forward_points(params: dict, config: ModelConfig, X: np.ndarray):
    n_layers = len(config.layer_sizes) - 1
    acts, pre = [X], []
    a = X
    for l in range(n_layers):
        z = a @ params[f"W{l}"] + params[f"b{l}"]
        pre.append(z)
        if l < n_layers - 1:
            a = _activate(z, config.activation)
            acts.append(a)
    logits = pre[-1]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return acts, pre, log_probs


def predict_proba_points(theta: ParameterVector, config: ModelConfig, X: np.ndarray) -> np.ndarray:
    """Class probabilities for a ``(n_points, input_dim)`` array."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != config.input_dim:
        raise InputError(f"expected {config.input_dim} features, got {X.shape[1]}")
    _, _, log_probs = _forward_points(theta.unpack(), config, X)
    return np.exp(log_probs)


def forward(theta: ParameterVector, config: ModelConfig, example: Example) -> np.ndarray:
    """Probability vector (sequence task) or one vector per token (token task)."""
    _check_theta(theta, config)
    _check_example(example, config)
    probs = predict_proba_points(theta, config, example.points)
    return probs if example.is_token else probs[0]


def predict(theta: ParameterVector, config: ModelConfig, example: Example):
    """Argmax label id(s); ``np.argmax`` already resolves ties to the lowest id."""
    probs = forward(theta, config, example)
    if example.is_token:
        return np.argmax(probs, axis=1)
    return int(np.argmax(probs))


def predict_points(theta: ParameterVector, config: ModelConfig, X: np.ndarray) -> np.ndarray:
    return np.argmax(predict_proba_points(theta, config, X), axis=1)


def _backprop(params, config, X, y, w, per_point: bool):
    acts, pre, log_probs = _forward_points(params, config, X)
    n = X.shape[0]
    loss = -float(np.dot(w, log_probs[np.arange(n), y]))

    # d(-log p_y)/d logits, unweighted per point
    delta = np.exp(log_probs)
    delta[np.arange(n), y] -= 1.0

    n_layers = len(pre)
    grads: list[np.ndarray] = [None] * (2 * n_layers)
    point_grads: list[np.ndarray] = [None] * (2 * n_layers)
    for l in range(n_layers - 1, -1, -1):
        a_in = acts[l]
        wd = delta * w[:, None]
        grads[2 * l] = (a_in.T @ wd).ravel()
        grads[2 * l + 1] = wd.sum(axis=0)
        if per_point:
            point_grads[2 * l] = np.einsum("ni,nj->nij", a_in, delta).reshape(n, -1)
            point_grads[2 * l + 1] = delta
        if l > 0:
            back = delta @ params[f"W{l}"].T
            delta = back * _activate_grad(pre[l - 1], acts[l], config.activation)
    grad = np.concatenate(grads)
    if per_point:
        return loss, grad, np.concatenate(point_grads, axis=1)
    return loss, grad, None


def loss_and_grad(theta: ParameterVector, config: ModelConfig, batch: Sequence[Example]):
    """Mean negative log-likelihood of ``batch`` and its exact gradient."""
    _check_theta(theta, config)
    X, y, w, _ = stack_batch(batch, config)
    loss, grad, _ = _backprop(theta.unpack(), config, X, y, w, per_point=False)
    if not np.isfinite(loss):
        raise NumericError(f"nonfinite loss {loss}")
    return loss, GradientVector(grad)


def per_example_grads(theta: ParameterVector, config: ModelConfig, batch: Sequence[Example],
                      labels: Sequence | None = None) -> np.ndarray:
    """Gradient of each example's own mean NLL, as rows of an ``(n_examples, n_params)`` array.

    ``labels`` optionally replaces the examples' gold labels (one entry per example;
    an int array per token example).
    """
    _check_theta(theta, config)
    X, y, _, owner = stack_batch(batch, config)
    if labels is not None:
        y = np.concatenate([np.atleast_1d(np.asarray(lab, dtype=np.int64)) for lab in labels])
        if y.size != X.shape[0]:
            raise InputError("replacement labels do not align with prediction points")
    counts = np.bincount(owner, minlength=len(batch))
    per_point_w = 1.0 / counts[owner]
    _, _, pg = _backprop(theta.unpack(), config, X, y, np.ones(X.shape[0]), per_point=True)
    pg *= per_point_w[:, None]
    if X.shape[0] == len(batch):
        return pg
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    return np.add.reduceat(pg, starts, axis=0)


def sgd_step(theta: ParameterVector, grad: GradientVector, lr: float) -> ParameterVector:
    """Return ``theta - lr * grad``."""
    if not lr > 0:
        raise InputError(f"learning rate must be positive, got {lr}")
    if len(grad) != len(theta):
        raise InputError(f"gradient length {len(grad)} != parameter length {len(theta)}")
    if not np.all(np.isfinite(grad.values)):
        bad = int(np.flatnonzero(~np.isfinite(grad.values))[0])
        raise NumericError(f"nonfinite gradient component at index {bad}")
    out = theta.values - lr * grad.values
    if not np.all(np.isfinite(out)):
        raise NumericError("update produced nonfinite parameters")
    return ParameterVector(out, theta.layout)
