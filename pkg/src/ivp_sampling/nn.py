"""Fully connected network on (t, x) -> u, trained by mini-batch Adam.

Plain numpy: forward pass, exact backprop for the mean squared error, and an
Adam optimizer over a flat parameter vector. The controller wrapper owns the
frozen input/output standardization so that a trained network can be called
like any other feedback law ``u = ctrl(t, x)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DomainError, TrainingDiverged

FORMAT_VERSION = 1

_ACTIVATIONS = {
    "tanh": (np.tanh, lambda a, y: 1.0 - y * y),
    "relu": (lambda a: np.maximum(a, 0.0), lambda a, y: (a > 0).astype(float)),
}


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden: tuple = (128, 128)
    output_dim: int = 1
    activation: tuple | str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        act = self.activation
        if isinstance(act, str):
            act = (act,) * len(self.hidden)
        act = tuple(act)
        if len(act) != len(self.hidden):
            raise DomainError("one activation per hidden layer")
        for a in act:
            if a not in _ACTIVATIONS:
                raise DomainError(f"unknown activation {a!r}")
        object.__setattr__(self, "activation", act)
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden):
            raise DomainError("layer widths must be positive")

    @property
    def sizes(self):
        return (self.input_dim,) + self.hidden + (self.output_dim,)

    def to_dict(self):
        return {"input_dim": self.input_dim, "hidden": list(self.hidden),
                "output_dim": self.output_dim, "activation": list(self.activation)}


@dataclass
class MlpParams:
    spec: MlpSpec
    weights: list          # W[l] has shape (fan_out, fan_in)
    biases: list

    @property
    def size(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in
                               zip(self.weights, self.biases)])

    @classmethod
    def from_flat(cls, spec: MlpSpec, theta) -> "MlpParams":
        theta = np.asarray(theta, dtype=float)
        Ws, bs, k = [], [], 0
        sizes = spec.sizes
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            Ws.append(theta[k:k + fan_in * fan_out].reshape(fan_out, fan_in).copy())
            k += fan_in * fan_out
            bs.append(theta[k:k + fan_out].copy())
            k += fan_out
        if k != theta.size:
            raise DomainError(f"flat vector has {theta.size} entries, spec needs {k}")
        return cls(spec, Ws, bs)

    def copy(self) -> "MlpParams":
        return MlpParams(self.spec, [W.copy() for W in self.weights],
                         [b.copy() for b in self.biases])


def init_params(spec: MlpSpec, rng: np.random.Generator) -> MlpParams:
    """Xavier-normal weights for tanh layers, He-normal for relu; zero biases."""
    Ws, bs = [], []
    sizes = spec.sizes
    acts = spec.activation + ("linear",)
    for (fan_in, fan_out), act in zip(zip(sizes[:-1], sizes[1:]), acts):
        if act == "relu":
            std = np.sqrt(2.0 / fan_in)
        else:
            std = np.sqrt(2.0 / (fan_in + fan_out))
        Ws.append(std * rng.standard_normal((fan_out, fan_in)))
        bs.append(np.zeros(fan_out))
    return MlpParams(spec, Ws, bs)


def _as_inputs(t, x):
    x = np.asarray(x, dtype=float)
    t = np.broadcast_to(np.asarray(t, dtype=float), x.shape[:-1])
    return np.concatenate([t[..., None], x], axis=-1)


def forward_z(params: MlpParams, Z):
    """Network output for raw input rows Z (..., input_dim)."""
    a = np.asarray(Z, dtype=float)
    for l, (W, b) in enumerate(zip(params.weights, params.biases)):
        a = a @ W.T + b
        if l < len(params.spec.hidden):
            a = _ACTIVATIONS[params.spec.activation[l]][0](a)
    return a


def forward(params: MlpParams, t, x):
    """u^NN(t, x) with the time prepended to the state as the first input."""
    return forward_z(params, _as_inputs(t, x))


def _batch_arrays(batch):
    """Accept a Dataset, a list of DataPoints or an (inputs, targets) pair."""
    if isinstance(batch, tuple) and len(batch) == 2:
        Z, U = batch
        return np.asarray(Z, dtype=float), np.asarray(U, dtype=float)
    if hasattr(batch, "t") and hasattr(batch, "x") and hasattr(batch, "u"):
        return _as_inputs(batch.t, batch.x), np.asarray(batch.u, dtype=float)
    batch = list(batch)
    if not batch:
        raise DomainError("empty batch")
    Z = np.array([np.concatenate([[p.t], p.x]) for p in batch])
    U = np.array([np.asarray(p.u, dtype=float) for p in batch])
    return Z, U


def loss_and_grad(params: MlpParams, batch):
    """Mean over the batch of ``||u - u^NN||^2`` and its gradient.

    Returns:
        (loss, grad) with grad a flat vector aligned with ``params.flat()``.
    """
    Z, U = _batch_arrays(batch)
    B = len(Z)
    if B == 0:
        raise DomainError("empty batch")
    nh = len(params.spec.hidden)
    pre, post = [], [Z]
    a = Z
    for l, (W, b) in enumerate(zip(params.weights, params.biases)):
        s = a @ W.T + b
        a = _ACTIVATIONS[params.spec.activation[l]][0](s) if l < nh else s
        pre.append(s)
        post.append(a)
    err = a - U
    loss = float(np.sum(err * err) / B)
    delta = 2.0 * err / B
    grads = []
    for l in range(nh, -1, -1):
        W = params.weights[l]
        grads.append((delta.T @ post[l], delta.sum(axis=0)))
        if l > 0:
            delta = delta @ W
            delta = delta * _ACTIVATIONS[params.spec.activation[l - 1]][1](pre[l - 1], post[l])
    grads.reverse()
    flat = np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in grads])
    return loss, flat


# --- optimizer -----------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0)


@dataclass(frozen=True)
class Normalization:
    """Affine maps z -> (z - mean) / scale on inputs and u = mean + scale * y on outputs."""
    in_mean: np.ndarray
    in_scale: np.ndarray
    out_mean: np.ndarray
    out_scale: np.ndarray

    @classmethod
    def identity(cls, input_dim: int, output_dim: int) -> "Normalization":
        return cls(np.zeros(input_dim), np.ones(input_dim), np.zeros(output_dim),
                   np.ones(output_dim))

    @classmethod
    def fit(cls, Z, U, standardize_outputs: bool = True) -> "Normalization":
        Z, U = np.asarray(Z, dtype=float), np.asarray(U, dtype=float)
        in_scale = Z.std(axis=0)
        in_scale = np.where(in_scale > 1e-8, in_scale, 1.0)
        if standardize_outputs:
            out_scale = U.std(axis=0)
            out_scale = np.where(out_scale > 1e-8, out_scale, 1.0)
            out_mean = U.mean(axis=0)
        else:
            out_mean, out_scale = np.zeros(U.shape[1]), np.ones(U.shape[1])
        return cls(Z.mean(axis=0), in_scale, out_mean, out_scale)

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in ("in_mean", "in_scale", "out_mean",
                                                        "out_scale")}

    @classmethod
    def from_dict(cls, d):
        return cls(*(np.asarray(d[k], dtype=float) for k in ("in_mean", "in_scale", "out_mean",
                                                              "out_scale")))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 256
    epochs: int = 1000
    seed: int = 0
    normalization: Optional[Normalization] = None
    standardize_outputs: bool = True
    finetune: bool = False
    holdout: float = 0.0

    def __post_init__(self):
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise DomainError("Adam betas must lie in (0, 1)")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise DomainError("need learning_rate > 0, batch_size >= 1, epochs >= 0")
        if not 0.0 <= self.holdout < 1.0:
            raise DomainError("holdout fraction must lie in [0, 1)")


def adam_step(theta, state: AdamState, grad, config: TrainConfig):
    """One bias-corrected Adam update on a flat parameter vector."""
    b1, b2 = config.adam_beta1, config.adam_beta2
    step = state.step + 1
    m = b1 * state.m + (1 - b1) * grad
    v = b2 * state.v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1 ** step)
    v_hat = v / (1 - b2 ** step)
    theta = theta - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    return theta, AdamState(m, v, step)


# --- controller ------------------------------------------------------------------

@dataclass
class MlpController:
    """Trained network plus its frozen normalization; immutable after training."""

    params: MlpParams
    norm: Normalization
    loss_curve: list = field(default_factory=list)
    holdout_curve: list = field(default_factory=list)

    @property
    def spec(self) -> MlpSpec:
        return self.params.spec

    def __call__(self, t, x):
        Z = (_as_inputs(t, x) - self.norm.in_mean) / self.norm.in_scale
        return self.norm.out_mean + self.norm.out_scale * forward_z(self.params, Z)

    def to_json(self) -> str:
        """Text serialization; floats are written round-trip exact."""
        doc = {
            "format": "mlp-controller",
            "version": FORMAT_VERSION,
            "spec": self.spec.to_dict(),
            "normalization": self.norm.to_dict(),
            "weights": [W.tolist() for W in self.params.weights],
            "biases": [b.tolist() for b in self.params.biases],
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "MlpController":
        doc = json.loads(text)
        if doc.get("format") != "mlp-controller" or doc.get("version") != FORMAT_VERSION:
            raise DomainError("not a version-1 mlp-controller document")
        s = doc["spec"]
        spec = MlpSpec(s["input_dim"], tuple(s["hidden"]), s["output_dim"], tuple(s["activation"]))
        params = MlpParams(spec, [np.asarray(W, dtype=float) for W in doc["weights"]],
                           [np.asarray(b, dtype=float) for b in doc["biases"]])
        return cls(params, Normalization.from_dict(doc["normalization"]))

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "MlpController":
        with open(path) as fh:
            return cls.from_json(fh.read())


def train(dataset, spec: MlpSpec, config: TrainConfig = TrainConfig(),
          init: Optional[MlpParams] = None) -> MlpController:
    """Shuffled mini-batch Adam on the standardized regression problem.

    Args:
        dataset: Dataset (or anything ``loss_and_grad`` accepts as a batch).
        spec: network shape; ``input_dim`` must be ``1 + state_dim``.
        config: optimizer settings. When ``config.normalization`` is None the
            statistics are computed from this dataset.
        init: starting parameters (used when ``config.finetune`` is set).

    Raises:
        TrainingDiverged: the epoch loss became non-finite.
    """
    Z, U = _batch_arrays(dataset)
    if len(Z) == 0:
        raise DomainError("cannot train on an empty dataset")
    if Z.shape[1] != spec.input_dim or U.shape[1] != spec.output_dim:
        raise DomainError(f"data dims {Z.shape[1]}->{U.shape[1]} do not match the spec "
                          f"{spec.input_dim}->{spec.output_dim}")
    rng = np.random.default_rng(config.seed)
    norm = config.normalization
    if norm is None:
        norm = Normalization.fit(Z, U, config.standardize_outputs)
    Zn = (Z - norm.in_mean) / norm.in_scale
    Un = (U - norm.out_mean) / norm.out_scale
    params = init_params(spec, rng)
    if config.finetune and init is not None:
        params = init.copy()
    n = len(Zn)
    hold_idx = np.zeros(0, dtype=int)
    if config.holdout > 0 and n > 1:
        perm = rng.permutation(n)
        n_hold = max(1, int(round(config.holdout * n)))
        hold_idx, train_idx = perm[:n_hold], perm[n_hold:]
        Zh, Uh = Zn[hold_idx], Un[hold_idx]
        Zn, Un = Zn[train_idx], Un[train_idx]
        n = len(Zn)
    theta = params.flat()
    state = AdamState.zeros(theta.size)
    curve, hcurve = [], []
    bs = min(config.batch_size, n)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for k in range(0, n, bs):
            idx = order[k:k + bs]
            loss, g = loss_and_grad(MlpParams.from_flat(spec, theta), (Zn[idx], Un[idx]))
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss in epoch {epoch}", epoch)
            theta, state = adam_step(theta, state, g, config)
            total += loss * len(idx)
        curve.append(total / n)
        if len(hold_idx):
            hcurve.append(float(np.mean(np.sum((forward_z(MlpParams.from_flat(spec, theta), Zh)
                                                 - Uh) ** 2, axis=1))))
    if not np.all(np.isfinite(theta)):
        raise TrainingDiverged("non-finite parameters after training", config.epochs)
    return MlpController(MlpParams.from_flat(spec, theta), norm, curve, hcurve)
