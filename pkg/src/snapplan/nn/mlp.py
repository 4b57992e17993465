"""Dense multilayer perceptrons with tape and pure-numpy forward passes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from ..errors import ArgumentError
from .tape import ACTIVATIONS, Tape, Var


def _np_act(name: str, x: NDArray[np.float64]) -> NDArray[np.float64]:
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "tanh":
        return np.tanh(x)
    if name == "identity":
        return x
    if name == "sigmoid":
        return 1.0 / (1.0 + np.exp(-x))
    if name == "softmax":
        z = np.exp(x - x.max(axis=-1, keepdims=True))
        return z / z.sum(axis=-1, keepdims=True)
    raise ArgumentError(f"unknown activation {name!r}")


@dataclass
class Mlp:
    """``y = act_L(... act_1(x @ W_1 + b_1) ...)`` with weights stored as ``[in, out]``."""

    weights: list[NDArray[np.float64]]
    biases: list[NDArray[np.float64]]
    activations: list[str]
    _check: bool = field(default=True, repr=False)

    def __post_init__(self) -> None:
        if not (len(self.weights) == len(self.biases) == len(self.activations)) or not self.weights:
            raise ArgumentError("weights, biases and activations must have equal non-zero length")
        self.weights = [np.array(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.array(b, dtype=np.float64).reshape(-1) for b in self.biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.size != w.shape[1]:
                raise ArgumentError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and w.shape[0] != self.weights[i - 1].shape[1]:
                raise ArgumentError(f"layer {i} input {w.shape[0]} != previous output {self.weights[i - 1].shape[1]}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ArgumentError(f"layer {i} has non-finite parameters")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ArgumentError(f"unknown activation {a!r}")

    @classmethod
    def init(
        cls,
        sizes: list[int],
        hidden: str,
        output: str,
        rng: np.random.Generator,
        zero_last: bool = False,
    ) -> "Mlp":
        weights, biases = [], []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            gain = 2.0 if hidden == "relu" else 1.0
            w = rng.normal(0.0, np.sqrt(gain / n_in), (n_in, n_out))
            if zero_last and i == len(sizes) - 2:
                w = np.zeros((n_in, n_out))
            weights.append(w)
            biases.append(np.zeros(n_out))
        acts = [hidden] * (len(sizes) - 2) + [output]
        return cls(weights, biases, acts)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    def parameters(self) -> list[NDArray[np.float64]]:
        """Parameter arrays in the fixed order W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def set_parameters(self, params: list[NDArray[np.float64]]) -> None:
        self.weights = [np.array(p) for p in params[0::2]]
        self.biases = [np.array(p) for p in params[1::2]]

    def predict(self, x) -> NDArray[np.float64]:
        h = np.asarray(x, dtype=np.float64)
        if h.shape[-1] != self.input_dim:
            raise ArgumentError(f"input has {h.shape[-1]} features, network expects {self.input_dim}")
        for w, b, a in zip(self.weights, self.biases, self.activations):
            h = _np_act(a, h @ w + b)
        return h

    def bind(self, tape: Tape) -> list[Var]:
        return [tape.leaf(p) for p in self.parameters()]

    def forward(self, x, params: list[Var]) -> Var:
        h = x if isinstance(x, Var) else params[0]._lift(x)
        if h.shape[-1] != self.input_dim:
            raise ArgumentError(f"input has {h.shape[-1]} features, network expects {self.input_dim}")
        for i, a in enumerate(self.activations):
            h = ACTIVATIONS[a](h @ params[2 * i] + params[2 * i + 1])
        return h

    def to_json(self) -> dict:
        return {
            "activations": list(self.activations),
            "layers": [
                {"shape": list(w.shape), "weight": w.reshape(-1).tolist(), "bias": b.tolist()}
                for w, b in zip(self.weights, self.biases)
            ],
        }

    @classmethod
    def from_json(cls, d: dict) -> "Mlp":
        try:
            weights = [np.array(L["weight"], dtype=np.float64).reshape(L["shape"]) for L in d["layers"]]
            biases = [np.array(L["bias"], dtype=np.float64) for L in d["layers"]]
            return cls(weights, biases, list(d["activations"]))
        except (KeyError, ValueError, TypeError) as exc:
            raise ArgumentError(f"malformed network JSON: {exc}") from None


@dataclass
class Adam:
    """Adaptive-moment update; ``plain_sgd=True`` applies ``p -= lr * g`` exactly."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    plain_sgd: bool = False
    t: int = 0
    m: list[NDArray[np.float64]] = field(default_factory=list)
    v: list[NDArray[np.float64]] = field(default_factory=list)

    def step(self, params: list[NDArray[np.float64]], grads: list[NDArray[np.float64]]) -> list[NDArray[np.float64]]:
        self.t += 1
        if self.plain_sgd:
            return [p - self.lr * g for p, g in zip(params, grads)]
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        out = []
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            out.append(p - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps))
        return out

    def to_json(self) -> dict:
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "plain_sgd": self.plain_sgd,
            "t": self.t,
            "m": [{"shape": list(a.shape), "data": a.reshape(-1).tolist()} for a in self.m],
            "v": [{"shape": list(a.shape), "data": a.reshape(-1).tolist()} for a in self.v],
        }

    @classmethod
    def from_json(cls, d: dict) -> "Adam":
        def arrays(key):
            return [np.array(a["data"], dtype=np.float64).reshape(a["shape"]) for a in d[key]]

        return cls(d["lr"], d["beta1"], d["beta2"], d["eps"], d["plain_sgd"], d["t"], arrays("m"), arrays("v"))
