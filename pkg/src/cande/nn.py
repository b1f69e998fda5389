"""Small dense-network engine on numpy.

Batch is always the leading axis. Networks are stacks of :class:`DenseLayer`
with an optional :class:`~cande.film.FiLMGenerator` that modulates selected
layers. Gradients are exact reverse-mode; :func:`grad_check` compares them
against central finite differences in float64.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DivergenceError, ShapeError, TapeError
from .film import FiLMGenerator, FiLMPair, film_apply, film_backward, film_params

ACTIVATIONS = ("relu", "sigmoid", "linear")


@dataclass
class DenseLayer:
    weight: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray  # (out_dim,)
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ShapeError(f"weight {self.weight.shape} and bias {self.bias.shape} are inconsistent")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def init_dense(rng: np.random.Generator, in_dim: int, out_dim: int, activation: str = "relu",
               dtype=np.float32) -> DenseLayer:
    return DenseLayer(glorot_uniform(rng, in_dim, out_dim, dtype), np.zeros(out_dim, dtype=dtype), activation)


def activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0)
    if activation == "sigmoid":
        # split by sign so neither branch overflows
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1 / (1 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1 + ez)
        return out
    if activation == "linear":
        return z
    raise ValueError(f"unknown activation {activation!r}")


def activation_backward(grad: np.ndarray, z: np.ndarray, a: np.ndarray, activation: str) -> np.ndarray:
    """Map dL/da to dL/dz given the cached pre-activation ``z`` and output ``a``."""
    if activation == "relu":
        return grad * (z > 0)
    if activation == "sigmoid":
        return grad * a * (1 - a)
    return grad


def dense_forward(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.shape[-1] != layer.in_dim:
        raise ShapeError(f"input width {x.shape[-1]} does not match layer in_dim {layer.in_dim}")
    return activate(x @ layer.weight + layer.bias, layer.activation)


def mse_loss(x: np.ndarray, x_prime: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all entries and its gradient w.r.t. ``x_prime``."""
    x = np.asarray(x)
    x_prime = np.asarray(x_prime)
    if x.shape != x_prime.shape:
        raise ShapeError(f"shapes differ: {x.shape} vs {x_prime.shape}")
    diff = x_prime - x
    loss = _reduce(np.square(diff, dtype=_acc_dtype(diff)))
    return loss, (2.0 / diff.size) * diff


def _acc_dtype(a: np.ndarray):
    """float64, or the input's dtype when that is wider (extended precision)."""
    return np.result_type(a.dtype, np.float64)


def _reduce(values: np.ndarray):
    """Mean as a Python float, keeping extended precision when the input has it."""
    acc = _acc_dtype(values)
    mean = np.mean(values, dtype=acc)
    return float(mean) if acc == np.float64 else mean


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent_loss(logits: np.ndarray, target) -> tuple[float, np.ndarray]:
    """Cross-entropy of softmax(logits) against integer targets.

    ``logits`` is (n, K) with ``target`` an int array of length n, or a single
    row (K,) with an int target. The loss is averaged over rows; the gradient
    of each row is ``(softmax - one_hot) / n``.
    """
    logits = np.asarray(logits)
    single = logits.ndim == 1
    if single:
        logits = logits[None, :]
    target = np.atleast_1d(np.asarray(target))
    n, k = logits.shape
    if target.shape != (n,):
        raise ShapeError(f"{target.shape[0]} targets for {n} rows of logits")
    if not np.issubdtype(target.dtype, np.integer):
        raise TypeError("targets must be integer class indices")
    if np.any(target < 0) or np.any(target >= k):
        raise IndexError(f"target class out of range for {k} logits")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = _reduce(log_z - shifted[rows, target])
    grad = softmax(logits)
    grad[rows, target] -= 1
    grad /= n
    return loss, (grad[0] if single else grad)


@dataclass
class GradientTape:
    """Per-layer values cached by a forward pass for :meth:`Network.backward`."""

    inputs: list = field(default_factory=list)
    pre: list = field(default_factory=list)  # raw x @ W + b
    gammas: list = field(default_factory=list)  # None for unconditioned layers
    modulated: list = field(default_factory=list)  # after FiLM (== pre if unconditioned)
    outputs: list = field(default_factory=list)
    h: np.ndarray | None = None
    signature: tuple | None = None

    def clear(self):
        self.inputs.clear()
        self.pre.clear()
        self.gammas.clear()
        self.modulated.clear()
        self.outputs.clear()
        self.h = None
        self.signature = None

    @property
    def empty(self) -> bool:
        return self.signature is None


class Network:
    """Feed-forward stack of dense layers, optionally FiLM-conditioned.

    Conditioned layers are the keys of ``film.pairs``; on those layers the
    pre-activation is modulated by ``gamma * z + beta`` before the activation.
    """

    def __init__(self, layers: list[DenseLayer], film: FiLMGenerator | None = None):
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"layer widths do not chain: {a.out_dim} -> {b.in_dim}")
        if film is not None:
            for k, pair in film.pairs.items():
                if not 0 <= k < len(layers):
                    raise ShapeError(f"FiLM generator for nonexistent layer {k}")
                if pair.width != layers[k].out_dim:
                    raise ShapeError(
                        f"FiLM width {pair.width} does not match layer {k} width {layers[k].out_dim}"
                    )
        self.layers = layers
        self.film = film

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def context_dim(self) -> int | None:
        return None if self.film is None else self.film.context_dim

    def signature(self) -> tuple:
        film = () if self.film is None else tuple(self.film.widths().items())
        return tuple((l.in_dim, l.out_dim, l.activation) for l in self.layers), film

    # -- parameters ---------------------------------------------------------

    def params(self) -> dict[str, np.ndarray]:
        """Named parameter arrays in canonical order (the arrays themselves, not copies)."""
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"layers.{i}.weight"] = layer.weight
            out[f"layers.{i}.bias"] = layer.bias
        if self.film is not None:
            for k in self.film.layers:
                pair = self.film.pairs[k]
                out[f"film.{k}.gamma_weight"] = pair.gamma_weight
                out[f"film.{k}.gamma_bias"] = pair.gamma_bias
                out[f"film.{k}.beta_weight"] = pair.beta_weight
                out[f"film.{k}.beta_bias"] = pair.beta_bias
        return out

    def set_params(self, params: dict[str, np.ndarray]):
        current = self.params()
        if set(params) != set(current):
            raise KeyError(f"parameter names differ: {sorted(set(params) ^ set(current))}")
        for name, value in params.items():
            if value.shape != current[name].shape:
                raise ShapeError(f"{name}: shape {value.shape} != {current[name].shape}")
            kind, idx, attr = name.split(".")
            target = self.layers[int(idx)] if kind == "layers" else self.film.pairs[int(idx)]
            setattr(target, attr, value)

    def num_params(self) -> int:
        return sum(p.size for p in self.params().values())

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "Network":
        net = self.copy()
        net.set_params({k: v.astype(dtype) for k, v in net.params().items()})
        return net

    # -- forward / backward -------------------------------------------------

    def _context_rows(self, h, n: int) -> np.ndarray | None:
        if self.film is None:
            if h is not None:
                raise ValueError("network is not conditioned but a context vector was given")
            return None
        if h is None:
            raise ValueError("conditioned network requires a context vector")
        h = np.asarray(h)
        if h.shape[-1] != self.film.context_dim:
            raise ShapeError(f"context vector length {h.shape[-1]} != {self.film.context_dim}")
        if h.ndim == 1:
            h = np.broadcast_to(h, (n, h.shape[0]))
        elif h.shape[0] != n:
            raise ShapeError(f"{h.shape[0]} context rows for a batch of {n}")
        return h

    def forward(self, x: np.ndarray, h: np.ndarray | None = None,
                tape: GradientTape | None = None, upto: int | None = None) -> np.ndarray:
        """Run the stack on a batch ``x`` of shape (n, in_dim).

        ``h`` is one context vector for the whole batch or one row per example.
        ``upto`` stops after that many layers (used to read hidden activations).
        """
        x = np.asarray(x)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"expected input of shape (n, {self.input_dim}), got {x.shape}")
        h = self._context_rows(h, x.shape[0])
        if tape is not None:
            tape.clear()
            tape.h = h
            tape.signature = self.signature()
        a = x
        layers = self.layers if upto is None else self.layers[:upto]
        for k, layer in enumerate(layers):
            z = a @ layer.weight + layer.bias
            gamma = None
            zm = z
            if self.film is not None and k in self.film.pairs:
                gamma, beta = film_params(self.film, h, k)
                zm = film_apply(z, gamma, beta)
            out = activate(zm, layer.activation)
            if tape is not None:
                tape.inputs.append(a)
                tape.pre.append(z)
                tape.gammas.append(gamma)
                tape.modulated.append(zm)
                tape.outputs.append(out)
            a = out
        if not np.all(np.isfinite(a)):
            raise DivergenceError("non-finite values in forward pass")
        return a

    def backward(self, tape: GradientTape, output_grad: np.ndarray) -> dict[str, np.ndarray]:
        """Exact gradients of every parameter given dL/d(output).

        The tape must come from the most recent full forward pass of this
        network; it is cleared afterwards so it cannot be reused.
        """
        if tape.empty:
            raise TapeError("gradient tape is empty; run forward(..., tape=tape) first")
        if tape.signature != self.signature() or len(tape.outputs) != len(self.layers):
            raise TapeError("gradient tape was recorded on a different network or a partial pass")
        if output_grad.shape != tape.outputs[-1].shape:
            raise ShapeError(f"output grad {output_grad.shape} != output {tape.outputs[-1].shape}")
        grads: dict[str, np.ndarray] = {}
        g = output_grad
        for k in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[k]
            g = activation_backward(g, tape.modulated[k], tape.outputs[k], layer.activation)
            if tape.gammas[k] is not None:
                pair: FiLMPair = self.film.pairs[k]
                fg = film_backward(g, tape.pre[k], tape.gammas[k], tape.h, pair)
                grads[f"film.{k}.gamma_weight"] = fg.gamma_weight
                grads[f"film.{k}.gamma_bias"] = fg.gamma_bias
                grads[f"film.{k}.beta_weight"] = fg.beta_weight
                grads[f"film.{k}.beta_bias"] = fg.beta_bias
                # fg.h is dropped: context vectors are inputs, not parameters
                g = fg.z
            grads[f"layers.{k}.weight"] = tape.inputs[k].T @ g
            grads[f"layers.{k}.bias"] = g.sum(axis=0)
            if k > 0:
                g = g @ layer.weight.T
        tape.clear()
        ordered = {name: grads[name] for name in self.params()}
        for name, value in ordered.items():
            if not np.all(np.isfinite(value)):
                raise DivergenceError(f"non-finite gradient for {name}")
        return ordered


# -- optimiser ---------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def fresh(cls, params: dict[str, np.ndarray], **hyper) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            **hyper,
        )


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Inputs are not modified."""
    if set(grads) != set(params):
        raise ShapeError(f"gradient names differ from parameters: {sorted(set(grads) ^ set(params))}")
    t = state.step + 1
    c1 = 1 - state.beta1 ** t
    c2 = 1 - state.beta2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m, v = state.m.get(name), state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError(f"{name}: grad {g.shape}, moment {m.shape}, param {p.shape}")
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * np.square(g)
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_params[name] = (p - update).astype(p.dtype, copy=False)
        new_m[name] = m.astype(p.dtype, copy=False)
        new_v[name] = v.astype(p.dtype, copy=False)
    new_state = AdamState(state.lr, state.beta1, state.beta2, state.eps, t, new_m, new_v)
    return new_params, new_state


# -- finite-difference oracle -----------------------------------------------

LossFn = Callable[[np.ndarray], tuple[float, np.ndarray]]


def grad_check(network: Network, x: np.ndarray, loss: LossFn, h: np.ndarray | None = None,
               step: float = 1e-5, dtype=np.longdouble) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs on a copy of ``network`` cast to ``dtype``; the default extended
    precision keeps round-off in the differences well below their truncation
    error (where the platform's long double is just float64 this is float64).
    ``loss`` maps the network output to ``(value, d value / d output)``.
    Relative error per entry is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    net = network.astype(dtype)
    x = np.asarray(x, dtype=dtype)
    h = None if h is None else np.asarray(h, dtype=dtype)
    tape = GradientTape()
    out = net.forward(x, h, tape=tape)
    _, dout = loss(out)
    analytic = net.backward(tape, np.asarray(dout, dtype=dtype))

    worst = 0.0
    for name, p in net.params().items():
        flat = p.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up, _ = loss(net.forward(x, h))
            flat[i] = orig - step
            down, _ = loss(net.forward(x, h))
            flat[i] = orig
            numeric = (up - down) / (2 * flat.dtype.type(step))
            denom = max(abs(a_flat[i]), abs(numeric), 1e-8)
            worst = max(worst, float(abs(a_flat[i] - numeric) / denom))
    return worst
