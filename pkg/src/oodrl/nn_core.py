"""Dense-network numerics: forward/backward, stochastic gates, losses, Adam.

Everything works on row batches ``(N, features)``. A network is a list of
:class:`LayerParams` with one :class:`GateConfig` per weight layer; the gate
is applied to the layer's *input*. Hidden layers use ReLU, the last layer is
linear.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class ShapeError(ValueError):
    pass


class StaleRecordError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def logit(p: float) -> float:
    return math.log(p) - math.log1p(-p)


@dataclass
class LayerParams:
    weights: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def copy(self) -> "LayerParams":
        return LayerParams(self.weights.copy(), self.bias.copy())


@dataclass
class GateConfig:
    """Gate in front of a weight layer.

    ``keep_prob`` is the probability a unit stays active (fixed kind);
    ``drop_logit`` parameterizes the learned *drop* probability
    ``sigmoid(drop_logit)`` (concrete kind). The two are never mixed.
    """

    kind: str = "none"  # none | fixed | concrete
    keep_prob: float = 1.0
    drop_logit: np.ndarray = field(default_factory=lambda: np.array(0.0))
    temperature: float = 0.1

    def __post_init__(self):
        if self.kind not in ("none", "fixed", "concrete"):
            raise ValueError(f"unknown gate kind {self.kind!r}")
        if self.kind == "fixed" and not 0.0 < self.keep_prob <= 1.0:
            raise ValueError(f"keep_prob must be in (0, 1], got {self.keep_prob}")
        if self.kind == "concrete" and not self.temperature > 0.0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        self.drop_logit = np.array(float(self.drop_logit))

    @property
    def drop_prob(self) -> float:
        return float(sigmoid(self.drop_logit))

    @property
    def stochastic(self) -> bool:
        return self.kind == "concrete" or (self.kind == "fixed" and self.keep_prob < 1.0)

    def copy(self) -> "GateConfig":
        return GateConfig(self.kind, self.keep_prob, self.drop_logit.copy(), self.temperature)


def he_normal(rng: np.random.Generator, out_dim: int, in_dim: int) -> LayerParams:
    w = rng.standard_normal((out_dim, in_dim)) * math.sqrt(2.0 / in_dim)
    return LayerParams(w, np.zeros(out_dim))


def lecun_normal(rng: np.random.Generator, out_dim: int, in_dim: int) -> LayerParams:
    w = rng.standard_normal((out_dim, in_dim)) * math.sqrt(1.0 / in_dim)
    return LayerParams(w, np.zeros(out_dim))


def init_layers(rng: np.random.Generator, sizes: list[int]) -> list[LayerParams]:
    """ReLU-scaled init for hidden layers, fan-in scaled for the linear output."""
    layers = []
    for i, (d_in, d_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        layers.append((lecun_normal if last else he_normal)(rng, d_out, d_in))
    return layers


# ---------------------------------------------------------------- gates


def dropout_mask(shape, keep_prob: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout multiplier: ``1/keep_prob`` with prob ``keep_prob``, else 0."""
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError(f"keep_prob must be in (0, 1], got {keep_prob}")
    if keep_prob == 1.0:
        return np.ones(shape)
    return (rng.random(shape) < keep_prob) / keep_prob


def dropout_apply(activations, keep_prob: float, rng: np.random.Generator) -> np.ndarray:
    a = np.asarray(activations, dtype=float)
    return a * dropout_mask(a.shape, keep_prob, rng)


def uniform_open(shape, rng: np.random.Generator) -> np.ndarray:
    """Uniform draws strictly inside (0, 1)."""
    u = rng.random(shape)
    tiny = np.finfo(float).tiny
    return np.clip(u, tiny, 1.0 - 2.0**-53)


def concrete_relaxed_drop(drop_logit, temperature: float, u) -> np.ndarray:
    """Relaxed Bernoulli drop indicator for noise ``u`` in (0, 1).

    ``log p - log(1 - p)`` is exactly the drop logit, so it is used directly.
    """
    if not temperature > 0.0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    u = np.asarray(u, dtype=float)
    return sigmoid((float(drop_logit) + np.log(u) - np.log1p(-u)) / temperature)


def concrete_gate(drop_logit, temperature: float, rng: np.random.Generator, shape=()) -> np.ndarray:
    """Retain factor ``(1 - z)/(1 - p)`` per unit for a concrete dropout gate."""
    u = uniform_open(shape, rng)
    z = concrete_relaxed_drop(drop_logit, temperature, u)
    return (1.0 - z) / (1.0 - float(sigmoid(drop_logit)))


# ---------------------------------------------------------------- MLP


@dataclass
class ActivationRecord:
    inputs: list  # pre-gate input of each layer
    gated: list  # post-gate input of each layer
    pre: list  # pre-activation of each layer
    factors: list  # gate multiplier per layer (None when ungated)
    noise: list  # sampled gate noise (mask for fixed, u for concrete)
    relaxed: list  # concrete relaxed drop values z
    output: np.ndarray
    owner: int
    version: int


class ParamDict(dict):
    """Named array views into one contiguous vector, available as ``.flat``."""

    flat: np.ndarray


def _bind(flat: np.ndarray, layout: list) -> ParamDict:
    views = ParamDict()
    off = 0
    for name, shape in layout:
        n = int(np.prod(shape, dtype=int))
        views[name] = flat[off: off + n].reshape(shape)
        off += n
    views.flat = flat
    return views


class MLP:
    """ReLU multilayer perceptron with a gate in front of each weight layer.

    All trainable values (weights, biases, concrete drop logits) live in one
    contiguous vector ``flat``; layers and gates hold views into it.
    """

    def __init__(self, layers: list[LayerParams], gates: list[GateConfig] | None = None):
        if gates is None:
            gates = [GateConfig() for _ in layers]
        if len(gates) != len(layers):
            raise ShapeError("one gate per weight layer required")
        for a, b in zip(layers[:-1], layers[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")
        self.layers = layers
        self.gates = gates
        self.version = 0
        self.layout = []
        sources = []
        for i, (layer, gate) in enumerate(zip(layers, gates)):
            if layer.bias.shape != (layer.out_dim,):
                raise ShapeError(f"layer {i} bias has shape {layer.bias.shape}")
            self.layout += [(f"l{i}.W", layer.weights.shape), (f"l{i}.b", layer.bias.shape)]
            sources += [layer.weights, layer.bias]
            if gate.kind == "concrete":
                self.layout.append((f"g{i}.logit", ()))
                sources.append(gate.drop_logit)
        self.flat = np.concatenate([np.asarray(s, dtype=float).ravel() for s in sources])
        self._params = _bind(self.flat, self.layout)
        for i, (layer, gate) in enumerate(zip(layers, gates)):
            layer.weights = self._params[f"l{i}.W"]
            layer.bias = self._params[f"l{i}.b"]
            if gate.kind == "concrete":
                gate.drop_logit = self._params[f"g{i}.logit"]
        if not np.all(np.isfinite(self.flat)):
            raise NonFiniteError("network parameters contain non-finite entries")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def stochastic(self) -> bool:
        return any(g.stochastic for g in self.gates)

    def params(self) -> ParamDict:
        return self._params

    def copy(self) -> "MLP":
        return MLP([l.copy() for l in self.layers], [g.copy() for g in self.gates])

    def set_readonly(self) -> None:
        self.flat.flags.writeable = False
        for v in self._params.values():
            v.flags.writeable = False

    def forward(self, x, mode: str = "train", rng: np.random.Generator | None = None,
                noise: list | None = None) -> ActivationRecord:
        """Run a batch through the net.

        In ``train`` mode stochastic gates are sampled (or taken from
        ``noise``, e.g. a previous record's ``noise`` to freeze them). In
        ``eval`` mode gates are pass-through.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        h = np.asarray(x, dtype=float)
        if h.ndim == 1:
            h = h[None, :]
        if h.shape[1] != self.in_dim:
            raise ShapeError(f"input has {h.shape[1]} features, network expects {self.in_dim}")
        gated_mode = mode == "train"
        if gated_mode and noise is None and rng is None and self.stochastic:
            raise ValueError("train mode with stochastic gates needs an rng")

        inputs, gated, pre, factors, noises, relaxed = [], [], [], [], [], []
        last = len(self.layers) - 1
        for i, (layer, gate) in enumerate(zip(self.layers, self.gates)):
            inputs.append(h)
            factor = eps = z = None
            if gated_mode and gate.stochastic:
                if gate.kind == "fixed":
                    eps = noise[i] if noise is not None else dropout_mask(h.shape, gate.keep_prob, rng)
                    factor = eps
                else:
                    eps = noise[i] if noise is not None else uniform_open(h.shape, rng)
                    z = concrete_relaxed_drop(gate.drop_logit, gate.temperature, eps)
                    factor = (1.0 - z) / (1.0 - gate.drop_prob)
                h = h * factor
            factors.append(factor)
            noises.append(eps)
            relaxed.append(z)
            gated.append(h)
            a = h @ layer.weights.T
            a += layer.bias
            pre.append(a)
            h = np.maximum(a, 0.0) if i < last else a
        return ActivationRecord(inputs, gated, pre, factors, noises, relaxed, h, id(self), self.version)

    def __call__(self, x, mode="eval", rng=None) -> np.ndarray:
        return self.forward(x, mode, rng).output

    def backward(self, record: ActivationRecord, grad_out) -> ParamDict:
        """Exact reverse-mode gradients for the record's forward pass."""
        if record.owner != id(self) or record.version != self.version:
            raise StaleRecordError("activation record does not belong to the current parameters")
        g = np.asarray(grad_out, dtype=float)
        if g.shape != record.output.shape:
            raise ShapeError(f"output gradient shape {g.shape} != output shape {record.output.shape}")
        grads = _bind(np.zeros_like(self.flat), self.layout)
        for i in range(len(self.layers) - 1, -1, -1):
            layer, gate = self.layers[i], self.gates[i]
            if i < len(self.layers) - 1:
                g = g * (record.pre[i] > 0.0)
            np.matmul(g.T, record.gated[i], out=grads[f"l{i}.W"])
            np.sum(g, axis=0, out=grads[f"l{i}.b"])
            if i == 0 and gate.kind != "concrete":
                break
            d_gated = g @ layer.weights
            factor = record.factors[i]
            if gate.kind == "concrete" and factor is not None:
                z = record.relaxed[i]
                p = gate.drop_prob
                dfactor = -z * (1.0 - z) / (gate.temperature * (1.0 - p)) + (1.0 - z) * p / (1.0 - p)
                grads[f"g{i}.logit"][...] = np.sum(d_gated * record.inputs[i] * dfactor)
            g = d_gated * factor if factor is not None else d_gated
        return grads

    def zero_grads(self) -> ParamDict:
        return _bind(np.zeros_like(self.flat), self.layout)


def concrete_regularizer(net: MLP, weight_reg: float, dropout_reg: float):
    """Concrete-dropout penalty summed over concrete gates, with its gradients.

    Per gated layer: ``weight_reg*||W||^2/(1-p) + dropout_reg*d_in*(p log p + (1-p) log(1-p))``.
    """
    total = 0.0
    grads = {}
    for i, (layer, gate) in enumerate(zip(net.layers, net.gates)):
        if gate.kind != "concrete":
            continue
        p = gate.drop_prob
        ell = float(gate.drop_logit)
        d_in = layer.in_dim
        sq = float(np.sum(layer.weights**2))
        entropy_term = p * math.log(p) + (1.0 - p) * math.log1p(-p)
        total += weight_reg * sq / (1.0 - p) + dropout_reg * d_in * entropy_term
        grads[f"l{i}.W"] = 2.0 * weight_reg * layer.weights / (1.0 - p)
        grads[f"g{i}.logit"] = np.array(weight_reg * sq * p / (1.0 - p) + dropout_reg * d_in * ell * p * (1.0 - p))
    return total, grads


# ---------------------------------------------------------------- losses


def gaussian_nll(mean, log_var, target):
    """Elementwise Gaussian negative log-likelihood with clamped log-variance."""
    mean, log_var, target = (np.asarray(v, dtype=float) for v in (mean, log_var, target))
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(log_var)) and np.all(np.isfinite(target))):
        raise NonFiniteError("gaussian_nll received non-finite input")
    lv = np.clip(log_var, LOG_VAR_MIN, LOG_VAR_MAX)
    out = 0.5 * lv + 0.5 * (target - mean) ** 2 * np.exp(-lv) + HALF_LOG_2PI
    return out if out.ndim else float(out)


def gaussian_nll_grads(mean, log_var, target):
    """Partial derivatives of :func:`gaussian_nll` wrt ``mean`` and ``log_var``."""
    mean, log_var, target = (np.asarray(v, dtype=float) for v in (mean, log_var, target))
    lv = np.clip(log_var, LOG_VAR_MIN, LOG_VAR_MAX)
    inv_var = np.exp(-lv)
    resid = target - mean
    d_mean = -resid * inv_var
    inside = (log_var >= LOG_VAR_MIN) & (log_var <= LOG_VAR_MAX)
    d_log_var = (0.5 - 0.5 * resid**2 * inv_var) * inside
    return d_mean, d_log_var


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@numba.njit(cache=True, error_model="numpy")
def _adam_kernel(p, g, m, v, lr, b1, b2, eps, c1, c2):
    for i in range(g.size):
        if not np.isfinite(g[i]):
            return False
    step = lr / c1
    inv_c2 = 1.0 / c2
    for i in range(g.size):
        gi = g[i]
        m[i] = b1 * m[i] + (1.0 - b1) * gi
        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi
        p[i] -= step * m[i] / (math.sqrt(v[i] * inv_c2) + eps)
    return True


class OptState:
    """Adam moments as flat vectors; ``m``/``v`` expose per-parameter views."""

    def __init__(self, params: dict[str, np.ndarray]):
        self.layout = [(k, np.shape(a)) for k, a in params.items()]
        self.keys = [k for k, _ in self.layout]
        n = sum(int(np.prod(s, dtype=int)) for _, s in self.layout)
        self.m_flat = np.zeros(n)
        self.v_flat = np.zeros(n)
        self.m = _bind(self.m_flat, self.layout)
        self.v = _bind(self.v_flat, self.layout)
        self.step = 0

    def flatten(self, arrays: dict[str, np.ndarray], missing_ok: bool = False) -> np.ndarray:
        if isinstance(arrays, ParamDict) and list(arrays) == self.keys:
            return arrays.flat
        parts = []
        for k, shape in self.layout:
            a = arrays.get(k)
            if a is None:
                if not missing_ok:
                    raise KeyError(f"missing parameter {k}")
                a = np.zeros(shape)
            elif np.shape(a) != shape:
                raise ShapeError(f"{k} has shape {np.shape(a)}, expected {shape}")
            parts.append(np.asarray(a, dtype=float).ravel())
        return np.concatenate(parts)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptState,
              hyper: AdamConfig = AdamConfig()) -> None:
    """Bias-corrected Adam update, applied in place.

    Parameters missing from ``grads`` get a zero gradient. Raises
    :class:`NonFiniteError` (leaving params and state untouched) if any
    gradient entry is non-finite.
    """
    for k in grads:
        if k not in params:
            raise KeyError(f"gradient for unknown parameter {k}")
    if list(params) != state.keys:
        raise ShapeError("parameter set does not match optimizer state")
    g = state.flatten(grads, missing_ok=True)
    fast = isinstance(params, ParamDict) and params.flat.size == g.size
    p = params.flat if fast else state.flatten(params)
    c1 = 1.0 - hyper.beta1 ** (state.step + 1)
    c2 = 1.0 - hyper.beta2 ** (state.step + 1)
    if not _adam_kernel(p, g, state.m_flat, state.v_flat, hyper.lr, hyper.beta1, hyper.beta2, hyper.eps, c1, c2):
        bad = [k for k, a in grads.items() if not np.all(np.isfinite(a))]
        raise NonFiniteError(f"non-finite gradient for {', '.join(bad)}")
    state.step += 1
    if not fast:
        off = 0
        for k, shape in state.layout:
            n = int(np.prod(shape, dtype=int))
            params[k][...] = p[off: off + n].reshape(shape)
            off += n
