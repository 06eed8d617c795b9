"""Q-networks with uncertainty estimates: MCD, MCCD, BOOT, BOOTP.

MCD/MCCD emit ``(mu_a, log_var_a)`` per action (means first, then
log-variances) and get their epistemic spread from Monte-Carlo gate
sampling. BOOT/BOOTP share a two-layer trunk across ``K`` linear heads;
BOOTP adds ``beta`` times a frozen, randomly initialized prior network
(one per head) to every head output.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from oodrl import nn_core
from oodrl.nn_core import MLP, GateConfig

KINDS = ("MCD", "MCCD", "BOOT", "BOOTP")
DROPOUT_KINDS = ("MCD", "MCCD")
ENSEMBLE_KINDS = ("BOOT", "BOOTP")

SNAPSHOT_MAGIC = b"OODRLSNP"
SNAPSHOT_VERSION = 1


class CorruptSnapshot(ValueError):
    pass


@dataclass(frozen=True)
class ModelKind:
    tag: str = "BOOT"
    T: int = 10
    K: int = 10
    beta: float = 1.0
    keep_prob: float = 0.95
    hidden: int = 64
    temperature: float = 0.1
    init_drop_prob: float = 0.1
    weight_reg: float = 1e-6
    dropout_reg: float = 1e-5
    nll_beta: float = 1.0

    def __post_init__(self):
        tag = self.tag.upper()
        object.__setattr__(self, "tag", tag)
        if tag not in KINDS:
            raise ValueError(f"unknown model kind {self.tag!r}")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ValueError("keep_prob must be in (0, 1]")
        if not 0.0 < self.init_drop_prob < 1.0:
            raise ValueError("init_drop_prob must be in (0, 1)")
        if not 0.0 <= self.nll_beta <= 1.0:
            raise ValueError("nll_beta must be in [0, 1]")

    @property
    def is_ensemble(self) -> bool:
        return self.tag in ENSEMBLE_KINDS


@dataclass
class UncertainQ:
    mean_q: np.ndarray  # (A,)
    epistemic_var: np.ndarray  # (A,)
    aleatoric_var: np.ndarray | None = None  # (A,), dropout kinds only
    samples: np.ndarray = field(default=None, repr=False)  # (T, A) or (K, A)

    @property
    def epistemic_std(self) -> np.ndarray:
        return np.sqrt(self.epistemic_var)


def epistemic_variance(samples, axis: int = 0) -> np.ndarray:
    """Mean of squares minus square of mean over ``axis``.

    The samples are shifted by their mean before the moments are taken;
    the expression is shift invariant and this keeps cancellation error at
    the level of a two-pass variance.
    """
    y = np.asarray(samples, dtype=float)
    if y.shape[axis] == 0:
        raise ValueError("epistemic_variance needs at least one sample")
    shifted = y - y.mean(axis=axis, keepdims=True)
    m1 = shifted.mean(axis=axis)
    m2 = (shifted * shifted).mean(axis=axis)
    out = np.maximum(m2 - m1 * m1, 0.0)
    return out if out.ndim else float(out)


def prior_combine(head_out, prior_out, beta: float):
    if beta < 0:
        raise ValueError("beta must be >= 0")
    return head_out + beta * prior_out


class PriorEnsemble:
    """K frozen MLPs of identical topology evaluated in one batched pass."""

    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray]):
        self.weights = weights  # each (K, out, in)
        self.biases = biases  # each (K, out)
        for a in self.weights + self.biases:
            a.flags.writeable = False

    @classmethod
    def build(cls, rng: np.random.Generator, K: int, sizes: list[int]) -> "PriorEnsemble":
        nets = [nn_core.init_layers(rng, sizes) for _ in range(K)]
        ws = [np.stack([net[i].weights for net in nets]) for i in range(len(sizes) - 1)]
        bs = [np.stack([net[i].bias for net in nets]) for i in range(len(sizes) - 1)]
        return cls(ws, bs)

    @property
    def K(self) -> int:
        return self.weights[0].shape[0]

    def __call__(self, x) -> np.ndarray:
        """``(N, in)`` -> ``(N, K, out)``."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        h = np.broadcast_to(x, (self.K,) + x.shape)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.transpose(0, 2, 1) + b[:, None, :]
            if i < last:
                h = np.maximum(h, 0.0)
        return h.transpose(1, 0, 2)

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"prior.l{i}.W"] = w
            out[f"prior.l{i}.b"] = b
        return out


class QNet:
    """Trunk + output layer as one :class:`MLP`, plus an optional prior."""

    def __init__(self, kind: ModelKind, body: MLP, n_actions: int, prior: PriorEnsemble | None = None):
        self.kind = kind
        self.body = body
        self.n_actions = n_actions
        self.prior = prior
        expected = kind.K * n_actions if kind.is_ensemble else 2 * n_actions
        if body.out_dim != expected:
            raise nn_core.ShapeError(f"{kind.tag} needs {expected} outputs, body has {body.out_dim}")
        if (kind.tag == "BOOTP") != (prior is not None):
            raise ValueError("a prior network is required for BOOTP and only BOOTP")

    @classmethod
    def build(cls, kind: ModelKind, obs_dim: int, n_actions: int, seed) -> "QNet":
        """Fresh network; the prior draws from an independent child seed."""
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        body_ss, prior_ss = ss.spawn(2)
        rng = np.random.default_rng(body_ss)
        h = kind.hidden
        out = kind.K * n_actions if kind.is_ensemble else 2 * n_actions
        layers = nn_core.init_layers(rng, [obs_dim, h, h, out])
        if kind.tag == "MCD":
            gates = [GateConfig("fixed", keep_prob=kind.keep_prob) for _ in layers]
        elif kind.tag == "MCCD":
            ell = nn_core.logit(kind.init_drop_prob)
            gates = [GateConfig("concrete", drop_logit=ell, temperature=kind.temperature) for _ in layers]
        else:
            gates = None
        prior = None
        if kind.tag == "BOOTP":
            prior = PriorEnsemble.build(np.random.default_rng(prior_ss), kind.K, [obs_dim, h, h, n_actions])
        return cls(kind, MLP(layers, gates), n_actions, prior)

    @property
    def obs_dim(self) -> int:
        return self.body.in_dim

    def copy(self) -> "QNet":
        # The prior is immutable and shared between copies.
        return QNet(self.kind, self.body.copy(), self.n_actions, self.prior)

    def freeze(self) -> "QNet":
        """Read-only copy suitable for snapshots and target networks."""
        net = self.copy()
        net.body.set_readonly()
        return net

    def params(self) -> dict[str, np.ndarray]:
        out = dict(self.body.params())
        if self.prior is not None:
            out.update(self.prior.params())
        return out

    def trainable(self) -> dict[str, np.ndarray]:
        return self.body.params()

    # ------------------------------------------------------------ ensemble views

    def prior_values(self, obs) -> np.ndarray | None:
        return None if self.prior is None else self.prior(obs)

    def head_values(self, obs, prior_out=None) -> np.ndarray:
        """``(N, K, A)`` per-head Q-values, prior term included for BOOTP."""
        if not self.kind.is_ensemble:
            raise TypeError(f"{self.kind.tag} has no bootstrap heads")
        obs = np.atleast_2d(np.asarray(obs, dtype=float))
        q = self.body.forward(obs, "eval").output.reshape(len(obs), self.kind.K, self.n_actions)
        if self.prior is not None:
            if prior_out is None:
                prior_out = self.prior(obs)
            q = prior_combine(q, prior_out, self.kind.beta)
        return q

    # ------------------------------------------------------------ dropout views

    def mean_values(self, obs) -> np.ndarray:
        """Gate-free ``mu`` estimates ``(N, A)`` (dropout kinds)."""
        out = self.body.forward(np.atleast_2d(obs), "eval").output
        return out[:, : self.n_actions]

    def mc_samples(self, obs, rng: np.random.Generator, T: int | None = None):
        """``T`` gated passes per observation: returns ``mu, log_var`` of shape ``(T, N, A)``."""
        obs = np.atleast_2d(np.asarray(obs, dtype=float))
        T = self.kind.T if T is None else T
        n = len(obs)
        x = np.broadcast_to(obs, (T, n, obs.shape[1])).reshape(T * n, -1)
        out = self.body.forward(x, "train", rng).output.reshape(T, n, 2 * self.n_actions)
        return out[..., : self.n_actions], out[..., self.n_actions:]


def mc_predict(net: QNet, obs, rng: np.random.Generator, T: int | None = None) -> UncertainQ:
    """Monte-Carlo gated prediction for one observation."""
    if net.kind.tag not in DROPOUT_KINDS:
        raise TypeError(f"mc_predict requires a dropout model, got {net.kind.tag}")
    mu, log_var = net.mc_samples(obs, rng, T)
    mu, log_var = mu[:, 0, :], log_var[:, 0, :]
    alea = np.exp(np.clip(log_var, nn_core.LOG_VAR_MIN, nn_core.LOG_VAR_MAX)).mean(axis=0)
    return UncertainQ(mu.mean(axis=0), epistemic_variance(mu, axis=0), alea, mu)


def ensemble_predict(net: QNet, obs, prior_out=None) -> UncertainQ:
    """Deterministic pass over all heads for one observation."""
    if net.kind.tag not in ENSEMBLE_KINDS:
        raise TypeError(f"ensemble_predict requires a bootstrap model, got {net.kind.tag}")
    q = net.head_values(obs, prior_out)[0]
    return UncertainQ(q.mean(axis=0), epistemic_variance(q, axis=0), None, q)


def predict(net: QNet, obs, rng: np.random.Generator | None = None) -> UncertainQ:
    if net.kind.is_ensemble:
        return ensemble_predict(net, obs)
    return mc_predict(net, obs, rng)


# ---------------------------------------------------------------- snapshots


def _arch_header(net: QNet) -> dict:
    body = net.body
    return {
        "kind": asdict(net.kind),
        "n_actions": net.n_actions,
        "dims": [body.in_dim] + [l.out_dim for l in body.layers],
        "gates": [{"kind": g.kind, "keep_prob": g.keep_prob, "temperature": g.temperature} for g in body.gates],
    }


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _payload(arrays: dict[str, np.ndarray]) -> bytes:
    return b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays.values())


def content_hash(net: QNet) -> str:
    """SHA-256 over the architecture header and every parameter array."""
    h = hashlib.sha256(_canonical(_arch_header(net)))
    h.update(_payload(net.params()))
    return h.hexdigest()


def dumps(net: QNet, meta: dict | None = None) -> bytes:
    """Binary snapshot: magic, version, header length, JSON header, float64 payload."""
    arrays = net.params()
    header = _arch_header(net)
    header["format_version"] = SNAPSHOT_VERSION
    header["arrays"] = [{"name": k, "shape": list(a.shape)} for k, a in arrays.items()]
    header["content_hash"] = content_hash(net)
    header["meta"] = meta or {}
    hbytes = _canonical(header)
    return SNAPSHOT_MAGIC + struct.pack("<HI", SNAPSHOT_VERSION, len(hbytes)) + hbytes + _payload(arrays)


def loads(data: bytes) -> tuple[QNet, dict]:
    """Inverse of :func:`dumps`; verifies the content hash."""
    if not data.startswith(SNAPSHOT_MAGIC):
        raise CorruptSnapshot("bad magic")
    off = len(SNAPSHOT_MAGIC)
    version, hlen = struct.unpack_from("<HI", data, off)
    if version != SNAPSHOT_VERSION:
        raise CorruptSnapshot(f"unsupported snapshot version {version}")
    off += struct.calcsize("<HI")
    try:
        header = json.loads(data[off: off + hlen])
    except ValueError as exc:
        raise CorruptSnapshot("unreadable header") from exc
    off += hlen
    arrays = {}
    for spec in header["arrays"]:
        n = int(np.prod(spec["shape"], dtype=np.int64))
        chunk = data[off: off + 8 * n]
        if len(chunk) != 8 * n:
            raise CorruptSnapshot("truncated payload")
        arrays[spec["name"]] = np.frombuffer(chunk, dtype="<f8").astype(float).reshape(spec["shape"])
        off += 8 * n
    if off != len(data):
        raise CorruptSnapshot("trailing bytes after payload")

    kind = ModelKind(**header["kind"])
    dims = header["dims"]
    layers, gates = [], []
    for i, g in enumerate(header["gates"]):
        layers.append(nn_core.LayerParams(arrays[f"l{i}.W"], arrays[f"l{i}.b"]))
        logit = arrays.get(f"g{i}.logit", np.array(0.0))
        gates.append(GateConfig(g["kind"], g["keep_prob"], logit, g["temperature"]))
    if [layers[0].in_dim] + [l.out_dim for l in layers] != dims:
        raise CorruptSnapshot("parameter shapes disagree with header dims")
    prior = None
    if kind.tag == "BOOTP":
        n = len(layers)
        prior = PriorEnsemble([arrays[f"prior.l{i}.W"] for i in range(n)], [arrays[f"prior.l{i}.b"] for i in range(n)])
    net = QNet(kind, MLP(layers, gates), header["n_actions"], prior)
    if content_hash(net) != header["content_hash"]:
        raise CorruptSnapshot("content hash mismatch")
    return net, header["meta"]


@dataclass(frozen=True)
class Snapshot:
    episode: int
    net: QNet
    config_hash: str
    content_hash: str
    total_steps: int = 0

    @classmethod
    def capture(cls, net: QNet, episode: int, config_hash: str = "", total_steps: int = 0) -> "Snapshot":
        frozen = net.freeze()
        return cls(episode, frozen, config_hash, content_hash(frozen), total_steps)

    def verify(self) -> None:
        if content_hash(self.net) != self.content_hash:
            raise CorruptSnapshot(f"snapshot at episode {self.episode} fails its content hash")

    def to_bytes(self) -> bytes:
        meta = {"episode": self.episode, "config_hash": self.config_hash, "total_steps": self.total_steps}
        return dumps(self.net, meta)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Snapshot":
        net, meta = loads(data)
        return cls.capture(net, meta["episode"], meta.get("config_hash", ""), meta.get("total_steps", 0))
