"""Deep Q-learning for the uncertainty models.

Dropout kinds are trained with a Gaussian NLL on the chosen action's
``(mu, log_var)`` and explore epsilon-greedily on the MC mean. Bootstrap
kinds keep a Bernoulli visibility mask per transition, train each head on
its visible items with a squared TD error, and explore by following one
randomly drawn head per episode, by default with the same epsilon schedule
on top (``ensemble_epsilon``).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from oodrl import gridworld, nn_core
from oodrl.models import ModelKind, QNet, Snapshot, UncertainQ, mc_predict

log = logging.getLogger(__name__)

MAX_CONSECUTIVE_SKIPS = 100
TRAIN_SOURCE = "train"


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    episodes: int = 10000
    gamma: float = 0.99
    lr: float = 1e-3
    batch_size: int = 32
    replay_capacity: int = 10000
    warmup_transitions: int = 500
    target_sync_interval: int = 100
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_episodes: int = 2000
    snapshot_interval: int = 100
    mask_prob: float = 0.2
    # Without it the heads of an unprioritized ensemble can agree on a flat,
    # pessimistic value for far goals and loop forever (see README).
    ensemble_epsilon: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.episodes < 1:
            raise ValueError("episodes must be positive")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        for name in ("batch_size", "replay_capacity", "target_sync_interval", "snapshot_interval"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.warmup_transitions > self.replay_capacity:
            raise ValueError("warmup_transitions must not exceed replay_capacity")
        if not self.epsilon_start >= self.epsilon_end >= 0.0 or self.epsilon_start > 1.0:
            raise ValueError("need 1 >= epsilon_start >= epsilon_end >= 0")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ValueError("mask_prob must be in [0, 1]")

    def epsilon(self, episode: int) -> float:
        """Linear decay over ``epsilon_decay_episodes`` (0-based episode index)."""
        if self.epsilon_decay_episodes <= 0:
            return self.epsilon_end
        frac = min(1.0, episode / self.epsilon_decay_episodes)
        return self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)


# ---------------------------------------------------------------- replay


@dataclass
class ReplayItem:
    obs: np.ndarray
    action: int
    reward: float
    next_obs: np.ndarray
    done: bool
    mask: np.ndarray | None = None


@dataclass
class Batch:
    obs: np.ndarray  # (N, D)
    action: np.ndarray  # (N,)
    reward: np.ndarray  # (N,)
    next_obs: np.ndarray  # (N, D)
    done: np.ndarray  # (N,)
    mask: np.ndarray | None = None  # (N, K) bool
    prior: np.ndarray | None = None  # (N, K, A) cached prior outputs for obs
    next_prior: np.ndarray | None = None

    def __len__(self):
        return len(self.action)

    @classmethod
    def from_items(cls, items: list[ReplayItem]) -> "Batch":
        masks = [it.mask for it in items]
        if any(m is None for m in masks) and any(m is not None for m in masks):
            raise ValueError("batch mixes masked and unmasked items")
        return cls(
            np.stack([it.obs for it in items]).astype(float),
            np.array([it.action for it in items], dtype=np.int64),
            np.array([it.reward for it in items], dtype=float),
            np.stack([it.next_obs for it in items]).astype(float),
            np.array([it.done for it in items], dtype=bool),
            None if masks[0] is None else np.stack(masks).astype(bool),
        )


class ReplayBuffer:
    """Fixed-capacity ring buffer; the oldest transition is evicted first.

    Every stored item carries a provenance tag; only ``"train"`` is accepted.
    """

    def __init__(self, capacity: int, obs_dim: int, K: int | None = None, n_actions: int | None = None,
                 cache_prior: bool = False):
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.next_obs = np.zeros((capacity, obs_dim))
        self.action = np.zeros(capacity, dtype=np.int64)
        self.reward = np.zeros(capacity)
        self.done = np.zeros(capacity, dtype=bool)
        self.mask = None if K is None else np.zeros((capacity, K), dtype=bool)
        self.prior = self.next_prior = None
        if cache_prior:
            self.prior = np.zeros((capacity, K, n_actions))
            self.next_prior = np.zeros((capacity, K, n_actions))
        self.source = np.empty(capacity, dtype=object)
        self.size = 0
        self._next = 0
        self.total_added = 0

    def __len__(self):
        return self.size

    def add(self, item: ReplayItem, source: str = TRAIN_SOURCE, prior=None, next_prior=None) -> None:
        if source != TRAIN_SOURCE:
            raise ValueError(f"replay only accepts transitions from the train environment, got {source!r}")
        if (item.mask is None) != (self.mask is None):
            raise ValueError("mask must be present exactly for bootstrap models")
        i = self._next
        self.obs[i] = item.obs
        self.next_obs[i] = item.next_obs
        self.action[i] = item.action
        self.reward[i] = item.reward
        self.done[i] = item.done
        if self.mask is not None:
            self.mask[i] = item.mask
        if self.prior is not None:
            self.prior[i] = prior
            self.next_prior[i] = next_prior
        self.source[i] = source
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.total_added += 1

    def sample(self, n: int, rng: np.random.Generator) -> Batch:
        idx = rng.integers(self.size, size=n)
        return Batch(
            self.obs[idx], self.action[idx], self.reward[idx], self.next_obs[idx], self.done[idx],
            None if self.mask is None else self.mask[idx],
            None if self.prior is None else self.prior[idx],
            None if self.next_prior is None else self.next_prior[idx],
        )


# ---------------------------------------------------------------- small ops


def sample_bootstrap_mask(K: int, p: float, rng: np.random.Generator) -> np.ndarray:
    """K independent Bernoulli(p) visibility flags; all-false is allowed."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must be in [0, 1]")
    return rng.random(K) < p


def select_action(pred: UncertainQ | np.ndarray, policy=("greedy",), rng: np.random.Generator | None = None) -> int:
    """Pick an action; ties go to the lowest index.

    ``policy`` is ``("greedy",)``, ``("eps_greedy", eps)`` or
    ``("active_head", k)``. ``pred`` may also be a plain Q-value vector.
    """
    name = policy[0]
    if name == "active_head":
        k = policy[1]
        heads = pred.samples if isinstance(pred, UncertainQ) else np.asarray(pred)
        if not 0 <= k < len(heads):
            raise ValueError(f"head index {k} out of range")
        return int(np.argmax(heads[k]))
    q = pred.mean_q if isinstance(pred, UncertainQ) else np.asarray(pred)
    if name == "greedy":
        return int(np.argmax(q))
    if name == "eps_greedy":
        eps = policy[1]
        if not 0.0 <= eps <= 1.0:
            raise ValueError("epsilon must be in [0, 1]")
        if rng.random() < eps:
            return int(rng.integers(len(q)))
        return int(np.argmax(q))
    raise ValueError(f"unknown policy {name!r}")


def td_target(reward, next_values, done, gamma: float):
    """``reward + gamma * max_a next_values`` (zero bootstrap when done).

    ``next_values`` is ``(..., A)``; a leading head axis yields one target per head.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must be in [0, 1]")
    nxt = np.max(np.asarray(next_values, dtype=float), axis=-1)
    reward = np.asarray(reward, dtype=float)
    not_done = 1.0 - np.asarray(done, dtype=float)
    if nxt.ndim > reward.ndim:
        reward = reward[..., None]
        not_done = not_done[..., None]
    out = reward + gamma * not_done * nxt
    return out if out.ndim else float(out)


# ---------------------------------------------------------------- losses


def batch_targets(target_net: QNet, batch: Batch, gamma: float) -> np.ndarray:
    """TD targets from the target network: ``(N,)`` or ``(N, K)`` for ensembles."""
    if target_net.kind.is_ensemble:
        nxt = target_net.head_values(batch.next_obs, batch.next_prior)  # (N, K, A)
    else:
        nxt = target_net.mean_values(batch.next_obs)  # (N, A)
    return td_target(batch.reward, nxt, batch.done, gamma)


def nll_weights(log_var, beta: float) -> np.ndarray:
    """Per-item weights ``sigma^(2*beta)``, held constant when differentiating."""
    lv = np.clip(log_var, nn_core.LOG_VAR_MIN, nn_core.LOG_VAR_MAX)
    return np.exp(beta * lv)


def loss_and_grads(net: QNet, batch: Batch, targets: np.ndarray, rng: np.random.Generator | None = None,
                   noise: list | None = None, weights: np.ndarray | None = None):
    """Full per-architecture loss and its exact gradients.

    Returns ``(loss, grads, record)``; pass ``record.noise`` back as
    ``noise`` to evaluate the loss with the same gate samples.

    Dropout kinds minimize ``mean(w * gaussian_nll)`` with per-item weights
    ``w = sigma^(2*nll_beta)`` treated as constants (``nll_beta = 0`` is the
    plain NLL). ``weights`` overrides ``w``, which makes the loss an
    ordinary function of the parameters for gradient checks.
    """
    kind = net.kind
    n = len(batch)
    rows = np.arange(n)
    A = net.n_actions
    if kind.is_ensemble:
        rec = net.body.forward(batch.obs, "eval")
        q = rec.output.reshape(n, kind.K, A)
        if net.prior is not None:
            prior = batch.prior if batch.prior is not None else net.prior(batch.obs)
            q = q + kind.beta * prior
        chosen = q[rows, :, batch.action]  # (N, K)
        mask = np.ones((n, kind.K), dtype=bool) if batch.mask is None else batch.mask
        resid = (chosen - targets) * mask
        loss = 0.5 * float(np.sum(resid * resid)) / n
        g = np.zeros((n, kind.K, A))
        g[rows, :, batch.action] = resid / n
        grads = net.body.backward(rec, g.reshape(n, kind.K * A))
        return loss, grads, rec

    mode = "train" if net.body.stochastic else "eval"
    rec = net.body.forward(batch.obs, mode, rng, noise=noise)
    mu = rec.output[rows, batch.action]
    log_var = rec.output[rows, A + batch.action]
    w = nll_weights(log_var, kind.nll_beta) if weights is None else np.asarray(weights, dtype=float)
    per_item = nn_core.gaussian_nll(mu, log_var, targets)
    loss = float(np.mean(w * per_item))
    d_mu, d_lv = nn_core.gaussian_nll_grads(mu, log_var, targets)
    g = np.zeros_like(rec.output)
    g[rows, batch.action] = w * d_mu / n
    g[rows, A + batch.action] = w * d_lv / n
    grads = net.body.backward(rec, g)
    if kind.tag == "MCCD":
        reg, reg_grads = nn_core.concrete_regularizer(net.body, kind.weight_reg, kind.dropout_reg)
        loss += reg
        for k, v in reg_grads.items():
            grads[k] += v
    return loss, grads, rec


TRUNK_PARAMS = ("l0.W", "l0.b", "l1.W", "l1.b")


@dataclass
class StepResult:
    loss: float
    skipped: bool = False


def train_batch(net: QNet, target_net: QNet, batch: Batch | list, opt: nn_core.OptState,
                rng: np.random.Generator | None = None, gamma: float = 0.99,
                hyper: nn_core.AdamConfig = nn_core.AdamConfig()) -> StepResult:
    """One gradient step on ``batch``; non-finite losses or gradients skip the step."""
    if not isinstance(batch, Batch):
        batch = Batch.from_items(list(batch))
    if len(batch) == 0:
        raise ValueError("empty batch")
    targets = batch_targets(target_net, batch, gamma)
    loss, grads, _ = loss_and_grads(net, batch, targets, rng)
    if not math.isfinite(loss):
        log.warning("non-finite loss, step skipped")
        return StepResult(loss, True)
    if net.kind.is_ensemble:
        for k in TRUNK_PARAMS:
            grads[k] /= net.kind.K
    try:
        nn_core.adam_step(net.trainable(), grads, opt, hyper)
    except nn_core.NonFiniteError:
        log.warning("non-finite gradient, step skipped")
        return StepResult(loss, True)
    net.body.version += 1
    return StepResult(loss)


# ---------------------------------------------------------------- training loop


@dataclass
class EpisodeLog:
    episode: int
    ret: float
    length: int
    epsilon: float
    mean_loss: float


@dataclass
class TrainResult:
    snapshots: list[Snapshot]
    log: list[EpisodeLog]
    net: QNet
    replay: ReplayBuffer
    total_steps: int = 0
    skipped_steps: int = 0
    drop_prob_history: list = field(default_factory=list)


def expected_snapshot_episodes(episodes: int, interval: int) -> list[int]:
    eps = list(range(interval, episodes + 1, interval))
    if not eps or eps[-1] != episodes:
        eps.append(episodes)
    return eps


def train(config: TrainConfig, kind: ModelKind, spec: gridworld.GridSpec, config_hash: str = "",
          on_snapshot: Callable[[Snapshot], None] | None = None,
          on_episode: Callable[[EpisodeLog], None] | None = None) -> TrainResult:
    """Run ``config.episodes`` episodes in ``spec`` (must be the train variant).

    Snapshots are taken after every ``snapshot_interval``-th episode and
    after the last one; ``Snapshot.episode`` is the 1-based episode count.
    """
    if spec.variant != "train":
        raise ValueError("training only runs in the train environment")
    ss = np.random.SeedSequence(config.seed)
    init_ss, env_ss, act_ss, mask_ss, batch_ss = ss.spawn(5)
    env_rng = np.random.default_rng(env_ss)
    act_rng = np.random.default_rng(act_ss)
    mask_rng = np.random.default_rng(mask_ss)
    batch_rng = np.random.default_rng(batch_ss)

    A = gridworld.N_ACTIONS
    net = QNet.build(kind, spec.obs_dim, A, init_ss)
    target = net.freeze()
    opt = nn_core.OptState(net.trainable())
    hyper = nn_core.AdamConfig(lr=config.lr)
    ensemble = kind.is_ensemble
    bootp = kind.tag == "BOOTP"
    replay = ReplayBuffer(config.replay_capacity, spec.obs_dim, kind.K if ensemble else None, A, cache_prior=bootp)
    encode = gridworld.Encoder(spec)

    snap_eps = set(expected_snapshot_episodes(config.episodes, config.snapshot_interval))
    snapshots, logs, drop_hist = [], [], []
    total_steps = 0
    skipped = consecutive_skips = 0

    for ep in range(config.episodes):
        state = gridworld.reset(spec, env_rng)
        obs = encode(state)
        prior_obs = net.prior_values(obs)[0] if bootp else None
        eps = config.epsilon(ep) if not ensemble or config.ensemble_epsilon else 0.0
        head = int(act_rng.integers(kind.K)) if ensemble else None
        ret, losses = 0.0, []
        while True:
            if ensemble:
                q = net.head_values(obs, None if prior_obs is None else prior_obs[None])[0]
                if config.ensemble_epsilon:
                    action = select_action(q[head], ("eps_greedy", eps), act_rng)
                else:
                    action = select_action(q, ("active_head", head))
            else:
                action = select_action(mc_predict(net, obs, act_rng), ("eps_greedy", eps), act_rng)
            state, reward, done = gridworld.step(state, spec, action)
            next_obs = encode(state)
            prior_next = net.prior_values(next_obs)[0] if bootp else None
            mask = sample_bootstrap_mask(kind.K, config.mask_prob, mask_rng) if ensemble else None
            # Timeouts are not terminal for bootstrapping; only reaching the goal is.
            terminal = state.outcome == "goal"
            replay.add(ReplayItem(obs, action, reward, next_obs, terminal, mask), TRAIN_SOURCE, prior_obs, prior_next)
            ret += reward
            total_steps += 1

            if len(replay) >= config.warmup_transitions:
                batch = replay.sample(config.batch_size, batch_rng)
                res = train_batch(net, target, batch, opt, batch_rng, config.gamma, hyper)
                if res.skipped:
                    skipped += 1
                    consecutive_skips += 1
                    if consecutive_skips > MAX_CONSECUTIVE_SKIPS:
                        raise TrainingDiverged(f"{consecutive_skips} consecutive non-finite steps at episode {ep + 1}")
                else:
                    consecutive_skips = 0
                    losses.append(res.loss)
            if total_steps % config.target_sync_interval == 0:
                target = net.freeze()

            obs, prior_obs = next_obs, prior_next
            if done:
                break

        row = EpisodeLog(ep + 1, ret, state.steps_taken, eps, float(np.mean(losses)) if losses else float("nan"))
        logs.append(row)
        if on_episode is not None:
            on_episode(row)
        if kind.tag == "MCCD":
            drop_hist.append([g.drop_prob for g in net.body.gates])
        if ep + 1 in snap_eps:
            snap = Snapshot.capture(net, ep + 1, config_hash, total_steps)
            snapshots.append(snap)
            if on_snapshot is not None:
                on_snapshot(snap)
            log.debug("snapshot at episode %d (%d steps)", ep + 1, total_steps)

    return TrainResult(snapshots, logs, net, replay, total_steps, skipped, drop_hist)
