"""Offline evaluation of snapshots in the train and mirror environments.

Each evaluation episode is a pure function of ``(snapshot, spec, seed)``.
The per-run seed is ``SeedSequence([base_seed, snapshot_episode,
variant_code, run_index])`` where ``variant_code`` is 0 for train and 1 for
mirror. Evaluation never touches a replay buffer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from oodrl import gridworld
from oodrl.models import Snapshot, predict

VARIANT_CODES = {"train": 0, "mirror": 1}
DEFAULT_RUNS = 30


@dataclass(frozen=True)
class StepRecord:
    x: int
    y: int
    action: int
    reward: float
    epistemic_var: float
    aleatoric_var: float | None = None


@dataclass
class EpisodeTrace:
    snapshot_episode: int
    variant: str
    run: int
    steps: list[StepRecord] = field(default_factory=list)
    outcome: str = "running"

    @property
    def length(self) -> int:
        return len(self.steps)

    @property
    def ret(self) -> float:
        return float(sum(s.reward for s in self.steps))


@dataclass(frozen=True)
class MetricsRow:
    snapshot_episode: int
    train_mean_epi: float
    mirror_mean_epi: float
    n_train: int
    n_mirror: int
    auroc: float
    separation: float


def run_seed(base_seed: int, snapshot_episode: int, variant: str, run_index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(base_seed), int(snapshot_episode), VARIANT_CODES[variant], int(run_index)])


def run_episode(snapshot: Snapshot, spec: gridworld.GridSpec, run_index: int, base_seed: int = 0) -> EpisodeTrace:
    """Greedy episode; the chosen action's uncertainty is logged before acting."""
    rng = np.random.default_rng(run_seed(base_seed, snapshot.episode, spec.variant, run_index))
    net = snapshot.net
    encode = gridworld.Encoder(spec)
    state = gridworld.reset(spec, rng)
    trace = EpisodeTrace(snapshot.episode, spec.variant, run_index)
    while not state.done:
        pred = predict(net, encode(state), rng)
        action = int(np.argmax(pred.mean_q))
        epi = float(pred.epistemic_var[action])
        alea = None if pred.aleatoric_var is None else float(pred.aleatoric_var[action])
        pos = state.agent_pos
        state, reward, _ = gridworld.step(state, spec, action)
        trace.steps.append(StepRecord(pos[0], pos[1], action, reward, epi, alea))
    trace.outcome = state.outcome
    return trace


def run_evaluation(snapshot: Snapshot, spec: gridworld.GridSpec, n_runs: int = DEFAULT_RUNS,
                   base_seed: int = 0) -> list[EpisodeTrace]:
    """``n_runs`` greedy episodes of ``snapshot`` in ``spec``; the snapshot hash is checked before and after."""
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    snapshot.verify()
    traces = [run_episode(snapshot, spec, i, base_seed) for i in range(n_runs)]
    snapshot.verify()
    return traces


def episode_mean_uncertainty(trace: EpisodeTrace) -> float:
    if not trace.steps:
        raise ValueError("empty trace")
    return math.fsum(s.epistemic_var for s in trace.steps) / len(trace.steps)


def auroc(ood_scores, id_scores) -> float:
    """P(random OOD score > random ID score), ties counted one half."""
    ood = np.asarray(ood_scores, dtype=float)
    ind = np.asarray(id_scores, dtype=float)
    if ood.size == 0 or ind.size == 0:
        raise ValueError("auroc needs nonempty score lists")
    ind_sorted = np.sort(ind)
    below = np.searchsorted(ind_sorted, ood, side="left")
    not_above = np.searchsorted(ind_sorted, ood, side="right")
    wins = below.sum() + 0.5 * (not_above - below).sum()
    return float(wins / (ood.size * ind.size))


def nearest_rank_quantile(values, q: float = 0.95) -> float:
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        raise ValueError("quantile of empty list")
    if not 0.0 < q <= 1.0:
        raise ValueError("q must be in (0, 1]")
    rank = max(1, math.ceil(q * v.size))
    return float(v[rank - 1])


def threshold_detect(score: float, threshold: float) -> str:
    if not math.isfinite(threshold):
        raise ValueError("threshold must be finite")
    return "out_of_distribution" if score > threshold else "in_distribution"


def detection_rate(scores, threshold: float) -> float:
    """Fraction of scores flagged out-of-distribution."""
    s = np.asarray(scores, dtype=float)
    return float(np.mean(s > threshold)) if s.size else float("nan")


def separation_ratio(mirror_mean: float, train_mean: float) -> float:
    if train_mean > 0:
        return mirror_mean / train_mean
    return math.inf if mirror_mean > 0 else math.nan


def aggregate(train_traces: list[EpisodeTrace], mirror_traces: list[EpisodeTrace]) -> MetricsRow:
    if not train_traces or not mirror_traces:
        raise ValueError("aggregate needs traces from both variants")
    eps = {t.snapshot_episode for t in train_traces + mirror_traces}
    if len(eps) != 1:
        raise ValueError("traces come from different snapshots")
    if {t.variant for t in train_traces} != {"train"} or {t.variant for t in mirror_traces} != {"mirror"}:
        raise ValueError("variant mismatch in traces")
    return aggregate_scores(eps.pop(), [episode_mean_uncertainty(t) for t in train_traces],
                            [episode_mean_uncertainty(t) for t in mirror_traces])


def aggregate_scores(snapshot_episode: int, train_means, mirror_means) -> MetricsRow:
    train_means = list(train_means)
    mirror_means = list(mirror_means)
    if not train_means or not mirror_means:
        raise ValueError("aggregate needs scores from both variants")
    tm = math.fsum(train_means) / len(train_means)
    mm = math.fsum(mirror_means) / len(mirror_means)
    return MetricsRow(snapshot_episode, tm, mm, len(train_means), len(mirror_means),
                      auroc(mirror_means, train_means), separation_ratio(mm, tm))


def evaluate_snapshot(snapshot: Snapshot, train_spec: gridworld.GridSpec, mirror_spec: gridworld.GridSpec,
                      n_runs: int = DEFAULT_RUNS, base_seed: int = 0):
    """Traces in both variants plus their :class:`MetricsRow`."""
    tr = run_evaluation(snapshot, train_spec, n_runs, base_seed)
    mi = run_evaluation(snapshot, mirror_spec, n_runs, base_seed)
    return tr, mi, aggregate(tr, mi)
