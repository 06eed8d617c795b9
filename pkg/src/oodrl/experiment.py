"""Run-directory orchestration: training, evaluation, plots, manifest.

Layout of a run directory::

    config.ini          validated config (runtime-only keys omitted)
    train_log.csv       episode,return,length,epsilon,mean_loss
    drop_probs.csv      MCCD only: episode,p0,p1,p2 (learned drop probabilities)
    snapshots/snap_<episode>.bin
    traces.csv          one row per evaluation step
    metrics.csv         one row per snapshot
    uncertainty.svg
    manifest.json       config hash, seed, sha256 of every artifact, status
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from oodrl import evaluation, plotting
from oodrl.agent import EpisodeLog, train
from oodrl.config import ExperimentConfig, load_config, serialize
from oodrl.evaluation import MetricsRow
from oodrl.models import Snapshot

log = logging.getLogger(__name__)

CONFIG_FILE = "config.ini"
LOG_FILE = "train_log.csv"
DROP_FILE = "drop_probs.csv"
SNAPSHOT_DIR = "snapshots"
TRACES_FILE = "traces.csv"
METRICS_FILE = "metrics.csv"
PLOT_FILE = "uncertainty.svg"
MANIFEST_FILE = "manifest.json"

LOG_HEADER = ["episode", "return", "length", "epsilon", "mean_loss"]
TRACE_HEADER = ["snapshot_episode", "variant", "run", "step", "x", "y", "action", "reward",
                "epistemic_var", "aleatoric_var"]
METRICS_HEADER = ["snapshot_episode", "train_mean_epi", "mirror_mean_epi", "separation", "auroc"]


def fmt(value) -> str:
    """Shortest round-trip text for numbers; empty for ``None``."""
    if value is None:
        return ""
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return repr(value)
    return str(value)


def _writer(fh):
    return csv.writer(fh, lineterminator="\n")


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def snapshot_path(out: Path, episode: int) -> Path:
    return Path(out) / SNAPSHOT_DIR / f"snap_{episode}.bin"


# ---------------------------------------------------------------- CSV io


def write_traces(path: Path, traces) -> None:
    with open(path, "w", newline="") as fh:
        w = _writer(fh)
        w.writerow(TRACE_HEADER)
        for t in traces:
            for i, s in enumerate(t.steps):
                w.writerow([t.snapshot_episode, t.variant, t.run, i, s.x, s.y, s.action, fmt(float(s.reward)),
                            fmt(s.epistemic_var), fmt(s.aleatoric_var)])


def write_metrics(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = _writer(fh)
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow([r.snapshot_episode, fmt(r.train_mean_epi), fmt(r.mirror_mean_epi), fmt(r.separation),
                        fmt(r.auroc)])


def read_metrics(path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected metrics header {reader.fieldnames}")
        return [MetricsRow(int(r["snapshot_episode"]), float(r["train_mean_epi"]), float(r["mirror_mean_epi"]),
                           0, 0, float(r["auroc"]), float(r["separation"])) for r in reader]


def read_drop_probs(path) -> list[list[float]]:
    with open(path, newline="") as fh:
        return [[float(v) for v in row[1:]] for row in list(csv.reader(fh))[1:]]


def read_train_log(path) -> list[EpisodeLog]:
    with open(path, newline="") as fh:
        return [EpisodeLog(int(r["episode"]), float(r["return"]), int(r["length"]), float(r["epsilon"]),
                           float(r["mean_loss"])) for r in csv.DictReader(fh)]


# ---------------------------------------------------------------- manifest


def write_manifest(out: Path, cfg: ExperimentConfig, status: str, error: str | None = None) -> dict:
    out = Path(out)
    artifacts = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != MANIFEST_FILE:
            artifacts[p.relative_to(out).as_posix()] = sha256_file(p)
    manifest = {
        "status": status,
        "error": error,
        "model": cfg.experiment.model,
        "seed": cfg.experiment.seed,
        "config_hash": cfg.config_hash(),
        "artifacts": artifacts,
    }
    (out / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def verify_run(out: Path) -> list[str]:
    """Artifacts whose hash disagrees with (or is missing from) the manifest."""
    out = Path(out)
    manifest = json.loads((out / MANIFEST_FILE).read_text())
    bad = []
    for rel, digest in manifest["artifacts"].items():
        p = out / rel
        if not p.is_file() or sha256_file(p) != digest:
            bad.append(rel)
    return bad


def _guarded(out: Path, cfg: ExperimentConfig, fn):
    """Run ``fn``; record success or failure in the manifest, keeping partial artifacts."""
    try:
        result = fn()
    except Exception as exc:
        write_manifest(out, cfg, "failed", f"{type(exc).__name__}: {exc}")
        raise
    write_manifest(out, cfg, "success")
    return result


# ---------------------------------------------------------------- stages


def train_stage(cfg: ExperimentConfig, out: Path) -> list[Snapshot]:
    out = Path(out)
    (out / SNAPSHOT_DIR).mkdir(parents=True, exist_ok=True)
    (out / CONFIG_FILE).write_text(serialize(cfg, runtime=False))
    fh = open(out / LOG_FILE, "w", newline="")
    writer = _writer(fh)
    writer.writerow(LOG_HEADER)

    def on_episode(row: EpisodeLog):
        writer.writerow([row.episode, fmt(float(row.ret)), row.length, fmt(float(row.epsilon)), fmt(row.mean_loss)])

    def on_snapshot(snap: Snapshot):
        snapshot_path(out, snap.episode).write_bytes(snap.to_bytes())

    try:
        result = train(cfg.train_config(), cfg.model_kind(), cfg.grid_spec("train"), cfg.config_hash(),
                       on_snapshot=on_snapshot, on_episode=on_episode)
    finally:
        fh.close()
    if result.drop_prob_history:
        with open(out / DROP_FILE, "w", newline="") as dh:
            w = _writer(dh)
            w.writerow(["episode"] + [f"p{i}" for i in range(len(result.drop_prob_history[0]))])
            for ep, probs in enumerate(result.drop_prob_history, 1):
                w.writerow([ep] + [fmt(float(p)) for p in probs])
    return result.snapshots


def load_snapshots(out: Path) -> list[Snapshot]:
    paths = sorted((Path(out) / SNAPSHOT_DIR).glob("snap_*.bin"), key=lambda p: int(p.stem.split("_")[1]))
    if not paths:
        raise FileNotFoundError(f"no snapshots under {Path(out) / SNAPSHOT_DIR}")
    return [Snapshot.from_bytes(p.read_bytes()) for p in paths]


def _evaluate_one(snapshot_bytes: bytes, cfg_json: str):
    cfg = ExperimentConfig.model_validate_json(cfg_json)
    snap = Snapshot.from_bytes(snapshot_bytes)
    return evaluation.evaluate_snapshot(snap, cfg.grid_spec("train"), cfg.grid_spec("mirror"),
                                        cfg.evaluation.eval_runs, cfg.experiment.seed)


def evaluate_snapshots(cfg: ExperimentConfig, snapshots: list[Snapshot], jobs: int = 1):
    """Evaluate every snapshot in both variants; results come back in snapshot order."""
    if jobs > 1:
        cfg_json = cfg.model_dump_json()
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_evaluate_one, [s.to_bytes() for s in snapshots], [cfg_json] * len(snapshots)))
    else:
        train_spec, mirror_spec = cfg.grid_spec("train"), cfg.grid_spec("mirror")
        results = [evaluation.evaluate_snapshot(s, train_spec, mirror_spec, cfg.evaluation.eval_runs,
                                                cfg.experiment.seed) for s in snapshots]
    traces, rows = [], []
    for tr, mi, row in results:
        traces += tr + mi
        rows.append(row)
    return traces, rows


def evaluate_stage(cfg: ExperimentConfig, out: Path, snapshots: list[Snapshot] | None = None) -> list[MetricsRow]:
    out = Path(out)
    if snapshots is None:
        snapshots = load_snapshots(out)
    traces, rows = evaluate_snapshots(cfg, snapshots, cfg.experiment.jobs)
    write_traces(out / TRACES_FILE, traces)
    write_metrics(out / METRICS_FILE, rows)
    return rows


def plot_stage(cfg: ExperimentConfig, out: Path, rows: list[MetricsRow] | None = None) -> Path:
    out = Path(out)
    if rows is None:
        rows = read_metrics(out / METRICS_FILE)
    return plotting.emit_plot(rows, out / PLOT_FILE, title=cfg.experiment.model.upper())


def run_experiment(cfg: ExperimentConfig, out: Path | None = None) -> Path:
    """Train, evaluate every snapshot in both variants, plot, and write the manifest."""
    out = Path(out if out is not None else cfg.experiment.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def body():
        snaps = train_stage(cfg, out)
        rows = evaluate_stage(cfg, out, snaps)
        plot_stage(cfg, out, rows)

    _guarded(out, cfg, body)
    return out


def config_from_run(out: Path) -> ExperimentConfig:
    return load_config(Path(out) / CONFIG_FILE)
