"""Command line: ``oodrl {train,evaluate,plot,run,compare}``."""

from __future__ import annotations

import json
import logging
import os
import sys
from pathlib import Path

import click

from oodrl import experiment, plotting
from oodrl.config import ConfigError, ExperimentConfig, load_config

OUT_ENV = "OODRL_OUT_DIR"


def _build_config(config_path, out, seed, model, episodes, eval_runs, snapshot_interval, jobs) -> ExperimentConfig:
    cfg = load_config(config_path) if config_path else ExperimentConfig()
    out = out or os.environ.get(OUT_ENV)
    return cfg.with_overrides(out_dir=out, seed=seed, model=model, episodes=episodes, eval_runs=eval_runs,
                              snapshot_interval=snapshot_interval, jobs=jobs)


def common_options(fn):
    opts = [
        click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="Config file."),
        click.option("--out", type=click.Path(file_okay=False), help=f"Run directory (env: {OUT_ENV})."),
        click.option("--seed", type=click.IntRange(0, 2**64 - 1)),
        click.option("--model", type=click.Choice(["mcd", "mccd", "boot", "bootp"], case_sensitive=False)),
        click.option("--episodes", type=click.IntRange(min=1)),
        click.option("--eval-runs", type=click.IntRange(min=1)),
        click.option("--snapshot-interval", type=click.IntRange(min=1)),
        click.option("--jobs", type=click.IntRange(min=1)),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _config_or_exit(**kw) -> ExperimentConfig:
    try:
        return _build_config(**kw)
    except ConfigError as exc:
        raise click.UsageError(str(exc)) from exc


def _finish(out: Path) -> None:
    manifest = json.loads((Path(out) / experiment.MANIFEST_FILE).read_text())
    click.echo(f"{manifest['status']}: {out}")
    sys.exit(0 if manifest["status"] == "success" else 1)


def _stage(cfg: ExperimentConfig, out: Path, fn) -> None:
    out.mkdir(parents=True, exist_ok=True)
    try:
        experiment._guarded(out, cfg, fn)
    except Exception as exc:  # manifest already marks the failure
        click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
    _finish(out)


@click.group()
@click.option("-v", "--verbose", count=True)
def main(verbose):
    """Uncertainty-based OOD detection experiments for deep Q-learning."""
    logging.basicConfig(level=logging.WARNING - 10 * verbose, format="%(levelname)s %(name)s: %(message)s")


@main.command("train")
@common_options
def train_cmd(**kw):
    """Train a model and write snapshots plus the training log."""
    cfg = _config_or_exit(**kw)
    out = Path(cfg.experiment.out_dir)
    _stage(cfg, out, lambda: experiment.train_stage(cfg, out))


@main.command("evaluate")
@common_options
def evaluate_cmd(**kw):
    """Evaluate every snapshot of a run directory in both variants."""
    cfg = _config_or_exit(**kw)
    out = Path(cfg.experiment.out_dir)
    if not kw["config_path"] and (out / experiment.CONFIG_FILE).exists():
        run_cfg = experiment.config_from_run(out)
        cfg = run_cfg.with_overrides(out_dir=str(out), eval_runs=kw["eval_runs"], jobs=kw["jobs"])
    _stage(cfg, out, lambda: experiment.evaluate_stage(cfg, out))


@main.command("plot")
@common_options
def plot_cmd(**kw):
    """Render metrics.csv of a run directory as an SVG."""
    cfg = _config_or_exit(**kw)
    out = Path(cfg.experiment.out_dir)
    if not kw["config_path"] and (out / experiment.CONFIG_FILE).exists():
        cfg = experiment.config_from_run(out).with_overrides(out_dir=str(out))
    _stage(cfg, out, lambda: experiment.plot_stage(cfg, out))


@main.command("run")
@common_options
def run_cmd(**kw):
    """Train, evaluate and plot in one go."""
    cfg = _config_or_exit(**kw)
    out = Path(cfg.experiment.out_dir)
    try:
        experiment.run_experiment(cfg, out)
    except Exception as exc:
        click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
    _finish(out)


@main.command("compare")
@click.argument("metrics", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False), help="Output SVG.")
def compare_cmd(metrics, out_path):
    """Overlay several metrics.csv files in one figure."""
    named = {}
    for m in metrics:
        p = Path(m)
        name = p.parent.name or p.stem
        if name in named:
            name = str(p)
        named[name] = experiment.read_metrics(p)
    plotting.emit_comparison(named, out_path)
    click.echo(out_path)


if __name__ == "__main__":
    main()
