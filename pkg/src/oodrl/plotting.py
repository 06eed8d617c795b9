"""SVG figures of per-snapshot mean epistemic uncertainty (log y-axis)."""

from __future__ import annotations

import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-12
_RC = {"svg.hashsalt": "oodrl", "svg.fonttype": "none", "path.simplify": False}


def _floor(values, label: str) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    bad = ~(v > LOG_FLOOR)
    if bad.any():
        log.warning("%d %s value(s) <= %g clamped for the log axis", int(bad.sum()), label, LOG_FLOOR)
        v = np.where(bad, LOG_FLOOR, v)
    return v


def _save(fig, path: Path) -> Path:
    path = Path(path)
    try:
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    except OSError as exc:
        raise OSError(f"cannot write plot to {path}: {exc}") from exc
    finally:
        plt.close(fig)
    return path


def emit_plot(rows, path, title: str | None = None) -> Path:
    """Train and mirror curves of mean epistemic variance versus snapshot episode."""
    rows = list(rows)
    if not rows:
        raise ValueError("emit_plot needs at least one metrics row")
    x = [r.snapshot_episode for r in rows]
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(7, 4))
        ax.plot(x, _floor([r.train_mean_epi for r in rows], "train"), marker="o", ms=3, label="train", gid="train-curve")
        ax.plot(x, _floor([r.mirror_mean_epi for r in rows], "mirror"), marker="o", ms=3, label="mirror", gid="mirror-curve")
        ax.set_yscale("log")
        ax.set_xlabel("training episode")
        ax.set_ylabel("mean epistemic variance of chosen actions")
        if title:
            ax.set_title(title)
        ax.legend()
        fig.tight_layout()
        return _save(fig, path)


def emit_comparison(named_rows: dict, path) -> Path:
    """Overlay several runs: solid lines for train, dashed for mirror."""
    if not named_rows:
        raise ValueError("nothing to compare")
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(8, 4.5))
        for i, (name, rows) in enumerate(named_rows.items()):
            rows = list(rows)
            if not rows:
                raise ValueError(f"no metrics rows for {name}")
            color = f"C{i % 10}"
            x = [r.snapshot_episode for r in rows]
            ax.plot(x, _floor([r.train_mean_epi for r in rows], name), color=color, label=f"{name} train")
            ax.plot(x, _floor([r.mirror_mean_epi for r in rows], name), color=color, ls="--", label=f"{name} mirror")
        ax.set_yscale("log")
        ax.set_xlabel("training episode")
        ax.set_ylabel("mean epistemic variance of chosen actions")
        ax.legend(fontsize="small")
        fig.tight_layout()
        return _save(fig, path)
