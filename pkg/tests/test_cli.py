import csv
import json
import logging
import shutil
import xml.etree.ElementTree as ET

import pytest
from click.testing import CliRunner

from oodrl import experiment, plotting
from oodrl.cli import main
from oodrl.evaluation import MetricsRow, separation_ratio

SVG = "{http://www.w3.org/2000/svg}"

TINY = """\
[experiment]
model = {model}
seed = 5
[model]
hidden = 16
K = 3
T = 3
[agent]
episodes = 6
snapshot_interval = 4
warmup_transitions = 32
batch_size = 8
replay_capacity = 400
[gridworld]
max_steps = 25
[evaluation]
eval_runs = 2
"""


def write_config(tmp_path, model="bootp"):
    p = tmp_path / f"{model}.ini"
    p.write_text(TINY.format(model=model))
    return p


def invoke(*args, env=None):
    return CliRunner().invoke(main, [str(a) for a in args], env=env, catch_exceptions=False)


def read_text_artifacts(out):
    return {name: (out / name).read_bytes() for name in
            ("train_log.csv", "traces.csv", "metrics.csv", "uncertainty.svg", "config.ini")}


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    cfg = write_config(tmp)
    res = invoke("run", "--config", cfg, "--out", tmp / "out")
    assert res.exit_code == 0, res.output
    return tmp / "out", cfg


def test_run_writes_all_artifacts(run_dir):
    out, _ = run_dir
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "success" and manifest["seed"] == 5 and manifest["model"] == "bootp"
    assert sorted(manifest["artifacts"]) == sorted([
        "config.ini", "metrics.csv", "traces.csv", "train_log.csv", "uncertainty.svg",
        "snapshots/snap_4.bin", "snapshots/snap_6.bin"])
    assert experiment.verify_run(out) == []


def test_csv_headers(run_dir):
    out, _ = run_dir
    headers = {name: (out / name).read_text().splitlines()[0] for name in ("train_log.csv", "traces.csv", "metrics.csv")}
    assert headers["train_log.csv"] == "episode,return,length,epsilon,mean_loss"
    assert headers["traces.csv"] == "snapshot_episode,variant,run,step,x,y,action,reward,epistemic_var,aleatoric_var"
    assert headers["metrics.csv"] == "snapshot_episode,train_mean_epi,mirror_mean_epi,separation,auroc"


def test_metrics_row_per_snapshot(run_dir):
    out, _ = run_dir
    rows = experiment.read_metrics(out / "metrics.csv")
    assert [r.snapshot_episode for r in rows] == [4, 6]
    with open(out / "traces.csv") as fh:
        runs = {(r["snapshot_episode"], r["variant"], r["run"]) for r in csv.DictReader(fh)}
    assert len(runs) == 2 * 2 * 2


def test_rerun_is_byte_identical(run_dir, tmp_path):
    out, cfg = run_dir
    first = read_text_artifacts(out)
    snaps = {p.name: p.read_bytes() for p in (out / "snapshots").iterdir()}
    manifest = json.loads((out / "manifest.json").read_text())
    again = tmp_path / "again"
    assert invoke("run", "--config", cfg, "--out", again).exit_code == 0
    assert read_text_artifacts(again) == first
    assert {p.name: p.read_bytes() for p in (again / "snapshots").iterdir()} == snaps
    assert json.loads((again / "manifest.json").read_text()) == manifest


def test_delete_and_rerun_same_dir(tmp_path):
    cfg = write_config(tmp_path, "mcd")
    out = tmp_path / "out"
    assert invoke("run", "--config", cfg, "--out", out).exit_code == 0
    first = read_text_artifacts(out)
    shutil.rmtree(out)
    assert invoke("run", "--config", cfg, "--out", out).exit_code == 0
    assert read_text_artifacts(out) == first


def test_staged_commands_match_run(run_dir, tmp_path):
    out, cfg = run_dir
    staged = tmp_path / "staged"
    assert invoke("train", "--config", cfg, "--out", staged).exit_code == 0
    assert invoke("evaluate", "--out", staged).exit_code == 0
    assert invoke("plot", "--out", staged).exit_code == 0
    assert read_text_artifacts(staged) == read_text_artifacts(out)


def test_flags_override_config(tmp_path):
    cfg = write_config(tmp_path, "boot")
    out = tmp_path / "o"
    res = invoke("train", "--config", cfg, "--out", out, "--model", "MCCD", "--episodes", 3, "--snapshot-interval", 2,
                 "--seed", 11)
    assert res.exit_code == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert (manifest["model"], manifest["seed"]) == ("mccd", 11)
    assert sorted(p.name for p in (out / "snapshots").iterdir()) == ["snap_2.bin", "snap_3.bin"]


def test_env_var_sets_output_dir(tmp_path):
    cfg = write_config(tmp_path, "boot")
    target = tmp_path / "from_env"
    res = invoke("train", "--config", cfg, "--episodes", 2, env={"OODRL_OUT_DIR": str(target)})
    assert res.exit_code == 0
    assert (target / "manifest.json").exists()


def test_failure_exits_nonzero_and_marks_manifest(tmp_path):
    out = tmp_path / "empty"
    res = invoke("evaluate", "--out", out)
    assert res.exit_code == 1
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "failed" and "snapshots" in manifest["error"]


def test_bad_config_is_usage_error(tmp_path):
    p = tmp_path / "bad.ini"
    p.write_text("[agent]\nepisodes = -3\n")
    res = CliRunner().invoke(main, ["train", "--config", str(p), "--out", str(tmp_path / "x")])
    assert res.exit_code == 2 and "episodes" in res.output


def test_verify_run_detects_tampering(run_dir, tmp_path):
    out, _ = run_dir
    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    with open(copy / "metrics.csv", "a") as fh:
        fh.write("\n")
    assert experiment.verify_run(copy) == ["metrics.csv"]


def test_compare(run_dir, tmp_path):
    out, _ = run_dir
    svg = tmp_path / "cmp.svg"
    res = invoke("compare", out / "metrics.csv", out / "metrics.csv", "--out", svg)
    assert res.exit_code == 0
    assert svg.read_text().count("<svg") == 1


# ---------------------------------------------------------------- plots


def rows(*vals):
    return [MetricsRow(100 * (i + 1), t, m, 30, 30, 0.9, separation_ratio(m, t)) for i, (t, m) in enumerate(vals)]


def test_plot_single_row_has_two_points(tmp_path):
    path = plotting.emit_plot(rows((0.5, 2.0)), tmp_path / "one.svg")
    root = ET.parse(path).getroot()
    markers = 0
    for gid in ("train-curve", "mirror-curve"):
        group = root.find(f".//*[@id='{gid}']")
        markers += len(group.findall(f".//{SVG}use"))
    assert markers == 2
    text = path.read_text()
    assert "training episode" in text and "mean epistemic variance" in text and "mirror" in text


def test_plot_is_deterministic(tmp_path):
    data = rows((0.5, 2.0), (0.25, 1.5), (0.1, 1.0))
    a = plotting.emit_plot(data, tmp_path / "a.svg").read_bytes()
    b = plotting.emit_plot(data, tmp_path / "b.svg").read_bytes()
    assert a == b


def test_plot_rejects_empty(tmp_path):
    with pytest.raises(ValueError):
        plotting.emit_plot([], tmp_path / "x.svg")


def test_plot_clamps_zero_with_warning(tmp_path, caplog):
    with caplog.at_level(logging.WARNING):
        plotting.emit_plot(rows((0.0, 1.0)), tmp_path / "z.svg")
    assert "clamped" in caplog.text


def test_plot_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        plotting.emit_plot(rows((1.0, 2.0)), tmp_path / "missing_dir" / "p.svg")
