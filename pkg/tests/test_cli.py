import csv
import json
import subprocess
import sys

import pytest

from multishot.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, dispatch, emit_report, read_results

SMALL = """
[motion]
frame_count = 16

[shots]
mean_shot_length = 6.0

[simulate]
n_sequences = 2

[solver]
max_iters = 25

[train]
window = 8
epochs = 2
batch_size = 4

[net]
d = 8
enc_hidden = 8
heads = 2
ffn_hidden = 8
reg_hidden = 8
"""


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """Simulated dataset and multi-shot estimates shared by the tests below."""
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "small.toml"
    cfg.write_text(SMALL)
    assert dispatch(["simulate", "--config", str(cfg), "--out", str(d / "data.jsonl"), "--seed", "1"]) == EXIT_OK
    assert dispatch(["optimize", "--data", str(d / "data.jsonl"), "--mode", "multi-shot",
                     "--config", str(cfg), "--out", str(d / "est.json")]) == EXIT_OK
    return d


def test_end_to_end_cross_shot_report_is_monotone(run):
    out = run / "xs.csv"
    assert dispatch(["eval", "--data", str(run / "data.jsonl"), "--estimates", str(run / "est.json"),
                     "--metric", "cross-shot-pck", "--out", str(out)]) == EXIT_OK
    r = rows(out)
    assert [float(x["alpha"]) for x in r] == [0.05, 0.1, 0.2]
    pck = [float(x["pck"]) for x in r]
    assert pck == sorted(pck)
    assert int(r[0]["pairs"]) >= 1


def test_every_artifact_has_a_manifest(run):
    for name in ("data.jsonl", "est.json"):
        doc = json.loads((run / f"{name}.manifest.json").read_text())
        assert {"command", "config", "seed", "inputs", "outputs", "tool_version", "wall_time_s"} <= set(doc)
    assert json.loads((run / "data.jsonl.manifest.json").read_text())["seed"] == 1


@pytest.mark.parametrize("metric", ["pck", "mpjpe", "pa-mpjpe"])
def test_other_metrics(run, metric):
    out = run / f"{metric}.csv"
    assert dispatch(["eval", "--data", str(run / "data.jsonl"), "--estimates", str(run / "est.json"),
                     "--metric", metric, "--out", str(out)]) == EXIT_OK
    r = rows(out)
    if metric == "pck":
        assert all(0.0 <= float(x["pck"]) <= 100.0 for x in r)
    else:
        assert r[0]["metric"] == metric and float(r[0]["value_mm"]) >= 0.0


def test_train_and_eval_weights(run):
    cfg = run / "small.toml"
    w = run / "tf.json"
    assert dispatch(["train", "--data", str(run / "data.jsonl"), "--pseudo-gt", str(run / "est.json"),
                     "--model", "transformer", "--config", str(cfg), "--out", str(w)]) == EXIT_OK
    assert len(rows(run / "tf.loss.csv")) == 2
    out = run / "tf_xs.csv"
    assert dispatch(["eval", "--data", str(run / "data.jsonl"), "--weights", str(w),
                     "--metric", "cross-shot-pck", "--out", str(out)]) == EXIT_OK


def test_stats_and_compare(run, capsys):
    assert dispatch(["stats", "--data", str(run / "data.jsonl")]) == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].startswith("mode,count_all") and len(lines) == 4
    a = run / "a.csv"
    b = run / "b.csv"
    a.write_text("alpha,pck,pairs\n0.1,80.0,3\n")
    b.write_text("alpha,pck,pairs\n0.1,70.0,3\n")
    assert dispatch(["compare", "--report-a", str(a), "--report-b", str(b)]) == EXIT_OK
    out = capsys.readouterr().out.splitlines()
    assert out[1].split(",")[:4] == ["0.1", "80.0", "70.0", "10.0"]


def test_unknown_subcommand_is_usage_error(capsys):
    assert dispatch(["frobnicate"]) == EXIT_USAGE
    assert "usage" in capsys.readouterr().err.lower()
    assert dispatch([]) == EXIT_USAGE


def test_cross_shot_on_single_shot_data(tmp_path, capsys):
    cfg = tmp_path / "one.toml"
    cfg.write_text(SMALL.replace("mean_shot_length = 6.0", "mean_shot_length = 1000.0"))
    data = tmp_path / "one.jsonl"
    assert dispatch(["simulate", "--config", str(cfg), "--out", str(data)]) == EXIT_OK
    est = tmp_path / "est.json"
    assert dispatch(["optimize", "--data", str(data), "--mode", "single-frame", "--config", str(cfg),
                     "--out", str(est)]) == EXIT_OK
    capsys.readouterr()
    code = dispatch(["eval", "--data", str(data), "--estimates", str(est), "--metric", "cross-shot-pck",
                     "--out", str(tmp_path / "x.csv")])
    assert code == EXIT_DATA
    assert "no shot boundaries" in capsys.readouterr().err


def test_data_errors(tmp_path, capsys):
    assert dispatch(["optimize", "--data", str(tmp_path / "nope.jsonl"), "--mode", "multi-shot",
                     "--out", str(tmp_path / "e.json")]) == EXIT_DATA
    bad = tmp_path / "bad.toml"
    bad.write_text("[motion\nframe_count = ")
    assert dispatch(["simulate", "--config", str(bad), "--out", str(tmp_path / "d.jsonl")]) == EXIT_DATA
    unknown = tmp_path / "unknown.toml"
    unknown.write_text("[motion]\nframes = 3\n")
    assert dispatch(["simulate", "--config", str(unknown), "--out", str(tmp_path / "d.jsonl")]) == EXIT_DATA
    empty = tmp_path / "results.csv"
    empty.write_text("table,seed,row,alpha,pck\n")
    assert dispatch(["report", "--results", str(empty), "--out-dir", str(tmp_path / "r")]) == EXIT_DATA
    assert "no results" in capsys.readouterr().err


def test_parallel_simulation_matches_serial(run, tmp_path):
    cfg = run / "small.toml"
    outs = []
    for jobs in ("1", "2"):
        out = tmp_path / f"d{jobs}.jsonl"
        assert dispatch(["simulate", "--config", str(cfg), "--out", str(out), "--seed", "4",
                         "--jobs", jobs]) == EXIT_OK
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_report_is_byte_identical_on_rerun(tmp_path):
    results = [
        {"table": "modes", "seed": s, "row": row, "alpha": a, "pck": p + s + a}
        for s in range(3) for row, p in (("multi_shot", 80.0), ("single_frame", 60.0)) for a in (0.1, 0.2)
    ]
    a = emit_report(results, tmp_path / "a")
    b = emit_report(results, tmp_path / "b")
    assert [p.name for p in a] == ["modes.csv", "summary.txt"]
    assert all(x.read_bytes() == y.read_bytes() for x, y in zip(a, b))
    assert "multi_shot (81.10) > single_frame (61.10); strict per-seed agreement 3/3" in (
        tmp_path / "a" / "summary.txt").read_text()


def test_experiment_and_report_round_trip(tmp_path):
    cfg = tmp_path / "s.toml"
    cfg.write_text("[solver]\nmax_iters = 5\n")
    out = tmp_path / "exp"
    assert dispatch(["experiment", "--seeds", "2", "--frames-per-shot", "3", "--config", str(cfg),
                     "--out-dir", str(out), "--jobs", "2"]) == EXIT_OK
    assert len(read_results(str(out / "results.csv"))) == 2 * 3 * 3
    again = tmp_path / "again"
    assert dispatch(["report", "--results", str(out / "results.csv"), "--out-dir", str(again)]) == EXIT_OK
    assert (again / "summary.txt").read_bytes() == (out / "summary.txt").read_bytes()


def test_installed_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "multishot.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip()
    proc = subprocess.run([sys.executable, "-m", "multishot.cli", "eval"], capture_output=True, text=True)
    assert proc.returncode == EXIT_USAGE
