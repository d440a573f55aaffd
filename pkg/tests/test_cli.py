import json
import subprocess
import sys

import pytest

from nshart.cli import main

TINY = """[train]
d = 8
hidden = 16
heads = 2
m = 3
batch_size = 32
lr = 0.001
epochs = 1
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.ini").write_text(TINY)
    assert main(["synth", "--out", str(root / "data"), "--seed", "4"]) == 0
    return root


def test_bad_flags_exit_2(capsys):
    assert main(["frobnicate"]) == 2
    assert main(["train", "--data", "x"]) == 2  # missing --checkpoint
    assert main(["eval", "--data", "x", "--checkpoint", "y", "--out", "z", "--split", "train"]) == 2


def test_runtime_error_exit_1_with_json(tmp_path, capsys):
    code = main(["train", "--data", str(tmp_path / "nowhere"), "--checkpoint", str(tmp_path / "c")])
    assert code == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["command"] == "train" and err["error"] and err["message"]


def test_help_lists_subcommands():
    out = subprocess.run([sys.executable, "-m", "nshart.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("synth", "train", "eval", "sample", "trace-attention", "config"):
        assert cmd in out.stdout


def test_synth_manifest(workspace):
    manifest = json.loads((workspace / "data" / "manifest.json").read_text())
    assert manifest["max_arity"] == 3 and manifest["facts"]["test"] > 0


def test_config_command(workspace):
    assert main(["config", "--out", str(workspace / "full.ini"), "--config", str(workspace / "tiny.ini")]) == 0
    text = (workspace / "full.ini").read_text()
    assert "d = 8" in text and "negatives = 50" in text


def test_sample_command(workspace):
    out = workspace / "sub.json"
    assert main(["sample", "--data", str(workspace / "data"), "--out", str(out), "--config",
                 str(workspace / "tiny.ini"), "--query-index", "2", "--with-target"]) == 0
    sub = json.loads(out.read_text())
    assert sub["edges"][0]["edge"] is None and sub["target"] == sub["query"]["answer"]
    dists = {n["entity"]: n["distance"] for n in sub["nodes"]}
    assert all(dists[e] == 0 for _, e in sub["query"]["pairs"] if e is not None)
    assert main(["sample", "--data", str(workspace / "data"), "--out", str(out), "--query-index", "99999"]) == 1


def test_train_eval_trace_pipeline(workspace):
    d, ck = str(workspace / "data"), str(workspace / "model.ckpt")
    assert main(["train", "--data", d, "--checkpoint", ck, "--config", str(workspace / "tiny.ini"),
                 "--log", str(workspace / "log.jsonl"), "--seed", "1"]) == 0
    log = [json.loads(x) for x in (workspace / "log.jsonl").read_text().splitlines()]
    assert len(log) == 1 and log[0]["epoch"] == 0
    assert main(["eval", "--data", d, "--checkpoint", ck, "--out", str(workspace / "report.json"),
                 "--table", str(workspace / "table.txt"), "--ranks-csv", str(workspace / "ranks.csv")]) == 0
    report = json.loads((workspace / "report.json").read_text())
    assert 0 < report["mrr"] <= 1 and report["primary_count"] > 0
    assert (workspace / "ranks.csv").read_text().startswith("query_id,slot_kind,rank")
    assert main(["trace-attention", "--data", d, "--checkpoint", ck, "--out", str(workspace / "trace.jsonl")]) == 0
    records = [json.loads(x) for x in (workspace / "trace.jsonl").read_text().splitlines()]
    assert records and {r["stage"] for r in records} == {"V->E", "E->V"}
    for r in records:
        assert abs(sum(t["weight"] for t in r["tokens"]) - 1.0) < 1e-9
