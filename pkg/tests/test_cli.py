from __future__ import annotations

import json
import subprocess
import sys

import pytest

from gdn.cli import main

SPLIT = ["--train-per-class", "2", "--val-per-class", "1"]
FAST = ["--epochs", "1", "--batch", "16", "--precision", "f32"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus"
    assert main(["synth", "--out", str(corpus), "--seed", "3", "--subjects", "4", "--seconds", "20"]) == 0
    model = root / "model"
    assert main(["train", "--corpus", str(corpus), "--out", str(model), "--seed", "1", *FAST, *SPLIT]) == 0
    return root, corpus, model


def test_synth_is_reproducible(tmp_path):
    args = ["synth", "--seed", "7", "--subjects", "2", "--channels", "6", "--seconds", "10"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "manifest.json" in files and "run.json" in files
    for name in files:
        if name != "run.json":
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_synth_default_seed(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--subjects", "1", "--channels", "4", "--seconds", "2"]) == 0
    run = json.loads((tmp_path / "run.json").read_text())
    assert run["config"]["seed"] == 0 and run["command"] == "synth"


def test_usage_errors(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), "--channels", "1"]) == 2
    assert "gdn: E-USAGE:" in capsys.readouterr().err
    assert main(["frobnicate"]) == 2
    assert main(["train", "--out", str(tmp_path)]) == 2  # missing --corpus
    assert main(["ablate", "--corpus", str(tmp_path), "--out", str(tmp_path), "--k-list", "a,b"]) == 2


def test_data_errors(tmp_path, workspace, capsys):
    _, corpus, model = workspace
    assert main(["train", "--corpus", str(tmp_path), "--out", str(tmp_path / "m")]) == 3
    assert "gdn: E-DATA:" in capsys.readouterr().err
    # 4 subjects per class cannot give 3 train + 1 val + a test set
    assert main(["classify", "--corpus", str(corpus), "--out", str(model), "--train-per-class", "3",
                 "--val-per-class", "1"]) == 3
    assert main(["classify", "--corpus", str(corpus), "--out", str(tmp_path / "empty"), *SPLIT]) == 3


def test_numeric_failure_exit_code(workspace, tmp_path, capsys):
    _, corpus, _ = workspace
    args = ["train", "--corpus", str(corpus), "--out", str(tmp_path), *FAST, *SPLIT, "--lr", "1e30"]
    assert main(args) == 4
    assert "gdn: E-NUMERIC: non-finite training loss" in capsys.readouterr().err


def test_corpus_missing_a_class(tmp_path, workspace):
    _, corpus, _ = workspace
    m = json.loads((corpus / "manifest.json").read_text())
    only = {"subjects": [s for s in m["subjects"] if s["label"] == "MDD"]}
    one = tmp_path / "one"
    one.mkdir()
    for s in only["subjects"]:
        (one / s["file"]).write_bytes((corpus / s["file"]).read_bytes())
    (one / "manifest.json").write_text(json.dumps(only))
    assert main(["train", "--corpus", str(one), "--out", str(tmp_path / "m"), *SPLIT]) == 3
    assert not (tmp_path / "m" / "generator_MDD.gdn").exists()


def test_train_outputs(workspace):
    _, _, model = workspace
    for name in ("generator_MDD.gdn", "generator_HC.gdn", "split.json", "run.json",
                 "train_log_MDD.jsonl", "train_log_HC.jsonl"):
        assert (model / name).exists(), name
    run = json.loads((model / "run.json").read_text())
    assert run["config"]["k"] == 10 and run["config"]["seed"] == 1
    split = json.loads((model / "split.json").read_text())
    assert split["test"] == ["mdd04", "hc04"]


def test_train_and_classify_are_deterministic(workspace, tmp_path):
    _, corpus, model = workspace
    again = tmp_path / "again"
    assert main(["train", "--corpus", str(corpus), "--out", str(again), "--seed", "1", *FAST, *SPLIT]) == 0
    for name in ("generator_MDD.gdn", "generator_HC.gdn"):
        assert (again / name).read_bytes() == (model / name).read_bytes()
    c1, c2 = tmp_path / "c1", tmp_path / "c2"
    for out in (c1, c2):
        assert main(["classify", "--corpus", str(corpus), "--model", str(model), "--out", str(out), *SPLIT]) == 0
    assert (c1 / "metrics.json").read_bytes() == (c2 / "metrics.json").read_bytes()
    assert (c1 / "verdicts_test.csv").read_bytes() == (c2 / "verdicts_test.csv").read_bytes()


def test_classify_outputs_and_override(workspace, tmp_path, capsys):
    _, corpus, model = workspace
    out = tmp_path / "cls"
    assert main(["classify", "--corpus", str(corpus), "--model", str(model), "--out", str(out), *SPLIT,
                 "--n0-override", "3"]) == 0
    text = capsys.readouterr().out
    assert "n0 = 3" in text and "subject accuracy" in text
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["threshold"]["rule"] == "override"
    lines = (out / "verdicts_test.csv").read_text().splitlines()
    assert lines[0] == "subject_id,segment_index,n,decision,true_label"
    assert len(lines) == 1 + 2 * 2
    for row in lines[1:]:
        n, decision = int(row.split(",")[2]), row.split(",")[3]
        assert decision == ("MDD" if n >= 3 else "HC")
    assert json.loads((out / "run.json").read_text())["command"] == "classify"


def test_explain(workspace, tmp_path, caplog):
    _, corpus, model = workspace
    out = tmp_path / "ex"
    args = ["explain", "--corpus", str(corpus), "--model", str(model), "--out", str(out), *SPLIT,
            "--segment", "mdd04:1", "--segment", "hc01:0", "--resolution", "24"]
    assert main(args) == 0
    first = {p.name: p.read_bytes() for p in out.iterdir() if p.name != "run.json"}
    assert {"mdd04_seg001_winner.ppm", "hc01_seg000_winner.csv", "hc01_seg000_winner.json"} <= set(first)
    assert main(args) == 0
    assert {p.name: p.read_bytes() for p in out.iterdir() if p.name != "run.json"} == first
    assert main([*args[:-4], "--segment", "nobody:0"]) == 3
    assert main([*args[:-4], "--segment", "mdd04:99"]) == 3
    assert main([*args[:-4], "--segment", "mdd04"]) == 2


def test_explain_strip_fallback(workspace, tmp_path, caplog):
    _, corpus, model = workspace
    bare = tmp_path / "bare"
    bare.mkdir()
    m = json.loads((corpus / "manifest.json").read_text())
    for s in m["subjects"]:
        s.pop("positions")
        (bare / s["file"]).write_bytes((corpus / s["file"]).read_bytes())
    (bare / "manifest.json").write_text(json.dumps(m))
    out = tmp_path / "ex"
    assert main(["explain", "--corpus", str(bare), "--model", str(model), "--out", str(out), *SPLIT,
                 "--segment", "hc02:0"]) == 0
    assert json.loads((out / "hc02_seg000_winner.json").read_text())["mode"] == "strip"
    assert "no electrode positions" in caplog.text


def test_preprocess(workspace, tmp_path):
    _, corpus, _ = workspace
    out = tmp_path / "pp"
    assert main(["preprocess", "--corpus", str(corpus), "--out", str(out), "--segment", "hc01:0", "--k", "5"]) == 0
    meta = json.loads((out / "hc01_seg000.json").read_text())
    assert meta["s_ca"]["shape"] == [16, 5, 1255]


def test_ablate(workspace, tmp_path, caplog, capsys):
    _, corpus, _ = workspace
    out = tmp_path / "abl"
    assert main(["ablate", "--corpus", str(corpus), "--out", str(out), *FAST, *SPLIT, "--k-list", "5,10,5"]) == 0
    assert "duplicate k values" in caplog.text
    rows = json.loads((out / "ablation.json").read_text())
    assert [r["k"] for r in rows] == [5, 10]
    table = (out / "ablation.txt").read_text()
    assert "sensitivity" in table and "specificity" in table and "accuracy" in table
    assert (out / "k05" / "generator_MDD.gdn").exists()


def test_module_entry_point_and_log_env(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "gdn", "synth", "--out", str(tmp_path), "--channels", "1"],
        capture_output=True, text=True, env={"GDN_LOG": "DEBUG", "PATH": ""},
    )
    assert proc.returncode == 2
    assert proc.stderr.strip().endswith("gdn: E-USAGE: --channels must be >= 2")
