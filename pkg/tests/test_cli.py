import json
import os
import subprocess
import sys

import numpy as np
import pytest

from langtraj import cli, dataio, evaluate
from langtraj.model import TrajectoryModel


def tree_bytes(root, skip=("run_config.json",)):
    out = {}
    for d, _, files in os.walk(root):
        for f in files:
            if f not in skip:
                p = os.path.join(d, f)
                out[os.path.relpath(p, root)] = open(p, "rb").read()
    return out


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> annotate -> train (a few steps) on two small scripts."""
    root = tmp_path_factory.mktemp("pipe")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({"train": {"max_steps": 3, "batch_size": 4, "n_samples": 2},
                               "eval": {"n_samples": 3}}))
    assert cli.main(["synth", "--script", "turn_left,cruise_fast", "--n", "2", "--seed", "3",
                     "--out", str(root / "s")]) == 0
    assert cli.main(["annotate", "--data", str(root / "s" / "examples"), "--out", str(root / "a")]) == 0
    assert cli.main(["train", "--config", str(cfg), "--data", str(root / "a" / "examples"),
                     "--out", str(root / "t")]) == 0
    return root, cfg


def test_synth_byte_identical(tmp_path):
    for k in ("a", "b"):
        assert cli.main(["synth", "--script", "yield_cross", "--n", "50", "--seed", "7", "--out", str(tmp_path / k)]) == 0
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert a == b and any(k.startswith("examples") for k in a)
    assert (tmp_path / "a" / "run_config.json").read_bytes() == (tmp_path / "b" / "run_config.json").read_bytes()


def test_unknown_command_exits_2():
    r = subprocess.run([sys.executable, "-m", "langtraj", "frobnicate"], capture_output=True, text=True)
    assert r.returncode == 2 and "usage" in r.stderr


def test_config_violation_names_key(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"lr": -1.0}}))
    assert cli.main(["synth", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert "[train.lr]" in capsys.readouterr().err
    bad.write_text(json.dumps({"model": {"hiden": 3}}))
    assert cli.main(["synth", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert "model.hiden" in capsys.readouterr().err


def test_data_error_has_file_context(tmp_path, capsys):
    shard = tmp_path / "examples-00000.jsonl"
    shard.write_text('{"not": "an example"}\n')
    assert cli.main(["annotate", "--data", str(shard), "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    assert "examples-00000.jsonl" in err and "1" in err


def test_run_config_and_checksums(pipeline):
    root, _ = pipeline
    for stage in ("s", "a", "t"):
        rc = json.load(open(root / stage / "run_config.json"))
        assert {"seed", "model", "train", "annotate", "example"} <= set(rc)
        assert isinstance(json.load(open(root / stage / "inputs.json")), dict)
    assert json.load(open(root / "a" / "inputs.json"))
    assert (root / "a" / "stats.json").exists() and (root / "a" / "token_histogram.csv").exists()
    assert len(open(root / "t" / "train_log.ndjson").readlines()) == 3


def test_eval_matches_public_api(pipeline, tmp_path):
    root, cfg = pipeline
    data, ckpt = str(root / "a" / "examples"), str(root / "t" / "model.ckpt")
    assert cli.main(["eval", "--config", str(cfg), "--data", data, "--checkpoint", ckpt, "--out", str(tmp_path)]) == 0
    summary = json.load(open(tmp_path / "summary.json"))
    model, _, _ = TrajectoryModel.load(ckpt)
    rep = evaluate.evaluate(model, dataio.read_shards(data), n_samples=3, seed=0)
    assert summary["mean_minADE@3s"] == pytest.approx(rep.aggregate["mean_minADE@3s"], abs=1e-12)


def test_eval_worker_pool_same_records(pipeline, tmp_path):
    root, cfg = pipeline
    data, ckpt = str(root / "a" / "examples"), str(root / "t" / "model.ckpt")
    par = tmp_path / "par.json"
    par.write_text(json.dumps({**json.loads(cfg.read_text()), "workers": 2,
                               "eval": {"n_samples": 3, "batch_size": 2}}))
    ser = tmp_path / "ser.json"
    ser.write_text(json.dumps({**json.loads(cfg.read_text()), "eval": {"n_samples": 3, "batch_size": 2}}))
    for name, c in (("p", par), ("s", ser)):
        assert cli.main(["eval", "--config", str(c), "--data", data, "--checkpoint", ckpt, "--out", str(tmp_path / name)]) == 0
    ids = lambda d: [json.loads(x)["example_id"] for x in open(d / "report.ndjson")]
    assert ids(tmp_path / "p") == ids(tmp_path / "s")


def test_predict_edit_trace(pipeline, tmp_path):
    root, cfg = pipeline
    data, ckpt = str(root / "a" / "examples"), str(root / "t" / "model.ckpt")
    ex_id = dataio.read_shards(data)[0].example_id
    assert cli.main(["predict", "--config", str(cfg), "--data", data, "--checkpoint", ckpt,
                     "--example", ex_id, "--out", str(tmp_path / "p")]) == 0
    rec = json.loads(open(tmp_path / "p" / "predictions.ndjson").readline())
    assert np.asarray(rec["samples"]).shape == (3, 30, 2) and len(rec["captions"]) == 3
    assert cli.main(["edit", "--config", str(cfg), "--data", data, "--checkpoint", ckpt, "--example", ex_id,
                     "--swap", "TurnLeft:TurnRight", "--caption", "TurnLeft", "--out", str(tmp_path / "e")]) == 0
    ed = json.load(open(tmp_path / "e" / "edit.json"))
    assert 3 in ed["original_caption"] and 4 in ed["edited_caption"] and 3 not in ed["edited_caption"]
    assert cli.main(["trace", "--config", str(cfg), "--data", data, "--checkpoint", ckpt,
                     "--example", ex_id, "--out", str(tmp_path / "tr")]) == 0
    assert (tmp_path / "tr" / "attention.csv").exists()


def test_unknown_example_id(pipeline, tmp_path, capsys):
    root, cfg = pipeline
    assert cli.main(["predict", "--data", str(root / "a" / "examples"), "--checkpoint", str(root / "t" / "model.ckpt"),
                     "--example", "nope", "--out", str(tmp_path)]) == 1
    assert "nope" in capsys.readouterr().err


def test_bad_swap_token(pipeline, tmp_path, capsys):
    root, _ = pipeline
    ex_id = dataio.read_shards(str(root / "a" / "examples"))[0].example_id
    assert cli.main(["edit", "--data", str(root / "a" / "examples"), "--checkpoint", str(root / "t" / "model.ckpt"),
                     "--example", ex_id, "--swap", "TurnLeft:Wobble", "--out", str(tmp_path)]) == 1
    assert "[swap]" in capsys.readouterr().err


def test_edit_caption_is_symmetric():
    assert cli.edit_caption([16, 3, 4, 17], [(3, 4)]) == [16, 4, 3, 17]


def test_every_stage_reproducible(pipeline, tmp_path):
    root, cfg = pipeline
    a_dir, t_dir = root / "a", root / "t"
    assert cli.main(["annotate", "--data", str(root / "s" / "examples"), "--out", str(tmp_path / "a")]) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(a_dir)
    assert cli.main(["train", "--config", str(cfg), "--data", str(a_dir / "examples"), "--out", str(tmp_path / "t")]) == 0
    assert tree_bytes(tmp_path / "t") == tree_bytes(t_dir)
