import json

import numpy as np
import pytest

from groundtraj.cli import EXIT_INVALID, EXIT_OK, EXIT_RUNTIME, OUT_ENV, apply_overrides, main
from groundtraj.annotation import read_dataset


@pytest.fixture(autouse=True)
def out_root(tmp_path, monkeypatch):
    root = tmp_path / "out"
    monkeypatch.setenv(OUT_ENV, str(root))
    return root


def test_overrides():
    d = apply_overrides({"a": {"b": 1}}, ["a.b=2", "a.c=[1,2]", "name=hello", "flag=true"])
    assert d == {"a": {"b": 2, "c": [1, 2]}, "name": "hello", "flag": True}
    with pytest.raises(ValueError):
        apply_overrides({}, ["novalue"])


def test_generate_annotate_round(tiny_config, out_root, capsys):
    assert main(["generate-world", "--config", str(tiny_config), "--count", "3", "--scenes",
                 "--out", "w"]) == EXIT_OK
    w = out_root / "w"
    assert len(read_dataset(w / "dataset.jsonl")) == 3
    assert np.load(w / "latents.npy").shape == (3, 4, 8, 8, 1)
    assert main(["annotate", "--scenes", str(w / "scenes"), "--out", "ann.jsonl",
                 "--threshold-frac", "0.05"]) == EXIT_OK
    recs = read_dataset(out_root / "ann.jsonl")
    assert len(recs) == 3 and all(r.trajectories for r in recs)


def test_train_sample_evaluate(tiny_config, out_root):
    assert main(["generate-world", "--config", str(tiny_config), "--count", "8", "--out", "w"]) == 0
    assert main(["train", "--config", str(tiny_config), "--data", str(out_root / "w"),
                 "--out", "t"]) == EXIT_OK
    ck = out_root / "t" / "checkpoint.npz"
    assert ck.exists()
    assert main(["sample", "--config", str(tiny_config), "--checkpoint", str(ck), "--count", "2",
                 "--scheme", "dual", "--out", "s"]) == EXIT_OK
    vids = np.load(out_root / "s" / "videos.npy")
    assert vids.shape == (2, 4, 8, 8, 1)
    assert (out_root / "s" / "frames.png").exists()
    assert main(["evaluate", "--videos", str(out_root / "s" / "videos.npy"),
                 "--prompts", str(out_root / "s" / "prompts.jsonl"), "--out", "m.json"]) == EXIT_OK
    rep = json.loads((out_root / "m.json").read_text())
    assert rep["aggregate"]["count"] == 2 and len(rep["videos"]) == 2


def test_run_experiment_outputs(tiny_config, out_root, capsys):
    assert main(["run-experiment", "--config", str(tiny_config), "--set", "model.lam=0.0",
                 "--out", "e"]) == EXIT_OK
    e = out_root / "e"
    for f in ("report.json", "report.txt", "config.json", "checkpoint.npz", "frames_truth.png",
              "frames_guided.png"):
        assert (e / f).exists(), f
    rep = json.loads((e / "report.json").read_text())
    assert [r["name"] for r in rep["rows"]] == ["unconditioned", "guided"]
    assert rep["base_model_equivalent"] is True
    assert "base text-to-video" in capsys.readouterr().out


def test_grad_check_command(capsys):
    assert main(["grad-check"]) == EXIT_OK
    assert "PASS" in capsys.readouterr().out
    assert main(["grad-check", "--eps", "0.5", "--tol", "1e-12"]) == EXIT_INVALID


def test_validation_failures_exit_1(tiny_config, tmp_path):
    assert main(["run-experiment", "--config", str(tiny_config), "--set", "bogus=1"]) == EXIT_INVALID
    assert main(["run-experiment", "--config", str(tiny_config),
                 "--set", "stage2.max_tracks=99"]) == EXIT_INVALID
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"version": 1, "caption": "x", "dims": {"frames": 1, "h": 4, "w": 4}, '
                   '"tracks": [{"id": "m0", "text": "t", "pts": [[9.0, 1.0, 1]]}], "meta": {}}\n')
    np.save(tmp_path / "v.npy", np.zeros((1, 1, 4, 4, 1)))
    assert main(["evaluate", "--videos", str(tmp_path / "v.npy"), "--prompts", str(bad)]) == EXIT_INVALID
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == EXIT_INVALID


def test_runtime_failure_exit_2(tiny_config):
    # a stage that cannot run (blobs cannot be placed) is a runtime failure
    code = main(["run-experiment", "--config", str(tiny_config), "--set", "world.min_blobs=3",
                 "--set", "world.max_blobs=3", "--set", "world.min_separation=50",
                 "--set", "world.max_retries=2"])
    assert code == EXIT_RUNTIME
