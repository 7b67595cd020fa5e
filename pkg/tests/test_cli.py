import json

import numpy as np
import pytest

from resattunet import cli
from resattunet import data as D

MODEL = '{"in_bands": 4, "num_classes": 4, "stage_widths": [4, 8]}'


def _run(capsys, *argv):
    code = cli.run(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def synth_dir(tmp_path, capsys):
    code, out, _ = _run(capsys, "synth", "--out", str(tmp_path / "ds"), "--set", "synth.n_patches=5")
    assert code == 0
    return tmp_path / "ds"


def test_synth_and_resolved_config(synth_dir):
    m = D.Manifest.load(synth_dir / "manifest.json")
    assert [len(m.split(s)) for s in D.SPLITS] == [3, 1, 1]
    resolved = json.loads((synth_dir / "resolved_config.json").read_text())
    assert resolved["synth"]["n_patches"] == 5 and resolved["out"] == str(synth_dir)


def test_precedence_file_env_set(tmp_path, capsys, monkeypatch):
    (tmp_path / "c.json").write_text(json.dumps({"seed": 1, "synth": {"n_patches": 4}}))
    monkeypatch.setenv("SEED", "2")
    _run(capsys, "synth", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o"))
    cfg = json.loads((tmp_path / "o/resolved_config.json").read_text())
    assert cfg["seed"] == 2 and cfg["synth"]["n_patches"] == 4
    _run(capsys, "synth", "--config", str(tmp_path / "c.json"), "--set", "seed=3", "--out", str(tmp_path / "p"))
    assert json.loads((tmp_path / "p/resolved_config.json").read_text())["seed"] == 3


def test_weights_default_counts(tmp_path, capsys):
    code, out, _ = _run(capsys, "weights", "--out", str(tmp_path))
    assert code == 0
    w = json.loads(out)
    assert len(w) == 15 and w["MD"] == pytest.approx(42.0623271, abs=1e-6)
    assert json.loads((tmp_path / "class_weights.json").read_text()) == w


def test_train_evaluate_predict(synth_dir, tmp_path, capsys):
    run = tmp_path / "run"
    common = ["--set", f"model={MODEL}", "--set", f"manifest={synth_dir / 'manifest.json'}"]
    code, out, err = _run(capsys, "train", *common, "--set", "train.epochs=2", "--out", str(run))
    assert code == 0, err
    assert json.loads(out)["epochs"] == 2
    ckpt = ["--set", f"checkpoint={run / 'best.ckpt'}"]
    code, out, err = _run(capsys, "evaluate", *common, *ckpt, "--set", "split=val", "--out", str(run))
    assert code == 0, err
    assert set(json.loads(out)) >= {"macro_f1", "iou", "subset_accuracy"}
    assert (run / "metrics_val.csv").exists() and (run / "confusion_val.csv").exists()
    image = synth_dir / "synth_0000.msp"
    code, out, err = _run(capsys, "predict", *common, *ckpt, "--set", f"image={image}", "--out", str(run))
    assert code == 0, err
    mask = D.read_mask(json.loads(out)["mask"], 4)
    assert mask.shape == (32, 32) and mask.min() >= 1


def test_evaluate_empty_split_is_usage_error(tmp_path, capsys):
    _run(capsys, "synth", "--out", str(tmp_path / "ds"), "--set", "synth.val_fraction=0", "--set", "synth.test_fraction=0")
    code, _, err = _run(capsys, "evaluate", "--set", f"manifest={tmp_path / 'ds/manifest.json'}", "--set", "split=test",
                        "--out", str(tmp_path / "o"))
    assert code == 2 and json.loads(err)["error"] == "usage"


@pytest.mark.parametrize("argv", [["bogus"], ["synth", "--nope"], ["synth", "--set", "novalue"],
                                  ["train", "--config", "/does/not/exist.json"], ["train"]])
def test_usage_errors(tmp_path, capsys, argv):
    code, _, err = _run(capsys, *argv, *([] if argv == ["bogus"] else ["--out", str(tmp_path)]))
    assert code == 2
    assert json.loads(err.strip().splitlines()[-1])["error"] == "usage"


def test_runtime_error_exit_one(synth_dir, tmp_path, capsys):
    (tmp_path / "junk.ckpt").write_bytes(b"CKPT\x01")
    code, _, err = _run(capsys, "evaluate", "--set", f"model={MODEL}", "--set", f"manifest={synth_dir / 'manifest.json'}",
                        "--set", f"checkpoint={tmp_path / 'junk.ckpt'}", "--out", str(tmp_path))
    assert code == 1
    assert json.loads(err)["error"] == "CheckpointError"


def test_gradcheck_subset(tmp_path, capsys):
    code, out, _ = _run(capsys, "gradcheck", "--set", "gradcheck.seeds=2", "--set", 'gradcheck.cases=["conv2d","cbam"]',
                        "--out", str(tmp_path))
    assert code == 0
    summary = json.loads(out.strip().splitlines()[-1])
    assert summary["pass"] and summary["max_rel_err"] < 1e-4
    assert set(json.loads((tmp_path / "gradcheck.json").read_text())) == {"conv2d", "cbam"}


def test_gradcheck_unknown_case(tmp_path, capsys):
    code, _, err = _run(capsys, "gradcheck", "--set", 'gradcheck.cases=["nope"]', "--out", str(tmp_path))
    assert code == 2 and "nope" in err
