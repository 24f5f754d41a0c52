import json
import subprocess
import sys

import numpy as np
import pytest

from v2cnet.checkpoint import load_checkpoint
from v2cnet.cli import main
from v2cnet.data import load_annotations, write_features


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name != "manifest.json"}


def synth(out, *extra):
    return main(["synth", "--out", str(out), "--clips", "6", "--dim", "17", "--tmin", "6",
                 "--tmax", "10", *extra])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert synth(root / "ds") == 0
    return root / "ds"


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--data", str(dataset / "annotations.tsv"), "--out", str(out),
                 "--hidden", "4", "--epochs", "2", "--seed", "3"]) == 0
    return out


def test_synth_is_reproducible(tmp_path):
    assert synth(tmp_path / "a", "--seed", "4") == 0
    assert synth(tmp_path / "b", "--seed", "4") == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["command"] == "synth" and manifest["seeds"] == {"seed": 4}


def test_synth_confusion_and_split(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "c"), "--clips", "40", "--dim", "17",
                 "--confuse", "stir:shake", "--split", "0.75"]) == 0
    recs = load_annotations(tmp_path / "c" / "annotations.tsv")
    assert {"stir", "shake"} <= {r.action for r in recs}
    assert len(load_annotations(tmp_path / "c" / "train.tsv")) == 30


def test_synth_rejects_bad_flags(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--out", str(tmp_path / "x"), "--noise", "-1"])
    assert exc.value.code == 2
    assert synth(tmp_path / "y", "--split", "1.5") == 1
    assert synth(tmp_path / "z", "--confuse", "stir:fly") == 1
    assert "error:" in capsys.readouterr().err


def test_synth_refuses_non_empty_dir(tmp_path):
    (tmp_path / "d").mkdir()
    (tmp_path / "d" / "keep.txt").write_text("x")
    assert synth(tmp_path / "d") == 1
    assert (tmp_path / "d" / "keep.txt").exists()
    assert synth(tmp_path / "d", "--force") == 0
    assert not (tmp_path / "d" / "keep.txt").exists()


def test_train_records_defaults(trained):
    manifest = json.loads((trained / "manifest.json").read_text())
    cfg = manifest["config"]
    assert cfg["n"] == 30 and cfg["batch_size"] == 16 and cfg["lr"] == 0.0001
    assert cfg["joint"] is True and cfg["cell"] == "lstm" and cfg["seed"] == 3
    assert manifest["threads"] == 1 and all(len(h) == 64 for h in manifest["inputs"].values())
    lines = (trained / "losses.tsv").read_text().splitlines()
    assert lines[0] == "epoch\ttotal\tcls\ttrans"
    assert [line.split("\t")[0] for line in lines[1:]] == ["1", "2"]


def test_train_ednet_flag(dataset, tmp_path):
    assert main(["train", "--data", str(dataset / "annotations.tsv"), "--out", str(tmp_path),
                 "--hidden", "3", "--epochs", "1", "--ednet"]) == 0
    assert load_checkpoint(tmp_path / "checkpoint.v2c").model.config.joint is False


def test_train_resume_continues_numbering(dataset, trained, tmp_path):
    args = ["train", "--data", str(dataset / "annotations.tsv"), "--out", str(tmp_path),
            "--resume", str(trained / "checkpoint.v2c")]
    assert main(args + ["--epochs", "4"]) == 0
    lines = (tmp_path / "losses.tsv").read_text().splitlines()[1:]
    assert [line.split("\t")[0] for line in lines] == ["3", "4"]
    assert load_checkpoint(tmp_path / "checkpoint.v2c").epoch == 4
    assert main(args + ["--epochs", "1"]) == 1


def test_train_pad_value(dataset, tmp_path):
    assert main(["train", "--data", str(dataset / "annotations.tsv"), "--out", str(tmp_path),
                 "--hidden", "3", "--epochs", "1", "--pad-value", "0"]) == 0
    assert np.all(load_checkpoint(tmp_path / "checkpoint.v2c").model.mean_frame == 0)


def test_seed_env_overrides_flag(dataset, tmp_path, monkeypatch):
    monkeypatch.setenv("V2C_SEED", "11")
    assert main(["train", "--data", str(dataset / "annotations.tsv"), "--out", str(tmp_path),
                 "--hidden", "3", "--epochs", "1", "--seed", "2"]) == 0
    assert json.loads((tmp_path / "manifest.json").read_text())["seeds"] == {"seed": 11}
    monkeypatch.setenv("V2C_SEED", "abc")
    assert main(["train", "--data", str(dataset / "annotations.tsv"), "--out", str(tmp_path),
                 "--hidden", "3", "--epochs", "1"]) == 1


def test_eval_prints_table_and_dumps(dataset, trained, tmp_path, capsys):
    dump = tmp_path / "dump.tsv"
    assert main(["eval", "--checkpoint", str(trained / "checkpoint.v2c"),
                 "--data", str(dataset / "annotations.tsv"), "--dump", str(dump)]) == 0
    out = capsys.readouterr().out
    assert out.startswith("Bleu_1\tBleu_2") and "classification branch" in out
    rows = [line.split("\t") for line in dump.read_text().splitlines()]
    assert len(rows) == 6 and all(len(r) == 6 for r in rows)
    manifest = json.loads((trained / "eval_manifest.json").read_text())
    assert set(manifest["config"]["report"]) >= {"bleu1", "cider", "action_success_rate"}


def test_eval_rejects_feature_dim_mismatch(trained, tmp_path, capsys):
    assert synth(tmp_path / "wide", "--dim", "20") == 0
    assert main(["eval", "--checkpoint", str(trained / "checkpoint.v2c"),
                 "--data", str(tmp_path / "wide" / "annotations.tsv")]) == 1
    assert "20" in capsys.readouterr().err


def test_decode(dataset, trained, tmp_path, capsys):
    feat = sorted((dataset / "features").iterdir())[0]
    assert main(["decode", "--checkpoint", str(trained / "checkpoint.v2c"), "--features", str(feat),
                 "--feeding", "autoregressive", "--manifest", str(tmp_path / "m.json")]) == 0
    fields = capsys.readouterr().out.rstrip("\n").split("\t")
    assert len(fields) == 3 and fields[2] in ("true", "false")
    assert main(["decode", "--checkpoint", str(trained / "checkpoint.v2c"),
                 "--features", str(tmp_path / "missing.v2cf")]) == 1
    write_features(tmp_path / "narrow.v2cf", np.ones((4, 5)))
    assert main(["decode", "--checkpoint", str(trained / "checkpoint.v2c"),
                 "--features", str(tmp_path / "narrow.v2cf")]) == 1


def test_gradcheck_passes_and_records_eps(tmp_path, capsys):
    assert main(["gradcheck", "--manifest", str(tmp_path / "g.json")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines and all(line.endswith("ok") for line in lines)
    assert json.loads((tmp_path / "g.json").read_text())["config"]["eps"] == 1e-6


def test_gradcheck_fault_injection_fails(tmp_path, capsys):
    assert main(["gradcheck", "--inject-fault", "--manifest", str(tmp_path / "g.json")]) == 1
    assert "gradient check failed" in capsys.readouterr().err


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "v2cnet", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("v2cnet")
