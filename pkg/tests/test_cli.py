"""Exit-code contract and end-to-end command flows."""

import csv
import json

import pytest

from attnguide.cli import main

TINY_SPEC = {"train_count": 8, "val_count": 4, "test_count": 4,
             "glyph_min": 12, "glyph_max": 16}


@pytest.fixture()
def spec_path(tmp_path):
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(TINY_SPEC))
    return str(path)


def test_unknown_command_exits_1(capsys):
    assert main(["frobnicate"]) == 1
    assert "frobnicate" in capsys.readouterr().err


def test_missing_required_option_exits_1(capsys):
    assert main(["pretrain"]) == 1
    assert "--out" in capsys.readouterr().err


def test_missing_checkpoint_exits_1(tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "nope.atth")]) == 1


def test_generate_writes_splits(tmp_path, spec_path):
    out = tmp_path / "data"
    assert main(["generate", "--spec", spec_path, "--out", str(out)]) == 0
    for split in ("train", "val", "test_biased", "test_decorrelated"):
        assert (out / split / "manifest.json").exists()
        assert (out / split / "masks.npz").exists()


def test_pretrain_then_eval(tmp_path, spec_path, capsys):
    ckpt = tmp_path / "model.atth"
    code = main(["pretrain", "--spec", spec_path, "--seed", "0",
                 "--epochs", "1", "--out", str(ckpt)])
    assert code == 0
    assert ckpt.exists()

    code = main(["eval", "--checkpoint", str(ckpt), "--spec", spec_path,
                 "--limit", "4"])
    assert code == 0
    out = json.loads(capsys.readouterr().out)
    assert set(out) >= {"accuracy_biased", "accuracy_decorrelated",
                        "attention_in_target", "attention_in_distractor"}


def test_autoloop_writes_report(tmp_path, spec_path):
    ckpt = tmp_path / "model.atth"
    assert main(["pretrain", "--spec", spec_path, "--seed", "0",
                 "--epochs", "1", "--out", str(ckpt)]) == 0
    report = tmp_path / "report.csv"
    code = main(["autoloop", "--spec", spec_path, "--checkpoint", str(ckpt),
                 "--strategy", "random", "--rounds", "1", "--epochs", "1",
                 "--report", str(report)])
    assert code == 0
    with open(report) as fh:
        rows = list(csv.reader(fh))
    assert rows[0][0] == "round"
    assert [r[0] for r in rows[1:]] == ["0", "1"]
    assert all(r[1] == "random" for r in rows[1:])


def test_compare_rejects_empty_lists(tmp_path):
    assert main(["compare", "--seeds", "", "--report",
                 str(tmp_path / "r.csv")]) == 1
