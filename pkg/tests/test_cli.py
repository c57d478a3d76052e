import json

import pytest
from srwseg import AblationRow, load_report
from srwseg.cli import build_parser, format_ablation_table, run

TINY = [
    "--set", "stage_channels=4,8,8,8",
    "--set", "srw_stages=1",
    "--set", "aspp_dilations=1,2",
    "--set", "input_size=32",
    "--set", "blocks_per_stage=1",
    "--set", "aspp_channels=8",
    "--set", "low_level_channels=4",
    "--set", "decoder_channels=8",
    "--set", "epochs=2",
    "--set", "warmup_epochs=1",
    "--set", "batch_size=4",
]


def test_no_command_is_a_usage_error(capsys):
    assert run([]) == 2


def test_unknown_config_key(capsys):
    assert run(["train", "--set", "learning_rate=0.1"]) == 2
    assert "learning_rate" in capsys.readouterr().err


def test_missing_checkpoint(tmp_path, capsys):
    assert run(["eval", "--checkpoint", str(tmp_path / "nope.ckpt")]) == 2
    assert "file not found" in capsys.readouterr().err


def test_missing_corpus(tmp_path):
    assert run(["train", "--corpus", str(tmp_path / "nothing"), "--output", str(tmp_path / "run")]) == 2


def test_input_size_mismatch_is_a_usage_error(tmp_path, corpus, capsys):
    args = ["train", "--corpus", str(corpus), "--output", str(tmp_path / "run"), *TINY]
    assert run([*args, "--set", "input_size=64"]) == 2
    assert "input_size 64x64" in capsys.readouterr().err
    assert not (tmp_path / "run").exists()


def test_help_lists_config_keys():
    text = build_parser().format_help()
    assert "isw_weight" in text
    assert "srw_stages" in text


def test_synthgen_respects_force(tmp_path, monkeypatch):
    monkeypatch.setenv("SRWSEG_CACHE", str(tmp_path / "cache"))
    args = ["synthgen", "--set", "source_count=10", "--set", "target_count=2", "--set", "image_size=32"]
    assert run(args) == 0
    assert (tmp_path / "cache" / "corpus-seed0" / "manifest.json").exists()
    assert run(args) == 2
    assert run(args + ["--force"]) == 0


def test_train_then_eval(tmp_path, corpus, capsys):
    run_dir = tmp_path / "run"
    assert run(["train", "--corpus", str(corpus), "--output", str(run_dir), *TINY]) == 0
    report_dir = tmp_path / "reports"
    code = run(
        [
            "eval",
            "--checkpoint", str(run_dir / "last.ckpt"),
            "--corpus", str(corpus),
            "--report-dir", str(report_dir),
            "--overlays", str(tmp_path / "ov"),
            "--overlay-limit", "2",
        ]
    )
    assert code == 0
    assert load_report(report_dir / "test-target.json").n == 5
    assert load_report(report_dir / "test-source.json").n == 2
    assert len(list((tmp_path / "ov" / "test-target").glob("*.png"))) == 2
    assert "test-target (n=5)" in capsys.readouterr().out


def test_corrupt_checkpoint_is_internal_error(tmp_path, corpus):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    assert run(["eval", "--checkpoint", str(bad), "--corpus", str(corpus)]) == 1


def test_format_ablation_table():
    rows = [
        AblationRow(srw_stages=[], target_iou=0.5, target_iou_std=0.1, source_iou=0.8, checkpoint="a"),
        AblationRow(srw_stages=[1, 2], target_iou=0.6, target_iou_std=0.05, source_iou=0.79, checkpoint="b"),
    ]
    lines = format_ablation_table(rows).splitlines()
    assert lines[1].startswith("{}")
    assert lines[2].startswith("{1,2}")
    assert "0.6000±0.0500" in lines[2]


@pytest.mark.slow
def test_ablate(tmp_path, corpus):
    out = tmp_path / "sweep"
    assert run(["ablate", "--corpus", str(corpus), "--output", str(out), *TINY]) == 0
    rows = json.loads((out / "ablation.json").read_text())
    assert [r["srw_stages"] for r in rows] == [[], [1], [1, 2], [1, 2, 3]]


@pytest.mark.slow
def test_selftest_command():
    assert run(["selftest"]) == 0
