"""Command-line interface: commands, exit codes, artifacts."""

import json
import os

import pytest

from scenegen.cli import EXIT_CONFIG, EXIT_USAGE, build_parser, main
from scenegen.pipeline import bundled_grammar_path


@pytest.fixture()
def tiny_cfg(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(
        "scenario = mnist\ncanvas_size = 32\nm = 8\nl = 8\nepochs = 1\n"
        "steps_per_epoch = 2\ntarget_pool = 16\npretrain_samples = 40\n"
        "pretrain_epochs = 1\npretrain_batch = 20\nnormalizer_samples = 16\n"
        f"seed = 0\nout_dir = {tmp_path / 'out'}\n"
    )
    return str(path)


def test_grammar_check_mnist(capsys):
    assert main(["grammar-check", bundled_grammar_path("mnist.g")]) == 0
    out = capsys.readouterr().out
    assert "K=13" in out
    assert "Scene -> bg Digits" in out


def test_grammar_check_unterminable(tmp_path, capsys):
    path = tmp_path / "bad.g"
    path.write_text("S -> A ;\nA -> A a ;\n")
    assert main(["grammar-check", str(path)]) == EXIT_CONFIG
    assert "unterminable" in capsys.readouterr().err


def test_grammar_check_missing_file(capsys):
    assert main(["grammar-check", "/nonexistent.g"]) == EXIT_CONFIG


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as e:
        main(["sample"])  # missing required --config
    assert e.value.code == EXIT_USAGE


def test_unknown_command_exit_code():
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == EXIT_USAGE


def test_config_error_exit_code(tmp_path, capsys):
    path = tmp_path / "bad.cfg"
    path.write_text("nope = 1\n")
    assert main(["sample", "--config", str(path)]) == EXIT_CONFIG


def test_sample_emits_valid_json(tiny_cfg, capsys):
    assert main(["sample", "--config", tiny_cfg, "-n", "3"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert len(out) == 3
    for entry in out:
        assert entry["rules"][0] == 0  # Scene expansion comes first
        assert len(entry["text"]) == len(entry["rules"])


def test_sample_from_prior(tiny_cfg, capsys):
    assert main(["sample", "--config", tiny_cfg, "-n", "2", "--from-prior"]) == 0
    assert len(json.loads(capsys.readouterr().out)) == 2


def test_render_writes_images(tiny_cfg, tmp_path, capsys):
    out = tmp_path / "renders"
    assert main(["render", "--config", tiny_cfg, "--out", str(out), "-n", "2",
                 "--target"]) == 0
    files = sorted(os.listdir(out))
    assert files == ["scene_0000.json", "scene_0000.pgm",
                     "scene_0001.json", "scene_0001.pgm"]


def test_pretrain_writes_checkpoint(tiny_cfg, tmp_path, capsys):
    assert main(["pretrain", "--config", tiny_cfg]) == 0
    out_dir = tmp_path / "out"
    assert (out_dir / "checkpoints" / "model.npz").exists()
    assert (out_dir / "metadata.json").exists()
    assert "final NLL" in capsys.readouterr().out


def test_eval_reports_summary(tiny_cfg, tmp_path, capsys):
    assert main(["eval", "--config", tiny_cfg, "-n", "50"]) == 0
    out = capsys.readouterr().out
    summary = json.loads(out)
    assert summary["n_samples"] == 50


def test_train_writes_epochs_csv(tiny_cfg, tmp_path, capsys):
    assert main(["train", "--config", tiny_cfg]) == 0
    csv = (tmp_path / "out" / "epochs.csv").read_text().splitlines()
    assert csv[0].startswith("epoch,mean_reward")
    assert len(csv) == 2


def test_seed_override_changes_output(tiny_cfg, capsys):
    outs = []
    for seed in ("0", "1"):
        main(["sample", "--config", tiny_cfg, "-n", "5", "--seed", seed])
        outs.append(capsys.readouterr().out)
    assert outs[0] != outs[1]


def test_grad_check_command(capsys):
    assert main(["grad-check"]) == 0
    out = capsys.readouterr().out
    assert "masked_log_softmax" in out and "sequence_log_prob" in out
    assert "all ops within" in out


def test_help_lists_run_flags():
    parser = build_parser()
    for cmd in ("sample", "render", "pretrain", "train", "eval"):
        help_text = None
        for action in parser._subparsers._actions:
            if hasattr(action, "choices") and cmd in (action.choices or {}):
                help_text = action.choices[cmd].format_help()
        assert help_text is not None
        for flag in ("--config", "--seed", "--out", "--workers", "--epochs",
                     "--objective", "--extractor"):
            assert flag in help_text, (cmd, flag)
