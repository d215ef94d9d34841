import pytest

from strdistill.cli import build_parser, main
from strdistill.config import all_keys


def test_unknown_command(capsys):
    assert main(["frobnicate"]) != 0
    err = capsys.readouterr().err
    assert "usage" in err and "frobnicate" in err


def test_no_command(capsys):
    assert main([]) != 0
    assert "usage" in capsys.readouterr().err


def test_help_lists_every_field(capsys):
    with pytest.raises(SystemExit):
        build_parser().parse_args(["train", "--help"])
    out = capsys.readouterr().out
    for key in all_keys():
        assert "--" + key.replace(".", "-").replace("_", "-") in out


def test_config_error_exit_code(capsys, tmp_path):
    assert main(["train", "--lr", "fast", "--workdir", str(tmp_path)]) == 2
    assert "lr" in capsys.readouterr().err
    bad = tmp_path / "bad.yaml"
    bad.write_text("nonsense_key: 1\n")
    assert main(["train", "--config", str(bad)]) == 2
    assert "nonsense_key" in capsys.readouterr().err


def test_make_synth_twice_identical(tmp_path):
    spec = tmp_path / "s.cfg"
    spec.write_text("word_list: [cat, dog, bird]\ncount: 6\nseed: 3\n")
    assert main(["make-synth", "--spec", str(spec), "--out", str(tmp_path / "a")]) == 0
    assert main(["make-synth", "--spec", str(spec), "--out", str(tmp_path / "b")]) == 0
    for rel in ["gt.txt", *[f"images/{i:06d}.png" for i in range(6)]]:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_train_evaluate_predict(tmp_path, capsys):
    ckpt_dir = tmp_path / "ckpt"
    cfg = tmp_path / "c.yaml"
    cfg.write_text(
        "synth_count: 24\nbatch_size: 8\nepochs: 1\nmax_steps: 2\n"
        "loss:\n  stage_mask: [false, false, false, false, false, false, false]\n"
        "student:\n  enc_depth: 4\n  enc_width: 32\n  enc_heads: 4\n  dec_width: 32\n  dec_heads: 4\n"
    )
    code = main(["train", "--config", str(cfg), "--workdir", str(tmp_path / "w"), "--checkpoint-dir", str(ckpt_dir)])
    assert code == 0
    ckpt = ckpt_dir / "final.safetensors"
    assert ckpt.exists()
    synth = next((tmp_path / "w").glob("synth-*"))
    capsys.readouterr()
    assert main(["evaluate", "--checkpoint", str(ckpt), "--data", str(synth), "--out", str(tmp_path / "ev")]) == 0
    assert "weighted avg" in capsys.readouterr().out
    assert main(["predict", "--checkpoint", str(ckpt), "--image", str(synth / "images/000000.png")]) == 0
    text = capsys.readouterr().out.strip()
    assert len(text) <= 25 and text == text.lower()


def test_missing_dataset_exit_code(tmp_path, capsys):
    assert main(["evaluate", "--checkpoint", str(tmp_path / "none.safetensors"), "--data", str(tmp_path)]) == 5
    assert "BadCheckpoint" in capsys.readouterr().err
