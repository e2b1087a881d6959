import json
import subprocess
import sys

import numpy as np
import pytest

from vmmt.cli import build_parser, main
from vmmt.data import load_features, read_lines


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def _quick_config(data_dir, **over):
    cfg = json.loads((data_dir / "config.json").read_text())
    cfg.update({"max_epochs": 1, "patience": 1, **over})
    cfg["model"].update({"embed_dim": 8, "hidden_dim": 8})
    path = data_dir / "quick.json"
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture
def synth_dir(tmp_path, capsys):
    code, out, _ = run(capsys, "synth-data", "--seed", "3", "--pairs", "40", "--feature-dim", "8",
                       "--noise", "0.01", "--out", str(tmp_path / "d"))
    assert code == 0 and json.loads(out) == {"out": str(tmp_path / "d"), "train": 40, "valid": 4,
                                             "test": 4}
    return tmp_path / "d"


def test_synth_data_files(synth_dir):
    assert len(read_lines(synth_dir / "train.src")) == 40
    assert load_features(synth_dir / "valid.fvec").shape == (4, 8)
    cfg = json.loads((synth_dir / "config.json").read_text())
    assert cfg["model"]["image_dim"] == 8 and cfg["bpe_merges"] is None


def test_train_translate_evaluate(synth_dir, tmp_path, capsys):
    cfg = _quick_config(synth_dir)
    code, out, _ = run(capsys, "train", "--config", str(cfg), "--variant", "vmmt_c",
                       "--out", str(tmp_path / "m"))
    assert code == 0 and json.loads(out)["epochs"] == 1
    ckpt = str(tmp_path / "m" / "best.vmck")
    src = str(synth_dir / "test.src")

    code, out, _ = run(capsys, "translate", "--ckpt", ckpt, "--src", src, "--mode", "beam",
                       "--beam-size", "3", "--z", "mean", "--seed", "0")
    assert code == 0 and len(out.splitlines()) == 4
    code, again, _ = run(capsys, "translate", "--ckpt", ckpt, "--src", src, "--mode", "beam",
                         "--beam-size", "3", "--z", "mean", "--seed", "0")
    assert again == out

    code, out, _ = run(capsys, "translate", "--ckpt", ckpt, "--src", src, "--z", "sample",
                       "--seed", "18446744073709551615")
    assert code == 0 and len(out.splitlines()) == 4

    args = ["evaluate", "--ckpt", ckpt, "--src", src, "--ref", str(synth_dir / "test.tgt"),
            "--features", str(synth_dir / "test.fvec")]
    code, out, _ = run(capsys, *args)
    rep = json.loads(out)
    assert code == 0 and set(rep) == {"bleu4", "chrf3", "outputs", "elbo", "sentences"}
    assert rep["elbo"]["kl_raw"] >= 0
    assert run(capsys, *args)[1] == out


def test_backtranslate_writes_aligned_files(synth_dir, tmp_path, capsys):
    cfg = json.loads(_quick_config(synth_dir).read_text())
    for side in ("train", "valid"):
        cfg[f"{side}_src"], cfg[f"{side}_tgt"] = cfg[f"{side}_tgt"], cfg[f"{side}_src"]
    (tmp_path / "rev.json").write_text(json.dumps(cfg))
    assert run(capsys, "train", "--config", str(tmp_path / "rev.json"), "--variant", "nmt",
               "--out", str(tmp_path / "rev"))[0] == 0
    prefix = str(tmp_path / "bt")
    code, out, _ = run(capsys, "backtranslate", "--ckpt", str(tmp_path / "rev" / "best.vmck"),
                       "--mono", str(synth_dir / "train.tgt"), "--out", prefix,
                       "--features", str(synth_dir / "train.fvec"))
    assert code == 0
    assert len(read_lines(prefix + ".src")) == 40
    assert read_lines(prefix + ".tgt") == read_lines(synth_dir / "train.tgt")
    np.testing.assert_array_equal(load_features(prefix + ".fvec"),
                                  load_features(synth_dir / "train.fvec"))


def test_errors_exit_nonzero(tmp_path, capsys):
    code, _, err = run(capsys, "translate", "--ckpt", str(tmp_path / "none.vmck"),
                       "--src", str(tmp_path / "none.txt"))
    assert code == 2 and "error" in err
    bad = tmp_path / "bad.json"
    bad.write_text('{"lr": -1}')
    code, _, err = run(capsys, "train", "--config", str(bad), "--variant", "nmt",
                       "--out", str(tmp_path / "o"))
    assert code == 2 and "lr" in err
    for argv in (["train", "--config", "x", "--variant", "vmmt_x", "--out", "o"],
                 ["translate", "--ckpt", "c", "--src", "s", "--beam-size", "0"],
                 ["translate", "--ckpt", "c", "--src", "s", "--z", "median"],
                 ["translate", "--ckpt", "c", "--src", "s", "--seed", "-1"],
                 ["grad-check", "--variant", "rnn"]):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 2


def test_parser_flags_are_exact():
    p = build_parser()
    a = p.parse_args(["grad-check", "--variant", "vmmt_f", "--tol", "1e-4"])
    assert a.variant == "vmmt_f" and a.tol == 1e-4
    a = p.parse_args(["translate", "--ckpt", "c", "--src", "s", "--mode", "beam",
                      "--beam-size", "4", "--z", "sample", "--seed", "7"])
    assert (a.mode, a.beam_size, a.z, a.seed) == ("beam", 4, "sample", 7)


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "vmmt.cli", "--help"], capture_output=True,
                         text=True, check=True).stdout
    for cmd in ("train", "translate", "evaluate", "backtranslate", "synth-data", "grad-check"):
        assert cmd in out
