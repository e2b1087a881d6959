import json
import math

import numpy as np
import pytest

from conftest import TINY_MODEL
from vmmt.checkpoint import Checkpoint
from vmmt.data import SYNTHETIC, DataError, TextCodec, read_lines
from vmmt.model import TranslationModel
from vmmt.nn import ConfigError
from vmmt.train import (LOG_KEYS, TrainConfig, VocabMismatch, backtranslate, encode_corpus,
                        pretrain_finetune, run_config, train_model)


def _setup(root, cfg_dict, variant="vmmt_f", **over):
    cfg = TrainConfig.from_dict({**cfg_dict, **over})
    src_lines, tgt_lines = read_lines(cfg.train_src), read_lines(cfg.train_tgt)
    src, tgt = TextCodec.fit(src_lines, None), TextCodec.fit(tgt_lines, None)
    from vmmt.data import load_features
    corpus = encode_corpus(src_lines, tgt_lines, src, tgt, load_features(cfg.train_features))
    model = TranslationModel(cfg.model_config(variant, len(src.vocab), len(tgt.vocab)), seed=cfg.seed)
    return cfg, model, src, tgt, corpus, read_lines(cfg.valid_src), read_lines(cfg.valid_tgt)


def test_zero_lr_stops_on_patience_with_frozen_params(tiny_task, tmp_path):
    root, base = tiny_task
    cfg, model, src, tgt, corpus, vs, vt = _setup(root, base, lr=0.0, max_epochs=40, patience=10)
    before = {k: p.data.copy() for k, p in model.params.items()}
    res = train_model(model, src, tgt, cfg, corpus, vs, vt, tmp_path / "run")
    assert res.stop_reason == "patience" and len(res.history) == 11
    assert [h["selected"] for h in res.history] == [True] + [False] * 10
    assert len({h["val_bleu"] for h in res.history}) == 1
    for k, p in model.params.items():
        np.testing.assert_array_equal(p.data, before[k])
    lines = (tmp_path / "run" / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 11 and tuple(json.loads(lines[0])) == LOG_KEYS
    assert Checkpoint.load(tmp_path / "run" / "best.vmck").training["epoch"] == 1


def test_runs_are_bit_identical(tiny_task, tmp_path):
    root, base = tiny_task
    losses = []
    for run in range(2):
        cfg, model, src, tgt, corpus, vs, vt = _setup(root, base, max_epochs=1, patience=1)
        res = train_model(model, src, tgt, cfg, corpus, vs, vt, tmp_path / f"r{run}")
        losses.append([s["loss"] for s in res.steps])
    assert losses[0] == losses[1]
    assert (tmp_path / "r0" / "best.vmck").read_bytes() == (tmp_path / "r1" / "best.vmck").read_bytes()


def test_free_bits_floor_holds_every_step(tiny_task):
    root, base = tiny_task
    cfg, model, src, tgt, corpus, vs, vt = _setup(root, base, free_bits=1.5, max_epochs=2)
    res = train_model(model, src, tgt, cfg, corpus, vs, vt)
    assert all(s["kl_clamped"] >= 1.5 * math.log(2) - 1e-12 for s in res.steps)
    assert all(s["kl_clamped"] >= s["kl_raw"] - 1e-12 for s in res.steps)


def test_pretraining_without_epochs_is_plain_training(tiny_task, tmp_path):
    root, base = tiny_task
    outs = []
    for name, fn in (("a", "pre"), ("b", "plain")):
        cfg, model, src, tgt, corpus, vs, vt = _setup(root, base, pretrain_epochs=0)
        if fn == "pre":
            pretrain_finetune(model, src, tgt, cfg, corpus, corpus.with_origin(SYNTHETIC),
                              vs, vt, tmp_path / name)
        else:
            train_model(model, src, tgt, cfg, corpus, vs, vt, tmp_path / name)
        outs.append((tmp_path / name / "best.vmck").read_bytes())
    assert outs[0] == outs[1]


def test_pretraining_epochs_mix_and_never_select(tiny_task, tmp_path):
    root, base = tiny_task
    cfg, model, src, tgt, corpus, vs, vt = _setup(root, base, pretrain_epochs=2, max_epochs=1,
                                                  patience=1)
    synth = corpus.subset(range(25)).with_origin(SYNTHETIC)
    res = pretrain_finetune(model, src, tgt, cfg, corpus.subset(range(10)), synth, vs, vt,
                            tmp_path / "p")
    assert res.pretrain_epoch_sizes == [50, 50]
    assert all(not h["selected"] for h in res.pretrain_history)
    assert len((tmp_path / "p" / "pretrain_log.jsonl").read_text().splitlines()) == 2
    assert Checkpoint.load(tmp_path / "p" / "best.vmck").training["epoch"] == 1


def test_non_finite_loss_aborts(tiny_task, tmp_path):
    root, base = tiny_task
    cfg, model, src, tgt, corpus, vs, vt = _setup(root, base, max_epochs=3, patience=3)
    model.params["gen.out.b"].data[5] = np.inf
    res = train_model(model, src, tgt, cfg, corpus, vs, vt, tmp_path / "nf")
    assert res.stop_reason == "non_finite" and res.history == []
    assert (tmp_path / "nf" / "best.vmck").exists()


def test_run_config_writes_artifacts(tiny_task, tmp_path):
    root, base = tiny_task
    res = run_config(TrainConfig.from_dict(base), "vmmt_c", tmp_path / "out")
    assert res.stop_reason == "max_epochs" and len(res.history) == 2
    for name in ("best.vmck", "best.vmck.json", "config.json", "train_log.jsonl", "steps.jsonl"):
        assert (tmp_path / "out" / name).exists()
    with pytest.raises(ConfigError, match="train_features"):
        run_config(TrainConfig.from_dict({**base, "train_features": None}), "vmmt_f", tmp_path / "x")


def test_config_validation():
    TrainConfig(lr=0.0)
    for bad in ({"lr": -1.0}, {"patience": 0}, {"patience": 50, "max_epochs": 40},
                {"batch_size": 0}, {"free_bits": -1.0}, {"model": {"variant": "nmt"}},
                {"model": {"free_bits": 1.0}}, {"unknown_key": 1}):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict(bad)
    cfg = TrainConfig(model=dict(TINY_MODEL))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_encode_corpus_drops_empty_pairs():
    codec = TextCodec.fit(["a b", "c"], None)
    c = encode_corpus(["a b", "", "c"], ["c", "a", " "], codec, codec, np.eye(3))
    assert len(c) == 1 and c.feature_rows == [0]
    with pytest.raises(DataError):
        encode_corpus(["a"], ["a", "b"], codec, codec)


def test_backtranslate_contract(tiny_task, tmp_path):
    root, base = tiny_task
    cfg = TrainConfig.from_dict({**base, "max_epochs": 1, "patience": 1,
                                 "train_src": base["train_tgt"], "train_tgt": base["train_src"],
                                 "valid_src": base["valid_tgt"], "valid_tgt": base["valid_src"]})
    run_config(cfg, "nmt", tmp_path / "rev")
    rev = Checkpoint.load(tmp_path / "rev" / "best.vmck")
    mono = read_lines(root / "test.tgt")
    out = backtranslate(rev, mono)
    assert len(out) == len(mono)
    with pytest.raises(VocabMismatch):
        backtranslate(rev, ["zzz qqq"])
    run_config(TrainConfig.from_dict({**base, "max_epochs": 1, "patience": 1}), "vmmt_f",
               tmp_path / "lat")
    with pytest.raises(ValueError, match="text-only"):
        backtranslate(Checkpoint.load(tmp_path / "lat" / "best.vmck"), read_lines(root / "test.src"))
