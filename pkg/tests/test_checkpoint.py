import json
import struct

import numpy as np
import pytest

from vmmt.checkpoint import MAGIC, Checkpoint, CheckpointError
from vmmt.data import TextCodec
from vmmt.model import ModelConfig, TranslationModel
from vmmt.train import evaluate, report_json

SRC = ["s1 s2 s3", "s2 s4", "s3 s3 s1 s4"]
TGT = ["t3 t2 t1", "t4 t2", "t4 t1 t3 t3"]


def _ckpt(variant="vmmt_f", bpe=None):
    src, tgt = TextCodec.fit(SRC, bpe), TextCodec.fit(TGT, bpe)
    cfg = ModelConfig(variant, len(src.vocab), len(tgt.vocab), embed_dim=4, hidden_dim=5,
                      latent_dim=2, image_dim=3)
    model = TranslationModel(cfg, seed=3)
    rng = np.random.default_rng(0)
    for p in model.params.values():
        p.data = rng.normal(size=p.shape)
    return Checkpoint.from_model(model, src, tgt, {"epoch": 4, "best_val_bleu": 12.5})


def test_roundtrip_preserves_everything(tmp_path):
    ck = _ckpt(bpe=5)
    ck.save(tmp_path / "m.vmck")
    back = Checkpoint.load(tmp_path / "m.vmck")
    assert back.config == ck.config and back.training == ck.training
    assert back.src_codec.vocab == ck.src_codec.vocab
    assert back.tgt_codec.bpe.merges == ck.tgt_codec.bpe.merges
    assert set(back.params) == set(ck.params)
    for k in ck.params:
        np.testing.assert_array_equal(back.params[k], ck.params[k])
    side = json.loads((tmp_path / "m.vmck.json").read_text())
    assert side["model_config"]["variant"] == "vmmt_f"
    assert back.to_bytes() == ck.to_bytes()


def test_evaluation_identical_after_reload(tmp_path):
    ck = _ckpt("vmmt_c")
    ck.save(tmp_path / "m.vmck")
    feats = np.random.default_rng(1).normal(size=(3, 3))
    a = report_json(evaluate(ck, SRC, TGT, feats))
    b = report_json(evaluate(Checkpoint.load(tmp_path / "m.vmck"), SRC, TGT, feats))
    assert a == b


def test_evaluate_reference_against_itself():
    ck = _ckpt("nmt")
    rep = evaluate(ck, SRC, TGT)
    assert rep["sentences"] == 3 and len(rep["outputs"]) == 3 and rep["elbo"] is None


def test_byte_layout_header():
    raw = _ckpt().to_bytes()
    magic, version, count = struct.unpack_from("<4sII", raw)
    assert magic == MAGIC and version == 1 and count == len(_ckpt().params)
    (name_len,) = struct.unpack_from("<H", raw, 12)
    name = raw[14:14 + name_len].decode()
    assert name == sorted(_ckpt().params)[0]


def test_corruptions_are_reported():
    raw = _ckpt().to_bytes()
    with pytest.raises(CheckpointError, match="bad magic"):
        Checkpoint.from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="version"):
        Checkpoint.from_bytes(raw[:4] + struct.pack("<I", 9) + raw[8:])
    for cut in (3, 20, len(raw) // 2, len(raw) - 1):
        with pytest.raises(CheckpointError, match="truncated|metadata"):
            Checkpoint.from_bytes(raw[:cut])
    with pytest.raises(CheckpointError, match="trailing"):
        Checkpoint.from_bytes(raw + b"\0")


def test_mismatched_params_rejected():
    ck = _ckpt()
    name = sorted(ck.params)[0]
    ck.params[name] = np.zeros((1, 1, 1))
    with pytest.raises(CheckpointError, match="shape"):
        ck.model()
    ck = _ckpt()
    del ck.params[name]
    with pytest.raises(CheckpointError, match="lacks"):
        ck.model()


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        Checkpoint.load(tmp_path / "nope.vmck")
