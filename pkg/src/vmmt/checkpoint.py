"""VMCK checkpoint files: float32 parameter tensors plus JSON metadata.

Layout (little endian)::

    "VMCK" | version u32 = 1 | entry count u32
    per entry: name length u16 | UTF-8 name | rank u8 | dims u64 * rank | f32 data
    metadata length u64 | UTF-8 JSON

A human-readable copy of the metadata is written next to the file as
``<path>.json``; the binary file alone is authoritative.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import BpeModel, TextCodec, Vocab
from .model import ModelConfig, TranslationModel

MAGIC = b"VMCK"
VERSION = 1
_HEAD = struct.Struct("<4sII")


class CheckpointError(ValueError):
    pass


def _codec_to_json(codec: TextCodec) -> dict:
    return {"vocab": list(codec.vocab.itos),
            "bpe": None if codec.bpe is None else [list(p) for p in codec.bpe.merges]}


def _codec_from_json(d: dict) -> TextCodec:
    bpe = None if d["bpe"] is None else BpeModel([tuple(p) for p in d["bpe"]])
    return TextCodec(Vocab.from_tokens(d["vocab"]), bpe)


@dataclass
class Checkpoint:
    """Parameters held at float32 precision, so evaluation matches a reload."""
    config: ModelConfig
    params: dict[str, np.ndarray]
    src_codec: TextCodec
    tgt_codec: TextCodec
    training: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: TranslationModel, src_codec: TextCodec, tgt_codec: TextCodec,
                   training: dict | None = None) -> "Checkpoint":
        params = {k: p.data.astype(np.float32).astype(np.float64) for k, p in model.params.items()}
        return cls(model.config, params, src_codec, tgt_codec, dict(training or {}))

    def model(self) -> TranslationModel:
        if len(self.src_codec.vocab) != self.config.src_vocab_size:
            raise CheckpointError("source vocab size does not match model config")
        if len(self.tgt_codec.vocab) != self.config.tgt_vocab_size:
            raise CheckpointError("target vocab size does not match model config")
        params = {k: T.parameter(v.copy(), k) for k, v in self.params.items()}
        expected = TranslationModel(self.config).params
        missing = set(expected) - set(params)
        if missing:
            raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for k, p in expected.items():
            if params[k].shape != p.shape:
                raise CheckpointError(f"{k}: shape {params[k].shape} != expected {p.shape}")
        return TranslationModel(self.config, params)

    def metadata(self) -> dict:
        return {"model_config": self.config.to_dict(),
                "src": _codec_to_json(self.src_codec),
                "tgt": _codec_to_json(self.tgt_codec),
                "training": self.training}

    def to_bytes(self) -> bytes:
        out = [_HEAD.pack(MAGIC, VERSION, len(self.params))]
        for name in sorted(self.params):
            arr = np.ascontiguousarray(self.params[name], dtype="<f4")
            raw = name.encode("utf-8")
            if len(raw) > 0xFFFF or arr.ndim > 0xFF:
                raise CheckpointError(f"{name}: name or rank too large")
            out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
            out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            out.append(arr.tobytes())
        meta = json.dumps(self.metadata(), sort_keys=True).encode("utf-8")
        out.append(struct.pack("<Q", len(meta)) + meta)
        return b"".join(out)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)
        sidecar = json.dumps(self.metadata(), sort_keys=True, indent=2)
        path.with_name(path.name + ".json").write_text(sidecar + "\n", encoding="utf-8")

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        view = memoryview(buf)
        pos = 0

        def take(n: int, what: str) -> memoryview:
            nonlocal pos
            if pos + n > len(view):
                raise CheckpointError(f"truncated {what} at byte {pos} (need {n}, have {len(view) - pos})")
            chunk = view[pos:pos + n]
            pos += n
            return chunk

        magic, version, count = _HEAD.unpack(take(_HEAD.size, "header"))
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {bytes(magic)!r}")
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        params = {}
        for _ in range(count):
            (n,) = struct.unpack("<H", take(2, "name length"))
            name = bytes(take(n, "name")).decode("utf-8")
            (rank,) = struct.unpack("<B", take(1, "rank"))
            dims = struct.unpack(f"<{rank}Q", take(8 * rank, f"{name} dims"))
            size = int(np.prod(dims, dtype=np.uint64)) if rank else 1
            data = np.frombuffer(take(4 * size, f"{name} data"), dtype="<f4")
            if name in params:
                raise CheckpointError(f"duplicate entry {name}")
            params[name] = data.reshape(dims).astype(np.float64)
        (m,) = struct.unpack("<Q", take(8, "metadata length"))
        meta = json.loads(bytes(take(m, "metadata")).decode("utf-8"))
        if pos != len(view):
            raise CheckpointError(f"{len(view) - pos} trailing bytes after metadata")
        return cls(ModelConfig.from_dict(meta["model_config"]), params,
                   _codec_from_json(meta["src"]), _codec_from_json(meta["tgt"]),
                   meta.get("training", {}))

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())
