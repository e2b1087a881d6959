"""Training with BLEU-based model selection, back-translation and evaluation."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from . import tensor as T
from .checkpoint import Checkpoint
from .data import (SYNTHETIC, DataError, ParallelCorpus, TextCodec, load_features, make_batch,
                   make_batches, mix_upsample, read_lines, tokenize)
from .metrics import bleu4, chrf3
from .model import ElboReport, ModelConfig, TranslationModel

log = logging.getLogger(__name__)

LOG_KEYS = ("epoch", "text_ll", "image_ll", "kl_raw", "kl_clamped", "elbo", "val_bleu", "selected")
# ModelConfig fields owned by the trainer or the data rather than the "model" block
_DERIVED_MODEL_KEYS = ("variant", "src_vocab_size", "tgt_vocab_size", "free_bits")


class VocabMismatch(DataError):
    pass


@dataclass
class TrainConfig:
    model: dict = field(default_factory=dict)
    lr: float = 0.002
    batch_size: int = 40
    max_epochs: int = 40
    patience: int = 10
    seed: int = 0
    free_bits: float = 0.0
    pretrain_epochs: int = 3
    clip_norm: float = 5.0
    bpe_merges: int | None = 10000
    decode_batch: int = 64
    train_src: str | None = None
    train_tgt: str | None = None
    train_features: str | None = None
    valid_src: str | None = None
    valid_tgt: str | None = None
    valid_features: str | None = None
    synthetic_src: str | None = None
    synthetic_tgt: str | None = None
    synthetic_features: str | None = None
    out_dir: str | None = None

    def __post_init__(self):
        if self.lr < 0:
            raise nn.ConfigError("lr must be >= 0")
        if self.batch_size < 1:
            raise nn.ConfigError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise nn.ConfigError("max_epochs must be >= 1")
        if not 1 <= self.patience <= self.max_epochs:
            raise nn.ConfigError("patience must be in [1, max_epochs]")
        if self.pretrain_epochs < 0:
            raise nn.ConfigError("pretrain_epochs must be >= 0")
        if self.free_bits < 0:
            raise nn.ConfigError("free_bits must be >= 0")
        clash = set(self.model) & set(_DERIVED_MODEL_KEYS)
        if clash:
            raise nn.ConfigError(f"set {sorted(clash)} outside the model block")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise nn.ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainConfig":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise nn.ConfigError(f"{path}: {exc}") from exc
        if not isinstance(d, dict):
            raise nn.ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)

    def model_config(self, variant: str, src_vocab_size: int, tgt_vocab_size: int) -> ModelConfig:
        return ModelConfig(variant=variant, src_vocab_size=src_vocab_size,
                           tgt_vocab_size=tgt_vocab_size, free_bits=self.free_bits, **self.model)


@dataclass
class TrainResult:
    best: Checkpoint | None
    history: list[dict]
    steps: list[dict]
    stop_reason: str
    pretrain_history: list[dict] = field(default_factory=list)
    pretrain_epoch_sizes: list[int] = field(default_factory=list)

    @property
    def best_bleu(self) -> float:
        return max((h["val_bleu"] for h in self.history), default=float("nan"))


def _check_vocab(corpus: ParallelCorpus, cfg: ModelConfig, what: str) -> None:
    src_max = max((max(s) for s in corpus.src if s), default=0)
    tgt_max = max((max(t) for t in corpus.tgt if t), default=0)
    if src_max >= cfg.src_vocab_size or tgt_max >= cfg.tgt_vocab_size:
        raise VocabMismatch(f"{what}: token ids exceed the model vocabulary "
                            f"({src_max}/{cfg.src_vocab_size}, {tgt_max}/{cfg.tgt_vocab_size})")


def translate_lines(model: TranslationModel, src_codec: TextCodec, tgt_codec: TextCodec,
                    lines: Sequence[str], mode: str = "greedy", beam_size: int = 5,
                    z_policy: str = "mean", seed: int = 0, chunk: int = 64) -> list[str]:
    """Translate text lines; empty input lines give empty output lines."""
    ids = [src_codec.encode(line) for line in lines]
    out = [""] * len(lines)
    todo = [i for i, s in enumerate(ids) if s]
    for c, lo in enumerate(range(0, len(todo), chunk)):
        part = todo[lo:lo + chunk]
        # one seed per chunk keeps sampled z reproducible
        chunk_seed = int(np.random.SeedSequence([seed, c]).generate_state(1)[0])
        hyps = model.translate([ids[i] for i in part], mode, beam_size, z_policy, chunk_seed)
        for i, h in zip(part, hyps):
            out[i] = tgt_codec.decode(h)
    return out


def tokenized_refs(lines: Sequence[str]) -> list[str]:
    return [" ".join(tokenize(line)) for line in lines]


class Trainer:
    """Owns the parameters, the optimiser and the noise streams of one run."""

    def __init__(self, model: TranslationModel, src_codec: TextCodec, tgt_codec: TextCodec,
                 cfg: TrainConfig, out_dir: str | Path | None = None):
        self.model = model
        self.src_codec = src_codec
        self.tgt_codec = tgt_codec
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.opt = nn.Adam(cfg.lr)
        noise_seq, order_seq = np.random.SeedSequence(cfg.seed).spawn(2)
        self.rng = np.random.default_rng(noise_seq)
        self.order_rng = np.random.default_rng(order_seq)
        self.steps: list[dict] = []
        self.global_step = 0
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)

    # -- logging ----------------------------------------------------------

    def _append(self, name: str, record: dict) -> None:
        if self.out_dir is not None:
            with open(self.out_dir / name, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record) + "\n")

    def _reset_logs(self, *names: str) -> None:
        if self.out_dir is not None:
            for n in names:
                (self.out_dir / n).write_text("", encoding="utf-8")

    # -- optimisation -----------------------------------------------------

    def step(self, batch, epoch: int) -> ElboReport:
        with T.Tape() as tape:
            loss, report = self.model.elbo_batch(batch, self.rng, train=True)
        tape.backward(loss)
        grads = {k: tape.grad(p) for k, p in self.model.params.items()}
        norm = nn.clip_grad_norm(grads, self.cfg.clip_norm)
        applied = self.opt.step(self.model.params, grads)
        self.global_step += 1
        rec = {"step": self.global_step, "epoch": epoch, "loss": float(loss.data),
               **report.per_sentence(), "grad_norm": norm, "applied": applied}
        self.steps.append(rec)
        self._append("steps.jsonl", rec)
        return report

    def run_epoch(self, corpus: ParallelCorpus, epoch: int) -> ElboReport:
        total = ElboReport()
        seed = int(self.order_rng.integers(2 ** 63))
        for batch in make_batches(corpus, self.cfg.batch_size, seed=seed):
            total = total + self.step(batch, epoch)
        return total

    def validate(self, valid_src: Sequence[str], valid_refs: Sequence[str]) -> float:
        hyps = translate_lines(self.model, self.src_codec, self.tgt_codec, valid_src,
                               chunk=self.cfg.decode_batch)
        return bleu4(hyps, tokenized_refs(valid_refs))

    def checkpoint(self, epoch: int, bleu: float) -> Checkpoint:
        return Checkpoint.from_model(self.model, self.src_codec, self.tgt_codec,
                                     {"epoch": epoch, "best_val_bleu": bleu, "seed": self.cfg.seed})

    # -- phases -----------------------------------------------------------

    def pretrain(self, gold: ParallelCorpus, synthetic: ParallelCorpus,
                 valid_src: Sequence[str], valid_refs: Sequence[str]) -> tuple[list[dict], list[int]]:
        """Mixed gold/synthetic epochs; nothing is selected or saved."""
        _check_vocab(gold, self.model.config, "gold corpus")
        _check_vocab(synthetic, self.model.config, "synthetic corpus")
        self._reset_logs("pretrain_log.jsonl")
        history, sizes = [], []
        for epoch in range(1, self.cfg.pretrain_epochs + 1):
            mixed = mix_upsample(gold, synthetic, int(self.order_rng.integers(2 ** 63)))
            sizes.append(len(mixed))
            report = self.run_epoch(mixed, epoch)
            rec = _epoch_record(epoch, report, self.validate(valid_src, valid_refs), False)
            history.append(rec)
            self._append("pretrain_log.jsonl", rec)
            log.info("pretrain epoch %d: %s", epoch, rec)
        if self.cfg.pretrain_epochs:
            log.info("pretraining done after %d epochs; fine-tuning on gold", self.cfg.pretrain_epochs)
        return history, sizes

    def fit(self, train: ParallelCorpus, valid_src: Sequence[str],
            valid_refs: Sequence[str]) -> TrainResult:
        """Epochs with greedy validation BLEU, best-model selection and early stopping."""
        cfg = self.cfg
        _check_vocab(train, self.model.config, "training corpus")
        self._reset_logs("train_log.jsonl")
        best: Checkpoint | None = None
        best_bleu = -math.inf
        since_best = 0
        history: list[dict] = []
        reason = "max_epochs"
        for epoch in range(1, cfg.max_epochs + 1):
            try:
                report = self.run_epoch(train, epoch)
            except FloatingPointError as exc:
                log.error("epoch %d: %s; stopping with the last good checkpoint", epoch, exc)
                if best is None:
                    best = self.checkpoint(epoch - 1, float("nan"))
                    self._save(best)
                reason = "non_finite"
                break
            bleu = self.validate(valid_src, valid_refs)
            selected = bleu > best_bleu
            if selected:
                best_bleu, since_best = bleu, 0
                best = self.checkpoint(epoch, bleu)
                self._save(best)
            else:
                since_best += 1
            rec = _epoch_record(epoch, report, bleu, selected)
            history.append(rec)
            self._append("train_log.jsonl", rec)
            log.info("epoch %d: %s", epoch, rec)
            if since_best >= cfg.patience:
                reason = "patience"
                break
        return TrainResult(best, history, self.steps, reason)

    def _save(self, ckpt: Checkpoint) -> None:
        if self.out_dir is not None:
            ckpt.save(self.out_dir / "best.vmck")


def _epoch_record(epoch: int, report: ElboReport, bleu: float, selected: bool) -> dict:
    rec = {"epoch": epoch, **report.per_sentence(), "val_bleu": bleu, "selected": selected}
    return {k: rec[k] for k in LOG_KEYS}


def train_model(model: TranslationModel, src_codec: TextCodec, tgt_codec: TextCodec,
                cfg: TrainConfig, train: ParallelCorpus, valid_src: Sequence[str],
                valid_refs: Sequence[str], out_dir: str | Path | None = None) -> TrainResult:
    return Trainer(model, src_codec, tgt_codec, cfg, out_dir).fit(train, valid_src, valid_refs)


def pretrain_finetune(model: TranslationModel, src_codec: TextCodec, tgt_codec: TextCodec,
                      cfg: TrainConfig, gold: ParallelCorpus, synthetic: ParallelCorpus,
                      valid_src: Sequence[str], valid_refs: Sequence[str],
                      out_dir: str | Path | None = None) -> TrainResult:
    """Mixed-data pretraining without selection, then gold fine-tuning with selection."""
    trainer = Trainer(model, src_codec, tgt_codec, cfg, out_dir)
    pre_hist, sizes = trainer.pretrain(gold, synthetic, valid_src, valid_refs)
    result = trainer.fit(gold, valid_src, valid_refs)
    result.pretrain_history = pre_hist
    result.pretrain_epoch_sizes = sizes
    return result


# ---------------------------------------------------------------------------
# corpora from files

def encode_corpus(src_lines: Sequence[str], tgt_lines: Sequence[str], src_codec: TextCodec,
                  tgt_codec: TextCodec, features: np.ndarray | None = None,
                  origin: str | None = None) -> ParallelCorpus:
    if len(src_lines) != len(tgt_lines):
        raise DataError(f"{len(src_lines)} source lines vs {len(tgt_lines)} target lines")
    if features is not None and len(features) != len(src_lines):
        raise DataError(f"{len(features)} feature rows vs {len(src_lines)} sentences")
    keep = [i for i, (s, t) in enumerate(zip(src_lines, tgt_lines)) if s.strip() and t.strip()]
    if len(keep) < len(src_lines):
        log.warning("dropping %d pairs with an empty side", len(src_lines) - len(keep))
    corpus = ParallelCorpus([src_codec.encode(src_lines[i]) for i in keep],
                            [tgt_codec.encode(tgt_lines[i]) for i in keep],
                            keep if features is not None else None, features)
    return corpus.with_origin(origin) if origin else corpus


def run_config(cfg: TrainConfig, variant: str, out_dir: str | Path) -> TrainResult:
    """The ``train`` command: fit the joint codec, load corpora, train (with pretraining if configured)."""
    for name in ("train_src", "train_tgt", "valid_src", "valid_tgt"):
        if getattr(cfg, name) is None:
            raise nn.ConfigError(f"config needs {name}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_src, train_tgt = read_lines(cfg.train_src), read_lines(cfg.train_tgt)
    # one bilingual BPE model and vocabulary shared by both sides
    src_codec = tgt_codec = TextCodec.fit(list(train_src) + list(train_tgt), cfg.bpe_merges)
    needs = variant != "nmt"
    feats = _maybe_features(cfg.train_features, needs, "train_features")
    gold = encode_corpus(train_src, train_tgt, src_codec, tgt_codec, feats)
    valid_src, valid_tgt = read_lines(cfg.valid_src), read_lines(cfg.valid_tgt)
    model = TranslationModel(cfg.model_config(variant, len(src_codec.vocab), len(tgt_codec.vocab)),
                             seed=cfg.seed)
    (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")
    if cfg.synthetic_src and cfg.synthetic_tgt and cfg.pretrain_epochs > 0:
        sfeats = _maybe_features(cfg.synthetic_features, needs, "synthetic_features")
        synthetic = encode_corpus(read_lines(cfg.synthetic_src), read_lines(cfg.synthetic_tgt),
                                  src_codec, tgt_codec, sfeats, origin=SYNTHETIC)
        return pretrain_finetune(model, src_codec, tgt_codec, cfg, gold, synthetic,
                                 valid_src, valid_tgt, out_dir)
    return train_model(model, src_codec, tgt_codec, cfg, gold, valid_src, valid_tgt, out_dir)


def _maybe_features(path: str | None, required: bool, name: str) -> np.ndarray | None:
    if path is None:
        if required:
            raise nn.ConfigError(f"latent variants need {name}")
        return None
    return load_features(path) if required else None


# ---------------------------------------------------------------------------
# back-translation and evaluation

def backtranslate(reverse: Checkpoint, mono_tgt: Sequence[str], chunk: int = 64) -> list[str]:
    """Synthetic source sentences for target-language lines, by greedy decoding.

    ``reverse`` translates target -> source, so its source codec is the
    target-language codec.
    """
    codec = reverse.src_codec
    ids = [codec.encode(line) for line in mono_tgt]
    known = sum(1 for s in ids for i in s if i >= 4)
    if mono_tgt and known == 0:
        raise VocabMismatch("monolingual text shares no tokens with the reverse model vocabulary")
    model = reverse.model()
    if model.config.latent:
        raise ValueError("reverse model must be text-only (variant nmt)")
    return translate_lines(model, reverse.src_codec, reverse.tgt_codec, mono_tgt, chunk=chunk)


def evaluate(ckpt: Checkpoint, src_lines: Sequence[str], ref_lines: Sequence[str],
             features: np.ndarray | None = None, seed: int = 0) -> dict:
    """BLEU4, chrF3, outputs and (with features) the test ELBO; deterministic."""
    if len(src_lines) != len(ref_lines):
        raise DataError(f"{len(src_lines)} source lines vs {len(ref_lines)} references")
    model = ckpt.model()
    hyps = translate_lines(model, ckpt.src_codec, ckpt.tgt_codec, src_lines)
    refs = tokenized_refs(ref_lines)
    report = {"bleu4": bleu4(hyps, refs), "chrf3": chrf3(hyps, refs), "outputs": hyps,
              "elbo": None, "sentences": len(src_lines)}
    if features is not None:
        corpus = encode_corpus(src_lines, ref_lines, ckpt.src_codec, ckpt.tgt_codec, features)
        _check_vocab(corpus, model.config, "test corpus")
        rng = np.random.default_rng(seed)
        total = ElboReport()
        for lo in range(0, len(corpus), 64):
            batch = make_batch(corpus, range(lo, min(lo + 64, len(corpus))))
            total = total + model.elbo_batch(batch, rng, train=False)[1]
        report["elbo"] = total.per_sentence()
    return report


def report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"
