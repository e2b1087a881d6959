"""Text-only NMT and the two latent multi-modal translation models.

``nmt``     attentive encoder-decoder, no latent variable.
``vmmt_f``  z ~ N(0, I); q(z|x) is used for training and for prediction.
``vmmt_c``  z ~ p(z|x); q(z|x, y, v) at training, prior mean at prediction.

In both latent variants z is appended to the decoder input at every step
and also generates the image features through a Gaussian observation model.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import latent, nn
from . import tensor as T
from .data import BOS, EOS, PAD, Batch, pad_ids
from .latent import DiagGaussian
from .tensor import Tensor

VARIANTS = ("nmt", "vmmt_f", "vmmt_c")


@dataclass
class ModelConfig:
    variant: str = "vmmt_f"
    src_vocab_size: int = 0
    tgt_vocab_size: int = 0
    embed_dim: int = 500
    hidden_dim: int = 500
    latent_dim: int = 500
    image_dim: int = 2048
    obs_scale: float = 1.0
    free_bits: float = 0.0
    dropout: float = 0.5
    cell: str = "lstm"
    image_weight: float = 1.0
    enc_layers: int = 2

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise nn.ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.cell not in nn.CELL_TYPES:
            raise nn.ConfigError(f"unknown cell type {self.cell!r}")
        if self.obs_scale <= 0:
            raise nn.ConfigError("obs_scale must be > 0")
        if self.free_bits < 0:
            raise nn.ConfigError("free_bits must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise nn.ConfigError("dropout must be in [0, 1)")

    @property
    def latent(self) -> bool:
        return self.variant != "nmt"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise nn.ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ElboReport:
    """Sums over the sentences of one or more batches, in nats."""
    text_ll: float = 0.0
    image_ll: float = 0.0
    kl_raw: float = 0.0
    kl_clamped: float = 0.0
    elbo: float = 0.0
    tokens: int = 0
    sentences: int = 0

    def __add__(self, other: "ElboReport") -> "ElboReport":
        return ElboReport(*(getattr(self, f.name) + getattr(other, f.name) for f in fields(self)))

    def per_sentence(self) -> dict:
        n = max(self.sentences, 1)
        return {k: getattr(self, k) / n
                for k in ("text_ll", "image_ll", "kl_raw", "kl_clamped", "elbo")}


def image_log_likelihood(v, nu, obs_scale: float):
    """Row-wise log N(v; nu, obs_scale^2 I).

    Accepts Tensors (differentiable) or plain arrays.
    """
    if isinstance(v, Tensor) or isinstance(nu, Tensor):
        v_t = v if isinstance(v, Tensor) else T.constant(v)
        nu_t = nu if isinstance(nu, Tensor) else T.constant(nu)
        o = v_t.shape[-1]
        const = -0.5 * o * math.log(2 * math.pi * obs_scale ** 2)
        return T.squared_error(v_t, nu_t) * (-0.5 / obs_scale ** 2) + const
    v = np.asarray(v, dtype=np.float64)
    nu = np.asarray(nu, dtype=np.float64)
    o = v.shape[-1]
    return (-0.5 * o * math.log(2 * math.pi * obs_scale ** 2)
            - np.sum((v - nu) ** 2, axis=-1) / (2 * obs_scale ** 2))


class TranslationModel:
    """Parameters plus forward computations for one variant."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.config = config
        if params is None:
            params = self._init_params(np.random.default_rng(seed))
        self.params = params

    # -- parameters -------------------------------------------------------

    def _init_params(self, rng: np.random.Generator) -> dict[str, Tensor]:
        cfg = self.config
        E, H, c, o = cfg.embed_dim, cfg.hidden_dim, cfg.latent_dim, cfg.image_dim
        p: dict[str, Tensor] = {}
        nn.init_embedding(p, "gen.emb_x", cfg.src_vocab_size, E, rng)
        nn.init_embedding(p, "gen.emb_y", cfg.tgt_vocab_size, E, rng)
        n_in = E
        for layer in range(cfg.enc_layers):
            nn.init_birnn(p, f"gen.enc.l{layer}", cfg.cell, n_in, H, rng)
            n_in = 2 * H
        nn.init_linear(p, "gen.dec.init", 2 * H, H, rng)
        nn.init_rnn(p, "gen.dec.rnn", cfg.cell, E + (c if cfg.latent else 0), H, rng)
        p["gen.attn.W"] = T.parameter(nn.uniform_init(rng, (2 * H, H)), "gen.attn.W")
        nn.init_linear(p, "gen.out", 3 * H, cfg.tgt_vocab_size, rng)
        if cfg.latent:
            nn.init_mlp(p, "gen.img", c, H, o, rng)
            if cfg.variant == "vmmt_c":
                nn.init_mlp(p, "gen.prior.mu", 2 * H, H, c, rng)
                nn.init_mlp(p, "gen.prior.sigma", 2 * H, H, c, rng)
            nn.init_linear(p, "inf.x", 2 * H, H, rng)
            h_all = H
            if cfg.variant == "vmmt_c":
                nn.init_birnn(p, "inf.y", cfg.cell, E, H, rng)
                nn.init_mlp(p, "inf.v", o, H, H, rng)
                h_all = 4 * H
            nn.init_mlp(p, "inf.mu", h_all, H, c, rng)
            nn.init_mlp(p, "inf.sigma", h_all, H, c, rng)
        return p

    def generative_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith("gen.")}

    def inference_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith("inf.")}

    # -- encoder ----------------------------------------------------------

    def encode(self, src: np.ndarray, src_mask: np.ndarray, train: bool = False,
               rng: np.random.Generator | None = None) -> Tensor:
        """Contextual source states [B, m, 2H]."""
        if src.shape[1] == 0 or np.any(src_mask.sum(axis=1) == 0):
            raise ValueError("empty source")
        cfg = self.config
        x = T.dropout(T.embedding(self.params["gen.emb_x"], src), cfg.dropout, rng, train)
        for layer in range(cfg.enc_layers):
            if layer > 0:
                x = T.dropout(x, cfg.dropout, rng, train)
            x = nn.birnn(cfg.cell, self.params, f"gen.enc.l{layer}", x, src_mask)
        return x

    def memory(self, keys: Tensor, src_mask: np.ndarray) -> nn.Memory:
        return nn.attention_memory(keys, src_mask, self.params["gen.attn.W"])

    def init_state(self, memory: nn.Memory) -> nn.RnnState:
        s0 = T.tanh(nn.linear(self.params, "gen.dec.init", nn.masked_mean(memory.keys, memory.mask)))
        if self.config.cell == "lstm":
            return nn.RnnState(s0, T.constant(np.zeros(s0.shape)))
        return nn.RnnState(s0)

    # -- decoder ----------------------------------------------------------

    def decoder_step(self, prev: np.ndarray, state: nn.RnnState, memory: nn.Memory,
                     z: Tensor | None = None, train: bool = False,
                     rng: np.random.Generator | None = None) -> tuple[Tensor, nn.RnnState]:
        """Log-probabilities over the target vocabulary and the next state."""
        cfg, p = self.config, self.params
        prev = np.asarray(prev, dtype=np.int64)
        if prev.size and (prev.min() < 0 or prev.max() >= cfg.tgt_vocab_size):
            raise IndexError(f"decoder_step: token id out of range [0, {cfg.tgt_vocab_size})")
        x = T.embedding(p["gen.emb_y"], prev)
        if cfg.latent:
            if z is None:
                raise ValueError("decoder_step: latent variant needs z")
            x = T.concat([x, z], axis=-1)
        state = nn.rnn_cell_step(cfg.cell, x, state, p, "gen.dec.rnn")
        s = T.dropout(state.h, cfg.dropout, rng, train)
        context, _ = nn.attend(s, memory)
        pre = T.concat([s, T.dropout(context, cfg.dropout, rng, train)], axis=-1)
        return T.log_softmax(nn.linear(p, "gen.out", pre)), state

    def text_log_likelihood(self, memory: nn.Memory, z: Tensor | None, tgt_in: np.ndarray,
                            tgt_out: np.ndarray, tgt_mask: np.ndarray, train: bool = False,
                            rng: np.random.Generator | None = None) -> Tensor:
        """Per-sentence sum of target-token log-probabilities, shape [B]."""
        state = self.init_state(memory)
        picked = []
        for j in range(tgt_in.shape[1]):
            logp, state = self.decoder_step(tgt_in[:, j], state, memory, z, train, rng)
            picked.append(T.pick(logp, tgt_out[:, j]))
        ll = T.stack(picked, axis=1) * T.constant(tgt_mask)
        return T.sum_(ll, axis=1)

    # -- latent pieces ----------------------------------------------------

    def prior(self, memory: nn.Memory) -> DiagGaussian:
        if self.config.variant == "vmmt_c":
            return latent.conditional_prior(nn.masked_mean(memory.keys, memory.mask), self.params)
        return latent.fixed_prior(self.config.latent_dim, memory.mask.shape[0])

    def posterior(self, memory: nn.Memory, batch: Batch | None = None, train: bool = False,
                  rng: np.random.Generator | None = None) -> DiagGaussian:
        cfg = self.config
        if cfg.variant == "vmmt_f":
            return latent.posterior_fixed_variant(memory.keys, memory.mask, self.params)
        if cfg.variant == "vmmt_c":
            if batch is None or batch.features is None:
                raise ValueError("conditional posterior requires image features")
            return latent.posterior_conditional(
                memory.keys, memory.mask, batch.tgt_out, batch.tgt_mask,
                T.constant(batch.features), self.params, cell=cfg.cell,
                dropout=cfg.dropout, train=train, rng=rng)
        raise ValueError("variant nmt has no latent variable")

    def image_mean(self, z: Tensor) -> Tensor:
        if not self.config.latent or "gen.img.l1.W" not in self.params:
            raise ValueError("no image head")
        return nn.mlp(self.params, "gen.img", z)

    def prediction_distribution(self, memory: nn.Memory) -> DiagGaussian:
        """The image-free distribution over z used at test time."""
        if self.config.variant == "vmmt_f":
            return latent.posterior_fixed_variant(memory.keys, memory.mask, self.params)
        return self.prior(memory)

    # -- objective --------------------------------------------------------

    def elbo_batch(self, batch: Batch, rng: np.random.Generator | None = None,
                   train: bool = True, eps: np.ndarray | None = None) -> tuple[Tensor, ElboReport]:
        """Single-sample ELBO; returns the loss (negated sentence mean) and a report."""
        cfg = self.config
        if cfg.latent and batch.features is None:
            raise ValueError(f"variant {cfg.variant} requires image features")
        B = len(batch)
        keys = self.encode(batch.src, batch.src_mask, train, rng)
        mem = self.memory(keys, batch.src_mask)
        if not cfg.latent:
            text_ll = self.text_log_likelihood(mem, None, batch.tgt_in, batch.tgt_out,
                                               batch.tgt_mask, train, rng)
            per_sentence = text_ll
            image_ll = kl_raw = kl_clamped = None
        else:
            q = self.posterior(mem, batch, train, rng)
            p = self.prior(mem)
            if eps is None:
                if rng is None:
                    raise ValueError("elbo_batch: need rng or eps")
                eps = rng.standard_normal((B, cfg.latent_dim))
            z = latent.reparameterize(q, eps).z
            text_ll = self.text_log_likelihood(mem, z, batch.tgt_in, batch.tgt_out,
                                               batch.tgt_mask, train, rng)
            image_ll = image_log_likelihood(T.constant(batch.features), self.image_mean(z),
                                            cfg.obs_scale)
            kl_dim, kl_raw = latent.kl_diag(q, p)
            kl_clamped = latent.free_bits(kl_dim, cfg.free_bits)
            per_sentence = text_ll + image_ll * cfg.image_weight - kl_clamped
        loss = T.mean(per_sentence) * -1.0
        report = ElboReport(
            text_ll=float(text_ll.data.sum()),
            image_ll=float(image_ll.data.sum()) if image_ll is not None else 0.0,
            kl_raw=float(kl_raw.data.sum()) if kl_raw is not None else 0.0,
            kl_clamped=float(kl_clamped.data.sum()) if kl_clamped is not None else 0.0,
            tokens=batch.n_tokens, sentences=B)
        report.elbo = report.text_ll + report.image_ll - report.kl_clamped
        if not np.isfinite(loss.data):
            raise FloatingPointError(f"non-finite loss; components {report.per_sentence()}")
        return loss, report

    def log_joint_terms(self, batch: Batch, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(log P(y|x,z), log p(v|z)) per row for given latent values; no dropout."""
        keys = self.encode(batch.src, batch.src_mask)
        mem = self.memory(keys, batch.src_mask)
        zt = T.constant(z)
        text = self.text_log_likelihood(mem, zt, batch.tgt_in, batch.tgt_out, batch.tgt_mask)
        image = image_log_likelihood(batch.features, self.image_mean(zt).data, self.config.obs_scale)
        return text.data, np.asarray(image)

    # -- prediction -------------------------------------------------------

    def _latent_for_prediction(self, mem: nn.Memory, z_policy: str,
                               rng: np.random.Generator | None) -> Tensor | None:
        if not self.config.latent:
            return None
        d = self.prediction_distribution(mem)
        if z_policy == "mean":
            return d.loc
        if z_policy == "sample":
            if rng is None:
                raise ValueError("z_policy 'sample' needs a seed")
            return latent.reparameterize(d, rng=rng, source="prior").z
        raise ValueError(f"unknown z_policy {z_policy!r}")

    def translate(self, sources: list[list[int]], mode: str = "greedy", beam_size: int = 5,
                  z_policy: str = "mean", seed: int | None = None) -> list[list[int]]:
        """Decode target id sequences (without BOS/EOS) from source id sequences only."""
        if any(len(s) == 0 for s in sources):
            raise ValueError("empty source")
        if not sources:
            return []
        rng = np.random.default_rng(seed) if seed is not None else None
        if mode == "greedy":
            return self._greedy(sources, z_policy, rng)
        if mode == "beam":
            return [self._beam(s, beam_size, z_policy, rng) for s in sources]
        raise ValueError(f"unknown decoding mode {mode!r}")

    def _greedy(self, sources, z_policy, rng) -> list[list[int]]:
        src, mask = pad_ids(sources)
        mem = self.memory(self.encode(src, mask), mask)
        z = self._latent_for_prediction(mem, z_policy, rng)
        state = self.init_state(mem)
        B = len(sources)
        caps = np.array([2 * len(s) + 10 for s in sources])
        prev = np.full(B, BOS, dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        out: list[list[int]] = [[] for _ in range(B)]
        for step in range(int(caps.max())):
            logp, state = self.decoder_step(prev, state, mem, z)
            nxt = logp.data.argmax(axis=-1)
            for b in range(B):
                if done[b]:
                    continue
                if nxt[b] == EOS or step >= caps[b]:
                    done[b] = True
                else:
                    out[b].append(int(nxt[b]))
            if done.all():
                break
            prev = np.where(done, PAD, nxt)
        return out

    def _beam(self, source: list[int], k: int, z_policy, rng) -> list[int]:
        if k < 1:
            raise ValueError("beam size must be >= 1")
        src, mask = pad_ids([source])
        mem1 = self.memory(self.encode(src, mask), mask)
        z1 = self._latent_for_prediction(mem1, z_policy, rng)
        cap = 2 * len(source) + 10
        hyps: list[tuple[list[int], float]] = [([], 0.0)]
        state = self.init_state(mem1)
        finished: list[tuple[float, list[int]]] = []
        for _ in range(cap):
            n = len(hyps)
            mem = _tile_memory(mem1, n)
            z = T.constant(np.repeat(z1.data, n, axis=0)) if z1 is not None else None
            prev = np.array([h[-1] if h else BOS for h, _ in hyps], dtype=np.int64)
            logp, new_state = self.decoder_step(prev, state, mem, z)
            scores = np.array([s for _, s in hyps])[:, None] + logp.data
            cand = []
            for r in range(n):
                top = np.argsort(-scores[r], kind="stable")[:k + 1]
                cand += [(scores[r, w], r, int(w)) for w in top]
            cand.sort(key=lambda t: -t[0])
            live, rows = [], []
            for score, r, w in cand:
                toks = hyps[r][0]
                if w == EOS:
                    # length-normalised, counting the end-of-sentence token
                    finished.append((score / (len(toks) + 1), toks))
                elif len(live) < k:
                    live.append((toks + [w], score))
                    rows.append(r)
            if len(finished) >= k or not live:
                break
            hyps = live
            state = nn.RnnState(*(T.constant(t.data[rows]) if t is not None else None
                                  for t in new_state))
        else:
            finished += [(score / len(toks), toks) for toks, score in hyps]
        finished.sort(key=lambda t: -t[0])
        return finished[0][1]

    def predict_image_features(self, sources: list[list[int]] | None = None,
                               z: np.ndarray | None = None, z_policy: str = "mean",
                               seed: int | None = None) -> np.ndarray:
        """Image-feature locations from z (given, or inferred from sources as in translate)."""
        if not self.config.latent:
            raise ValueError("no image head")
        if z is None:
            if sources is None:
                raise ValueError("need sources or z")
            src, mask = pad_ids(sources)
            mem = self.memory(self.encode(src, mask), mask)
            rng = np.random.default_rng(seed) if seed is not None else None
            zt = self._latent_for_prediction(mem, z_policy, rng)
        else:
            zt = T.constant(np.atleast_2d(z))
        return self.image_mean(zt).data


def _tile_memory(mem: nn.Memory, n: int) -> nn.Memory:
    if n == 1:
        return mem
    rep = lambda t: T.constant(np.repeat(t.data, n, axis=0))  # noqa: E731
    return nn.Memory(rep(mem.keys), rep(mem.proj), rep(mem.mask_add), np.repeat(mem.mask, n, axis=0))
