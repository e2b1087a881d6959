"""Diagonal Gaussians: priors, amortised posteriors, sampling, KL and free bits."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor

SCALE_FLOOR = 1e-12
LN2 = math.log(2.0)


@dataclass
class DiagGaussian:
    """Location/scale pair; leading dimensions are batch dimensions."""
    loc: Tensor
    scale: Tensor

    def __post_init__(self):
        if self.loc.shape != self.scale.shape:
            raise T.ShapeError(f"DiagGaussian: loc {self.loc.shape} vs scale {self.scale.shape}")

    @property
    def dim(self) -> int:
        return self.loc.shape[-1]

    def log_prob(self, z: np.ndarray) -> np.ndarray:
        """Log density of ``z`` (values only, no graph); sums the last axis."""
        mu, s = self.loc.data, self.scale.data
        return np.sum(-0.5 * ((z - mu) / s) ** 2 - np.log(s) - 0.5 * math.log(2 * math.pi), axis=-1)


@dataclass
class LatentSample:
    z: Tensor
    eps: np.ndarray
    source: str  # prior | posterior | mean


def _positive_scale(pre: Tensor) -> Tensor:
    return T.clamp_min(T.softplus(pre), SCALE_FLOOR)


def _check_finite(name: str, d: DiagGaussian) -> DiagGaussian:
    for part, t in (("loc", d.loc), ("scale", d.scale)):
        if not np.all(np.isfinite(t.data)):
            bad = np.argwhere(~np.isfinite(t.data))
            raise FloatingPointError(
                f"{name}: non-finite {part} at {bad[:5].tolist()} (of {len(bad)})")
    return d


def conditional_prior(h_avg: Tensor, params: dict, prefix: str = "gen.prior") -> DiagGaussian:
    """p(z|x) from the average source encoding."""
    loc = nn.mlp(params, f"{prefix}.mu", h_avg)
    scale = _positive_scale(nn.mlp(params, f"{prefix}.sigma", h_avg))
    return _check_finite("conditional_prior", DiagGaussian(loc, scale))


def fixed_prior(c: int, batch: int | None = None) -> DiagGaussian:
    """N(0, I) in ``c`` dimensions (optionally repeated over a batch)."""
    if c < 1:
        raise ValueError("fixed_prior: c must be >= 1")
    shape = (c,) if batch is None else (batch, c)
    return DiagGaussian(T.constant(np.zeros(shape)), T.constant(np.ones(shape)))


def posterior_fixed_variant(keys: Tensor, src_mask: np.ndarray, params: dict,
                            prefix: str = "inf") -> DiagGaussian:
    """q(z|x): reads detached source encodings only."""
    h = T.stop_gradient(keys)
    h_x = nn.masked_mean(nn.linear(params, f"{prefix}.x", h), src_mask)
    loc = nn.mlp(params, f"{prefix}.mu", h_x)
    scale = _positive_scale(nn.mlp(params, f"{prefix}.sigma", h_x))
    return DiagGaussian(loc, scale)


def posterior_conditional(keys: Tensor, src_mask: np.ndarray, tgt_ids: np.ndarray,
                          tgt_mask: np.ndarray, v: Tensor | None, params: dict, *,
                          cell: str = "lstm", emb_name: str = "gen.emb_y",
                          prefix: str = "inf", dropout: float = 0.0,
                          train: bool = False, rng: np.random.Generator | None = None) -> DiagGaussian:
    """q(z|x, y, v).

    Source encodings and target embeddings are shared with the generative
    model but detached, so no gradient from this network reaches them.
    """
    if v is None:
        raise ValueError("conditional posterior requires image features")
    if tgt_ids.size == 0 or np.any(np.asarray(tgt_mask).sum(axis=1) == 0):
        raise ValueError("conditional posterior requires a non-empty target")
    h = T.stop_gradient(keys)
    w = T.stop_gradient(T.embedding(params[emb_name], tgt_ids))
    h_x = nn.masked_mean(nn.linear(params, f"{prefix}.x", h), src_mask)
    h_y = nn.masked_mean(nn.birnn(cell, params, f"{prefix}.y", w, tgt_mask), tgt_mask)
    h_v = nn.mlp(params, f"{prefix}.v", T.dropout(v, dropout, rng, train))
    h_all = T.concat([h_x, h_y, h_v], axis=-1)
    loc = nn.mlp(params, f"{prefix}.mu", h_all)
    scale = _positive_scale(nn.mlp(params, f"{prefix}.sigma", h_all))
    return DiagGaussian(loc, scale)


def reparameterize(d: DiagGaussian, eps: np.ndarray | None = None,
                   rng: np.random.Generator | None = None, source: str = "posterior") -> LatentSample:
    """z = loc + eps * scale, drawing eps ~ N(0, I) from ``rng`` when omitted."""
    if eps is None:
        if rng is None:
            raise ValueError("reparameterize: need eps or rng")
        eps = rng.standard_normal(d.loc.shape)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != d.loc.shape:
        raise T.ShapeError(f"reparameterize: eps {eps.shape} vs loc {d.loc.shape}")
    z = d.loc + d.scale * T.constant(eps)
    return LatentSample(z, eps, source)


def mean_sample(d: DiagGaussian) -> LatentSample:
    return LatentSample(d.loc, np.zeros(d.loc.shape), "mean")


def kl_diag(q: DiagGaussian, p: DiagGaussian) -> tuple[Tensor, Tensor]:
    """Closed-form KL(q || p) per dimension and summed over the last axis."""
    if q.loc.shape != p.loc.shape:
        raise T.ShapeError(f"kl_diag: dim mismatch {q.loc.shape} vs {p.loc.shape}")
    diff = q.loc - p.loc
    num = q.scale * q.scale + diff * diff
    den = (p.scale * p.scale) * 2.0
    per_dim = T.log(p.scale) - T.log(q.scale) + T.div(num, den) - 0.5
    return per_dim, T.sum_(per_dim, axis=-1)


def free_bits(kl_per_dim: Tensor, floor_bits: float) -> Tensor:
    """max(sum of KL, floor_bits * ln 2) with the whole latent as one group.

    At or below the floor the gradient is exactly zero.
    """
    if floor_bits < 0:
        raise ValueError("free_bits: floor must be nonnegative")
    total = T.sum_(kl_per_dim, axis=-1)
    if floor_bits == 0:
        return total
    return T.clamp_min(total, floor_bits * LN2)
