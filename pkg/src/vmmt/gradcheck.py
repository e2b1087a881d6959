"""Central finite-difference checks of taped gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .data import ParallelCorpus, make_batch
from .model import ModelConfig, TranslationModel
from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str | None
    worst_index: tuple | None
    checked: int
    tolerance: float
    nonfinite: str | None = None

    @property
    def passed(self) -> bool:
        return self.nonfinite is None and self.max_rel_error < self.tolerance

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        if self.nonfinite:
            return f"{status}: non-finite value in {self.nonfinite}"
        return (f"{status}: max rel. error {self.max_rel_error:.3e} "
                f"(tol {self.tolerance:g}) at {self.worst_param}{list(self.worst_index or ())} "
                f"over {self.checked} coordinates")


def relative_error(g_ad, g_fd):
    return np.abs(g_ad - g_fd) / np.maximum(1e-8, np.abs(g_ad) + np.abs(g_fd))


def grad_check(f: Callable[[], Tensor], params: dict[str, Tensor], step: float = 1e-5,
               tolerance: float = 1e-4, max_coords: int | None = None,
               seed: int = 0, fd_dtype=np.longdouble) -> GradCheckReport:
    """Compare ``tape.backward`` against central differences for every parameter.

    ``f`` must be deterministic (callers freeze noise and dropout masks).
    Detached values are recorded on the unperturbed pass and replayed, so
    the comparison is against the gradient the tape is meant to compute.
    The perturbed evaluations run in ``fd_dtype`` (extended precision by
    default) so that roundoff stays far below gradients of order 1e-8.
    ``max_coords`` caps the coordinates checked per parameter (sampled).
    """
    rng = np.random.default_rng(seed)
    with T.frozen_stop_gradients() as freezer:
        with T.Tape() as tape:
            loss = f()
        if not np.isfinite(loss.data):
            return GradCheckReport(np.inf, None, None, 0, tolerance, nonfinite="loss")
        tape.backward(loss)
        analytic = {name: tape.grad(p).copy() for name, p in params.items()}

        saved = {name: p.data for name, p in params.items()}
        try:
            for p in params.values():
                p.data = p.data.astype(fd_dtype)
            return _finite_differences(f, params, analytic, freezer, step, tolerance,
                                       max_coords, rng)
        finally:
            for name, p in params.items():
                p.data = saved[name]


def _finite_differences(f, params, analytic, freezer, step, tolerance, max_coords, rng):
    worst = (0.0, None, None)
    checked = 0
    for name, p in params.items():
        g = analytic[name]
        if not np.all(np.isfinite(g)):
            return GradCheckReport(np.inf, name, None, checked, tolerance, nonfinite=name)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for k in coords:
            orig = flat[k]
            flat[k] = orig + step
            freezer.rewind()
            up = f().data
            flat[k] = orig - step
            freezer.rewind()
            down = f().data
            flat[k] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                return GradCheckReport(np.inf, name, np.unravel_index(k, p.shape),
                                       checked, tolerance, nonfinite=name)
            fd = (up - down) / (2 * step)
            err = float(relative_error(np.asarray(g.reshape(-1)[k], dtype=fd.dtype), fd))
            checked += 1
            if err > worst[0]:
                worst = (err, name, tuple(int(i) for i in np.unravel_index(k, p.shape)))
    return GradCheckReport(worst[0], worst[1], worst[2], checked, tolerance)


def toy_problem(variant: str, seed: int = 0, hidden: int = 8, embed: int = 8, latent_dim: int = 2,
                image_dim: int = 4, vocab: int = 12, dropout: float = 0.5):
    """A two-sentence model and batch for gradient checking."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(variant=variant, src_vocab_size=vocab, tgt_vocab_size=vocab,
                      embed_dim=embed, hidden_dim=hidden, latent_dim=latent_dim,
                      image_dim=image_dim, dropout=dropout)
    model = TranslationModel(cfg, seed=seed)
    # spread the init a little so no gradient is vanishingly small
    for p in model.params.values():
        p.data = p.data + rng.uniform(-0.3, 0.3, size=p.shape)
    src = [[4, 7, 9, 5], [6, 11, 8]]
    tgt = [[10, 5, 4], [9, 6, 7, 11, 8]]
    corpus = ParallelCorpus(src, tgt, features=rng.normal(size=(2, image_dim)))
    batch = make_batch(corpus, [0, 1])
    eps = rng.standard_normal((2, latent_dim))
    return model, batch, eps


def check_model(variant: str, step: float = 1e-5, tolerance: float = 1e-4,
                max_coords: int | None = None, seed: int = 0) -> GradCheckReport:
    """Full-loss gradient check with frozen noise and dropout masks."""
    model, batch, eps = toy_problem(variant, seed)

    def loss():
        return model.elbo_batch(batch, np.random.default_rng(seed + 1), train=True, eps=eps)[0]

    return grad_check(loss, model.params, step, tolerance, max_coords, seed)
