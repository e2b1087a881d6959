"""Compiled vs numpy LSTM kernels: microbenchmark plus one training epoch per backend.

    python benchmarks/bench_kernels.py [--repeat 200] [--no-epoch]
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from vmmt import kernels

SHAPES = [(40, 64), (40, 256), (64, 500)]

EPOCH_SNIPPET = """
import time
from vmmt import kernels
from vmmt.data import TextCodec, default_lexicon, synth_splits
from vmmt.model import TranslationModel
from vmmt.train import TrainConfig, Trainer
src, lex = default_lexicon(40, 0)
(tr,) = synth_splits(1, [800], src, lex, 32, 0.01)
codec = TextCodec(tr.vocab)
cfg = TrainConfig(model=dict(embed_dim=64, hidden_dim=64, latent_dim=8, image_dim=32),
                  bpe_merges=None)
m = TranslationModel(cfg.model_config("vmmt_c", len(codec.vocab), len(codec.vocab)), seed=0)
t = time.perf_counter()
Trainer(m, codec, codec, cfg).run_epoch(tr.corpus, 1)
print(kernels.BACKEND, time.perf_counter() - t)
"""


def bench_kernel(mod, batch, hidden, repeat):
    rng = np.random.default_rng(0)
    gates = rng.normal(size=(batch, 4 * hidden))
    c, h = rng.normal(size=(batch, hidden)), rng.normal(size=(batch, hidden))
    mask = (rng.random(batch) < 0.9).astype(float)
    dh, dc = rng.normal(size=(batch, hidden)), rng.normal(size=(batch, hidden))
    _, _, cache = mod.lstm_forward(gates, c, h, mask)
    fwd = min(timeit.repeat(lambda: mod.lstm_forward(gates, c, h, mask), number=repeat, repeat=3))
    bwd = min(timeit.repeat(lambda: mod.lstm_backward(cache, c, mask, dh, dc), number=repeat, repeat=3))
    return 1e6 * fwd / repeat, 1e6 * bwd / repeat


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--no-epoch", action="store_true", help="skip the end-to-end epoch timing")
    args = ap.parse_args()

    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled kernel not built; only the numpy fallback is available")
    print(f"{'B x H':>10} {'backend':>8} {'fwd us':>9} {'bwd us':>9}")
    for batch, hidden in SHAPES:
        base = None
        for name, mod in backends.items():
            fwd, bwd = bench_kernel(mod, batch, hidden, args.repeat)
            speed = "" if base is None else f"  x{(base[0] + base[1]) / (fwd + bwd):.2f}"
            base = base or (fwd, bwd)
            print(f"{batch:>4} x {hidden:<3} {name:>8} {fwd:9.1f} {bwd:9.1f}{speed}")

    if args.no_epoch:
        return
    print("\none vmmt_c epoch, 800 pairs, hidden 64:")
    for name in backends:
        env = dict(os.environ, VMMT_KERNELS=name)
        out = subprocess.run([sys.executable, "-c", EPOCH_SNIPPET], env=env, check=True,
                             capture_output=True, text=True).stdout.split()
        print(f"  {out[0]:>8}: {float(out[1]):.2f} s")


if __name__ == "__main__":
    main()
