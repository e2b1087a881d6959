import json

import pytest

from vmmt.data import default_lexicon, save_features, synth_splits, write_lines

TINY_MODEL = {"embed_dim": 8, "hidden_dim": 12, "latent_dim": 2, "image_dim": 6, "dropout": 0.0}


def write_tiny_task(root, pairs=60, seed=0, words=6):
    """Small synthetic splits on disk plus a matching training config."""
    root.mkdir(parents=True, exist_ok=True)
    src, lex = default_lexicon(words, seed)
    names = ("train", "valid", "test")
    for name, task in zip(names, synth_splits(seed, [pairs, 10, 10], src, lex, 6, 0.01)):
        write_lines(root / f"{name}.src", task.src_text)
        write_lines(root / f"{name}.tgt", task.tgt_text)
        save_features(root / f"{name}.fvec", task.features)
    cfg = {"model": dict(TINY_MODEL), "bpe_merges": None, "max_epochs": 2, "patience": 2,
           "batch_size": 20, "seed": seed, "lr": 0.01}
    for name in ("train", "valid"):
        cfg[f"{name}_src"] = str(root / f"{name}.src")
        cfg[f"{name}_tgt"] = str(root / f"{name}.tgt")
        cfg[f"{name}_features"] = str(root / f"{name}.fvec")
    (root / "config.json").write_text(json.dumps(cfg), encoding="utf-8")
    return cfg


@pytest.fixture
def tiny_task(tmp_path):
    cfg = write_tiny_task(tmp_path / "data")
    return tmp_path / "data", cfg


# acceptance criteria: one line each in the terminal summary
CRITERIA: dict[int, list[tuple[bool, str]]] = {}
N_CRITERIA = 9


def record_criterion(n: int, ok: bool, detail: str) -> None:
    CRITERIA.setdefault(n, []).append((bool(ok), detail))


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        parts = CRITERIA.get(n)
        if not parts:
            terminalreporter.write_line(f"criterion {n}: FAIL (not reached)")
            continue
        ok = all(p for p, _ in parts)
        detail = "; ".join(d for _, d in parts)
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
