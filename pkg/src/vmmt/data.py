"""Text preprocessing, BPE, vocabularies, feature files, corpora and batching."""
from __future__ import annotations

import heapq
import re
import struct
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<s>", "</s>", "<unk>")
EOW = "</w>"

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# tokenisation

def tokenize(text: str | bytes) -> list[str]:
    """Lowercase and split into words, with punctuation as separate tokens."""
    if isinstance(text, (bytes, bytearray)):
        try:
            text = bytes(text).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DataError(f"invalid UTF-8 at byte offset {exc.start}") from exc
    return _TOKEN_RE.findall(text.lower())


def preprocess(text: str | bytes, bpe: "BpeModel | None" = None) -> list[str]:
    """Tokenize + lowercase, then segment into subwords when ``bpe`` is given."""
    words = tokenize(text)
    if bpe is None:
        return words
    return [piece for w in words for piece in bpe.apply(w)]


def detokenize_subwords(pieces: Sequence[str]) -> list[str]:
    """Join BPE pieces back into words (pieces carry ``</w>`` at word ends)."""
    words, cur = [], ""
    for p in pieces:
        if p.endswith(EOW):
            words.append(cur + p[: -len(EOW)])
            cur = ""
        else:
            cur += p
    if cur:
        words.append(cur)
    return words


# ---------------------------------------------------------------------------
# byte pair encoding

def _word_symbols(word: str) -> tuple[str, ...]:
    if not word:
        return ()
    return tuple(word[:-1]) + (word[-1] + EOW,)


def _merge_symbols(symbols: tuple[str, ...], pair: tuple[str, str]) -> tuple[str, ...]:
    a, b = pair
    out, i, n = [], 0, len(symbols)
    while i < n:
        if i < n - 1 and symbols[i] == a and symbols[i + 1] == b:
            out.append(a + b)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


@dataclass
class BpeModel:
    merges: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        if len(set(self.merges)) != len(self.merges):
            raise DataError("BPE merges must be unique pairs")
        self._rank = {p: i for i, p in enumerate(self.merges)}
        self._cache: dict[str, list[str]] = {}

    def apply(self, word: str) -> list[str]:
        """Segment one word by repeatedly merging its best-ranked pair."""
        hit = self._cache.get(word)
        if hit is not None:
            return list(hit)
        symbols = _word_symbols(word)
        while len(symbols) > 1:
            pairs = {(symbols[i], symbols[i + 1]) for i in range(len(symbols) - 1)}
            best = min(pairs, key=lambda p: self._rank.get(p, float("inf")))
            if best not in self._rank:
                break
            symbols = _merge_symbols(symbols, best)
        out = list(symbols)
        self._cache[word] = out
        return list(out)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(f"{a} {b}\n" for a, b in self.merges), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "BpeModel":
        merges = []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            parts = line.split(" ")
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected 'left right'")
            merges.append((parts[0], parts[1]))
        return cls(merges)


def bpe_apply(model: BpeModel, word: str) -> list[str]:
    return model.apply(word)


def bpe_train(corpora: Iterable[Iterable[str]], merges: int) -> BpeModel:
    """Learn ``merges`` pair merges from tokenised sentences of both languages.

    Ties in pair frequency go to the lexicographically smallest pair.
    """
    if merges < 0:
        raise DataError("bpe_train: merges must be >= 0")
    freq: Counter = Counter()
    for corpus in corpora:
        for sentence in corpus:
            words = sentence.split() if isinstance(sentence, str) else sentence
            freq.update(words)
    if not freq:
        raise DataError("bpe_train: empty corpus")

    vocab = [list(_word_symbols(w)) for w in freq]
    counts = list(freq.values())
    stats: Counter = Counter()
    where: dict[tuple[str, str], set[int]] = defaultdict(set)
    for wi, syms in enumerate(vocab):
        for a, b in zip(syms, syms[1:]):
            stats[(a, b)] += counts[wi]
            where[(a, b)].add(wi)
    heap = [(-c, p) for p, c in stats.items()]
    heapq.heapify(heap)

    learned: list[tuple[str, str]] = []
    while len(learned) < merges and heap:
        negc, pair = heapq.heappop(heap)
        cur = stats.get(pair, 0)
        if cur <= 0:
            continue
        if -negc != cur:
            heapq.heappush(heap, (-cur, pair))
            continue
        learned.append(pair)
        touched: set[tuple[str, str]] = set()
        for wi in list(where.pop(pair, ())):
            syms = vocab[wi]
            c = counts[wi]
            for a, b in zip(syms, syms[1:]):
                stats[(a, b)] -= c
                touched.add((a, b))
            new = list(_merge_symbols(tuple(syms), pair))
            vocab[wi] = new
            for a, b in zip(syms, syms[1:]):
                where[(a, b)].discard(wi)
            for a, b in zip(new, new[1:]):
                stats[(a, b)] += c
                where[(a, b)].add(wi)
                touched.add((a, b))
        stats.pop(pair, None)
        for p in touched - {pair}:
            c = stats.get(p, 0)
            if c > 0:
                heapq.heappush(heap, (-c, p))
            else:
                stats.pop(p, None)
    return BpeModel(learned)


# ---------------------------------------------------------------------------
# vocabulary

class Vocab:
    """Token <-> id map with the four reserved ids first."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        i = self.stoi.get(token)
        if i is None:
            i = self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return i

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    @classmethod
    def build(cls, sentences: Iterable[Sequence[str]]) -> "Vocab":
        counts: Counter = Counter()
        for s in sentences:
            counts.update(s)
        # frequency-descending, ties alphabetical: stable across runs
        return cls(t for t, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])))

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.itos), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        tokens = Path(path).read_text(encoding="utf-8").split("\n")
        if tokens and tokens[-1] == "":
            tokens.pop()
        return cls.from_tokens(tokens)

    @classmethod
    def from_tokens(cls, tokens: Sequence[str]) -> "Vocab":
        if tuple(tokens[:4]) != RESERVED:
            raise DataError(f"vocab must start with reserved tokens {RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise DataError("vocab tokens must be unique")
        return cls(tokens[4:])


class TextCodec:
    """Sentence string <-> id list, via tokenisation and optional BPE."""

    def __init__(self, vocab: Vocab, bpe: BpeModel | None = None):
        self.vocab = vocab
        self.bpe = bpe

    def pieces(self, sentence: str) -> list[str]:
        if self.bpe is None:
            return tokenize(sentence)
        return preprocess(sentence, self.bpe)

    def encode(self, sentence: str) -> list[int]:
        return self.vocab.encode(self.pieces(sentence))

    def decode(self, ids: Iterable[int]) -> str:
        toks = [t for t in self.vocab.decode(i for i in ids if i not in (PAD, BOS, EOS))]
        words = detokenize_subwords(toks) if self.bpe is not None else toks
        return " ".join(words)

    @classmethod
    def fit(cls, sentences: Sequence[str], bpe_merges: int | None) -> "TextCodec":
        tokenized = [tokenize(s) for s in sentences]
        bpe = bpe_train([tokenized], bpe_merges) if bpe_merges is not None else None
        if bpe is not None:
            tokenized = [[p for w in toks for p in bpe.apply(w)] for toks in tokenized]
        return cls(Vocab.build(tokenized), bpe)


# ---------------------------------------------------------------------------
# FVEC feature files

FVEC_MAGIC = b"FVEC"
FVEC_VERSION = 1
_FVEC_HEADER = struct.Struct("<4sIQQ")


def save_features(path: str | Path, features: np.ndarray) -> None:
    features = np.asarray(features)
    if features.ndim != 2:
        raise DataError("features must be a 2-d matrix")
    rows, cols = features.shape
    with open(path, "wb") as fh:
        fh.write(_FVEC_HEADER.pack(FVEC_MAGIC, FVEC_VERSION, rows, cols))
        fh.write(np.ascontiguousarray(features, dtype="<f4").tobytes())


def load_features(path: str | Path) -> np.ndarray:
    """Read an FVEC file into a float64 [rows, cols] matrix."""
    raw = Path(path).read_bytes()
    if len(raw) < _FVEC_HEADER.size:
        raise DataError(f"{path}: truncated header at byte offset {len(raw)}")
    magic, version, rows, cols = _FVEC_HEADER.unpack_from(raw)
    if magic != FVEC_MAGIC:
        raise DataError(f"{path}: bad magic at byte offset 0")
    if version != FVEC_VERSION:
        raise DataError(f"{path}: unsupported version {version} at byte offset 4")
    expected = _FVEC_HEADER.size + rows * cols * 4
    if len(raw) != expected:
        off = min(len(raw), expected)
        raise DataError(f"{path}: size mismatch at byte offset {off} "
                        f"(header says {rows}x{cols}, file has {len(raw)} bytes)")
    data = np.frombuffer(raw, dtype="<f4", offset=_FVEC_HEADER.size).reshape(rows, cols)
    bad = ~np.isfinite(data)
    if bad.any():
        raise DataError(f"{path}: non-finite value in row {int(np.argwhere(bad)[0, 0])}")
    return data.astype(np.float64)


# ---------------------------------------------------------------------------
# corpora and batches

GOLD, SYNTHETIC = "gold", "synthetic"


@dataclass
class ParallelCorpus:
    src: list[list[int]]
    tgt: list[list[int]]
    feature_rows: list[int] | None = None
    features: np.ndarray | None = None
    origin: list[str] | None = None

    def __post_init__(self):
        if len(self.src) != len(self.tgt):
            raise DataError("source/target sentence counts differ")
        if self.origin is None:
            self.origin = [GOLD] * len(self.src)
        if self.features is not None and self.feature_rows is None:
            self.feature_rows = list(range(len(self.src)))
        if self.feature_rows is not None:
            if self.features is None:
                raise DataError("feature rows given without a feature matrix")
            if len(self.feature_rows) != len(self.src):
                raise DataError("feature row count differs from corpus size")
            if self.feature_rows and (min(self.feature_rows) < 0
                                      or max(self.feature_rows) >= len(self.features)):
                raise DataError("feature row index outside the feature matrix")

    def __len__(self) -> int:
        return len(self.src)

    @property
    def has_features(self) -> bool:
        return self.features is not None

    def subset(self, idx: Sequence[int]) -> "ParallelCorpus":
        idx = list(idx)
        return ParallelCorpus(
            [self.src[i] for i in idx], [self.tgt[i] for i in idx],
            [self.feature_rows[i] for i in idx] if self.feature_rows is not None else None,
            self.features, [self.origin[i] for i in idx])

    def with_origin(self, origin: str) -> "ParallelCorpus":
        return ParallelCorpus(self.src, self.tgt, self.feature_rows, self.features,
                              [origin] * len(self))

    def reversed(self) -> "ParallelCorpus":
        """Swap source and target sides (for a target->source model)."""
        return ParallelCorpus(self.tgt, self.src, self.feature_rows, self.features, self.origin)


def concat_corpora(parts: Sequence[ParallelCorpus]) -> ParallelCorpus:
    with_feats = [p.has_features for p in parts]
    if any(with_feats) and not all(with_feats):
        raise DataError("cannot mix corpora with and without features")
    src, tgt, origin, rows, mats = [], [], [], [], []
    offset = 0
    for p in parts:
        src += p.src
        tgt += p.tgt
        origin += p.origin
        if p.has_features:
            rows += [r + offset for r in p.feature_rows]
            mats.append(p.features)
            offset += len(p.features)
    feats = np.concatenate(mats) if mats else None
    return ParallelCorpus(src, tgt, rows if mats else None, feats, origin)


@dataclass
class Batch:
    src: np.ndarray          # [B, Tx] ids, PAD-padded
    src_mask: np.ndarray     # [B, Tx] 1.0 on real tokens
    tgt_in: np.ndarray       # [B, Ty] BOS + y
    tgt_out: np.ndarray      # [B, Ty] y + EOS
    tgt_mask: np.ndarray     # [B, Ty]
    features: np.ndarray | None
    origin: list[str]
    index: np.ndarray

    def __len__(self) -> int:
        return self.src.shape[0]

    @property
    def n_tokens(self) -> int:
        return int(self.tgt_mask.sum())


def pad_ids(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), width))
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = 1.0
    return ids, mask


def make_batch(corpus: ParallelCorpus, idx: Sequence[int]) -> Batch:
    idx = list(idx)
    src = [corpus.src[i] for i in idx]
    if any(len(s) == 0 for s in src):
        raise DataError("empty source")
    src_ids, src_mask = pad_ids(src)
    tgt_in, _ = pad_ids([[BOS] + list(corpus.tgt[i]) for i in idx])
    tgt_out, tgt_mask = pad_ids([list(corpus.tgt[i]) + [EOS] for i in idx])
    feats = None
    if corpus.has_features:
        feats = corpus.features[[corpus.feature_rows[i] for i in idx]]
    return Batch(src_ids, src_mask, tgt_in, tgt_out, tgt_mask, feats,
                 [corpus.origin[i] for i in idx], np.asarray(idx))


def make_batches(corpus: ParallelCorpus, batch_size: int = 40, seed: int | None = 0,
                 shuffle: bool = True) -> Iterator[Batch]:
    """One epoch of batches; the final short batch is kept."""
    if len(corpus) == 0:
        raise DataError("make_batches: empty corpus")
    order = np.arange(len(corpus))
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(corpus))
    for lo in range(0, len(order), batch_size):
        yield make_batch(corpus, order[lo:lo + batch_size])


def mix_upsample(gold: ParallelCorpus, synthetic: ParallelCorpus, seed: int) -> ParallelCorpus:
    """One pretraining epoch at a 1:1 gold/synthetic ratio.

    Every synthetic example appears once.  Gold examples are drawn to the
    same count: whole passes over the gold set, topped up by a seeded draw
    without replacement, so equal-size sets give each gold example once.
    """
    if len(gold) == 0 or len(synthetic) == 0:
        raise DataError("mix_upsample: both corpora must be non-empty")
    rng = np.random.default_rng(seed)
    n = len(synthetic)
    passes, rest = divmod(n, len(gold))
    draws = np.concatenate([np.tile(np.arange(len(gold)), passes),
                            rng.choice(len(gold), size=rest, replace=False)]).astype(int)
    gold_part = gold.subset(sorted(draws.tolist())).with_origin(GOLD)
    return concat_corpora([gold_part, synthetic.with_origin(SYNTHETIC)])


# ---------------------------------------------------------------------------
# synthetic grounded translation

def default_lexicon(n_words: int, seed: int = 0) -> tuple[list[str], dict[str, str]]:
    """Source words ``s0..`` and a seeded one-to-one map onto target words ``t0..``."""
    src = [f"s{i}" for i in range(n_words)]
    perm = np.random.default_rng(seed).permutation(n_words)
    return src, {w: f"t{perm[i]}" for i, w in enumerate(src)}


@dataclass
class SynthTask:
    corpus: ParallelCorpus
    features: np.ndarray
    vocab: Vocab
    projection: np.ndarray
    src_text: list[str]
    tgt_text: list[str]


def synth_task(seed: int, n_pairs: int, src_vocab: Sequence[str], tgt_lexicon: dict[str, str],
               o: int, noise_sigma: float, min_len: int = 3, max_len: int = 12) -> SynthTask:
    """Deterministic grounded translation data.

    Targets are the word-by-word lexicon translation of the source, reversed.
    Features are ``P @ bow(y) + noise`` with a seeded projection ``P`` of
    shape [o, |target words|].
    """
    if o < 4:
        raise DataError("synth_task: feature dim must be >= 4")
    rng = np.random.default_rng(seed)
    tgt_words = sorted(set(tgt_lexicon.values()), key=lambda w: (len(w), w))
    tgt_index = {w: i for i, w in enumerate(tgt_words)}
    projection = rng.normal(0.0, 0.5, size=(o, len(tgt_words)))
    vocab = Vocab(list(src_vocab) + tgt_words)
    src_text, tgt_text = [], []
    bows = np.zeros((n_pairs, len(tgt_words)))
    for k in range(n_pairs):
        length = int(rng.integers(min_len, max_len + 1))
        words = [src_vocab[j] for j in rng.integers(0, len(src_vocab), size=length)]
        target = [tgt_lexicon[w] for w in words][::-1]
        src_text.append(" ".join(words))
        tgt_text.append(" ".join(target))
        for w in target:
            bows[k, tgt_index[w]] += 1
    features = bows @ projection.T + noise_sigma * rng.standard_normal((n_pairs, o))
    corpus = ParallelCorpus([vocab.encode(s.split()) for s in src_text],
                            [vocab.encode(t.split()) for t in tgt_text],
                            list(range(n_pairs)), features)
    return SynthTask(corpus, features, vocab, projection, src_text, tgt_text)


def synth_splits(seed: int, sizes: Sequence[int], src_vocab: Sequence[str],
                 tgt_lexicon: dict[str, str], o: int, noise_sigma: float) -> list[SynthTask]:
    """Consecutive slices of one task, so every split shares the projection."""
    whole = synth_task(seed, sum(sizes), src_vocab, tgt_lexicon, o, noise_sigma)
    out, lo = [], 0
    for n in sizes:
        sl = slice(lo, lo + n)
        feats = whole.features[sl]
        corpus = ParallelCorpus(whole.corpus.src[sl], whole.corpus.tgt[sl], list(range(n)), feats)
        out.append(SynthTask(corpus, feats, whole.vocab, whole.projection,
                             whole.src_text[sl], whole.tgt_text[sl]))
        lo += n
    return out


def read_lines(path: str | Path) -> list[str]:
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DataError(f"{path}: invalid UTF-8 at byte offset {exc.start}") from exc
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return lines


def write_lines(path: str | Path, lines: Iterable[str]) -> None:
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
