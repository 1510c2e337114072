"""Word-level corpus handling: PTB-style cleanup, capped vocabulary, BPTT batches."""

from __future__ import annotations

import re
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigurationError

UNK = "<unk>"
EOS = "<eos>"
NUM = "N"
SPECIALS = (UNK, EOS, NUM)

# apostrophes and hyphens stay: "'s", "single-a-1", "30-year"
_DROP = "".join(c for c in string.punctuation if c not in "'-")
_DROP_TABLE = str.maketrans("", "", _DROP)
_NUMBER = re.compile(r"^[+-]?(\d[\d,]*(\.\d*)?|\.\d+)$")


def _clean(token: str) -> str | None:
    if token in SPECIALS:
        return token
    token = token.lower()
    if _NUMBER.match(token):
        return NUM
    token = token.translate(_DROP_TABLE)
    if not token.strip("'-"):
        return None
    if token.isdigit() or _NUMBER.match(token):
        return NUM
    return token


def preprocess(text: str) -> list[str]:
    """Lower-case, map numbers to N, newline to <eos>, strip punctuation.

    Every newline yields one <eos>.  A final line without a newline also gets
    one unless it already ends in an <eos> token, which keeps the operation
    idempotent under ``preprocess(" ".join(preprocess(x)))``.
    """
    out: list[str] = []
    lines = text.split("\n")
    for i, line in enumerate(lines):
        for raw in line.split():
            tok = _clean(raw)
            if tok is not None:
                out.append(tok)
        last = i == len(lines) - 1
        if not last:
            out.append(EOS)
        elif line.strip() and (not out or out[-1] != EOS):
            out.append(EOS)
    return out


@dataclass(frozen=True)
class Vocabulary:
    """Rank-ordered token table; rank 0 is the most frequent entry."""

    itos: tuple[str, ...]
    counts: tuple[int, ...]
    stoi: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "stoi", {t: i for i, t in enumerate(self.itos)})
        missing = [s for s in SPECIALS if s not in self.stoi]
        if missing:
            raise ConfigurationError(f"vocabulary lacks special tokens {missing}")
        if len(self.stoi) != len(self.itos):
            raise ConfigurationError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    @property
    def unk(self) -> int:
        return self.stoi[UNK]

    @property
    def eos(self) -> int:
        return self.stoi[EOS]

    def encode(self, tokens: Iterable[str]) -> np.ndarray:
        unk = self.unk
        return np.array([self.stoi.get(t, unk) for t in tokens], dtype=np.int64)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[int(i)] for i in ids]

    def digest(self) -> int:
        """64-bit FNV-1a over the rank-ordered tokens, each followed by a newline."""
        h = 0xCBF29CE484222325
        for tok in self.itos:
            for byte in tok.encode("utf-8") + b"\n":
                h ^= byte
                h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
        return h

    def to_tsv(self) -> str:
        return "".join(f"{t}\t{c}\n" for t, c in zip(self.itos, self.counts))

    @classmethod
    def from_tsv(cls, text: str) -> "Vocabulary":
        itos, counts = [], []
        for line in text.splitlines():
            if not line:
                continue
            tok, count = line.rsplit("\t", 1)
            itos.append(tok)
            counts.append(int(count))
        return cls(tuple(itos), tuple(counts))

    def save(self, path) -> None:
        Path(path).write_text(self.to_tsv(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_tsv(Path(path).read_text(encoding="utf-8"))


def build_vocabulary(tokens: Sequence[str], cap: int = 10000) -> Vocabulary:
    """Keep the ``cap`` most frequent tokens, specials always included.

    Counts are those of the encoded stream, so <unk> absorbs every dropped
    token.  Equal counts are ordered lexicographically.
    """
    if cap < len(SPECIALS):
        raise ConfigurationError(f"cap {cap} smaller than the {len(SPECIALS)} special tokens")
    raw = Counter(tokens)
    ranked = sorted((t for t in raw if t not in SPECIALS), key=lambda t: (-raw[t], t))
    kept = ranked[: cap - len(SPECIALS)]
    counts = {t: raw[t] for t in kept}
    for s in SPECIALS:
        counts[s] = raw.get(s, 0)
    counts[UNK] += sum(raw[t] for t in ranked[len(kept):])
    itos = sorted(counts, key=lambda t: (-counts[t], t))
    return Vocabulary(tuple(itos), tuple(counts[t] for t in itos))


def sentence_positions(ids: np.ndarray, eos: int) -> np.ndarray:
    """Position of each token inside its sentence; the token after <eos> is 0."""
    pos = np.zeros(len(ids), dtype=np.int64)
    for i in range(1, len(ids)):
        pos[i] = 0 if ids[i - 1] == eos else pos[i - 1] + 1
    return pos


@dataclass(frozen=True)
class CorpusBatch:
    inputs: np.ndarray      # (batch, bptt)
    targets: np.ndarray     # (batch, bptt)
    positions: np.ndarray   # sentence position of each input token

    @property
    def shape(self) -> tuple[int, int]:
        return self.inputs.shape


def make_batches(ids: np.ndarray, batch_size: int, bptt: int,
                 eos: int | None = None) -> list[CorpusBatch]:
    """Split a stream into ``batch_size`` contiguous rows and cut BPTT windows.

    Row b of consecutive batches continues the same segment of the stream, so a
    hidden state can be carried across them.  Tokens that do not fill a whole
    row or window are dropped.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if batch_size < 1 or bptt < 1:
        raise ConfigurationError("batch size and bptt length must be positive")
    if len(ids) <= batch_size * 2:
        raise ConfigurationError(
            f"stream of {len(ids)} tokens too short for batch size {batch_size}")
    row_len = len(ids) // batch_size
    rows = ids[: row_len * batch_size].reshape(batch_size, row_len)
    if eos is None:
        pos_rows = np.zeros_like(rows)
    else:
        pos_rows = sentence_positions(ids, eos)[: row_len * batch_size].reshape(batch_size, row_len)
    n_windows = (row_len - 1) // bptt
    if n_windows == 0:
        raise ConfigurationError(f"rows of {row_len} tokens cannot fill a bptt window of {bptt}")
    batches = []
    for w in range(n_windows):
        s = w * bptt
        batches.append(CorpusBatch(rows[:, s:s + bptt].copy(),
                                   rows[:, s + 1:s + bptt + 1].copy(),
                                   pos_rows[:, s:s + bptt].copy()))
    return batches


def iter_sentences(ids: np.ndarray, eos: int) -> Iterator[tuple[int, int]]:
    """Yield (start, stop) spans of the words between <eos> tokens."""
    start = 0
    for i, t in enumerate(ids):
        if t == eos:
            yield start, i
            start = i + 1
    if start < len(ids):
        yield start, len(ids)


def format_tokens(tokens: Sequence[str]) -> str:
    """Serialize a token stream: space separated, a newline after each <eos>."""
    parts, line = [], []
    for t in tokens:
        line.append(t)
        if t == EOS:
            parts.append(" ".join(line) + "\n")
            line = []
    if line:
        parts.append(" ".join(line) + "\n")
    return "".join(parts)


def read_tokens(path) -> list[str]:
    return Path(path).read_text(encoding="utf-8").split()


SPLITS = ("train", "valid", "test")


def preprocess_files(inputs: dict, out_dir, cap: int) -> Vocabulary:
    """Write ``<split>.tokens`` for every input split and ``vocab.tsv`` from train."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    streams = {split: preprocess(Path(p).read_text(encoding="utf-8"))
               for split, p in inputs.items()}
    if "train" not in streams:
        raise ConfigurationError("a train split is required to build the vocabulary")
    vocab = build_vocabulary(streams["train"], cap)
    for split, toks in streams.items():
        (out / f"{split}.tokens").write_text(format_tokens(toks), encoding="utf-8")
    vocab.save(out / "vocab.tsv")
    return vocab


def load_corpus(corpus_dir) -> tuple[Vocabulary, dict]:
    """Read a preprocessed corpus directory into a vocabulary and encoded splits."""
    d = Path(corpus_dir)
    vocab = Vocabulary.load(d / "vocab.tsv")
    splits = {s: vocab.encode(read_tokens(d / f"{s}.tokens"))
              for s in SPLITS if (d / f"{s}.tokens").exists()}
    return vocab, splits
