"""Synthetic raw-text corpora for toy runs and tests.

Sentences come from a hidden Markov chain over word classes; each class
emits from its own Zipf-weighted word list.  The text contains capitals,
numbers and punctuation so that preprocessing has work to do.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError
from .rng import stream

_CONSONANTS = "bcdfghjklmnprstvwz"
_VOWELS = "aeiou"


def _make_words(n: int, rng: np.random.Generator) -> list[str]:
    words, seen = [], set()
    while len(words) < n:
        syl = rng.integers(1, 4)
        w = "".join(rng.choice(list(_CONSONANTS)) + rng.choice(list(_VOWELS)) for _ in range(syl))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def hmm_text(n_tokens: int, vocab_words: int = 500, classes: int = 16, seed: int = 0,
             min_len: int = 6, max_len: int = 30) -> str:
    """About ``n_tokens`` words of text, one sentence per line."""
    if not 1 <= classes <= vocab_words:
        raise ConfigurationError(f"need 1 <= classes <= vocab_words, got {classes}, {vocab_words}")
    rng = stream(seed, "synthetic/structure")
    words = _make_words(vocab_words, rng)
    members = np.array_split(rng.permutation(vocab_words), classes)
    emit = []
    for m in members:
        w = 1.0 / np.arange(1, len(m) + 1) ** 1.1
        emit.append((m, w / w.sum()))
    trans = rng.dirichlet(np.full(classes, 0.15), size=classes)
    start = rng.dirichlet(np.full(classes, 0.5))

    draw = stream(seed, "synthetic/text")
    lines, total = [], 0
    while total < n_tokens:
        length = int(draw.integers(min_len, max_len + 1))
        c = draw.choice(classes, p=start)
        toks = []
        for _ in range(length):
            m, w = emit[c]
            toks.append(words[m[draw.choice(len(m), p=w)]])
            c = draw.choice(classes, p=trans[c])
        if draw.random() < 0.2:
            toks.insert(int(draw.integers(0, len(toks))), str(int(draw.integers(1, 2000))))
        if draw.random() < 0.3:
            toks[0] = toks[0].capitalize()
        lines.append(" ".join(toks) + (" ." if draw.random() < 0.8 else " ,"))
        total += len(toks) + 1
    return "\n".join(lines) + "\n"


def alternating_text(n_pairs: int, a: str = "a", b: str = "b") -> str:
    """'a b a b ...' on a single line."""
    return " ".join([a, b] * n_pairs)
