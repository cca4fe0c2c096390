"""Byte-level corpora and batching."""

from __future__ import annotations

import hashlib
import zlib
from pathlib import Path
from typing import Iterator

import numpy as np

VOCAB_SIZE = 256


def encode(data: bytes | str) -> np.ndarray:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


def decode(ids) -> bytes:
    return bytes(np.asarray(ids, dtype=np.uint8).tolist())


def load_corpus(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if not data:
        raise ValueError(f"corpus {path} is empty")
    return encode(data)


def corpus_id(ids: np.ndarray) -> str:
    return hashlib.sha256(np.asarray(ids, dtype=np.uint8).tobytes()).hexdigest()[:16]


def derive_rng(seed: int, label: str) -> np.random.Generator:
    """Independent generator for one subsystem, keyed by a fixed label."""
    return np.random.default_rng([seed, zlib.crc32(label.encode())])


def derive_seed(seed: int, label: str) -> int:
    return int(derive_rng(seed, label).integers(0, 2**31 - 1))


def make_batches(
    ids: np.ndarray, seq_len: int, batch_size: int, rng: np.random.Generator
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Endless ``(inputs[B, S], targets[B, S])`` with uniformly drawn windows."""
    ids = np.asarray(ids, dtype=np.int64)
    if seq_len < 1 or batch_size < 1:
        raise ValueError("seq_len and batch_size must be positive")
    if len(ids) <= seq_len:
        raise ValueError(f"corpus of {len(ids)} tokens is too short for windows of {seq_len}")
    offsets = np.arange(seq_len)
    while True:
        starts = rng.integers(0, len(ids) - seq_len, size=batch_size)
        x = ids[starts[:, None] + offsets]
        y = ids[starts[:, None] + offsets + 1]
        yield x, y


def eval_windows(ids: np.ndarray, seq_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping ``(inputs, targets)`` windows covering the corpus."""
    ids = np.asarray(ids, dtype=np.int64)
    n = (len(ids) - 1) // seq_len
    if n < 1:
        raise ValueError("eval corpus shorter than one window")
    x = ids[: n * seq_len].reshape(n, seq_len)
    y = ids[1 : n * seq_len + 1].reshape(n, seq_len)
    return x, y


# --------------------------------------------------------------------------
# synthetic text for desk-scale runs

_ONSETS = ["", "b", "c", "d", "f", "g", "h", "l", "m", "n", "p", "r", "s", "t", "v", "w", "st", "tr", "ch", "sh"]
_NUCLEI = ["a", "e", "i", "o", "u", "ai", "ea", "ou"]
_CODAS = ["", "", "n", "r", "s", "t", "l", "nd", "ng"]


def _make_word(rng: np.random.Generator) -> str:
    n = int(rng.choice([1, 2, 2, 3, 3, 4]))
    return "".join(
        _ONSETS[rng.integers(len(_ONSETS))] + _NUCLEI[rng.integers(len(_NUCLEI))] + _CODAS[rng.integers(len(_CODAS))]
        for _ in range(n)
    )


def synthetic_corpus(n_bytes: int, seed: int = 0, n_words: int = 400) -> bytes:
    """English-like text from a Zipfian word bigram model.

    Characters inside a word are mostly determined by their prefix while word
    starts are uncertain, so the text mixes easy and hard next-byte targets.
    """
    rng = np.random.default_rng(seed)
    words: list[str] = []
    seen = set()
    while len(words) < n_words:
        w = _make_word(rng)
        if w and w not in seen:
            seen.add(w)
            words.append(w)
    zipf = 1.0 / np.arange(1, n_words + 1)
    zipf /= zipf.sum()
    # each word prefers a handful of successors
    succ = rng.choice(n_words, size=(n_words, 6), p=zipf)
    out: list[str] = []
    size = 0
    prev = int(rng.choice(n_words, p=zipf))
    sentence_len = 0
    start = True
    while size < n_bytes:
        if rng.random() < 0.7:
            cur = int(succ[prev, rng.integers(6)])
        else:
            cur = int(rng.choice(n_words, p=zipf))
        w = words[cur]
        if start:
            w = w.capitalize()
            start = False
        sentence_len += 1
        if sentence_len > 4 and rng.random() < 0.15:
            w += "." if rng.random() < 0.8 else "?"
            sentence_len = 0
            start = True
        elif rng.random() < 0.05:
            w += ","
        piece = w + ("\n" if start and rng.random() < 0.2 else " ")
        out.append(piece)
        size += len(piece)
        prev = cur
    return "".join(out).encode("ascii")[:n_bytes]
