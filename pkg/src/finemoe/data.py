"""Tokenizers, the synthetic motif corpus and batch sampling."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError

# 64 printable symbols (base64 alphabet)
SYMBOLS = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/"


class ByteTokenizer:
    vocab_size = 256

    def encode(self, text: str | bytes) -> np.ndarray:
        raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
        return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)

    def decode(self, ids) -> bytes:
        return bytes(int(i) for i in ids)


class WordTokenizer:
    """Whitespace-word vocabulary read from a file with one word per line; id 0 is ``<unk>``."""

    def __init__(self, words: list[str]):
        self.words = ["<unk>"] + [w for w in words if w != "<unk>"]
        self.index = {w: i for i, w in enumerate(self.words)}

    @classmethod
    def from_file(cls, path) -> "WordTokenizer":
        return cls([ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()])

    @property
    def vocab_size(self) -> int:
        return len(self.words)

    def encode(self, text: str) -> np.ndarray:
        return np.array([self.index.get(w, 0) for w in text.split()], dtype=np.int64)

    def decode(self, ids) -> str:
        return " ".join(self.words[int(i)] for i in ids)


def synthetic_corpus(n_tokens: int, seed: int = 0, n_motifs: int = 24, zipf: float = 1.1) -> str:
    """Text over the 64 :data:`SYMBOLS` built from recurring motifs.

    A fixed set of random motifs (3-8 symbols) is drawn, then motifs are
    concatenated with Zipfian frequencies until ``n_tokens`` characters exist.
    """
    rng = np.random.default_rng(seed)
    motifs = ["".join(rng.choice(list(SYMBOLS), size=rng.integers(3, 9))) for _ in range(n_motifs)]
    weights = 1.0 / np.arange(1, n_motifs + 1) ** zipf
    weights /= weights.sum()
    out: list[str] = []
    length = 0
    while length < n_tokens:
        m = motifs[rng.choice(n_motifs, p=weights)]
        out.append(m)
        length += len(m)
    return "".join(out)[:n_tokens]


@dataclass
class Corpus:
    """A packed token stream split into a training prefix and a held-out suffix."""

    tokens: np.ndarray
    eval_fraction: float = 0.1

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        cut = int(round(len(self.tokens) * (1.0 - self.eval_fraction)))
        self.train_tokens = self.tokens[:cut]
        self.eval_tokens = self.tokens[cut:]

    @classmethod
    def from_text(cls, text: str | bytes, tokenizer=None, eval_fraction: float = 0.1) -> "Corpus":
        tok = tokenizer or ByteTokenizer()
        return cls(tok.encode(text), eval_fraction)

    @classmethod
    def from_file(cls, path, tokenizer=None, eval_fraction: float = 0.1) -> "Corpus":
        raw = Path(path).read_bytes()
        if tokenizer is not None and not isinstance(tokenizer, ByteTokenizer):
            return cls(tokenizer.encode(raw.decode("utf-8")), eval_fraction)
        return cls(ByteTokenizer().encode(raw), eval_fraction)

    @classmethod
    def synthetic(cls, n_tokens: int = 40_000, seed: int = 0, eval_fraction: float = 0.1) -> "Corpus":
        return cls.from_text(synthetic_corpus(n_tokens, seed), eval_fraction=eval_fraction)

    def sample_batch(self, rng: np.random.Generator, n_seq: int, seq_len: int) -> np.ndarray:
        """``[n_seq, seq_len + 1]`` contiguous windows at random offsets of the training stream."""
        hi = len(self.train_tokens) - seq_len - 1
        if hi < 0:
            raise ConfigError(f"training stream ({len(self.train_tokens)} tokens) shorter than seq_len+1")
        starts = rng.integers(0, hi + 1, size=n_seq)
        return np.stack([self.train_tokens[s:s + seq_len + 1] for s in starts])

    def eval_windows(self, seq_len: int, max_tokens: int | None = None) -> np.ndarray:
        """Non-overlapping ``[n, seq_len + 1]`` windows of the held-out stream."""
        stream = self.eval_tokens
        n = (len(stream) - 1) // seq_len
        if max_tokens is not None:
            n = min(n, max(1, max_tokens // seq_len))
        if n < 1:
            raise ConfigError(f"held-out stream ({len(stream)} tokens) shorter than seq_len+1")
        return np.stack([stream[i * seq_len:(i + 1) * seq_len + 1] for i in range(n)])
