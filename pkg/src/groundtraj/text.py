"""Deterministic word-hash text features for the toy stack."""

from __future__ import annotations

import hashlib
import re
from functools import lru_cache

import numpy as np

_WORD = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _WORD.findall(text.lower()) or ["<empty>"]


class HashEmbedder:
    """Maps every word to a fixed pseudo-random vector (one row per word)."""

    def __init__(self, dim: int, salt: str = "groundtraj"):
        self.dim = dim
        self.salt = salt

    @lru_cache(maxsize=4096)
    def word(self, w: str) -> np.ndarray:
        h = hashlib.blake2b(f"{self.salt}:{w}".encode(), digest_size=8).digest()
        v = np.random.default_rng(int.from_bytes(h, "little")).standard_normal(self.dim)
        v.setflags(write=False)
        return v

    def __call__(self, text: str) -> np.ndarray:
        return np.stack([self.word(w) for w in tokenize(text)])

    def __hash__(self):
        return hash((self.dim, self.salt))

    def __eq__(self, other):
        return isinstance(other, HashEmbedder) and (self.dim, self.salt) == (other.dim, other.salt)
