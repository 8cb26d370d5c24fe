"""Word-level vocabulary with reserved special tokens."""
from __future__ import annotations

from collections import Counter
from typing import Iterable, List, Sequence

PAD, BOS, EOS, UNK = "<PAD>", "<BOS>", "<EOS>", "<UNK>"
SPECIALS = (PAD, BOS, EOS, UNK)
PAD_ID, BOS_ID, EOS_ID, UNK_ID = range(4)


class Vocab:
    def __init__(self, words: Sequence[str]):
        words = list(words)
        if tuple(words[:4]) != SPECIALS:
            raise ValueError("vocabulary must start with the four special tokens")
        if len(set(words)) != len(words):
            raise ValueError("duplicate vocabulary entries")
        self.itos: List[str] = words
        self.stoi = {w: i for i, w in enumerate(words)}

    @classmethod
    def build(cls, sentences: Iterable[Sequence[str]], min_freq: int = 1) -> "Vocab":
        counts = Counter(w for s in sentences for w in s)
        kept = sorted(w for w, c in counts.items() if c >= min_freq and w not in SPECIALS)
        return cls(list(SPECIALS) + kept)

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    def encode(self, words: Sequence[str]) -> List[int]:
        return [self.stoi.get(w, UNK_ID) for w in words]

    def decode(self, ids: Iterable[int]) -> List[str]:
        """Map ids back to words, stopping at EOS and dropping BOS/PAD."""
        out = []
        for i in ids:
            i = int(i)
            if i == EOS_ID:
                break
            if i in (PAD_ID, BOS_ID):
                continue
            out.append(self.itos[i])
        return out
