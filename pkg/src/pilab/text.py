"""Closed word vocabulary shared by captions and questions."""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from . import keywords as kw
from .errors import ConfigError

PAD, CLS, SEP, MASK, UNK = "[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"
SPECIALS = (PAD, CLS, SEP, MASK, UNK)

_FUNCTION_WORDS = (
    "a", "an", "the", "of", "and", "with", "photo", "in", "on", "to", "or", "is", "are",
    "there", "what", "which", "color", "picture", "?", "yes", "no", "far", "end", "next",
)


class Vocab:
    def __init__(self, words: Iterable[str]):
        seen = dict.fromkeys(SPECIALS)
        for w in words:
            seen.setdefault(w)
        self.itos = list(seen)
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    @property
    def pad_id(self):
        return self.stoi[PAD]

    @property
    def mask_id(self):
        return self.stoi[MASK]

    def ids(self, tokens: Sequence[str]) -> list[int]:
        unk = self.stoi[UNK]
        return [self.stoi.get(t, unk) for t in tokens]

    def encode(self, tokens: Sequence[str], max_len: int) -> tuple[np.ndarray, np.ndarray]:
        """``[CLS] tokens [SEP]`` padded to ``max_len``; returns (ids, valid mask)."""
        ids = [self.stoi[CLS]] + self.ids(tokens) + [self.stoi[SEP]]
        if len(ids) > max_len:
            raise ConfigError(f"text of {len(tokens)} tokens exceeds max_text_len={max_len}")
        out = np.full(max_len, self.pad_id, dtype=np.int64)
        out[:len(ids)] = ids
        mask = np.zeros(max_len, dtype=bool)
        mask[:len(ids)] = True
        return out, mask


def default_vocab(categories: Sequence[str], attributes: Sequence[str]) -> Vocab:
    kw_words = [w for kws in kw.KEYWORDS.values() for k in kws for w in k.split()]
    return Vocab(list(_FUNCTION_WORDS) + kw_words + list(categories) + list(attributes))
