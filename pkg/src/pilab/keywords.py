"""Positional keyword inventory, antonym map and keyword matching."""
from __future__ import annotations

import re
from functools import lru_cache
from typing import Iterable, Mapping, Sequence

from .errors import DataError

AXES = ("X", "Y", "Z")

# Table of positional keywords per image axis. "before" is listed once even
# though the source table repeats it.
KEYWORDS: dict[str, tuple[str, ...]] = {
    "X": ("left", "right", "beside", "besides", "alongside", "side"),
    "Y": ("top", "down", "above", "below", "under", "beneath",
          "underneath", "over", "beyond", "overhead"),
    "Z": ("behind", "front", "rear", "back", "ahead", "before",
          "foreground", "background", "forepart", "far end", "hindquarters"),
}

_ANTONYM_PAIRS = (
    ("left", "right"),
    ("above", "below"),
    ("under", "over"),
    ("foreground", "background"),
    ("before", "behind"),
)

ANTONYMS: dict[str, str] = {}
for _a, _b in _ANTONYM_PAIRS:
    ANTONYMS[_a] = _b
    ANTONYMS[_b] = _a

KEYWORD_AXIS: dict[str, str] = {kw: axis for axis, kws in KEYWORDS.items() for kw in kws}


@lru_cache(maxsize=None)
def _pattern(words: tuple[str, ...]) -> re.Pattern:
    # longest first so "besides" is preferred over "beside"
    alts = sorted(words, key=len, reverse=True)
    body = "|".join(r"\s+".join(map(re.escape, w.split())) for w in alts)
    return re.compile(rf"\b(?:{body})\b", re.IGNORECASE)


def find_keywords(text: str, words: Iterable[str]) -> list[str]:
    """All keyword occurrences in ``text`` (lower-cased), in reading order."""
    pat = _pattern(tuple(words))
    return [" ".join(m.group(0).lower().split()) for m in pat.finditer(text)]


def axes_of(text: str, keywords: Mapping[str, Sequence[str]] = KEYWORDS) -> set[str]:
    """Set of axes with at least one keyword present in ``text``."""
    return {axis for axis, kws in keywords.items() if _pattern(tuple(kws)).search(text)}


def corpus_keyword_stats(corpus: Sequence, keywords: Mapping[str, Sequence[str]] = KEYWORDS
                         ) -> dict[str, float]:
    """Percentage of texts containing at least one keyword, per axis.

    Items may be plain strings or objects with a ``text`` attribute (captions,
    questions). Matching is case-insensitive on word boundaries.
    """
    texts = [item if isinstance(item, str) else item.text for item in corpus]
    if not texts:
        raise DataError("corpus_keyword_stats needs a non-empty corpus")
    out = {}
    for axis, kws in keywords.items():
        pat = _pattern(tuple(kws))
        hits = sum(1 for t in texts if pat.search(t))
        out[axis] = 100.0 * hits / len(texts)
    return out


def is_contrastible(tokens: Sequence[str]) -> bool:
    return any(t in ANTONYMS for t in tokens)


def substitute_antonyms(tokens: Sequence[str]) -> tuple[list[str], list[int]]:
    """Swap every antonym-list token for its counterpart.

    Returns the new token list and the indices that changed.
    """
    out, changed = [], []
    for i, t in enumerate(tokens):
        if t in ANTONYMS:
            out.append(ANTONYMS[t])
            changed.append(i)
        else:
            out.append(t)
    return out, changed
