"""Contrastive challenge sets (random caption swap, antonym substitution) and recall."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import keywords as kw
from .data import SceneCache, text_batch, vocab_for
from .errors import ConfigError, DataError, FormatError
from .model import PIModel
from .scene_gen import Caption, Corpus

SETUPS = ("random_swap", "antonym")


@dataclass(frozen=True)
class ChallengeItem:
    scene_id: str
    caption: Caption
    setup: str
    source_scene_id: str                # scene the caption was written for
    original_tokens: tuple = ()

    @property
    def ground_truth_match(self) -> bool:
        return False

    def to_dict(self) -> dict:
        return {"scene": self.scene_id, "setup": self.setup, "source": self.source_scene_id,
                "caption": self.caption.to_dict(), "original": list(self.original_tokens)}

    @classmethod
    def from_dict(cls, d: dict) -> "ChallengeItem":
        return cls(d["scene"], Caption.from_dict(d["caption"]), d["setup"], d["source"],
                   tuple(d["original"]))


def antonym_item(scene_id: str, caption: Caption):
    if not (caption.truth and kw.is_contrastible(caption.tokens)):
        return None
    tokens, _ = kw.substitute_antonyms(caption.tokens)
    swapped = replace(caption, tokens=tuple(tokens), truth=False)
    return ChallengeItem(scene_id, swapped, "antonym", scene_id, caption.tokens)


def build_challenge_set(corpus: Corpus, setup: str, seed: int = 0) -> list[ChallengeItem]:
    """All-negative items for ``setup``.

    random_swap pairs every caption's image with a caption drawn from a
    different scene; antonym keeps the image and substitutes every
    antonym-list keyword of each true caption, skipping captions without one.
    """
    if setup not in SETUPS:
        raise ConfigError(f"unknown setup {setup!r}; expected one of {SETUPS}")
    scenes = corpus.scenes
    items = []
    if setup == "antonym":
        for s in scenes:
            items += [it for c in s.captions if (it := antonym_item(s.scene_id, c)) is not None]
    else:
        donors = [k for k, s in enumerate(scenes) if s.captions]
        if len(donors) < 2:
            raise DataError("random swap needs captions from at least two scenes")
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5A4B]))
        for k, s in enumerate(scenes):
            for _ in s.captions:
                d = k
                while d == k:
                    d = donors[int(rng.integers(len(donors)))]
                src = scenes[d]
                cap = src.captions[int(rng.integers(len(src.captions)))]
                items.append(ChallengeItem(s.scene_id, replace(cap, truth=False), setup,
                                           src.scene_id, cap.tokens))
    if not items:
        raise DataError(f"no eligible captions for the {setup} setup")
    return items


def save_challenge_set(items: Sequence[ChallengeItem], path) -> Path:
    path = Path(path)
    path.write_text("".join(json.dumps(it.to_dict(), sort_keys=True, separators=(",", ":"))
                            + "\n" for it in items))
    return path


def load_challenge_set(path) -> list[ChallengeItem]:
    try:
        lines = Path(path).read_text().splitlines()
        return [ChallengeItem.from_dict(json.loads(line)) for line in lines]
    except (OSError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read challenge set {path}: {exc}") from None


@dataclass
class RecallResult:
    recall: float
    tp: int
    fn: int
    fp: int = 0
    tn: int = 0
    setup: str = ""
    pi_mode: str = ""
    pretrain_variant: str = "plain"

    @property
    def n(self) -> int:
        return self.tp + self.fn

    def to_dict(self) -> dict:
        return {"kind": "contrastive", "version": 1, **asdict(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "RecallResult":
        return cls(**{k: v for k, v in d.items() if k not in ("kind", "version")})


def recall_from_predictions(predicted_match: np.ndarray, setup: str = "") -> RecallResult:
    """Recall of the no-match class when every ground truth is no-match."""
    predicted_match = np.asarray(predicted_match, dtype=bool)
    if predicted_match.size == 0:
        raise DataError("recall of an empty challenge set is undefined")
    tp = int((~predicted_match).sum())
    fn = int(predicted_match.sum())
    return RecallResult(tp / (tp + fn), tp, fn, 0, 0, setup)


def match_probabilities(checkpoint, items: Sequence[ChallengeItem], corpus: Corpus,
                        batch_size: int = 128) -> np.ndarray:
    model = checkpoint if isinstance(checkpoint, PIModel) else checkpoint.model()
    by_id = {s.scene_id: s for s in corpus.scenes}
    missing = {it.scene_id for it in items} - set(by_id)
    if missing:
        raise DataError(f"challenge items refer to unknown scenes, e.g. {sorted(missing)[0]}")
    vocab, cache = vocab_for(corpus), SceneCache(model.dtype)
    probs = []
    for start in range(0, len(items), batch_size):
        part = items[start:start + batch_size]
        batch = text_batch([by_id[it.scene_id] for it in part], [it.caption.tokens for it in part],
                           model.mode, vocab, model.config, cache)
        logit = model.forward(batch, heads=("cmm",)).cmm_logit.astype(np.float64)
        model._record = None
        probs.append(1.0 / (1.0 + np.exp(-logit)))
    return np.concatenate(probs)


def eval_recall(checkpoint, items: Sequence[ChallengeItem], corpus: Corpus,
                threshold: float = 0.5, variant: str = "plain") -> RecallResult:
    """A caption counts as matched when P(match) exceeds ``threshold``."""
    if not items:
        raise DataError("recall of an empty challenge set is undefined")
    model = checkpoint if isinstance(checkpoint, PIModel) else checkpoint.model()
    setups = {it.setup for it in items}
    probs = match_probabilities(model, items, corpus)
    res = recall_from_predictions(probs > threshold, "+".join(sorted(setups)))
    res.pi_mode, res.pretrain_variant = model.mode.value, variant
    return res
