"""Turning scenes and texts into model batches."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .encoding import PIMode, pi_matrix
from .errors import ConfigError
from .model import Batch, ModelConfig
from .scene_gen import Corpus, Scene
from .text import Vocab, default_vocab


@dataclass
class PretrainSample:
    scene: Scene
    tokens: tuple[str, ...]
    match: bool = True
    provenance: str = "clean"          # clean | cmm_swap | cl_antonym | qa
    caption_scene_id: Optional[str] = None
    qa_answer: Optional[int] = None
    masked_view: bool = False          # carries MLM/object targets instead of a CMM label

    @property
    def match_label(self) -> bool:
        return self.match

    @property
    def pip_targets(self):
        return self.scene.labels


@dataclass
class Targets:
    mlm: np.ndarray                    # (B, T) token id or -1
    match: np.ndarray                  # (B,) 1.0 = match
    cmm_mask: np.ndarray               # (B,) bool
    obj: np.ndarray                    # (B, N) category id or -1
    attr: np.ndarray                   # (B, N) attribute id or -1
    feat: np.ndarray                   # (B, N, F)
    feat_mask: np.ndarray              # (B, N) bool
    qa: np.ndarray                     # (B,) answer id or -1
    pip: np.ndarray                    # (B, 9, N, N) bool
    provenance: list = field(default_factory=list)


def vocab_for(corpus: Corpus) -> Vocab:
    return default_vocab(corpus.world.categories, corpus.world.attributes)


def model_config_for(corpus: Corpus, pi_mode, n_answers: Optional[int] = None,
                     **overrides) -> ModelConfig:
    """Model config whose vocabulary and object/feature sizes match ``corpus``."""
    from .downstream import answer_vocab

    sc = corpus.config
    cfg = dict(vocab_size=len(vocab_for(corpus)), n_objects=sc.n_objects,
               feature_dim=sc.feature_dim, n_categories=sc.n_categories,
               n_attributes=sc.n_attributes, pi_mode=PIMode.parse(pi_mode).value,
               n_answers=n_answers or len(answer_vocab(corpus.world.attributes)))
    cfg.update(overrides)
    return ModelConfig(**cfg)


class SceneCache:
    """Per-scene float arrays, computed once per (scene, PI mode)."""

    def __init__(self, dtype=np.float32):
        self.dtype = dtype
        self._pi: dict = {}
        self._feat: dict = {}

    def features(self, scene: Scene) -> np.ndarray:
        key = id(scene)
        if key not in self._feat:
            self._feat[key] = (scene, scene.features().astype(self.dtype))
        return self._feat[key][1]

    def pi(self, scene: Scene, mode: PIMode) -> np.ndarray:
        key = (id(scene), mode)
        if key not in self._pi:
            self._pi[key] = (scene, pi_matrix(scene, mode).astype(self.dtype))
        return self._pi[key][1]


def encode_texts(vocab: Vocab, texts: Sequence[Sequence[str]], max_len: int):
    ids = np.empty((len(texts), max_len), dtype=np.int64)
    mask = np.empty((len(texts), max_len), dtype=bool)
    for k, t in enumerate(texts):
        ids[k], mask[k] = vocab.encode(t, max_len)
    return ids, mask


def make_mm_batch(token_ids: np.ndarray, text_mask: np.ndarray, mask_prob: float, seed,
                  vocab: Vocab, eligible: Optional[np.ndarray] = None):
    """Mask word tokens independently with probability ``mask_prob``.

    Only real word positions (not ``[CLS]``, ``[SEP]`` or padding) are
    candidates; ``eligible`` can further restrict rows. Returns
    ``(masked ids, targets)`` with ``-1`` where no prediction is required.
    """
    if not 0.0 <= mask_prob <= 1.0:
        raise ConfigError("mask_prob must lie in [0, 1]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    words = text_mask.copy()
    words[:, 0] = False
    lengths = text_mask.sum(axis=1)
    words[np.arange(len(lengths)), lengths - 1] = False  # [SEP]
    if eligible is not None:
        words &= np.asarray(eligible, dtype=bool)[:, None]
    draw = rng.random(token_ids.shape) < mask_prob
    chosen = words & draw
    targets = np.where(chosen, token_ids, -1)
    masked = np.where(chosen, vocab.mask_id, token_ids)
    return masked, targets


def collate(samples: Sequence[PretrainSample], mode: PIMode, vocab: Vocab, config: ModelConfig,
            cache: SceneCache, rng: Optional[np.random.Generator] = None, mask_prob: float = 0.0,
            obj_mask_prob: float = 0.0) -> tuple[Batch, Targets]:
    """Stack samples into a batch plus every pre-training target.

    Words and objects are masked only in samples flagged ``masked_view``,
    which are always matched and carry no CMM label. A masked category word
    or object can make a true caption unverifiable, so the match decision is
    trained on unmasked inputs only. Object masking zeroes the input features
    of the chosen objects and makes them the targets of the
    object/attribute/feature heads.
    """
    mode = PIMode.parse(mode)
    B, N, F = len(samples), config.n_objects, config.feature_dim
    ids, tmask = encode_texts(vocab, [s.tokens for s in samples], config.max_text_len)
    match = np.array([s.match for s in samples], dtype=bool)
    view = np.array([s.masked_view for s in samples], dtype=bool)
    if rng is not None and mask_prob > 0 and view.any():
        ids, mlm = make_mm_batch(ids, tmask, mask_prob, rng, vocab, eligible=view & match)
    else:
        mlm = np.full(ids.shape, -1, dtype=np.int64)
    feats = np.zeros((B, N, F), dtype=cache.dtype)
    pi = np.zeros((B, N, mode.dim), dtype=cache.dtype)
    cats = np.empty((B, N), dtype=np.int64)
    attrs = np.empty((B, N), dtype=np.int64)
    pip = np.empty((B, 9, N, N), dtype=bool)
    for k, s in enumerate(samples):
        if s.scene.n_objects != N:
            raise ConfigError(f"scene {s.scene.scene_id} has {s.scene.n_objects} objects, "
                              f"model expects {N}")
        feats[k] = cache.features(s.scene)
        pi[k] = cache.pi(s.scene, mode)
        cats[k] = [o.category_id for o in s.scene.objects]
        attrs[k] = [o.attribute_id for o in s.scene.objects]
        pip[k] = s.scene.labels.labels
    feat_targets = feats.copy()
    if rng is not None and obj_mask_prob > 0:
        omask = (rng.random((B, N)) < obj_mask_prob) & view[:, None]
    else:
        omask = np.zeros((B, N), dtype=bool)
    feats[omask] = 0.0
    qa = np.array([-1 if s.qa_answer is None else s.qa_answer for s in samples], dtype=np.int64)
    targets = Targets(
        mlm=mlm, match=match.astype(np.float64),
        cmm_mask=np.array([s.provenance != "qa" for s in samples]) & ~view,
        obj=np.where(omask, cats, -1), attr=np.where(omask, attrs, -1),
        feat=feat_targets, feat_mask=omask, qa=qa, pip=pip,
        provenance=[s.provenance for s in samples])
    return Batch(ids, tmask, feats, pi), targets


def text_batch(scenes: Sequence[Scene], texts: Sequence[Sequence[str]], mode, vocab: Vocab,
               config: ModelConfig, cache: SceneCache) -> Batch:
    """Plain eval batch pairing ``scenes[k]`` with ``texts[k]``."""
    samples = [PretrainSample(s, tuple(t)) for s, t in zip(scenes, texts)]
    batch, _ = collate(samples, mode, vocab, config, cache)
    return batch
