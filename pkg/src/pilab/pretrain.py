"""Pre-training objectives, the positional pre-training (PIP) and antonym CL sampling."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import numpy as np

from . import keywords as kw
from .data import PretrainSample, SceneCache, Targets, collate, vocab_for
from .errors import ConfigError, DivergenceError, SamplingError
from .geometry import MutualLabelTensor, label_tensor
from .model import Checkpoint, HeadOutputs, ModelConfig, PIModel, PI_HEAD_PREFIX
from .optim import AdaptiveSGD
from .scene_gen import Caption, Corpus, Scene

log = logging.getLogger(__name__)

COMPONENTS = ("mlm", "cmm", "obj", "attr", "feat", "qa", "pip")
PIP_WEIGHT = 10.0


@dataclass
class LossWeights:
    mlm: float = 1.0
    cmm: float = 1.0
    obj: float = 1.0
    attr: float = 1.0
    feat: float = 1.0
    qa: float = 1.0
    pip: float = 0.0

    def __post_init__(self):
        vals = [getattr(self, c) for c in COMPONENTS]
        if any(v < 0 for v in vals):
            raise ConfigError("loss weights must be non-negative")
        if not any(v > 0 for v in vals):
            raise ConfigError("at least one loss weight must be positive")

    @classmethod
    def paper(cls, pip: float = 0.0) -> "LossWeights":
        return cls(pip=pip)

    @classmethod
    def repository(cls, pip: float = 0.0) -> "LossWeights":
        return cls(obj=20.0 / 3.0, attr=20.0 / 3.0, feat=20.0 / 3.0, pip=pip)

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        unknown = set(d) - set(COMPONENTS)
        if unknown:
            raise ConfigError(f"unknown loss weight keys {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- sampling

def make_cmm_sample(scene: Scene, caption: Caption, corpus: Sequence[Scene],
                    rng: np.random.Generator, swap_prob: float = 0.5) -> PretrainSample:
    """Keep the caption, or with probability 0.5 swap in one from another scene."""
    if len(corpus) < 2:
        raise SamplingError("caption swapping needs at least two scenes")
    if rng.random() < swap_prob:
        while True:
            other = corpus[int(rng.integers(len(corpus)))]
            if other.scene_id != scene.scene_id and other.captions:
                break
        cap = other.captions[int(rng.integers(len(other.captions)))]
        return PretrainSample(scene, cap.tokens, False, "cmm_swap", other.scene_id)
    return PretrainSample(scene, caption.tokens, True, "clean", scene.scene_id)


def make_cl_sample(scene: Scene, caption: Caption, rng: np.random.Generator,
                   swap_prob: float = 0.5) -> Optional[PretrainSample]:
    """Antonym negative for captions with antonym-list keywords.

    Returns None when the caption has no such keyword. Otherwise, with
    probability 0.5, every listed keyword is replaced by its counterpart and
    the sample becomes a no-match; else the caption stays clean.
    """
    if not kw.is_contrastible(caption.tokens):
        return None
    if rng.random() < swap_prob:
        tokens, _ = kw.substitute_antonyms(caption.tokens)
        return PretrainSample(scene, tuple(tokens), False, "cl_antonym", scene.scene_id)
    return PretrainSample(scene, caption.tokens, True, "clean", scene.scene_id)


def pip_targets(scene: Scene, depth_map=None) -> MutualLabelTensor:
    """Positional pre-training targets: the oracle label tensor of the scene."""
    if depth_map is None:
        return scene.labels
    return label_tensor(scene, depth_map)


# ---------------------------------------------------------------- losses

def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Mean CE over entries with ``targets >= 0``; returns (loss, dlogits)."""
    sel = targets >= 0
    n = int(sel.sum())
    d = np.zeros(logits.shape, dtype=np.float64)
    if n == 0:
        return 0.0, d
    z = logits[sel].astype(np.float64)
    lp = _log_softmax(z)
    t = targets[sel]
    loss = -lp[np.arange(n), t].sum() / n
    g = np.exp(lp)
    g[np.arange(n), t] -= 1.0
    d[sel] = g / n
    return float(loss), d


def binary_cross_entropy(logits: np.ndarray, labels: np.ndarray, weight: np.ndarray):
    """Weighted mean BCE with logits; ``weight`` selects/weighs entries."""
    z = logits.astype(np.float64)
    y = labels.astype(np.float64)
    w = np.broadcast_to(weight, z.shape).astype(np.float64)
    total = w.sum()
    if total == 0:
        return 0.0, np.zeros_like(z)
    loss = (np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))) * w
    p = 1.0 / (1.0 + np.exp(-z))
    return float(loss.sum() / total), (p - y) * w / total


def mse(pred: np.ndarray, target: np.ndarray, mask: np.ndarray):
    n = int(mask.sum())
    d = np.zeros(pred.shape, dtype=np.float64)
    if n == 0:
        return 0.0, d
    diff = pred[mask].astype(np.float64) - target[mask]
    f = diff.shape[-1]
    d[mask] = 2.0 * diff / (n * f)
    return float((diff ** 2).sum() / (n * f)), d


def combine_losses(components: dict, weights: LossWeights) -> float:
    return float(sum(getattr(weights, k) * components.get(k, 0.0) for k in COMPONENTS))


def component_losses(out: HeadOutputs, targets: Targets, needed: Sequence[str]):
    """Per-component (loss, dloss/doutput) for the requested components."""
    res = {}
    for k in needed:
        if k == "mlm":
            res[k] = ("mlm_logits", *cross_entropy(out.mlm_logits, targets.mlm))
        elif k == "cmm":
            res[k] = ("cmm_logit", *binary_cross_entropy(out.cmm_logit, targets.match,
                                                         targets.cmm_mask))
        elif k == "obj":
            res[k] = ("obj_logits", *cross_entropy(out.obj_logits, targets.obj))
        elif k == "attr":
            res[k] = ("attr_logits", *cross_entropy(out.attr_logits, targets.attr))
        elif k == "feat":
            res[k] = ("feat_pred", *mse(out.feat_pred, targets.feat, targets.feat_mask))
        elif k == "qa":
            res[k] = ("qa_logits", *cross_entropy(out.qa_logits, targets.qa))
        elif k == "pip":
            # logits (B, N, N, 9) vs labels (B, 9, N, N); mean over 9*N*N per sample
            labels = np.moveaxis(targets.pip, 1, -1)
            res[k] = ("pi_logits", *binary_cross_entropy(out.pi_logits, labels, 1.0))
    return res


def total_loss(out: HeadOutputs, targets: Targets, weights: LossWeights):
    """Weighted sum of component losses.

    Returns ``(total, breakdown, dout)`` where ``dout`` holds the gradient of
    the total w.r.t. each head output, ready for :meth:`PIModel.backward`.
    """
    needed = [k for k in COMPONENTS if getattr(weights, k) > 0]
    fields_needed = {"mlm": out.mlm_logits, "cmm": out.cmm_logit, "obj": out.obj_logits,
                     "attr": out.attr_logits, "feat": out.feat_pred, "qa": out.qa_logits,
                     "pip": out.pi_logits}
    for k in needed:
        if fields_needed[k] is None:
            raise ConfigError(f"loss component {k!r} has positive weight but no head output")
    if "qa" in needed and targets.qa is None:
        raise ConfigError("QA loss weighted but batch carries no QA targets")
    comps = component_losses(out, targets, needed)
    breakdown = {k: v[1] for k, v in comps.items()}
    dout = {}
    for k, (name, _, g) in comps.items():
        w = getattr(weights, k)
        dout[name] = dout.get(name, 0.0) + w * g
    return combine_losses(breakdown, weights), breakdown, dout


# ---------------------------------------------------------------- training

HEAD_FOR = {"mlm": "mlm", "cmm": "cmm", "obj": "obj", "attr": "attr", "feat": "feat",
            "qa": "qa", "pip": "pi"}


@dataclass
class PretrainConfig:
    steps: int = 1500
    batch_size: int = 32
    lr: float = 1e-3
    mask_prob: float = 0.15
    obj_mask_prob: float = 0.15
    cmm_swap_prob: float = 0.5
    cl: bool = False
    cl_swap_prob: float = 0.5
    qa_text_prob: float = 0.25
    masked_view_prob: float = 0.5
    clip_norm: float = 5.0
    seed: int = 0
    log_every: int = 0

    def validate(self) -> "PretrainConfig":
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("batch_size >= 1 and lr > 0 required")
        for name in ("mask_prob", "obj_mask_prob", "cmm_swap_prob", "cl_swap_prob",
                     "qa_text_prob", "masked_view_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        known = {f.name for f in fields(cls)}
        if set(d) - known:
            raise ConfigError(f"unknown pretrain config keys {sorted(set(d) - known)}")
        return cls(**d)


def draw_sample(scene: Scene, scenes: Sequence[Scene], rng: np.random.Generator,
                cfg: PretrainConfig, qa_by_scene: Optional[dict] = None) -> PretrainSample:
    qa_items = qa_by_scene.get(scene.scene_id) if qa_by_scene else None
    if qa_items and rng.random() < cfg.qa_text_prob:
        item = qa_items[int(rng.integers(len(qa_items)))]
        return PretrainSample(scene, item.tokens, True, "qa", scene.scene_id, item.answer_id)
    cap = scene.captions[int(rng.integers(len(scene.captions)))]
    if rng.random() < cfg.masked_view_prob:
        return PretrainSample(scene, cap.tokens, True, "clean", scene.scene_id, masked_view=True)
    sample = make_cmm_sample(scene, cap, scenes, rng, cfg.cmm_swap_prob)
    if cfg.cl and sample.match:
        cl = make_cl_sample(scene, cap, rng, cfg.cl_swap_prob)
        if cl is not None:
            sample = cl
    return sample


def trainable_names(model: PIModel, weights: LossWeights) -> list[str]:
    """All parameters except the PI head, which trains only when PIP is weighted."""
    return sorted(k for k in model.params
                  if weights.pip > 0 or not k.startswith(PI_HEAD_PREFIX))


def train(model_config: ModelConfig, corpus: Corpus, weights: LossWeights,
          config: PretrainConfig, qa_items: Optional[Sequence] = None,
          init: Optional[Checkpoint] = None):
    """Pre-train from scratch (or ``init``); returns (checkpoint, loss curve).

    The loss curve holds one dict per step with the total and each weighted
    component. Deterministic for fixed configs and seed.
    """
    config.validate()
    scenes = [s for s in corpus.scenes if s.captions]
    if len(scenes) < 2:
        raise SamplingError("pre-training needs at least two captioned scenes")
    if weights.qa > 0 and not qa_items:
        raise ConfigError("QA loss weighted but no QA items were given")
    qa_by_scene = {}
    for item in qa_items or ():
        qa_by_scene.setdefault(item.scene_id, []).append(item)
    model = init.model() if init is not None else PIModel(model_config)
    vocab = vocab_for(corpus)
    cache = SceneCache(model.dtype)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x7A1]))
    opt = AdaptiveSGD(model.params, config.lr, trainable=trainable_names(model, weights),
                      clip_norm=config.clip_norm)
    heads = [HEAD_FOR[k] for k in COMPONENTS if getattr(weights, k) > 0]
    curve = []
    for step in range(config.steps):
        picks = rng.integers(len(scenes), size=config.batch_size)
        samples = [draw_sample(scenes[int(k)], scenes, rng, config, qa_by_scene) for k in picks]
        batch, targets = collate(samples, model.mode, vocab, model.config, cache, rng,
                                 config.mask_prob, config.obj_mask_prob)
        out = model.forward(batch, train=True, rng=rng, heads=heads)
        loss, parts, dout = total_loss(out, targets, weights)
        if not np.isfinite(loss):
            raise DivergenceError(step)
        grads = model.backward(dout)
        opt.step(grads)
        acc = _cmm_accuracy(out.cmm_logit, targets) if out.cmm_logit is not None else None
        curve.append({"step": step, "loss": loss, **parts, "cmm_acc": acc})
        if config.log_every and step % config.log_every == 0:
            log.info("step %d loss %.4f %s", step, loss,
                     " ".join(f"{k}={v:.3f}" for k, v in parts.items()))
    base = init.step if init is not None else 0
    ckpt = Checkpoint.from_model(model, step=base + config.steps,
                                 rng_state=rng.bit_generator.state,
                                 meta={"weights": asdict(weights), "pretrain": asdict(config)})
    return ckpt, curve


def _cmm_accuracy(logit, targets: Targets) -> Optional[float]:
    sel = targets.cmm_mask
    if not sel.any():
        return None
    pred = logit[sel] > 0
    return float((pred == (targets.match[sel] > 0.5)).mean())
