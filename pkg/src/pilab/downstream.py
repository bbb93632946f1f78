"""Synthetic positional QA: generation, keyword subsets, fine-tuning and scoring."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import keywords as kw
from .data import PretrainSample, SceneCache, collate, vocab_for
from .errors import ConfigError, DataError, DivergenceError, FormatError
from .model import Checkpoint, PIModel, QA_HEAD_PREFIX
from .optim import AdaptiveSGD
from .pretrain import cross_entropy
from .scene_gen import Corpus, Scene, category_name

BASE_ANSWERS = ("yes", "no", "left", "right", "above", "below", "front", "behind")
POSITIONAL_SUBSET = "P-keyword"


def answer_vocab(attributes: Sequence[str]) -> list[str]:
    return list(BASE_ANSWERS) + list(attributes)


@dataclass
class QAItem:
    tokens: tuple[str, ...]
    answer_id: int
    axes: frozenset
    scene_id: str
    template: str = ""

    @property
    def text(self) -> str:
        return " ".join(self.tokens)

    def to_dict(self) -> dict:
        return {"tokens": list(self.tokens), "answer": self.answer_id,
                "axes": sorted(self.axes), "scene": self.scene_id, "template": self.template}

    @classmethod
    def from_dict(cls, d: dict) -> "QAItem":
        return cls(tuple(d["tokens"]), d["answer"], frozenset(d["axes"]), d["scene"],
                   d["template"])


# template -> (question, kind, (task, swap) predicate)
QA_TEMPLATES = {
    "yn_left": ("is the {A} left of the {B} ?", "yn", (0, False)),
    "yn_right": ("is the {A} right of the {B} ?", "yn", (0, True)),
    "yn_above": ("is the {A} above the {B} ?", "yn", (1, True)),
    "yn_below": ("is the {A} below the {B} ?", "yn", (1, False)),
    "yn_front": ("is the {A} in front of the {B} ?", "yn", (6, False)),
    "yn_behind": ("is the {A} behind the {B} ?", "yn", (6, True)),
    "left_right": ("is the {A} left or right of the {B} ?", ("left", "right"), (0, False)),
    "above_below": ("is the {A} above or below the {B} ?", ("above", "below"), (1, True)),
    "front_behind": ("is the {A} in front of or behind the {B} ?", ("front", "behind"),
                     (6, False)),
    "color": ("what color is the {A} ?", "color", None),
    "exists": ("is there a {A} in the picture ?", "exists", None),
}
_GAP_AXIS = {0: 0, 1: 1, 6: 2}


def _gap(scene: Scene, task: int, a: int, b: int) -> float:
    axis = _GAP_AXIS[task]
    if axis < 2:
        return abs(scene.centers[a, axis] - scene.centers[b, axis])
    return abs(scene.object_depths[a] - scene.object_depths[b])


def _holds(scene: Scene, pred, a: int, b: int) -> bool:
    task, swap = pred
    j, i = (b, a) if swap else (a, b)
    return bool(scene.labels.labels[task, j, i])


def _question(template: str, a: Optional[str], b: Optional[str] = None) -> tuple[str, ...]:
    return tuple(QA_TEMPLATES[template][0].replace("{A}", a or "").replace("{B}", b or "").split())


def qa_for_template(scene: Scene, template: str, rng: np.random.Generator, answers: list[str],
                    n_categories: int, margin: float = 0.05) -> Optional[QAItem]:
    """One question from ``template`` with a uniformly drawn target answer, or None."""
    question, kind, pred = QA_TEMPLATES[template]
    uniq = scene.unique_category_objects()
    name = lambda k: category_name(scene.objects[k].category_id)  # noqa: E731
    index = {a: k for k, a in enumerate(answers)}
    if kind == "color":
        if not uniq:
            return None
        a = int(uniq[int(rng.integers(len(uniq)))])
        attr = answers[len(BASE_ANSWERS) + scene.objects[a].attribute_id]
        tokens = _question(template, name(a))
        return QAItem(tokens, index[attr], frozenset(kw.axes_of(" ".join(tokens))),
                      scene.scene_id, template)
    if kind == "exists":
        present = sorted({o.category_id for o in scene.objects})
        want_yes = rng.random() < 0.5
        pool = present if want_yes else sorted(set(range(n_categories)) - set(present))
        if not pool:
            return None
        c = int(pool[int(rng.integers(len(pool)))])
        tokens = _question(template, category_name(c))
        return QAItem(tokens, index["yes" if want_yes else "no"],
                      frozenset(kw.axes_of(" ".join(tokens))), scene.scene_id, template)
    if len(uniq) < 2:
        return None
    options = ("yes", "no") if kind == "yn" else kind
    target = options[int(rng.integers(2))]
    want_true = target == options[0]
    pairs = [(a, b) for a in uniq for b in uniq if a != b
             and _gap(scene, pred[0], a, b) >= margin and _holds(scene, pred, a, b) == want_true]
    if not pairs:
        return None
    a, b = pairs[int(rng.integers(len(pairs)))]
    tokens = _question(template, name(a), name(b))
    return QAItem(tokens, index[target], frozenset(kw.axes_of(" ".join(tokens))),
                  scene.scene_id, template)


def generate_qa(corpus: Corpus, seed: int, per_scene: int = 4,
                templates: Sequence[str] = tuple(QA_TEMPLATES), margin: float = 0.05
                ) -> list[QAItem]:
    """Templated questions answered by the geometry oracle.

    Each item draws its template and then its target answer uniformly, which
    balances yes/no (and left/right etc.) within every template.
    """
    answers = answer_vocab(corpus.world.attributes)
    items = []
    for k, scene in enumerate(corpus.scenes):
        if scene.n_objects < 2:
            continue
        rng = np.random.default_rng(np.random.SeedSequence([seed, k, 0x9A]))
        for _ in range(per_scene):
            t = templates[int(rng.integers(len(templates)))]
            item = qa_for_template(scene, t, rng, answers, corpus.config.n_categories, margin)
            if item is not None:
                items.append(item)
    return items


def keyword_subset(items: Sequence, axis: str) -> list:
    """Items whose question contains a keyword of ``axis`` (or of any axis for P)."""
    axes = kw.AXES if axis == POSITIONAL_SUBSET else (axis,)
    if any(a not in kw.KEYWORDS for a in axes):
        raise ConfigError(f"unknown axis {axis!r}")
    return [it for it in items if any(a in kw.axes_of(it.text) for a in axes)]


def save_qa(items: Sequence[QAItem], path) -> Path:
    path = Path(path)
    path.write_text("".join(json.dumps(it.to_dict(), sort_keys=True, separators=(",", ":"))
                            + "\n" for it in items))
    return path


def load_qa(path) -> list[QAItem]:
    try:
        return [QAItem.from_dict(json.loads(line)) for line in Path(path).read_text().splitlines()]
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read QA file {path}: {exc}") from None


# ---------------------------------------------------------------- training

@dataclass
class FinetuneConfig:
    steps: int = 500
    batch_size: int = 32
    lr: float = 1e-3
    clip_norm: float = 5.0
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "FinetuneConfig":
        known = {f.name for f in fields(cls)}
        if set(d) - known:
            raise ConfigError(f"unknown finetune config keys {sorted(set(d) - known)}")
        return cls(**d)


def _samples(items: Sequence[QAItem], by_id: dict) -> list[PretrainSample]:
    try:
        return [PretrainSample(by_id[it.scene_id], it.tokens, True, "qa", it.scene_id,
                               it.answer_id) for it in items]
    except KeyError as exc:
        raise DataError(f"QA item refers to unknown scene {exc}") from None


def finetune_trainable(model: PIModel) -> list[str]:
    """QA head plus both encoders and the cross encoder; other heads stay fixed."""
    return sorted(k for k in model.params
                  if k.startswith(QA_HEAD_PREFIX) or k.split(".")[0] in ("lang", "vis", "cross",
                                                                         "pooler"))


def finetune(checkpoint: Checkpoint, items: Sequence[QAItem], corpus: Corpus,
             config: FinetuneConfig):
    """Train the answer head and encoders on QA items; returns (checkpoint, curve)."""
    if config.steps < 0:
        raise ConfigError("steps must be >= 0")
    model = checkpoint.model()
    if config.steps == 0:
        return Checkpoint.from_model(model, checkpoint.step, checkpoint.rng_state,
                                     checkpoint.meta), []
    if not items:
        raise DataError("finetuning needs QA items")
    by_id = {s.scene_id: s for s in corpus.scenes}
    samples = _samples(items, by_id)
    vocab = vocab_for(corpus)
    cache = SceneCache(model.dtype)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xF17E]))
    opt = AdaptiveSGD(model.params, config.lr, finetune_trainable(model),
                      clip_norm=config.clip_norm)
    curve = []
    for step in range(config.steps):
        picks = rng.integers(len(samples), size=config.batch_size)
        batch, targets = collate([samples[int(k)] for k in picks], model.mode, vocab,
                                 model.config, cache)
        out = model.forward(batch, heads=("qa",))
        loss, d = cross_entropy(out.qa_logits, targets.qa)
        if not np.isfinite(loss):
            raise DivergenceError(step)
        opt.step(model.backward({"qa_logits": d}))
        acc = float((out.qa_logits.argmax(-1) == targets.qa).mean())
        curve.append({"step": step, "loss": loss, "acc": acc})
    meta = dict(checkpoint.meta, finetune=asdict(config))
    return Checkpoint.from_model(model, checkpoint.step + config.steps, rng.bit_generator.state,
                                 meta), curve


@dataclass
class DownstreamReport:
    top1: float
    top5: float
    subset_acc: dict = field(default_factory=dict)   # axis -> accuracy or None when empty
    subset_sizes: dict = field(default_factory=dict)
    n_items: int = 0
    pi_mode: str = ""
    pretrain_variant: str = "plain"

    def to_dict(self) -> dict:
        return {"kind": "downstream", "version": 1, **asdict(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "DownstreamReport":
        d = {k: v for k, v in d.items() if k not in ("kind", "version")}
        return cls(**d)


def qa_logits(checkpoint, items: Sequence[QAItem], corpus: Corpus, batch_size: int = 128):
    model = checkpoint if isinstance(checkpoint, PIModel) else checkpoint.model()
    by_id = {s.scene_id: s for s in corpus.scenes}
    samples = _samples(items, by_id)
    vocab, cache = vocab_for(corpus), SceneCache(model.dtype)
    chunks = []
    for start in range(0, len(samples), batch_size):
        batch, _ = collate(samples[start:start + batch_size], model.mode, vocab, model.config,
                           cache)
        chunks.append(model.forward(batch, heads=("qa",)).qa_logits)
        model.heads["qa"].reset()
    return np.concatenate(chunks) if chunks else np.zeros((0, model.config.n_answers))


def topk_hits(logits: np.ndarray, gold: np.ndarray, k: int) -> np.ndarray:
    if logits.shape[1] < k:
        raise ConfigError(f"top-{k} accuracy needs at least {k} answers")
    # stable ranking: ties keep lower answer ids first
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return (order == gold[:, None]).any(axis=1)


def score_predictions(logits: np.ndarray, items: Sequence[QAItem], pi_mode: str = "",
                      variant: str = "plain") -> DownstreamReport:
    if len(items) == 0:
        raise DataError("no QA items to evaluate")
    gold = np.array([it.answer_id for it in items])
    top1 = topk_hits(logits, gold, 1)
    top5 = topk_hits(logits, gold, 5)
    subset_acc, sizes = {}, {}
    for axis in (*kw.AXES, POSITIONAL_SUBSET):
        member = np.array([bool(keyword_subset([it], axis)) for it in items], dtype=bool)
        sizes[axis] = int(member.sum())
        subset_acc[axis] = float(top1[member].mean()) if member.any() else None
    return DownstreamReport(float(top1.mean()), float(top5.mean()), subset_acc, sizes,
                            len(items), pi_mode, variant)


def evaluate_downstream(checkpoint, items: Sequence[QAItem], corpus: Corpus,
                        variant: str = "plain") -> DownstreamReport:
    model = checkpoint if isinstance(checkpoint, PIModel) else checkpoint.model()
    return score_predictions(qa_logits(model, items, corpus), items, model.mode.value, variant)
