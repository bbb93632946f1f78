"""Mutual position evaluation: a PI head trained on frozen pair states."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from .data import SceneCache, text_batch
from .encoding import PIMode
from .errors import ConfigError, DataError, ProtocolError
from .geometry import N_TASKS, XY_TASKS, Z_TASKS
from .model import PI_HEAD_PREFIX, Checkpoint, PIModel, pair_states
from .optim import AdaptiveSGD
from .pretrain import binary_cross_entropy
from .scene_gen import ATTRIBUTE_NAMES, Corpus, Scene, category_names
from .text import Vocab, default_vocab

VARIANTS = ("plain", "pip_cl")


def scene_hash_unit(scene_id: str) -> float:
    """Stable value in [0, 1) derived from the scene id."""
    digest = hashlib.sha256(scene_id.encode()).digest()
    return int.from_bytes(digest[:8], "big") / 2.0 ** 64


def split_by_hash(scenes: Sequence[Scene], eval_fraction: float = 0.2):
    """(train, eval) scenes split by id hash; independent of corpus order."""
    if not 0.0 < eval_fraction < 1.0:
        raise ConfigError("eval_fraction must lie in (0, 1)")
    train, held = [], []
    for s in scenes:
        (held if scene_hash_unit(s.scene_id) < eval_fraction else train).append(s)
    return train, held


@dataclass
class ProbeConfig:
    pairs_per_batch: int = 256
    lr: float = 3e-3
    clip_norm: float = 5.0
    eval_fraction: float = 0.2

    def validate(self) -> "ProbeConfig":
        if self.pairs_per_batch < 1 or self.lr <= 0:
            raise ConfigError("pairs_per_batch must be >= 1 and lr > 0")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "ProbeConfig":
        known = {f.name for f in fields(cls)}
        if set(d) - known:
            raise ConfigError(f"unknown probe config keys {sorted(set(d) - known)}")
        return cls(**d).validate()


@dataclass
class MPEReport:
    acc_per_task: list
    acc_xy: float
    acc_z: float
    acc_xyz: float
    n_pairs_evaluated: int
    pi_mode: str
    pretrain_variant: str = "plain"
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_task_accuracies(cls, acc, n_pairs: int = 0, pi_mode="none",
                             variant: str = "plain") -> "MPEReport":
        acc = [float(a) for a in acc]
        if len(acc) != N_TASKS:
            raise ConfigError(f"expected {N_TASKS} task accuracies, got {len(acc)}")
        if variant not in VARIANTS:
            raise ConfigError(f"unknown pretrain variant {variant!r}")
        acc_xy = float(np.mean([acc[t] for t in XY_TASKS]))
        acc_z = float(np.mean([acc[t] for t in Z_TASKS]))
        return cls(acc, acc_xy, acc_z, grouped_xyz(acc_xy, acc_z), int(n_pairs),
                   PIMode.parse(pi_mode).value, variant)

    def to_dict(self) -> dict:
        return {"kind": "mpe", "version": 1, **asdict(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "MPEReport":
        return cls(**{k: v for k, v in d.items() if k not in ("kind", "version")})


def grouped_xyz(acc_xy: float, acc_z: float) -> float:
    return (6 * acc_xy + 3 * acc_z) / 9


def probe_texts(scenes: Sequence[Scene]) -> list[tuple[str, ...]]:
    """The text paired with each image while reading out object states."""
    return [s.captions[0].tokens if s.captions else () for s in scenes]


def frozen_pair_states(model: PIModel, scenes: Sequence[Scene], chunk: int = 64):
    """Final visual states as (S, N, H) plus labels (S, 9, N, N)."""
    vocab = model_vocab(model.config)
    cache = SceneCache(model.dtype)
    states = []
    for start in range(0, len(scenes), chunk):
        part = scenes[start:start + chunk]
        batch = text_batch(part, probe_texts(part), model.mode, vocab, model.config,
                           cache)
        states.append(model.forward(batch, heads=()).vis)
        model._record = None
    labels = np.stack([s.labels.labels for s in scenes])
    return np.concatenate(states), labels


def model_vocab(config) -> Vocab:
    return default_vocab(category_names(config.n_categories),
                         ATTRIBUTE_NAMES[:config.n_attributes])


@dataclass
class StateScaler:
    """Per-dimension standardization of frozen object states.

    Fitted on the probe-training split. Final states share a large common
    component with little per-object spread, which a one-epoch head cannot
    amplify on its own; the affine map adds no information.
    """
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, vis: np.ndarray, eps: float = 1e-6) -> "StateScaler":
        flat = vis.reshape(-1, vis.shape[-1]).astype(np.float64)
        return cls(flat.mean(axis=0), flat.std(axis=0) + eps)

    def apply(self, vis: np.ndarray) -> np.ndarray:
        return ((vis - self.mean) / self.std).astype(vis.dtype)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "StateScaler":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def fit_pi_head(model: PIModel, vis_states: np.ndarray, labels: np.ndarray,
                config: ProbeConfig, rng: np.random.Generator) -> list[float]:
    """One shuffled pass of PI-head updates over per-scene pair states.

    ``vis_states`` is (S, N, H); every other parameter is left untouched.
    """
    config.validate()
    S, N = vis_states.shape[:2]
    if S == 0:
        raise DataError("probe training split is empty")
    per_batch = max(1, config.pairs_per_batch // (N * N))
    trainable = [k for k in model.params if k.startswith(PI_HEAD_PREFIX)]
    opt = AdaptiveSGD(model.params, config.lr, trainable, clip_norm=config.clip_norm)
    order = rng.permutation(S)
    losses = []
    for start in range(0, S, per_batch):
        idx = order[start:start + per_batch]
        pairs = pair_states(vis_states[idx])
        logits = model.pi_head_forward(pairs, train=True, rng=rng)
        loss, d = binary_cross_entropy(logits, np.moveaxis(labels[idx], 1, -1), 1.0)
        opt.step(model.pi_head_backward(d.astype(model.dtype)))
        losses.append(loss)
    return losses


def train_probe(checkpoint: Checkpoint, scenes, seed: int,
                config: Optional[ProbeConfig] = None) -> Checkpoint:
    """Probe-train the PI head for one epoch on ``scenes`` (the probe-training split).

    The head starts from whatever the checkpoint holds, so a head shaped by
    PIP pre-training keeps its weights. The ids of the training scenes are
    recorded so that evaluation can refuse overlapping splits.
    """
    config = config or ProbeConfig()
    scenes = list(scenes.scenes if isinstance(scenes, Corpus) else scenes)
    if not scenes:
        raise DataError("probe training split is empty")
    model = checkpoint.model()
    vis, labels = frozen_pair_states(model, scenes)
    scaler = StateScaler.fit(vis)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9B0BE]))
    losses = fit_pi_head(model, scaler.apply(vis), labels, config, rng)
    meta = dict(checkpoint.meta, probe={"config": asdict(config), "seed": seed,
                                        "scaler": scaler.to_dict(),
                                        "train_scenes": sorted(s.scene_id for s in scenes),
                                        "final_loss": losses[-1]})
    return Checkpoint.from_model(model, checkpoint.step, checkpoint.rng_state, meta)


def mpe_predictions(model: PIModel, scenes: Sequence[Scene],
                    scaler: Optional[StateScaler] = None):
    """Boolean predictions and labels, both (S, 9, N, N)."""
    vis, labels = frozen_pair_states(model, scenes)
    if scaler is not None:
        vis = scaler.apply(vis)
    logits = model.pi_head_forward(pair_states(vis))
    model.heads["pi"].reset()
    return np.moveaxis(logits > 0, -1, 1), labels


def evaluate_mpe(checkpoint: Checkpoint, scenes, variant: str = "plain") -> MPEReport:
    scenes = list(scenes.scenes if isinstance(scenes, Corpus) else scenes)
    if not scenes:
        raise DataError("evaluation split is empty")
    seen = set(checkpoint.meta.get("probe", {}).get("train_scenes", ()))
    overlap = seen.intersection(s.scene_id for s in scenes)
    if overlap:
        raise ProtocolError(f"{len(overlap)} evaluation scenes were used for probe training, "
                            f"e.g. {sorted(overlap)[0]}")
    model = checkpoint.model()
    probe = checkpoint.meta.get("probe")
    scaler = StateScaler.from_dict(probe["scaler"]) if probe else None
    pred, labels = mpe_predictions(model, scenes, scaler)
    acc = (pred == labels).mean(axis=(0, 2, 3))
    n_pairs = labels.shape[0] * labels.shape[2] * labels.shape[3]
    return MPEReport.from_task_accuracies(acc, n_pairs, model.mode.value, variant)
