"""Desk-scale experiment presets and the end-to-end runners behind the tables."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, fields, replace
from typing import Optional, Sequence

from .contrastive_eval import SETUPS, RecallResult, build_challenge_set, eval_recall
from .data import model_config_for
from .downstream import (DownstreamReport, FinetuneConfig, evaluate_downstream, finetune,
                         generate_qa)
from .encoding import ALL_MODES, PIMode
from .errors import ConfigError
from .model import Checkpoint, ModelConfig
from .pretrain import PIP_WEIGHT, LossWeights, PretrainConfig, train
from .probe import VARIANTS, MPEReport, ProbeConfig, evaluate_mpe, split_by_hash, train_probe
from .scene_gen import Corpus, SceneConfig, generate_corpus

log = logging.getLogger("pilab.experiments")


@dataclass
class DeskConfig:
    """Everything that scales an experiment down to a laptop CPU."""
    n_scenes: int = 500
    n_objects: int = 16
    hidden: int = 64
    pos_category_correlation: float = 0.5
    pi_caption_fraction: float = 0.5
    pretrain_steps: int = 300
    pretrain_lr: float = 3e-4
    batch_size: int = 32
    pip_weight: float = PIP_WEIGHT
    eval_fraction: float = 0.2
    probe_pairs_per_batch: int = 64
    probe_lr: float = 3e-3
    finetune_steps: int = 500
    finetune_lr: float = 1e-3
    qa_per_scene: int = 4

    @classmethod
    def from_dict(cls, d: dict) -> "DeskConfig":
        known = {f.name for f in fields(cls)}
        if set(d) - known:
            raise ConfigError(f"unknown desk config keys {sorted(set(d) - known)}")
        return cls(**d).validate()

    def validate(self) -> "DeskConfig":
        if self.n_scenes < 2 or self.n_objects < 1 or self.pretrain_steps < 1:
            raise ConfigError("desk needs >= 2 scenes, >= 1 object and >= 1 pre-training step")
        if not 0.0 < self.eval_fraction < 1.0:
            raise ConfigError("eval_fraction must lie in (0, 1)")
        return self

    # Presets. The probe preset is the default; matching needs many more
    # scenes and steps before it generalizes, so it runs on smaller scenes.
    @classmethod
    def probe_preset(cls) -> "DeskConfig":
        return cls()

    @classmethod
    def contrastive_preset(cls) -> "DeskConfig":
        return cls(n_scenes=2000, n_objects=4, pretrain_steps=10000)

    @classmethod
    def downstream_preset(cls) -> "DeskConfig":
        return cls(n_scenes=500, n_objects=8, pretrain_steps=300, finetune_steps=500)

    @classmethod
    def smoke_preset(cls) -> "DeskConfig":
        return cls(n_scenes=200, n_objects=4, pretrain_steps=2000)

    def scene_config(self) -> SceneConfig:
        return SceneConfig(n_objects=self.n_objects,
                           pos_category_correlation=self.pos_category_correlation,
                           pi_caption_fraction=self.pi_caption_fraction)

    def model_config(self, corpus: Corpus, mode) -> ModelConfig:
        return model_config_for(corpus, mode, hidden=self.hidden)

    def weights(self, variant: str) -> LossWeights:
        _check_variant(variant)
        return LossWeights(qa=0.0, pip=self.pip_weight if variant == "pip_cl" else 0.0)

    def pretrain_config(self, variant: str, seed: int) -> PretrainConfig:
        _check_variant(variant)
        return PretrainConfig(steps=self.pretrain_steps, lr=self.pretrain_lr,
                              batch_size=self.batch_size, cl=variant == "pip_cl",
                              qa_text_prob=0.0, seed=seed)

    def probe_config(self) -> ProbeConfig:
        return ProbeConfig(pairs_per_batch=self.probe_pairs_per_batch, lr=self.probe_lr,
                           eval_fraction=self.eval_fraction)

    def finetune_config(self, seed: int = 0) -> FinetuneConfig:
        return FinetuneConfig(steps=self.finetune_steps, lr=self.finetune_lr,
                              batch_size=self.batch_size, seed=seed)


def _check_variant(variant: str):
    if variant not in VARIANTS:
        raise ConfigError(f"unknown pretrain variant {variant!r}; expected one of {VARIANTS}")


def make_corpus(scene_cfg: SceneConfig, n: int, seed: int) -> Corpus:
    return generate_corpus(scene_cfg, n, seed)


def make_qa(corpus: Corpus, seed: int, per_scene: int = 4) -> list:
    return generate_qa(corpus, seed, per_scene=per_scene)


def split_qa(items: Sequence, corpus: Corpus, eval_fraction: float = 0.2):
    """QA (train, eval) following the scene-id hash split of ``corpus``."""
    _, held = split_by_hash(corpus.scenes, eval_fraction)
    held_ids = {s.scene_id for s in held}
    train_items = [it for it in items if it.scene_id not in held_ids]
    eval_items = [it for it in items if it.scene_id in held_ids]
    return train_items, eval_items


def pretrain(corpus: Corpus, mode, variant: str, seed: int, desk: Optional[DeskConfig] = None,
             overrides: Optional[dict] = None):
    """Pre-train one (mode, variant) model; returns (checkpoint, loss curve).

    ``overrides`` may hold ``model``, ``pretrain`` and ``weights`` sections
    that replace individual fields of the desk defaults.
    """
    desk = desk or DeskConfig()
    overrides = overrides or {}
    mcfg = replace(desk.model_config(corpus, mode), **overrides.get("model", {}))
    pcfg = PretrainConfig.from_dict({**asdict(desk.pretrain_config(variant, seed)),
                                     **overrides.get("pretrain", {})})
    weights = LossWeights.from_dict({**asdict(desk.weights(variant)),
                                     **overrides.get("weights", {})})
    t0 = time.perf_counter()
    ckpt, curve = train(mcfg.validate(), corpus, weights, pcfg)
    log.info("pre-trained %s/%s in %.1fs", PIMode.parse(mode).value, variant,
             time.perf_counter() - t0)
    ckpt.meta["variant"] = variant
    return ckpt, curve


def _splits(corpus: Corpus, desk: DeskConfig):
    train_s, held = split_by_hash(corpus.scenes, desk.eval_fraction)
    return corpus.subset(train_s), corpus.subset(held)


def run_probe(desk: Optional[DeskConfig] = None, seed: int = 0,
              modes: Sequence = ALL_MODES, variants: Sequence[str] = VARIANTS,
              corpus: Optional[Corpus] = None) -> list[MPEReport]:
    """Mutual-position accuracy for every (variant, mode) on one corpus.

    Pre-training and probe training both use the train split; accuracies are
    measured on the held-out split.
    """
    desk = desk or DeskConfig.probe_preset()
    corpus = corpus or make_corpus(desk.scene_config(), desk.n_scenes, seed)
    train_c, held = _splits(corpus, desk)
    reports = []
    for variant in variants:
        for mode in modes:
            ckpt, _ = pretrain(train_c, mode, variant, seed, desk)
            probed = train_probe(ckpt, train_c, seed, desk.probe_config())
            reports.append(evaluate_mpe(probed, held, variant))
    return reports


def run_contrastive(desk: Optional[DeskConfig] = None, seed: int = 0, mode="bbox_d",
                    variants: Sequence[str] = VARIANTS,
                    corpus: Optional[Corpus] = None) -> list[RecallResult]:
    """Recall on both challenge sets, built from held-out scenes."""
    desk = desk or DeskConfig.contrastive_preset()
    corpus = corpus or make_corpus(desk.scene_config(), desk.n_scenes, seed)
    train_c, held = _splits(corpus, desk)
    sets = {s: build_challenge_set(held, s, seed) for s in SETUPS}
    results = []
    for variant in variants:
        ckpt, _ = pretrain(train_c, mode, variant, seed, desk)
        for setup in SETUPS:
            results.append(eval_recall(ckpt, sets[setup], held, variant=variant))
    return results


def finetuned_report(ckpt: Checkpoint, corpus: Corpus, items: Sequence, desk: DeskConfig,
                     seed: int, variant: str = "plain") -> DownstreamReport:
    train_items, eval_items = split_qa(items, corpus, desk.eval_fraction)
    tuned, _ = finetune(ckpt, train_items, corpus, desk.finetune_config(seed))
    return evaluate_downstream(tuned, eval_items, corpus, variant)


def run_downstream(desk: Optional[DeskConfig] = None, seeds: Sequence[int] = (0, 1, 2),
                   modes: Sequence = ALL_MODES, variant: str = "plain") -> list[DownstreamReport]:
    """Fine-tuned QA accuracy for every (seed, mode); one corpus per seed."""
    desk = desk or DeskConfig.downstream_preset()
    reports = []
    for seed in seeds:
        corpus = make_corpus(desk.scene_config(), desk.n_scenes, seed)
        items = make_qa(corpus, seed, desk.qa_per_scene)
        train_c, _ = _splits(corpus, desk)
        for mode in modes:
            ckpt, _ = pretrain(train_c, mode, variant, seed, desk)
            reports.append(finetuned_report(ckpt, corpus, items, desk, seed, variant))
    return reports
