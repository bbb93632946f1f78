"""Seeded synthetic scenes: objects, rendered raw depth, templated captions.

A scene stands in for detector plus depth-estimator output. Object category
can be tied to the bounding-box grid cell through ``pos_category_correlation``
so the category/position confound is a controllable knob.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import keywords as kw
from .depth import NormalizedDepthMap, RawDepthMap, normalize_depth_map, object_depth_stats, \
    read_maps, write_maps
from .errors import ConfigError, FormatError, GenerationSkipped
from .geometry import BBox, DepthStats, MutualLabelTensor, label_tensor

DEPTH_EPS = 0.01
BACKGROUND_Z = 1.0
CORPUS_FORMAT_VERSION = 1

CATEGORY_NAMES = (
    "cat", "dog", "car", "tree", "chair", "table", "lamp", "cup", "book", "bird",
    "horse", "boat", "bench", "clock", "vase", "bottle", "bowl", "kite", "sign", "bag",
    "bus", "bike", "sofa", "plant", "phone", "shoe", "hat", "ball", "train", "truck",
    "sheep", "cow", "pizza", "cake", "door", "window", "fence", "rock", "box", "bed",
)
ATTRIBUTE_NAMES = ("red", "blue", "green", "yellow", "white", "black", "brown", "pink",
                   "gray", "orange", "purple", "silver")


@dataclass
class SceneConfig:
    n_objects: int = 36
    n_categories: int = 30
    n_attributes: int = 8
    feature_dim: int = 32
    pos_category_correlation: float = 0.5
    feature_noise_std: float = 0.3
    caption_templates: str = "default"
    pi_caption_fraction: float = 0.5
    seed: int = 0
    # generation details not pinned by the caption/probe contracts
    grid_size: int = 3
    map_width: int = 32
    map_height: int = 32
    min_box: float = 0.1
    max_box: float = 0.4
    depth_y_correlation: float = 0.25
    captions_per_scene: int = 4
    relation_margin: float = 0.05

    def validate(self) -> "SceneConfig":
        if self.n_objects < 1:
            raise ConfigError("n_objects must be >= 1")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be >= 1")
        if self.feature_noise_std < 0:
            raise ConfigError("feature_noise_std must be >= 0")
        if not 1 <= self.n_categories:
            raise ConfigError("n_categories must be >= 1")
        if not 1 <= self.n_attributes <= len(ATTRIBUTE_NAMES):
            raise ConfigError(f"n_attributes must be in [1, {len(ATTRIBUTE_NAMES)}]")
        for name in ("pos_category_correlation", "pi_caption_fraction", "depth_y_correlation"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if not 0 < self.min_box <= self.max_box < 1:
            raise ConfigError("need 0 < min_box <= max_box < 1")
        # every box must cover a pixel center in both directions
        if self.min_box * min(self.map_width, self.map_height) < 1.0:
            raise ConfigError("min_box is smaller than one pixel at the map resolution")
        if self.grid_size < 1 or self.captions_per_scene < 0:
            raise ConfigError("grid_size >= 1 and captions_per_scene >= 0 required")
        if self.caption_templates != "default":
            raise ConfigError(f"unknown caption template set {self.caption_templates!r}")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown scene config keys: {sorted(unknown)}")
        return cls(**d)


def category_names(n: int) -> list[str]:
    base = list(CATEGORY_NAMES[:n])
    return base + [f"thing{k}" for k in range(len(base), n)]


class World:
    """Corpus-level constants derived from ``config.seed``: embeddings and the cell table."""

    def __init__(self, config: SceneConfig):
        self.config = config.validate()
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xC0FFEE]))
        self.category_emb = rng.standard_normal((config.n_categories, config.feature_dim))
        self.attribute_emb = rng.standard_normal((config.n_attributes, config.feature_dim))
        n_cells = config.grid_size ** 2
        perm = rng.permutation(config.n_categories)
        self.cell_category = np.array([perm[k % config.n_categories] for k in range(n_cells)])
        self.categories = category_names(config.n_categories)
        self.attributes = list(ATTRIBUTE_NAMES[:config.n_attributes])

    def cell_of(self, cx: float, cy: float) -> int:
        g = self.config.grid_size
        col = min(int(cx * g), g - 1)
        row = min(int(cy * g), g - 1)
        return row * g + col


@dataclass
class SceneObject:
    bbox: BBox
    depth_plane: float
    category_id: int
    attribute_id: int
    feature: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.bbox.validate()
        if not 0.0 < self.depth_plane < 1.0:
            raise ConfigError(f"depth_plane {self.depth_plane} outside (0, 1)")


@dataclass
class Caption:
    tokens: tuple[str, ...]
    pi_keyword_spans: tuple[tuple[int, str, str], ...] = ()
    referent_pair: Optional[tuple[int, int]] = None
    truth: bool = True
    relation: Optional[str] = None

    @property
    def text(self) -> str:
        return " ".join(self.tokens)

    def to_dict(self) -> dict:
        return {"tokens": list(self.tokens), "spans": [list(s) for s in self.pi_keyword_spans],
                "pair": list(self.referent_pair) if self.referent_pair else None,
                "truth": self.truth, "relation": self.relation}

    @classmethod
    def from_dict(cls, d: dict) -> "Caption":
        return cls(tuple(d["tokens"]), tuple(tuple(s) for s in d["spans"]),
                   tuple(d["pair"]) if d["pair"] else None, d["truth"], d["relation"])


@dataclass(eq=False)
class Scene:
    scene_id: str
    objects: list[SceneObject]
    raw_depth: RawDepthMap
    captions: list[Caption] = field(default_factory=list)
    seed: int = 0

    @property
    def n_objects(self) -> int:
        return len(self.objects)

    @cached_property
    def normalized_depth(self) -> NormalizedDepthMap:
        return normalize_depth_map(self.raw_depth)

    @cached_property
    def depth_stats(self) -> list[DepthStats]:
        return [object_depth_stats(self.normalized_depth, o.bbox, k)
                for k, o in enumerate(self.objects)]

    @cached_property
    def object_depths(self) -> np.ndarray:
        return np.array([s.median for s in self.depth_stats])

    @cached_property
    def labels(self) -> MutualLabelTensor:
        return label_tensor(self, self.normalized_depth)

    @cached_property
    def centers(self) -> np.ndarray:
        return np.array([o.bbox.center for o in self.objects]).reshape(-1, 2)

    def features(self) -> np.ndarray:
        return np.stack([o.feature for o in self.objects])

    def unique_category_objects(self) -> list[int]:
        cats = [o.category_id for o in self.objects]
        return [k for k, c in enumerate(cats) if cats.count(c) == 1]


def _check_seed(seed) -> int:
    seed = int(seed)
    if not 0 <= seed < 2 ** 64:
        raise ConfigError("seed must be a 64-bit unsigned integer")
    return seed


def generate_scene(config: SceneConfig, seed: int, world: Optional[World] = None,
                   scene_id: Optional[str] = None) -> Scene:
    """Draw one scene; a pure function of (config, seed)."""
    config.validate()
    seed = _check_seed(seed)
    world = world or World(config)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, seed]))
    objects = []
    for _ in range(config.n_objects):
        w, h = rng.uniform(config.min_box, config.max_box, size=2)
        x1 = rng.uniform(0.0, 1.0 - w)
        y1 = rng.uniform(0.0, 1.0 - h)
        box = BBox(float(x1), float(y1), float(x1 + w), float(y1 + h))
        cx, cy = box.center
        if rng.random() < config.pos_category_correlation:
            cat = int(world.cell_category[world.cell_of(cx, cy)])
        else:
            cat = int(rng.integers(config.n_categories))
        attr = int(rng.integers(config.n_attributes))
        rho = config.depth_y_correlation
        z = (1.0 - rho) * rng.uniform(0.05, 0.95) + rho * (1.0 - cy)
        z = float(np.clip(z, 0.02, 0.98))
        feat = world.category_emb[cat] + world.attribute_emb[attr] + \
            config.feature_noise_std * rng.standard_normal(config.feature_dim)
        objects.append(SceneObject(box, z, cat, attr, feat))
    scene = Scene(scene_id or f"scene-{seed}", objects, RawDepthMap(np.zeros((1, 1))), seed=seed)
    scene.raw_depth = render_depth_map(scene, config.map_width, config.map_height)
    base = np.random.SeedSequence([config.seed, seed, 1]).generate_state(1)[0]
    caps = []
    for k in range(config.captions_per_scene):
        caps.append(generate_caption(scene, int(base) + k,
                                     pi_fraction=config.pi_caption_fraction,
                                     margin=config.relation_margin))
    scene.captions = caps
    return scene


def render_depth_map(scene: Scene, width: int, height: int) -> RawDepthMap:
    """Raw map with value 1/(z + eps) of the nearest covering object per pixel."""
    if width < 1 or height < 1:
        raise ConfigError("depth map needs width, height >= 1")
    from .depth import pixel_mask

    z = np.full((height, width), BACKGROUND_Z)
    for o in scene.objects:
        m = pixel_mask(width, height, o.bbox)
        z[m] = np.minimum(z[m], o.depth_plane)
    return RawDepthMap(1.0 / (z + DEPTH_EPS))


# ---------------------------------------------------------------- captions

# relation name -> (template, oracle predicate (task index, swap pair?), contrastible)
# {A} and {B} expand to "<attribute> <category>".
RELATIONS: dict[str, tuple[str, tuple[int, bool], bool]] = {
    "left": ("a {A} left of a {B}", (0, False), True),
    "right": ("a {A} right of a {B}", (0, True), True),
    "above": ("a {A} above a {B}", (1, True), True),
    "below": ("a {A} below a {B}", (1, False), True),
    "over": ("a {A} over a {B}", (1, True), True),
    "under": ("a {A} under a {B}", (1, False), True),
    "top": ("a {A} on top of a {B}", (1, True), False),
    "before": ("a {A} before a {B}", (6, False), True),
    "behind": ("a {A} behind a {B}", (6, True), True),
    "front": ("a {A} in front of a {B}", (6, False), False),
    "foreground": ("a {A} in the foreground and a {B} in the background", (6, False), True),
    "background": ("a {A} in the background and a {B} in the foreground", (6, True), True),
}
RELATION_AXIS = {"left": "X", "right": "X", "above": "Y", "below": "Y", "over": "Y",
                 "under": "Y", "top": "Y", "before": "Z", "behind": "Z", "front": "Z",
                 "foreground": "Z", "background": "Z"}
PLAIN_TEMPLATES = ("a {A} and a {B}", "a {A} with a {B}", "a photo of a {A}")


def relation_holds(scene: Scene, relation: str, a: int, b: int) -> bool:
    """Oracle verdict for "object a <relation> object b"."""
    task, swap = RELATIONS[relation][1]
    j, i = (b, a) if swap else (a, b)
    return bool(scene.labels.labels[task, j, i])


def _relation_gap(scene: Scene, relation: str, a: int, b: int) -> float:
    axis = RELATION_AXIS[relation]
    if axis == "X":
        return abs(scene.centers[a, 0] - scene.centers[b, 0])
    if axis == "Y":
        return abs(scene.centers[a, 1] - scene.centers[b, 1])
    return abs(scene.object_depths[a] - scene.object_depths[b])


def category_name(category_id: int) -> str:
    return category_names(category_id + 1)[-1]


def _describe(scene: Scene, k: int) -> list[str]:
    o = scene.objects[k]
    return [ATTRIBUTE_NAMES[o.attribute_id], category_name(o.category_id)]


def _fill(template: str, desc: dict[str, list[str]]) -> list[str]:
    out = []
    for word in template.split():
        out.extend(desc[word[1]] if word in ("{A}", "{B}") else [word])
    return out


def _spans(tokens: Sequence[str]) -> tuple[tuple[int, str, str], ...]:
    spans = []
    for i, t in enumerate(tokens):
        if t in kw.KEYWORD_AXIS:
            spans.append((i, kw.KEYWORD_AXIS[t], t))
        elif t == "far" and i + 1 < len(tokens) and tokens[i + 1] == "end":
            spans.append((i, "Z", "far end"))
    return tuple(spans)


def caption_from_relation(scene: Scene, relation: str, a: int, b: int) -> Caption:
    tokens = _fill(RELATIONS[relation][0], {"A": _describe(scene, a),
                                            "B": _describe(scene, b)})
    return Caption(tuple(tokens), _spans(tokens), (a, b), relation_holds(scene, relation, a, b),
                   relation)


def generate_caption(scene: Scene, rng_seed: int, contrastible_only: bool = False, *,
                     pi_fraction: float = 0.5,
                     margin: float = 0.05) -> Caption:
    """Draw one true caption for ``scene``.

    With probability ``pi_fraction`` a relation template is used, the pair and
    keyword chosen so the oracle confirms it with at least ``margin`` of slack.
    ``contrastible_only`` forces a relation template from the antonym list and
    raises :class:`GenerationSkipped` when no pair qualifies.
    """
    rng = np.random.default_rng(rng_seed)
    candidates = scene.unique_category_objects()
    want_pi = contrastible_only or rng.random() < pi_fraction
    if want_pi and len(candidates) >= 2:
        names = [r for r, spec in RELATIONS.items() if spec[2] or not contrastible_only]
        axis_order = rng.permutation(list(kw.AXES))
        for axis in axis_order:
            rels = [r for r in names if RELATION_AXIS[r] == axis]
            for rel in rng.permutation(rels):
                rel = str(rel)
                pairs = [(a, b) for a in candidates for b in candidates if a != b
                         and relation_holds(scene, rel, a, b)
                         and _relation_gap(scene, rel, a, b) >= margin]
                if pairs:
                    a, b = pairs[int(rng.integers(len(pairs)))]
                    return caption_from_relation(scene, rel, a, b)
    if contrastible_only:
        raise GenerationSkipped(f"no unambiguous contrastible pair in {scene.scene_id}")
    if len(candidates) >= 2 and rng.random() < 2.0 / 3.0:
        template = PLAIN_TEMPLATES[int(rng.integers(2))]
        a, b = (int(v) for v in rng.choice(candidates, size=2, replace=False))
    else:
        template = PLAIN_TEMPLATES[2]
        pool = candidates or list(range(scene.n_objects))
        a = b = int(pool[int(rng.integers(len(pool)))])
    tokens = _fill(template, {"A": _describe(scene, a), "B": _describe(scene, b)})
    pair = (a, b) if "{B}" in template else None
    return Caption(tuple(tokens), _spans(tokens), pair, True, None)


# ---------------------------------------------------------------- corpus

@dataclass
class Corpus:
    config: SceneConfig
    scenes: list[Scene]
    world: World = field(repr=False, default=None)
    seed: int = 0

    def __post_init__(self):
        if self.world is None:
            self.world = World(self.config)

    def __len__(self):
        return len(self.scenes)

    def __iter__(self):
        return iter(self.scenes)

    def __getitem__(self, k):
        return self.scenes[k]

    def subset(self, scenes: Sequence[Scene]) -> "Corpus":
        return Corpus(self.config, list(scenes), self.world, self.seed)


def generate_corpus(config: SceneConfig, n_scenes: int, seed: int) -> Corpus:
    config.validate()
    world = World(config)
    seeds = np.random.SeedSequence([_check_seed(seed), 0x5CE4E]).generate_state(n_scenes, np.uint64)
    scenes = [generate_scene(config, int(s), world, scene_id=f"scene{k:05d}")
              for k, s in enumerate(seeds)]
    return Corpus(config, scenes, world, seed)


def scene_to_record(scene: Scene) -> dict:
    objs = []
    for o, st in zip(scene.objects, scene.depth_stats):
        objs.append({
            "bbox": list(o.bbox.as_tuple()), "z": o.depth_plane, "category": o.category_id,
            "attribute": o.attribute_id, "feature": [float(v) for v in o.feature],
            "depth_median": st.median, "depth_mean": st.mean, "depth_q25": st.q25,
            "depth_q75": st.q75, "depth_center": st.center_value, "depth_std": st.std,
        })
    return {"id": scene.scene_id, "seed": scene.seed, "objects": objs,
            "captions": [c.to_dict() for c in scene.captions]}


def scene_from_record(rec: dict, raw: RawDepthMap) -> Scene:
    objs = [SceneObject(BBox(*o["bbox"]), o["z"], o["category"], o["attribute"],
                        np.array(o["feature"], dtype=np.float64)) for o in rec["objects"]]
    return Scene(rec["id"], objs, raw, [Caption.from_dict(c) for c in rec["captions"]],
                 rec["seed"])


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_corpus(corpus: Corpus, out_dir) -> Path:
    """Write ``manifest.json``, ``scenes.jsonl`` and the ``depth.bin`` sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"format": "pilab-corpus", "version": CORPUS_FORMAT_VERSION,
                "config": asdict(corpus.config), "seed": corpus.seed, "n_scenes": len(corpus)}
    (out / "manifest.json").write_text(_dumps(manifest) + "\n")
    with open(out / "scenes.jsonl", "w") as fh:
        for s in corpus.scenes:
            fh.write(_dumps(scene_to_record(s)) + "\n")
    (out / "depth.bin").write_bytes(write_maps(s.raw_depth for s in corpus.scenes))
    return out


def load_corpus(in_dir) -> Corpus:
    src = Path(in_dir)
    try:
        manifest = json.loads((src / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read corpus manifest in {src}: {exc}") from exc
    if manifest.get("format") != "pilab-corpus" or manifest.get("version") != CORPUS_FORMAT_VERSION:
        raise FormatError(f"unsupported corpus format in {src}")
    config = SceneConfig.from_dict(manifest["config"])
    maps = read_maps((src / "depth.bin").read_bytes())
    lines = (src / "scenes.jsonl").read_text().splitlines()
    if len(lines) != len(maps) or len(lines) != manifest["n_scenes"]:
        raise FormatError("scene records and depth maps disagree in count")
    scenes = [scene_from_record(json.loads(line), m) for line, m in zip(lines, maps)]
    return Corpus(config, scenes, World(config), manifest["seed"])
