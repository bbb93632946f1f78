"""Two-stream transformer (language, visual, cross-modality) with task heads.

Everything runs on numpy with the explicit backward passes from :mod:`pilab.nn`.
Objects carry no index embedding; position enters only through PI vectors, so
the visual stream is equivariant to object order.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import nn
from .encoding import FusionParams, PIMode
from .errors import ConfigError, FormatError, ShapeError, StateError
from .geometry import N_TASKS

HEAD_NAMES = ("mlm", "cmm", "obj", "attr", "feat", "qa", "pi")
PI_HEAD_PREFIX = "pi_head."
QA_HEAD_PREFIX = "qa_head."


@dataclass
class ModelConfig:
    hidden: int = 64
    lang_layers: int = 2
    vis_layers: int = 2
    cross_layers: int = 2
    heads: int = 4
    ff_mult: int = 4
    vocab_size: int = 128
    max_text_len: int = 16
    n_objects: int = 8
    feature_dim: int = 32
    n_categories: int = 30
    n_attributes: int = 8
    n_answers: int = 16
    pi_mode: str = "xy"
    dropout_p: float = 0.1
    seed: int = 0
    dtype: str = "float32"

    def validate(self) -> "ModelConfig":
        PIMode.parse(self.pi_mode)
        if self.hidden % self.heads:
            raise ConfigError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        for name in ("hidden", "lang_layers", "vis_layers", "cross_layers", "heads", "ff_mult",
                     "vocab_size", "max_text_len", "n_objects", "feature_dim", "n_categories",
                     "n_attributes", "n_answers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must lie in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        return self

    @property
    def mode(self) -> PIMode:
        return PIMode.parse(self.pi_mode)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Batch:
    tokens: np.ndarray        # (B, T) int
    text_mask: np.ndarray     # (B, T) bool, True for real tokens
    features: np.ndarray      # (B, N, feature_dim)
    pi: np.ndarray            # (B, N, pi_dim)

    @property
    def size(self) -> int:
        return self.tokens.shape[0]


@dataclass
class HeadOutputs:
    lang: np.ndarray
    vis: np.ndarray
    pooled: np.ndarray
    mlm_logits: Optional[np.ndarray] = None   # (B, T, V)
    cmm_logit: Optional[np.ndarray] = None    # (B,)
    obj_logits: Optional[np.ndarray] = None   # (B, N, C)
    attr_logits: Optional[np.ndarray] = None  # (B, N, A)
    feat_pred: Optional[np.ndarray] = None    # (B, N, F)
    qa_logits: Optional[np.ndarray] = None    # (B, n_answers)
    pi_logits: Optional[np.ndarray] = None    # (B, N, N, 9)


def pair_states(vis: np.ndarray) -> np.ndarray:
    """(B, N, H) -> (B, N, N, 2H) with ``[h_j, h_i]`` at position (j, i)."""
    b, n, h = vis.shape
    return np.concatenate([np.broadcast_to(vis[:, :, None, :], (b, n, n, h)),
                           np.broadcast_to(vis[:, None, :, :], (b, n, n, h))], axis=-1)


def pair_states_backward(dpair: np.ndarray) -> np.ndarray:
    h = dpair.shape[-1] // 2
    return dpair[..., :h].sum(axis=2) + dpair[..., h:].sum(axis=1)


class PIModel:
    """Network definition plus its parameter dict.

    ``forward`` records caches; ``backward`` consumes them and returns
    gradients for every parameter (zeros where a parameter is unreachable).
    """

    def __init__(self, config: ModelConfig, params: Optional[dict] = None):
        self.config = config.validate()
        c = config
        H, inner = c.hidden, c.hidden * c.ff_mult
        self.mode = c.mode
        self.dtype = np.dtype(c.dtype)
        self.tok_emb = nn.Embedding("lang.tok_emb", c.vocab_size, H)
        self.pos_emb = nn.Embedding("lang.pos_emb", c.max_text_len, H)
        self.emb_ln = nn.LayerNorm("lang.emb_ln", H)
        self.feat_proj = nn.Linear("vis.feat_proj", c.feature_dim, H)
        self.feat_ln = nn.LayerNorm("vis.feat_ln", H)
        self.has_pos_branch = self.mode.dim > 0
        if self.has_pos_branch:
            self.pos_proj = nn.Linear("vis.pos_proj", self.mode.dim, H)
            self.pos_ln = nn.LayerNorm("vis.pos_ln", H)
        self.lang_layers = [nn.EncoderLayer(f"lang.layer{k}", H, c.heads, inner)
                            for k in range(c.lang_layers)]
        self.vis_layers = [nn.EncoderLayer(f"vis.layer{k}", H, c.heads, inner)
                           for k in range(c.vis_layers)]
        self.cross_layers = [nn.CrossLayer(f"cross.layer{k}", H, c.heads, inner)
                             for k in range(c.cross_layers)]
        self.pooler = nn.Linear("pooler.dense", H, H)
        self.pool_act = nn.Tanh("pooler.act")
        self.heads = {
            "mlm": nn.Head("mlm_head", H, H, c.vocab_size),
            "cmm": nn.Head("cmm_head", H, H, 1),
            "qa": nn.Head("qa_head", H, H, c.n_answers),
            "obj": nn.Head("obj_head", H, H, c.n_categories),
            "attr": nn.Head("attr_head", H, H, c.n_attributes),
            "feat": nn.Head("feat_head", H, H, c.feature_dim),
            "pi": nn.Head("pi_head", 2 * H, H, N_TASKS, dropout_p=c.dropout_p),
        }
        if params is None:
            rng = np.random.default_rng(np.random.SeedSequence([c.seed, 0x1417]))
            params = nn.init_params(self.param_specs(), rng, self.dtype)
        self.params = params
        self._check_params()
        self._record = None

    # ------------------------------------------------------------ structure

    def layers(self) -> list[nn.Layer]:
        out = [self.tok_emb, self.pos_emb, self.emb_ln, self.feat_proj, self.feat_ln]
        if self.has_pos_branch:
            out += [self.pos_proj, self.pos_ln]
        out += self.lang_layers + self.vis_layers + self.cross_layers
        out += [self.pooler, self.pool_act] + [self.heads[k] for k in HEAD_NAMES]
        return out

    def param_specs(self) -> dict:
        specs = {}
        for layer in self.layers():
            specs.update(layer.all_specs())
        return specs

    def _check_params(self):
        specs = self.param_specs()
        if set(specs) != set(self.params):
            missing = sorted(set(specs) - set(self.params))
            extra = sorted(set(self.params) - set(specs))
            raise ShapeError(f"parameter names mismatch: missing {missing[:3]}, extra {extra[:3]}")
        for name, (shape, _) in specs.items():
            if self.params[name].shape != tuple(shape):
                raise ShapeError(f"{name}: shape {self.params[name].shape} != {tuple(shape)}")

    def fusion_params(self) -> FusionParams:
        P = self.params
        if self.has_pos_branch:
            w_p, b_p = P[self.pos_proj.w], P[self.pos_proj.b]
            ln_p = (P[self.pos_ln.g], P[self.pos_ln.b])
        else:
            w_p = b_p = ln_p = None
        return FusionParams(P[self.feat_proj.w], P[self.feat_proj.b], w_p, b_p,
                            (P[self.feat_ln.g], P[self.feat_ln.b]), ln_p, self.feat_ln.eps)

    def head_param_names(self, head: str) -> list[str]:
        return sorted(self.heads[head].all_specs())

    # ------------------------------------------------------------ forward

    def _check_batch(self, batch: Batch):
        c = self.config
        B, T = batch.tokens.shape
        if T > c.max_text_len or batch.text_mask.shape != (B, T):
            raise ShapeError(f"text batch {batch.tokens.shape} incompatible with max_text_len")
        if batch.features.shape != (B, batch.features.shape[1], c.feature_dim):
            raise ShapeError(f"features {batch.features.shape} need last dim {c.feature_dim}")
        if batch.pi.shape != batch.features.shape[:2] + (self.mode.dim,):
            raise ShapeError(f"PI batch {batch.pi.shape} does not fit mode {self.mode.value}")

    def visual_embedding(self, features, pi):
        P = self.params
        f_hat = self.feat_ln.forward(P, self.feat_proj.forward(P, features))
        if not self.has_pos_branch:
            return f_hat
        p_hat = self.pos_ln.forward(P, self.pos_proj.forward(P, pi))
        return (f_hat + p_hat) / 2.0

    def forward(self, batch: Batch, train: bool = False, rng: Optional[np.random.Generator] = None,
                heads=HEAD_NAMES) -> HeadOutputs:
        """Run the encoders and the requested heads.

        In train mode the PI head applies dropout drawn from ``rng`` (which
        must then be given); eval mode is fully deterministic.
        """
        self._check_batch(batch)
        if train and rng is None:
            raise StateError("train-mode forward needs an explicit rng for dropout")
        P, dt = self.params, self.dtype
        tokens = np.asarray(batch.tokens)
        mask = np.asarray(batch.text_mask, dtype=bool)
        B, T = tokens.shape
        positions = np.broadcast_to(np.arange(T), (B, T))
        lang = self.emb_ln.forward(P, self.tok_emb.forward(P, tokens)
                                   + self.pos_emb.forward(P, positions))
        for layer in self.lang_layers:
            lang = layer.forward(P, lang, mask)
        vis = self.visual_embedding(np.asarray(batch.features, dt), np.asarray(batch.pi, dt))
        for layer in self.vis_layers:
            vis = layer.forward(P, vis)
        for layer in self.cross_layers:
            lang, vis = layer.forward(P, lang, vis, mask)
        pooled = self.pool_act.forward(P, self.pooler.forward(P, lang[:, 0]))

        out = HeadOutputs(lang=lang, vis=vis, pooled=pooled)
        heads = tuple(heads)
        for h in heads:
            if h not in self.heads:
                raise ConfigError(f"unknown head {h!r}")
        if "mlm" in heads:
            out.mlm_logits = self.heads["mlm"].forward(P, lang)
        if "cmm" in heads:
            out.cmm_logit = self.heads["cmm"].forward(P, pooled)[:, 0]
        if "qa" in heads:
            out.qa_logits = self.heads["qa"].forward(P, pooled)
        if "obj" in heads:
            out.obj_logits = self.heads["obj"].forward(P, vis)
        if "attr" in heads:
            out.attr_logits = self.heads["attr"].forward(P, vis)
        if "feat" in heads:
            out.feat_pred = self.heads["feat"].forward(P, vis)
        if "pi" in heads:
            out.pi_logits = self.heads["pi"].forward(P, pair_states(vis), rng if train else None)
        self._record = (heads, B, T, vis.shape[1])
        return out

    def pi_head_forward(self, pair_state: np.ndarray, train: bool = False, rng=None) -> np.ndarray:
        """Apply the PI head alone to concatenated pair states (..., 2H)."""
        if pair_state.shape[-1] != 2 * self.config.hidden:
            raise ShapeError(f"pair state dim {pair_state.shape[-1]} != {2 * self.config.hidden}")
        if train and rng is None:
            raise StateError("train-mode forward needs an explicit rng for dropout")
        return self.heads["pi"].forward(self.params, pair_state.astype(self.dtype, copy=False),
                                        rng if train else None)

    def pi_head_backward(self, dlogits: np.ndarray) -> dict:
        grads = {}
        self.heads["pi"].backward(self.params, grads, dlogits)
        return grads

    # ------------------------------------------------------------ backward

    def zero_grads(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def backward(self, dout: dict) -> dict:
        """Gradients of a scalar loss given its gradients w.r.t. head outputs.

        ``dout`` maps output field names (``mlm_logits``, ``cmm_logit`` ...)
        to arrays of the same shape. Missing entries count as zero.
        """
        if self._record is None:
            raise StateError("backward called without a preceding forward")
        heads, B, T, N = self._record
        self._record = None
        P = self.params
        G = self.zero_grads()
        c = self.config
        dt = self.dtype
        dlang = dvis = dpooled = None

        def add(acc, v):
            return v if acc is None else acc + v

        head_fields = {"mlm": "mlm_logits", "cmm": "cmm_logit", "qa": "qa_logits",
                       "obj": "obj_logits", "attr": "attr_logits", "feat": "feat_pred",
                       "pi": "pi_logits"}
        for h in reversed(HEAD_NAMES):
            if h not in heads:
                continue
            g = dout.get(head_fields[h])
            head = self.heads[h]
            if g is None:
                head.reset()
                continue
            g = np.asarray(g, dtype=dt)
            if h == "cmm":
                dpooled = add(dpooled, head.backward(P, G, g[:, None]))
            elif h == "qa":
                dpooled = add(dpooled, head.backward(P, G, g))
            elif h == "mlm":
                dlang = add(dlang, head.backward(P, G, g))
            elif h == "pi":
                dvis = add(dvis, pair_states_backward(head.backward(P, G, g)))
            else:
                dvis = add(dvis, head.backward(P, G, g))

        if dpooled is not None:
            dcls = self.pooler.backward(P, G, self.pool_act.backward(P, G, dpooled))
        else:
            self.pooler.reset()
            self.pool_act.reset()
            dcls = None
        if dlang is None:
            dlang = np.zeros((B, T, c.hidden), dt)
        if dcls is not None:
            dlang = dlang.copy()
            dlang[:, 0] += dcls
        if dvis is None:
            dvis = np.zeros((B, N, c.hidden), dt)
        for layer in reversed(self.cross_layers):
            dlang, dvis = layer.backward(P, G, dlang, dvis)
        for layer in reversed(self.vis_layers):
            dvis = layer.backward(P, G, dvis)
        if self.has_pos_branch:
            half = dvis / 2.0
            self.feat_proj.backward(P, G, self.feat_ln.backward(P, G, half))
            self.pos_proj.backward(P, G, self.pos_ln.backward(P, G, half))
        else:
            self.feat_proj.backward(P, G, self.feat_ln.backward(P, G, dvis))
        for layer in reversed(self.lang_layers):
            dlang = layer.backward(P, G, dlang)
        demb = self.emb_ln.backward(P, G, dlang)
        self.tok_emb.backward(P, G, demb)
        self.pos_emb.backward(P, G, demb)
        return G


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"PILABCK\x00"
CHECKPOINT_VERSION = 1
_U32 = struct.Struct("<I")


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict
    step: int = 0
    rng_state: Optional[dict] = None
    meta: dict = field(default_factory=dict)

    def model(self) -> PIModel:
        return PIModel(self.config, {k: v.copy() for k, v in self.params.items()})

    @classmethod
    def from_model(cls, model: PIModel, step=0, rng_state=None, meta=None) -> "Checkpoint":
        return cls(model.config, {k: v.copy() for k, v in model.params.items()}, step,
                   rng_state, dict(meta or {}))


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    tensors, chunks, offset = [], [], 0
    for name in sorted(ckpt.params):
        arr = np.ascontiguousarray(ckpt.params[name], dtype="<f4")
        raw = arr.tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"config": asdict(ckpt.config), "step": ckpt.step,
                         "rng_state": ckpt.rng_state, "meta": ckpt.meta, "tensors": tensors},
                        sort_keys=True, separators=(",", ":")).encode()
    body = CHECKPOINT_MAGIC + _U32.pack(CHECKPOINT_VERSION) + _U32.pack(len(header)) + header \
        + b"".join(chunks)
    return body + _U32.pack(zlib.crc32(body))


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(ckpt))
    return path


def parse_checkpoint(data: bytes, config: Optional[ModelConfig] = None) -> Checkpoint:
    n_magic = len(CHECKPOINT_MAGIC)
    if len(data) < n_magic + 12:
        raise FormatError("file too short for a checkpoint", len(data))
    if data[:n_magic] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    (version,) = _U32.unpack_from(data, n_magic)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", n_magic)
    (hlen,) = _U32.unpack_from(data, n_magic + 4)
    hstart = n_magic + 8
    if hstart + hlen + 4 > len(data):
        raise FormatError("truncated checkpoint header", len(data))
    try:
        header = json.loads(data[hstart:hstart + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}", hstart) from None
    dstart = hstart + hlen
    crc_off = len(data) - 4
    total = sum(t["nbytes"] for t in header["tensors"])
    if dstart + total != crc_off:
        raise FormatError(f"checkpoint payload length mismatch (expected {total} bytes)",
                          min(len(data), dstart + total))
    (crc,) = _U32.unpack_from(data, crc_off)
    if zlib.crc32(data[:crc_off]) != crc:
        raise FormatError("checkpoint checksum mismatch", crc_off)
    try:
        stored = ModelConfig.from_dict(header["config"])
    except (ConfigError, TypeError) as exc:
        raise FormatError(f"bad config in checkpoint: {exc}", hstart) from None
    if config is not None and asdict(config) != asdict(stored):
        diff = {k for k, v in asdict(config).items() if asdict(stored).get(k) != v}
        raise FormatError(f"checkpoint config differs in {sorted(diff)}", hstart)
    params = {}
    for t in header["tensors"]:
        start = dstart + t["offset"]
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        arr = np.frombuffer(data, "<f4", count, start).reshape(t["shape"])
        params[t["name"]] = arr.astype(stored.dtype)
    try:
        PIModel(stored, params)
    except ShapeError as exc:
        raise FormatError(f"checkpoint tensors do not match config: {exc}", dstart) from None
    return Checkpoint(stored, params, header["step"], header["rng_state"], header["meta"])


def load_checkpoint(path, config: Optional[ModelConfig] = None) -> Checkpoint:
    """Read a checkpoint; ``config``, when given, must match the stored one exactly."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from None
    return parse_checkpoint(data, config)
