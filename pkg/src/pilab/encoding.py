"""Positional-information input vectors and the feature/position fusion."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, ShapeError, ValidationError

LN_EPS = 1e-5


class PIMode(str, enum.Enum):
    NONE = "none"
    CENTER_XY = "xy"
    BBOX4 = "bbox"
    BBOX4_DEPTH = "bbox_d"

    @property
    def dim(self) -> int:
        return {"none": 0, "xy": 2, "bbox": 4, "bbox_d": 5}[self.value]

    @property
    def uses_depth(self) -> bool:
        return self is PIMode.BBOX4_DEPTH

    @property
    def label(self) -> str:
        """Row label used in report tables."""
        return {"none": "∅", "xy": "x,y", "bbox": "x1,y1,x2,y2",
                "bbox_d": "x1,y1,x2,y2,d"}[self.value]

    @classmethod
    def parse(cls, value) -> "PIMode":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value))
        except ValueError:
            raise ConfigError(f"unknown PI mode {value!r}; choose from "
                              f"{[m.value for m in cls]}") from None


ALL_MODES = (PIMode.NONE, PIMode.CENTER_XY, PIMode.BBOX4, PIMode.BBOX4_DEPTH)


def pi_vector(obj, d: Optional[float], mode) -> np.ndarray:
    """Position vector of one object for the given PI mode."""
    mode = PIMode.parse(mode)
    box = obj.bbox if hasattr(obj, "bbox") else obj
    x1, y1, x2, y2 = box.as_tuple() if hasattr(box, "as_tuple") else tuple(box)
    if mode is PIMode.NONE:
        return np.zeros(0)
    if mode is PIMode.CENTER_XY:
        return np.array([(x1 + x2) / 2.0, (y1 + y2) / 2.0])
    if mode is PIMode.BBOX4:
        return np.array([x1, y1, x2, y2])
    if d is None:
        raise ValidationError("mode x1,y1,x2,y2,d needs an object depth")
    if not 0.0 <= d <= 1.0:
        raise ValidationError(f"object depth {d} outside [0, 1]")
    return np.array([x1, y1, x2, y2, float(d)])


def pi_matrix(scene, mode) -> np.ndarray:
    """(N, dim) stack of :func:`pi_vector` for every object in ``scene``."""
    mode = PIMode.parse(mode)
    if mode is PIMode.NONE:
        return np.zeros((scene.n_objects, 0))
    depths = scene.object_depths if mode.uses_depth else [None] * scene.n_objects
    return np.stack([pi_vector(o, d, mode) for o, d in zip(scene.objects, depths)])


def layer_norm(x, scale, shift, eps: float = LN_EPS) -> np.ndarray:
    """Normalize over the last axis with population variance, then scale and shift."""
    x = np.asarray(x, dtype=np.float64)
    scale, shift = np.asarray(scale), np.asarray(shift)
    if scale.shape[-1:] != x.shape[-1:] or shift.shape[-1:] != x.shape[-1:]:
        raise ShapeError(f"layer_norm dims differ: x {x.shape}, scale {scale.shape}, "
                         f"shift {shift.shape}")
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * scale + shift


@dataclass
class FusionParams:
    w_f: np.ndarray
    b_f: np.ndarray
    w_p: Optional[np.ndarray]
    b_p: Optional[np.ndarray]
    ln_f: tuple[np.ndarray, np.ndarray]
    ln_p: Optional[tuple[np.ndarray, np.ndarray]]
    eps: float = LN_EPS

    @property
    def hidden(self) -> int:
        return self.w_f.shape[1]


def fuse_embedding(f, p, params: FusionParams, mode) -> np.ndarray:
    """Unified object embedding: mean of normed feature and position projections.

    Works on a single object (1-D inputs) or any leading batch shape. Mode
    ``none`` has no position branch, so the result is the feature branch alone.
    """
    mode = PIMode.parse(mode)
    f = np.asarray(f)
    if f.shape[-1] != params.w_f.shape[0]:
        raise ShapeError(f"feature dim {f.shape[-1]} != {params.w_f.shape[0]}")
    f_hat = layer_norm(f @ params.w_f + params.b_f, *params.ln_f, params.eps)
    if mode is PIMode.NONE:
        return f_hat
    p = np.asarray(p)
    if params.w_p is None or p.shape[-1] != params.w_p.shape[0] or p.shape[-1] != mode.dim:
        raise ShapeError(f"PI vector of dim {p.shape[-1]} does not fit mode {mode.value}")
    p_hat = layer_norm(p @ params.w_p + params.b_p, *params.ln_p, params.eps)
    return (f_hat + p_hat) / 2.0
