"""Ground-truth oracle for the nine mutual-position tasks.

Coordinates are normalized to the unit square with y growing downward, so
"closer to the bottom" means a larger y center. Depth values are normalized
depths where 0 is the closest pixel.

Task order (index 0..8):
    1 center more to the left        6 no overlap in X and in Y
    2 center closer to the bottom    7 median depth closer
    3 completely left                8 median inside the other IQR
    4 completely below               9 depths significantly smaller (Welch)
    5 completely inside
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy import special

from .errors import FormatError, ValidationError

N_TASKS = 9
TASK_NAMES = (
    "center_left", "center_below", "completely_left", "completely_below",
    "inside", "no_overlap_xy", "median_closer", "median_in_iqr", "ttest_closer",
)
XY_TASKS = (0, 1, 2, 3, 4, 5)
Z_TASKS = (6, 7, 8)
DEFAULT_ALPHA = 0.05


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def validate(self) -> "BBox":
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValidationError(f"degenerate box {self.as_tuple()}")
        if not all(0.0 <= v <= 1.0 for v in self.as_tuple()):
            raise ValidationError(f"box {self.as_tuple()} outside the unit square")
        return self

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def center(self) -> tuple[float, float]:
        return bbox_center(self)


def as_bbox(b) -> BBox:
    box = b if isinstance(b, BBox) else BBox(*map(float, b))
    return box.validate()


def bbox_center(b) -> tuple[float, float]:
    b = as_bbox(b)
    return ((b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0)


@dataclass(frozen=True)
class DepthStats:
    median: float
    mean: float
    q25: float
    q75: float
    center_value: float
    std: float
    samples: np.ndarray = field(repr=False, compare=False)

    @property
    def n(self) -> int:
        return int(self.samples.size)

    @property
    def var(self) -> float:
        """Unbiased sample variance (nan for a single sample)."""
        return float(np.var(self.samples, ddof=1)) if self.n > 1 else float("nan")

    @classmethod
    def from_samples(cls, samples, center_value=None) -> "DepthStats":
        s = np.asarray(samples, dtype=np.float64).ravel()
        if s.size == 0:
            raise ValidationError("depth statistics need at least one sample")
        q25, med, q75 = np.percentile(s, [25.0, 50.0, 75.0])
        return cls(
            median=float(med), mean=float(s.mean()), q25=float(q25), q75=float(q75),
            center_value=float(med if center_value is None else center_value),
            std=float(s.std()), samples=s,
        )


class WelchResult(NamedTuple):
    t: float
    df: float
    p_one_sided: float
    significant: bool


def _welch_core(mean_a, var_a, n_a, mean_b, var_b, n_b):
    """Vectorised one-sided Welch statistic for H1: mean_a < mean_b.

    Returns (t, df, p). Both-zero-variance pairs follow the degenerate rules:
    equal means give t=0, p=0.5; otherwise p is 0 or 1 with t = -/+inf.
    """
    mean_a, var_a, n_a, mean_b, var_b, n_b = np.broadcast_arrays(
        *(np.asarray(v, dtype=np.float64) for v in (mean_a, var_a, n_a, mean_b, var_b, n_b)))
    sa, sb = var_a / n_a, var_b / n_b
    se2 = sa + sb
    diff = mean_a - mean_b
    degenerate = se2 <= 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(degenerate, 0.0, diff / np.sqrt(np.where(degenerate, 1.0, se2)))
        denom = sa ** 2 / (n_a - 1) + sb ** 2 / (n_b - 1)
        df = np.where(degenerate, n_a + n_b - 2.0, se2 ** 2 / np.where(degenerate, 1.0, denom))
    p = special.stdtr(df, t)
    t = np.where(degenerate & (diff < 0), -np.inf, np.where(degenerate & (diff > 0), np.inf, t))
    p = np.where(degenerate, np.where(diff < 0, 0.0, np.where(diff > 0, 1.0, 0.5)), p)
    return t, df, p


def welch_t_test(a, b, alpha: float = DEFAULT_ALPHA) -> WelchResult:
    """One-sided Welch test that ``a`` has a smaller mean than ``b``.

    ``significant`` is True when ``p_one_sided < alpha``, i.e. the samples of
    ``a`` are significantly smaller (more in the foreground).
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size < 2 or b.size < 2:
        raise ValidationError("welch_t_test needs at least two samples per side")
    t, df, p = _welch_core(a.mean(), a.var(ddof=1), a.size, b.mean(), b.var(ddof=1), b.size)
    p = float(p)
    return WelchResult(float(t), float(df), p, bool(p < alpha))


@dataclass(frozen=True)
class MutualLabels:
    t1: bool
    t2: bool
    t3: bool
    t4: bool
    t5: bool
    t6: bool
    t7: bool
    t8: bool
    t9: bool
    degenerate: bool = False

    def as_tuple(self) -> tuple[bool, ...]:
        return (self.t1, self.t2, self.t3, self.t4, self.t5, self.t6, self.t7, self.t8, self.t9)


def mutual_labels(a, da: DepthStats, b, db: DepthStats, alpha: float = DEFAULT_ALPHA) -> MutualLabels:
    """Verdicts of all nine tasks for the ordered pair "a relative to b"."""
    if not 0.0 < alpha < 1.0:
        raise ValidationError(f"alpha must lie in (0, 1), got {alpha}")
    a, b = as_bbox(a), as_bbox(b)
    (ax, ay), (bx, by) = bbox_center(a), bbox_center(b)
    t9, degenerate = False, False
    if da.n < 2 or db.n < 2:
        degenerate = True
    else:
        t9 = welch_t_test(da.samples, db.samples, alpha).significant
    return MutualLabels(
        t1=ax < bx,
        t2=ay > by,
        t3=a.x2 < b.x1,
        t4=a.y1 > b.y2,
        t5=b.x1 <= a.x1 and a.x2 <= b.x2 and b.y1 <= a.y1 and a.y2 <= b.y2,
        t6=(a.x2 < b.x1 or b.x2 < a.x1) and (a.y2 < b.y1 or b.y2 < a.y1),
        t7=da.median < db.median,
        t8=db.q25 <= da.median <= db.q75,
        t9=bool(t9),
        degenerate=degenerate,
    )


@dataclass
class MutualLabelTensor:
    """Boolean labels of shape (9, N, N); ``labels[k, j, i]`` is task k for pair (j, i)."""

    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=bool)
        if self.labels.ndim != 3 or self.labels.shape[0] != N_TASKS or \
                self.labels.shape[1] != self.labels.shape[2]:
            raise ValidationError(f"label tensor must be (9, N, N), got {self.labels.shape}")

    @property
    def n_objects(self) -> int:
        return self.labels.shape[1]

    @property
    def n_entries(self) -> int:
        return int(self.labels.size)

    def to_bytes(self) -> bytes:
        header = struct.pack("<III", *self.labels.shape)
        return header + np.packbits(self.labels.ravel(), bitorder="little").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, offset: int = 0) -> tuple["MutualLabelTensor", int]:
        """Decode one tensor starting at ``offset``; returns it with the end offset."""
        if len(data) - offset < 12:
            raise FormatError("truncated label tensor header", offset)
        k, n, m = struct.unpack_from("<III", data, offset)
        if k != N_TASKS or n != m:
            raise FormatError(f"bad label tensor header {(k, n, m)}", offset)
        count = k * n * m
        nbytes = (count + 7) // 8
        start = offset + 12
        if len(data) - start < nbytes:
            raise FormatError("truncated label tensor payload", start)
        bits = np.unpackbits(np.frombuffer(data, np.uint8, nbytes, start), count=count,
                             bitorder="little")
        return cls(bits.reshape(k, n, m).astype(bool)), start + nbytes


def pairwise_labels(boxes: Sequence, stats: Sequence[DepthStats],
                    alpha: float = DEFAULT_ALPHA) -> MutualLabelTensor:
    """Vectorised all-pairs evaluation; agrees with :func:`mutual_labels` entry-wise."""
    boxes = [as_bbox(b) for b in boxes]
    if len(boxes) != len(stats):
        raise ValidationError("need one DepthStats per box")
    arr = np.array([b.as_tuple() for b in boxes], dtype=np.float64).reshape(-1, 4)
    x1, y1, x2, y2 = (arr[:, k] for k in range(4))
    cx, cy = (x1 + x2) / 2.0, (y1 + y2) / 2.0
    med = np.array([s.median for s in stats])
    q25 = np.array([s.q25 for s in stats])
    q75 = np.array([s.q75 for s in stats])
    mean = np.array([s.mean for s in stats])
    n = np.array([s.n for s in stats], dtype=np.float64)
    var = np.array([s.var if s.n > 1 else 0.0 for s in stats])

    A = (slice(None), None)  # row object j
    B = (None, slice(None))  # column object i
    labels = np.empty((N_TASKS, len(boxes), len(boxes)), dtype=bool)
    labels[0] = cx[A] < cx[B]
    labels[1] = cy[A] > cy[B]
    labels[2] = x2[A] < x1[B]
    labels[3] = y1[A] > y2[B]
    labels[4] = (x1[B] <= x1[A]) & (x2[A] <= x2[B]) & (y1[B] <= y1[A]) & (y2[A] <= y2[B])
    labels[5] = ((x2[A] < x1[B]) | (x2[B] < x1[A])) & ((y2[A] < y1[B]) | (y2[B] < y1[A]))
    labels[6] = med[A] < med[B]
    labels[7] = (q25[B] <= med[A]) & (med[A] <= q75[B])
    _, _, p = _welch_core(mean[A], var[A], n[A], mean[B], var[B], n[B])
    enough = (n[A] >= 2) & (n[B] >= 2)
    labels[8] = enough & (p < alpha)
    return MutualLabelTensor(labels)


def label_tensor(scene, depth_source=None, alpha: float = DEFAULT_ALPHA) -> MutualLabelTensor:
    """Label tensor for every ordered object pair of ``scene``.

    ``depth_source`` is a normalized depth map; it defaults to the scene's own
    normalized rendering.
    """
    from .depth import object_depth_stats

    if depth_source is None:
        depth_source = scene.normalized_depth
    boxes = [o.bbox for o in scene.objects]
    stats = [object_depth_stats(depth_source, b, object_index=k) for k, b in enumerate(boxes)]
    return pairwise_labels(boxes, stats, alpha)
