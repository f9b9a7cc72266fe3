"""Box algebra, overlap metrics and the grounding loss with its analytic gradient.

Boxes live in a normalized ``[0, 1]`` frame as ``(x1, y1, x2, y2)``. Scalar
functions take :class:`Box` objects and are written in plain Python; the
``*_batch`` functions take ``(N, 4)`` arrays and back the trainer.

Subgradient convention: at ties of ``max``/``min`` (and at the clamp edges)
the derivative flows to the first operand.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import GeometryError, ValidationError

DEFAULT_LAMBDA = 1.0
SMOOTH_L1_BETA = 1.0


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        coords = (self.x1, self.y1, self.x2, self.y2)
        for c in coords:
            try:
                finite = math.isfinite(c)
            except TypeError:
                finite = False
            if not finite:
                raise ValidationError(f"non-finite box coordinate in {coords}")
            if c < 0.0 or c > 1.0:
                raise ValidationError(f"box coordinate outside [0, 1]: {coords}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValidationError(f"box corners out of order: {coords}")

    @classmethod
    def from_seq(cls, values: Iterable[float]) -> "Box":
        vals = [float(v) for v in values]
        if len(vals) != 4:
            raise ValidationError(f"a box needs 4 coordinates, got {len(vals)}")
        return cls(*vals)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=float)

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


@dataclass(frozen=True)
class BoxParam:
    """Unconstrained pre-activation ``(cx, cy, w, h)``; see :func:`decode`."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in self.as_tuple()):
            raise ValidationError(f"non-finite box parameters {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=float)


def validate_boxes(boxes: np.ndarray) -> np.ndarray:
    """Check an ``(N, 4)`` array against the :class:`Box` invariants."""
    arr = np.asarray(boxes, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValidationError(f"expected an (N, 4) box array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("non-finite box coordinate")
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValidationError("box coordinate outside [0, 1]")
    if np.any(arr[:, 0] > arr[:, 2]) or np.any(arr[:, 1] > arr[:, 3]):
        raise ValidationError("box corners out of order")
    return arr


# ---------------------------------------------------------------------------
# scalar metrics


def iou(a: Box, b: Box) -> float:
    iw = max(min(a.x2, b.x2) - max(a.x1, b.x1), 0.0)
    ih = max(min(a.y2, b.y2) - max(a.y1, b.y1), 0.0)
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def giou(a: Box, b: Box) -> float:
    """Generalized IoU: ``iou - (area(C) - union) / area(C)``, C the enclosing box."""
    if a.area == 0.0 and b.area == 0.0:
        raise GeometryError("giou is undefined for two zero-area boxes")
    iw = max(min(a.x2, b.x2) - max(a.x1, b.x1), 0.0)
    ih = max(min(a.y2, b.y2) - max(a.y1, b.y1), 0.0)
    inter = iw * ih
    union = a.area + b.area - inter
    enclose = (max(a.x2, b.x2) - min(a.x1, b.x1)) * (max(a.y2, b.y2) - min(a.y1, b.y1))
    return inter / union - (enclose - union) / enclose


def huber(diff: Sequence[float] | np.ndarray, beta: float = SMOOTH_L1_BETA) -> np.ndarray:
    d = np.abs(np.asarray(diff, dtype=float))
    return np.where(d < beta, 0.5 * d * d / beta, d - 0.5 * beta)


def smooth_l1_from_diff(diff: Sequence[float] | np.ndarray, beta: float = SMOOTH_L1_BETA) -> float:
    """Mean elementwise Huber over the four coordinate differences.

    Exposed separately so unclamped differences can be evaluated.
    """
    return float(np.mean(huber(diff, beta)))


def smooth_l1(pred: Box, target: Box) -> float:
    return smooth_l1_from_diff(pred.as_array() - target.as_array())


def grounding_loss(pred: Box, target: Box, lam: float = DEFAULT_LAMBDA) -> float:
    """Box-regression loss: smooth-L1 plus ``lam * (1 - giou)``."""
    if lam < 0:
        raise ValidationError(f"lambda must be >= 0, got {lam}")
    loss = smooth_l1(pred, target)
    if lam:
        loss += lam * (1.0 - giou(pred, target))
    return loss


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def decode(param: BoxParam) -> Box:
    """Squash ``(cx, cy, w, h)`` through a logistic map and clamp corners to [0, 1].

    >>> decode(BoxParam(0.0, 0.0, 0.0, 0.0))
    Box(x1=0.25, y1=0.25, x2=0.75, y2=0.75)
    """
    boxes = decode_batch(param.as_array()[None, :])
    return Box(*(float(v) for v in boxes[0]))


def grounding_loss_grad(param: BoxParam, target: Box, lam: float = DEFAULT_LAMBDA) -> np.ndarray:
    """Gradient of ``grounding_loss(decode(param), target, lam)`` w.r.t. the raw params."""
    if lam < 0:
        raise ValidationError(f"lambda must be >= 0, got {lam}")
    pred = decode(param)
    if lam and pred.area == 0.0 and target.area == 0.0:
        raise GeometryError("giou is undefined for two zero-area boxes")
    _, grad = loss_and_grad_batch(param.as_array()[None, :], target.as_array()[None, :], lam)
    return grad[0]


# ---------------------------------------------------------------------------
# batched versions used by the trainer


def decode_batch(params: np.ndarray) -> np.ndarray:
    params = np.asarray(params, dtype=float)
    if not np.all(np.isfinite(params)):
        raise ValidationError("non-finite box parameters")
    s = _sigmoid(params)
    half_w = 0.5 * s[:, 2]
    half_h = 0.5 * s[:, 3]
    raw = np.stack(
        [s[:, 0] - half_w, s[:, 1] - half_h, s[:, 0] + half_w, s[:, 1] + half_h], axis=1
    )
    return np.minimum(np.maximum(raw, 0.0), 1.0)


def iou_batch(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise IoU of two ``(N, 4)`` arrays."""
    iw = np.maximum(np.minimum(a[:, 2], b[:, 2]) - np.maximum(a[:, 0], b[:, 0]), 0.0)
    ih = np.maximum(np.minimum(a[:, 3], b[:, 3]) - np.maximum(a[:, 1], b[:, 1]), 0.0)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a + area_b - inter
    out = np.zeros_like(union)
    np.divide(inter, union, out=out, where=union > 0.0)
    return out


def loss_and_grad_batch(
    params: np.ndarray, targets: np.ndarray, lam: float = DEFAULT_LAMBDA
) -> tuple[np.ndarray, np.ndarray]:
    """Per-row grounding loss of ``decode(params)`` vs ``targets`` and its gradient.

    Returns ``(loss[N], dloss/dparams[N, 4])``. Decoded predictions always have
    positive area, so the GIoU term is well defined for any target.
    """
    s = _sigmoid(params)
    half_w = 0.5 * s[:, 2]
    half_h = 0.5 * s[:, 3]
    raw = np.stack(
        [s[:, 0] - half_w, s[:, 1] - half_h, s[:, 0] + half_w, s[:, 1] + half_h], axis=1
    )
    p = np.minimum(np.maximum(raw, 0.0), 1.0)
    t = targets

    # smooth-L1, mean over coordinates
    d = p - t
    ad = np.abs(d)
    small = ad < SMOOTH_L1_BETA
    loss = np.where(small, 0.5 * d * d / SMOOTH_L1_BETA, ad - 0.5 * SMOOTH_L1_BETA).mean(axis=1)
    g = np.where(small, d / SMOOTH_L1_BETA, np.sign(d)) / 4.0

    if lam:
        px1, py1, px2, py2 = p.T
        tx1, ty1, tx2, ty2 = t.T
        pw = px2 - px1
        ph = py2 - py1
        area_p = pw * ph
        area_t = (tx2 - tx1) * (ty2 - ty1)

        xw = np.minimum(px2, tx2) - np.maximum(px1, tx1)
        xh = np.minimum(py2, ty2) - np.maximum(py1, ty1)
        iw = np.maximum(xw, 0.0)
        ih = np.maximum(xh, 0.0)
        inter = iw * ih
        union = area_p + area_t - inter
        cw = np.maximum(px2, tx2) - np.minimum(px1, tx1)
        ch = np.maximum(py2, ty2) - np.minimum(py1, ty1)
        enclose = cw * ch
        giou_v = inter / union - 1.0 + union / enclose
        loss = loss + lam * (1.0 - giou_v)

        # d(iw)/d(px1, px2), d(ih)/d(py1, py2)
        pos_w = (xw >= 0.0).astype(float)
        pos_h = (xh >= 0.0).astype(float)
        diw_dx1 = -pos_w * (px1 >= tx1)
        diw_dx2 = pos_w * (px2 <= tx2)
        dih_dy1 = -pos_h * (py1 >= ty1)
        dih_dy2 = pos_h * (py2 <= ty2)
        d_inter = np.stack([diw_dx1 * ih, dih_dy1 * iw, diw_dx2 * ih, dih_dy2 * iw], axis=1)
        d_area = np.stack([-ph, -pw, ph, pw], axis=1)
        d_union = d_area - d_inter
        d_enclose = np.stack(
            [
                -ch * (px1 <= tx1),
                -cw * (py1 <= ty1),
                ch * (px2 >= tx2),
                cw * (py2 >= ty2),
            ],
            axis=1,
        )
        d_iou = (d_inter * union[:, None] - inter[:, None] * d_union) / (union * union)[:, None]
        d_ratio = (d_union * enclose[:, None] - union[:, None] * d_enclose) / (
            enclose * enclose
        )[:, None]
        g = g - lam * (d_iou + d_ratio)

    # clamp passes the gradient where 0 <= raw <= 1
    g = g * ((raw >= 0.0) & (raw <= 1.0))
    gx1, gy1, gx2, gy2 = g.T
    g_param = np.stack(
        [gx1 + gx2, gy1 + gy2, 0.5 * (gx2 - gx1), 0.5 * (gy2 - gy1)], axis=1
    )
    g_param *= s * (1.0 - s)
    return loss, g_param
