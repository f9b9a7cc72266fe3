"""Shared oracles and small fixtures for the test suite."""

from __future__ import annotations

import math

import numpy as np

from curricuforge.dataset import SourceProfile, SyntheticWorldConfig
from curricuforge.geometry import loss_and_grad_batch

FD_STEP = 1e-5


def _raw_corners(params: np.ndarray) -> np.ndarray:
    s = 1.0 / (1.0 + np.exp(-params))
    return np.stack(
        [s[:, 0] - s[:, 2] / 2, s[:, 1] - s[:, 3] / 2, s[:, 0] + s[:, 2] / 2, s[:, 1] + s[:, 3] / 2], axis=1
    )


def kink_margin(params: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Distance (in box coordinates) from the nearest non-differentiable point."""
    raw = _raw_corners(params)
    p = np.clip(raw, 0.0, 1.0)
    t = targets
    d = np.abs(p - t)
    xw = np.minimum(p[:, 2], t[:, 2]) - np.maximum(p[:, 0], t[:, 0])
    xh = np.minimum(p[:, 3], t[:, 3]) - np.maximum(p[:, 1], t[:, 1])
    parts = [np.abs(raw), np.abs(raw - 1.0), d, np.abs(d - 1.0), np.abs(xw)[:, None], np.abs(xh)[:, None]]
    return np.min(np.concatenate(parts, axis=1), axis=1)


def kink_free_points(rng: np.random.Generator, n: int, margin: float = 1e-3) -> tuple[np.ndarray, np.ndarray]:
    """``n`` random (param, target) pairs at least ``margin`` away from every kink."""
    ps, ts, have = [], [], 0
    while have < n:
        params = rng.normal(scale=1.5, size=(4 * n, 4))
        c = rng.uniform(0, 1, size=(4 * n, 4))
        targets = np.stack(
            [np.minimum(c[:, 0], c[:, 2]), np.minimum(c[:, 1], c[:, 3]), np.maximum(c[:, 0], c[:, 2]), np.maximum(c[:, 1], c[:, 3])],
            axis=1,
        )
        area = (targets[:, 2] - targets[:, 0]) * (targets[:, 3] - targets[:, 1])
        ok = (kink_margin(params, targets) > margin) & (area > 1e-3)
        ps.append(params[ok])
        ts.append(targets[ok])
        have += int(ok.sum())
    return np.concatenate(ps)[:n], np.concatenate(ts)[:n]


def central_fd(params: np.ndarray, targets: np.ndarray, lam: float, step: float = FD_STEP) -> np.ndarray:
    out = np.zeros_like(params)
    for k in range(4):
        e = np.zeros(4)
        e[k] = step
        hi, _ = loss_and_grad_batch(params + e, targets, lam)
        lo, _ = loss_and_grad_batch(params - e, targets, lam)
        out[:, k] = (hi - lo) / (2 * step)
    return out


def walk_oracle(table: dict[float, float], h0: float, delta: float) -> float:
    """Reference greedy walk over a fully evaluated threshold table."""

    def value(h: float) -> float:
        return table[h] if 0.0 <= h <= 1.0 else -math.inf

    h = round(h0, 10)
    while True:
        left, right = round(h - delta, 10), round(h + delta, 10)
        vm, vl, vr = value(h), value(left), value(right)
        if vr > vm and vr >= vl:
            h = right
        elif vl > vm or (vm == -math.inf and 0.0 <= left):
            h = left
        else:
            return h


def threshold_grid(h0: float, delta: float) -> list[float]:
    """Every threshold reachable from ``h0`` in steps of ``delta`` inside [0, 1]."""
    lo = h0
    while round(lo - delta, 10) >= 0.0:
        lo = round(lo - delta, 10)
    out = []
    h = lo
    while h <= 1.0 + 1e-12:
        out.append(round(h, 10))
        h = round(h + delta, 10)
    return out


def world(junk: float = 0.2, jitter: float = 0.02, n: int = 2000, seed: int = 0, **kw) -> SyntheticWorldConfig:
    return SyntheticWorldConfig(sources=(SourceProfile("tmp", "tmp", jitter, junk),), samples_per_source=n, seed=seed, **kw)


# planted junk 5%, 20%, 20%
THREE_SOURCES = (
    SourceProfile("tmp", "tmp", 0.02, 0.05),
    SourceProfile("rel", "rel", 0.02, 0.2),
    SourceProfile("cap", "cap", 0.02, 0.2),
)
