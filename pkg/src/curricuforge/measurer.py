"""Reliability measurers: a toy linear box regressor and imported score tables."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .dataset import PseudoSample, SourceSet, stack_boxes, stack_features
from .errors import ConfigError, CoverageError, IngestionError, TrainingError, UnsupportedOperation, ValidationError
from .geometry import Box, decode_batch, iou_batch, loss_and_grad_batch

OPTIMIZERS = ("sgd", "momentum")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    epochs: int = 30
    batch_size: int = 64
    lam: float = 1.0
    seed: int = 0
    optimizer: str = "momentum"
    momentum: float = 0.9
    cosine: bool = True
    init_bias: bool = True

    def validate(self) -> None:
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


class MeasurerHandle:
    """Common base of :class:`ToyGroundingModel` and :class:`ExternalScores`."""

    kind = "abstract"


@dataclass(eq=False)
class ToyGroundingModel(MeasurerHandle):
    """``feature -> decode(weights @ feature + bias)``."""

    weights: np.ndarray  # (4, d)
    bias: np.ndarray  # (4,)
    seed: int = 0
    epochs: int = 0
    final_loss: float = math.nan
    loss_history: list[float] = field(default_factory=list)
    config: TrainConfig | None = None

    kind = "trained"

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float)
        if self.weights.ndim != 2 or self.weights.shape[0] != 4 or self.bias.shape != (4,):
            raise ValidationError("model weights must be (4, d) with a (4,) bias")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValidationError("model weights must be finite")

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def zeros(cls, d: int) -> "ToyGroundingModel":
        return cls(np.zeros((4, d)), np.zeros(4))

    def predict_batch(self, features: np.ndarray) -> np.ndarray:
        x = np.asarray(features, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.feature_dim:
            raise ValidationError(
                f"feature dimension mismatch: got {x.shape[-1]}, model expects {self.feature_dim}"
            )
        return decode_batch(x @ self.weights.T + self.bias)

    def same_weights(self, other: "ToyGroundingModel") -> bool:
        return np.array_equal(self.weights, other.weights) and np.array_equal(self.bias, other.bias)


@dataclass(eq=False)
class ExternalScores(MeasurerHandle):
    scores: dict[str, float]
    name: str = "external"

    kind = "external"

    def lookup(self, sample_id: str) -> float:
        try:
            return self.scores[sample_id]
        except KeyError:
            raise CoverageError(f"external score table has no entry for {sample_id!r}") from None


# ---------------------------------------------------------------------------
# training


def _mean_box_param(boxes: np.ndarray) -> np.ndarray:
    """Pre-activation whose decoded box is the mean target box."""
    cx = np.median(0.5 * (boxes[:, 0] + boxes[:, 2]))
    cy = np.median(0.5 * (boxes[:, 1] + boxes[:, 3]))
    w = np.median(boxes[:, 2] - boxes[:, 0])
    h = np.median(boxes[:, 3] - boxes[:, 1])
    v = np.clip([cx, cy, w, h], 0.01, 0.99)
    return np.log(v / (1.0 - v))


def fit_arrays(features: np.ndarray, boxes: np.ndarray, cfg: TrainConfig) -> ToyGroundingModel:
    """Mini-batch descent on the mean grounding loss over ``(features, boxes)``."""
    cfg.validate()
    x = np.asarray(features, dtype=float)
    t = np.asarray(boxes, dtype=float)
    n, d = x.shape
    if n == 0:
        raise ValidationError("cannot train on an empty sample set")
    xa = np.hstack([x, np.ones((n, 1))])
    w = np.zeros((4, d + 1))
    if cfg.init_bias:
        w[:, d] = _mean_box_param(t)
    vel = np.zeros_like(w)
    mu = cfg.momentum if cfg.optimizer == "momentum" else 0.0
    rng = np.random.default_rng(cfg.seed)
    bs = min(cfg.batch_size, n)
    steps = math.ceil(n / bs)
    total = cfg.epochs * steps
    history: list[float] = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        running = 0.0
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            xb = xa[idx]
            with np.errstate(over="ignore", invalid="ignore"):
                z = xb @ w.T
            if not np.all(np.isfinite(z)):
                raise TrainingError("non-finite pre-activation (learning rate too high?)", epoch)
            loss, g = loss_and_grad_batch(z, t[idx], cfg.lam)
            running += float(loss.sum())
            grad = g.T @ xb / len(idx)
            lr = cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / total)) if cfg.cosine else cfg.lr
            if mu:
                vel = mu * vel + grad
                w = w - lr * vel
            else:
                w = w - lr * grad
            step += 1
        epoch_loss = running / n
        if not (math.isfinite(epoch_loss) and np.all(np.isfinite(w))):
            raise TrainingError("non-finite training loss", epoch)
        history.append(epoch_loss)
    return ToyGroundingModel(
        weights=w[:, :d].copy(),
        bias=w[:, d].copy(),
        seed=cfg.seed,
        epochs=cfg.epochs,
        final_loss=history[-1],
        loss_history=history,
        config=cfg,
    )


def train_on_samples(samples: Sequence[PseudoSample], cfg: TrainConfig, dim: int | None = None) -> ToyGroundingModel:
    if not samples:
        raise ValidationError("cannot train on an empty sample set")
    return fit_arrays(stack_features(samples, dim), stack_boxes(samples), cfg)


def train_measurer(source: SourceSet, cfg: TrainConfig) -> ToyGroundingModel:
    if not source.samples:
        raise ValidationError(f"source {source.source_id!r} is empty")
    return fit_arrays(source.features, source.boxes, cfg)


# ---------------------------------------------------------------------------
# inference


def _require_trained(m: MeasurerHandle) -> ToyGroundingModel:
    if not isinstance(m, ToyGroundingModel):
        raise UnsupportedOperation("external score tables cannot predict boxes")
    return m


def predict(m: MeasurerHandle, feature: Sequence[float]) -> Box:
    model = _require_trained(m)
    x = np.asarray(feature, dtype=float)
    if x.ndim != 1:
        raise ValidationError("predict takes a single feature vector")
    return Box(*(float(v) for v in model.predict_batch(x[None, :])[0]))


def top1_hits(m: MeasurerHandle, features: np.ndarray, boxes: np.ndarray, iou_threshold: float = 0.5) -> np.ndarray:
    model = _require_trained(m)
    return iou_batch(model.predict_batch(features), boxes) >= iou_threshold


def evaluate_top1(m: MeasurerHandle, labeled: Sequence[PseudoSample], iou_threshold: float = 0.5) -> float:
    """Fraction of ``labeled`` whose predicted box reaches ``iou_threshold`` IoU."""
    if not labeled:
        raise ValidationError("cannot evaluate on an empty sample list")
    hits = top1_hits(m, stack_features(labeled), stack_boxes(labeled), iou_threshold)
    return int(hits.sum()) / len(labeled)


# ---------------------------------------------------------------------------
# files


def import_external_scores(path: str | Path) -> ExternalScores:
    """Read line-delimited ``{"sample_id": ..., "value": ...}`` records."""
    scores: dict[str, float] = {}
    for n, ln in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not ln.strip():
            continue
        try:
            rec = json.loads(ln)
        except json.JSONDecodeError as exc:
            raise IngestionError(f"invalid JSON: {exc.msg}", n) from None
        if isinstance(rec, dict) and "run_config" in rec:
            continue
        if isinstance(rec, list) and len(rec) == 2:
            sid, value = rec
        elif isinstance(rec, dict) and "sample_id" in rec and "value" in rec:
            sid, value = rec["sample_id"], rec["value"]
        else:
            raise IngestionError("expected {sample_id, value}", n)
        try:
            value = float(value)
        except (TypeError, ValueError):
            raise IngestionError(f"non-numeric reliability {value!r}", n) from None
        if not 0.0 <= value <= 1.0:
            raise IngestionError(f"reliability {value} outside [0, 1]", n)
        sid = str(sid)
        if sid in scores:
            raise IngestionError(f"duplicate sample_id {sid!r}", n)
        scores[sid] = value
    return ExternalScores(scores, name=Path(path).name)


def save_checkpoint(model: ToyGroundingModel, path: str | Path, run_config: dict | None = None) -> None:
    """Header line of JSON metadata, then one row of weights per line, bias last."""
    header = {
        "d": model.feature_dim,
        "seed": model.seed,
        "epochs": model.epochs,
        "final_loss": model.final_loss,
        "cfg": model.config.to_dict() if model.config else None,
    }
    if run_config is not None:
        header["run_config"] = run_config
    lines = [json.dumps(header, sort_keys=True)]
    for row in model.weights:
        lines.append(" ".join(repr(float(v)) for v in row))
    lines.append(" ".join(repr(float(v)) for v in model.bias))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def load_checkpoint(path: str | Path) -> ToyGroundingModel:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if len(lines) < 6:
        raise IngestionError("truncated checkpoint")
    header = json.loads(lines[0])
    rows = [[float(v) for v in ln.split()] for ln in lines[1:6]]
    d = int(header["d"])
    if any(len(r) != d for r in rows[:4]) or len(rows[4]) != 4:
        raise IngestionError("checkpoint rows do not match the declared dimension")
    cfg = TrainConfig(**header["cfg"]) if header.get("cfg") else None
    return ToyGroundingModel(
        weights=np.array(rows[:4]),
        bias=np.array(rows[4]),
        seed=int(header.get("seed", 0)),
        epochs=int(header.get("epochs", 0)),
        final_loss=float(header.get("final_loss", math.nan)),
        config=cfg,
    )
