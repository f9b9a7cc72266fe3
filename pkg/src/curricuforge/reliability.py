"""Reliability scoring, reliability histograms and the threshold subset operator."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .dataset import SourceSet
from .errors import ConfigError, IngestionError, ValidationError
from .geometry import iou_batch
from .measurer import ExternalScores, MeasurerHandle, ToyGroundingModel

DEFAULT_BINS = 1000


@dataclass
class ReliabilitySet:
    """Reliability of every sample of one source under one measurer.

    ``measurer_id == source_id`` is source-specific reliability, anything else
    is cross-source.
    """

    measurer_id: str
    source_id: str
    ids: list[str]
    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float)
        if len(self.ids) != len(self.values):
            raise ValidationError("ids and values differ in length")
        if len(self.values) and (
            not np.all(np.isfinite(self.values)) or self.values.min() < 0.0 or self.values.max() > 1.0
        ):
            raise ValidationError("reliability values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.ids)

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.ids, self.values.tolist()))

    @property
    def source_specific(self) -> bool:
        return self.measurer_id == self.source_id


def score_reliability(m: MeasurerHandle, source: SourceSet, measurer_id: str = "measurer") -> ReliabilitySet:
    """IoU between the measurer's prediction and each pseudo box (table lookup for external scores)."""
    if isinstance(m, ExternalScores):
        values = np.array([m.lookup(sid) for sid in source.ids], dtype=float)
    elif isinstance(m, ToyGroundingModel):
        if not source.samples:
            values = np.zeros(0)
        else:
            values = iou_batch(m.predict_batch(source.features), source.boxes)
    else:
        raise TypeError(f"unsupported measurer handle {type(m).__name__}")
    return ReliabilitySet(measurer_id, source.source_id, list(source.ids), values)


@dataclass
class ReliabilityHistogram:
    """``m`` uniform bins over [0, 1]; ``[lo, hi)`` except the last, which is closed.

    Bins hold sample ids and raw values are kept, so selection is exact and
    independent of ``m``.
    """

    m: int
    bins: list[list[str]]
    values: dict[str, float]
    zero_count: int
    measurer_id: str = ""
    source_id: str = ""
    _bin_values: list[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def counts(self) -> list[int]:
        return [len(b) for b in self.bins]

    @property
    def total(self) -> int:
        return len(self.values)

    def edges(self) -> list[tuple[float, float]]:
        return [(k / self.m, (k + 1) / self.m) for k in range(self.m)]

    def bin_of(self, value: float) -> int:
        return min(int(math.floor(value * self.m)), self.m - 1)


def build_histogram(rset: ReliabilitySet, m: int = DEFAULT_BINS) -> ReliabilityHistogram:
    if not isinstance(m, int) or m < 1:
        raise ConfigError(f"bin count must be a positive integer, got {m!r}")
    vals = rset.values
    idx = np.minimum(np.floor(vals * m).astype(np.int64), m - 1) if len(vals) else np.zeros(0, np.int64)
    bins: list[list[str]] = [[] for _ in range(m)]
    bin_values: list[list[float]] = [[] for _ in range(m)]
    for sid, k, v in zip(rset.ids, idx.tolist(), vals.tolist()):
        bins[k].append(sid)
        bin_values[k].append(v)
    return ReliabilityHistogram(
        m=m,
        bins=bins,
        values=rset.as_dict(),
        zero_count=int(np.count_nonzero(vals == 0.0)),
        measurer_id=rset.measurer_id,
        source_id=rset.source_id,
        _bin_values=[np.asarray(b, dtype=float) for b in bin_values],
    )


def _check_threshold(threshold: float) -> None:
    if not (isinstance(threshold, (int, float)) and 0.0 <= threshold <= 1.0):
        raise ValidationError(f"threshold must lie in [0, 1], got {threshold!r}")


def select_subset(h: ReliabilityHistogram, threshold: float) -> set[str]:
    """Ids whose reliability lies in ``[threshold, 1.0]``."""
    _check_threshold(threshold)
    first = h.bin_of(threshold)
    out: set[str] = set()
    ids, vals = h.bins[first], h._bin_values[first]
    out.update(sid for sid, keep in zip(ids, vals >= threshold) if keep)
    for k in range(first + 1, h.m):
        out.update(h.bins[k])
    return out


def subset_count(h: ReliabilityHistogram, threshold: float) -> int:
    _check_threshold(threshold)
    first = h.bin_of(threshold)
    count = int(np.count_nonzero(h._bin_values[first] >= threshold))
    return count + sum(len(h.bins[k]) for k in range(first + 1, h.m))


# ---------------------------------------------------------------------------
# exports


def write_histogram_csv(h: ReliabilityHistogram, path: str | Path, provenance: dict | None = None) -> None:
    lines = []
    if provenance is not None:
        lines.append("# run_config=" + json.dumps(provenance, sort_keys=True))
    lines.append("bin_lo,bin_hi,count")
    for (lo, hi), c in zip(h.edges(), h.counts):
        lines.append(f"{lo!r},{hi!r},{c}")
    lines.append(f"zero_count,,{h.zero_count}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def write_reliability(rset: ReliabilitySet, path: str | Path, provenance: dict | None = None) -> None:
    """One ``{sample_id, value}`` record per line, after an optional ``{run_config}`` line."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if provenance is not None:
            head = {"run_config": provenance, "measurer_id": rset.measurer_id, "source_id": rset.source_id}
            fh.write(json.dumps(head, sort_keys=True) + "\n")
        for sid, v in zip(rset.ids, rset.values.tolist()):
            fh.write(json.dumps({"sample_id": sid, "value": v}) + "\n")


def read_reliability(path: str | Path, measurer_id: str = "", source_id: str = "") -> ReliabilitySet:
    ids: list[str] = []
    values: list[float] = []
    for n, ln in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not ln.strip():
            continue
        try:
            rec = json.loads(ln)
            if isinstance(rec, dict) and "run_config" in rec:
                measurer_id = measurer_id or str(rec.get("measurer_id", ""))
                source_id = source_id or str(rec.get("source_id", ""))
                continue
            ids.append(str(rec["sample_id"]))
            values.append(float(rec["value"]))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError):
            raise IngestionError("expected {sample_id, value}", n) from None
    try:
        return ReliabilitySet(measurer_id, source_id, ids, np.array(values))
    except ValidationError as exc:
        raise IngestionError(str(exc)) from None


def histogram_l1(a: ReliabilityHistogram, b: ReliabilityHistogram) -> int:
    if a.m != b.m:
        raise ValidationError("histograms have different bin counts")
    return sum(abs(x - y) for x, y in zip(a.counts, b.counts))


def zero_proportion(rsets: Iterable[ReliabilitySet]) -> dict[str, float]:
    return {r.source_id: float(np.mean(r.values == 0.0)) if len(r) else 0.0 for r in rsets}
