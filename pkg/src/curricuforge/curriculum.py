"""Self-paced curriculum loops over reliability-ranked pseudo-labels.

Single-source adapting (:func:`ssa_run`) trains one measurer, ranks its own
source and walks the reliability threshold greedily. Multi-source adapting
(:func:`msa_run`) trains one measurer per source, visits sources from simple
to complex (average entities per expression), picks the best measurer for each
and grows the selected set step by step.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, NamedTuple, Sequence

import numpy as np

from .dataset import DatasetBundle, PseudoSample, SourceSet, avg_entities, stack_boxes, stack_features
from .errors import ConfigError, ValidationError
from .measurer import ToyGroundingModel, TrainConfig, fit_arrays, top1_hits, train_measurer
from .reliability import (
    DEFAULT_BINS,
    ReliabilityHistogram,
    ReliabilitySet,
    build_histogram,
    score_reliability,
    select_subset,
)

NEG_INF = -math.inf
VAL_MODES = ("labeled", "heldout")


@dataclass(frozen=True)
class CurriculumConfig:
    h0: float = 0.5
    delta: float = 0.1
    val_mode: str = "labeled"
    holdout_fraction: float = 0.1
    bins: int = DEFAULT_BINS
    train: TrainConfig = field(default_factory=TrainConfig)
    max_iter: int = 100
    iou_threshold: float = 0.5
    rounds: int = 1
    threads: int = 1

    def validate(self) -> None:
        if not 0.0 <= self.h0 <= 1.0:
            raise ConfigError(f"h0 must lie in [0, 1], got {self.h0}")
        if not 0.0 < self.delta <= 0.5:
            raise ConfigError(f"delta must lie in (0, 0.5], got {self.delta}")
        if self.val_mode not in VAL_MODES:
            raise ConfigError(f"val_mode must be one of {VAL_MODES}, got {self.val_mode!r}")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ConfigError(f"holdout_fraction must lie in (0, 1), got {self.holdout_fraction}")
        if self.bins < 1:
            raise ConfigError("bins must be >= 1")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be >= 1")
        if not 0.0 <= self.iou_threshold <= 1.0:
            raise ConfigError("iou_threshold must lie in [0, 1]")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        self.train.validate()

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "CurriculumConfig":
        d = dict(d)
        if isinstance(d.get("train"), dict):
            d["train"] = TrainConfig(**d["train"])
        return cls(**d)


def grid_point(h: float) -> float:
    """Snap accumulated float steps (0.1 + 0.2 ...) onto the decimal grid."""
    return round(h, 10) + 0.0


def in_range(h: float) -> bool:
    return 0.0 <= h <= 1.0


# ---------------------------------------------------------------------------
# candidate evaluation

Evaluator = Callable[[Iterable[str], float], "tuple[float, ToyGroundingModel | None]"]


class Workspace(NamedTuple):
    """Per-run view of the bundle: trainable pools and the validation arrays."""

    pools: dict[str, SourceSet]
    val_features: np.ndarray
    val_boxes: np.ndarray


def prepare(bundle: DatasetBundle, cfg: CurriculumConfig) -> Workspace:
    """Resolve the validation split and the per-source training pools.

    In ``heldout`` mode a seeded ``holdout_fraction`` slice of every train
    source is set aside and its pseudo boxes serve as validation labels.
    """
    pools = {s.source_id: s for s in bundle.train_sources}
    if cfg.val_mode == "labeled":
        if not bundle.val:
            raise ValidationError("bundle has no labeled validation split")
        return Workspace(pools, stack_features(bundle.val), stack_boxes(bundle.val))
    rng = np.random.default_rng(cfg.train.seed)
    held: list[PseudoSample] = []
    for sid, src in list(pools.items()):
        n = len(src.samples)
        k = max(1, int(round(cfg.holdout_fraction * n))) if n > 1 else 0
        hold = set(rng.permutation(n)[:k].tolist())
        held.extend(src.samples[i] for i in sorted(hold))
        pools[sid] = SourceSet(sid, tuple(s for i, s in enumerate(src.samples) if i not in hold), src.kind)
    if not held:
        raise ValidationError("held-out validation slice is empty")
    return Workspace(pools, stack_features(held), stack_boxes(held))


class CandidateEvaluator:
    """Trains a fresh model on a set of ids and scores it on validation top-1.

    Results are cached by training set, so thresholds that select the same
    samples are trained once. ``trainings`` counts actual fits.
    """

    def __init__(self, bundle: DatasetBundle, cfg: CurriculumConfig, ws: Workspace):
        self.bundle = bundle
        self.cfg = cfg
        self.ws = ws
        self.trainings = 0
        self._cache: dict[bytes, tuple[float, ToyGroundingModel | None]] = {}

    def __call__(self, ids: Iterable[str], threshold: float) -> tuple[float, ToyGroundingModel | None]:
        rows = self.bundle.rows(ids)
        key = rows.tobytes()
        if key in self._cache:
            return self._cache[key]
        if len(rows) == 0:
            out: tuple[float, ToyGroundingModel | None] = (NEG_INF, None)
        else:
            model = fit_arrays(self.bundle.train_features[rows], self.bundle.train_boxes[rows], self.cfg.train)
            self.trainings += 1
            hits = top1_hits(model, self.ws.val_features, self.ws.val_boxes, self.cfg.iou_threshold)
            out = (int(hits.sum()) / len(hits), model)
        self._cache[key] = out
        return out


# ---------------------------------------------------------------------------
# greedy threshold search


@dataclass
class SearchOutcome:
    threshold: float
    model: ToyGroundingModel | None
    evaluations: dict[float, float]
    visited: list[float]

    @property
    def score(self) -> float:
        return self.evaluations[self.threshold]


def greedy_walk(
    score: Callable[[float], float],
    h0: float,
    delta: float,
    max_iter: int = 100,
    known: dict[float, float] | None = None,
    prefetch: Callable[[list[float]], None] | None = None,
) -> tuple[float, dict[float, float], list[float]]:
    """Move ``h`` to the strictly better neighbour ``h +/- delta`` until neither improves.

    Out-of-range neighbours score ``-inf``. When both neighbours beat ``h`` by
    the same amount the higher threshold wins. From an empty selection
    (``-inf``) with no better neighbour the walk steps down. ``score`` is
    called at most once per threshold.
    """
    evals: dict[float, float] = dict(known or {})
    visited: list[float] = []

    def get(h: float) -> float:
        if not in_range(h):
            return NEG_INF
        if h not in evals:
            evals[h] = score(h)
            visited.append(h)
        return evals[h]

    hm = grid_point(h0)
    for _ in range(max_iter):
        hl, hr = grid_point(hm - delta), grid_point(hm + delta)
        if prefetch is not None:
            prefetch([h for h in (hm, hl, hr) if in_range(h) and h not in evals])
        sm, sl, sr = get(hm), get(hl), get(hr)
        if max(sl, sr) > sm:
            hm = hr if sr >= sl else hl
        elif sm == NEG_INF and in_range(hl):
            hm = hl  # nothing selected yet; only lower thresholds can add samples
        else:
            break
    return hm, evals, visited


def greedy_threshold_search(
    hist: ReliabilityHistogram,
    base: Iterable[str],
    bundle: DatasetBundle,
    cfg: CurriculumConfig,
    evaluator: Evaluator | None = None,
    known: dict[float, tuple[float, ToyGroundingModel | None]] | None = None,
) -> SearchOutcome:
    """Greedy search for the threshold ``h`` maximising validation top-1 of a
    model trained on ``base | select_subset(hist, h)``."""
    cfg.validate()
    if evaluator is None:
        evaluator = CandidateEvaluator(bundle, cfg, prepare(bundle, cfg))
    base = frozenset(base)
    known = known or {}
    models = {h: model for h, (_, model) in known.items()}
    pending: dict[float, tuple[float, ToyGroundingModel | None]] = {}

    def run(h: float) -> tuple[float, ToyGroundingModel | None]:
        return evaluator(base | select_subset(hist, h), h)

    def score(h: float) -> float:
        acc, models[h] = pending.pop(h) if h in pending else run(h)
        return acc

    def prefetch(hs: list[float]) -> None:
        # the (up to three) candidates of one step are independent
        if len(hs) > 1:
            with ThreadPoolExecutor(max_workers=min(cfg.threads, len(hs))) as pool:
                pending.update(zip(hs, pool.map(run, hs)))

    seed_scores = {h: acc for h, (acc, _) in known.items()}
    h_star, evals, visited = greedy_walk(
        score, cfg.h0, cfg.delta, cfg.max_iter, seed_scores, prefetch if cfg.threads > 1 else None
    )
    return SearchOutcome(h_star, models.get(h_star), evals, visited)


def sweep_grid(delta: float, top: float = 0.9) -> list[float]:
    """Thresholds ``top, top - delta, ..., 0`` (descending, inclusive of 0)."""
    n = int(round(top / delta))
    return [grid_point(top - k * delta) for k in range(n)] + [0.0]


def pr_sweep(
    hist: ReliabilityHistogram,
    base: Iterable[str],
    bundle: DatasetBundle,
    cfg: CurriculumConfig,
    evaluator: Evaluator | None = None,
    top: float = 0.9,
) -> list[tuple[float, int, float]]:
    """Exhaustive threshold sweep: ``(h, selected count, val top-1)`` per grid point."""
    cfg.validate()
    if evaluator is None:
        evaluator = CandidateEvaluator(bundle, cfg, prepare(bundle, cfg))
    base = frozenset(base)
    rows = []
    for h in sweep_grid(cfg.delta, top):
        subset = select_subset(hist, h)
        acc, _ = evaluator(base | subset, h)
        rows.append((h, len(subset), acc))
    return rows


# ---------------------------------------------------------------------------
# results


@dataclass
class StepLog:
    source_id: str
    measurer_id: str
    measurer_index: int
    threshold: float
    evaluations: dict[float, float]
    measurer_scores: list[float] = field(default_factory=list)
    added: int = 0
    total: int = 0

    def to_dict(self) -> dict[str, Any]:
        def clean(v: float) -> float | None:
            return None if v == NEG_INF else v

        return {
            "source_id": self.source_id,
            "measurer_id": self.measurer_id,
            "measurer_index": self.measurer_index,
            "threshold": self.threshold,
            "evaluations": [
                {"threshold": h, "val_top1": clean(v)} for h, v in sorted(self.evaluations.items(), reverse=True)
            ],
            "measurer_scores": [clean(v) for v in self.measurer_scores],
            "added": self.added,
            "total": self.total,
        }


@dataclass
class SelectionResult:
    selected: list[str]
    steps: list[StepLog]
    model: ToyGroundingModel | None
    source_order: list[str] = field(default_factory=list)
    measurers: dict[str, ToyGroundingModel] = field(default_factory=dict)
    reliabilities: dict[tuple[str, str], ReliabilitySet] = field(default_factory=dict)
    # per step: the histogram thresholded and the selection it was added to
    histograms: list[ReliabilityHistogram] = field(default_factory=list)
    bases: list[frozenset[str]] = field(default_factory=list)
    trainings: int = 0

    @property
    def thresholds(self) -> list[float]:
        return [s.threshold for s in self.steps]

    def to_dict(self) -> dict[str, Any]:
        return {
            "source_order": self.source_order,
            "steps": [s.to_dict() for s in self.steps],
            "selected_count": len(self.selected),
            "selected_ids": self.selected,
        }


def write_result(result: SelectionResult, path: str | Path, extra: dict[str, Any] | None = None) -> dict[str, Any]:
    doc = dict(extra or {})
    doc.update(result.to_dict())
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return doc


def _canonical(bundle: DatasetBundle, ids: Iterable[str]) -> list[str]:
    index = bundle.train_index
    return sorted(ids, key=index.__getitem__)


# ---------------------------------------------------------------------------
# single source


def ssa_run(
    source: SourceSet | str,
    bundle: DatasetBundle,
    cfg: CurriculumConfig,
    evaluator: Evaluator | None = None,
) -> SelectionResult:
    """Measure, rank and greedily threshold one pseudo-label source."""
    cfg.validate()
    ws = prepare(bundle, cfg)
    sid = source if isinstance(source, str) else source.source_id
    pool = ws.pools[sid]
    if not pool.samples:
        raise ValidationError(f"source {sid!r} is empty")
    ev = evaluator or CandidateEvaluator(bundle, cfg, ws)

    measurer = train_measurer(pool, cfg.train)
    measurers = {sid: measurer}
    steps: list[StepLog] = []
    rsets: dict[tuple[str, str], ReliabilitySet] = {}
    selected: set[str] = set()
    model: ToyGroundingModel | None = None
    current = measurer
    hists: list[ReliabilityHistogram] = []
    for _ in range(cfg.rounds):
        rset = score_reliability(current, pool, sid)
        rsets[(sid, sid)] = rset
        hist = build_histogram(rset, cfg.bins)
        hists.append(hist)
        outcome = greedy_threshold_search(hist, (), bundle, cfg, ev)
        selected = select_subset(hist, outcome.threshold)
        model = outcome.model
        steps.append(
            StepLog(sid, sid, 0, outcome.threshold, outcome.evaluations, added=len(selected), total=len(selected))
        )
        if model is None:
            break
        # later rounds re-measure with the improved model
        current = model
    return SelectionResult(
        selected=_canonical(bundle, selected),
        steps=steps,
        model=model,
        source_order=[sid],
        measurers=measurers,
        reliabilities=rsets,
        histograms=hists,
        bases=[frozenset()] * len(hists),
        trainings=getattr(ev, "trainings", 0),
    )


# ---------------------------------------------------------------------------
# multi source


def order_sources(sources: Sequence[SourceSet]) -> list[SourceSet]:
    """Ascending average entities per expression; ties keep input order."""
    for s in sources:
        if not s.samples:
            raise ValidationError(f"source {s.source_id!r} is empty")
    return sorted(sources, key=avg_entities)


class MeasurerChoice(NamedTuple):
    index: int
    histogram: ReliabilityHistogram
    scores: list[float]
    model: ToyGroundingModel | None


def select_measurer(
    measurers: Sequence[Any],
    source_j: SourceSet,
    base: Iterable[str],
    bundle: DatasetBundle,
    cfg: CurriculumConfig,
    evaluator: Evaluator | None = None,
    histograms: Sequence[ReliabilityHistogram] | None = None,
) -> MeasurerChoice:
    """Pick the measurer whose ``h0`` subset of ``source_j`` helps validation most.

    Ties go to the smallest index.
    """
    cfg.validate()
    if not measurers:
        raise ValidationError("at least one measurer is required")
    if evaluator is None:
        evaluator = CandidateEvaluator(bundle, cfg, prepare(bundle, cfg))
    if histograms is None:
        histograms = [
            build_histogram(score_reliability(m, source_j, str(i)), cfg.bins) for i, m in enumerate(measurers)
        ]
    base = frozenset(base)
    h0 = grid_point(cfg.h0)
    scores: list[float] = []
    models: list[ToyGroundingModel | None] = []
    for hist in histograms:
        acc, model = evaluator(base | select_subset(hist, h0), h0)
        scores.append(acc)
        models.append(model)
    best = max(range(len(scores)), key=lambda i: (scores[i], -i))
    return MeasurerChoice(best, histograms[best], scores, models[best])


def msa_run(
    sources: Sequence[SourceSet] | None,
    bundle: DatasetBundle,
    cfg: CurriculumConfig,
    order: Sequence[str] | None = None,
    evaluator: Evaluator | None = None,
) -> SelectionResult:
    """Multi-source curriculum; ``order`` overrides the entity-based source order."""
    cfg.validate()
    ws = prepare(bundle, cfg)
    if sources is None:
        sources = bundle.train_sources
    ids = [s.source_id for s in sources]
    if not ids:
        raise ValidationError("at least one source is required")
    pools = [ws.pools[sid] for sid in ids]
    ev = evaluator or CandidateEvaluator(bundle, cfg, ws)

    measurers = [train_measurer(p, cfg.train) for p in pools]
    rsets: dict[tuple[str, str], ReliabilitySet] = {}
    hists: dict[tuple[int, int], ReliabilityHistogram] = {}
    for i, m in enumerate(measurers):
        for j, p in enumerate(pools):
            r = score_reliability(m, p, ids[i])
            rsets[(ids[i], ids[j])] = r
            hists[(i, j)] = build_histogram(r, cfg.bins)

    if order is not None:
        unknown = [o for o in order if o not in ids]
        if unknown or len(set(order)) != len(ids) or len(order) != len(ids):
            raise ConfigError(f"order {list(order)} must be a permutation of {ids}")
        visit = [ids.index(o) for o in order]
    else:
        ranked = order_sources(pools)
        visit = [ids.index(p.source_id) for p in ranked]

    selected: set[str] = set()
    steps: list[StepLog] = []
    model: ToyGroundingModel | None = None
    chosen: list[ReliabilityHistogram] = []
    bases: list[frozenset[str]] = []
    h0 = grid_point(cfg.h0)
    for j in visit:
        column = [hists[(i, j)] for i in range(len(measurers))]
        choice = select_measurer(measurers, pools[j], selected, bundle, cfg, ev, column)
        known = {h0: (choice.scores[choice.index], choice.model)}
        chosen.append(choice.histogram)
        bases.append(frozenset(selected))
        outcome = greedy_threshold_search(choice.histogram, selected, bundle, cfg, ev, known)
        added = select_subset(choice.histogram, outcome.threshold) - selected
        if outcome.model is not None:
            selected |= added
            model = outcome.model
        steps.append(
            StepLog(
                source_id=ids[j],
                measurer_id=ids[choice.index],
                measurer_index=choice.index,
                threshold=outcome.threshold,
                evaluations=outcome.evaluations,
                measurer_scores=choice.scores,
                added=len(added) if outcome.model is not None else 0,
                total=len(selected),
            )
        )
    return SelectionResult(
        selected=_canonical(bundle, selected),
        steps=steps,
        model=model,
        source_order=[ids[j] for j in visit],
        measurers=dict(zip(ids, measurers)),
        reliabilities=rsets,
        histograms=chosen,
        bases=bases,
        trainings=getattr(ev, "trainings", 0),
    )


# ---------------------------------------------------------------------------
# comparison baselines


def train_on_ids(bundle: DatasetBundle, ids: Iterable[str], cfg: CurriculumConfig) -> ToyGroundingModel:
    rows = bundle.rows(ids)
    if len(rows) == 0:
        raise ValidationError("cannot train on an empty selection")
    return fit_arrays(bundle.train_features[rows], bundle.train_boxes[rows], cfg.train)


def stacking_baseline(bundle: DatasetBundle, cfg: CurriculumConfig, sources: Sequence[str] | None = None) -> ToyGroundingModel:
    """Train on every pseudo-label of the given sources, unfiltered."""
    ws = prepare(bundle, cfg)
    sources = list(sources) if sources is not None else list(ws.pools)
    ids = [sid for s in sources for sid in ws.pools[s].ids]
    return train_on_ids(bundle, ids, cfg)


def resolve_threads(flag: int | None) -> int:
    if flag is not None:
        return flag
    env = os.environ.get("CURRICUFORGE_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"CURRICUFORGE_THREADS must be an integer, got {env!r}") from None
    return 1
