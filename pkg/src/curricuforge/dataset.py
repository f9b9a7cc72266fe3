"""Pseudo-triplet data model, bundle ingestion, and the synthetic world generator."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, IngestionError, ValidationError
from .geometry import Box, BoxParam, decode_batch

# ---------------------------------------------------------------------------
# data model


@dataclass(frozen=True)
class PseudoSample:
    sample_id: str
    source_id: str
    feature: tuple[float, ...]
    expression: str
    bbox: Box
    entity_count: int | None = None
    image_w: float = 1.0
    image_h: float = 1.0

    @property
    def entities(self) -> int:
        if self.entity_count is not None:
            return self.entity_count
        return entity_count(self.expression)


@dataclass(frozen=True)
class SourceSet:
    source_id: str
    samples: tuple[PseudoSample, ...]
    kind: str = ""

    def __post_init__(self) -> None:
        for s in self.samples:
            if s.source_id != self.source_id:
                raise ValidationError(
                    f"sample {s.sample_id} carries source {s.source_id!r}, expected {self.source_id!r}"
                )

    def __len__(self) -> int:
        return len(self.samples)

    @cached_property
    def ids(self) -> list[str]:
        return [s.sample_id for s in self.samples]

    @cached_property
    def features(self) -> np.ndarray:
        return stack_features(self.samples)

    @cached_property
    def boxes(self) -> np.ndarray:
        return stack_boxes(self.samples)


@dataclass(frozen=True)
class DatasetBundle:
    feature_dim: int
    train_sources: tuple[SourceSet, ...]
    val: tuple[PseudoSample, ...] = ()
    test: tuple[PseudoSample, ...] = ()

    def __post_init__(self) -> None:
        if self.feature_dim < 1:
            raise ValidationError("feature_dim must be >= 1")
        seen: set[str] = set()
        for s in self.all_samples():
            if len(s.feature) != self.feature_dim:
                raise ValidationError(
                    f"sample {s.sample_id}: feature length {len(s.feature)} != {self.feature_dim}"
                )
            if s.sample_id in seen:
                raise ValidationError(f"duplicate sample_id {s.sample_id!r}")
            seen.add(s.sample_id)

    def all_samples(self) -> Iterable[PseudoSample]:
        for src in self.train_sources:
            yield from src.samples
        yield from self.val
        yield from self.test

    def source(self, source_id: str) -> SourceSet:
        for src in self.train_sources:
            if src.source_id == source_id:
                return src
        raise KeyError(f"unknown source {source_id!r}")

    @property
    def source_ids(self) -> list[str]:
        return [s.source_id for s in self.train_sources]

    @cached_property
    def train_index(self) -> dict[str, int]:
        """Row of each train sample in :attr:`train_features` / :attr:`train_boxes`."""
        out: dict[str, int] = {}
        for src in self.train_sources:
            for s in src.samples:
                out[s.sample_id] = len(out)
        return out

    @cached_property
    def train_features(self) -> np.ndarray:
        samples = [s for src in self.train_sources for s in src.samples]
        return stack_features(samples, self.feature_dim)

    @cached_property
    def train_boxes(self) -> np.ndarray:
        samples = [s for src in self.train_sources for s in src.samples]
        return stack_boxes(samples)

    def rows(self, ids: Iterable[str]) -> np.ndarray:
        """Sorted train-matrix rows for ``ids``; the canonical training order."""
        index = self.train_index
        return np.array(sorted(index[i] for i in ids), dtype=np.int64)


def stack_features(samples: Sequence[PseudoSample], dim: int | None = None) -> np.ndarray:
    if not samples:
        return np.zeros((0, dim or 0))
    return np.array([s.feature for s in samples], dtype=float)


def stack_boxes(samples: Sequence[PseudoSample]) -> np.ndarray:
    if not samples:
        return np.zeros((0, 4))
    return np.array([s.bbox.as_tuple() for s in samples], dtype=float)


# ---------------------------------------------------------------------------
# expression complexity

_DETERMINERS = {
    "a", "an", "the", "this", "that", "these", "those", "some", "any", "each",
    "every", "its", "his", "her", "their", "my", "your", "our",
}
_PREPOSITIONS = {
    "of", "on", "in", "at", "to", "with", "by", "from", "for", "into", "onto",
    "over", "under", "beside", "besides", "between", "among", "across", "along",
    "through", "around", "against", "toward", "towards", "about", "beneath",
    "inside", "outside", "upon", "within", "without", "up", "down", "off", "out",
    "beyond", "underneath", "via", "past",
}
_CONJUNCTIONS = {"and", "or", "but", "nor", "yet", "so", "while", "as"}
_SPATIAL = {
    "left", "right", "front", "middle", "bottom", "top", "behind", "near",
    "above", "below", "next",
}
FUNCTION_WORDS = frozenset(_DETERMINERS | _PREPOSITIONS | _CONJUNCTIONS | _SPATIAL)

_TOKEN = re.compile(r"[a-z0-9']+")


def entity_count(expression: str) -> int:
    """Number of maximal runs of content words, at least 1.

    >>> entity_count("man on the left of the woman")
    2
    """
    count = 0
    in_run = False
    for tok in _TOKEN.findall(expression.lower()):
        if tok in FUNCTION_WORDS:
            in_run = False
        elif not in_run:
            count += 1
            in_run = True
    return max(count, 1)


def avg_entities(source: SourceSet) -> float:
    if not source.samples:
        raise ValidationError(f"source {source.source_id!r} is empty")
    return sum(s.entities for s in source.samples) / len(source.samples)


# ---------------------------------------------------------------------------
# bundle file format


def _box_from_record(rec: dict[str, Any], line: int) -> Box:
    bbox = rec["bbox"]
    if not isinstance(bbox, list) or len(bbox) != 4:
        raise IngestionError("bbox must be a list of 4 numbers", line)
    vals = [float(v) for v in bbox]
    if not rec.get("normalized", False):
        w = float(rec.get("image_w", 0))
        h = float(rec.get("image_h", 0))
        if not (w > 0 and h > 0):
            raise IngestionError("pixel boxes need positive image_w and image_h", line)
        vals = [vals[0] / w, vals[1] / h, vals[2] / w, vals[3] / h]
    try:
        return Box(*vals)
    except ValidationError as exc:
        raise IngestionError(f"bad box: {exc}", line) from None


_REQUIRED = ("split", "source_id", "sample_id", "bbox", "expression", "feature")


def load_bundle(path: str | Path) -> DatasetBundle:
    """Read a line-delimited bundle file (header record first)."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    records = [(n, ln) for n, ln in enumerate(lines, start=1) if ln.strip()]
    if not records:
        raise IngestionError("no records")
    n0, first = records[0]
    try:
        header = json.loads(first)
    except json.JSONDecodeError as exc:
        raise IngestionError(f"invalid JSON: {exc.msg}", n0) from None
    if not isinstance(header, dict) or "feature_dim" not in header:
        raise IngestionError("first record must be a header with feature_dim", n0)
    dim = int(header["feature_dim"])
    if dim < 1:
        raise IngestionError("feature_dim must be >= 1", n0)
    kinds: dict[str, str] = {}
    for src in header.get("sources", []):
        if isinstance(src, str):
            kinds[src] = ""
        else:
            kinds[src["source_id"]] = src.get("kind", "")

    train: dict[str, list[PseudoSample]] = {sid: [] for sid in kinds}
    val: list[PseudoSample] = []
    test: list[PseudoSample] = []
    seen: set[str] = set()
    for n, ln in records[1:]:
        try:
            rec = json.loads(ln)
        except json.JSONDecodeError as exc:
            raise IngestionError(f"invalid JSON: {exc.msg}", n) from None
        if not isinstance(rec, dict):
            raise IngestionError("record is not an object", n)
        missing = [k for k in _REQUIRED if k not in rec]
        if missing:
            raise IngestionError(f"missing field(s) {', '.join(missing)}", n)
        feature = rec["feature"]
        if not isinstance(feature, list) or len(feature) != dim:
            got = len(feature) if isinstance(feature, list) else "non-list"
            raise IngestionError(f"feature length {got} != feature_dim {dim}", n)
        feat = tuple(float(v) for v in feature)
        if not all(math.isfinite(v) for v in feat):
            raise IngestionError("non-finite feature value", n)
        sid = str(rec["sample_id"])
        if sid in seen:
            raise IngestionError(f"duplicate sample_id {sid!r}", n)
        seen.add(sid)
        ec = rec.get("entity_count")
        if ec is not None and (not isinstance(ec, int) or ec < 1):
            raise IngestionError("entity_count must be a positive integer", n)
        sample = PseudoSample(
            sample_id=sid,
            source_id=str(rec["source_id"]),
            feature=feat,
            expression=str(rec["expression"]),
            bbox=_box_from_record(rec, n),
            entity_count=ec,
            image_w=float(rec.get("image_w", 1.0)),
            image_h=float(rec.get("image_h", 1.0)),
        )
        split = rec["split"]
        if split == "train":
            if sample.source_id not in train:
                raise IngestionError(f"source {sample.source_id!r} not declared in header", n)
            train[sample.source_id].append(sample)
        elif split == "val":
            val.append(sample)
        elif split == "test":
            test.append(sample)
        else:
            raise IngestionError(f"unknown split {split!r}", n)

    if not seen:
        raise IngestionError("no records")
    sources = tuple(SourceSet(sid, tuple(train[sid]), kinds[sid]) for sid in kinds)
    return DatasetBundle(dim, sources, tuple(val), tuple(test))


def _sample_record(split: str, s: PseudoSample) -> dict[str, Any]:
    rec: dict[str, Any] = {
        "split": split,
        "source_id": s.source_id,
        "sample_id": s.sample_id,
        "image_w": s.image_w,
        "image_h": s.image_h,
        "normalized": True,
        "bbox": list(s.bbox.as_tuple()),
        "expression": s.expression,
        "feature": list(s.feature),
    }
    if s.entity_count is not None:
        rec["entity_count"] = s.entity_count
    return rec


def write_bundle(bundle: DatasetBundle, path: str | Path, config: dict | None = None) -> None:
    header: dict[str, Any] = {
        "feature_dim": bundle.feature_dim,
        "sources": [{"source_id": s.source_id, "kind": s.kind} for s in bundle.train_sources],
    }
    if config is not None:
        header["config"] = config
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for src in bundle.train_sources:
            for s in src.samples:
                fh.write(json.dumps(_sample_record("train", s), sort_keys=True) + "\n")
        for split, samples in (("val", bundle.val), ("test", bundle.test)):
            for s in samples:
                fh.write(json.dumps(_sample_record(split, s), sort_keys=True) + "\n")


def write_manifest(manifest: dict[str, dict], path: str | Path, config: dict | None = None) -> None:
    doc: dict[str, Any] = {"samples": manifest}
    if config is not None:
        doc["config"] = config
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_manifest(path: str | Path) -> dict[str, dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return doc["samples"] if "samples" in doc else doc


# ---------------------------------------------------------------------------
# synthetic world

KIND_ENTITY_WEIGHTS = {
    "tmp": (0.85, 0.15),
    "rel": (0.1, 0.9),
    "cap": (0.0, 0.1, 0.6, 0.3),
}

_NOUNS = ("man", "woman", "boy", "girl", "dog", "cat", "car", "bus", "horse",
          "umbrella", "chair", "table", "bike", "tree", "player", "elephant")
_ATTRS = ("red", "blue", "white", "black", "tall", "small", "young", "striped")
_PARTICIPLES = ("standing", "sitting", "walking", "holding", "riding", "smiling")
_SPATIAL_HEADS = ("left", "right", "front", "middle", "bottom", "top")
_CONNECTORS = (
    "on the left of the", "on the right of a", "next to the", "behind the",
    "near a", "with a", "and the", "above the", "below a", "in front of the",
)


@dataclass(frozen=True)
class SourceProfile:
    source_id: str
    kind: str = "tmp"
    jitter: float = 0.02
    junk: float = 0.0
    entity_weights: tuple[float, ...] | None = None

    def weights(self) -> tuple[float, ...]:
        if self.entity_weights is not None:
            return self.entity_weights
        return KIND_ENTITY_WEIGHTS.get(self.kind, (1.0,))


@dataclass(frozen=True)
class SyntheticWorldConfig:
    feature_dim: int = 8
    samples_per_source: int = 2000
    sources: tuple[SourceProfile, ...] = (SourceProfile("tmp", "tmp", 0.02, 0.2),)
    val_size: int = 500
    test_size: int = 500
    seed: int = 0
    # spread of the hidden map's (cx, cy, w, h) pre-activations, and its bias
    param_scale: tuple[float, float, float, float] = (1.0, 1.0, 1.2, 1.2)
    param_bias: tuple[float, float, float, float] = (0.0, 0.0, -2.0, -2.0)
    image_size: tuple[float, float] = (640.0, 480.0)
    # features whose true box has a side shorter than this are redrawn
    min_side: float = 0.015
    # how far (per axis) a junk lookalike may sit from the true box
    junk_reach: float = 0.05

    def validate(self) -> None:
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be >= 1")
        if self.samples_per_source < 1:
            raise ConfigError("samples_per_source must be >= 1")
        if self.val_size < 0 or self.test_size < 0:
            raise ConfigError("val/test sizes must be >= 0")
        if not self.sources:
            raise ConfigError("at least one source profile is required")
        if not 0.0 <= self.min_side < 0.5:
            raise ConfigError("min_side must lie in [0, 0.5)")
        ids = [p.source_id for p in self.sources]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate source ids in {ids}")
        for p in self.sources:
            if not 0.0 <= p.junk <= 1.0:
                raise ConfigError(f"source {p.source_id}: junk fraction {p.junk} outside [0, 1]")
            if not p.jitter >= 0.0:
                raise ConfigError(f"source {p.source_id}: jitter {p.jitter} must be >= 0")
            w = p.weights()
            if not w or any(x < 0 for x in w) or sum(w) <= 0:
                raise ConfigError(f"source {p.source_id}: bad entity weights {w}")


class SyntheticWorld(NamedTuple):
    bundle: DatasetBundle
    manifest: dict[str, dict]
    weights: np.ndarray  # hidden (4, d) map
    bias: np.ndarray  # hidden (4,) offset


def _noun_phrase(rng: np.random.Generator) -> str:
    words = []
    if rng.random() < 0.5:
        words.append(_ATTRS[rng.integers(len(_ATTRS))])
    words.append(_NOUNS[rng.integers(len(_NOUNS))])
    if rng.random() < 0.3:
        words.append(_PARTICIPLES[rng.integers(len(_PARTICIPLES))])
    return " ".join(words)


def synth_expression(rng: np.random.Generator, k: int, kind: str) -> str:
    """An expression whose heuristic entity count is exactly ``k``."""
    parts = [_noun_phrase(rng)]
    for _ in range(k - 1):
        parts.append(_CONNECTORS[rng.integers(len(_CONNECTORS))])
        parts.append(_noun_phrase(rng))
    body = " ".join(parts)
    if kind == "tmp":
        return f"{_SPATIAL_HEADS[rng.integers(len(_SPATIAL_HEADS))]} {body}"
    if kind == "cap":
        return f"a {body}"
    return body


def _jitter_box(rng: np.random.Generator, box: np.ndarray, sigma: float) -> np.ndarray:
    if sigma == 0.0:
        return box.copy()
    noisy = np.clip(box + rng.normal(0.0, sigma, size=4), 0.0, 1.0)
    xs = np.sort(noisy[[0, 2]])
    ys = np.sort(noisy[[1, 3]])
    return np.array([xs[0], ys[0], xs[1], ys[1]])


def _junk_box(
    rng: np.random.Generator, true_box: np.ndarray, margin: float = 0.05, reach: float = 1.0
) -> np.ndarray:
    """A lookalike: same-sized box clear of ``true_box`` by ``margin``.

    The lookalike is drawn uniformly among placements whose gap to the true
    box is at most ``margin + reach`` on every axis (clipped to the image).
    When no clear placement exists it is shrunk until one does.
    """
    grown = true_box + np.array([-margin, -margin, margin, margin])
    w = true_box[2] - true_box[0]
    h = true_box[3] - true_box[1]
    while True:
        lo_x, hi_x = max(0.0, grown[0] - reach - w), min(1.0 - w, grown[2] + reach)
        lo_y, hi_y = max(0.0, grown[1] - reach - h), min(1.0 - h, grown[3] + reach)
        for _ in range(100):
            x1 = rng.uniform(lo_x, hi_x)
            y1 = rng.uniform(lo_y, hi_y)
            cand = np.array([x1, y1, x1 + w, y1 + h])
            if cand[2] <= grown[0] or cand[0] >= grown[2] or cand[3] <= grown[1] or cand[1] >= grown[3]:
                return cand
        w *= 0.5
        h *= 0.5


def generate_world(cfg: SyntheticWorldConfig) -> SyntheticWorld:
    """Build a seeded world: a hidden linear box map plus noisy pseudo-label sources.

    Clean val/test labels come from the hidden map. Each train source's
    pseudo boxes are the hidden box jittered by the source's ``jitter`` (per
    corner, gaussian); exactly ``floor(junk * N)`` of them are replaced by
    lookalike boxes disjoint from the true one and flagged in the manifest.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    d = cfg.feature_dim
    scale = np.asarray(cfg.param_scale, dtype=float)
    weights = rng.normal(size=(4, d)) * (scale / math.sqrt(d))[:, None]
    bias = np.asarray(cfg.param_bias, dtype=float)
    img_w, img_h = cfg.image_size

    def draw(n: int) -> tuple[np.ndarray, np.ndarray]:
        xs, bs, have = [np.zeros((0, d))], [np.zeros((0, 4))], 0
        while have < n:
            x = rng.normal(size=(n, d))
            b = decode_batch(x @ weights.T + bias)
            ok = np.minimum(b[:, 2] - b[:, 0], b[:, 3] - b[:, 1]) >= cfg.min_side
            xs.append(x[ok])
            bs.append(b[ok])
            have += int(ok.sum())
        return np.concatenate(xs)[:n], np.concatenate(bs)[:n]

    manifest: dict[str, dict] = {}
    sources = []
    for prof in cfg.sources:
        n = cfg.samples_per_source
        x, true_boxes = draw(n)
        junk_idx = set(rng.permutation(n)[: math.floor(prof.junk * n)].tolist())
        w = np.asarray(prof.weights(), dtype=float)
        ks = rng.choice(len(w), size=n, p=w / w.sum()) + 1
        samples = []
        for i in range(n):
            sid = f"{prof.source_id}-{i:05d}"
            is_junk = i in junk_idx
            if is_junk:
                box = _junk_box(rng, true_boxes[i], reach=cfg.junk_reach)
            else:
                box = _jitter_box(rng, true_boxes[i], prof.jitter)
            samples.append(
                PseudoSample(
                    sample_id=sid,
                    source_id=prof.source_id,
                    feature=tuple(float(v) for v in x[i]),
                    expression=synth_expression(rng, int(ks[i]), prof.kind),
                    bbox=Box(*(float(v) for v in box)),
                    image_w=img_w,
                    image_h=img_h,
                )
            )
            manifest[sid] = {"is_junk": is_junk, "true_box": [float(v) for v in true_boxes[i]]}
        sources.append(SourceSet(prof.source_id, tuple(samples), prof.kind))

    def labeled(split: str, n: int) -> tuple[PseudoSample, ...]:
        x, boxes = draw(n)
        kinds = [p.kind for p in cfg.sources]
        out = []
        for i in range(n):
            kind = kinds[i % len(kinds)]
            w = np.asarray(KIND_ENTITY_WEIGHTS.get(kind, (1.0,)))
            k = int(rng.choice(len(w), p=w / w.sum())) + 1
            out.append(
                PseudoSample(
                    sample_id=f"{split}-{i:05d}",
                    source_id=split,
                    feature=tuple(float(v) for v in x[i]),
                    expression=synth_expression(rng, k, kind),
                    bbox=Box(*(float(v) for v in boxes[i])),
                    image_w=img_w,
                    image_h=img_h,
                )
            )
        return tuple(out)

    val = labeled("val", cfg.val_size)
    test = labeled("test", cfg.test_size)
    bundle = DatasetBundle(d, tuple(sources), val, test)
    return SyntheticWorld(bundle, manifest, weights, bias)


def generate_synthetic(cfg: SyntheticWorldConfig) -> DatasetBundle:
    return generate_world(cfg).bundle


def true_param(world: SyntheticWorld, feature: Sequence[float]) -> BoxParam:
    p = world.weights @ np.asarray(feature, dtype=float) + world.bias
    return BoxParam(*(float(v) for v in p))
