import numpy as np
import pytest

from curricuforge.dataset import PseudoSample, SourceSet, generate_world
from curricuforge.errors import ConfigError, CoverageError, IngestionError, ValidationError
from curricuforge.geometry import Box, iou
from curricuforge.measurer import ExternalScores, ToyGroundingModel, TrainConfig, predict, train_measurer
from curricuforge.reliability import (
    ReliabilitySet,
    build_histogram,
    histogram_l1,
    read_reliability,
    score_reliability,
    select_subset,
    subset_count,
    write_histogram_csv,
    write_reliability,
    zero_proportion,
)

from helpers import world

EXAMPLE = ReliabilitySet("m", "s", ["a", "b", "c", "d"], [0.0, 0.3, 0.55, 1.0])


@pytest.mark.parametrize(
    "threshold, expected",
    [(0.0, {"a", "b", "c", "d"}), (0.3, {"b", "c", "d"}), (0.5, {"c", "d"}), (0.56, {"d"}), (1.0, {"d"})],
)
def test_select_subset_examples(threshold, expected):
    h = build_histogram(EXAMPLE, 10)
    assert select_subset(h, threshold) == expected
    assert subset_count(h, threshold) == len(expected)


def test_histogram_counts_and_zero():
    h = build_histogram(EXAMPLE, 10)
    assert h.counts == [1, 0, 0, 1, 0, 1, 0, 0, 0, 1]
    assert h.zero_count == 1
    assert h.total == 4


@pytest.mark.parametrize("m", [1, 3, 10, 1000])
def test_selection_is_independent_of_bin_count(m):
    h = build_histogram(EXAMPLE, m)
    assert sum(h.counts) == 4
    assert select_subset(h, 0.31) == {"c", "d"}


def test_empty_set():
    h = build_histogram(ReliabilitySet("m", "s", [], []), 5)
    assert h.counts == [0] * 5
    assert select_subset(h, 0.5) == set()


@pytest.mark.parametrize("m", [0, -1, 2.5])
def test_bad_bin_count(m):
    with pytest.raises(ConfigError):
        build_histogram(EXAMPLE, m)


@pytest.mark.parametrize("t", [-0.1, 1.1, float("nan")])
def test_bad_threshold(t):
    h = build_histogram(EXAMPLE, 10)
    with pytest.raises(ValidationError):
        select_subset(h, t)


@pytest.mark.parametrize("values", [[1.2], [-0.1], [float("nan")]])
def test_reliability_values_checked(values):
    with pytest.raises(ValidationError):
        ReliabilitySet("m", "s", ["a"], values)


def test_random_sets_nest():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(0, 200))
        vals = np.where(rng.random(n) < 0.2, 0.0, rng.random(n))
        h = build_histogram(ReliabilitySet("m", "s", [str(i) for i in range(n)], vals), int(rng.integers(1, 50)))
        assert sum(h.counts) == n
        assert subset_count(h, 0.0) == n
        prev = select_subset(h, 0.0)
        for t in np.linspace(0.05, 1.0, 20):
            cur = select_subset(h, float(t))
            assert cur <= prev
            assert cur == {str(i) for i in range(n) if vals[i] >= t}
            prev = cur


def _source(boxes):
    samples = tuple(PseudoSample(f"s{i}", "s", (float(i),), "x", Box(*b)) for i, b in enumerate(boxes))
    return SourceSet("s", samples)


def test_identity_and_disjoint_measurers():
    # a zero model predicts the centre box for every input
    centre = (0.25, 0.25, 0.75, 0.75)
    m = ToyGroundingModel.zeros(1)
    same = score_reliability(m, _source([centre] * 3))
    assert same.values.tolist() == [1.0, 1.0, 1.0]
    corner = score_reliability(m, _source([(0.0, 0.0, 0.1, 0.1), (0.8, 0.8, 1.0, 1.0)]))
    assert corner.values.tolist() == [0.0, 0.0]


def test_scores_match_scalar_iou():
    w = generate_world(world(n=300))
    src = w.bundle.train_sources[0]
    m = train_measurer(src, TrainConfig(epochs=3))
    r = score_reliability(m, src, "tmp")
    assert r.source_specific
    for s, v in list(zip(src.samples, r.values))[:50]:
        assert v == pytest.approx(iou(predict(m, s.feature), s.bbox), abs=1e-12)


def test_external_scores_must_cover_source():
    src = _source([(0.1, 0.1, 0.2, 0.2)] * 2)
    with pytest.raises(CoverageError):
        score_reliability(ExternalScores({"s0": 0.5}), src)
    r = score_reliability(ExternalScores({"s0": 0.5, "s1": 0.0}), src)
    assert r.values.tolist() == [0.5, 0.0]


def test_junk_concentrates_at_low_reliability():
    w = generate_world(world(junk=0.3, n=2000))
    src = w.bundle.train_sources[0]
    r = score_reliability(train_measurer(src, TrainConfig()), src, "tmp")
    chosen = select_subset(build_histogram(r), 0.5)
    junk = sum(w.manifest[sid]["is_junk"] for sid in chosen)
    assert junk / len(chosen) < 0.1


def test_reliability_file_round_trip(tmp_path):
    p = tmp_path / "r.jsonl"
    write_reliability(EXAMPLE, p, provenance={"seed": 1})
    back = read_reliability(p)
    assert (back.measurer_id, back.source_id, back.ids) == ("m", "s", EXAMPLE.ids)
    assert np.array_equal(back.values, EXAMPLE.values)


def test_reliability_file_errors(tmp_path):
    p = tmp_path / "r.jsonl"
    p.write_text('{"sample_id": "a", "value": 0.1}\n{"sample": "b"}\n')
    with pytest.raises(IngestionError) as exc:
        read_reliability(p)
    assert exc.value.line == 2
    p.write_text('{"sample_id": "a", "value": 3}\n')
    with pytest.raises(IngestionError):
        read_reliability(p)


def test_histogram_csv(tmp_path):
    p = tmp_path / "h.csv"
    write_histogram_csv(build_histogram(EXAMPLE, 4), p, provenance={"seed": 0})
    lines = p.read_text().splitlines()
    assert lines[0].startswith("# run_config=")
    assert lines[1] == "bin_lo,bin_hi,count"
    assert lines[2:6] == ["0.0,0.25,1", "0.25,0.5,1", "0.5,0.75,1", "0.75,1.0,1"]
    assert lines[-1] == "zero_count,,1"


def test_histogram_l1_and_zero_proportion():
    other = ReliabilitySet("m2", "s2", ["a", "b"], [0.0, 0.0])
    assert histogram_l1(build_histogram(EXAMPLE, 10), build_histogram(other, 10)) == 4
    with pytest.raises(ValidationError):
        histogram_l1(build_histogram(EXAMPLE, 10), build_histogram(other, 5))
    assert zero_proportion([EXAMPLE, other]) == {"s": 0.25, "s2": 1.0}
