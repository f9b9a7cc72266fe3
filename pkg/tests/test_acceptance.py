"""Acceptance criteria, one test each, at their stated tolerances.

Each test prints a ``[criterion N] PASS/FAIL`` line. Run the file directly
(``python3 tests/test_acceptance.py``) or through pytest.
"""

import json
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from curricuforge.cli import main as cli
from curricuforge.curriculum import (
    CurriculumConfig,
    greedy_threshold_search,
    msa_run,
    ssa_run,
    stacking_baseline,
)
from curricuforge.dataset import SyntheticWorldConfig, generate_world
from curricuforge.geometry import Box, giou, iou, loss_and_grad_batch
from curricuforge.measurer import TrainConfig, evaluate_top1, train_measurer
from curricuforge.reliability import ReliabilitySet, build_histogram, score_reliability, select_subset, subset_count

sys.path.insert(0, str(Path(__file__).parent))
from helpers import THREE_SOURCES, central_fd, kink_free_points, threshold_grid, walk_oracle, world  # noqa: E402

SEEDS = range(5)


def verdict(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


def cfg_for(seed):
    return CurriculumConfig(train=TrainConfig(seed=seed))


def val_top1(model, bundle):
    return evaluate_top1(model, bundle.val)


# ---------------------------------------------------------------------------


def test_criterion_1_geometry_oracles(capsys):
    t0 = time.perf_counter()
    a, b = Box(0.0, 0.0, 0.2, 0.2), Box(0.1, 0.1, 0.3, 0.3)
    small, far = Box(0.0, 0.0, 0.1, 0.1), Box(0.2, 0.2, 0.3, 0.3)
    hand = [
        abs(iou(a, b) - 1 / 7),
        abs(giou(small, far) + 7 / 9),
        abs(giou(a, b) + 5 / 63),
    ]
    params, targets = kink_free_points(np.random.default_rng(0), 1000)
    _, grad = loss_and_grad_batch(params, targets, 1.0)
    fd = central_fd(params, targets, 1.0)
    rel = np.linalg.norm(grad - fd, axis=1) / np.maximum(np.linalg.norm(fd, axis=1), 1e-12)
    dt = time.perf_counter() - t0
    ok = max(hand) < 1e-12 and rel.max() < 1e-4 and dt < 10
    verdict(capsys, 1, ok, f"hand-case error {max(hand):.1e}, max FD rel error {rel.max():.1e} over 1000 points, {dt:.1f}s")


def test_criterion_2_histogram_conservation(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    bad = 0
    for _ in range(10_000):
        n = int(rng.integers(0, 60))
        vals = rng.random(n)
        vals[rng.random(n) < 0.2] = 0.0
        vals[rng.random(n) < 0.05] = 1.0
        h = build_histogram(ReliabilitySet("m", "s", [str(i) for i in range(n)], vals), int(rng.integers(1, 1001)))
        ts = np.sort(rng.random(3))
        subsets = [select_subset(h, float(t)) for t in ts]
        ok = (
            sum(h.counts) == n
            and subset_count(h, 0.0) == n
            and subsets[0] >= subsets[1] >= subsets[2]
            and all(len(s) == subset_count(h, float(t)) for s, t in zip(subsets, ts))
        )
        bad += not ok
    dt = time.perf_counter() - t0
    verdict(capsys, 2, bad == 0 and dt < 10, f"{bad} violations over 10^4 random sets, {dt:.1f}s")


class _Stub:
    def __init__(self, table):
        self.table = table
        self.trainings = 0

    def __call__(self, ids, threshold):
        self.trainings += 1
        return self.table[threshold], object()


def test_criterion_3_greedy_matches_oracle(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    hist = build_histogram(ReliabilitySet("m", "s", ["a"], [0.5]), 10)
    mismatches, over = 0, 0
    for _ in range(100):
        delta = float(rng.choice([0.05, 0.1, 0.2, 0.25]))
        h0 = float(rng.choice(threshold_grid(0.5, delta)))
        grid = threshold_grid(h0, delta)
        table = {h: float(v) for h, v in zip(grid, rng.integers(0, 6, len(grid)) / 5)}
        stub = _Stub(table)
        out = greedy_threshold_search(hist, (), None, CurriculumConfig(h0=h0, delta=delta), stub)
        mismatches += out.threshold != walk_oracle(table, h0, delta)
        over += stub.trainings > math.ceil(1 / delta) + 2
    dt = time.perf_counter() - t0
    ok = mismatches == 0 and over == 0 and dt < 10
    verdict(capsys, 3, ok, f"{mismatches} threshold mismatches, {over} over the training budget, 100 tables, {dt:.1f}s")


@pytest.fixture(scope="module")
def ssa_runs():
    """SSA and baseline on the rho=0.2, sigma=0.02 world, five seeds."""
    t0 = time.perf_counter()
    rows = []
    for s in SEEDS:
        w = generate_world(world(junk=0.2, jitter=0.02, n=2000, seed=s))
        cfg = cfg_for(s)
        res = ssa_run("tmp", w.bundle, cfg)
        base = val_top1(stacking_baseline(w.bundle, cfg), w.bundle)
        junk = sum(w.manifest[i]["is_junk"] for i in res.selected) / len(res.selected)
        rows.append((base, val_top1(res.model, w.bundle), junk))
    return rows, time.perf_counter() - t0


def test_criterion_4_ssa_gain(capsys, ssa_runs):
    rows, dt = ssa_runs
    gains = [100 * (ssa - base) for base, ssa, _ in rows]
    med = float(np.median(gains))
    ok = med >= 2.0 and dt < 180
    verdict(capsys, 4, ok, f"median SSA gain {med:.1f} points over baseline (per seed {np.round(gains, 1).tolist()}), {dt:.0f}s")


def test_criterion_5_junk_filtering(capsys, ssa_runs):
    t0 = time.perf_counter()
    rows, dt4 = ssa_runs
    junk = [j for _, _, j in rows]
    planted = [0.05, 0.2, 0.2]
    worst = 0.0
    for s in range(3):
        w = generate_world(SyntheticWorldConfig(sources=THREE_SOURCES, seed=s))
        for src, p in zip(w.bundle.train_sources, planted):
            r = score_reliability(train_measurer(src, TrainConfig(seed=s)), src, src.source_id)
            worst = max(worst, abs(float(np.mean(r.values == 0.0)) - p))
    dt = time.perf_counter() - t0 + dt4
    ok = max(junk) < 0.1 * 0.2 and 100 * worst <= 2.0 and dt < 180
    verdict(
        capsys, 5, ok,
        f"max selected junk fraction {max(junk):.3f} (< 0.02), zero-reliability off planted 5/20/20% by at most {100 * worst:.2f} points, {dt:.0f}s",
    )


def test_criterion_6_msa_vs_stacking(capsys):
    t0 = time.perf_counter()
    over_stack, over_ssa = [], []
    for s in SEEDS:
        b = generate_world(SyntheticWorldConfig(sources=THREE_SOURCES, seed=s)).bundle
        cfg = cfg_for(s)
        msa = val_top1(msa_run(None, b, cfg).model, b)
        stack = val_top1(stacking_baseline(b, cfg), b)
        best = max(val_top1(ssa_run(sid, b, cfg).model, b) for sid in b.source_ids)
        over_stack.append(100 * (msa - stack))
        over_ssa.append(100 * (msa - best))
    dt = time.perf_counter() - t0
    med = float(np.median(over_stack))
    med_ssa = float(np.median(over_ssa))
    ok = med >= 2.0 and med_ssa >= -0.5 and dt < 600
    verdict(
        capsys, 6, ok,
        f"MSA - stacking median {med:.1f} points {np.round(over_stack, 1).tolist()}, "
        f"MSA - best SSA median {med_ssa:.1f} points, {dt:.0f}s",
    )


ORDER_WORLD = dict(kinds="tmp,rel,cap", jitter="0.02,0.03,0.04", junk="0.1,0.3,0.5", samples="1000")
ORDERS = ["tmp,rel,cap", "cap,rel,tmp", "rel,tmp,cap", "tmp,cap,rel"]


def _gen(path, seed, **kw):
    argv = ["gen", "--out", str(path), "--seed", str(seed)]
    for k, v in kw.items():
        argv += [f"--{k.replace('_', '-')}", str(v)]
    assert cli(argv) == 0


def _doc(path):
    return json.loads(Path(path).read_text())


def test_criterion_7_curriculum_order(capsys, tmp_path):
    t0 = time.perf_counter()
    scores = {o: [] for o in ORDERS}
    for s in range(3):
        bundle = tmp_path / f"w{s}.jsonl"
        _gen(bundle, s, **ORDER_WORLD)
        for k, o in enumerate(ORDERS):
            out = tmp_path / f"r{s}_{k}.json"
            code = cli(["msa", "--bundle", str(bundle), "--seed", str(s), "--order", o, "--out", str(out),
                        "--checkpoint", str(tmp_path / "m.ckpt")])
            assert code == 0
            scores[o].append(_doc(out)["val_top1"])
    med = {o: float(np.median(v)) for o, v in scores.items()}
    dt = time.perf_counter() - t0
    ok = all(med[ORDERS[0]] >= med[o] for o in ORDERS[1:]) and dt < 900
    verdict(capsys, 7, ok, "median val top-1 " + ", ".join(f"{o.replace(',', '-')} {v:.3f}" for o, v in med.items()) + f", {dt:.0f}s")


def test_criterion_8_pr_shape(capsys, tmp_path):
    t0 = time.perf_counter()
    details, ok = [], True
    for s in range(3):
        bundle = tmp_path / f"w{s}.jsonl"
        _gen(bundle, s, sources=1, junk=0.5)
        result = tmp_path / f"ssa{s}.json"
        assert cli(["ssa", "--bundle", str(bundle), "--seed", str(s), "--out", str(result),
                    "--checkpoint", str(tmp_path / "m.ckpt")]) == 0
        prefix = tmp_path / f"rep{s}"
        assert cli(["report", "--result", str(result), "--bundle", str(bundle), "--prefix", str(prefix)]) == 0
        lines = (prefix / "pr_curve.csv").read_text().splitlines()[2:]
        curve = {float(r[3]): (float(r[5]) if r[5] else -math.inf) for r in (ln.split(",") for ln in lines)}
        best_h = max(curve, key=lambda h: (curve[h], h))
        drop = 100 * (curve[best_h] - curve[0.0])
        ok &= drop >= 3.0 and 0.0 < best_h < 0.9
        details.append(f"seed {s}: argmax h={best_h:g}, h=0 below max by {drop:.1f} points")
    dt = time.perf_counter() - t0
    ok &= dt < 180
    verdict(capsys, 8, ok, "; ".join(details) + f", {dt:.0f}s")


def test_criterion_9_determinism(capsys, tmp_path):
    t0 = time.perf_counter()
    bundle = tmp_path / "w.jsonl"
    _gen(bundle, 0)
    outs = []
    for k in range(2):
        d = tmp_path / f"run{k}"
        assert cli(["msa", "--bundle", str(bundle), "--out-dir", str(d)]) == 0
        outs.append(((d / "msa_result.json").read_bytes(), (d / "msa_model.ckpt").read_bytes()))
    dt = time.perf_counter() - t0
    ok = outs[0] == outs[1] and dt < 600
    verdict(capsys, 9, ok, f"result and checkpoint byte-identical across two msa runs: {outs[0] == outs[1]}, {dt:.0f}s")


def test_criterion_10_degenerate_reductions(capsys):
    t0 = time.perf_counter()
    b = generate_world(world(junk=0.2, seed=0)).bundle
    cfg = cfg_for(0)
    single = msa_run([b.source("tmp")], b, cfg)
    ssa = ssa_run("tmp", b, cfg)
    same = single.selected == ssa.selected and single.thresholds == ssa.thresholds
    gap = 0.0
    for jitter in (0.02, 0.0):
        clean = generate_world(world(junk=0.0, jitter=jitter, seed=0)).bundle
        ssa_acc = val_top1(ssa_run("tmp", clean, cfg).model, clean)
        gap = max(gap, 100 * abs(ssa_acc - val_top1(stacking_baseline(clean, cfg), clean)))
    dt = time.perf_counter() - t0
    ok = same and gap <= 1.0 and dt < 180
    verdict(capsys, 10, ok, f"n=1 MSA == SSA: {same} (h*={ssa.thresholds}); rho=0 SSA vs baseline gap {gap:.1f} points (sigma 0.02 and 0), {dt:.0f}s")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
