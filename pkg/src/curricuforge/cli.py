"""Command-line entry point: ``curricuforge <command> [flags]``.

Every command resolves one run configuration (defaults < ``--config`` JSON
file < flags) before doing any work, and writes it into each artifact.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure during training.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .curriculum import (
    CurriculumConfig,
    SelectionResult,
    msa_run,
    pr_sweep,
    resolve_threads,
    ssa_run,
    write_result,
)
from .dataset import (
    DatasetBundle,
    SourceProfile,
    SyntheticWorldConfig,
    generate_world,
    load_bundle,
    load_manifest,
    write_bundle,
    write_manifest,
)
from .errors import ConfigError, CurricuForgeError, DataError
from .measurer import (
    TrainConfig,
    evaluate_top1,
    import_external_scores,
    load_checkpoint,
    save_checkpoint,
    train_measurer,
)
from .reliability import (
    build_histogram,
    read_reliability,
    score_reliability,
    write_histogram_csv,
    write_reliability,
)

DEFAULT_KINDS = ("tmp", "rel", "cap")

# section -> key -> default; keys double as flag names (underscores -> dashes)
TRAIN_KEYS = {
    "lr": 0.05,
    "epochs": 30,
    "batch_size": 64,
    "lam": 1.0,
    "optimizer": "momentum",
    "momentum": 0.9,
}
CURRICULUM_KEYS = {
    "h0": 0.5,
    "delta": 0.1,
    "val_mode": "labeled",
    "holdout_fraction": 0.1,
    "bins": 1000,
    "max_iter": 100,
    "iou_threshold": 0.5,
    "rounds": 1,
}
WORLD_KEYS = {
    "sources": None,
    "kinds": None,
    "junk": "0.2",
    "jitter": "0.02",
    "samples": 2000,
    "dim": 8,
    "val_size": 500,
    "test_size": 500,
    "min_side": SyntheticWorldConfig.min_side,
    "junk_reach": SyntheticWorldConfig.junk_reach,
}


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse exits 2 by default
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# configuration


def _load_config_file(path: str | None) -> dict[str, Any]:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object")
    allowed = {"seed", "threads", "out_dir", "train", "curriculum", "world"}
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    for section, keys in (("train", TRAIN_KEYS), ("curriculum", CURRICULUM_KEYS), ("world", WORLD_KEYS)):
        extra = sorted(set(doc.get(section, {})) - set(keys))
        if extra:
            raise ConfigError(f"unknown {section} key(s): {', '.join(extra)}")
    return doc


class Resolver:
    """Looks a setting up in the flags, then the config file, then the defaults."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.file = _load_config_file(getattr(args, "config", None))

    def get(self, key: str, default: Any = None, section: str | None = None) -> Any:
        value = getattr(self.args, key, None)
        if value is not None:
            return value
        src = self.file.get(section, {}) if section else self.file
        if key in src:
            return src[key]
        return default

    def section(self, name: str, keys: dict[str, Any]) -> dict[str, Any]:
        return {k: self.get(k, d, name) for k, d in keys.items()}

    @property
    def seed(self) -> int:
        return int(self.get("seed", 0))

    @property
    def threads(self) -> int:
        return resolve_threads(self.get("threads"))

    @property
    def out_dir(self) -> Path:
        return Path(self.get("out_dir", "."))

    def out(self, path: str | None, default: str) -> Path:
        p = Path(path if path is not None else default)
        return p if p.is_absolute() else self.out_dir / p

    def train_config(self) -> TrainConfig:
        try:
            cfg = TrainConfig(seed=self.seed, **self.section("train", TRAIN_KEYS))
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        cfg.validate()
        return cfg

    def curriculum_config(self) -> CurriculumConfig:
        cfg = CurriculumConfig(
            train=self.train_config(), threads=self.threads, **self.section("curriculum", CURRICULUM_KEYS)
        )
        cfg.validate()
        return cfg


def _floats(text: Any, name: str) -> list[float]:
    if isinstance(text, (int, float)):
        return [float(text)]
    if isinstance(text, list):
        items = text
    else:
        items = [t for t in str(text).split(",") if t.strip()]
    try:
        return [float(t) for t in items]
    except ValueError:
        raise ConfigError(f"--{name} expects comma-separated numbers, got {text!r}") from None


def _names(text: Any) -> list[str]:
    if text is None:
        return []
    if isinstance(text, list):
        return [str(t) for t in text]
    return [t.strip() for t in str(text).split(",") if t.strip()]


def _broadcast(values: list[float], n: int, name: str) -> list[float]:
    if len(values) == 1:
        return values * n
    if len(values) != n:
        raise ConfigError(f"--{name} lists {len(values)} values for {n} sources")
    return values


def world_config(r: Resolver) -> SyntheticWorldConfig:
    w = r.section("world", WORLD_KEYS)
    kinds = _names(w["kinds"])
    junk = _floats(w["junk"], "junk")
    jitter = _floats(w["jitter"], "jitter")
    n = w["sources"]
    if n is None:
        n = len(kinds) or max(len(junk), len(jitter))
    n = int(n)
    if n < 1:
        raise ConfigError("--sources must be >= 1")
    if not kinds:
        kinds = [DEFAULT_KINDS[i % len(DEFAULT_KINDS)] for i in range(n)]
    if len(kinds) != n:
        raise ConfigError(f"--kinds lists {len(kinds)} kinds for {n} sources")
    junk = _broadcast(junk, n, "junk")
    jitter = _broadcast(jitter, n, "jitter")
    ids = kinds if len(set(kinds)) == n else [f"{k}{i}" for i, k in enumerate(kinds)]
    profiles = tuple(SourceProfile(ids[i], kinds[i], jitter[i], junk[i]) for i in range(n))
    cfg = SyntheticWorldConfig(
        feature_dim=int(w["dim"]),
        samples_per_source=int(w["samples"]),
        sources=profiles,
        val_size=int(w["val_size"]),
        test_size=int(w["test_size"]),
        seed=r.seed,
        min_side=float(w["min_side"]),
        junk_reach=float(w["junk_reach"]),
    )
    cfg.validate()
    return cfg


def _provenance(args: argparse.Namespace, r: Resolver, **sections: Any) -> dict[str, Any]:
    doc: dict[str, Any] = {"command": args.command, "seed": r.seed, "version": __version__}
    doc.update(sections)
    return doc


def _write_json(path: Path, doc: dict[str, Any]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _load_bundle(path: str) -> DatasetBundle:
    try:
        return load_bundle(path)
    except FileNotFoundError:
        raise DataError(f"bundle file not found: {path}") from None


def _pick_source(bundle: DatasetBundle, source: str | None) -> str:
    if source is None:
        if len(bundle.train_sources) != 1:
            raise ConfigError(f"--source is required; the bundle has sources {bundle.source_ids}")
        return bundle.source_ids[0]
    if source not in bundle.source_ids:
        raise DataError(f"unknown source {source!r}; the bundle has {bundle.source_ids}")
    return source


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args: argparse.Namespace, r: Resolver) -> int:
    cfg = world_config(r)
    world = generate_world(cfg)
    out = r.out(args.out, "")
    manifest = r.out(args.manifest, str(out.with_name(out.stem + ".manifest.json")))
    prov = _provenance(args, r, world=_world_dict(cfg))
    out.parent.mkdir(parents=True, exist_ok=True)
    write_bundle(world.bundle, out, prov)
    write_manifest(world.manifest, manifest, prov)
    print(f"wrote {out} ({sum(len(s) for s in world.bundle.train_sources)} train samples) and {manifest}")
    return 0


def _world_dict(cfg: SyntheticWorldConfig) -> dict[str, Any]:
    return asdict(cfg)


def cmd_train_measurer(args: argparse.Namespace, r: Resolver) -> int:
    bundle = _load_bundle(args.bundle)
    sid = _pick_source(bundle, args.source)
    tcfg = r.train_config()
    model = train_measurer(bundle.source(sid), tcfg)
    out = r.out(args.out, f"measurer_{sid}.ckpt")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out, _provenance(args, r, bundle=args.bundle, source=sid, train=tcfg.to_dict()))
    print(f"trained measurer on {sid}: final loss {model.final_loss:.6f} -> {out}")
    return 0


def cmd_score(args: argparse.Namespace, r: Resolver) -> int:
    if (args.measurer is None) == (args.external is None):
        raise UsageError("give exactly one of --measurer or --external")
    bundle = _load_bundle(args.bundle)
    sid = _pick_source(bundle, args.source)
    path = args.measurer or args.external
    try:
        handle = load_checkpoint(path) if args.measurer else import_external_scores(path)
    except FileNotFoundError:
        raise DataError(f"file not found: {path}") from None
    mid = args.measurer_id or Path(path).stem
    rset = score_reliability(handle, bundle.source(sid), mid)
    out = r.out(args.out, f"reliability_{mid}__{sid}.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_reliability(rset, out, _provenance(args, r, bundle=args.bundle, source=sid, measurer=path))
    zeros = int((rset.values == 0.0).sum())
    print(f"scored {len(rset)} samples of {sid} with {mid}: {zeros} at r=0 -> {out}")
    return 0


def cmd_hist(args: argparse.Namespace, r: Resolver) -> int:
    try:
        rset = read_reliability(args.reliability)
    except FileNotFoundError:
        raise DataError(f"reliability file not found: {args.reliability}") from None
    bins = int(r.get("bins", CURRICULUM_KEYS["bins"], "curriculum"))
    hist = build_histogram(rset, bins)
    out = r.out(args.out, Path(args.reliability).stem + ".hist.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_histogram_csv(hist, out, _provenance(args, r, reliability=args.reliability, bins=bins))
    print(f"{hist.total} values in {bins} bins, zero_count {hist.zero_count} -> {out}")
    return 0


def _result_doc(
    args: argparse.Namespace, r: Resolver, mode: str, bundle: DatasetBundle, res: SelectionResult, cfg: CurriculumConfig, sources: list[str]
) -> dict[str, Any]:
    prov = _provenance(args, r, bundle=args.bundle, sources=sources, curriculum=_curriculum_dict(cfg))
    doc: dict[str, Any] = {"run_config": prov, "mode": mode, "thresholds": res.thresholds}
    if res.model is not None and bundle.val:
        doc["val_top1"] = evaluate_top1(res.model, bundle.val, cfg.iou_threshold)
    if res.model is not None and bundle.test:
        doc["test_top1"] = evaluate_top1(res.model, bundle.test, cfg.iou_threshold)
    return doc


def _curriculum_dict(cfg: CurriculumConfig) -> dict[str, Any]:
    d = cfg.to_dict()
    d.pop("threads")  # execution detail, never changes results
    return d


def _finish_selection(args: argparse.Namespace, r: Resolver, res: SelectionResult, doc: dict, stem: str) -> int:
    out = r.out(args.out, f"{stem}_result.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_result(res, out, doc)
    if res.model is None:
        raise DataError("no candidate selected any sample; no model to save")
    ckpt = r.out(args.checkpoint, f"{stem}_model.ckpt")
    save_checkpoint(res.model, ckpt, doc["run_config"])
    summary = ", ".join(f"{s.source_id}<-{s.measurer_id}@{s.threshold:g}" for s in res.steps)
    print(f"{stem}: {summary}; {len(res.selected)} selected; val top-1 {doc.get('val_top1')} -> {out}, {ckpt}")
    return 0


def cmd_ssa(args: argparse.Namespace, r: Resolver) -> int:
    cfg = r.curriculum_config()
    bundle = _load_bundle(args.bundle)
    sid = _pick_source(bundle, args.source)
    res = ssa_run(sid, bundle, cfg)
    doc = _result_doc(args, r, "ssa", bundle, res, cfg, [sid])
    return _finish_selection(args, r, res, doc, "ssa")


def cmd_msa(args: argparse.Namespace, r: Resolver) -> int:
    cfg = r.curriculum_config()
    bundle = _load_bundle(args.bundle)
    sources = _names(args.sources) or bundle.source_ids
    for s in sources:
        _pick_source(bundle, s)
    order = _names(args.order) or None
    res = msa_run([bundle.source(s) for s in sources], bundle, cfg, order=order)
    doc = _result_doc(args, r, "msa", bundle, res, cfg, sources)
    doc["run_config"]["order"] = order
    return _finish_selection(args, r, res, doc, "msa")


def cmd_eval(args: argparse.Namespace, r: Resolver) -> int:
    bundle = _load_bundle(args.bundle)
    try:
        model = load_checkpoint(args.checkpoint)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {args.checkpoint}") from None
    samples = bundle.val if args.split == "val" else bundle.test
    if not samples:
        raise DataError(f"bundle has no {args.split} split")
    thr = float(r.get("iou_threshold", CURRICULUM_KEYS["iou_threshold"], "curriculum"))
    acc = evaluate_top1(model, samples, thr)
    doc = {
        "run_config": _provenance(args, r, bundle=args.bundle, checkpoint=args.checkpoint, split=args.split, iou_threshold=thr),
        "top1": acc,
        "n": len(samples),
    }
    if args.out is not None:
        _write_json(r.out(args.out, ""), doc)
    print(f"{args.split} top-1@{thr:g}: {acc:.4f} ({len(samples)} samples)")
    return 0


def _csv(path: Path, header: str, rows: list[str], prov: dict) -> None:
    lines = ["# run_config=" + json.dumps(prov, sort_keys=True), header, *rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def _fmt(v: float) -> str:
    return "" if v == float("-inf") else repr(float(v))


def cmd_report(args: argparse.Namespace, r: Resolver) -> int:
    try:
        doc = json.loads(Path(args.result).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"result file not found: {args.result}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"result file is not valid JSON: {exc.msg}") from None
    bundle = _load_bundle(args.bundle)
    try:
        run = doc["run_config"]
        mode = doc["mode"]
        selected = doc["selected_ids"]
        cfg = CurriculumConfig.from_dict({**run["curriculum"], "threads": r.threads})
        sources = run["sources"]
    except (KeyError, TypeError) as exc:
        raise DataError(f"result file lacks field {exc}") from None
    cfg.validate()
    known = bundle.train_index
    missing = [i for i in selected if i not in known]
    if missing or any(s not in bundle.source_ids for s in sources):
        raise DataError(f"result and bundle do not match: {len(missing)} selected id(s) absent from the bundle")

    # the run is deterministic, so replaying it recovers measurers and histograms
    if mode == "ssa":
        res = ssa_run(sources[0], bundle, cfg)
    else:
        res = msa_run([bundle.source(s) for s in sources], bundle, cfg, order=run.get("order"))
    if res.selected != selected:
        raise DataError("result does not match a replay on this bundle (id mismatch)")

    out = r.out(args.prefix, "report")
    out.mkdir(parents=True, exist_ok=True)
    prov = _provenance(args, r, result=args.result, bundle=args.bundle, manifest=args.manifest, source_run=run)
    prov["seed"] = run.get("seed", prov["seed"])
    written = []

    for (mid, sid), rset in sorted(res.reliabilities.items()):
        path = out / f"hist_{mid}__{sid}.csv"
        write_histogram_csv(build_histogram(rset, cfg.bins), path, prov)
        written.append(path)

    rows = []
    for k, (step, hist, base) in enumerate(zip(res.steps, res.histograms, res.bases)):
        for h, count, acc in pr_sweep(hist, base, bundle, cfg):
            rows.append(f"{k},{step.source_id},{step.measurer_id},{h!r},{count},{_fmt(acc)}")
    path = out / "pr_curve.csv"
    _csv(path, "step,source_id,measurer_id,threshold,selected,val_top1", rows, prov)
    written.append(path)

    rows = []
    for sid in sources:
        rset = res.reliabilities[(sid, sid)]
        zeros = int((rset.values == 0.0).sum())
        rows.append(f"{sid},{sid},{len(rset)},{zeros},{zeros / len(rset)!r}")
    path = out / "zero_reliability.csv"
    _csv(path, "source_id,measurer_id,n,zero_count,proportion", rows, prov)
    written.append(path)

    if args.manifest is not None:
        try:
            manifest = load_manifest(args.manifest)
        except FileNotFoundError:
            raise DataError(f"manifest not found: {args.manifest}") from None
        chosen = set(selected)
        rows = []
        for sid in sources:
            ids = bundle.source(sid).ids
            if any(i not in manifest for i in ids):
                raise DataError(f"manifest does not cover source {sid!r}")
            junk = [i for i in ids if manifest[i]["is_junk"]]
            kept = sum(1 for i in junk if i in chosen)
            sel = sum(1 for i in ids if i in chosen)
            excluded = (len(junk) - kept) / len(junk) if junk else 1.0
            frac = kept / sel if sel else 0.0
            rows.append(f"{sid},{len(ids)},{len(junk)},{sel},{kept},{excluded!r},{frac!r}")
        path = out / "junk_recall.csv"
        _csv(path, "source_id,n,junk,selected,junk_selected,junk_excluded,junk_fraction_selected", rows, prov)
        written.append(path)

    print(f"wrote {len(written)} report files to {out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _global_flags(p: argparse.ArgumentParser, default: Any) -> None:
    p.add_argument("--config", default=default, help="JSON file with seed/threads/out_dir and train/curriculum/world sections")
    p.add_argument("--seed", type=int, default=default)
    p.add_argument("--threads", type=int, default=default, help="worker threads (fallback: $CURRICUFORGE_THREADS)")
    p.add_argument("--out-dir", dest="out_dir", default=default, help="directory for relative output paths")


def _train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--lr", type=float)
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--lam", type=float, help="GIoU weight in the grounding loss")
    g.add_argument("--optimizer", choices=("sgd", "momentum"))
    g.add_argument("--momentum", type=float)


def _curriculum_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("curriculum")
    g.add_argument("--h0", type=float, help="initial threshold (0.5 for pseudo labels, 0.2 fully supervised)")
    g.add_argument("--delta", type=float, help="greedy step")
    g.add_argument("--val-mode", dest="val_mode", choices=("labeled", "heldout"))
    g.add_argument("--holdout-fraction", dest="holdout_fraction", type=float)
    g.add_argument("--bins", type=int)
    g.add_argument("--max-iter", dest="max_iter", type=int)
    g.add_argument("--iou-threshold", dest="iou_threshold", type=float)
    g.add_argument("--rounds", type=int, help="single-source passes, re-measuring with the previous model")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="curricuforge", description="Reliability-driven curriculum selection of pseudo labels.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _global_flags(parser, None)
    common = _Parser(add_help=False)
    _global_flags(common, argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic world bundle and junk manifest")
    p.add_argument("--out", required=True, help="bundle path")
    p.add_argument("--manifest", help="manifest path (default: <out>.manifest.json)")
    p.add_argument("--sources", type=int, help="number of sources")
    p.add_argument("--kinds", help="comma-separated source kinds (tmp, rel, cap)")
    p.add_argument("--junk", help="junk fraction per source, comma-separated")
    p.add_argument("--jitter", help="box jitter per source, comma-separated")
    p.add_argument("--samples", type=int, help="samples per source")
    p.add_argument("--dim", type=int, help="feature dimension")
    p.add_argument("--val-size", dest="val_size", type=int)
    p.add_argument("--test-size", dest="test_size", type=int)
    p.add_argument("--min-side", dest="min_side", type=float)
    p.add_argument("--junk-reach", dest="junk_reach", type=float)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train-measurer", parents=[common], help="train a reliability measurer on one source")
    p.add_argument("--bundle", required=True)
    p.add_argument("--source")
    p.add_argument("--out", help="checkpoint path")
    _train_flags(p)
    p.set_defaults(func=cmd_train_measurer)

    p = sub.add_parser("score", parents=[common], help="score a source's reliability with a measurer")
    p.add_argument("--bundle", required=True)
    p.add_argument("--source")
    p.add_argument("--measurer", help="checkpoint of a trained measurer")
    p.add_argument("--external", help="external score table (JSON lines of sample_id, value)")
    p.add_argument("--measurer-id", dest="measurer_id")
    p.add_argument("--out")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("hist", parents=[common], help="bin a reliability file into a histogram CSV")
    p.add_argument("--reliability", required=True)
    p.add_argument("--bins", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_hist)

    for name, func, helptext in (
        ("ssa", cmd_ssa, "single-source self-paced selection"),
        ("msa", cmd_msa, "multi-source self-paced selection"),
    ):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--bundle", required=True)
        if name == "ssa":
            p.add_argument("--source")
        else:
            p.add_argument("--sources", help="comma-separated subset of sources (default: all)")
            p.add_argument("--order", help="comma-separated source order overriding the entity ordering")
        p.add_argument("--out", help="result JSON path")
        p.add_argument("--checkpoint", help="final model checkpoint path")
        _train_flags(p)
        _curriculum_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("eval", parents=[common], help="top-1 accuracy of a checkpoint")
    p.add_argument("--bundle", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("val", "test"), default="test")
    p.add_argument("--iou-threshold", dest="iou_threshold", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", parents=[common], help="histogram, P-R and junk accounting reports")
    p.add_argument("--result", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--manifest")
    p.add_argument("--prefix", help="report directory (default: <out-dir>/report)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        r = Resolver(args)
        return args.func(args, r)
    except CurricuForgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
