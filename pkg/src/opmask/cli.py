"""Command-line interface, ``python -m opmask <subcommand>``.

Every subcommand writes into an output directory and finishes by writing a
run record (config hash, dataset hash, artifacts, wall-clock, status). If a
subcommand fails, the files it had produced are moved to ``<out>/failed/``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import hashlib
import json
import shutil
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import yaml

from . import evalkit, experiment
from .config import ConfigError, ExperimentConfig, canonical_json, dump_defaults, dump_yaml, load_config
from .synthdata import generate_dataset, load_manifest, load_scenes, make_class_split
from .train import load_checkpoint, model_from_record, set_determinism, train

EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2
VAL_SEED_OFFSET = 10_000
VARIANTS = ("opmask", "baseline", "cls_only")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --- run bookkeeping -------------------------------------------------------------


def git_blob_hash(data: bytes) -> str:
    """Content hash in git's blob format, so it matches ``git hash-object``."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def dataset_hash(root: str | Path) -> str:
    return git_blob_hash((Path(root) / "annotations.json").read_bytes())


def write_json_atomic(path: Path, data) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(path)


@dataclass
class RunRecord:
    command: str
    config_hash: str
    dataset_hash: str | None = None
    artifacts: list[str] = field(default_factory=list)
    wall_clock_s: float = 0.0
    status: str = "running"
    error: str | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class Run:
    """Tracks one subcommand's outputs; quarantines them if the body raises."""

    def __init__(self, command: str, out_dir: Path, cfg: ExperimentConfig, data_dir=None):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.record = RunRecord(
            command=command,
            config_hash=cfg.config_hash(),
            dataset_hash=dataset_hash(data_dir) if data_dir is not None else None,
        )
        self._t0 = time.perf_counter()

    def add(self, path: Path) -> Path:
        rel = str(Path(path).relative_to(self.out_dir))
        if rel not in self.record.artifacts:
            self.record.artifacts.append(rel)
        return path

    def __enter__(self) -> "Run":
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        self.record.wall_clock_s = round(time.perf_counter() - self._t0, 3)
        name = f"run_record.{self.record.command}.json"
        if exc is None:
            self.record.status = "ok"
            write_json_atomic(self.out_dir / name, self.record.to_dict())
            return False
        self.record.status = "failed"
        self.record.error = f"{type(exc).__name__}: {exc}"
        failed = self.out_dir / "failed"
        failed.mkdir(exist_ok=True)
        for rel in self.record.artifacts:
            src = self.out_dir / rel
            if src.exists():
                dst = failed / rel
                dst.parent.mkdir(parents=True, exist_ok=True)
                shutil.move(str(src), str(dst))
        for tmp in self.out_dir.glob("*.tmp"):
            shutil.move(str(tmp), str(failed / tmp.name))
        write_json_atomic(failed / name, self.record.to_dict())
        return False


def _apply_runtime(cfg: ExperimentConfig) -> None:
    torch.set_num_threads(cfg.num_threads)
    if cfg.deterministic:
        set_determinism(cfg.seed)


# --- argument helpers -----------------------------------------------------------------


def parse_split(text: str, num_classes: int, seed: int) -> tuple[int, ...] | None:
    """``strong=0,1,2,3``, ``k=4`` (random, seeded) or ``all``; returns strong ids."""
    if text == "all":
        return None
    key, _, value = text.partition("=")
    try:
        if key == "strong":
            ids = tuple(int(v) for v in value.split(",") if v.strip())
        elif key == "k":
            ids = tuple(sorted(make_class_split(range(num_classes), k=int(value), seed=seed).strong_ids))
        else:
            raise ValueError
        make_class_split(range(num_classes), ids)
    except ValueError:
        raise UsageError(f"bad --split {text!r}; use strong=0,1,2,3, k=N or all") from None
    return ids


def parse_int_list(text: str, flag: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{flag} expects comma-separated integers, got {text!r}") from None


def _set_overrides(pairs: Sequence[str]) -> dict:
    out: dict = {}
    for pair in pairs or ():
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(value)
    return out


def _load(args, extra: dict | None = None) -> ExperimentConfig:
    overrides = _set_overrides(getattr(args, "set", None))
    if args.seed is not None:
        overrides["seed"] = args.seed
    if extra:
        for k, v in extra.items():
            overrides.setdefault(k, {}).update(v) if isinstance(v, dict) else overrides.__setitem__(k, v)
    if args.config is not None and not Path(args.config).exists():
        raise UsageError(f"config file not found: {args.config}")
    return load_config(args.config, overrides)


def _need_dir(path, what: str) -> Path:
    p = Path(path)
    if not (p / "annotations.json").exists():
        raise UsageError(f"{what} {p} is not a dataset directory (no annotations.json)")
    return p


def _need_run(path) -> Path:
    p = Path(path)
    if not (p / "config.snapshot").exists():
        raise UsageError(f"{p} is not a run directory (no config.snapshot)")
    return p


def _run_config(run_dir: Path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(yaml.safe_load((run_dir / "config.snapshot").read_text(encoding="utf-8")))


def _latest_checkpoint(run_dir: Path) -> Path:
    ckpts = sorted(run_dir.glob("ckpt_*.bin"), key=lambda p: int(p.stem.split("_")[1]))
    if not ckpts:
        raise FileNotFoundError(f"no checkpoint in {run_dir}")
    return ckpts[-1]


def _subset_classes(cfg: ExperimentConfig, subset: str) -> list[int]:
    split = cfg.train.class_split(cfg.model.num_classes)
    if subset == "strong":
        return sorted(split.strong_ids)
    if subset == "weak":
        return sorted(split.weak_ids)
    return list(range(cfg.model.num_classes))


# --- subcommand bodies (also used by sweeps) -----------------------------------------------


def do_gen_data(cfg: ExperimentConfig, out: Path, part: str, n: int | None) -> Path:
    seed = cfg.seed + (VAL_SEED_OFFSET if part == "val" else 0)
    count = n if n is not None else (cfg.dataset.n_val if part == "val" else cfg.dataset.n_train)
    with Run("gen-data", out, cfg) as run:
        manifest = generate_dataset(cfg.dataset.gen, count, seed, out)
        run.add(manifest.annotation_path)
        run.add(out / "images")
        run.record.dataset_hash = dataset_hash(out)
    return out


def do_train(cfg: ExperimentConfig, data: Path, out: Path) -> Path:
    _apply_runtime(cfg)
    scenes = load_scenes(load_manifest(data))
    with Run("train", out, cfg, data) as run:
        snap = out / "config.snapshot"
        snap.write_text(dump_yaml(cfg), encoding="utf-8")
        run.add(snap)
        run.add(out / "metrics.jsonl")
        train(cfg.train, scenes, cfg.model, out)
        for ck in sorted(out.glob("ckpt_*.bin")):
            run.add(ck)
    return out


def _load_model(run_dir: Path):
    return model_from_record(load_checkpoint(_latest_checkpoint(run_dir)))


def do_eval(run_dir: Path, data: Path, subsets: Sequence[str]) -> dict:
    cfg = _run_config(run_dir)
    _apply_runtime(cfg)
    scenes = load_scenes(load_manifest(data))
    gts = experiment.ground_truths(scenes)
    results = {}
    with Run("eval", run_dir, cfg, data) as run:
        model = _load_model(run_dir)
        preds = experiment.predict(model, scenes, mask_threshold=cfg.eval.mask_threshold)
        evalkit.write_detections(run.add(run_dir / "detections.jsonl"), preds.detections)
        experiment.write_priors(run.add(run_dir / "priors.npz"), preds.priors)
        meta = {"variant": cfg.model.variant, "dataset_hash": run.record.dataset_hash,
                "config_hash": run.record.config_hash}
        classes = list(range(cfg.model.num_classes))
        prior = evalkit.evaluate_prior_as_mask(preds.priors, gts, cfg.eval.prior_threshold, classes=classes)
        doc = {"kind": "prior", **meta, "report": prior.to_dict()}
        write_json_atomic(run.add(run_dir / "eval_prior.json"), doc)
        results["prior"] = doc
        if cfg.model.variant != "cls_only":
            for subset in subsets:
                rep = evalkit.evaluate_mask_ap(
                    preds.detections, gts, cfg.eval.iou_thresholds, _subset_classes(cfg, subset), classes
                )
                doc = {"kind": "mask", "subset": subset, **meta, "report": rep.to_dict()}
                write_json_atomic(run.add(run_dir / f"eval_{subset}.json"), doc)
                results[subset] = doc
    return results


def _read_predictions(run_dir: Path) -> list[evalkit.Detection]:
    path = run_dir / "detections.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"{path} missing; run `eval` on this run first")
    return evalkit.read_detections(path)


def do_analyze_ambiguity(run_dir: Path, data: Path) -> dict:
    cfg = _run_config(run_dir)
    manifest = load_manifest(data)
    with Run("analyze-ambiguity", run_dir, cfg, data) as run:
        dets = _read_predictions(run_dir)
        gts = evalkit.gts_from_manifest(manifest)
        subset = _subset_classes(cfg, "weak") or _subset_classes(cfg, "all")
        classes = list(range(cfg.model.num_classes))
        split = evalkit.ambiguity_partition(gts)
        amb, non = evalkit.evaluate_by_ambiguity(dets, gts, subset, classes, cfg.eval.iou_thresholds)
        in_subset = [g for g in gts if g.class_id in subset]
        doc = {
            "kind": "ambiguity",
            "variant": cfg.model.variant,
            "classes": subset,
            "threshold": split.threshold,
            "ambiguous": None if amb is None else amb.to_dict(),
            "non_ambiguous": None if non is None else non.to_dict(),
            "inputs": {
                "dataset_hash": run.record.dataset_hash,
                "detections_hash": git_blob_hash((run_dir / "detections.jsonl").read_bytes()),
                "num_detections": len(dets),
                "num_ambiguous": sum(g.id in split.ambiguous for g in in_subset),
                "num_non_ambiguous": sum(g.id in split.non_ambiguous for g in in_subset),
            },
        }
        write_json_atomic(run.add(run_dir / "eval_ambiguity.json"), doc)
    return doc


def do_analyze_overlap(run_dir: Path, data: Path, train_data: Path, aggregation: str | None) -> dict:
    cfg = _run_config(run_dir)
    agg = aggregation or cfg.eval.overlap_aggregation
    with Run("analyze-overlap", run_dir, cfg, data) as run:
        dets = _read_predictions(run_dir)
        gts = evalkit.gts_from_manifest(load_manifest(data))
        train_gts = evalkit.gts_from_manifest(load_manifest(train_data))
        weak = _subset_classes(cfg, "weak")
        if len(weak) < 3:
            raise ValueError(f"overlap regression needs >= 3 weak classes, split has {len(weak)}")
        classes = list(range(cfg.model.num_classes))
        rep = evalkit.evaluate_mask_ap(dets, gts, cfg.eval.iou_thresholds, weak, classes)
        overlap = evalkit.per_class_overlap(train_gts, agg)
        reg = evalkit.overlap_regression(overlap, rep.per_class_ap, weak)
        doc = {
            "kind": "overlap",
            "variant": cfg.model.variant,
            "aggregation": agg,
            "regression": reg.to_dict(),
            "points": [
                {"class_id": c, "overlap": overlap[c], "ap": rep.per_class_ap[c]}
                for c in weak
                if c in overlap and rep.per_class_ap.get(c) is not None
            ],
            "inputs": {
                "dataset_hash": run.record.dataset_hash,
                "train_dataset_hash": dataset_hash(train_data),
                "num_train_instances": len(train_gts),
            },
        }
        write_json_atomic(run.add(run_dir / "eval_overlap.json"), doc)
    return doc


def _variant_cfg(cfg: ExperimentConfig, variant: str, strong=..., seed=None) -> ExperimentConfig:
    train_cfg = dataclasses.replace(cfg.train, variant=variant)
    if strong is not ...:
        train_cfg = dataclasses.replace(train_cfg, strong_ids=strong)
    seed = cfg.seed if seed is None else seed
    return dataclasses.replace(
        cfg,
        model=dataclasses.replace(cfg.model, variant=variant),
        train=dataclasses.replace(train_cfg, seed=seed),
        seed=seed,
    )


def do_compare_priors(cfg: ExperimentConfig, data: Path, val: Path, out: Path, variants) -> dict:
    with Run("compare-priors", out, cfg, data) as run:
        rows = {}
        for v in variants:
            vdir = out / v
            do_train(_variant_cfg(cfg, v), data, vdir)
            res = do_eval(vdir, val, [])
            rep = res["prior"]["report"]
            rows[v] = {"ap": rep["ap"], "ap50": rep["ap50"], "ap75": rep["ap75"],
                       "per_class_ap50": rep["per_class_ap50"]}
            run.add(vdir)
        doc = {"kind": "priors", "variants": rows, "inputs": {"dataset_hash": run.record.dataset_hash,
                                                             "val_dataset_hash": dataset_hash(val)}}
        write_json_atomic(run.add(out / "eval_priors.json"), doc)
    return doc


def _sweep_job(job) -> dict:
    cfg, data, val, run_dir, count, seed, variant = job
    do_train(cfg, data, run_dir)
    res = do_eval(run_dir, val, ["all", "strong", "weak"])
    return {
        "count": count,
        "seed": seed,
        "variant": variant,
        "strong_ids": sorted(cfg.train.class_split(cfg.model.num_classes).strong_ids),
        "ap_all": res["all"]["report"]["ap"],
        "ap_strong": res["strong"]["report"]["ap"],
        "ap_weak": res["weak"]["report"]["ap"],
    }


def do_sweep(cfg, data, val, out, counts, n_seeds, variants, workers) -> dict:
    k = cfg.model.num_classes
    if any(not 0 <= c <= k for c in counts):
        raise UsageError(f"--counts must lie in [0, {k}]")
    jobs = []
    for count in counts:
        for s in range(n_seeds):
            seed = cfg.seed + s
            strong = tuple(sorted(make_class_split(range(k), k=count, seed=seed).strong_ids))
            for v in variants:
                run_dir = out / f"k{count}_s{seed}_{v}"
                jobs.append((_variant_cfg(cfg, v, strong, seed), data, val, run_dir, count, seed, v))
    with Run("sweep-splits", out, cfg, data) as run:
        if workers > 1:
            with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
                rows = list(pool.map(_sweep_job, jobs))
        else:
            rows = [_sweep_job(j) for j in jobs]
        for j in jobs:
            run.add(j[3])
        agg: dict = {}
        for v in variants:
            agg[v] = {}
            for count in counts:
                vals = [r["ap_weak"] if r["ap_weak"] is not None else r["ap_all"]
                        for r in rows if r["variant"] == v and r["count"] == count]
                agg[v][str(count)] = experiment.mean_or_none(vals)
        doc = {"kind": "sweep", "counts": list(counts), "seeds": n_seeds, "variants": list(variants),
               "metric": "weak-class mask AP (all classes when no class is weak)",
               "runs": rows, "aggregate": agg}
        write_json_atomic(run.add(out / "eval_sweep.json"), doc)
    return doc


# --- parser and dispatch ----------------------------------------------------------------


def build_parser() -> _Parser:
    p = _Parser(prog="opmask", description="Object-mask-prior experiments on synthetic shapes.")
    p.add_argument("--dump-defaults", action="store_true", help="print the default config and exit")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="YAML config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--seed", type=int, help="root seed")

    g = sub.add_parser("gen-data", help="generate a dataset")
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--part", choices=("train", "val"), default="train")
    g.add_argument("--n", type=int)

    t = sub.add_parser("train", help="train one variant")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--variant", choices=VARIANTS)
    t.add_argument("--split", help="strong=0,1,2,3 | k=N | all")
    t.add_argument("--iters", type=int)

    e = sub.add_parser("eval", help="mask AP of a trained run")
    e.add_argument("--run", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--subset", default=None, help="all, strong, weak or a comma list")

    a = sub.add_parser("analyze-ambiguity", help="AP on ambiguous vs. non-ambiguous instances")
    a.add_argument("--run", required=True)
    a.add_argument("--data", required=True)

    o = sub.add_parser("analyze-overlap", help="class overlap vs. weak-class AP regression")
    o.add_argument("--run", required=True)
    o.add_argument("--data", required=True)
    o.add_argument("--train-data", required=True)
    o.add_argument("--aggregation", choices=("max", "mean"))

    c = sub.add_parser("compare-priors", help="train all variants and score their priors as masks")
    common(c)
    c.add_argument("--data", required=True)
    c.add_argument("--val", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--variants", default=",".join(VARIANTS))
    c.add_argument("--iters", type=int)

    s = sub.add_parser("sweep-splits", help="repeat train+eval over strong-class counts")
    common(s)
    s.add_argument("--data", required=True)
    s.add_argument("--val", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--counts", default="2,4,6,8")
    s.add_argument("--seeds", type=int, default=3)
    s.add_argument("--variants", default="opmask,baseline")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--iters", type=int)

    pl = sub.add_parser("plot", help="render figures from analysis JSON")
    pl.add_argument("--inputs", nargs="*", default=[])
    pl.add_argument("--out", required=True)
    return p


def _variants(text: str) -> list[str]:
    vs = [v for v in text.split(",") if v]
    bad = [v for v in vs if v not in VARIANTS]
    if bad or not vs:
        raise UsageError(f"unknown variant(s) {bad}; choose from {VARIANTS}")
    return vs


def _iters_override(args) -> dict:
    if getattr(args, "iters", None) is None:
        return {}
    return {"train": {"total_iters": args.iters, "warmup_iters": min(args.iters, 200)}}


def dispatch(args) -> int:
    cmd = args.command
    if cmd == "gen-data":
        do_gen_data(_load(args), Path(args.out), args.part, args.n)
    elif cmd == "train":
        cfg = _load(args, _iters_override(args))
        if args.variant:
            cfg = _variant_cfg(cfg, args.variant)
        if args.split:
            strong = parse_split(args.split, cfg.model.num_classes, cfg.seed)
            cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, strong_ids=strong))
        data = _need_dir(args.data or cfg.dataset.path, "--data")
        do_train(cfg, data, Path(args.out))
    elif cmd == "eval":
        run_dir = _need_run(args.run)
        subsets = (args.subset or _run_config(run_dir).eval.subset).split(",")
        if any(s not in ("all", "strong", "weak") for s in subsets):
            raise UsageError(f"--subset must be all, strong or weak, got {args.subset!r}")
        do_eval(run_dir, _need_dir(args.data, "--data"), subsets)
    elif cmd == "analyze-ambiguity":
        do_analyze_ambiguity(_need_run(args.run), _need_dir(args.data, "--data"))
    elif cmd == "analyze-overlap":
        do_analyze_overlap(
            _need_run(args.run), _need_dir(args.data, "--data"),
            _need_dir(args.train_data, "--train-data"), args.aggregation,
        )
    elif cmd == "compare-priors":
        cfg = _load(args, _iters_override(args))
        do_compare_priors(cfg, _need_dir(args.data, "--data"), _need_dir(args.val, "--val"),
                          Path(args.out), _variants(args.variants))
    elif cmd == "sweep-splits":
        cfg = _load(args, _iters_override(args))
        if args.seeds < 1 or args.workers < 1:
            raise UsageError("--seeds and --workers must be >= 1")
        do_sweep(cfg, _need_dir(args.data, "--data"), _need_dir(args.val, "--val"), Path(args.out),
                 parse_int_list(args.counts, "--counts"), args.seeds, _variants(args.variants), args.workers)
    elif cmd == "plot":
        from .plots import emit_plots

        emit_plots(args.inputs, Path(args.out))
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.dump_defaults:
            sys.stdout.write(dump_defaults())
            return EXIT_OK
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("a subcommand is required")
        return dispatch(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"opmask: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to exit 2
        print(f"opmask: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
