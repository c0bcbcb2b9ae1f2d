"""Experiment configuration: YAML files with includes and environment overrides.

A config file is a nested mapping with the sections ``dataset``, ``model``,
``train`` and ``eval`` plus a few top-level keys. A top-level ``include`` (a
path or list of paths, relative to the including file) is loaded first and the
including file is merged over it. Environment variables named
``OPMASK__<section>__<key>`` override single keys; their values are parsed as
YAML scalars, so ``OPMASK__train__base_lr=0.02`` yields a float.

The root ``seed`` feeds dataset generation and training alike.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import yaml

from .model import ModelConfig
from .synthdata import GenConfig
from .train import TrainConfig

ENV_PREFIX = "OPMASK__"


class ConfigError(ValueError):
    """Invalid or unreadable configuration."""


@dataclass
class DatasetSection:
    gen: GenConfig = field(default_factory=lambda: GenConfig(overlap_pressure=0.8))
    n_train: int = 400
    n_val: int = 150
    path: str | None = None  # an existing dataset directory instead of generating one


@dataclass
class EvalSection:
    subset: str = "weak"  # all | strong | weak
    iou_thresholds: tuple[float, ...] = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
    mask_threshold: float = 0.5
    prior_threshold: float = 0.5
    overlap_aggregation: str = "max"


@dataclass
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelConfig = field(default_factory=lambda: ModelConfig(fpn_dim=24, box_head_dim=48))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(strong_ids=(0, 1, 2, 3)))
    eval: EvalSection = field(default_factory=EvalSection)
    seed: int = 0
    output_dir: str = "runs"
    deterministic: bool = True
    num_threads: int = 1

    def to_dict(self) -> dict:
        return {
            "dataset": {
                "gen": self.dataset.gen.to_dict(),
                "n_train": self.dataset.n_train,
                "n_val": self.dataset.n_val,
                "path": self.dataset.path,
            },
            "model": self.model.to_dict(),
            "train": {k: v for k, v in self.train.to_dict().items() if k != "seed"},
            "eval": {
                "subset": self.eval.subset,
                "iou_thresholds": list(self.eval.iou_thresholds),
                "mask_threshold": self.eval.mask_threshold,
                "prior_threshold": self.eval.prior_threshold,
                "overlap_aggregation": self.eval.overlap_aggregation,
            },
            "seed": self.seed,
            "output_dir": self.output_dir,
            "deterministic": self.deterministic,
            "num_threads": self.num_threads,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentConfig":
        base = cls().to_dict()
        unknown = set(d) - set(base) - {"include"}
        if unknown:
            raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
        merged = _deep_merge(base, {k: v for k, v in d.items() if k != "include"})
        try:
            ds = merged["dataset"]
            _check_keys("dataset", ds, base["dataset"])
            _check_keys("dataset.gen", ds["gen"], base["dataset"]["gen"])
            _check_keys("model", merged["model"], base["model"])
            _check_keys("train", merged["train"], base["train"])
            _check_keys("eval", merged["eval"], base["eval"])
            ev = dict(merged["eval"])
            ev["iou_thresholds"] = tuple(float(t) for t in ev["iou_thresholds"])
            cfg = cls(
                dataset=DatasetSection(
                    gen=GenConfig.from_dict(ds["gen"]),
                    n_train=int(ds["n_train"]),
                    n_val=int(ds["n_val"]),
                    path=ds["path"],
                ),
                model=ModelConfig.from_dict(merged["model"]),
                train=TrainConfig.from_dict({**merged["train"], "seed": int(merged["seed"])}),
                eval=EvalSection(**ev),
                seed=int(merged["seed"]),
                output_dir=str(merged["output_dir"]),
                deterministic=bool(merged["deterministic"]),
                num_threads=int(merged["num_threads"]),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg

    def __post_init__(self):
        # the root seed drives training too
        if self.train.seed != self.seed:
            self.train = dataclasses.replace(self.train, seed=self.seed)

    def validate(self) -> None:
        try:
            self.dataset.gen.validate()
            self.model.validate()
            self.train.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.eval.subset not in ("all", "strong", "weak"):
            raise ConfigError(f"eval.subset must be all, strong or weak, got {self.eval.subset!r}")
        if self.eval.overlap_aggregation not in ("max", "mean"):
            raise ConfigError("eval.overlap_aggregation must be max or mean")
        if self.model.num_classes != self.dataset.gen.num_classes:
            raise ConfigError("model.num_classes must equal dataset.gen.num_classes")
        if self.num_threads < 1:
            raise ConfigError("num_threads must be >= 1")

    def config_hash(self) -> str:
        return config_hash(self.to_dict())


def _check_keys(section: str, got: Mapping, allowed: Mapping) -> None:
    extra = set(got) - set(allowed)
    if extra:
        raise ConfigError(f"unknown key(s) in {section}: {sorted(extra)}")


def _deep_merge(base: dict, override: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def read_config_tree(path: str | Path, _seen: tuple[Path, ...] = ()) -> dict:
    """Load one YAML file and its includes into a single merged mapping."""
    path = Path(path).resolve()
    if path in _seen:
        raise ConfigError(f"include cycle through {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    includes = data.pop("include", None) or []
    if isinstance(includes, str):
        includes = [includes]
    merged: dict = {}
    for inc in includes:
        merged = _deep_merge(merged, read_config_tree(path.parent / inc, _seen + (path,)))
    return _deep_merge(merged, data)


def env_overrides(environ: Mapping[str, str] | None = None) -> dict:
    environ = os.environ if environ is None else environ
    out: dict = {}
    for key, raw in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        parts = [p for p in key[len(ENV_PREFIX):].split("__") if p]
        if not parts:
            continue
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(raw)
    return out


def load_config(
    path: str | Path | None = None,
    overrides: Mapping | None = None,
    environ: Mapping[str, str] | None = None,
) -> ExperimentConfig:
    """Defaults, then the file (with includes), then env vars, then explicit overrides."""
    data = read_config_tree(path) if path is not None else {}
    data = _deep_merge(data, env_overrides(environ))
    if overrides:
        data = _deep_merge(data, overrides)
    return ExperimentConfig.from_dict(data)


def dump_yaml(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=None)


def dump_defaults() -> str:
    return dump_yaml(ExperimentConfig())


def canonical_json(data) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def config_hash(data: Mapping) -> str:
    return hashlib.sha256(canonical_json(data).encode("utf-8")).hexdigest()


def replace(cfg: ExperimentConfig, **sections) -> ExperimentConfig:
    """Copy with whole sections or top-level fields swapped."""
    return dataclasses.replace(cfg, **sections)
