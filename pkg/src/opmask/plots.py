"""Static figures from the analysis JSON written by the CLI.

Input kinds: ``overlap`` (scatter plus fitted line, one file per variant),
``sweep`` (AP against number of strong classes) and ``ambiguity`` (AP on
ambiguous vs. non-ambiguous instances, one bar pair per variant). PNGs are
written with the Agg backend and no timestamp metadata, so the same JSON gives
byte-identical files.
"""
from __future__ import annotations

import json
import warnings
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

PNG_METADATA = {"Software": None}


class SchemaError(ValueError):
    pass


def _field(doc: dict, path: str, kind=None):
    node = doc
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            raise SchemaError(f"missing field '{path}'")
        node = node[part]
    if kind is not None and not isinstance(node, kind):
        raise SchemaError(f"field '{path}' has type {type(node).__name__}")
    return node


def _num(doc: dict, path: str):
    v = _field(doc, path)
    if v is not None and (isinstance(v, bool) or not isinstance(v, (int, float))):
        raise SchemaError(f"field '{path}' must be a number or null")
    return v


def _save(fig, path: Path) -> Path:
    fig.savefig(path, format="png", dpi=100, metadata=PNG_METADATA)
    plt.close(fig)
    return path


def plot_overlap(doc: dict, out_dir: Path) -> Path:
    variant = _field(doc, "variant", str)
    reg = _field(doc, "regression", dict)
    slope, intercept = _num(doc, "regression.slope"), _num(doc, "regression.intercept")
    points = _field(doc, "points", list)
    xs, ys = [], []
    for i, p in enumerate(points):
        if not isinstance(p, dict):
            raise SchemaError(f"field 'points[{i}]' must be an object")
        xs.append(_num(p, "overlap"))
        ys.append(_num(p, "ap"))
    fig, ax = plt.subplots(figsize=(4, 3.2))
    ax.scatter(xs, ys, s=18)
    if xs:
        lo, hi = min(xs), max(xs)
        ax.plot([lo, hi], [intercept + slope * lo, intercept + slope * hi], color="k", lw=1)
    ax.set_xlabel(f"class overlap ({doc.get('aggregation', 'max')} IoU)")
    ax.set_ylabel("mask AP")
    ax.set_title(f"{variant}: slope {slope:.3f}, p {reg.get('p_value', float('nan')):.3f}")
    fig.tight_layout()
    return _save(fig, out_dir / f"overlap_{variant}.png")


def plot_sweep(doc: dict, out_dir: Path) -> Path:
    counts = _field(doc, "counts", list)
    agg = _field(doc, "aggregate", dict)
    fig, ax = plt.subplots(figsize=(4, 3.2))
    for variant in sorted(agg):
        ys = [_num(doc, f"aggregate.{variant}.{c}") for c in counts]
        ax.plot(counts, [float("nan") if y is None else y for y in ys], marker="o", label=variant)
    ax.set_xlabel("number of strong classes")
    ax.set_ylabel("weak-class mask AP")
    ax.legend()
    fig.tight_layout()
    return _save(fig, out_dir / "sweep.png")


def plot_ambiguity(docs: Sequence[dict], out_dir: Path) -> Path:
    labels, amb, non = [], [], []
    for doc in docs:
        labels.append(_field(doc, "variant", str))
        a, n = _field(doc, "ambiguous"), _field(doc, "non_ambiguous")
        amb.append(float("nan") if a is None else _num(doc, "ambiguous.ap"))
        non.append(float("nan") if n is None else _num(doc, "non_ambiguous.ap"))
    fig, ax = plt.subplots(figsize=(4, 3.2))
    x = list(range(len(labels)))
    ax.bar([i - 0.2 for i in x], amb, width=0.4, label="ambiguous")
    ax.bar([i + 0.2 for i in x], non, width=0.4, label="non-ambiguous")
    ax.set_xticks(x, labels)
    ax.set_ylabel("mask AP")
    ax.legend()
    fig.tight_layout()
    return _save(fig, out_dir / "ambiguity.png")


def load_analysis(path) -> dict:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: top level must be an object")
    return doc


def emit_plots(inputs: Sequence, out_dir) -> list[Path]:
    """Render every recognised analysis; returns the written files in order."""
    docs = [d if isinstance(d, dict) else load_analysis(d) for d in inputs]
    if not docs:
        warnings.warn("no analysis inputs; nothing to plot", stacklevel=2)
        return []
    for d in docs:
        kind = _field(d, "kind", str)
        if kind not in ("overlap", "sweep", "ambiguity"):
            raise SchemaError(f"field 'kind' has unsupported value {kind!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    with plt.rc_context({"svg.hashsalt": "opmask", "font.family": "DejaVu Sans"}):
        for d in docs:
            if d["kind"] == "overlap":
                written.append(plot_overlap(d, out_dir))
            elif d["kind"] == "sweep":
                written.append(plot_sweep(d, out_dir))
        amb = [d for d in docs if d["kind"] == "ambiguity"]
        if amb:
            written.append(plot_ambiguity(amb, out_dir))
    return written
