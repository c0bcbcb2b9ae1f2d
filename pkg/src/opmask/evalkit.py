"""Mask AP and the ambiguity / overlap / prior analyses.

AP follows the COCO convention: per class and IoU threshold, detections are
visited in descending score order and each one takes the unmatched ground
truth of highest mask IoU at or above the threshold (ties go to the lower
ground-truth index). Precision is made monotone from the right and read at
101 recall points. No crowd regions, no area ranges, no detection cap.
"""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .stats import RegressionResult, ols_regression
from .synthdata import DatasetManifest, decode_rle, encode_rle

IOU_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2).tolist())
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
AMBIGUITY_IOU = 0.5


@dataclass
class GroundTruth:
    id: int
    image_id: int
    class_id: int
    box: tuple[float, float, float, float]  # x0, y0, x1, y1
    mask: np.ndarray


@dataclass
class Detection:
    image_id: int
    class_id: int
    score: float
    box: tuple[float, float, float, float]
    mask: np.ndarray

    def to_json(self) -> dict:
        x0, y0, x1, y1 = (float(v) for v in self.box)
        h, w = self.mask.shape
        return {
            "image_id": int(self.image_id),
            "class_id": int(self.class_id),
            "score": float(self.score),
            "bbox": [x0, y0, x1 - x0, y1 - y0],
            "rle": {"size": [int(h), int(w)], "counts": encode_rle(self.mask)},
        }


@dataclass
class EvalReport:
    per_class_ap: dict[int, float | None]
    per_class_ap50: dict[int, float | None]
    per_class_ap75: dict[int, float | None]
    ap: float | None
    ap50: float | None
    ap75: float | None
    num_gt: int
    num_det: int
    classes: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        key = lambda d: {str(k): v for k, v in sorted(d.items())}  # noqa: E731
        return {
            "ap": self.ap,
            "ap50": self.ap50,
            "ap75": self.ap75,
            "per_class_ap": key(self.per_class_ap),
            "per_class_ap50": key(self.per_class_ap50),
            "per_class_ap75": key(self.per_class_ap75),
            "num_gt": self.num_gt,
            "num_det": self.num_det,
            "classes": list(self.classes),
        }


@dataclass
class AmbiguitySplit:
    ambiguous: frozenset[int]
    non_ambiguous: frozenset[int]
    threshold: float = AMBIGUITY_IOU


# --- IoU -----------------------------------------------------------------------


def box_iou(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union) if union > 0 else 0.0


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 0.0
    return int(np.count_nonzero(a & b)) / union


def pairwise_iou(a, b, geometry: str = "box") -> float:
    if geometry == "box":
        return box_iou(a, b)
    if geometry == "mask":
        return mask_iou(a, b)
    raise ValueError(f"geometry must be 'box' or 'mask', got {geometry!r}")


def mask_iou_matrix(dets: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> np.ndarray:
    if not len(dets) or not len(gts):
        return np.zeros((len(dets), len(gts)))
    d = np.stack([np.asarray(m, dtype=bool).ravel() for m in dets]).astype(np.int64)
    g = np.stack([np.asarray(m, dtype=bool).ravel() for m in gts]).astype(np.int64)
    inter = d @ g.T
    union = d.sum(1)[:, None] + g.sum(1)[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1), 0.0)


def box_iou_matrix(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


# --- AP ------------------------------------------------------------------------


def _interpolated_ap(tp: np.ndarray, num_gt: int) -> float:
    tps = np.cumsum(tp).astype(np.float64)
    fps = np.cumsum(~tp).astype(np.float64)
    q = np.zeros(RECALL_POINTS.size)
    if tp.size:
        rc = tps / num_gt
        pr = tps / (tps + fps)
        pr = np.maximum.accumulate(pr[::-1])[::-1]
        idx = np.searchsorted(rc, RECALL_POINTS, side="left")
        ok = idx < pr.size
        q[ok] = pr[idx[ok]]
    return float(np.mean(q))


def _match_class(dets: list[Detection], gts: list[GroundTruth], thresholds) -> np.ndarray:
    """True-positive flags, thresholds x detections, detections in the given order."""
    tp = np.zeros((len(thresholds), len(dets)), dtype=bool)
    by_image_gt: dict[int, list[int]] = defaultdict(list)
    for j, g in enumerate(gts):
        by_image_gt[g.image_id].append(j)
    by_image_det: dict[int, list[int]] = defaultdict(list)
    for i, d in enumerate(dets):
        by_image_det[d.image_id].append(i)
    for image_id, det_idx in by_image_det.items():
        gt_idx = by_image_gt.get(image_id, [])
        if not gt_idx:
            continue
        ious = mask_iou_matrix([dets[i].mask for i in det_idx], [gts[j].mask for j in gt_idx])
        for t, thr in enumerate(thresholds):
            taken = np.zeros(len(gt_idx), dtype=bool)
            for row, i in enumerate(det_idx):
                cand = np.where(taken, -1.0, ious[row])
                best = int(np.argmax(cand))
                if cand[best] >= thr:
                    taken[best] = True
                    tp[t, i] = True
    return tp


def evaluate_mask_ap(
    detections: Sequence[Detection],
    gts: Sequence[GroundTruth],
    iou_thresholds: Sequence[float] = IOU_THRESHOLDS,
    class_subset: Iterable[int] | None = None,
    classes: Iterable[int] | None = None,
) -> EvalReport:
    """COCO-style mask AP averaged over thresholds, then over classes with ground truth.

    ``classes`` is the known category table (defaults to every class seen);
    asking for a class outside it is an error. Classes without ground truth
    report ``None`` and are left out of the means.
    """
    known = set(classes) if classes is not None else {g.class_id for g in gts} | {
        d.class_id for d in detections
    }
    subset = sorted(known if class_subset is None else set(class_subset))
    unknown = [c for c in subset if c not in known]
    if unknown:
        raise ValueError(f"unknown class ids in subset: {unknown}")
    thresholds = list(iou_thresholds)
    per_class, per50, per75 = {}, {}, {}
    t50 = _threshold_index(thresholds, 0.5)
    t75 = _threshold_index(thresholds, 0.75)
    n_gt = n_det = 0
    for c in subset:
        cg = [g for g in gts if g.class_id == c]
        cd = [d for d in detections if d.class_id == c]
        n_gt += len(cg)
        n_det += len(cd)
        if not cg:
            per_class[c] = per50[c] = per75[c] = None
            continue
        order = np.argsort([-d.score for d in cd], kind="mergesort")
        cd = [cd[i] for i in order]
        tp = _match_class(cd, cg, thresholds)
        aps = [_interpolated_ap(tp[t], len(cg)) for t in range(len(thresholds))]
        per_class[c] = float(np.mean(aps))
        per50[c] = aps[t50] if t50 is not None else None
        per75[c] = aps[t75] if t75 is not None else None
    return EvalReport(
        per_class_ap=per_class,
        per_class_ap50=per50,
        per_class_ap75=per75,
        ap=_mean(per_class.values()),
        ap50=_mean(per50.values()),
        ap75=_mean(per75.values()),
        num_gt=n_gt,
        num_det=n_det,
        classes=subset,
    )


def _threshold_index(thresholds, value) -> int | None:
    for i, t in enumerate(thresholds):
        if abs(t - value) < 1e-9:
            return i
    return None


def _mean(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def restrict_to_gt_subset(detections, gts, gt_ids) -> tuple[list[Detection], list[GroundTruth]]:
    """Keep the chosen ground truths and the detections on images that contain one."""
    gt_ids = set(gt_ids)
    kept = [g for g in gts if g.id in gt_ids]
    images = {g.image_id for g in kept}
    return [d for d in detections if d.image_id in images], kept


# --- ambiguity -------------------------------------------------------------------


def _group_by_image(gts: Iterable[GroundTruth]) -> dict[int, list[GroundTruth]]:
    groups: dict[int, list[GroundTruth]] = defaultdict(list)
    for g in gts:
        groups[g.image_id].append(g)
    return groups


def ambiguity_partition(gts: Sequence[GroundTruth], threshold: float = AMBIGUITY_IOU) -> AmbiguitySplit:
    amb = set()
    for group in _group_by_image(gts).values():
        if len(group) < 2:
            continue
        iou = box_iou_matrix([g.box for g in group], [g.box for g in group])
        np.fill_diagonal(iou, 0.0)
        for g, row in zip(group, iou):
            if row.max() >= threshold:
                amb.add(g.id)
    ids = {g.id for g in gts}
    return AmbiguitySplit(frozenset(amb), frozenset(ids - amb), threshold)


def evaluate_by_ambiguity(
    detections: Sequence[Detection],
    gts: Sequence[GroundTruth],
    class_subset: Iterable[int] | None = None,
    classes: Iterable[int] | None = None,
    iou_thresholds: Sequence[float] = IOU_THRESHOLDS,
) -> tuple[EvalReport | None, EvalReport | None]:
    """AP over ambiguous and over non-ambiguous ground truth; ``None`` for an empty side.

    On each side, detections are matched only against that side's ground
    truth; unmatched detections on its images count as false positives.
    """
    if classes is None:
        classes = {g.class_id for g in gts} | {d.class_id for d in detections}
    classes = set(classes)
    split = ambiguity_partition(gts)
    subset = None if class_subset is None else set(class_subset)
    results = []
    for ids in (split.ambiguous, split.non_ambiguous):
        relevant = [g for g in gts if g.id in ids and (subset is None or g.class_id in subset)]
        if not relevant:
            results.append(None)
            continue
        d, g = restrict_to_gt_subset(detections, gts, ids)
        results.append(evaluate_mask_ap(d, g, iou_thresholds, class_subset, classes))
    return results[0], results[1]


# --- class overlap ----------------------------------------------------------------


def instance_overlaps(gts: Sequence[GroundTruth], aggregation: str = "max") -> dict[int, float]:
    """Per ground-truth id: max (or mean) box IoU against the other instances of its image."""
    if aggregation not in ("max", "mean"):
        raise ValueError("aggregation must be 'max' or 'mean'")
    out = {}
    for group in _group_by_image(gts).values():
        if len(group) == 1:
            out[group[0].id] = 0.0
            continue
        iou = box_iou_matrix([g.box for g in group], [g.box for g in group])
        n = len(group)
        off = ~np.eye(n, dtype=bool)
        for k, g in enumerate(group):
            row = iou[k][off[k]]
            out[g.id] = float(row.max() if aggregation == "max" else row.mean())
    return out


def per_class_overlap(gts: Sequence[GroundTruth], aggregation: str = "max") -> dict[int, float]:
    per_inst = instance_overlaps(gts, aggregation)
    acc: dict[int, list[float]] = defaultdict(list)
    for g in gts:
        acc[g.class_id].append(per_inst[g.id])
    return {c: float(np.mean(v)) for c, v in sorted(acc.items())}


def overlap_regression(
    overlap: dict[int, float], ap: dict[int, float | None], classes: Iterable[int] | None = None
) -> RegressionResult:
    cs = sorted(c for c in (classes if classes is not None else ap) if ap.get(c) is not None and c in overlap)
    return ols_regression([overlap[c] for c in cs], [ap[c] for c in cs])


# --- priors as masks ----------------------------------------------------------------


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize with edge clamping."""
    arr = np.asarray(arr, dtype=np.float64)
    h, w = arr.shape
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    ly = (ys - y0)[:, None]
    lx = (xs - x0)[None, :]
    top = (1 - lx) * arr[y0[:, None], x0[None, :]] + lx * arr[y0[:, None], x1[None, :]]
    bot = (1 - lx) * arr[y1[:, None], x0[None, :]] + lx * arr[y1[:, None], x1[None, :]]
    return (1 - ly) * top + ly * bot


def paste_mask(
    probs: np.ndarray, box, image_shape: tuple[int, int], threshold: float = 0.5
) -> np.ndarray:
    """Resize a RoI map to its (rounded) box, threshold it and place it in an empty image."""
    h, w = image_shape
    x0, y0, x1, y1 = (int(round(float(v))) for v in box)
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, w), min(y1, h)
    out = np.zeros((h, w), dtype=bool)
    if x1 <= x0 or y1 <= y0:
        return out
    out[y0:y1, x0:x1] = resize_bilinear(probs, y1 - y0, x1 - x0) >= threshold
    return out


def normalize_prior(prior: np.ndarray) -> np.ndarray | None:
    """Min-max scale to [0, 1]; ``None`` for a constant map."""
    prior = np.asarray(prior, dtype=np.float64)
    lo, hi = prior.min(), prior.max()
    if hi == lo:
        return None
    return (prior - lo) / (hi - lo)


@dataclass
class PriorRecord:
    image_id: int
    class_id: int
    score: float
    box: tuple[float, float, float, float]
    prior: np.ndarray  # S x S, raw CAM slice
    image_shape: tuple[int, int]


def prior_to_detection(rec: PriorRecord, threshold: float = 0.5) -> Detection:
    norm = normalize_prior(rec.prior)
    if norm is None:
        mask = np.zeros(rec.image_shape, dtype=bool)
    else:
        mask = paste_mask(norm, rec.box, rec.image_shape, threshold)
    return Detection(rec.image_id, rec.class_id, rec.score, rec.box, mask)


def evaluate_prior_as_mask(
    priors: Sequence[PriorRecord],
    gts: Sequence[GroundTruth],
    threshold: float = 0.5,
    class_subset: Iterable[int] | None = None,
    classes: Iterable[int] | None = None,
) -> EvalReport:
    dets = [prior_to_detection(r, threshold) for r in priors]
    return evaluate_mask_ap(dets, gts, class_subset=class_subset, classes=classes)


# --- file formats -------------------------------------------------------------------


def gts_from_manifest(manifest: DatasetManifest) -> list[GroundTruth]:
    out = []
    for ann in manifest.annotations:
        h, w = ann["rle"]["size"]
        x, y, bw, bh = ann["bbox"]
        out.append(
            GroundTruth(
                id=int(ann["id"]),
                image_id=int(ann["image_id"]),
                class_id=int(ann["category_id"]),
                box=(float(x), float(y), float(x + bw), float(y + bh)),
                mask=decode_rle(ann["rle"]["counts"], h, w),
            )
        )
    return out


def write_detections(path, detections: Iterable[Detection]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in detections:
            fh.write(json.dumps(d.to_json(), separators=(",", ":")) + "\n")


def read_detections(path) -> list[Detection]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        h, w = rec["rle"]["size"]
        x, y, bw, bh = rec["bbox"]
        out.append(
            Detection(
                image_id=int(rec["image_id"]),
                class_id=int(rec["class_id"]),
                score=float(rec["score"]),
                box=(x, y, x + bw, y + bh),
                mask=decode_rle(rec["rle"]["counts"], h, w),
            )
        )
    return out
