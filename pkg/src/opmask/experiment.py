"""Glue between training and evaluation: GT-box inference and report assembly.

At evaluation time the proposals are the ground-truth boxes, so mask AP
measures the mask branch (and the priors) rather than localisation.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from . import evalkit
from .model import OPMaskModel, select_prior_slice
from .synthdata import Scene
from .train import images_to_tensor


@dataclass
class Predictions:
    detections: list[evalkit.Detection]
    priors: list[evalkit.PriorRecord]


def ground_truths(scenes: Sequence[Scene]) -> list[evalkit.GroundTruth]:
    out = []
    for s in scenes:
        for inst in s.instances:
            out.append(
                evalkit.GroundTruth(
                    id=len(out),
                    image_id=s.scene_id,
                    class_id=inst.class_id,
                    box=tuple(float(v) for v in inst.box),
                    mask=inst.mask,
                )
            )
    return out


@torch.no_grad()
def predict(
    model: OPMaskModel, scenes: Sequence[Scene], batch_size: int = 16, mask_threshold: float = 0.5
) -> Predictions:
    """Run every GT box through the model; background predictions are dropped."""
    model.eval()
    bg = model.cfg.background
    dets, priors = [], []
    for start in range(0, len(scenes), batch_size):
        chunk = [s for s in scenes[start : start + batch_size]]
        boxes, bidx = [], []
        for j, s in enumerate(chunk):
            for inst in s.instances:
                boxes.append(inst.box)
                bidx.append(j)
        if not boxes:
            continue
        images = images_to_tensor(chunk)
        boxes_t = torch.tensor(boxes, dtype=torch.float32)
        bidx_t = torch.tensor(bidx, dtype=torch.int64)
        out = model(images, boxes_t, bidx_t)
        probs = torch.softmax(out.cls_logits, dim=1)
        pred = probs.argmax(dim=1)
        keep = torch.nonzero(pred != bg).flatten()
        prior_maps = select_prior_slice(out.cam[keep], pred[keep])[:, 0].numpy()
        mask_probs = {}
        if out.mask_logits is not None:
            mp = torch.sigmoid(out.mask_logits[:, 0]).numpy()
            mask_probs = {int(i): mp[k] for k, i in enumerate(out.mask_index.tolist())}
        for k, i in enumerate(keep.tolist()):
            scene = chunk[bidx[i]]
            shape = scene.image.shape[:2]
            cls = int(pred[i])
            score = float(probs[i, cls])
            box = tuple(float(v) for v in boxes[i])
            priors.append(
                evalkit.PriorRecord(scene.scene_id, cls, score, box, prior_maps[k], shape)
            )
            if i in mask_probs:
                mask = evalkit.paste_mask(mask_probs[i], box, shape, mask_threshold)
                dets.append(evalkit.Detection(scene.scene_id, cls, score, box, mask))
    return Predictions(dets, priors)


def _nan_none(v):
    return None if v is None else float(v)


def evaluate_predictions(
    preds: Predictions,
    gts: Sequence[evalkit.GroundTruth],
    num_classes: int,
    strong_ids: Sequence[int],
    train_gts: Sequence[evalkit.GroundTruth] | None = None,
    with_masks: bool = True,
) -> dict:
    """Everything the analyses need from one trained model, as plain JSON data."""
    classes = list(range(num_classes))
    strong = sorted(strong_ids)
    weak = [c for c in classes if c not in strong]
    result: dict = {"strong_ids": strong, "weak_ids": weak}
    prior_all = evalkit.evaluate_prior_as_mask(preds.priors, gts, classes=classes)
    result["prior"] = {
        "all": prior_all.to_dict(),
        "weak": evalkit.evaluate_prior_as_mask(
            preds.priors, gts, class_subset=weak, classes=classes
        ).to_dict()
        if weak
        else None,
    }
    if not with_masks:
        return result
    full = evalkit.evaluate_mask_ap(preds.detections, gts, classes=classes)
    result["mask"] = {
        "all": full.to_dict(),
        "strong": evalkit.evaluate_mask_ap(preds.detections, gts, class_subset=strong, classes=classes).to_dict()
        if strong
        else None,
        "weak": evalkit.evaluate_mask_ap(preds.detections, gts, class_subset=weak, classes=classes).to_dict()
        if weak
        else None,
    }
    amb, non = evalkit.evaluate_by_ambiguity(
        preds.detections, gts, class_subset=weak or None, classes=classes
    )
    result["ambiguity"] = {
        "subset": "weak" if weak else "all",
        "ambiguous": None if amb is None else amb.to_dict(),
        "non_ambiguous": None if non is None else non.to_dict(),
    }
    if train_gts is not None and len(weak) >= 3:
        ap = full.per_class_ap
        out = {}
        for agg in ("max", "mean"):
            overlap = evalkit.per_class_overlap(train_gts, agg)
            try:
                reg = evalkit.overlap_regression(overlap, ap, weak)
            except ValueError as exc:
                out[agg] = {"error": str(exc)}
                continue
            out[agg] = {
                "regression": reg.to_dict(),
                "points": [
                    {"class_id": c, "overlap": overlap[c], "ap": _nan_none(ap.get(c))}
                    for c in weak
                    if c in overlap and ap.get(c) is not None
                ],
            }
        result["overlap"] = out
    return result


def mean_or_none(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


# --- persistence ------------------------------------------------------------------


def write_priors(path, priors: Sequence[evalkit.PriorRecord]) -> None:
    """Prior slices as one ``.npz``: ids, scores, boxes, maps and image shapes."""
    s = priors[0].prior.shape if priors else (0, 0)
    with open(path, "wb") as fh:
        np.savez(
            fh,
            image_id=np.array([p.image_id for p in priors], dtype=np.int64),
            class_id=np.array([p.class_id for p in priors], dtype=np.int64),
            score=np.array([p.score for p in priors], dtype=np.float64),
            box=np.array([p.box for p in priors], dtype=np.float64).reshape(-1, 4),
            prior=np.array([p.prior for p in priors], dtype=np.float32).reshape(len(priors), *s),
            image_shape=np.array([p.image_shape for p in priors], dtype=np.int64).reshape(-1, 2),
        )


def read_priors(path) -> list[evalkit.PriorRecord]:
    with np.load(path) as z:
        return [
            evalkit.PriorRecord(
                int(z["image_id"][i]),
                int(z["class_id"][i]),
                float(z["score"][i]),
                tuple(float(v) for v in z["box"][i]),
                z["prior"][i].astype(np.float64),
                tuple(int(v) for v in z["image_shape"][i]),
            )
            for i in range(len(z["image_id"]))
        ]
