"""COCO-style mask AP, the ambiguity split, and the overlap regression on hand-made data.

Run: python demos/03_metrics.py
"""
import numpy as np

from opmask import evalkit


def square(x0, y0, x1, y1, size=32):
    m = np.zeros((size, size), dtype=bool)
    m[y0:y1, x0:x1] = True
    return m


# two overlapping instances (box IoU 2/3) and one isolated instance
gts = [
    evalkit.GroundTruth(0, 0, 0, (0, 0, 10, 10), square(0, 0, 10, 10)),
    evalkit.GroundTruth(1, 0, 1, (0, 2, 10, 12), square(0, 2, 10, 12)),
    evalkit.GroundTruth(2, 0, 1, (20, 20, 30, 30), square(20, 20, 30, 30)),
]
print("box IoU of the overlapping pair:", evalkit.box_iou(gts[0].box, gts[1].box))
split = evalkit.ambiguity_partition(gts)
print("ambiguous:", sorted(split.ambiguous), "non-ambiguous:", sorted(split.non_ambiguous))

# a detector that gets the isolated instance right and the pair half right
dets = [
    evalkit.Detection(0, 0, 0.9, gts[0].box, square(0, 0, 10, 10)),
    evalkit.Detection(0, 1, 0.8, gts[1].box, square(0, 0, 10, 10)),  # segments the wrong instance
    evalkit.Detection(0, 1, 0.7, gts[2].box, square(20, 20, 30, 30)),
]
report = evalkit.evaluate_mask_ap(dets, gts)
print("mask AP", round(report.ap, 3), "per class", {c: round(v, 3) for c, v in report.per_class_ap.items()})
amb, non = evalkit.evaluate_by_ambiguity(dets, gts)
print("AP ambiguous", round(amb.ap, 3), "non-ambiguous", round(non.ap, 3))

# per-class overlap against per-class AP, fitted by least squares
rng = np.random.default_rng(0)
overlap = {c: float(v) for c, v in enumerate(rng.uniform(0.1, 0.6, size=8))}
ap = {c: 0.5 - 0.6 * overlap[c] + float(rng.normal(0, 0.03)) for c in overlap}
reg = evalkit.overlap_regression(overlap, ap)
print(f"slope {reg.slope:.3f}  r {reg.r:.3f}  p {reg.p_value:.2e}  n {reg.n}")
