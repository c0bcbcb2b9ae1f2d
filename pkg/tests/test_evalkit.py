import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from opmask import evalkit
from opmask.evalkit import (
    Detection,
    GroundTruth,
    PriorRecord,
    ambiguity_partition,
    evaluate_by_ambiguity,
    evaluate_mask_ap,
    evaluate_prior_as_mask,
    instance_overlaps,
    pairwise_iou,
    per_class_overlap,
)
from opmask.stats import betainc, ols_regression
from opmask.synthdata import GenConfig, bbox_from_mask, generate_scene, scene_seed

from oracles import brute_force_ap, naive_box_iou, naive_mask_iou, random_ap_case, textbook_ols


def _box_mask(box, shape=(16, 16)):
    m = np.zeros(shape, dtype=bool)
    x0, y0, x1, y1 = box
    m[y0:y1, x0:x1] = True
    return m


def _gt(i, img, cls, box, shape=(16, 16)):
    return GroundTruth(i, img, cls, tuple(float(v) for v in box), _box_mask(box, shape))


# --- IoU ----------------------------------------------------------------------


def test_box_iou_known_value():
    assert pairwise_iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-15)


def test_iou_identity_and_disjoint():
    assert pairwise_iou((2, 3, 9, 7), (2, 3, 9, 7)) == 1.0
    assert pairwise_iou((0, 0, 2, 2), (2, 0, 4, 2)) == 0.0
    m = _box_mask((1, 1, 4, 5))
    assert pairwise_iou(m, m, "mask") == 1.0
    assert pairwise_iou(m, ~m, "mask") == 0.0


def test_empty_union_is_zero():
    z = np.zeros((4, 4), bool)
    assert pairwise_iou(z, z, "mask") == 0.0
    assert pairwise_iou((1, 1, 1, 1), (1, 1, 1, 1)) == 0.0


def test_bad_geometry_rejected():
    with pytest.raises(ValueError):
        pairwise_iou((0, 0, 1, 1), (0, 0, 1, 1), "polygon")


def test_iou_matches_oracles_on_random_inputs():
    rng = np.random.default_rng(1)
    for _ in range(300):
        a = rng.integers(0, 10, 4)
        b = rng.integers(0, 10, 4)
        a = (min(a[0], a[2]), min(a[1], a[3]), max(a[0], a[2]) + 1, max(a[1], a[3]) + 1)
        b = (min(b[0], b[2]), min(b[1], b[3]), max(b[0], b[2]) + 1, max(b[1], b[3]) + 1)
        assert pairwise_iou(a, b) == naive_box_iou(a, b)
        assert pairwise_iou(a, b) == pairwise_iou(b, a)
        ma, mb = rng.random((6, 7)) < 0.4, rng.random((6, 7)) < 0.4
        assert pairwise_iou(ma, mb, "mask") == naive_mask_iou(ma, mb)


def test_box_iou_matrix_agrees_with_scalar():
    rng = np.random.default_rng(2)
    xy = rng.uniform(0, 20, (7, 2))
    wh = rng.uniform(1, 10, (7, 2))
    boxes = np.concatenate([xy, xy + wh], axis=1)
    mat = evalkit.box_iou_matrix(boxes[:4], boxes[4:])
    for i, j in itertools.product(range(4), range(3)):
        assert mat[i, j] == pytest.approx(pairwise_iou(boxes[i], boxes[4 + j]), abs=1e-12)


# --- AP -------------------------------------------------------------------------


def test_perfect_detection_gives_ap_one():
    g = _gt(0, 0, 2, (2, 2, 9, 9))
    d = Detection(0, 2, 0.9, g.box, g.mask.copy())
    rep = evaluate_mask_ap([d], [g])
    assert rep.ap == rep.ap50 == rep.ap75 == 1.0
    assert rep.per_class_ap == {2: 1.0}


def test_iou_below_half_gives_zero_ap50():
    gm = np.zeros((10, 10), bool)
    gm[0:10, 0:5] = True
    dm = np.zeros((10, 10), bool)
    dm[0:4, 0:5] = True  # 20 of 50 pixels
    assert pairwise_iou(dm, gm, "mask") == 0.4
    g = GroundTruth(0, 0, 1, (0, 0, 5, 10), gm)
    d = Detection(0, 1, 0.8, (0, 0, 5, 4), dm)
    rep = evaluate_mask_ap([d], [g])
    assert rep.ap50 == 0.0
    assert rep.ap == 0.0


def test_unknown_class_in_subset_is_error():
    g = _gt(0, 0, 1, (0, 0, 4, 4))
    with pytest.raises(ValueError):
        evaluate_mask_ap([], [g], class_subset=[7], classes=[0, 1, 2])


def test_classes_without_gt_are_absent():
    g = _gt(0, 0, 1, (0, 0, 4, 4))
    rep = evaluate_mask_ap([], [g], classes=[0, 1])
    assert rep.per_class_ap == {0: None, 1: 0.0}
    assert rep.ap == 0.0


def test_duplicate_detection_is_false_positive():
    g = _gt(0, 0, 0, (0, 0, 8, 8))
    d1 = Detection(0, 0, 0.9, g.box, g.mask.copy())
    d2 = Detection(0, 0, 0.8, g.box, g.mask.copy())
    assert evaluate_mask_ap([d1, d2], [g]).ap == 1.0
    # a higher-scored duplicate miss pulls precision down at every recall point
    bad = Detection(0, 0, 0.95, (8, 8, 16, 16), _box_mask((8, 8, 16, 16)))
    assert evaluate_mask_ap([bad, d1], [g]).ap == pytest.approx(0.5)


def _oracle(dets, gts, classes):
    return brute_force_ap(
        [(d.image_id, d.class_id, d.score, d.mask) for d in dets],
        [(g.image_id, g.class_id, g.mask) for g in gts],
        classes,
        evalkit.IOU_THRESHOLDS,
    )


def test_ap_equals_brute_force_on_random_cases():
    rng = np.random.default_rng(1234)
    for _ in range(250):
        dets, gts, classes = random_ap_case(rng)
        rep = evaluate_mask_ap(dets, gts, classes=classes)
        assert rep.per_class_ap == _oracle(dets, gts, classes)


def test_ap_values_in_unit_interval():
    rng = np.random.default_rng(5)
    for _ in range(50):
        dets, gts, classes = random_ap_case(rng)
        rep = evaluate_mask_ap(dets, gts, classes=classes)
        for v in list(rep.per_class_ap.values()) + [rep.ap, rep.ap50, rep.ap75]:
            assert v is None or 0.0 <= v <= 1.0


# --- ambiguity --------------------------------------------------------------------


def test_ambiguity_partition_example():
    a = _gt(1, 0, 0, (0, 0, 10, 10), (32, 32))
    b = _gt(2, 0, 1, (0, 0, 10, 6), (32, 32))  # IoU 0.6
    c = _gt(3, 0, 2, (20, 20, 30, 30), (32, 32))
    assert pairwise_iou(a.box, b.box) == pytest.approx(0.6)
    split = ambiguity_partition([a, b, c])
    assert split.ambiguous == {1, 2}
    assert split.non_ambiguous == {3}
    assert split.threshold == 0.5


def test_ambiguity_only_within_an_image():
    a = _gt(1, 0, 0, (0, 0, 10, 10), (32, 32))
    b = _gt(2, 1, 0, (0, 0, 10, 10), (32, 32))
    assert ambiguity_partition([a, b]).ambiguous == frozenset()


def test_disjoint_instances_are_non_ambiguous():
    gts = [_gt(i, 0, 0, (4 * i, 0, 4 * i + 3, 3)) for i in range(4)]
    split = ambiguity_partition(gts)
    assert split.ambiguous == frozenset()
    assert split.non_ambiguous == {0, 1, 2, 3}


def test_ambiguity_partition_is_permutation_invariant():
    rng = np.random.default_rng(3)
    for _ in range(20):
        scene = generate_scene(GenConfig(overlap_pressure=0.9), int(rng.integers(1 << 30)))
        gts = [GroundTruth(i, 0, x.class_id, x.box, x.mask) for i, x in enumerate(scene.instances)]
        ref = ambiguity_partition(gts)
        assert ref.ambiguous | ref.non_ambiguous == {g.id for g in gts}
        assert not ref.ambiguous & ref.non_ambiguous
        perm = [gts[i] for i in rng.permutation(len(gts))]
        assert ambiguity_partition(perm) == ref


def test_degenerate_split_reports_absent_side():
    gts = [_gt(i, i % 2, i % 3, (4 * i % 12, 0, 4 * i % 12 + 3, 3)) for i in range(5)]
    dets = [Detection(g.image_id, g.class_id, 0.5, g.box, g.mask.copy()) for g in gts[:3]]
    amb, non = evaluate_by_ambiguity(dets, gts)
    assert amb is None
    full = evaluate_mask_ap(dets, gts)
    assert non.to_dict() == full.to_dict()


def test_restricted_evaluation_matches_brute_force():
    rng = np.random.default_rng(77)
    checked = 0
    for _ in range(200):
        dets, gts, classes = random_ap_case(rng)
        # random boxes so that some pairs cross the ambiguity threshold
        for g in gts:
            x0, y0 = rng.integers(0, 4, 2)
            g.box = (float(x0), float(y0), float(x0 + rng.integers(2, 5)), float(y0 + rng.integers(2, 5)))
        split = ambiguity_partition(gts)
        got = evaluate_by_ambiguity(dets, gts, classes=classes)
        for ids, rep in zip((split.ambiguous, split.non_ambiguous), got):
            if not ids:
                assert rep is None
                continue
            sub = [g for g in gts if g.id in ids]
            images = {g.image_id for g in sub}
            sub_d = [d for d in dets if d.image_id in images]
            assert rep.per_class_ap == _oracle(sub_d, sub, classes)
            checked += 1
    assert checked > 200


# --- overlap --------------------------------------------------------------------------


def test_single_instance_images_have_zero_overlap():
    gts = [_gt(i, i, i % 3, (0, 0, 5, 5)) for i in range(6)]
    assert per_class_overlap(gts) == {0: 0.0, 1: 0.0, 2: 0.0}


def test_identical_boxes_overlap_one():
    gts = [_gt(0, 0, 3, (1, 1, 6, 6)), _gt(1, 0, 5, (1, 1, 6, 6))]
    assert per_class_overlap(gts) == {3: 1.0, 5: 1.0}
    assert per_class_overlap(gts, "mean") == {3: 1.0, 5: 1.0}


def _naive_overlap(gts, agg):
    per_inst = {}
    for g in gts:
        vals = [naive_box_iou(g.box, h.box) for h in gts if h.image_id == g.image_id and h.id != g.id]
        per_inst[g.id] = 0.0 if not vals else (max(vals) if agg == "max" else math.fsum(vals) / len(vals))
    out = {}
    for c in sorted({g.class_id for g in gts}):
        v = [per_inst[g.id] for g in gts if g.class_id == c]
        out[c] = math.fsum(v) / len(v)
    return out


@pytest.mark.parametrize("agg", ["max", "mean"])
def test_per_class_overlap_matches_double_loop(agg):
    cfg = GenConfig(overlap_pressure=0.9)
    gts = []
    for i in range(40):
        for inst in generate_scene(cfg, scene_seed(21, i)).instances:
            gts.append(GroundTruth(len(gts), i, inst.class_id, inst.box, inst.mask))
    got = per_class_overlap(gts, agg)
    ref = _naive_overlap(gts, agg)
    assert got.keys() == ref.keys()
    for c in ref:
        assert got[c] == pytest.approx(ref[c], abs=1e-12)


def test_bad_aggregation_rejected():
    with pytest.raises(ValueError):
        instance_overlaps([], "median")


# --- OLS ---------------------------------------------------------------------------


def test_ols_exact_line():
    x = [0.1, 0.3, 0.5, 0.7, 0.9]
    r = ols_regression(x, [-2 * v + 1 for v in x])
    assert r.slope == pytest.approx(-2.0, abs=1e-12)
    assert r.intercept == pytest.approx(1.0, abs=1e-12)
    assert r.r == pytest.approx(-1.0, abs=1e-12)
    assert r.p_value < 1e-10
    assert r.n == 5


def test_ols_constant_y():
    r = ols_regression([1, 2, 3, 4], [0.3] * 4)
    assert r.slope == 0.0 and r.p_value == 1.0


def test_ols_errors():
    with pytest.raises(ValueError):
        ols_regression([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        ols_regression([1, 2], [1, 2])


def test_ols_matches_textbook_oracle():
    rng = np.random.default_rng(8)
    for _ in range(200):
        n = int(rng.integers(3, 30))
        x = rng.normal(size=n).tolist()
        y = (rng.normal() * np.array(x) + rng.normal(size=n)).tolist()
        got = ols_regression(x, y)
        slope, intercept, r, p = textbook_ols(x, y)
        assert got.slope == pytest.approx(slope, abs=1e-10)
        assert got.intercept == pytest.approx(intercept, abs=1e-10)
        assert got.r == pytest.approx(r, abs=1e-10)
        assert got.p_value == pytest.approx(p, abs=1e-10)
        assert -1.0 <= got.r <= 1.0 and 0.0 <= got.p_value <= 1.0


def test_p_value_decreases_with_abs_r():
    x = np.linspace(0, 1, 10)
    noise = np.sin(np.arange(10) * 2.3)
    ps, rs = [], []
    for s in (0.05, 0.2, 0.5, 1.0, 3.0):
        res = ols_regression(x.tolist(), (s * x + 0.1 * noise).tolist())
        ps.append(res.p_value)
        rs.append(abs(res.r))
    assert rs == sorted(rs)
    assert ps == sorted(ps, reverse=True)


@settings(max_examples=80, deadline=None)
@given(st.floats(0.1, 30), st.floats(0.1, 30), st.floats(0, 1))
def test_betainc_matches_scipy(a, b, x):
    from scipy import special

    assert betainc(a, b, x) == pytest.approx(float(special.betainc(a, b, x)), abs=1e-11)


# --- priors as masks -----------------------------------------------------------------


def test_perfect_prior_gives_ap_one():
    shape = (32, 32)
    gm = np.zeros(shape, bool)
    gm[4:18, 4:11] = True
    gm[11:18, 11:18] = True  # L shape inside a 14x14 box
    box = bbox_from_mask(gm)
    assert box == (4, 4, 18, 18)
    prior = gm[4:18, 4:18].astype(float)
    rec = PriorRecord(0, 2, 0.7, box, prior, shape)
    g = GroundTruth(0, 0, 2, box, gm)
    rep = evaluate_prior_as_mask([rec], [g])
    assert rep.ap == 1.0


def test_constant_prior_is_empty_mask():
    rec = PriorRecord(0, 1, 0.9, (2, 2, 9, 9), np.full((7, 7), 3.5), (16, 16))
    assert not evalkit.prior_to_detection(rec).mask.any()
    g = _gt(0, 0, 1, (2, 2, 9, 9))
    assert evaluate_prior_as_mask([rec], [g]).ap == 0.0


def test_prior_masks_invariant_under_affine_rescaling():
    rng = np.random.default_rng(4)
    for _ in range(50):
        p = rng.normal(size=(7, 7))
        a, b = rng.uniform(0.01, 50), rng.normal() * 10
        box = (3.0, 5.0, 3.0 + rng.integers(4, 20), 5.0 + rng.integers(4, 20))
        r1 = PriorRecord(0, 0, 0.5, box, p, (32, 32))
        r2 = PriorRecord(0, 0, 0.5, box, a * p + b, (32, 32))
        m1 = evalkit.prior_to_detection(r1).mask
        m2 = evalkit.prior_to_detection(r2).mask
        assert np.array_equal(m1, m2)


def test_resize_identity_and_constant():
    arr = np.arange(12.0).reshape(3, 4)
    assert np.array_equal(evalkit.resize_bilinear(arr, 3, 4), arr)
    assert np.allclose(evalkit.resize_bilinear(np.full((5, 5), 2.0), 9, 3), 2.0)


# --- files -----------------------------------------------------------------------------


def test_detections_jsonl_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    dets = [
        Detection(i, i % 3, float(rng.random()), (1.0, 2.0, 7.0, 9.0), rng.random((12, 10)) < 0.5)
        for i in range(5)
    ]
    path = tmp_path / "d.jsonl"
    evalkit.write_detections(path, dets)
    back = evalkit.read_detections(path)
    for a, b in zip(dets, back):
        assert (a.image_id, a.class_id, a.score, tuple(a.box)) == (b.image_id, b.class_id, b.score, tuple(b.box))
        assert np.array_equal(a.mask, b.mask)
