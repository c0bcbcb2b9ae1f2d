import dataclasses
import json
import math

import numpy as np
import pytest
import torch

from opmask.model import ModelConfig, OPMaskModel
from opmask.synthdata import GenConfig, Instance, Scene, generate_scene, make_class_split, scene_seed
from opmask.train import (
    CheckpointError,
    LossBreakdown,
    RoIBatch,
    TrainConfig,
    TrainingAborted,
    build_targets,
    clip_gradients,
    compute_losses,
    crop_resample,
    decode_boxes,
    encode_boxes,
    load_checkpoint,
    lr_at,
    make_mask_targets,
    make_record,
    model_from_record,
    sample_proposals,
    save_checkpoint,
    train,
    train_step,
)
from opmask.model import ModelOutput

import minimodel
from oracles import naive_crop_resample


def _scene_with(boxes, classes, size=64):
    insts = []
    for (x0, y0, x1, y1), c in zip(boxes, classes):
        m = np.zeros((size, size), bool)
        m[y0:y1, x0:x1] = True
        insts.append(Instance(c, (x0, y0, x1, y1), m))
    return Scene(np.zeros((size, size, 3)), insts, 0, 0)


# --- box coding ------------------------------------------------------------------


def test_box_coder_roundtrip():
    rng = np.random.default_rng(0)
    p = np.concatenate([rng.uniform(0, 50, (20, 2)), rng.uniform(0, 50, (20, 2))], 1)
    p[:, 2:] = p[:, :2] + rng.uniform(2, 30, (20, 2))
    g = p + rng.normal(0, 2, (20, 4))
    g[:, 2:] = np.maximum(g[:, 2:], g[:, :2] + 1)
    assert np.allclose(decode_boxes(p, encode_boxes(p, g)), g, atol=1e-9)
    assert np.allclose(encode_boxes(p, p), 0.0)


# --- proposals ----------------------------------------------------------------------


def test_zero_jitter_proposals_are_gt_boxes():
    scene = _scene_with([(2, 2, 20, 20), (30, 30, 50, 44)], [1, 5])
    cfg = TrainConfig(proposals_per_gt=1, include_gt=False, bg_ratio=0, jitter_translate=0, jitter_scale=0)
    split = make_class_split(range(8), [0, 1, 2, 3])
    b = sample_proposals(scene, cfg, split, np.random.default_rng(0), 8)
    assert np.array_equal(b.boxes, np.array([[2, 2, 20, 20], [30, 30, 50, 44]], np.float32))
    assert b.labels.tolist() == [1, 5]
    assert b.supervised.tolist() == [True, False]
    assert np.allclose(b.reg_targets, 0.0)


def test_low_iou_proposal_is_background():
    scene = _scene_with([(0, 0, 20, 20)], [2])
    split = make_class_split(range(8), range(8))
    # IoU 0.3 with the ground truth: intersection 120, union 400
    b = build_targets(scene.instances, np.array([[0, 0, 20, 6]]), np.array([-1]), split, 8)
    assert b.labels.tolist() == [8] and not b.supervised.any()
    cfg = TrainConfig(proposals_per_gt=0, include_gt=True, bg_candidates=40, bg_ratio=100)
    b = sample_proposals(scene, cfg, split, np.random.default_rng(3), 8)
    from opmask.evalkit import box_iou_matrix

    iou = box_iou_matrix(b.boxes, [scene.instances[0].box])[:, 0]
    assert np.array_equal(b.labels == 8, iou < 0.5)
    assert (b.mask_targets[b.labels == 8] == 0).all()


def test_proposal_sampling_is_deterministic_and_balanced():
    scene = generate_scene(GenConfig(overlap_pressure=0.8), 5)
    cfg = TrainConfig()
    split = make_class_split(range(8), [0, 1, 2, 3])
    a = sample_proposals(scene, cfg, split, np.random.default_rng(9), 8)
    b = sample_proposals(scene, cfg, split, np.random.default_rng(9), 8)
    for f in dataclasses.fields(RoIBatch):
        assert np.array_equal(getattr(a, f.name), getattr(b, f.name))
    n_fg = int(a.foreground.sum())
    assert n_fg >= len(scene.instances)  # the gt box itself always matches
    assert (~a.foreground).sum() <= round(cfg.bg_ratio * n_fg)
    assert (a.supervised <= a.foreground).all()


# --- mask targets -----------------------------------------------------------------------


def test_full_coverage_target_is_all_ones():
    m = np.zeros((32, 32), bool)
    m[4:28, 4:28] = True
    t = crop_resample(m, (8, 8, 20, 20), 28) >= 0.5
    assert t.all()


def test_mask_targets_match_pointwise_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        m = rng.random((24, 24)) < 0.5
        x0, y0 = rng.uniform(-2, 12, 2)
        box = (x0, y0, x0 + rng.uniform(3, 14), y0 + rng.uniform(3, 14))
        assert np.array_equal(crop_resample(m, box, 7) >= 0.5, naive_crop_resample(m, box, 7))


def test_weak_instances_not_supervised():
    scene = _scene_with([(2, 2, 20, 20), (30, 30, 50, 44)], [1, 6])
    split = make_class_split(range(8), [0, 1, 2, 3])
    boxes = np.array([i.box for i in scene.instances], float)
    targets, sup = make_mask_targets(scene.instances, boxes, np.array([0, 1]), split)
    assert sup.tolist() == [True, False]
    assert targets.shape == (2, 28, 28)


def test_target_contains_only_matched_instance():
    scene = _scene_with([(0, 0, 10, 20), (10, 0, 20, 20)], [0, 1])
    t, _ = make_mask_targets(scene.instances, np.array([[0.0, 0, 20, 20]]), np.array([0]),
                             make_class_split(range(2), range(2)), out=4)
    assert t[0][:, :2].all() and not t[0][:, 2:].any()


# --- losses ---------------------------------------------------------------------------------


def _fake_out(logits, deltas, mask_logits=None, mask_index=None):
    return ModelOutput(cls_logits=logits, box_deltas=deltas, mask_logits=mask_logits, mask_index=mask_index)


def _batch(labels, supervised, s=2):
    n = len(labels)
    labels = np.array(labels)
    return RoIBatch(
        boxes=np.zeros((n, 4), np.float32),
        image_index=np.zeros(n, np.int64),
        matched=np.where(labels < 3, 0, -1),
        labels=labels,
        reg_targets=np.zeros((n, 4), np.float32),
        mask_targets=np.ones((n, s, s), np.float32),
        supervised=np.array(supervised),
    )


def test_mask_bce_at_half_probability_is_ln2():
    b = _batch([0, 1], [True, True])
    out = _fake_out(torch.zeros(2, 4), torch.zeros(2, 4), torch.zeros(2, 1, 2, 2), torch.tensor([0, 1]))
    assert float(compute_losses(out, b).l_mask) == pytest.approx(math.log(2), abs=1e-7)


def test_saturated_mask_logits_give_tiny_loss():
    b = _batch([0], [True])
    out = _fake_out(torch.zeros(1, 4), torch.zeros(1, 4), torch.full((1, 1, 2, 2), 20.0), torch.tensor([0]))
    assert float(compute_losses(out, b).l_mask) < 1e-8


def test_no_supervised_rois_give_zero_mask_loss():
    b = _batch([3, 2], [False, False])
    out = _fake_out(torch.zeros(2, 4), torch.zeros(2, 4), torch.zeros(0, 1, 2, 2), torch.zeros(0, dtype=torch.int64))
    assert float(compute_losses(out, b).l_mask) == 0.0


def test_unsupervised_roi_in_mask_branch_is_rejected():
    b = _batch([0, 1], [True, False])
    out = _fake_out(torch.zeros(2, 4), torch.zeros(2, 4), torch.zeros(2, 1, 2, 2), torch.tensor([0, 1]))
    with pytest.raises(ValueError):
        compute_losses(out, b)


def test_classification_loss_uniform_logits():
    b = _batch([0, 3, 1], [False, False, False])
    out = _fake_out(torch.zeros(3, 4), torch.zeros(3, 4))
    assert float(compute_losses(out, b).l_cls) == pytest.approx(math.log(4), abs=1e-6)


# --- schedule and clipping ---------------------------------------------------------------


def test_warmup_schedule():
    assert lr_at(199, 0.01, 200) == 0.01
    assert lr_at(0, 0.01, 200) == pytest.approx(0.01 / 200)
    assert lr_at(5000, 0.01, 200) == 0.01
    lrs = [lr_at(i, 0.02, 50) for i in range(60)]
    assert lrs == sorted(lrs)


@pytest.mark.parametrize("norm", [0.5, 1.0, 5.0, 50.0])
def test_clipping(norm):
    rng = np.random.default_rng(int(norm * 10))
    params = [torch.zeros(s, requires_grad=True) for s in ((3, 4), (5,), (2, 2, 2))]
    raw = [rng.normal(size=p.shape) for p in params]
    total = math.sqrt(sum(float((r**2).sum()) for r in raw))
    for p, r in zip(params, raw):
        p.grad = torch.as_tensor(r * norm / total, dtype=torch.float32)
    before = [p.grad.clone() for p in params]
    pre, post = clip_gradients(params, 1.0)
    assert pre == pytest.approx(norm, rel=1e-6)
    assert post <= 1.0 + 1e-6
    if norm <= 1.0:
        assert all(torch.equal(a, p.grad) for a, p in zip(before, params))
    else:
        # direction preserved
        ratio = params[0].grad / before[0]
        assert torch.allclose(ratio, ratio.flatten()[0].expand_as(ratio))


def test_invalid_train_config():
    with pytest.raises(ValueError):
        TrainConfig(warmup_iters=10, total_iters=5).validate()
    with pytest.raises(ValueError):
        TrainConfig(clip_norm=0).validate()


# --- training steps ---------------------------------------------------------------------------


def test_training_reduces_loss_on_fixed_batch():
    model = minimodel.build_model("opmask", seed=0, dtype=torch.float32)
    images, batch = minimodel.random_batch(np.random.default_rng(0), model.cfg, dtype=torch.float32)
    cfg = TrainConfig(base_lr=0.02, warmup_iters=1, total_iters=60)
    opt = torch.optim.SGD(model.parameters(), lr=0.02, momentum=0.9)
    first = train_step(model, opt, images, batch, 0, cfg).record()["total"]
    for it in range(1, 60):
        last = train_step(model, opt, images, batch, it, cfg).record()["total"]
    assert last < 0.5 * first


def test_step_past_schedule_is_rejected():
    model = minimodel.build_model("baseline", dtype=torch.float32)
    images, batch = minimodel.random_batch(np.random.default_rng(0), model.cfg, dtype=torch.float32)
    opt = torch.optim.SGD(model.parameters(), lr=0.01)
    with pytest.raises(ValueError):
        train_step(model, opt, images, batch, 10, TrainConfig(warmup_iters=1, total_iters=10))


def test_non_finite_loss_aborts():
    model = minimodel.build_model("baseline", dtype=torch.float32)
    images, batch = minimodel.random_batch(np.random.default_rng(0), model.cfg, dtype=torch.float32)
    images[0, 0, 0, 0] = float("nan")
    opt = torch.optim.SGD(model.parameters(), lr=0.01)
    with pytest.raises(TrainingAborted) as err:
        train_step(model, opt, images, batch, 0, TrainConfig(warmup_iters=1, total_iters=10))
    assert "l_cls" in err.value.record


@pytest.mark.parametrize("variant", ["opmask", "baseline"])
def test_weak_mask_targets_never_touch_losses_or_gradients(variant):
    split = make_class_split(range(3), [0, 1])
    model = minimodel.build_model(variant, dtype=torch.float32)
    for seed in range(10):
        rng = np.random.default_rng(seed)
        images, batch = minimodel.random_batch(rng, model.cfg, split, dtype=torch.float32)
        v1, g1 = minimodel.losses_and_grads(model, images, batch)
        weak = batch.foreground & ~batch.supervised
        batch.mask_targets[weak] = 1.0 - batch.mask_targets[weak]
        batch.mask_targets[~batch.foreground] = 1.0
        v2, g2 = minimodel.losses_and_grads(model, images, batch)
        assert all(torch.equal(a, b) for a, b in zip(v1, v2))
        assert all((a is None and b is None) or torch.equal(a, b) for a, b in zip(g1.values(), g2.values()))


def test_background_learning_exposure():
    # weak-class RoIs still drive the classifier through their box labels
    model = minimodel.build_model("opmask", dtype=torch.float32)
    split = make_class_split(range(3), [0])
    images, batch = minimodel.random_batch(np.random.default_rng(1), model.cfg, split, dtype=torch.float32)
    assert (batch.foreground & ~batch.supervised).any()
    _, grads = minimodel.losses_and_grads(model, images, batch)
    assert grads["box_head.cls.weight"].abs().sum() > 0


def test_mini_model_gradients_match_finite_differences():
    for variant in ("opmask", "baseline", "cls_only"):
        model = minimodel.build_model(variant, seed=3, random_bias=True)
        images, batch = minimodel.random_batch(np.random.default_rng(3), model.cfg)
        errors = minimodel.finite_difference_errors(model, images, batch, per_group=2)
        assert max(errors.values()) <= 1e-3, (variant, errors)


# --- full loop and checkpoints --------------------------------------------------------------------


TINY_MODEL = ModelConfig(
    num_classes=3, stem_width=4, backbone_widths=(4, 6, 8), fpn_dim=4, box_head_dim=8,
    box_roi_size=4, mask_roi_size=4, canonical_size=16,
)


@pytest.fixture(scope="module")
def tiny_scenes():
    cfg = GenConfig(image_size=64, num_classes=3, min_size=14, max_size=26, max_instances=3)
    return [generate_scene(cfg, scene_seed(0, i), i) for i in range(6)]


def _tiny_train_cfg(**kw):
    base = dict(total_iters=4, warmup_iters=2, batch_size=2, strong_ids=(0,), seed=1)
    base.update(kw)
    return TrainConfig(**base)


def test_train_writes_metrics_and_checkpoint(tmp_path, tiny_scenes):
    cfg = _tiny_train_cfg(checkpoint_every=2)
    train(cfg, tiny_scenes, TINY_MODEL, tmp_path)
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 4
    rec = json.loads(lines[0])
    assert {"iter", "lr", "l_cls", "l_box", "l_mask", "grad_norm_pre", "grad_norm_post"} <= set(rec)
    assert sorted(p.name for p in tmp_path.glob("ckpt_*.bin")) == ["ckpt_2.bin", "ckpt_4.bin"]


def test_training_is_deterministic(tmp_path, tiny_scenes):
    train(_tiny_train_cfg(), tiny_scenes, TINY_MODEL, tmp_path / "a")
    train(_tiny_train_cfg(), tiny_scenes, TINY_MODEL, tmp_path / "b")
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    assert (tmp_path / "a" / "ckpt_4.bin").read_bytes() == (tmp_path / "b" / "ckpt_4.bin").read_bytes()


def test_cls_only_has_no_mask_loss(tiny_scenes):
    log = []
    train(_tiny_train_cfg(variant="cls_only"), tiny_scenes, TINY_MODEL, on_step=log.append)
    assert all(float(l.l_mask) == 0.0 and not l.l_mask.requires_grad for l in log)


def test_fully_supervised_split(tiny_scenes):
    cfg = _tiny_train_cfg(strong_ids=None)
    assert cfg.class_split(3).weak_ids == frozenset()
    log = []
    train(cfg, tiny_scenes, TINY_MODEL, on_step=log.append)
    assert all(l.record()["l_mask"] > 0 for l in log)


def test_checkpoint_roundtrip_is_bit_exact(tmp_path, tiny_scenes):
    model, opt, rec = train(_tiny_train_cfg(), tiny_scenes, TINY_MODEL)
    save_checkpoint(tmp_path / "c.bin", rec)
    back = load_checkpoint(tmp_path / "c.bin")
    assert back.iteration == 4 and back.train_config == rec.train_config
    assert back.model_config == rec.model_config
    assert rec.parameters.keys() == back.parameters.keys()
    for k in rec.parameters:
        assert rec.parameters[k].dtype == back.parameters[k].dtype
        assert rec.parameters[k].shape == back.parameters[k].shape
        assert np.array_equal(rec.parameters[k], back.parameters[k])
    assert back.optimizer_state.keys() == rec.optimizer_state.keys() and rec.optimizer_state
    restored = model_from_record(back)
    for (n, a), (_, b) in zip(model.state_dict().items(), restored.state_dict().items()):
        assert torch.equal(a, b), n


def test_checkpoint_errors(tmp_path, tiny_scenes):
    _, _, rec = train(_tiny_train_cfg(total_iters=2), tiny_scenes, TINY_MODEL)
    path = tmp_path / "c.bin"
    save_checkpoint(path, rec)
    data = bytearray(path.read_bytes())

    bad_version = bytearray(data)
    bad_version[4] = 9
    (tmp_path / "v.bin").write_bytes(bytes(bad_version))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v.bin")

    corrupt = bytearray(data)
    corrupt[-20] ^= 0xFF
    (tmp_path / "x.bin").write_bytes(bytes(corrupt))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(tmp_path / "x.bin")

    (tmp_path / "m.bin").write_bytes(b"nope" + bytes(20))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "m.bin")

    with pytest.raises(CheckpointError, match="missing parameter"):
        load_checkpoint(path, expected_keys=list(rec.parameters) + ["mask_head.extra.weight"])


def test_loss_record_is_plain_floats():
    l = LossBreakdown(torch.tensor(1.0, requires_grad=True), torch.tensor(0.5), torch.tensor(0.25))
    rec = l.record()
    assert rec["total"] == 1.75
    json.dumps(rec)
