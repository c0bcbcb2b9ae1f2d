"""Partially supervised training loop.

Proposals are jittered ground-truth boxes plus random background boxes (no
RPN). Every foreground RoI is box-supervised; only RoIs matched to a strong
class get a mask loss. Weak-class mask targets are built but never read.

Schedule defaults follow the linear scaling rule from a reference setting of
lr 0.02 / batch 16 / 1000 warmup iterations: batch 8 gives lr 0.01, and the
warmup is shortened to 200 iterations for the shorter desk-scale runs.
"""
from __future__ import annotations

import dataclasses
import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .evalkit import box_iou_matrix
from .model import ModelConfig, OPMaskModel
from .synthdata import ClassSplit, Instance, Scene, make_class_split

BOX_CODER_WEIGHTS = (10.0, 10.0, 5.0, 5.0)
CHECKPOINT_MAGIC = b"OPMK"
CHECKPOINT_VERSION = 1


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, record: dict):
        super().__init__(message)
        self.record = record


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    base_lr: float = 0.01
    warmup_iters: int = 200
    total_iters: int = 3000
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 8
    clip_norm: float = 1.0
    seed: int = 0
    variant: str = "opmask"
    strong_ids: tuple[int, ...] | None = None  # None: every class is strong
    jitter_translate: float = 0.08
    jitter_scale: float = 0.08
    proposals_per_gt: int = 2
    include_gt: bool = True
    bg_candidates: int = 16
    bg_ratio: float = 3.0
    fg_iou: float = 0.5
    checkpoint_every: int = 0  # 0: final checkpoint only
    smooth_l1_beta: float = 1.0

    def validate(self) -> None:
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.warmup_iters > self.total_iters:
            raise ValueError("warmup_iters must not exceed total_iters")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.warmup_iters < 1:
            raise ValueError("warmup_iters must be >= 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if d["strong_ids"] is not None:
            d["strong_ids"] = sorted(int(i) for i in d["strong_ids"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if d.get("strong_ids") is not None:
            d["strong_ids"] = tuple(d["strong_ids"])
        return cls(**d)

    def class_split(self, num_classes: int) -> ClassSplit:
        ids = range(num_classes)
        return make_class_split(ids, ids if self.strong_ids is None else self.strong_ids)


@dataclass
class RoIBatch:
    boxes: np.ndarray  # P x 4, float32
    image_index: np.ndarray  # P, int64
    matched: np.ndarray  # P, ground-truth index within its image, -1 for background
    labels: np.ndarray  # P, class ids, background = num_classes
    reg_targets: np.ndarray  # P x 4
    mask_targets: np.ndarray  # P x S x S float32, zeros for background
    supervised: np.ndarray  # P, bool

    def __len__(self) -> int:
        return int(self.boxes.shape[0])

    @property
    def foreground(self) -> np.ndarray:
        return self.matched >= 0

    @staticmethod
    def concat(parts: Sequence["RoIBatch"]) -> "RoIBatch":
        return RoIBatch(
            *(np.concatenate([getattr(p, f.name) for p in parts]) for f in dataclasses.fields(RoIBatch))
        )


@dataclass
class LossBreakdown:
    l_cls: torch.Tensor
    l_box: torch.Tensor
    l_mask: torch.Tensor
    iteration: int = 0
    lr: float = 0.0
    grad_norm_pre: float = float("nan")
    grad_norm_post: float = float("nan")

    @property
    def total(self) -> torch.Tensor:
        return self.l_cls + self.l_box + self.l_mask

    def record(self) -> dict:
        return {
            "iter": self.iteration,
            "lr": self.lr,
            "l_cls": float(self.l_cls.detach()),
            "l_box": float(self.l_box.detach()),
            "l_mask": float(self.l_mask.detach()),
            "total": float(self.total.detach()),
            "grad_norm_pre": self.grad_norm_pre,
            "grad_norm_post": self.grad_norm_post,
        }


# --- proposals and targets ---------------------------------------------------


def encode_boxes(proposals: np.ndarray, gt: np.ndarray) -> np.ndarray:
    wx, wy, ww, wh = BOX_CODER_WEIGHTS
    pw = proposals[:, 2] - proposals[:, 0]
    ph = proposals[:, 3] - proposals[:, 1]
    px = proposals[:, 0] + 0.5 * pw
    py = proposals[:, 1] + 0.5 * ph
    gw = gt[:, 2] - gt[:, 0]
    gh = gt[:, 3] - gt[:, 1]
    gx = gt[:, 0] + 0.5 * gw
    gy = gt[:, 1] + 0.5 * gh
    return np.stack(
        [wx * (gx - px) / pw, wy * (gy - py) / ph, ww * np.log(gw / pw), wh * np.log(gh / ph)], axis=1
    )


def decode_boxes(proposals: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    wx, wy, ww, wh = BOX_CODER_WEIGHTS
    pw = proposals[:, 2] - proposals[:, 0]
    ph = proposals[:, 3] - proposals[:, 1]
    px = proposals[:, 0] + 0.5 * pw
    py = proposals[:, 1] + 0.5 * ph
    cx = px + deltas[:, 0] / wx * pw
    cy = py + deltas[:, 1] / wy * ph
    w = pw * np.exp(deltas[:, 2] / ww)
    h = ph * np.exp(deltas[:, 3] / wh)
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


def _jitter(box: np.ndarray, cfg: TrainConfig, rng: np.random.Generator, size: tuple[int, int]):
    x0, y0, x1, y1 = box
    w, h = x1 - x0, y1 - y0
    cx = (x0 + x1) / 2 + rng.normal(0.0, 1.0) * cfg.jitter_translate * w
    cy = (y0 + y1) / 2 + rng.normal(0.0, 1.0) * cfg.jitter_translate * h
    w = w * math.exp(rng.normal(0.0, 1.0) * cfg.jitter_scale)
    h = h * math.exp(rng.normal(0.0, 1.0) * cfg.jitter_scale)
    hh, ww = size
    nx0, nx1 = max(0.0, cx - w / 2), min(float(ww), cx + w / 2)
    ny0, ny1 = max(0.0, cy - h / 2), min(float(hh), cy + h / 2)
    if nx1 - nx0 < 1.0 or ny1 - ny0 < 1.0:
        return np.asarray(box, dtype=np.float64)
    return np.array([nx0, ny0, nx1, ny1])


def sample_proposals(
    scene: Scene,
    cfg: TrainConfig,
    split: ClassSplit,
    rng: np.random.Generator,
    num_classes: int,
    mask_size: int = 28,
    image_index: int = 0,
) -> RoIBatch:
    """Jittered GT boxes plus random background boxes, matched at ``cfg.fg_iou``."""
    size = scene.image.shape[:2]
    gt = np.array([inst.box for inst in scene.instances], dtype=np.float64).reshape(-1, 4)
    cands = []
    for box in gt:
        if cfg.include_gt:
            cands.append(box.copy())
        for _ in range(cfg.proposals_per_gt):
            cands.append(_jitter(box, cfg, rng, size))
    if cfg.bg_ratio > 0:
        sides = gt[:, 2:] - gt[:, :2]
        lo, hi = max(4.0, float(sides.min())), float(sides.max()) + 1.0
        for _ in range(cfg.bg_candidates):
            w, h = rng.uniform(lo, hi, size=2)
            x0 = rng.uniform(0.0, size[1] - w)
            y0 = rng.uniform(0.0, size[0] - h)
            cands.append(np.array([x0, y0, x0 + w, y0 + h]))
    cands = np.stack(cands)
    iou = box_iou_matrix(cands, gt)
    best = iou.argmax(axis=1)
    best_iou = iou[np.arange(len(cands)), best]
    fg = np.flatnonzero(best_iou >= cfg.fg_iou)
    bg = np.flatnonzero(best_iou < cfg.fg_iou)
    n_bg = min(len(bg), int(round(cfg.bg_ratio * len(fg))))
    if n_bg < len(bg):
        bg = np.sort(rng.choice(bg, size=n_bg, replace=False))
    keep = np.concatenate([fg, bg]).astype(np.int64)
    boxes = cands[keep]
    matched = np.where(best_iou[keep] >= cfg.fg_iou, best[keep], -1)
    return build_targets(scene.instances, boxes, matched, split, num_classes, mask_size, image_index)


def build_targets(
    instances: Sequence[Instance],
    boxes: np.ndarray,
    matched: np.ndarray,
    split: ClassSplit,
    num_classes: int,
    mask_size: int = 28,
    image_index: int = 0,
) -> RoIBatch:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    matched = np.asarray(matched, dtype=np.int64)
    p = len(boxes)
    labels = np.full(p, num_classes, dtype=np.int64)
    reg = np.zeros((p, 4), dtype=np.float32)
    fg = np.flatnonzero(matched >= 0)
    if fg.size:
        gt_boxes = np.array([instances[m].box for m in matched[fg]], dtype=np.float64)
        labels[fg] = [instances[m].class_id for m in matched[fg]]
        reg[fg] = encode_boxes(boxes[fg], gt_boxes)
    targets, supervised = make_mask_targets(instances, boxes, matched, split, mask_size)
    return RoIBatch(
        boxes=boxes.astype(np.float32),
        image_index=np.full(p, image_index, dtype=np.int64),
        matched=matched,
        labels=labels,
        reg_targets=reg,
        mask_targets=targets,
        supervised=supervised,
    )


def crop_resample(mask: np.ndarray, box: Sequence[float], out: int) -> np.ndarray:
    """Bilinear samples of ``mask`` at the centres of an ``out`` x ``out`` grid over ``box``.

    Pixel ``i`` of the mask is centred at continuous coordinate ``i + 0.5``;
    samples are clamped to the mask extent.
    """
    h, w = mask.shape
    x0, y0, x1, y1 = (float(v) for v in box)
    t = (np.arange(out, dtype=np.float64) + 0.5) / out
    xs = np.clip(x0 + (x1 - x0) * t - 0.5, 0.0, w - 1.0)
    ys = np.clip(y0 + (y1 - y0) * t - 0.5, 0.0, h - 1.0)
    xa = np.floor(xs).astype(np.int64)
    ya = np.floor(ys).astype(np.int64)
    xb = np.minimum(xa + 1, w - 1)
    yb = np.minimum(ya + 1, h - 1)
    lx = (xs - xa)[None, :]
    ly = (ys - ya)[:, None]
    m = mask.astype(np.float64)
    top = (1.0 - lx) * m[ya[:, None], xa[None, :]] + lx * m[ya[:, None], xb[None, :]]
    bot = (1.0 - lx) * m[yb[:, None], xa[None, :]] + lx * m[yb[:, None], xb[None, :]]
    return (1.0 - ly) * top + ly * bot


def make_mask_targets(
    instances: Sequence[Instance],
    boxes: np.ndarray,
    matched: np.ndarray,
    split: ClassSplit,
    out: int = 28,
) -> tuple[np.ndarray, np.ndarray]:
    """Binary 28x28 targets of each RoI's matched instance, plus supervision flags.

    A target holds only the matched instance; other instances inside the RoI
    are background pixels.
    """
    p = len(boxes)
    targets = np.zeros((p, out, out), dtype=np.float32)
    supervised = np.zeros(p, dtype=bool)
    for i in range(p):
        m = int(matched[i])
        if m < 0:
            continue
        inst = instances[m]
        targets[i] = crop_resample(inst.mask, boxes[i], out) >= 0.5
        supervised[i] = split.is_strong(inst.class_id)
    return targets, supervised


# --- losses and optimisation -------------------------------------------------


def compute_losses(out, batch: RoIBatch, smooth_l1_beta: float = 1.0) -> LossBreakdown:
    labels = torch.as_tensor(batch.labels)
    if out.cls_logits.shape[0] != len(batch):
        raise ValueError(
            f"model produced {out.cls_logits.shape[0]} RoIs, batch has {len(batch)}"
        )
    l_cls = F.cross_entropy(out.cls_logits, labels)
    fg = torch.as_tensor(np.flatnonzero(batch.foreground))
    if fg.numel():
        reg_t = torch.as_tensor(batch.reg_targets[fg.numpy()], dtype=out.box_deltas.dtype)
        l_box = F.smooth_l1_loss(
            out.box_deltas[fg], reg_t, beta=smooth_l1_beta, reduction="none"
        ).sum(dim=1).mean()
    else:
        l_box = out.box_deltas.sum() * 0.0
    l_mask = out.cls_logits.new_zeros(())
    if out.mask_logits is not None and out.mask_logits.shape[0] > 0:
        idx = out.mask_index.numpy()
        if not batch.supervised[idx].all():
            raise ValueError("mask branch received RoIs without mask supervision")
        target = torch.as_tensor(batch.mask_targets[idx], dtype=out.mask_logits.dtype)
        if target.shape != out.mask_logits.shape[:1] + out.mask_logits.shape[2:]:
            raise ValueError("mask targets and mask logits differ in shape")
        l_mask = F.binary_cross_entropy_with_logits(out.mask_logits[:, 0], target)
    return LossBreakdown(l_cls=l_cls, l_box=l_box, l_mask=l_mask)


def lr_at(iteration: int, base_lr: float, warmup_iters: int) -> float:
    return base_lr * min(1.0, (iteration + 1) / warmup_iters)


def clip_gradients(params: Iterable[torch.Tensor], max_norm: float) -> tuple[float, float]:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0, 0.0
    norm = float(torch.sqrt(sum((g.detach().double() ** 2).sum() for g in grads)))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g.mul_(scale)
        post = float(torch.sqrt(sum((g.detach().double() ** 2).sum() for g in grads)))
    else:
        post = norm
    return norm, post


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.SGD:
    return torch.optim.SGD(
        model.parameters(), lr=cfg.base_lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay
    )


def model_inputs(batch: RoIBatch, variant: str) -> dict:
    kw = {
        "boxes": torch.as_tensor(batch.boxes),
        "batch_index": torch.as_tensor(batch.image_index),
    }
    if variant != "cls_only":
        idx = np.flatnonzero(batch.supervised)
        kw["mask_index"] = torch.as_tensor(idx, dtype=torch.int64)
        kw["mask_classes"] = torch.as_tensor(batch.labels[idx])
    return kw


def train_step(
    model: OPMaskModel,
    optimizer: torch.optim.Optimizer,
    images: torch.Tensor,
    batch: RoIBatch,
    iteration: int,
    cfg: TrainConfig,
) -> LossBreakdown:
    if iteration >= cfg.total_iters:
        raise ValueError(f"iteration {iteration} is past total_iters={cfg.total_iters}")
    model.train()
    lr = lr_at(iteration, cfg.base_lr, cfg.warmup_iters)
    for group in optimizer.param_groups:
        group["lr"] = lr
    out = model(images, **model_inputs(batch, model.variant))
    losses = compute_losses(out, batch, cfg.smooth_l1_beta)
    losses.iteration, losses.lr = iteration, lr
    total = losses.total
    if not torch.isfinite(total):
        raise TrainingAborted(f"non-finite loss at iteration {iteration}", losses.record())
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    pre, post = clip_gradients(model.parameters(), cfg.clip_norm)
    losses.grad_norm_pre, losses.grad_norm_post = pre, post
    optimizer.step()
    return losses


# --- data plumbing -----------------------------------------------------------


def images_to_tensor(scenes: Sequence[Scene]) -> torch.Tensor:
    """Stack scene images into N x 3 x H x W, normalised to roughly zero mean."""
    arr = np.stack([s.image for s in scenes]).astype(np.float32)
    return (torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous() - 0.5) / 0.25


class BatchSampler:
    """Epoch-wise shuffled image batches plus proposals, driven by one numpy Generator."""

    def __init__(self, scenes, cfg: TrainConfig, split: ClassSplit, num_classes: int, mask_size: int):
        self.scenes = [s for s in scenes if s.instances]
        if not self.scenes:
            raise ValueError("training set has no annotated instances")
        self.images = images_to_tensor(self.scenes)
        self.cfg, self.split = cfg, split
        self.num_classes, self.mask_size = num_classes, mask_size
        self.rng = np.random.default_rng(cfg.seed)
        self._order: list[int] = []

    def next(self) -> tuple[torch.Tensor, RoIBatch]:
        picks = []
        while len(picks) < self.cfg.batch_size:
            if not self._order:
                self._order = self.rng.permutation(len(self.scenes)).tolist()
            picks.append(self._order.pop())
        parts = [
            sample_proposals(
                self.scenes[i], self.cfg, self.split, self.rng, self.num_classes, self.mask_size, j
            )
            for j, i in enumerate(picks)
        ]
        return self.images[picks], RoIBatch.concat(parts)


def set_determinism(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def train(
    cfg: TrainConfig,
    scenes: Sequence[Scene],
    model_cfg: ModelConfig,
    run_dir: str | Path | None = None,
    on_step: Callable[[LossBreakdown], None] | None = None,
) -> tuple[OPMaskModel, torch.optim.Optimizer, "CheckpointRecord"]:
    """Train one model; writes metrics.jsonl and ckpt_{iter}.bin when ``run_dir`` is given."""
    cfg.validate()
    model_cfg = dataclasses.replace(model_cfg, variant=cfg.variant)
    set_determinism(cfg.seed)
    model = OPMaskModel(model_cfg)
    optimizer = make_optimizer(model, cfg)
    split = cfg.class_split(model_cfg.num_classes)
    sampler = BatchSampler(scenes, cfg, split, model_cfg.num_classes, model_cfg.mask_out_size)
    run_dir = Path(run_dir) if run_dir is not None else None
    metrics = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        metrics = open(run_dir / "metrics.jsonl", "w", encoding="utf-8")
    try:
        for it in range(cfg.total_iters):
            images, batch = sampler.next()
            losses = train_step(model, optimizer, images, batch, it, cfg)
            if metrics is not None:
                metrics.write(json.dumps(losses.record()) + "\n")
            if on_step is not None:
                on_step(losses)
            done = it + 1
            if run_dir is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
                if done != cfg.total_iters:
                    save_checkpoint(run_dir / f"ckpt_{done}.bin", make_record(model, optimizer, done, cfg))
    finally:
        if metrics is not None:
            metrics.close()
    record = make_record(model, optimizer, cfg.total_iters, cfg)
    if run_dir is not None:
        save_checkpoint(run_dir / f"ckpt_{cfg.total_iters}.bin", record)
    return model, optimizer, record


# --- checkpoints ---------------------------------------------------------------


@dataclass
class CheckpointRecord:
    model_config: ModelConfig
    train_config: TrainConfig
    iteration: int
    parameters: dict[str, np.ndarray]
    optimizer_state: dict[str, np.ndarray] = field(default_factory=dict)
    seed: int = 0
    version: int = CHECKPOINT_VERSION


def make_record(model: OPMaskModel, optimizer, iteration: int, cfg: TrainConfig) -> CheckpointRecord:
    params = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
    opt = {}
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for p, state in optimizer.state.items():
            buf = state.get("momentum_buffer")
            if buf is not None:
                opt[names[id(p)]] = buf.detach().cpu().numpy().copy()
    return CheckpointRecord(model.cfg, cfg, iteration, params, opt, cfg.seed)


def save_checkpoint(path, record: CheckpointRecord) -> None:
    """Layout: magic, version byte, header length (u32 LE), JSON header, raw arrays, CRC32."""
    arrays, blobs, offset = [], [], 0
    for section, table in (("param", record.parameters), ("momentum", record.optimizer_state)):
        for name in sorted(table):
            arr = np.asarray(table[name])
            raw = arr.tobytes(order="C")
            arrays.append(
                {"section": section, "name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                 "offset": offset, "nbytes": len(raw)}
            )
            blobs.append(raw)
            offset += len(raw)
    header = json.dumps(
        {
            "model_config": record.model_config.to_dict(),
            "train_config": record.train_config.to_dict(),
            "iteration": record.iteration,
            "seed": record.seed,
            "arrays": arrays,
        },
        sort_keys=True,
    ).encode("utf-8")
    body = b"".join(blobs)
    payload = CHECKPOINT_MAGIC + struct.pack("<BI", record.version, len(header)) + header + body
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload + struct.pack("<I", zlib.crc32(payload)))
    tmp.replace(path)


def load_checkpoint(path, expected_keys: Iterable[str] | None = None) -> CheckpointRecord:
    data = Path(path).read_bytes()
    if len(data) < 13 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<BI", data[4:9])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != crc:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")
    try:
        header = json.loads(data[9 : 9 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header") from exc
    body = data[9 + hlen : -4]
    params, momentum = {}, {}
    for a in header["arrays"]:
        raw = body[a["offset"] : a["offset"] + a["nbytes"]]
        if len(raw) != a["nbytes"]:
            raise CheckpointError(f"{path}: truncated array {a['name']}")
        arr = np.frombuffer(raw, dtype=np.dtype(a["dtype"])).reshape(a["shape"]).copy()
        (params if a["section"] == "param" else momentum)[a["name"]] = arr
    model_cfg = ModelConfig.from_dict(header["model_config"])
    if expected_keys is None:
        expected_keys = OPMaskModel(model_cfg).state_dict().keys()
    missing = [k for k in expected_keys if k not in params]
    if missing:
        raise CheckpointError(f"{path}: missing parameter {missing[0]!r}")
    return CheckpointRecord(
        model_config=model_cfg,
        train_config=TrainConfig.from_dict(header["train_config"]),
        iteration=int(header["iteration"]),
        parameters=params,
        optimizer_state=momentum,
        seed=int(header["seed"]),
        version=version,
    )


def model_from_record(record: CheckpointRecord) -> OPMaskModel:
    model = OPMaskModel(record.model_config)
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in record.parameters.items()})
    model.eval()
    return model
