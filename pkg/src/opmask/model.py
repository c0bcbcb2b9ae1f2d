"""Model core: lite feature pyramid, RoIAlign, conv-GAP box head with CAMs, mask head.

Three variants share one module:

* ``opmask``   -- the class-selected CAM of the box head is resized to the mask
  RoI grid and added to every channel of the mask features before the mask
  head; mask gradients therefore reach the box head.
* ``baseline`` -- class-agnostic mask head on the raw RoI features.
* ``cls_only`` -- detection heads only, no mask head.

Background is class index ``num_classes`` (the last logit).
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

VARIANTS = ("opmask", "baseline", "cls_only")
STRIDES = (4, 8, 16)


@dataclass
class ModelConfig:
    num_classes: int = 8
    stem_width: int = 16
    backbone_widths: tuple[int, int, int] = (24, 32, 48)
    fpn_dim: int = 32
    box_head_dim: int = 64
    box_roi_size: int = 7
    mask_roi_size: int = 14
    sampling_ratio: int = 2
    canonical_size: float = 32.0
    variant: str = "opmask"

    @property
    def mask_out_size(self) -> int:
        return 2 * self.mask_roi_size

    @property
    def background(self) -> int:
        return self.num_classes

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if len(self.backbone_widths) != 3:
            raise ValueError("backbone_widths needs one width per pyramid level")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["backbone_widths"] = list(self.backbone_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "backbone_widths" in d:
            d["backbone_widths"] = tuple(d["backbone_widths"])
        return cls(**d)


@dataclass
class BoxHeadOutput:
    f_box: torch.Tensor  # N x C x S x S, pre-GAP
    cls_logits: torch.Tensor  # N x (K+1)
    box_deltas: torch.Tensor  # N x 4


@dataclass
class ModelOutput:
    cls_logits: torch.Tensor
    box_deltas: torch.Tensor
    cam: torch.Tensor | None = None  # all-class CAM, N x (K+1) x S x S
    mask_index: torch.Tensor | None = None  # RoIs that entered the mask branch
    mask_classes: torch.Tensor | None = None
    prior: torch.Tensor | None = None  # selected slices, M x 1 x S x S
    mask_logits: torch.Tensor | None = None  # M x 1 x 2R x 2R
    f_fpn: torch.Tensor | None = None
    f_object: torch.Tensor | None = None

    @property
    def mask_probs(self) -> torch.Tensor | None:
        return None if self.mask_logits is None else torch.sigmoid(self.mask_logits)


def _conv(cin: int, cout: int, k: int = 3, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2)


def init_weights(module: nn.Module) -> None:
    """Fan-in scaled normal weights, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class LitePyramid(nn.Module):
    """Three stride-2 conv stages with 1x1 laterals merged top-down.

    No normalisation layers, so images in a batch never interact.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.backbone_widths
        self.stem = _conv(3, cfg.stem_width, stride=2)
        self.stages = nn.ModuleList()
        cin = cfg.stem_width
        for cout in w:
            self.stages.append(nn.ModuleList([_conv(cin, cout, stride=2), _conv(cout, cout)]))
            cin = cout
        self.lateral = nn.ModuleList([nn.Conv2d(c, cfg.fpn_dim, 1) for c in w])
        self.smooth = nn.ModuleList([_conv(cfg.fpn_dim, cfg.fpn_dim) for _ in w])

    def forward(self, images: torch.Tensor) -> list[torch.Tensor]:
        h, w = images.shape[-2:]
        if h % 16 or w % 16:
            raise ValueError(f"image size {h}x{w} is not divisible by 16")
        x = F.relu(self.stem(images))
        feats = []
        for down, conv in self.stages:
            x = F.relu(conv(F.relu(down(x))))
            feats.append(x)
        out = [None] * 3
        top = self.lateral[2](feats[2])
        out[2] = top
        for i in (1, 0):
            top = self.lateral[i](feats[i]) + F.interpolate(top, scale_factor=2, mode="nearest")
            out[i] = top
        return [s(p) for s, p in zip(self.smooth, out)]


def assign_levels(boxes: torch.Tensor, canonical_size: float, num_levels: int = 3) -> torch.Tensor:
    """Pyramid level per box: floor(log2(sqrt(area) / canonical)) + 1, clamped.

    With canonical 32: boxes under 32 px on a side read stride 4, up to 64 px
    stride 8, larger ones stride 16.
    """
    wh = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    scale = torch.sqrt(wh.clamp(min=1e-12))
    lvl = torch.floor(torch.log2(scale / canonical_size)) + 1
    return lvl.clamp(0, num_levels - 1).long()


def roi_align_level(
    feature: torch.Tensor,
    boxes: torch.Tensor,
    batch_index: torch.Tensor,
    out_size: int,
    spatial_scale: float,
    sampling_ratio: int = 2,
) -> torch.Tensor:
    """Bilinear RoIAlign on one feature map.

    Each output bin averages ``sampling_ratio**2`` samples placed at the centres
    of a regular sub-grid. Feature cell ``i`` is centred at continuous
    coordinate ``i + 0.5``; samples are clamped to the map (border replicate).
    """
    n = boxes.shape[0]
    b, d, h, w = feature.shape
    if n == 0:
        return feature.new_zeros((0, d, out_size, out_size))
    bx = boxes * spatial_scale
    widths = bx[:, 2] - bx[:, 0]
    heights = bx[:, 3] - bx[:, 1]
    if bool((widths <= 0).any() or (heights <= 0).any()):
        raise ValueError("degenerate RoI with zero area")
    r = sampling_ratio
    steps = (torch.arange(out_size * r, dtype=feature.dtype, device=feature.device) + 0.5) / (
        out_size * r
    )
    xs = bx[:, 0:1] + widths[:, None] * steps[None, :] - 0.5
    ys = bx[:, 1:2] + heights[:, None] * steps[None, :] - 0.5
    xs = xs.clamp(0, w - 1)
    ys = ys.clamp(0, h - 1)
    x0 = xs.floor().long()
    y0 = ys.floor().long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    lx = (xs - x0)[:, None, :, None]
    ly = (ys - y0)[:, :, None, None]

    flat = feature.permute(0, 2, 3, 1).reshape(b * h * w, d)
    base = (batch_index.long() * h * w)[:, None, None]

    def gather(yi, xi):
        idx = base + yi[:, :, None] * w + xi[:, None, :]
        return flat[idx]  # n x Sr x Sr x d

    val = (
        (1 - ly) * ((1 - lx) * gather(y0, x0) + lx * gather(y0, x1))
        + ly * ((1 - lx) * gather(y1, x0) + lx * gather(y1, x1))
    )
    val = val.reshape(n, out_size, r, out_size, r, d).mean(dim=(2, 4))
    return val.permute(0, 3, 1, 2).contiguous()


def roi_align(
    pyramid: Sequence[torch.Tensor],
    boxes: torch.Tensor,
    batch_index: torch.Tensor,
    out_size: int,
    canonical_size: float = 32.0,
    sampling_ratio: int = 2,
    strides: Sequence[int] = STRIDES,
) -> torch.Tensor:
    """RoIAlign over the pyramid, reading each box from its assigned level."""
    levels = assign_levels(boxes, canonical_size, len(pyramid))
    d = pyramid[0].shape[1]
    out = pyramid[0].new_zeros((boxes.shape[0], d, out_size, out_size))
    parts, order = [], []
    for lvl, (feat, stride) in enumerate(zip(pyramid, strides)):
        idx = torch.nonzero(levels == lvl).flatten()
        if idx.numel() == 0:
            continue
        parts.append(
            roi_align_level(
                feat, boxes[idx], batch_index[idx], out_size, 1.0 / stride, sampling_ratio
            )
        )
        order.append(idx)
    if not parts:
        return out
    order_t = torch.cat(order)
    inverse = torch.empty_like(order_t)
    inverse[order_t] = torch.arange(order_t.numel(), device=order_t.device)
    return torch.cat(parts)[inverse]


class BoxHead(nn.Module):
    """Four 3x3 convs, GAP, then linear classification and class-agnostic regression."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.box_head_dim
        self.convs = nn.ModuleList([_conv(cfg.fpn_dim, c)] + [_conv(c, c) for _ in range(3)])
        self.cls = nn.Linear(c, cfg.num_classes + 1)
        self.reg = nn.Linear(c, 4)

    def forward(self, x: torch.Tensor) -> BoxHeadOutput:
        for conv in self.convs:
            x = F.relu(conv(x))
        pooled = x.mean(dim=(2, 3))
        return BoxHeadOutput(f_box=x, cls_logits=self.cls(pooled), box_deltas=self.reg(pooled))

    def cam(self, f_box: torch.Tensor) -> torch.Tensor:
        return compute_cam(f_box, self.cls.weight)


def compute_cam(f_box: torch.Tensor, w_cls: torch.Tensor) -> torch.Tensor:
    """1x1 convolution of the pre-GAP box features with the classification weights.

    No bias and no activation, so ``cam.mean((2, 3)) + bias`` reproduces the logits.
    """
    if f_box.shape[1] != w_cls.shape[1]:
        raise ValueError(
            f"box features have {f_box.shape[1]} channels, classifier expects {w_cls.shape[1]}"
        )
    return torch.einsum("kc,nchw->nkhw", w_cls, f_box)


def select_prior_slice(cam: torch.Tensor, classes: torch.Tensor) -> torch.Tensor:
    """Pick one CAM channel per RoI; result is N x 1 x S x S and stays in the graph."""
    idx = classes.long().view(-1, 1, 1, 1).expand(-1, 1, cam.shape[2], cam.shape[3])
    return torch.gather(cam, 1, idx)


def inject_prior(f_fpn: torch.Tensor, prior: torch.Tensor) -> torch.Tensor:
    """Bilinearly resize the single-channel prior to the mask grid and add it to every channel."""
    if prior.shape[1] != 1:
        raise ValueError("prior must be single-channel")
    if prior.shape[-2:] != f_fpn.shape[-2:]:
        prior = F.interpolate(prior, size=f_fpn.shape[-2:], mode="bilinear", align_corners=False)
    return f_fpn + prior


class MaskHead(nn.Module):
    """Seven conv-BN-ReLU blocks, a stride-2 transposed conv and a 1x1 predictor."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.fpn_dim
        self.convs = nn.ModuleList([nn.Conv2d(d, d, 3, padding=1, bias=False) for _ in range(7)])
        self.norms = nn.ModuleList([nn.BatchNorm2d(d) for _ in range(7)])
        self.upsample = nn.ConvTranspose2d(d, d, 2, stride=2)
        self.predictor = nn.Conv2d(d, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for conv, bn in zip(self.convs, self.norms):
            x = F.relu(bn(conv(x)))
        x = F.relu(self.upsample(x))
        return self.predictor(x)


class OPMaskModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.backbone = LitePyramid(cfg)
        self.box_head = BoxHead(cfg)
        self.mask_head = MaskHead(cfg) if cfg.variant != "cls_only" else None
        init_weights(self)

    @property
    def variant(self) -> str:
        return self.cfg.variant

    def extract(self, pyramid, boxes, batch_index, out_size) -> torch.Tensor:
        return roi_align(
            pyramid,
            boxes,
            batch_index,
            out_size,
            canonical_size=self.cfg.canonical_size,
            sampling_ratio=self.cfg.sampling_ratio,
        )

    def forward(
        self,
        images: torch.Tensor,
        boxes: torch.Tensor,
        batch_index: torch.Tensor,
        mask_index: torch.Tensor | None = None,
        mask_classes: torch.Tensor | None = None,
    ) -> ModelOutput:
        """Run all heads on proposals ``boxes`` (x0, y0, x1, y1) of image ``batch_index``.

        ``mask_index``/``mask_classes`` pick the RoIs for the mask branch and the
        CAM channel each one uses (ground-truth labels when training). When left
        out in eval mode, RoIs whose predicted class is not background enter the
        mask branch with their predicted class. In train mode with no
        ``mask_index`` the mask branch is skipped.
        """
        pyramid = self.backbone(images)
        box_feats = self.extract(pyramid, boxes, batch_index, self.cfg.box_roi_size)
        head = self.box_head(box_feats)
        cam = self.box_head.cam(head.f_box)
        out = ModelOutput(cls_logits=head.cls_logits, box_deltas=head.box_deltas, cam=cam)

        if mask_index is None and not self.training and self.mask_head is not None:
            pred = head.cls_logits.argmax(dim=1)
            mask_index = torch.nonzero(pred != self.cfg.background).flatten()
            mask_classes = pred[mask_index]
        if mask_index is None:
            return out
        if self.mask_head is None:
            raise ValueError("cls_only variant has no mask head")
        if mask_classes is None or mask_classes.shape[0] != mask_index.shape[0]:
            raise ValueError("mask_classes must give one class per mask RoI")
        if bool((mask_classes == self.cfg.background).any()):
            raise ValueError("background RoIs never enter the mask branch")

        f_fpn = self.extract(pyramid, boxes[mask_index], batch_index[mask_index], self.cfg.mask_roi_size)
        prior = select_prior_slice(cam[mask_index], mask_classes)
        f_object = inject_prior(f_fpn, prior) if self.variant == "opmask" else f_fpn
        out.mask_index = mask_index
        out.mask_classes = mask_classes
        out.prior = prior
        out.f_fpn = f_fpn
        out.f_object = f_object
        if mask_index.numel() == 0:
            s = self.cfg.mask_out_size
            out.mask_logits = f_fpn.new_zeros((0, 1, s, s))
        else:
            out.mask_logits = self.mask_head(f_object)
        return out


def box_head_param_names(model: OPMaskModel) -> list[str]:
    return [n for n, _ in model.named_parameters() if n.startswith("box_head.convs.")]


def parameter_groups(model: nn.Module) -> dict[str, list[tuple[str, torch.Tensor]]]:
    """Parameters grouped by top-level layer, e.g. ``box_head.convs.0``."""
    groups: dict[str, list] = {}
    for name, p in model.named_parameters():
        parts = name.split(".")
        key = ".".join(parts[:-1]) if len(parts) > 1 else name
        groups.setdefault(key, []).append((name, p))
    return groups


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def mask_head_receptive_field(num_convs: int = 7, kernel: int = 3) -> int:
    return 1 + num_convs * (kernel - 1)

