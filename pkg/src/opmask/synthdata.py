"""Procedural overlapping-shapes dataset for partially supervised instance segmentation.

Scenes are pure functions of ``(GenConfig, seed)``. Each instance belongs to one
of ``num_classes`` shape classes; every class has its own geometry family, base
colour and stripe texture. By default an instance's body is a plain,
low-saturation colour unrelated to its class, and the class colour and stripes
appear only on a small badge at the instance's interior-most point. The badge
is the most discriminative region, so a class activation map tends to cover
it rather than the whole object. Ambiguity is manufactured by placing instances next
to already-placed ones ("clustered" placement) with a probability and tightness
controlled by ``overlap_pressure``. Masks are modal: later instances occlude
earlier ones.

Per-scene seeds are derived from a root seed with ``numpy.random.SeedSequence``
using the scene index as spawn key, so a dataset is reproducible on any machine
from ``(config, n, root_seed)`` alone.
"""
from __future__ import annotations

import colorsys
import dataclasses
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

FAMILIES = (
    "disk",
    "rectangle",
    "triangle",
    "ring",
    "star",
    "cross",
    "diamond",
    "crescent",
    "hexagon",
    "ellipse",
)

# Base colours, one per class; chosen far apart in RGB.
_PALETTE = np.array(
    [
        [0.90, 0.20, 0.20],
        [0.20, 0.75, 0.25],
        [0.20, 0.35, 0.90],
        [0.95, 0.80, 0.15],
        [0.80, 0.25, 0.85],
        [0.15, 0.80, 0.85],
        [0.95, 0.55, 0.10],
        [0.55, 0.35, 0.20],
        [0.95, 0.95, 0.95],
        [0.45, 0.60, 0.30],
    ]
)

# Badge radius relative to the shape radius; fits inside the thinnest family (cross arms).
BADGE_FRACTION = 0.3

# Tendency of each class to be placed next to other instances. Both halves of
# the default 4/4 split contain low- and high-overlap classes, and within each
# half sociability is not ordered by shape difficulty (thin families such as
# ring, cross and crescent are not all the most social), so per-class overlap
# is not a proxy for intrinsic shape difficulty.
DEFAULT_SOCIABILITY = (0.15, 1.0, 0.5, 0.75, 0.1, 0.35, 1.0, 0.7)


class DataFormatError(ValueError):
    """Malformed annotation or RLE payload."""


@dataclass(frozen=True)
class ShapeClass:
    id: int
    name: str
    family: str
    color: tuple[float, float, float]
    texture: tuple[float, float, float]  # stripe frequency, angle, amplitude


@dataclass
class GenConfig:
    image_size: int = 128
    num_classes: int = 8
    min_instances: int = 1
    max_instances: int = 5
    min_size: float = 20.0  # shape diameter in pixels
    max_size: float = 44.0
    overlap_pressure: float = 0.5
    sociability: tuple[float, ...] | None = None
    min_visible: int = 24
    background_noise: float = 0.04
    color_jitter: float = 0.06
    # "badge": plain class-agnostic body plus a small class-coloured badge (the
    # only class-specific region); "instance": random hue per instance with
    # class stripes over the whole body; "class": class palette over the body
    color_mode: str = "badge"

    def validate(self) -> None:
        if self.image_size < 64:
            raise ValueError(f"image_size must be >= 64, got {self.image_size}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.num_classes > len(FAMILIES):
            raise ValueError(f"at most {len(FAMILIES)} classes are available")
        if not 1 <= self.min_instances <= self.max_instances:
            raise ValueError("need 1 <= min_instances <= max_instances")
        if not 0 < self.min_size <= self.max_size:
            raise ValueError("need 0 < min_size <= max_size")
        if self.min_size > self.image_size:
            raise ValueError("min_size exceeds image_size; instances cannot fit")
        if not 0.0 <= self.overlap_pressure <= 1.0:
            raise ValueError("overlap_pressure must lie in [0, 1]")
        if self.color_mode not in ("badge", "instance", "class"):
            raise ValueError(f"color_mode must be 'badge', 'instance' or 'class', got {self.color_mode!r}")
        soc = self.class_sociability()
        if len(soc) != self.num_classes:
            raise ValueError("sociability needs one entry per class")

    def class_sociability(self) -> tuple[float, ...]:
        if self.sociability is not None:
            return tuple(float(s) for s in self.sociability)
        base = DEFAULT_SOCIABILITY
        return tuple(base[i % len(base)] for i in range(self.num_classes))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if d["sociability"] is not None:
            d["sociability"] = list(d["sociability"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        d = dict(d)
        if d.get("sociability") is not None:
            d["sociability"] = tuple(d["sociability"])
        return cls(**d)


@dataclass
class Instance:
    class_id: int
    box: tuple[int, int, int, int]  # x0, y0, x1, y1 with exclusive max edges
    mask: np.ndarray  # bool, H x W

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@dataclass
class Scene:
    image: np.ndarray  # H x W x 3 float in [0, 1]
    instances: list[Instance]
    scene_id: int = 0
    seed: int = 0


@dataclass(frozen=True)
class ClassSplit:
    strong_ids: frozenset[int]
    weak_ids: frozenset[int]

    @property
    def all_ids(self) -> frozenset[int]:
        return self.strong_ids | self.weak_ids

    def is_strong(self, class_id: int) -> bool:
        return class_id in self.strong_ids


@dataclass
class DatasetManifest:
    root: Path
    images: list[dict]
    annotations: list[dict]
    categories: list[dict]
    meta: dict = field(default_factory=dict)

    @property
    def annotation_path(self) -> Path:
        return self.root / "annotations.json"


def shape_classes(num_classes: int) -> list[ShapeClass]:
    classes = []
    for k in range(num_classes):
        # stripes: four orientations 45 degrees apart times two periods (~13 px, ~5 px)
        freq = 0.5 if (k // 4) % 2 == 0 else 1.2
        angle = 45.0 * (k % 4)
        amp = 0.45
        classes.append(
            ShapeClass(
                id=k,
                name=FAMILIES[k],
                family=FAMILIES[k],
                color=tuple(float(c) for c in _PALETTE[k]),
                texture=(freq, angle, amp),
            )
        )
    return classes


def bbox_from_mask(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ValueError("empty mask has no bounding box")
    return int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1


def _box_iou(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def _regular_polygon(u, v, n, phase=0.0):
    inside = np.ones(u.shape, dtype=bool)
    apothem = np.cos(np.pi / n)
    for k in range(n):
        a = phase + 2 * np.pi * k / n
        inside &= u * np.cos(a) + v * np.sin(a) <= apothem
    return inside


def _family_mask(family: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Shape in local coordinates scaled so the shape fits the unit disk."""
    rho = np.hypot(u, v)
    if family == "disk":
        return rho <= 1.0
    if family == "rectangle":
        return (np.abs(u) <= 0.85) & (np.abs(v) <= 0.5)
    if family == "triangle":
        return _regular_polygon(u, v, 3, phase=np.pi / 2)
    if family == "ring":
        return (rho <= 1.0) & (rho >= 0.55)
    if family == "star":
        phi = np.arctan2(v, u)
        return rho <= 0.5 + 0.5 * np.abs(np.cos(2.5 * phi)) ** 1.5
    if family == "cross":
        return ((np.abs(u) <= 0.95) & (np.abs(v) <= 0.32)) | (
            (np.abs(v) <= 0.95) & (np.abs(u) <= 0.32)
        )
    if family == "diamond":
        return np.abs(u) / 1.0 + np.abs(v) / 0.6 <= 1.0
    if family == "crescent":
        return (rho <= 1.0) & (np.hypot(u - 0.5, v) > 0.75)
    if family == "hexagon":
        return _regular_polygon(u, v, 6)
    if family == "ellipse":
        return (u / 1.0) ** 2 + (v / 0.55) ** 2 <= 1.0
    raise ValueError(f"unknown family {family!r}")


def render_shape(
    shape: ShapeClass, cx: float, cy: float, radius: float, theta: float, size: int
) -> np.ndarray:
    """Boolean mask of one shape, evaluated at pixel centres and clipped to the image."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dx, dy = xs - cx, ys - cy
    c, s = np.cos(theta), np.sin(theta)
    u = (c * dx + s * dy) / radius
    v = (-s * dx + c * dy) / radius
    return _family_mask(shape.family, u, v)


def _texture(shape: ShapeClass, color: np.ndarray, size: int) -> np.ndarray:
    freq, angle, amp = shape.texture
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    a = np.deg2rad(angle)
    wave = 0.5 * (1.0 + np.sin(freq * (xs * np.cos(a) + ys * np.sin(a))))
    return color[None, None, :] * (1.0 - amp * wave[..., None])


def _deepest_point(mask: np.ndarray, cx: float, cy: float) -> tuple[int, int]:
    """A pixel of maximal 4-neighbour erosion depth; ties go to the one nearest (cx, cy)."""
    core = mask
    while True:
        inner = core.copy()
        inner[1:, :] &= core[:-1, :]
        inner[:-1, :] &= core[1:, :]
        inner[:, 1:] &= core[:, :-1]
        inner[:, :-1] &= core[:, 1:]
        inner[0, :] = inner[-1, :] = inner[:, 0] = inner[:, -1] = False
        if not inner.any():
            break
        core = inner
    ys, xs = np.nonzero(core)
    k = int(np.argmin((xs + 0.5 - cx) ** 2 + (ys + 0.5 - cy) ** 2))
    return int(ys[k]), int(xs[k])


def _badge_disc(mask: np.ndarray, cx: float, cy: float, r: float) -> np.ndarray:
    by, bx = _deepest_point(mask, cx, cy)
    ys, xs = np.mgrid[0 : mask.shape[0], 0 : mask.shape[1]]
    return (ys - by) ** 2 + (xs - bx) ** 2 <= r * r


def _background(rng: np.random.Generator, cfg: GenConfig) -> np.ndarray:
    size = cfg.image_size
    base = rng.uniform(0.25, 0.45)
    gx, gy = rng.uniform(-0.1, 0.1, size=2)
    ys, xs = np.mgrid[0:size, 0:size] / size
    img = base + gx * (xs - 0.5) + gy * (ys - 0.5)
    img = np.repeat(img[..., None], 3, axis=2)
    img += rng.normal(0.0, cfg.background_noise, size=img.shape)
    return img


def generate_scene(cfg: GenConfig, seed: int, scene_id: int = 0) -> Scene:
    cfg.validate()
    rng = np.random.default_rng(seed)
    size = cfg.image_size
    classes = shape_classes(cfg.num_classes)
    social = cfg.class_sociability()
    image = _background(rng, cfg)

    n = int(rng.integers(cfg.min_instances, cfg.max_instances + 1))
    placed: list[tuple[int, float, float, float, np.ndarray]] = []
    for _ in range(n):
        cls = int(rng.integers(cfg.num_classes))
        radius = rng.uniform(cfg.min_size, cfg.max_size) / 2.0
        theta = rng.uniform(0.0, 2 * np.pi)
        shape = classes[cls]
        lo, hi = min(radius, size / 2), max(size - radius, size / 2)
        mask = None
        if placed and rng.random() < cfg.overlap_pressure * social[cls]:
            _, ax, ay, ar, _ = placed[int(rng.integers(len(placed)))]
            spread = (1.0 - 0.85 * cfg.overlap_pressure) * (ar + radius)
            ang = rng.uniform(0.0, 2 * np.pi)
            dist = spread * rng.uniform(0.0, 1.0)
            cx = float(np.clip(ax + dist * np.cos(ang), lo, hi))
            cy = float(np.clip(ay + dist * np.sin(ang), lo, hi))
            mask = render_shape(shape, cx, cy, radius, theta, size)
            if not mask.any():
                mask = None
        else:
            boxes = [bbox_from_mask(p[4]) for p in placed]
            for _attempt in range(30):
                cx, cy = rng.uniform(lo, hi, size=2)
                cand = render_shape(shape, cx, cy, radius, theta, size)
                if not cand.any():
                    continue
                box = bbox_from_mask(cand)
                if all(_box_iou(box, b) == 0.0 for b in boxes):
                    mask = cand
                    break
        if mask is None:
            continue
        if cfg.color_mode == "badge":
            body = colorsys.hsv_to_rgb(rng.uniform(), rng.uniform(0.0, 0.25), rng.uniform(0.6, 0.95))
            image[mask] = np.clip(np.asarray(body) + rng.normal(0.0, cfg.color_jitter, size=3), 0.0, 1.0)
            badge = mask & _badge_disc(mask, cx, cy, max(BADGE_FRACTION * radius, 2.0))
            color = np.clip(np.asarray(shape.color) + rng.normal(0.0, cfg.color_jitter, size=3), 0.0, 1.0)
            image[badge] = _texture(shape, color, size)[badge]
        else:
            if cfg.color_mode == "instance":
                base = colorsys.hsv_to_rgb(rng.uniform(), rng.uniform(0.55, 0.9), rng.uniform(0.7, 1.0))
            else:
                base = shape.color
            color = np.clip(np.asarray(base) + rng.normal(0.0, cfg.color_jitter, size=3), 0.0, 1.0)
            image[mask] = _texture(shape, color, size)[mask]
        placed.append((cls, cx, cy, radius, mask))

    # Modal masks: remove pixels covered by anything drawn later.
    instances = []
    covered = np.zeros((size, size), dtype=bool)
    for cls, _, _, _, mask in reversed(placed):
        visible = mask & ~covered
        covered |= mask
        if visible.sum() < cfg.min_visible:
            continue
        instances.append(Instance(cls, bbox_from_mask(visible), visible))
    instances.reverse()
    return Scene(
        image=np.clip(image, 0.0, 1.0).astype(np.float32),
        instances=instances,
        scene_id=scene_id,
        seed=int(seed),
    )


def scene_seed(root_seed: int, index: int) -> int:
    """Per-scene seed: SeedSequence(root, spawn_key=(index,)) -> 63-bit integer."""
    ss = np.random.SeedSequence(entropy=int(root_seed), spawn_key=(int(index),))
    return int(ss.generate_state(2, dtype=np.uint32).astype(np.uint64).dot([1 << 31, 1]))


# --- run-length encoding ---------------------------------------------------


def encode_rle(mask: np.ndarray) -> list[int]:
    """Column-major run lengths, the first run counting zeros."""
    flat = np.asarray(mask, dtype=bool).ravel(order="F")
    if flat.size == 0:
        return [0]
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    edges = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(edges).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return [int(r) for r in runs]


def decode_rle(counts: Sequence[int], height: int, width: int) -> np.ndarray:
    counts = [int(c) for c in counts]
    if any(c < 0 for c in counts):
        raise DataFormatError("negative run length")
    if sum(counts) != height * width:
        raise DataFormatError(
            f"run lengths sum to {sum(counts)}, expected {height * width}"
        )
    values = np.arange(len(counts)) % 2 == 1
    flat = np.repeat(values, counts)
    return flat.reshape((width, height)).T.copy()


# --- class splits ----------------------------------------------------------


def make_class_split(
    all_ids: Iterable[int],
    strong_ids: Iterable[int] | None = None,
    *,
    k: int | None = None,
    seed: int | None = None,
) -> ClassSplit:
    """Explicit split from ``strong_ids`` or a random ``k``-class strong set."""
    all_set = frozenset(int(i) for i in all_ids)
    if strong_ids is None:
        if k is None:
            raise ValueError("give strong_ids or k")
        if not 0 <= k <= len(all_set):
            raise ValueError(f"k={k} out of range for {len(all_set)} classes")
        rng = np.random.default_rng(seed)
        strong = frozenset(int(i) for i in rng.choice(sorted(all_set), size=k, replace=False))
    else:
        strong = frozenset(int(i) for i in strong_ids)
    extra = strong - all_set
    if extra:
        raise ValueError(f"strong ids {sorted(extra)} are not among the class ids")
    return ClassSplit(strong_ids=strong, weak_ids=all_set - strong)


# --- persistence -------------------------------------------------------------


def scene_annotations(scene: Scene, image_id: int, first_ann_id: int) -> list[dict]:
    size = scene.image.shape[:2]
    anns = []
    for j, inst in enumerate(scene.instances):
        x0, y0, x1, y1 = inst.box
        anns.append(
            {
                "id": first_ann_id + j,
                "image_id": image_id,
                "category_id": inst.class_id,
                "bbox": [x0, y0, x1 - x0, y1 - y0],
                "rle": {"size": [int(size[0]), int(size[1])], "counts": encode_rle(inst.mask)},
            }
        )
    return anns


def generate_dataset(cfg: GenConfig, n: int, seed: int, out_dir) -> DatasetManifest:
    if n < 1:
        raise ValueError("n must be >= 1")
    cfg.validate()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    images, annotations = [], []
    for i in range(n):
        scene = generate_scene(cfg, scene_seed(seed, i), scene_id=i)
        rel = f"images/{i:06d}.png"
        pixels = np.round(scene.image * 255.0).astype(np.uint8)
        Image.fromarray(pixels, mode="RGB").save(out / rel, format="PNG")
        images.append({"id": i, "file": rel, "height": cfg.image_size, "width": cfg.image_size})
        annotations.extend(scene_annotations(scene, i, len(annotations)))
    categories = [{"id": c.id, "name": c.name} for c in shape_classes(cfg.num_classes)]
    meta = {"seed": int(seed), "config": cfg.to_dict(), "n": int(n)}
    manifest = DatasetManifest(out, images, annotations, categories, meta)
    payload = {
        "images": images,
        "annotations": annotations,
        "categories": categories,
        "meta": meta,
    }
    _atomic_write_text(manifest.annotation_path, json.dumps(payload, separators=(",", ":")))
    return manifest


def _atomic_write_text(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_manifest(path) -> DatasetManifest:
    """Read an annotation file (or its directory) and validate references."""
    path = Path(path)
    if path.is_dir():
        path = path / "annotations.json"
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: {exc}") from exc
    for key in ("images", "annotations", "categories"):
        if key not in data:
            raise DataFormatError(f"{path}: missing field {key!r}")
    ids = {im["id"] for im in data["images"]}
    for ann in data["annotations"]:
        if ann["image_id"] not in ids:
            raise DataFormatError(f"annotation {ann['id']} references unknown image")
    return DatasetManifest(
        path.parent, data["images"], data["annotations"], data["categories"], data.get("meta", {})
    )


def load_scenes(manifest: DatasetManifest) -> list[Scene]:
    """Decode every image and annotation; images come back as float32 in [0, 1]."""
    by_image: dict[int, list[Instance]] = {im["id"]: [] for im in manifest.images}
    for ann in manifest.annotations:
        h, w = ann["rle"]["size"]
        mask = decode_rle(ann["rle"]["counts"], h, w)
        x, y, bw, bh = ann["bbox"]
        box = (int(x), int(y), int(x + bw), int(y + bh))
        by_image[ann["image_id"]].append(Instance(int(ann["category_id"]), box, mask))
    scenes = []
    for im in manifest.images:
        pixels = np.asarray(Image.open(manifest.root / im["file"]).convert("RGB"))
        scenes.append(
            Scene(
                image=pixels.astype(np.float32) / 255.0,
                instances=by_image[im["id"]],
                scene_id=int(im["id"]),
            )
        )
    return scenes
