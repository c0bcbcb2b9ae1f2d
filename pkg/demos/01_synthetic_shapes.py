"""Generate overlapping-shapes scenes, look at them, and check the annotation format.

Run: python demos/01_synthetic_shapes.py [out_dir]
Writes a contact sheet of eight scenes next to their instance masks.
"""
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from opmask import evalkit
from opmask.synthdata import GenConfig, decode_rle, encode_rle, generate_dataset, generate_scene, load_manifest, scene_seed

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/shapes")
out.mkdir(parents=True, exist_ok=True)

# overlap pressure controls how tightly instances cluster
for pressure in (0.0, 0.8):
    cfg = GenConfig(overlap_pressure=pressure)
    scenes = [generate_scene(cfg, scene_seed(0, i), scene_id=i) for i in range(8)]
    tiles = []
    for s in scenes:
        label = np.zeros(s.image.shape[:2])
        for k, inst in enumerate(s.instances, start=1):
            label[inst.mask] = k
        label_rgb = np.repeat((label / max(label.max(), 1))[..., None], 3, axis=2)
        tiles.append(np.concatenate([s.image, label_rgb], axis=0))
    sheet = (np.concatenate(tiles, axis=1) * 255).astype(np.uint8)
    Image.fromarray(sheet).save(out / f"scenes_pressure_{pressure}.png")

    gts = [
        evalkit.GroundTruth(j, s.scene_id, inst.class_id, tuple(inst.box), inst.mask)
        for s in scenes
        for j, inst in enumerate(s.instances)
    ]
    # ids must be unique across the whole set
    gts = [evalkit.GroundTruth(i, g.image_id, g.class_id, g.box, g.mask) for i, g in enumerate(gts)]
    split = evalkit.ambiguity_partition(gts)
    print(f"pressure {pressure}: {len(gts)} instances, {len(split.ambiguous)} ambiguous (box IoU >= 0.5)")

# RLE is column-major and starts with a run of zeros
mask = scenes[0].instances[0].mask
counts = encode_rle(mask)
assert np.array_equal(decode_rle(counts, *mask.shape), mask)
print("first RLE runs:", counts[:6])

# a persisted dataset: PNG images plus a COCO-like annotations.json
manifest = generate_dataset(GenConfig(overlap_pressure=0.8), 12, seed=0, out_dir=out / "dataset")
m = load_manifest(manifest.root)
print(f"dataset at {m.root}: {len(m.images)} images, {len(m.annotations)} annotations, {len(m.categories)} classes")
