"""Train OPMask and the baseline briefly on a small partially supervised split.

Strong classes 0-3 get masks; classes 4-7 only boxes. Evaluation uses the
ground-truth boxes as proposals, so the numbers measure mask quality.

Run: python demos/04_train_and_evaluate.py [iters]
A few hundred iterations take a few minutes on one CPU core; the numbers are
far from converged and only meant to show the pipeline.
"""
import sys

import torch

from opmask.experiment import evaluate_predictions, ground_truths, predict
from opmask.model import ModelConfig
from opmask.synthdata import GenConfig, generate_scene, scene_seed
from opmask.train import TrainConfig, train

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 300
torch.set_num_threads(1)
gen = GenConfig(overlap_pressure=0.8)
train_scenes = [generate_scene(gen, scene_seed(0, i), i) for i in range(200)]
val_scenes = [generate_scene(gen, scene_seed(1000, i), i) for i in range(60)]
gts, train_gts = ground_truths(val_scenes), ground_truths(train_scenes)

for variant in ("opmask", "baseline", "cls_only"):
    cfg = TrainConfig(total_iters=iters, warmup_iters=min(100, iters), variant=variant, strong_ids=(0, 1, 2, 3))
    model, _, _ = train(cfg, train_scenes, ModelConfig(fpn_dim=24, box_head_dim=48, variant=variant))
    res = evaluate_predictions(
        predict(model, val_scenes), gts, 8, cfg.strong_ids, train_gts, with_masks=variant != "cls_only"
    )
    line = f"{variant:8s} prior-as-mask AP50 {res['prior']['all']['ap50']:.3f}"
    if "mask" in res:
        line += f"  mask AP strong {res['mask']['strong']['ap']:.3f} weak {res['mask']['weak']['ap']:.3f}"
    print(line)
