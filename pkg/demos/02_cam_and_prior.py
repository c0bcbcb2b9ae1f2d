"""The class activation map of the box head, and how it reaches the mask head.

Run: python demos/02_cam_and_prior.py
"""
import numpy as np
import torch

from opmask.model import ModelConfig, OPMaskModel, box_head_param_names, compute_cam, inject_prior
from opmask.train import RoIBatch, compute_losses, model_inputs

torch.manual_seed(0)
cfg = ModelConfig(fpn_dim=8, box_head_dim=16)
model = OPMaskModel(cfg).double()

# CAM = 1x1 conv of the pre-GAP box features with the classifier weights,
# so its spatial mean plus the bias is exactly the classification logit
f_box = torch.randn(5, cfg.box_head_dim, 7, 7, dtype=torch.float64)
cam = compute_cam(f_box, model.box_head.cls.weight)
logits = model.box_head.cls(f_box.mean(dim=(2, 3)))
print("max |mean(CAM) + b - logits| =", float((cam.mean(dim=(2, 3)) + model.box_head.cls.bias - logits).abs().max().detach()))

# the chosen 7x7 slice is resized to 14x14 and added to every mask-feature channel
f_mask = torch.zeros(1, cfg.fpn_dim, 14, 14, dtype=torch.float64)
prior = cam[:1, 2:3]
injected = inject_prior(f_mask, prior)
print("prior injected into all channels:", bool(torch.allclose(injected[0, 0], injected[0, -1])))

# mask gradients flow into the box head only when the prior is injected
rng = np.random.default_rng(0)
images = torch.rand(1, 3, 64, 64, dtype=torch.float64)
boxes = np.array([[8, 8, 40, 40], [20, 16, 56, 50]], dtype=np.float32)
batch = RoIBatch(
    boxes=boxes,
    image_index=np.zeros(2, dtype=np.int64),
    matched=np.array([0, 1]),
    labels=np.array([0, 1]),
    reg_targets=np.zeros((2, 4), dtype=np.float32),
    mask_targets=(rng.random((2, 28, 28)) < 0.5).astype(np.float32),
    supervised=np.array([True, True]),
)
for variant in ("opmask", "baseline"):
    torch.manual_seed(0)
    m = OPMaskModel(ModelConfig(fpn_dim=8, box_head_dim=16, variant=variant)).double()
    l_mask = compute_losses(m(images, **model_inputs(batch, variant)), batch).l_mask
    params = dict(m.named_parameters())
    grads = torch.autograd.grad(l_mask, [params[n] for n in box_head_param_names(m)], allow_unused=True)
    total = sum(0.0 if g is None else float(g.abs().sum()) for g in grads)
    print(f"{variant:8s} |dL_mask / d box-head convs| = {total:.3e}")
