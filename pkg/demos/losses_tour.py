"""A look inside the loss: mask algebra, contrastive samples and the terms.

Run:  python demos/losses_tour.py

Builds one small batch from the synthetic set, then scores three candidate
fused images: the visible input, the infrared input, and a hand-made
composite that takes each salient region from the modality that owns it.
"""

import tempfile

import torch

from ivfuse.backbone import TestBackbone
from ivfuse.contextual import ContrastiveConfig, build_sample_set
from ivfuse.data import Dataset, make_batch, read_manifest
from ivfuse.pixel_losses import total_loss
from ivfuse.synthetic import make_synthetic_dataset

with tempfile.TemporaryDirectory() as tmp:
    manifest = make_synthetic_dataset(tmp, n_pairs=12, size=64, seed=1)
    batch = make_batch(Dataset(read_manifest(manifest)), 12, 3, seed=0, epoch=0, index=0,
                       patch_size=64)

vi, ir, parts = batch.tensors(torch.float64)
shared, u_vi, u_ir, bg = (parts[:, k:k + 1].double() for k in range(4))
print("pixels per region (first item): shared %d, unique vi %d, unique ir %d, background %d"
      % tuple(int(parts[0, k].sum()) for k in range(4)))

# anchors and positives come from group 1, one negative per group and filter
samples = build_sample_set(vi, vi, ir, parts, 3)
print(f"{samples.num_groups} groups of {samples.group_size}; filters:", ", ".join(samples.terms))

composite = u_ir * ir + (1 - u_ir) * torch.maximum(vi, ir * shared)
backbone = TestBackbone(seed=0).double()
cfg = ContrastiveConfig()
for name, fused in (("visible", vi), ("infrared", ir), ("composite", composite)):
    _, report = total_loss(fused, vi, ir, parts, backbone, contrastive=cfg)
    d = report.as_dict()
    print(f"{name:9s} L_total {d['L_total']:8.3f}  pixel {d['L_pixel']:7.3f}  "
          f"con {d['L_con']:7.3f} (unique {d['L_unique']:.3f}, share {d['L_share']:.3f}, "
          f"bg {d['L_bg']:.3f})")
