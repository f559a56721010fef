"""Overfit the tiny preset on a single 32x32 image at x2.

A fast, deterministic sanity loop: L1 under Adam at lr 1e-3 should fall well
below 0.02 within 500 steps and reconstruct the training image above 30 dB.
This trims the run to 150 steps to stay snappy; pass --full for all 500.
"""

import sys
import tempfile
from pathlib import Path

from contrast_sr.config import TrainConfig, model_preset
from contrast_sr.data import (DatasetManifest, ManifestEntry, cached_lr, load_png,
                              modcrop, write_bundled_set)
from contrast_sr.metrics import psnr_y
from contrast_sr.model import load_model, upscale_image
from contrast_sr.trainer import train

steps = 500 if "--full" in sys.argv else 150
work = Path(tempfile.mkdtemp(prefix="contrast_sr_demo_"))
write_bundled_set(work / "data")

manifest = DatasetManifest(root=str(work / "data"), scale=2,
                           entries=[ManifestEntry(hr="HR/smooth32.png")])
train_cfg = TrainConfig(total_iters=steps, batch_size=4, patch_size=16,
                        base_lr=1e-3, milestones=(), seed=0, log_every=50,
                        checkpoint_every=steps, augment=False)

print(f"training tiny preset for {steps} steps on one 32x32 image ...")
records = train(model_preset("tiny"), train_cfg, manifest, work / "run",
                quiet=False)

net = load_model(work / "run" / f"ckpt_{steps:08d}.ckpt")
hr = modcrop(load_png(work / "data" / "HR" / "smooth32.png"), 2)
lr = cached_lr(manifest, manifest.entries[0])
sr = upscale_image(net, lr)

print(f"\nfinal L1 loss      : {records[-1]['loss']:.4f}")
print(f"train-patch PSNR   : {psnr_y(sr, hr, crop=2):.2f} dB")
print(f"artifacts under    : {work}")
