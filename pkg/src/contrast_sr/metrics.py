"""Y-channel PSNR and SSIM with the standard border-cropping protocol.

Both metrics run on the BT.601 studio-swing luminance plane (values in
[16, 235]) computed from float RGB.  The border crop equals the upscaling
factor unless stated otherwise; reports always record the crop used, since
it changes the numbers.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.signal import convolve2d

from .errors import DataError, ShapeError

Y_COEF = (65.481, 128.553, 24.966)
Y_OFFSET = 16.0


def rgb_to_y(img, quantize_first=False):
    """BT.601 luminance from [0, 1] RGB; output in [16, 235].

    ``quantize_first`` rounds RGB to 8-bit before the transform, for strict
    parity with pipelines that measure on saved files.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected (h, w, 3), got {img.shape}")
    if quantize_first:
        img = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5) / 255.0
    r, g, b = img[:, :, 0], img[:, :, 1], img[:, :, 2]
    return Y_COEF[0] * r + Y_COEF[1] * g + Y_COEF[2] * b + Y_OFFSET


def _crop(plane, crop):
    if crop == 0:
        return plane
    h, w = plane.shape
    if crop * 2 >= min(h, w):
        raise DataError(f"crop {crop} too large for {h}x{w} plane")
    return plane[crop:h - crop, crop:w - crop]


def psnr_y(sr, hr, crop, quantize_first=False):
    """Peak signal-to-noise ratio in dB on cropped Y planes; +inf when equal."""
    sr, hr = np.asarray(sr), np.asarray(hr)
    if sr.shape != hr.shape:
        raise ShapeError(f"extent mismatch: {sr.shape} vs {hr.shape}")
    a = _crop(rgb_to_y(sr, quantize_first), crop)
    b = _crop(rgb_to_y(hr, quantize_first), crop)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(255.0 ** 2 / mse)


SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = (0.01 * 255.0) ** 2
SSIM_C2 = (0.03 * 255.0) ** 2


def _gaussian_kernel():
    half = SSIM_WINDOW // 2
    coords = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(coords ** 2) / (2.0 * SSIM_SIGMA ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim_y(sr, hr, crop, quantize_first=False):
    """Mean structural similarity over an 11x11 Gaussian-weighted local map,
    valid-region convolution, on cropped Y planes."""
    sr, hr = np.asarray(sr), np.asarray(hr)
    if sr.shape != hr.shape:
        raise ShapeError(f"extent mismatch: {sr.shape} vs {hr.shape}")
    a = _crop(rgb_to_y(sr, quantize_first), crop)
    b = _crop(rgb_to_y(hr, quantize_first), crop)
    if min(a.shape) < SSIM_WINDOW:
        raise DataError(f"plane {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")

    k = _gaussian_kernel()
    mu1 = convolve2d(a, k, mode="valid")
    mu2 = convolve2d(b, k, mode="valid")
    mu1_sq, mu2_sq, mu12 = mu1 * mu1, mu2 * mu2, mu1 * mu2
    sigma1_sq = convolve2d(a * a, k, mode="valid") - mu1_sq
    sigma2_sq = convolve2d(b * b, k, mode="valid") - mu2_sq
    sigma12 = convolve2d(a * b, k, mode="valid") - mu12

    ssim_map = ((2 * mu12 + SSIM_C1) * (2 * sigma12 + SSIM_C2)) / \
        ((mu1_sq + mu2_sq + SSIM_C1) * (sigma1_sq + sigma2_sq + SSIM_C2))
    return float(ssim_map.mean())


@dataclass
class MetricReport:
    name: str
    psnr_db: float
    ssim: float
    scale: int
    crop_border: int


def evaluate_pair(sr, hr, scale, crop=None, quantize_first=False, name=""):
    crop = scale if crop is None else crop
    return MetricReport(name=name,
                        psnr_db=psnr_y(sr, hr, crop, quantize_first),
                        ssim=ssim_y(sr, hr, crop, quantize_first),
                        scale=scale, crop_border=crop)


def _report_row(report):
    row = asdict(report)
    row["crop"] = row.pop("crop_border")  # wire format uses the short name
    return row


def evaluate_dataset(model_fn, manifest, report_path=None, quantize_first=False):
    """Run ``model_fn`` (LR plane -> SR plane) over a manifest.

    Returns (per-image reports, aggregate report).  When ``report_path`` is
    given, writes JSON lines {name, psnr_db, ssim, scale, crop}: one record
    per image plus a final aggregate.
    """
    from .data import cached_lr, load_png, modcrop

    reports = []
    for entry in manifest.entries:
        hr = modcrop(load_png(manifest.hr_path(entry)), manifest.scale)
        lr = cached_lr(manifest, entry)
        sr = model_fn(lr)
        if sr.shape != hr.shape:
            raise ShapeError(f"{entry.hr}: model produced {sr.shape}, expected {hr.shape}")
        reports.append(evaluate_pair(sr, hr, manifest.scale,
                                     quantize_first=quantize_first, name=entry.hr))

    aggregate = MetricReport(
        name="aggregate",
        psnr_db=float(np.mean([r.psnr_db for r in reports])),
        ssim=float(np.mean([r.ssim for r in reports])),
        scale=manifest.scale,
        crop_border=manifest.scale,
    )
    if report_path is not None:
        with open(report_path, "w") as fh:
            for r in (*reports, aggregate):
                fh.write(json.dumps(_report_row(r)) + "\n")
    return reports, aggregate
