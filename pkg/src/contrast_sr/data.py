"""Image I/O, antialiased bicubic degradation, paired patch sampling and
batching.

An "image plane" throughout is a (h, w, 3) float64 array with values in
[0, 1].  Low-resolution inputs are produced with the antialiased cubic
resampler (a = -0.5, kernel widened by the scale factor when shrinking) that
defines every published super-resolution benchmark; a naive non-antialiased
bicubic silently skews reported dB, which is why the resampler has a dense
oracle test.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .errors import DataError, FormatError

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


# -- PNG I/O -----------------------------------------------------------------------


def load_png(path):
    """Read an 8- or 16-bit RGB/RGBA PNG as a [0, 1] float plane (alpha dropped)."""
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            head = fh.read(8)
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from None
    if head != PNG_SIGNATURE:
        raise FormatError(f"{path} is not a PNG file")
    raw = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FormatError(f"{path} could not be decoded")
    if raw.ndim != 3 or raw.shape[2] not in (3, 4):
        raise FormatError(f"{path}: expected RGB or RGBA, got shape {raw.shape}")
    if raw.shape[2] == 4:
        raw = raw[:, :, :3]
    raw = raw[:, :, ::-1]  # BGR -> RGB
    if raw.dtype == np.uint8:
        return raw.astype(np.float64) / 255.0
    if raw.dtype == np.uint16:
        return raw.astype(np.float64) / 65535.0
    raise FormatError(f"{path}: unsupported bit depth {raw.dtype}")


def save_png(path, img):
    """Write a [0, 1] float plane as an 8-bit PNG.

    Quantisation is round-half-away-from-zero (floor(x*255 + 0.5) for the
    non-negative values handled here).
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DataError(f"expected (h, w, 3) image, got {img.shape}")
    q = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    ok = cv2.imwrite(os.fspath(path), q[:, :, ::-1],
                     [cv2.IMWRITE_PNG_COMPRESSION, 3])
    if not ok:
        raise FormatError(f"failed to write {path}")


# -- bicubic resampling --------------------------------------------------------------


def _cubic(x):
    """Cubic interpolation kernel with a = -0.5."""
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    inner = 1.5 * ax3 - 2.5 * ax2 + 1.0
    outer = -0.5 * ax3 + 2.5 * ax2 - 4.0 * ax + 2.0
    return np.where(ax <= 1.0, inner, np.where(ax <= 2.0, outer, 0.0))


def _resample_taps(in_size, out_size):
    """Tap indices and normalised weights for one axis.

    When shrinking, the kernel is stretched by the inverse scale (antialias)
    so its support covers 4/scale source pixels.  Out-of-range taps are
    clamped to the edge, which re-weights the border like replication.
    """
    scale = out_size / in_size
    if scale < 1.0:
        kernel_scale, support = scale, 4.0 / scale
    else:
        kernel_scale, support = 1.0, 4.0
    centers = (np.arange(out_size) + 0.5) / scale - 0.5
    left = np.floor(centers - support / 2.0).astype(np.int64) + 1
    taps = int(np.ceil(support)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    weights = _cubic((centers[:, None] - idx) * kernel_scale) * kernel_scale
    weights /= weights.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 0, in_size - 1)
    return idx, weights


def bicubic_resize(img, out_h, out_w):
    """Separable antialiased cubic resize of a (h, w, c) or (h, w) plane."""
    if out_h < 1 or out_w < 1:
        raise DataError(f"target extents must be positive, got {out_h}x{out_w}")
    img = np.asarray(img, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    ridx, rw = _resample_taps(img.shape[0], out_h)
    out = np.einsum("ot,otwc->owc", rw, img[ridx], optimize=True)
    cidx, cw = _resample_taps(img.shape[1], out_w)
    out = np.einsum("ot,hotc->hoc", cw, out[:, cidx], optimize=True)
    out = np.clip(out, 0.0, 1.0)
    return out[:, :, 0] if squeeze else out


def degrade(hr, scale):
    """HR -> LR with the benchmark bicubic convention; LR extents ceil(hr/scale)."""
    h, w = hr.shape[:2]
    return bicubic_resize(hr, -(-h // scale), -(-w // scale))


def modcrop(img, scale):
    """Crop an image so both extents are exact multiples of ``scale``."""
    h, w = img.shape[:2]
    return img[: h - h % scale, : w - w % scale]


# -- manifests -----------------------------------------------------------------------


@dataclass
class ManifestEntry:
    hr: str
    lr: str | None = None


@dataclass
class DatasetManifest:
    root: str
    scale: int
    entries: list = field(default_factory=list)
    on_the_fly_lr: bool = True

    def hr_path(self, entry):
        return os.path.join(self.root, entry.hr)

    def lr_path(self, entry):
        return os.path.join(self.root, entry.lr) if entry.lr else None


def load_manifest(path):
    """Read a JSON manifest {scale, entries: [{hr, lr?}]}; paths are relative
    to the manifest's directory.  Every referenced file must exist."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise FormatError(f"cannot read manifest {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid manifest JSON: {exc}") from None
    if "scale" not in doc or "entries" not in doc:
        raise FormatError("manifest must contain 'scale' and 'entries'")
    entries = [ManifestEntry(hr=e["hr"], lr=e.get("lr")) for e in doc["entries"]]
    manifest = DatasetManifest(root=str(path.parent), scale=int(doc["scale"]),
                               entries=entries,
                               on_the_fly_lr=bool(doc.get("on_the_fly_lr", True)))
    for e in entries:
        for p in (manifest.hr_path(e), manifest.lr_path(e)):
            if p is not None and not os.path.isfile(p):
                raise DataError(f"manifest references missing file {p}")
    return manifest


def manifest_from_dir(root, scale):
    """Build a manifest from the HR/ + LRbicX{scale}/ directory convention."""
    root = Path(root)
    hr_dir = root / "HR"
    if not hr_dir.is_dir():
        raise DataError(f"no HR/ directory under {root}")
    lr_dir = root / f"LRbicX{scale}"
    entries = []
    for hr in sorted(hr_dir.glob("*.png")):
        lr = lr_dir / hr.name
        entries.append(ManifestEntry(hr=str(hr.relative_to(root)),
                                     lr=str(lr.relative_to(root)) if lr.is_file() else None))
    if not entries:
        raise DataError(f"no PNG files under {hr_dir}")
    return DatasetManifest(root=str(root), scale=scale, entries=entries)


def cached_lr(manifest, entry):
    """LR plane for an entry, generating and caching LRbicX{scale}/ on demand.

    The cache goes through 8-bit PNG quantisation, so repeated runs are
    byte-identical and training sees the same quantised inputs as disk-based
    benchmark layouts.
    """
    lr_path = manifest.lr_path(entry)
    if lr_path is not None:
        return load_png(lr_path)
    hr_name = Path(entry.hr).name
    cache_dir = Path(manifest.root) / f"LRbicX{manifest.scale}"
    cache_path = cache_dir / hr_name
    if not cache_path.is_file():
        hr = modcrop(load_png(manifest.hr_path(entry)), manifest.scale)
        cache_dir.mkdir(parents=True, exist_ok=True)
        save_png(cache_path, degrade(hr, manifest.scale))
    return load_png(cache_path)


# -- patch sampling and augmentation -----------------------------------------------------


def sample_patch_pair(hr, scale, patch, rng, lr=None):
    """Uniformly random aligned (lr, hr) crop pair; LR side = ``patch``.

    ``lr`` may be passed to avoid re-degrading; otherwise it is computed from
    the (modcropped) HR.  HR offsets are scale times the LR offsets.
    """
    hr = modcrop(np.asarray(hr), scale)
    if lr is None:
        lr = degrade(hr, scale)
    lh, lw = lr.shape[:2]
    if lh < patch or lw < patch:
        raise DataError(f"image too small for {patch}x{patch} patches: LR is {lh}x{lw}")
    y = int(rng.integers(0, lh - patch + 1))
    x = int(rng.integers(0, lw - patch + 1))
    lr_patch = lr[y:y + patch, x:x + patch]
    hr_patch = hr[scale * y:scale * (y + patch), scale * x:scale * (x + patch)]
    return lr_patch, hr_patch


def augment(pair, rng):
    """Apply one uniformly chosen rotation (0/90/180/270) and an independent
    horizontal-flip coin to both patches."""
    lr, hr = pair
    if lr.shape[0] != lr.shape[1] or hr.shape[0] != hr.shape[1]:
        raise DataError("augmentation requires square patches")
    k = int(rng.integers(0, 4))
    flip = bool(rng.integers(0, 2))
    out = []
    for img in (lr, hr):
        img = np.rot90(img, k, axes=(0, 1))
        if flip:
            img = img[:, ::-1]
        out.append(np.ascontiguousarray(img))
    return out[0], out[1]


class BatchStream:
    """Infinite deterministic stream of (lr, hr) training batches.

    Batches are (b, 3, p, p) and (b, 3, s*p, s*p) float64 arrays.  The
    stream's entire future is a function of its generator state, which can be
    exported/restored for exact training continuation.
    """

    def __init__(self, manifest, batch_size, patch_size, rng, use_augment=True):
        self.manifest = manifest
        self.batch_size = batch_size
        self.patch_size = patch_size
        self.use_augment = use_augment
        self.rng = rng
        self._pairs = []
        for entry in manifest.entries:
            hr = modcrop(load_png(manifest.hr_path(entry)), manifest.scale)
            lr = cached_lr(manifest, entry)
            lh, lw = hr.shape[0] // manifest.scale, hr.shape[1] // manifest.scale
            self._pairs.append((lr[:lh, :lw], hr))
        if not self._pairs:
            raise DataError("empty manifest")

    @property
    def state(self):
        return self.rng.bit_generator.state

    @state.setter
    def state(self, value):
        self.rng.bit_generator.state = value

    def next_batch(self):
        scale = self.manifest.scale
        p = self.patch_size
        lr_batch = np.empty((self.batch_size, 3, p, p))
        hr_batch = np.empty((self.batch_size, 3, scale * p, scale * p))
        for i in range(self.batch_size):
            idx = int(self.rng.integers(0, len(self._pairs)))
            lr, hr = self._pairs[idx]
            pair = sample_patch_pair(hr, scale, p, self.rng, lr=lr)
            if self.use_augment:
                pair = augment(pair, self.rng)
            lr_batch[i] = pair[0].transpose(2, 0, 1)
            hr_batch[i] = pair[1].transpose(2, 0, 1)
        return lr_batch, hr_batch

    def __iter__(self):
        while True:
            yield self.next_batch()


def batch_iterator(manifest, train_cfg, rng):
    """Stream of batches drawn per ``TrainConfig`` (images with replacement,
    then patches, then augmentation)."""
    stream = BatchStream(manifest, train_cfg.batch_size, train_cfg.patch_size,
                         rng, use_augment=train_cfg.augment)
    return iter(stream)


# -- bundled mini-dataset -----------------------------------------------------------


def _grid(size):
    y, x = np.mgrid[0:size, 0:size].astype(np.float64) / max(size - 1, 1)
    return y, x


def _synth_images():
    """Deterministic synthetic test images (no external assets).

    Sizes are multiples of 12 so every supported scale divides them; the
    first image is 32x32 and deliberately smooth (it doubles as the
    single-image overfitting target).
    """
    images = {}

    y, x = _grid(32)
    images["smooth32"] = np.stack([
        0.25 + 0.5 * x,
        0.3 + 0.35 * np.sin(2 * np.pi * (0.7 * x + 0.4 * y)) ** 2,
        0.55 - 0.3 * y * x,
    ], axis=-1)

    y, x = _grid(48)
    images["rings48"] = np.stack([
        0.5 + 0.45 * np.cos(14.0 * np.hypot(x - 0.5, y - 0.5)),
        0.5 + 0.4 * np.cos(9.0 * np.hypot(x - 0.3, y - 0.6)),
        0.4 + 0.3 * x,
    ], axis=-1)

    y, x = _grid(48)
    check = ((np.floor(x * 6) + np.floor(y * 6)) % 2)
    images["checker48"] = np.stack([
        0.15 + 0.7 * check,
        0.2 + 0.6 * check * x,
        0.8 - 0.6 * check * y,
    ], axis=-1)

    y, x = _grid(60)
    images["waves60"] = np.stack([
        0.5 + 0.3 * np.sin(11 * x) * np.cos(7 * y),
        0.5 + 0.3 * np.sin(5 * (x + y)),
        0.5 + 0.3 * np.cos(9 * x * y + 2),
    ], axis=-1)

    y, x = _grid(60)
    blob = np.exp(-30 * ((x - 0.35) ** 2 + (y - 0.4) ** 2)) \
        + 0.8 * np.exp(-45 * ((x - 0.7) ** 2 + (y - 0.7) ** 2))
    images["blobs60"] = np.stack([blob, 0.6 * blob + 0.2, 1.0 - blob], axis=-1)

    y, x = _grid(72)
    edges = (np.mod(x * 4, 1.0) < 0.5).astype(np.float64)
    images["bars72"] = np.stack([
        0.1 + 0.8 * edges,
        0.2 + 0.5 * edges * (1 - y),
        0.3 + 0.4 * (1 - edges),
    ], axis=-1)

    rng = np.random.default_rng(20240501)
    rough = rng.uniform(0, 1, size=(9, 9, 3))
    images["texture72"] = bicubic_resize(rough, 72, 72)

    y, x = _grid(96)
    images["ramp96"] = np.stack([
        x, 0.5 + 0.5 * np.sin(3 * np.pi * y) * x, 1 - y,
    ], axis=-1)

    return {k: np.clip(v, 0.0, 1.0) for k, v in images.items()}


def write_bundled_set(root):
    """Materialise the bundled mini-dataset under ``root``/HR and return the
    sorted HR paths.  Output is byte-identical across runs."""
    root = Path(root)
    hr_dir = root / "HR"
    hr_dir.mkdir(parents=True, exist_ok=True)
    for name, img in sorted(_synth_images().items()):
        save_png(hr_dir / f"{name}.png", img)
    return sorted(hr_dir.glob("*.png"))
