"""The full super-resolution network: shallow conv, residual groups of
state-space blocks capped by overlapping cross-attention, and a pixel-shuffle
reconstruction head.  Also parameter/FLOP accounting and checkpoint I/O."""

from __future__ import annotations

import json
import struct

import numpy as np

from . import nn
from . import tensor as T
from .attention import Ocab, overlap_window
from .config import ModelConfig
from .errors import ConfigError, FormatError, ShapeError
from .ssm import VssBlock
from .tensor import Tensor

# Channel means of the DIV2K training corpus; subtracted at input, restored
# at output so the trunk models residuals around a neutral image.
RGB_MEAN = (0.4488, 0.4371, 0.4040)


class Sgfn(nn.Module):
    """Feed-forward with a spatial gate: one projected half, after a
    depthwise 3x3 conv, multiplicatively gates the other half."""

    def __init__(self, dim, hidden, rng):
        if hidden % 2:
            raise ConfigError(f"sgfn hidden width must be even, got {hidden}")
        self.hidden = hidden
        self.w1 = nn.Linear(dim, hidden, rng)
        self.dwconv = nn.Conv2d(hidden // 2, hidden // 2, 3, rng, groups=hidden // 2)
        self.w2 = nn.Linear(hidden // 2, dim, rng)

    def forward(self, x):
        b, c, h, w = x.shape
        t = T.gelu(self.w1(nn.to_tokens(x)))
        half = self.hidden // 2
        x1, x2 = t[..., :half], t[..., half:]
        gated = x1 * nn.to_tokens(nn.conv2d(nn.to_map(x2, h, w), self.dwconv))
        return nn.to_map(self.w2(gated), h, w)


def sgfn_forward(x, params):
    return params(x)


class Mlp(nn.Module):
    """Plain two-layer feed-forward (ablation arm)."""

    def __init__(self, dim, hidden, rng):
        self.w1 = nn.Linear(dim, hidden, rng)
        self.w2 = nn.Linear(hidden, dim, rng)

    def forward(self, x):
        b, c, h, w = x.shape
        return nn.to_map(self.w2(T.gelu(self.w1(nn.to_tokens(x)))), h, w)


class Cab(nn.Module):
    """Channel-attention conv block (ablation arm).  Placement assumption:
    runs parallel to the SS2D mixer on the same normed input, scaled 0.01."""

    COMPRESS = 3
    SQUEEZE = 16

    def __init__(self, dim, rng):
        mid = max(1, dim // self.COMPRESS)
        sq = max(1, dim // self.SQUEEZE)
        self.conv1 = nn.Conv2d(dim, mid, 3, rng)
        self.conv2 = nn.Conv2d(mid, dim, 3, rng)
        self.ca_down = nn.Conv2d(dim, sq, 1, rng)
        self.ca_up = nn.Conv2d(sq, dim, 1, rng)

    def forward(self, x):
        y = nn.conv2d(T.gelu(nn.conv2d(x, self.conv1)), self.conv2)
        s = y.mean(axes=(2, 3), keepdims=True)
        s = T.sigmoid(nn.conv2d(T.relu(nn.conv2d(s, self.ca_down)), self.ca_up))
        return y * s


def _make_ffn(cfg, rng):
    if cfg.ffn_kind == "mlp":
        return Mlp(cfg.embed_dim, cfg.ffn_hidden, rng)
    return Sgfn(cfg.embed_dim, cfg.ffn_hidden, rng)


class ResidualGroup(nn.Module):
    """N state-space blocks, one overlapping cross-attention block, a 3x3
    conv, and a skip connection around the whole group."""

    def __init__(self, cfg, rng):
        self.blocks = [
            VssBlock(cfg.embed_dim, cfg.state_dim, cfg.ssm_ratio, cfg.effective_dt_rank,
                     rng, ffn=_make_ffn(cfg, rng), gate=cfg.ssm_gate,
                     cab=Cab(cfg.embed_dim, rng) if cfg.use_cab else None)
            for _ in range(cfg.blocks_per_group)
        ]
        self.ocab = Ocab(cfg.embed_dim, cfg.window_size, cfg.overlap_ratio,
                         cfg.num_heads, rng, ffn=_make_ffn(cfg, rng))
        self.conv = nn.Conv2d(cfg.embed_dim, cfg.embed_dim, 3, rng)

    def forward(self, x):
        y = x
        for block in self.blocks:
            y = block(y)
        y = self.ocab(y)
        return nn.conv2d(y, self.conv) + x


def residual_group(x, params):
    return params(x)


def _upsample_factors(scale):
    if scale in (2, 3):
        return [scale]
    if scale == 4:
        return [2, 2]
    raise ConfigError(f"unsupported scale {scale}")


class Reconstructor(nn.Module):
    """Fuse to a fixed reconstruction width (3x3 conv + SiLU), pixel-shuffle
    upsampling stages, final 3x3 conv back to RGB."""

    def __init__(self, cfg, rng):
        r = cfg.recon_dim
        self.fuse = nn.Conv2d(cfg.embed_dim, r, 3, rng)
        self.factors = _upsample_factors(cfg.scale)
        self.stages = [nn.Conv2d(r, r * f * f, 3, rng) for f in self.factors]
        self.last = nn.Conv2d(r, 3, 3, rng)

    def forward(self, x):
        x = T.silu(nn.conv2d(x, self.fuse))
        for conv, f in zip(self.stages, self.factors):
            x = nn.pixel_shuffle(nn.conv2d(x, conv), f)
        return nn.conv2d(x, self.last)


def reconstruct(f_d, params):
    return params(f_d)


class ContrastNet(nn.Module):
    """End to end: (b, 3, h, w) in [0, 1] -> (b, 3, scale*h, scale*w)."""

    def __init__(self, cfg: ModelConfig, seed=0):
        cfg.validate()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.shallow = nn.Conv2d(3, cfg.embed_dim, 3, rng)
        self.groups = [ResidualGroup(cfg, rng) for _ in range(cfg.num_groups)]
        self.conv_after = nn.Conv2d(cfg.embed_dim, cfg.embed_dim, 3, rng)
        self.recon = Reconstructor(cfg, rng)
        self._mean = Tensor(np.array(RGB_MEAN).reshape(1, 3, 1, 1))

    def shallow_extract(self, x):
        if x.shape[1] != 3:
            raise ShapeError(f"expected 3 input channels, got {x.shape[1]}")
        return nn.conv2d(x, self.shallow)

    def deep_extract(self, f_s):
        padded, (h, w) = nn.pad_to_multiple(f_s, self.cfg.window_size)
        y = padded
        for group in self.groups:
            y = group(y)
        y = nn.conv2d(y, self.conv_after) + padded
        return nn.crop_to(y, h, w)

    def forward(self, x):
        x = x - self._mean
        f_s = self.shallow_extract(x)
        f_d = self.deep_extract(f_s)
        return self.recon(f_d) + self._mean


def build_model(cfg, seed=0):
    return ContrastNet(cfg, seed=seed)


def upscale_image(model, img):
    """Run one (h, w, 3) image in [0, 1] through the network; returns the
    clipped (scale*h, scale*w, 3) result."""
    x = Tensor(np.ascontiguousarray(img.transpose(2, 0, 1))[None])
    with T.no_grad():
        y = model(x)
    return np.clip(y.data[0].transpose(1, 2, 0), 0.0, 1.0)


# -- accounting -------------------------------------------------------------------


def _linear_n(i, o, bias=True):
    return i * o + (o if bias else 0)


def _conv_n(i, o, k, groups=1, bias=True):
    return o * (i // groups) * k * k + (o if bias else 0)


def _ffn_n(cfg):
    c, hidden = cfg.embed_dim, cfg.ffn_hidden
    if cfg.ffn_kind == "mlp":
        return _linear_n(c, hidden) + _linear_n(hidden, c)
    half = hidden // 2
    return _linear_n(c, hidden) + _conv_n(half, half, 3, groups=half) + _linear_n(half, c)


def _cab_n(dim):
    mid = max(1, dim // Cab.COMPRESS)
    sq = max(1, dim // Cab.SQUEEZE)
    return (_conv_n(dim, mid, 3) + _conv_n(mid, dim, 3)
            + _conv_n(dim, sq, 1) + _conv_n(sq, dim, 1))


def _ss2d_n(cfg):
    c, inner = cfg.embed_dim, cfg.inner_dim
    rank, n = cfg.effective_dt_rank, cfg.state_dim
    branch = (_linear_n(inner, rank + 2 * n, bias=False)   # x_proj
              + _linear_n(rank, inner)                     # delta_proj
              + inner * n                                  # A_log
              + inner)                                     # D_skip
    total = _linear_n(c, inner) + _conv_n(inner, inner, 3, groups=inner) \
        + 4 * branch + 2 * inner + _linear_n(inner, c)
    if cfg.ssm_gate:
        total += _linear_n(c, inner)
    return total


def _vss_n(cfg):
    c = cfg.embed_dim
    total = 2 * c + _ss2d_n(cfg) + 2 * c + _ffn_n(cfg)
    if cfg.use_cab:
        total += _cab_n(c)
    return total


def _ocab_n(cfg):
    c, m = cfg.embed_dim, cfg.window_size
    mo = overlap_window(m, cfg.overlap_ratio)
    span = m + mo - 1
    return (2 * c + _linear_n(c, c) + _linear_n(c, 2 * c)
            + cfg.num_heads * span * span + _linear_n(c, c) + 2 * c + _ffn_n(cfg))


def _recon_n(cfg):
    r = cfg.recon_dim
    total = _conv_n(cfg.embed_dim, r, 3)
    for f in _upsample_factors(cfg.scale):
        total += _conv_n(r, r * f * f, 3)
    return total + _conv_n(r, 3, 3)


def count_params(cfg):
    """Exact scalar parameter count of a model built from ``cfg``."""
    c = cfg.embed_dim
    group = cfg.blocks_per_group * _vss_n(cfg) + _ocab_n(cfg) + _conv_n(c, c, 3)
    return (_conv_n(3, c, 3) + cfg.num_groups * group + _conv_n(c, c, 3)
            + _recon_n(cfg))


def flops_breakdown(cfg, out_h, out_w):
    """Multiply-accumulate counts (1 MAC = 2 FLOPs) by category for an output
    of the given size.

    The headline categories cover every parameterised layer (convolutions
    and linear projections, including those inside the attention and scan
    blocks) plus the scan recurrence itself.  The data-dependent attention
    products Q K^T and A V are reported separately under
    ``attention_matmuls``: published complexity figures for this model family
    come from module-hook counters that do not see functional matmuls, and
    the headline total follows that convention so the numbers are comparable.
    Normalisation, softmax and activations carry no MACs and are excluded.
    """
    c, inner = cfg.embed_dim, cfg.inner_dim
    rank, n = cfg.effective_dt_rank, cfg.state_dim
    s = cfg.scale
    h, w = -(-out_h // s), -(-out_w // s)          # input extents
    m = cfg.window_size
    hp, wp = -(-h // m) * m, -(-w // m) * m        # padded for the deep stage
    L = hp * wp
    mo = overlap_window(m, cfg.overlap_ratio)

    def ffn_macs():
        hidden = cfg.ffn_hidden
        if cfg.ffn_kind == "mlp":
            return 2 * c * hidden * L
        half = hidden // 2
        return (c * hidden + 9 * half + half * c) * L

    ssm = (c * inner + 9 * inner
           + 4 * (inner * (rank + 2 * n) + rank * inner)
           + inner * c) * L
    if cfg.ssm_gate:
        ssm += c * inner * L
    scan = 4 * 6 * inner * n * L  # decay, drive, state update, readout per element
    vss = ssm + scan + ffn_macs()
    if cfg.use_cab:
        mid = max(1, c // Cab.COMPRESS)
        sq = max(1, c // Cab.SQUEEZE)
        vss += 2 * 9 * c * mid * L + c * sq + sq * c

    attn_proj = (c * c + c * 2 * c + c * c) * L + ffn_macs()
    attn_mm = 2 * L * mo * mo * c

    blocks = cfg.num_groups * cfg.blocks_per_group * vss
    ocabs = cfg.num_groups * attn_proj
    rg_convs = (cfg.num_groups + 1) * 9 * c * c * L

    r = cfg.recon_dim
    recon = 9 * c * r * h * w
    sh, sw = h, w
    for f in _upsample_factors(s):
        recon += 9 * r * (r * f * f) * sh * sw
        sh, sw = sh * f, sw * f
    recon += 9 * r * 3 * sh * sw

    return {
        "shallow": 9 * 3 * c * h * w,
        "ssm_blocks": blocks,
        "attention_proj": ocabs,
        "attention_matmuls": cfg.num_groups * attn_mm,
        "group_convs": rg_convs,
        "reconstruction": recon,
    }


def count_flops(cfg, out_h, out_w, include_attention_matmuls=False):
    """Total FLOPs (1 MAC = 2 FLOPs) at the given output size; see
    ``flops_breakdown`` for what the headline covers."""
    parts = flops_breakdown(cfg, out_h, out_w)
    macs = sum(v for k, v in parts.items() if k != "attention_matmuls")
    if include_attention_matmuls:
        macs += parts["attention_matmuls"]
    return 2 * macs


# -- checkpointing ------------------------------------------------------------------

CHECKPOINT_MAGIC = b"CTRSTCKPT"
CHECKPOINT_VERSION = 1


def _config_dict(cfg):
    from dataclasses import asdict
    return asdict(cfg)


def _config_from_dict(d):
    return ModelConfig(**d)


def save_checkpoint(path, model, iteration=0, optimizer=None, rng_state=None):
    """Write model parameters (and optionally optimizer state) to ``path``.

    Layout: magic, version u32, header-length u64, JSON header with the
    config and per-array byte offsets, then contiguous little-endian float64
    payloads.
    """
    arrays = []
    offset = 0

    def register(table, name, arr):
        nonlocal offset
        arr = np.ascontiguousarray(arr, dtype="<f8")
        table[name] = {"shape": list(arr.shape), "offset": offset}
        arrays.append(arr)
        offset += arr.nbytes

    params = {}
    for name, p in model.named_parameters():
        register(params, name, p.data)

    opt_entry = None
    if optimizer is not None:
        opt_state = optimizer.state_dict()
        opt_entry = {"t": opt_state["t"], "m": {}, "v": {}}
        for name, arr in opt_state["m"].items():
            register(opt_entry["m"], name, arr)
        for name, arr in opt_state["v"].items():
            register(opt_entry["v"], name, arr)

    header = {
        "config": _config_dict(model.cfg),
        "iteration": int(iteration),
        "params": params,
        "opt": opt_entry,
        "rng": rng_state,
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in arrays:
            fh.write(arr.tobytes())


def load_checkpoint(path, expect_config=None):
    """Read a checkpoint; returns (config, params, iteration, opt, rng_state).

    Raises FormatError on malformed/truncated files and ConfigError when
    ``expect_config`` is given and does not match the stored one.
    """
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from None

    base = len(CHECKPOINT_MAGIC)
    if raw[:base] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path} is not a checkpoint (bad magic)")
    if len(raw) < base + 12:
        raise FormatError(f"{path} is truncated")
    version, = struct.unpack_from("<I", raw, base)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    hlen, = struct.unpack_from("<Q", raw, base + 4)
    hstart = base + 12
    if len(raw) < hstart + hlen:
        raise FormatError(f"{path} is truncated (header)")
    try:
        header = json.loads(raw[hstart:hstart + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}") from None

    payload = raw[hstart + hlen:]

    def fetch(entry):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * 8
        if end > len(payload):
            raise FormatError(f"{path} is truncated (payload)")
        return np.frombuffer(payload, dtype="<f8", count=count, offset=start).reshape(shape).copy()

    try:
        cfg = _config_from_dict(header["config"])
    except (TypeError, KeyError, ConfigError) as exc:
        raise FormatError(f"corrupt checkpoint config: {exc}") from None
    if expect_config is not None and _config_dict(expect_config) != header["config"]:
        raise ConfigError("checkpoint was written with a different model config")

    params = {name: fetch(entry) for name, entry in header["params"].items()}
    opt = None
    if header.get("opt") is not None:
        opt = {
            "t": header["opt"]["t"],
            "m": {n: fetch(e) for n, e in header["opt"]["m"].items()},
            "v": {n: fetch(e) for n, e in header["opt"]["v"].items()},
        }
    return cfg, params, header["iteration"], opt, header.get("rng")


def load_model(path):
    """Rebuild a model directly from a checkpoint file."""
    cfg, params, _, _, _ = load_checkpoint(path)
    model = ContrastNet(cfg, seed=0)
    restore_parameters(model, params)
    return model


def restore_parameters(model, params):
    names = dict(model.named_parameters())
    missing = set(names) - set(params)
    extra = set(params) - set(names)
    if missing or extra:
        raise FormatError(f"parameter table mismatch: missing {sorted(missing)[:3]}, "
                          f"unexpected {sorted(extra)[:3]}")
    for name, arr in params.items():
        tensor = names[name]
        if tensor.data.shape != arr.shape:
            raise FormatError(f"shape mismatch for {name}: "
                              f"{tensor.data.shape} vs {arr.shape}")
        tensor.data = np.ascontiguousarray(arr)
