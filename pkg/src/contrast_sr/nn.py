"""Neural building blocks on top of the autodiff tensor.

Layout conventions: feature maps are (batch, channels, height, width);
token sequences are (batch, tokens, channels).  ``to_tokens`` / ``to_map``
convert between the two.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor, record


# -- parameter initialisation -----------------------------------------------------


def trunc_normal(rng, shape, std=0.02, bound=2.0):
    """Normal(0, std) draws redrawn until inside +-bound*std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > bound * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound * std
    return out


def init_params(seed, kind, shape):
    """Standalone initialiser: 'weight' draws truncated normal(0, 0.02)
    clipped at two sigma, 'bias'/'norm_beta' are zeros, 'norm_gamma' ones.
    Deterministic for a given seed."""
    rng = np.random.default_rng(seed)
    if kind == "weight":
        return trunc_normal(rng, shape)
    if kind in ("bias", "norm_beta"):
        return np.zeros(shape)
    if kind == "norm_gamma":
        return np.ones(shape)
    raise ValueError(f"unknown parameter kind {kind!r}")


# -- module system ------------------------------------------------------------------


class Module:
    """Minimal parameter container with named traversal."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def param_count(self):
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    """y = x @ W^T + b over the last axis; W is (out_features, in_features)."""

    def __init__(self, in_features, out_features, rng, bias=True):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(trunc_normal(rng, (out_features, in_features)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True) if bias else None

    def forward(self, x):
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"linear expects last dim {self.in_features}, got {x.shape}")
        y = x @ T.transpose(self.weight, (1, 0))
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    """Per-position normalisation over the trailing channel axis."""

    def __init__(self, dim, eps=1e-6):
        self.dim = dim
        self.eps = eps
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)

    def forward(self, x):
        if x.shape[-1] != self.dim:
            raise ShapeError(f"layer_norm expects last dim {self.dim}, got {x.shape}")
        mu = x.mean(axes=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axes=-1, keepdims=True)
        return xc / T.sqrt(var + self.eps) * self.gamma + self.beta


def layer_norm(x, params):
    return params(x)


class Conv2d(Module):
    """Cross-correlation with zero padding; weight is (out_c, in_c/groups, kh, kw)."""

    def __init__(self, in_channels, out_channels, kernel_size, rng,
                 padding=None, groups=1, bias=True):
        if in_channels % groups or out_channels % groups:
            raise ShapeError("channels must divide groups")
        kh = kw = kernel_size
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.padding = (kernel_size - 1) // 2 if padding is None else padding
        self.groups = groups
        self.weight = Tensor(trunc_normal(rng, (out_channels, in_channels // groups, kh, kw)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True) if bias else None

    def forward(self, x):
        return conv2d(x, self)


def conv2d(x, p):
    """Apply ``Conv2d`` parameters to a (b, c, h, w) tensor."""
    y = _conv2d_prim(x, p.weight, p.padding, p.groups)
    if p.bias is not None:
        y = y + T.reshape(p.bias, (1, -1, 1, 1))
    return y


def _conv2d_prim(x, weight, padding, groups):
    x = T._lift(x)
    b, cin, h, w = x.shape
    out_c, cg, kh, kw = weight.shape
    if cin != cg * groups:
        raise ShapeError(f"conv2d expects {cg * groups} input channels, got {cin}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError("spatial extent smaller than kernel after padding")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho, wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    cols = np.empty((b, cin, kh, kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + ho, j:j + wo]

    og = out_c // groups
    cols_g = cols.reshape(b, groups, cg, kh, kw, ho, wo)
    w_g = weight.data.reshape(groups, og, cg, kh, kw)
    out = np.einsum("gocij,bgcijhw->bgohw", w_g, cols_g, optimize=True)
    out = out.reshape(b, out_c, ho, wo)

    def grad_x(g):
        g_g = g.reshape(b, groups, og, ho, wo)
        dcols = np.einsum("gocij,bgohw->bgcijhw", w_g, g_g, optimize=True)
        dcols = dcols.reshape(b, cin, kh, kw, ho, wo)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + ho, j:j + wo] += dcols[:, :, i, j]
        if padding:
            dxp = dxp[:, :, padding:padding + h, padding:padding + w]
        return np.ascontiguousarray(dxp)

    def grad_w(g):
        g_g = g.reshape(b, groups, og, ho, wo)
        dw = np.einsum("bgohw,bgcijhw->gocij", g_g, cols_g, optimize=True)
        return dw.reshape(out_c, cg, kh, kw)

    return record(out, (x, weight), (grad_x, grad_w))


def linear(x, p):
    return p(x)


# -- layout helpers -----------------------------------------------------------------


def to_tokens(x):
    """(b, c, h, w) -> (b, h*w, c) in row-major spatial order."""
    b, c, h, w = x.shape
    return T.transpose(T.reshape(x, (b, c, h * w)), (0, 2, 1))


def to_map(x, h, w):
    """(b, h*w, c) -> (b, c, h, w)."""
    b, l, c = x.shape
    if l != h * w:
        raise ShapeError(f"token count {l} does not match {h}x{w}")
    return T.reshape(T.transpose(x, (0, 2, 1)), (b, c, h, w))


def channel_norm(x, ln):
    """LayerNorm over the channel axis of a (b, c, h, w) map."""
    b, c, h, w = x.shape
    return to_map(ln(to_tokens(x)), h, w)


# -- windowing ----------------------------------------------------------------------


def window_partition(x, window):
    """(b, c, h, w) -> (b * nh * nw, window^2, c); non-overlapping row-major tiles."""
    b, c, h, w = x.shape
    if h % window or w % window:
        raise ShapeError(f"extents {h}x{w} not divisible by window {window}")
    nh, nw = h // window, w // window
    t = T.reshape(x, (b, c, nh, window, nw, window))
    t = T.transpose(t, (0, 2, 4, 3, 5, 1))
    return T.reshape(t, (b * nh * nw, window * window, c))


def window_reverse(wins, window, h, w):
    """Inverse of ``window_partition``."""
    nh, nw = h // window, w // window
    b = wins.shape[0] // (nh * nw)
    c = wins.shape[-1]
    t = T.reshape(wins, (b, nh, nw, window, window, c))
    t = T.transpose(t, (0, 5, 1, 3, 2, 4))
    return T.reshape(t, (b, c, h, w))


# -- pixel shuffle ------------------------------------------------------------------


def pixel_shuffle(x, r):
    """(b, c*r^2, h, w) -> (b, c, r*h, r*w)."""
    b, cr2, h, w = x.shape
    if cr2 % (r * r):
        raise ShapeError(f"channels {cr2} not divisible by {r}^2")
    c = cr2 // (r * r)
    t = T.reshape(x, (b, c, r, r, h, w))
    t = T.transpose(t, (0, 1, 4, 2, 5, 3))
    return T.reshape(t, (b, c, h * r, w * r))


def pixel_unshuffle(x, r):
    """Inverse of ``pixel_shuffle``."""
    b, c, hr, wr = x.shape
    if hr % r or wr % r:
        raise ShapeError(f"extents {hr}x{wr} not divisible by {r}")
    h, w = hr // r, wr // r
    t = T.reshape(x, (b, c, h, r, w, r))
    t = T.transpose(t, (0, 1, 3, 5, 2, 4))
    return T.reshape(t, (b, c * r * r, h, w))


# -- padding to window multiples ------------------------------------------------------


def pad_to_multiple(x, multiple):
    """Reflect-pad bottom/right so both spatial extents divide ``multiple``."""
    h, w = x.shape[-2], x.shape[-1]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return x, (h, w)
    return T.pad2d_reflect(x, (0, ph, 0, pw)), (h, w)


def crop_to(x, h, w):
    if x.shape[-2] == h and x.shape[-1] == w:
        return x
    return x[..., :h, :w]
