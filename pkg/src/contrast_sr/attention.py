"""Overlapping cross-attention: queries from non-overlapping windows attend
to keys/values from enlarged, overlapping patches of the same feature map."""

from __future__ import annotations

import numpy as np

from . import nn
from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor, record


def overlap_window(window, overlap_ratio):
    """Enlarged patch side Mo = M + 2*round(gamma*M/2), rounding half up."""
    half = int(np.floor(overlap_ratio * window / 2.0 + 0.5))
    return window + 2 * half


def rel_bias_lookup(window, overlap):
    """Index map (M^2, Mo^2) into a (M + Mo - 1)^2 relative-position table.

    Key cell k lives on the enlarged grid, shifted by (Mo - M)/2 relative to
    the query grid, so identical spatial positions share one index.  The
    index depends only on the displacement (dy, dx).
    """
    m, mo = window, overlap
    pad = (mo - m) // 2
    span = m + mo - 1
    qy, qx = np.divmod(np.arange(m * m), m)
    ky, kx = np.divmod(np.arange(mo * mo), mo)
    dy = (ky[None, :] - pad) - qy[:, None] + (m - 1 + pad)
    dx = (kx[None, :] - pad) - qx[:, None] + (m - 1 + pad)
    return dy * span + dx


def unfold_overlapping(x, window, overlap):
    """(b, c, h, w) -> (b*nw, Mo^2, c): one zero-padded Mo x Mo patch per
    query window, stride M, window order matching ``window_partition``."""
    x = T._lift(x)
    b, c, h, w = x.shape
    m, mo = window, overlap
    if h % m or w % m:
        raise ShapeError(f"extents {h}x{w} not divisible by window {m}")
    pad = (mo - m) // 2
    nh, nw = h // m, w // m
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty((b, nh * nw, mo * mo, c))
    for wy in range(nh):
        for wx in range(nw):
            patch = xp[:, :, wy * m:wy * m + mo, wx * m:wx * m + mo]
            out[:, wy * nw + wx] = patch.reshape(b, c, mo * mo).transpose(0, 2, 1)

    def vjp(g):
        gp = g.reshape(b, nh * nw, mo * mo, c)
        dxp = np.zeros_like(xp)
        for wy in range(nh):
            for wx in range(nw):
                patch = gp[:, wy * nw + wx].transpose(0, 2, 1).reshape(b, c, mo, mo)
                dxp[:, :, wy * m:wy * m + mo, wx * m:wx * m + mo] += patch
        return np.ascontiguousarray(dxp[:, :, pad:pad + h, pad:pad + w]) if pad \
            else dxp

    return record(out.reshape(b * nh * nw, mo * mo, c), (x,), (vjp,))


def softmax(x, axis=-1):
    """Numerically stable softmax (row max subtracted before exponentiation)."""
    shifted = x - x.max(axes=axis, keepdims=True)
    e = T.exp(shifted)
    return e / e.sum(axes=axis, keepdims=True)


class Ocab(nn.Module):
    """Overlapping cross-attention block with its paired feed-forward half.

    Per window and head: out = softmax(Q K^T / sqrt(dim/heads) + B_rel) V,
    with Q from M x M window tokens and K, V unfolded from the enlarged
    Mo x Mo patch around that window.
    """

    def __init__(self, dim, window, overlap_ratio, num_heads, rng, ffn):
        if dim % num_heads:
            raise ShapeError(f"dim {dim} not divisible by {num_heads} heads")
        self.dim = dim
        self.window = window
        self.overlap = overlap_window(window, overlap_ratio)
        self.num_heads = num_heads
        self.ln1 = nn.LayerNorm(dim)
        self.q_proj = nn.Linear(dim, dim, rng)
        self.kv_proj = nn.Linear(dim, 2 * dim, rng)
        span = window + self.overlap - 1
        self.rel_pos_bias = Tensor(nn.trunc_normal(rng, (num_heads, span * span)),
                                   requires_grad=True)
        self._bias_index = rel_bias_lookup(window, self.overlap).reshape(-1)
        self.out_proj = nn.Linear(dim, dim, rng)
        self.ln2 = nn.LayerNorm(dim)
        self.ffn = ffn

    def attention(self, x):
        """Windowed cross-attention only (no residuals, no feed-forward)."""
        b, c, h, w = x.shape
        m, mo, heads = self.window, self.overlap, self.num_heads
        d = c // heads

        tokens = nn.to_tokens(x)
        q = nn.to_map(self.q_proj(tokens), h, w)
        kv = nn.to_map(self.kv_proj(tokens), h, w)

        qw = nn.window_partition(q, m)                      # (bn, m^2, c)
        kvw = unfold_overlapping(kv, m, mo)                 # (bn, mo^2, 2c)
        kw, vw = kvw[:, :, :c], kvw[:, :, c:]

        bn = qw.shape[0]
        qh = T.transpose(T.reshape(qw, (bn, m * m, heads, d)), (0, 2, 1, 3))
        kh = T.transpose(T.reshape(kw, (bn, mo * mo, heads, d)), (0, 2, 1, 3))
        vh = T.transpose(T.reshape(vw, (bn, mo * mo, heads, d)), (0, 2, 1, 3))

        logits = (qh @ T.transpose(kh, (0, 1, 3, 2))) / np.sqrt(d)
        bias = T.reshape(T.take(self.rel_pos_bias, self._bias_index, axis=1),
                         (heads, m * m, mo * mo))
        weights = softmax(logits + bias, axis=-1)

        out = weights @ vh                                  # (bn, heads, m^2, d)
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (bn, m * m, c))
        out = self.out_proj(out)
        return nn.window_reverse(out, m, h, w)

    def forward(self, x):
        r = x + self.attention(nn.channel_norm(x, self.ln1))
        return r + self.ffn(nn.channel_norm(r, self.ln2))


def ocab_attention(x, params):
    return params(x)
