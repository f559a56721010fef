"""Selective-scan state-space primitives and their four-direction 2D extension.

The recurrence (per batch item, channel c, state n, token t):

    h_t = exp(delta_t * A) * h_{t-1} + (delta_t * B_t) * u_t,   h_0 = 0
    y_t = <C_t, h_t> + D * u_t

with A < 0 elementwise for stability.  ``selective_scan`` is a single
autodiff primitive: the forward pass runs the recurrence (sequential loop
by default, optional log-depth parallel scan), the backward pass runs the
hand-written adjoint recursion over the stored states.
"""

from __future__ import annotations

import numpy as np

from . import nn
from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor, record


# -- the scan primitive ---------------------------------------------------------------


def selective_scan(u, delta, A, B, Cout, D, method="loop"):
    """Input-dependent SSM over (b, L, C) sequences.

    u, delta: (b, L, C); A: (C, N) negative; B, Cout: (b, L, N); D: (C,).
    Returns y of shape (b, L, C).  ``method`` selects the sequential loop
    or the log-depth parallel prefix scan (identical results to ~1e-12).
    """
    u, delta, A, B, Cout, D = (T._lift(x) for x in (u, delta, A, B, Cout, D))
    b, L, c = u.shape
    n = A.shape[1]
    if delta.shape != (b, L, c):
        raise ShapeError(f"delta shape {delta.shape} != {(b, L, c)}")
    if A.shape != (c, n):
        raise ShapeError(f"A shape {A.shape} inconsistent with {c} channels")
    if B.shape != (b, L, n) or Cout.shape != (b, L, n):
        raise ShapeError("B/C shapes must be (b, L, d_state)")
    if D.shape != (c,):
        raise ShapeError(f"D shape {D.shape} != ({c},)")

    decay = np.exp(delta.data[..., None] * A.data)                      # (b,L,c,n)
    drive = (delta.data * u.data)[..., None] * B.data[:, :, None, :]    # (b,L,c,n)

    if method == "parallel":
        states = _parallel_states(decay, drive)
    elif method == "loop":
        states = np.empty_like(drive)
        h = np.zeros((b, c, n))
        for t in range(L):
            h = decay[:, t] * h + drive[:, t]
            states[:, t] = h
    else:
        raise ValueError(f"unknown scan method {method!r}")

    y = np.einsum("blcn,bln->blc", states, Cout.data) + D.data * u.data

    def backward(g):
        du = g * D.data
        dD = np.einsum("blc,blc->c", g, u.data)
        dC = np.einsum("blc,blcn->bln", g, states)
        ddelta = np.empty_like(delta.data)
        dA = np.zeros_like(A.data)
        dB = np.empty_like(B.data)
        dh = np.zeros((b, c, n))
        for t in range(L - 1, -1, -1):
            dh = dh + g[:, t, :, None] * Cout.data[:, t, None, :]
            h_prev = states[:, t - 1] if t > 0 else 0.0
            d_decay = dh * h_prev
            ddelta[:, t] = (d_decay * decay[:, t] * A.data).sum(-1) \
                + (dh * B.data[:, t, None, :]).sum(-1) * u.data[:, t]
            dA += np.einsum("bcn,bc->cn", d_decay * decay[:, t], delta.data[:, t])
            du[:, t] += (dh * B.data[:, t, None, :]).sum(-1) * delta.data[:, t]
            dB[:, t] = np.einsum("bcn,bc->bn", dh, delta.data[:, t] * u.data[:, t])
            dh = dh * decay[:, t]
        return du, ddelta, dA, dB, dC, dD

    cache = {}

    def shared(g, slot):
        # All six vjps consume one adjoint sweep; run it once per upstream grad.
        if cache.get("g") is not g:
            cache["g"] = g
            cache["vals"] = backward(g)
        return cache["vals"][slot]

    parents = (u, delta, A, B, Cout, D)
    vjps = tuple((lambda slot: lambda g: shared(g, slot))(i) for i in range(6))
    return record(y, parents, vjps)


def _parallel_states(decay, drive):
    """Hillis-Steele inclusive scan of h_t = decay_t*h_{t-1} + drive_t."""
    a = decay.copy()
    x = drive.copy()
    L = a.shape[1]
    shift = 1
    while shift < L:
        x[:, shift:] = x[:, shift:] + a[:, shift:] * x[:, :-shift]
        a[:, shift:] = a[:, shift:] * a[:, :-shift]
        shift *= 2
    return x


# -- four-direction traversal ----------------------------------------------------------


def _expand(data):
    """(b, c, h, w) -> (b, 4, h*w, c): row fwd, row rev, col fwd, col rev."""
    b, c, h, w = data.shape
    row = data.reshape(b, c, h * w)
    col = data.transpose(0, 1, 3, 2).reshape(b, c, h * w)
    out = np.stack([row, row[:, :, ::-1], col, col[:, :, ::-1]], axis=1)
    return np.ascontiguousarray(out.transpose(0, 1, 3, 2))


def _fold(data, h, w):
    """(b, 4, h*w, c) -> (b, c, h, w): invert each traversal and sum, order 0..3."""
    b, _, L, c = data.shape
    seqs = data.transpose(0, 1, 3, 2)  # (b, 4, c, L)
    out = seqs[:, 0].reshape(b, c, h, w).copy()
    out += seqs[:, 1, :, ::-1].reshape(b, c, h, w)
    out += seqs[:, 2].reshape(b, c, w, h).transpose(0, 1, 3, 2)
    out += seqs[:, 3, :, ::-1].reshape(b, c, w, h).transpose(0, 1, 3, 2)
    return out


def cross_scan(x):
    """Expand a feature map into the four axis-aligned token traversals.

    The adjoint of this linear map is exactly ``cross_merge``; the pair is
    used as each other's gradient.
    """
    x = T._lift(x)
    b, c, h, w = x.shape
    return record(_expand(x.data), (x,), (lambda g: _fold(g, h, w),))


def cross_merge(y, h, w):
    """Sum the four directional outputs back onto the spatial grid."""
    y = T._lift(y)
    if y.ndim != 4 or y.shape[1] != 4 or y.shape[2] != h * w:
        raise ShapeError(f"cross_merge expects (b, 4, {h * w}, c), got {y.shape}")
    return record(_fold(y.data, h, w), (y,), (lambda g: _expand(g),))


# -- SS2D block --------------------------------------------------------------------


class ScanBranch(nn.Module):
    """Per-direction parameters of the selective scan."""

    def __init__(self, dim, state_dim, dt_rank, rng):
        self.x_proj = nn.Linear(dim, dt_rank + 2 * state_dim, rng, bias=False)
        self.delta_proj = nn.Linear(dt_rank, dim, rng, bias=True)
        self.delta_proj.bias = Tensor(_delta_bias_init(rng, dim), requires_grad=True)
        # A = -exp(A_log): log of 1..N repeated per channel keeps A in [-N, -1].
        a = np.tile(np.arange(1, state_dim + 1, dtype=np.float64), (dim, 1))
        self.A_log = Tensor(np.log(a), requires_grad=True)
        self.D_skip = Tensor(np.ones(dim), requires_grad=True)
        self.dt_rank = dt_rank
        self.state_dim = state_dim

    def forward(self, seq, method="loop"):
        n = self.state_dim
        mix = self.x_proj(seq)
        delta_low = mix[..., :self.dt_rank]
        b_mat = mix[..., self.dt_rank:self.dt_rank + n]
        c_mat = mix[..., self.dt_rank + n:]
        delta = T.softplus(self.delta_proj(delta_low))
        a_neg = T.neg(T.exp(self.A_log))
        return selective_scan(seq, delta, a_neg, b_mat, c_mat, self.D_skip, method=method)


def _delta_bias_init(rng, dim):
    """Bias such that softplus(bias) is log-uniform in [1e-3, 1e-1]."""
    dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=dim))
    return dt + np.log(-np.expm1(-dt))  # inverse softplus


class Ss2d(nn.Module):
    """Gated or gateless selective-scan mixer over a 2D feature map.

    Pipeline: channel projection, depthwise 3x3 conv, SiLU, four directional
    selective scans summed by ``cross_merge``, LayerNorm, (optional SiLU
    gate from a parallel projection of the input), output projection.
    """

    def __init__(self, dim, state_dim, ssm_ratio, dt_rank, rng, gate=False):
        inner = int(round(dim * ssm_ratio))
        self.inner = inner
        self.in_proj = nn.Linear(dim, inner, rng)
        self.gate_proj = nn.Linear(dim, inner, rng) if gate else None
        self.dwconv = nn.Conv2d(inner, inner, 3, rng, groups=inner)
        self.branches = [ScanBranch(inner, state_dim, dt_rank, rng) for _ in range(4)]
        self.out_norm = nn.LayerNorm(inner)
        self.out_proj = nn.Linear(inner, dim, rng)

    def forward(self, x, method="loop"):
        b, c, h, w = x.shape
        tokens = nn.to_tokens(x)
        v = self.in_proj(tokens)
        z = self.gate_proj(tokens) if self.gate_proj is not None else None
        v = T.silu(nn.conv2d(nn.to_map(v, h, w), self.dwconv))
        seqs = cross_scan(v)
        ys = [self.branches[d](seqs[:, d], method=method) for d in range(4)]
        y = cross_merge(T.stack(ys, axis=1), h, w)
        y = self.out_norm(nn.to_tokens(y))
        if z is not None:
            y = y * T.silu(z)
        return nn.to_map(self.out_proj(y), h, w)


def ss2d_forward(x, params, method="loop"):
    return params(x, method=method)


class VssBlock(nn.Module):
    """Pre-norm residual pairing of the SS2D mixer and a feed-forward block."""

    def __init__(self, dim, state_dim, ssm_ratio, dt_rank, rng, ffn, gate=False, cab=None):
        self.ln1 = nn.LayerNorm(dim)
        self.ss2d = Ss2d(dim, state_dim, ssm_ratio, dt_rank, rng, gate=gate)
        self.cab = cab  # optional channel-attention side path, scaled by 0.01
        self.ln2 = nn.LayerNorm(dim)
        self.ffn = ffn

    def forward(self, x):
        normed = nn.channel_norm(x, self.ln1)
        r = x + self.ss2d(normed)
        if self.cab is not None:
            r = r + 0.01 * self.cab(normed)
        return r + self.ffn(nn.channel_norm(r, self.ln2))


def vss_block(x, params):
    return params(x)
