"""Image-domain operators: warping, resizing, mask sampling, census distance,
Laplacian pyramid loss.

Flow fields are (N, 2, H, W) tensors; channel 0 is horizontal displacement u
(pixels), channel 1 is vertical displacement v, both at the field's own
resolution.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import (Tensor, _finish, _tracking, abs_, add, as_tensor, concat,
                     custom_unary, mean, mul, narrow, pad2d, sigmoid, sub,
                     subsample2, sum_)

# ---------------------------------------------------------------------------
# backward warping
# ---------------------------------------------------------------------------

def warp_backward(src, flow) -> Tensor:
    """Sample src at (x + u, y + v) with bilinear interpolation.

    Sample coordinates are clamped to the image border, so a zero flow is the
    exact identity. Differentiable in both src and flow; the flow gradient is
    zero wherever the sample coordinate is clamped.
    """
    src, flow = as_tensor(src), as_tensor(flow)
    n, c, h, w = src.data.shape
    if flow.data.shape != (n, 2, h, w):
        raise DimensionError(
            f"warp_backward: src {src.data.shape} and flow {flow.data.shape} disagree")
    dt = src.data.dtype
    yy, xx = np.meshgrid(np.arange(h, dtype=dt), np.arange(w, dtype=dt), indexing="ij")
    xs = np.clip(xx + flow.data[:, 0], 0, w - 1)
    ys = np.clip(yy + flow.data[:, 1], 0, h - 1)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0).astype(dt)
    fy = (ys - y0).astype(dt)
    bi = np.arange(n)[:, None, None]

    def gather(yi, xi):
        # (n, h, w, c) -> (n, c, h, w)
        return src.data[bi, :, yi, xi].transpose(0, 3, 1, 2)

    v00, v01 = gather(y0, x0), gather(y0, x1)
    v10, v11 = gather(y1, x0), gather(y1, x1)
    wx, wy = fx[:, None], fy[:, None]
    out = ((1 - wy) * ((1 - wx) * v00 + wx * v01)
           + wy * ((1 - wx) * v10 + wx * v11))
    if not _tracking(src, flow):
        return _finish(out, (), None)

    inside_x = ((xx + flow.data[:, 0] > 0) & (xx + flow.data[:, 0] < w - 1)).astype(dt)
    inside_y = ((yy + flow.data[:, 1] > 0) & (yy + flow.data[:, 1] < h - 1)).astype(dt)

    flat_base = (np.arange(n)[:, None, None] * h)  # (n,1,1) batch offsets in rows

    def bwd(g):
        gl = g.transpose(0, 2, 3, 1).reshape(n * h * w, c)  # (positions, c)
        dsrc = np.zeros((n * h * w, c), dtype=dt)
        for yi, xi, wgt in (
            (y0, x0, (1 - fy) * (1 - fx)),
            (y0, x1, (1 - fy) * fx),
            (y1, x0, fy * (1 - fx)),
            (y1, x1, fy * fx),
        ):
            idx = ((flat_base + yi) * w + xi).reshape(-1)
            vals = gl * wgt.reshape(-1, 1)
            # bincount per channel is far faster than ufunc.at scatter
            for ch in range(c):
                dsrc[:, ch] += np.bincount(idx, weights=vals[:, ch],
                                           minlength=n * h * w)
        d_dx = (1 - wy) * (v01 - v00) + wy * (v11 - v10)
        d_dy = (1 - wx) * (v10 - v00) + wx * (v11 - v01)
        du = (g * d_dx).sum(axis=1) * inside_x
        dv = (g * d_dy).sum(axis=1) * inside_y
        return ((src, np.ascontiguousarray(
                    dsrc.reshape(n, h, w, c).transpose(0, 3, 1, 2).astype(dt, copy=False))),
                (flow, np.stack([du, dv], axis=1)))

    return _finish(out, (src, flow), bwd)


# ---------------------------------------------------------------------------
# resizing
# ---------------------------------------------------------------------------

@lru_cache(maxsize=64)
def _resize_matrix(n_in: int, n_out: int, dtype_name: str) -> np.ndarray:
    """Row-stochastic interpolation matrix, align-corners=false convention."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for o in range(n_out):
        s = np.clip((o + 0.5) * scale - 0.5, 0, n_in - 1)
        i0 = int(np.floor(s))
        i1 = min(i0 + 1, n_in - 1)
        f = s - i0
        m[o, i0] += 1 - f
        m[o, i1] += f
    return m.astype(dtype_name)


def bilinear_resize(x, scale: float, is_flow: bool = False) -> Tensor:
    """Standard bilinear resize. For flow fields the displacement values are
    additionally multiplied by the scale so they stay in output-pixel units."""
    x = as_tensor(x)
    n, c, h, w = x.data.shape
    oh, ow = int(round(h * scale)), int(round(w * scale))
    if oh < 1 or ow < 1:
        raise ContractError(f"bilinear_resize: target extent {oh}x{ow} is not positive")
    rh = _resize_matrix(h, oh, x.data.dtype.name)
    rw = _resize_matrix(w, ow, x.data.dtype.name)
    gain = x.data.dtype.type(scale) if is_flow else x.data.dtype.type(1)
    out = np.einsum("nchw,ph,qw->ncpq", x.data, rh, rw, optimize=True) * gain
    if not _tracking(x):
        return _finish(out, (), None)

    def bwd(g):
        dx = np.einsum("ncpq,ph,qw->nchw", g, rh, rw, optimize=True) * gain
        return ((x, dx),)

    return _finish(out, (x,), bwd)


def nearest_upsample(x, factor: int) -> Tensor:
    x = as_tensor(x)
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    if not _tracking(x):
        return _finish(out, (), None)
    n, c, h, w = x.data.shape

    def bwd(g):
        return ((x, g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5))),)

    return _finish(out, (x,), bwd)


def avg_downsample(m, factor: int) -> Tensor:
    """Non-overlapping factor x factor mean pooling; preserves the global mean."""
    m = as_tensor(m)
    n, c, h, w = m.data.shape
    if h % factor or w % factor:
        raise ContractError(
            f"avg_downsample: extent {h}x{w} not divisible by {factor}")
    out = m.data.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))
    if not _tracking(m):
        return _finish(out, (), None)
    inv = m.data.dtype.type(1.0 / (factor * factor))

    def bwd(g):
        gg = np.broadcast_to(g[:, :, :, None, :, None] * inv,
                             (n, c, h // factor, factor, w // factor, factor))
        return ((m, gg.reshape(n, c, h, w).copy()),)

    return _finish(out, (m,), bwd)


# ---------------------------------------------------------------------------
# Gumbel-softmax pruning masks
# ---------------------------------------------------------------------------

def sample_gumbel(shape, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    u = rng.random(shape, dtype=np.float64)
    u = np.clip(u, 1e-12, 1.0 - 1e-12)
    return (-np.log(-np.log(u))).astype(dtype)


def gumbel_softmax(logits, tau: float, rng: np.random.Generator | None = None,
                   noise: np.ndarray | None = None, hard: bool = False) -> Tensor:
    """Two-channel Gumbel softmax over (N, 2, H, W) logits.

    Returns the channel-1 ("keep") probability as an (N, 1, H, W) map. Soft
    mode perturbs logits with Gumbel(0,1) noise and is differentiable; hard
    mode ignores noise and returns the {0,1} argmax (ties resolve to keep).
    """
    logits = as_tensor(logits)
    if logits.data.ndim != 4 or logits.data.shape[1] != 2:
        raise DimensionError(f"gumbel_softmax expects (N,2,H,W) logits, got {logits.data.shape}")
    if hard:
        keep = (logits.data[:, 1:2] >= logits.data[:, 0:1])
        return Tensor(keep.astype(logits.data.dtype))
    if tau <= 0:
        raise ContractError(f"gumbel_softmax: tau must be positive, got {tau}")
    if noise is None:
        if rng is not None:
            noise = sample_gumbel(logits.data.shape, rng, logits.data.dtype)
        else:
            noise = np.zeros_like(logits.data)
    noise = np.asarray(noise, dtype=logits.data.dtype)
    if noise.shape != logits.data.shape:
        raise DimensionError(f"gumbel noise shape {noise.shape} != logits shape {logits.data.shape}")
    perturbed = add(logits, Tensor(noise))
    z = sub(narrow(perturbed, 1, 1, 1), narrow(perturbed, 1, 0, 1))
    return sigmoid(mul(z, 1.0 / tau))


# ---------------------------------------------------------------------------
# census distance
# ---------------------------------------------------------------------------

_CENSUS_EPS = 0.81       # soft-sign denominator
_CENSUS_THRESH = 0.1     # robust kernel offset


def _soft_sign(t: Tensor) -> Tensor:
    return custom_unary(
        t,
        lambda v: v / np.sqrt(_CENSUS_EPS + v * v),
        lambda v: _CENSUS_EPS / (_CENSUS_EPS + v * v) ** 1.5,
    )


def _robust(t: Tensor) -> Tensor:
    return custom_unary(
        t,
        lambda v: (v * v) / (_CENSUS_THRESH + v * v),
        lambda v: (2.0 * _CENSUS_THRESH * v) / (_CENSUS_THRESH + v * v) ** 2,
    )


def census_distance(a, b) -> Tensor:
    """Soft Hamming distance between 3x3 census transforms of a and b.

    Per channel, each pixel's descriptor is the soft sign of the eight
    neighbor-center differences (replicate padding keeps the transform exactly
    invariant to a per-image additive constant); descriptor differences pass
    through a robust kernel and the result is averaged over everything.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise DimensionError(f"census_distance: shapes {a.data.shape} vs {b.data.shape}")
    n, c, h, w = a.data.shape
    ap, bp = pad2d(a, 1, mode="edge"), pad2d(b, 1, mode="edge")
    total = None
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            na = narrow(narrow(ap, 2, 1 + di, h), 3, 1 + dj, w)
            nb = narrow(narrow(bp, 2, 1 + di, h), 3, 1 + dj, w)
            qa = _soft_sign(sub(na, a))
            qb = _soft_sign(sub(nb, b))
            term = _robust(sub(qa, qb))
            total = term if total is None else add(total, term)
    return mean(total)


# ---------------------------------------------------------------------------
# Laplacian pyramid loss
# ---------------------------------------------------------------------------

_BINOMIAL5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def binomial_blur(x) -> Tensor:
    """Separable 5-tap binomial blur with zero padding (self-adjoint)."""
    x = as_tensor(x)
    n, c, h, w = x.data.shape
    taps = _BINOMIAL5.astype(x.data.dtype)
    xp = pad2d(x, 2, mode="zero")
    rows = None
    for i, t in enumerate(taps):
        part = mul(narrow(xp, 2, i, h), float(t))
        rows = part if rows is None else add(rows, part)
    rows = narrow(rows, 3, 2, w)  # undo the horizontal padding
    xp2 = pad2d(rows, 2, mode="zero")
    out = None
    for j, t in enumerate(taps):
        part = mul(narrow(narrow(xp2, 3, j, w), 2, 2, h), float(t))
        out = part if out is None else add(out, part)
    return out


def laplacian_pyramid(x, levels: int) -> list[Tensor]:
    x = as_tensor(x)
    h, w = x.data.shape[2], x.data.shape[3]
    div = 2 ** (levels - 1)
    if h % div or w % div:
        raise ContractError(
            f"laplacian pyramid: extent {h}x{w} not divisible by {div}")
    bands = []
    cur = x
    for _ in range(levels - 1):
        low = subsample2(binomial_blur(cur))
        bands.append(sub(cur, bilinear_resize(low, 2)))
        cur = low
    bands.append(cur)
    return bands


def laplacian_l1(a, b, levels: int = 5) -> Tensor:
    """Sum over pyramid levels of 2^level * mean |La - Lb| (level 0 finest).

    With levels=1 this is exactly the mean absolute error.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise DimensionError(f"laplacian_l1: shapes {a.data.shape} vs {b.data.shape}")
    pa = laplacian_pyramid(a, levels)
    pb = laplacian_pyramid(b, levels)
    total = None
    for lvl, (la, lb) in enumerate(zip(pa, pb)):
        term = mul(mean(abs_(sub(la, lb))), float(2 ** lvl))
        total = term if total is None else add(total, term)
    return total
