"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

Backend selection: set ``EOLT_BACKEND=numpy`` to force the numpy path or
``EOLT_BACKEND=numba`` to require the jitted path (ImportError if numba is
missing). Unset, numba is used when importable. Both paths implement the
same contracts; run ``benchmarks/bench_kernels.py`` to compare them.

Conventions: images are (C, H, W) float arrays; conv kernels are
(O, C, kh, kw); all convolutions here are *valid* cross-correlations —
callers pad beforehand. Grids hold (row, col) source coordinates in pixel
units; out-of-range coordinates replicate the border.
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_REQUESTED = os.environ.get("EOLT_BACKEND", "").strip().lower()
if _REQUESTED not in ("", "numba", "numpy"):
    raise ValueError(f"EOLT_BACKEND must be 'numba' or 'numpy', got {_REQUESTED!r}")

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None
    _HAVE_NUMBA = False

if _REQUESTED == "numba" and not _HAVE_NUMBA:  # pragma: no cover
    raise ImportError("EOLT_BACKEND=numba but numba is not importable")

_USE_NUMBA = _HAVE_NUMBA and _REQUESTED != "numpy"


def backend_name() -> str:
    return "numba" if _USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def _conv2d_valid_np(x, k, stride):
    kh, kw = k.shape[2], k.shape[3]
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    return np.einsum("chwij,ocij->ohw", win, k, optimize=True)


def _conv2d_vjp_input_np(g, k, stride, hp, wp):
    o, ho, wo = g.shape
    kh, kw = k.shape[2], k.shape[3]
    gx = np.zeros((k.shape[1], hp, wp), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            contrib = np.einsum("ohw,oc->chw", g, k[:, :, i, j], optimize=True)
            gx[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += contrib
    return gx


def _conv2d_vjp_kernel_np(xp, g, stride, kh, kw):
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    return np.einsum("chwij,ohw->ocij", win, g, optimize=True)


def _depthwise_valid_np(x, psf):
    kh, kw = psf.shape
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))
    return np.einsum("chwij,ij->chw", win, psf, optimize=True)


def _grid_sample_np(x, grid):
    c, h, w = x.shape
    sy = np.clip(grid[..., 0], 0.0, h - 1.0)
    sx = np.clip(grid[..., 1], 0.0, w - 1.0)
    y0 = np.minimum(np.floor(sy).astype(np.int64), h - 2) if h > 1 else np.zeros_like(sy, np.int64)
    x0 = np.minimum(np.floor(sx).astype(np.int64), w - 2) if w > 1 else np.zeros_like(sx, np.int64)
    y0 = np.maximum(y0, 0)
    x0 = np.maximum(x0, 0)
    fy = sy - y0
    fx = sx - x0
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    out = (
        x[:, y0, x0] * w00
        + x[:, y0, x1] * w01
        + x[:, y1, x0] * w10
        + x[:, y1, x1] * w11
    )
    return np.ascontiguousarray(out)


def _grid_sample_vjp_np(grid, g, h, w):
    c = g.shape[0]
    sy = np.clip(grid[..., 0], 0.0, h - 1.0)
    sx = np.clip(grid[..., 1], 0.0, w - 1.0)
    y0 = np.minimum(np.floor(sy).astype(np.int64), h - 2) if h > 1 else np.zeros_like(sy, np.int64)
    x0 = np.minimum(np.floor(sx).astype(np.int64), w - 2) if w > 1 else np.zeros_like(sx, np.int64)
    y0 = np.maximum(y0, 0)
    x0 = np.maximum(x0, 0)
    fy = sy - y0
    fx = sx - x0
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    gx = np.zeros((c, h, w), dtype=g.dtype)
    for ch in range(c):
        np.add.at(gx[ch], (y0, x0), g[ch] * (1 - fy) * (1 - fx))
        np.add.at(gx[ch], (y0, x1), g[ch] * (1 - fy) * fx)
        np.add.at(gx[ch], (y1, x0), g[ch] * fy * (1 - fx))
        np.add.at(gx[ch], (y1, x1), g[ch] * fy * fx)
    return gx


def _median_filter_np(xp, k):
    win = sliding_window_view(xp, (k, k), axis=(1, 2))
    return np.median(win, axis=(3, 4))


# ---------------------------------------------------------------------------
# numba implementations (loop forms of the same contracts)
# ---------------------------------------------------------------------------

if _HAVE_NUMBA:
    _njit = numba.njit(cache=True)

    @_njit
    def _conv2d_valid_nb(x, k, stride):
        # local row accumulator keeps the inner loop alias-free so it
        # vectorizes; measurably faster than the naive nest at these sizes
        c, h, w = x.shape
        o, _, kh, kw = k.shape
        ho = (h - kh) // stride + 1
        wo = (w - kw) // stride + 1
        out = np.empty((o, ho, wo), dtype=x.dtype)
        row = np.empty(wo, dtype=x.dtype)
        for oc in range(o):
            for oy in range(ho):
                for ox in range(wo):
                    row[ox] = 0.0
                for ic in range(c):
                    for ky in range(kh):
                        xrow = x[ic, oy * stride + ky]
                        for kx in range(kw):
                            kv = k[oc, ic, ky, kx]
                            if stride == 1:
                                for ox in range(wo):
                                    row[ox] += kv * xrow[ox + kx]
                            else:
                                for ox in range(wo):
                                    row[ox] += kv * xrow[ox * stride + kx]
                for ox in range(wo):
                    out[oc, oy, ox] = row[ox]
        return out

    @_njit
    def _conv2d_vjp_input_nb(g, k, stride, hp, wp):
        o, ho, wo = g.shape
        _, c, kh, kw = k.shape
        gx = np.empty((c, hp, wp), dtype=g.dtype)
        buf = np.empty((hp, wp), dtype=g.dtype)
        for ic in range(c):
            for yy in range(hp):
                for xx in range(wp):
                    buf[yy, xx] = 0.0
            for oc in range(o):
                for ky in range(kh):
                    for kx in range(kw):
                        kv = k[oc, ic, ky, kx]
                        for oy in range(ho):
                            brow = buf[oy * stride + ky]
                            grow = g[oc, oy]
                            if stride == 1:
                                for ox in range(wo):
                                    brow[ox + kx] += kv * grow[ox]
                            else:
                                for ox in range(wo):
                                    brow[ox * stride + kx] += kv * grow[ox]
            for yy in range(hp):
                for xx in range(wp):
                    gx[ic, yy, xx] = buf[yy, xx]
        return gx

    @_njit
    def _conv2d_vjp_kernel_nb(xp, g, stride, kh, kw):
        c, hp, wp = xp.shape
        o, ho, wo = g.shape
        gk = np.zeros((o, c, kh, kw), dtype=g.dtype)
        for oc in range(o):
            for ic in range(c):
                for ky in range(kh):
                    for kx in range(kw):
                        acc = 0.0
                        for oy in range(ho):
                            iy = oy * stride + ky
                            for ox in range(wo):
                                acc += g[oc, oy, ox] * xp[ic, iy, ox * stride + kx]
                        gk[oc, ic, ky, kx] = acc
        return gk

    @_njit
    def _depthwise_valid_nb(x, psf):
        c, h, w = x.shape
        kh, kw = psf.shape
        ho = h - kh + 1
        wo = w - kw + 1
        out = np.zeros((c, ho, wo), dtype=x.dtype)
        for ic in range(c):
            for ky in range(kh):
                for kx in range(kw):
                    kv = psf[ky, kx]
                    for oy in range(ho):
                        for ox in range(wo):
                            out[ic, oy, ox] += kv * x[ic, oy + ky, ox + kx]
        return out

    @_njit
    def _grid_sample_nb(x, grid):
        c, h, w = x.shape
        ho, wo = grid.shape[0], grid.shape[1]
        out = np.zeros((c, ho, wo), dtype=x.dtype)
        for oy in range(ho):
            for ox in range(wo):
                sy = min(max(grid[oy, ox, 0], 0.0), h - 1.0)
                sx = min(max(grid[oy, ox, 1], 0.0), w - 1.0)
                y0 = int(np.floor(sy))
                x0 = int(np.floor(sx))
                if y0 > h - 2:
                    y0 = h - 2
                if x0 > w - 2:
                    x0 = w - 2
                if y0 < 0:
                    y0 = 0
                if x0 < 0:
                    x0 = 0
                fy = sy - y0
                fx = sx - x0
                y1 = min(y0 + 1, h - 1)
                x1 = min(x0 + 1, w - 1)
                for ic in range(c):
                    out[ic, oy, ox] = (
                        x[ic, y0, x0] * (1 - fy) * (1 - fx)
                        + x[ic, y0, x1] * (1 - fy) * fx
                        + x[ic, y1, x0] * fy * (1 - fx)
                        + x[ic, y1, x1] * fy * fx
                    )
        return out

    @_njit
    def _grid_sample_vjp_nb(grid, g, h, w):
        c, ho, wo = g.shape
        gx = np.zeros((c, h, w), dtype=g.dtype)
        for oy in range(ho):
            for ox in range(wo):
                sy = min(max(grid[oy, ox, 0], 0.0), h - 1.0)
                sx = min(max(grid[oy, ox, 1], 0.0), w - 1.0)
                y0 = int(np.floor(sy))
                x0 = int(np.floor(sx))
                if y0 > h - 2:
                    y0 = h - 2
                if x0 > w - 2:
                    x0 = w - 2
                if y0 < 0:
                    y0 = 0
                if x0 < 0:
                    x0 = 0
                fy = sy - y0
                fx = sx - x0
                y1 = min(y0 + 1, h - 1)
                x1 = min(x0 + 1, w - 1)
                for ic in range(c):
                    gv = g[ic, oy, ox]
                    gx[ic, y0, x0] += gv * (1 - fy) * (1 - fx)
                    gx[ic, y0, x1] += gv * (1 - fy) * fx
                    gx[ic, y1, x0] += gv * fy * (1 - fx)
                    gx[ic, y1, x1] += gv * fy * fx
        return gx

    @_njit
    def _median_filter_nb(xp, k):
        c, hp, wp = xp.shape
        ho = hp - k + 1
        wo = wp - k + 1
        out = np.zeros((c, ho, wo), dtype=xp.dtype)
        buf = np.zeros(k * k, dtype=xp.dtype)
        mid = (k * k) // 2
        for ic in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    n = 0
                    for ky in range(k):
                        for kx in range(k):
                            buf[n] = xp[ic, oy + ky, ox + kx]
                            n += 1
                    buf.sort()
                    out[ic, oy, ox] = buf[mid]
        return out


_NUMPY_IMPLS = {
    "conv2d_valid": _conv2d_valid_np,
    "conv2d_vjp_input": _conv2d_vjp_input_np,
    "conv2d_vjp_kernel": _conv2d_vjp_kernel_np,
    "depthwise_valid": _depthwise_valid_np,
    "grid_sample": _grid_sample_np,
    "grid_sample_vjp": _grid_sample_vjp_np,
    "median_filter": _median_filter_np,
}

if _HAVE_NUMBA:
    _NUMBA_IMPLS = {
        "conv2d_valid": _conv2d_valid_nb,
        "conv2d_vjp_input": _conv2d_vjp_input_nb,
        "conv2d_vjp_kernel": _conv2d_vjp_kernel_nb,
        "depthwise_valid": _depthwise_valid_nb,
        "grid_sample": _grid_sample_nb,
        "grid_sample_vjp": _grid_sample_vjp_nb,
        "median_filter": _median_filter_nb,
    }
else:  # pragma: no cover
    _NUMBA_IMPLS = {}

_ACTIVE = _NUMBA_IMPLS if _USE_NUMBA else _NUMPY_IMPLS


def _contig(a):
    return np.ascontiguousarray(a)


def conv2d_valid(x, k, stride=1):
    """Valid cross-correlation of (C,H,W) with (O,C,kh,kw) -> (O,H',W')."""
    return _ACTIVE["conv2d_valid"](_contig(x), _contig(k), stride)


def conv2d_vjp_input(g, k, stride, hp, wp):
    """Adjoint of conv2d_valid w.r.t. its (already padded) input."""
    return _ACTIVE["conv2d_vjp_input"](_contig(g), _contig(k), stride, hp, wp)


def conv2d_vjp_kernel(xp, g, stride, kh, kw):
    """Adjoint of conv2d_valid w.r.t. the kernel."""
    return _ACTIVE["conv2d_vjp_kernel"](_contig(xp), _contig(g), stride, kh, kw)


def depthwise_valid(x, psf):
    """Per-channel valid cross-correlation with a shared 2-D stencil."""
    return _ACTIVE["depthwise_valid"](_contig(x), _contig(psf))


def grid_sample(x, grid):
    """Bilinear sample of (C,H,W) at (H',W',2) pixel coordinates."""
    return _ACTIVE["grid_sample"](_contig(x), _contig(grid))


def grid_sample_vjp(grid, g, h, w):
    """Scatter adjoint of grid_sample w.r.t. the image."""
    return _ACTIVE["grid_sample_vjp"](_contig(grid), _contig(g), h, w)


def median_filter_valid(xp, k):
    """Per-channel k x k median over an already padded (C,H,W) image."""
    return _ACTIVE["median_filter"](_contig(xp), int(k))
