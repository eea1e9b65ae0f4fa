"""Volumetric layers: direct 3D convolution, transposed conv, max-pool, batchnorm.

Convolution is evaluated as an explicit patch-matrix (im2col) contraction so
the heavy lifting lands in one BLAS gemm per layer; a numba kernel does the
patch gather. Results are bit-identical to the brute-force definition, which
the tests check against a separate naive loop.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .tensor import Tensor, record

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

# patch matrices above this size are built in depth slabs to bound memory
_COL_SLAB_BYTES = 256 * 1024 * 1024


def _gather_cols_np(xp, k, stride, out_extents):
    from numpy.lib.stride_tricks import sliding_window_view

    n, c = xp.shape[:2]
    do, ho, wo = out_extents
    win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
    win = win[:, :, ::stride, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(1, 5, 6, 7, 0, 2, 3, 4))
    return cols.reshape(c * k * k * k, n * do * ho * wo)


if _HAVE_NUMBA:

    @njit(cache=True)
    def _gather_cols_nb(xp, k, stride, cols, do, ho, wo):
        n, c = xp.shape[0], xp.shape[1]
        for ci in range(c):
            for kd in range(k):
                for kh in range(k):
                    for kw in range(k):
                        row = ((ci * k + kd) * k + kh) * k + kw
                        for ni in range(n):
                            base = ni * do * ho * wo
                            for d in range(do):
                                for h in range(ho):
                                    off = base + (d * ho + h) * wo
                                    src = xp[ni, ci, d * stride + kd, h * stride + kh]
                                    for w in range(wo):
                                        cols[row, off + w] = src[w * stride + kw]


def _gather_cols(xp, k, stride, out_extents):
    if _HAVE_NUMBA:
        n, c = xp.shape[:2]
        do, ho, wo = out_extents
        cols = np.empty((c * k * k * k, n * do * ho * wo), dtype=np.float64)
        _gather_cols_nb(xp, k, stride, cols, do, ho, wo)
        return cols
    return _gather_cols_np(xp, k, stride, out_extents)


def _pad_spatial(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))


def _conv3d_data(x, w, b, stride, padding):
    """Forward pass on raw arrays; returns (out, cols or None)."""
    n, ci = x.shape[:2]
    co, k = w.shape[0], w.shape[2]
    exts = x.shape[2:]
    out_exts = tuple((e + 2 * padding - k) // stride + 1 for e in exts)
    xp = _pad_spatial(x, padding)
    w2 = w.reshape(co, ci * k * k * k)

    col_bytes = ci * k**3 * n * np.prod(out_exts) * 8
    if col_bytes <= _COL_SLAB_BYTES:
        cols = _gather_cols(xp, k, stride, out_exts)
        out2 = w2 @ cols
        out = np.ascontiguousarray(
            out2.reshape(co, n, *out_exts).transpose(1, 0, 2, 3, 4)
        )
    else:
        # slab over output depth; keeps the patch matrix bounded on 128^3 inputs
        cols = None
        do, ho, wo = out_exts
        out = np.empty((n, co, do, ho, wo), dtype=np.float64)
        slab = max(1, int(_COL_SLAB_BYTES // (ci * k**3 * n * ho * wo * 8)))
        for d0 in range(0, do, slab):
            d1 = min(do, d0 + slab)
            xslab = xp[:, :, d0 * stride : (d1 - 1) * stride + k]
            c = _gather_cols(xslab, k, stride, (d1 - d0, ho, wo))
            o2 = w2 @ c
            out[:, :, d0:d1] = o2.reshape(co, n, d1 - d0, ho, wo).transpose(
                1, 0, 2, 3, 4
            )
    if b is not None:
        out += b.reshape(1, co, 1, 1, 1)
    return out, cols


def _dilate(g, stride):
    if stride == 1:
        return g
    n, c, d, h, w = g.shape
    out = np.zeros(
        (n, c, (d - 1) * stride + 1, (h - 1) * stride + 1, (w - 1) * stride + 1)
    )
    out[:, :, ::stride, ::stride, ::stride] = g
    return out


def conv3d(
    x: Tensor,
    w: Tensor,
    b: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Cross-correlate x[N,C_in,D,H,W] with w[C_out,C_in,k,k,k] plus bias."""
    xd, wd = x.data, w.data
    squeeze = False
    if xd.ndim == 4:
        xd = xd[None]
        squeeze = True
    if xd.ndim != 5:
        raise ValueError(f"conv3d: input must be 4D or 5D, got {xd.shape}")
    if wd.ndim != 5 or wd.shape[2] != wd.shape[3] or wd.shape[3] != wd.shape[4]:
        raise ValueError(f"conv3d: weight must be [C_out,C_in,k,k,k], got {wd.shape}")
    k = wd.shape[2]
    if k % 2 == 0:
        raise ValueError(f"conv3d: kernel size must be odd, got {k}")
    if xd.shape[1] != wd.shape[1]:
        raise ValueError(
            f"conv3d: channel mismatch input {xd.shape} vs weight {wd.shape}"
        )
    for e in xd.shape[2:]:
        if (e + 2 * padding - k) % stride != 0 or (e + 2 * padding - k) < 0:
            raise ValueError(
                f"conv3d: non-integer output extent for input {xd.shape}, "
                f"kernel {wd.shape}, stride {stride}, padding {padding}"
            )

    bd = b.data if b is not None else None
    out, cols = _conv3d_data(xd, wd, bd, stride, padding)
    n, ci = xd.shape[:2]
    co = wd.shape[0]
    out_exts = out.shape[2:]

    def bwd(g):
        if squeeze:
            g = g[None] if g.ndim == 4 else g
        gb = g.sum(axis=(0, 2, 3, 4)) if b is not None else None
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3, 4)).reshape(co, -1)
        if cols is not None:
            cc = cols
        else:
            cc = _gather_cols(_pad_spatial(xd, padding), k, stride, out_exts)
        gw = (g2 @ cc.T).reshape(wd.shape)
        gx = None
        if x.requires_grad:
            gd = _dilate(g, stride)
            q = k - 1 - padding
            if q >= 0:
                gp = _pad_spatial(gd, q)
            else:
                gp = gd[:, :, -q:q, -q:q, -q:q]
            wf = wd[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4)
            gx, _ = _conv3d_data(gp, np.ascontiguousarray(wf), None, 1, 0)
            if squeeze:
                gx = gx[0]
        return (gx, gw, gb)

    if squeeze:
        out = out[0]
    return record([x, w, b], out, bwd)


def conv_transpose3d(
    x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 2
) -> Tensor:
    """Transposed conv with fixed kernel 2, stride 2: doubles each extent.

    Weight layout is [C_in, C_out, 2, 2, 2]; the op is the exact adjoint of a
    stride-2, kernel-2 convolution.
    """
    xd, wd = x.data, w.data
    squeeze = False
    if xd.ndim == 4:
        xd = xd[None]
        squeeze = True
    if xd.ndim != 5:
        raise ValueError(f"conv_transpose3d: input must be 4D or 5D, got {x.data.shape}")
    if stride != 2 or wd.shape[2:] != (2, 2, 2):
        raise ValueError(
            f"conv_transpose3d: fixed kernel 2 / stride 2, got weight {wd.shape}, "
            f"stride {stride}"
        )
    if xd.shape[1] != wd.shape[0]:
        raise ValueError(
            f"conv_transpose3d: channel mismatch input {xd.shape} vs weight {wd.shape}"
        )
    n, ci, d, h, wv = xd.shape
    co = wd.shape[1]

    t = np.tensordot(xd, wd, axes=([1], [0]))  # [N,D,H,W,Co,2,2,2]
    out = np.ascontiguousarray(t.transpose(0, 4, 1, 5, 2, 6, 3, 7)).reshape(
        n, co, 2 * d, 2 * h, 2 * wv
    )
    if b is not None:
        out += b.data.reshape(1, co, 1, 1, 1)

    def bwd(g):
        if squeeze:
            g = g[None] if g.ndim == 4 else g
        gr = g.reshape(n, co, d, 2, h, 2, wv, 2)
        gb = g.sum(axis=(0, 2, 3, 4)) if b is not None else None
        gx = None
        if x.requires_grad:
            gx = np.tensordot(gr, wd, axes=([1, 3, 5, 7], [1, 2, 3, 4]))
            gx = np.ascontiguousarray(gx.transpose(0, 4, 1, 2, 3))
            if squeeze:
                gx = gx[0]
        gw = np.tensordot(xd, gr, axes=([0, 2, 3, 4], [0, 2, 4, 6]))
        return (gx, gw, gb)

    if squeeze:
        out = out[0]
    return record([x, w, b], out, bwd)


def maxpool3d(x: Tensor, window: int = 2, stride: int = 2):
    """2x2x2 max pooling; returns (pooled, argmax) with ties to lowest index."""
    if window != 2 or stride != 2:
        raise ValueError("maxpool3d: fixed window 2 / stride 2")
    xd = x.data
    if xd.ndim != 5:
        raise ValueError(f"maxpool3d: input must be 5D, got {xd.shape}")
    n, c, d, h, w = xd.shape
    if d % 2 or h % 2 or w % 2:
        raise ValueError(f"maxpool3d: odd spatial extent in {xd.shape}")
    do, ho, wo = d // 2, h // 2, w // 2
    blocks = np.ascontiguousarray(
        xd.reshape(n, c, do, 2, ho, 2, wo, 2).transpose(0, 1, 2, 4, 6, 3, 5, 7)
    ).reshape(n, c, do, ho, wo, 8)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        z = np.zeros((n, c, do, ho, wo, 8))
        np.put_along_axis(z, idx[..., None], g[..., None], axis=-1)
        gx = (
            z.reshape(n, c, do, ho, wo, 2, 2, 2)
            .transpose(0, 1, 2, 5, 3, 6, 4, 7)
            .reshape(n, c, d, h, w)
        )
        return (np.ascontiguousarray(gx),)

    return record([x], out, bwd), idx


def batchnorm3d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    mode: str,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over (N, D, H, W).

    Train mode normalizes with batch statistics (population variance) and
    updates the running buffers in place; eval mode is a fixed affine map
    from the running buffers.
    """
    xd = x.data
    if xd.ndim != 5:
        raise ValueError(f"batchnorm3d: input must be 5D, got {xd.shape}")
    c = xd.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta)):
        if t.data.shape != (c,):
            raise ValueError(f"batchnorm3d: {name} shape {t.data.shape} != ({c},)")
    if mode not in ("train", "eval"):
        raise ValueError(f"batchnorm3d: unknown mode {mode!r}")

    axes = (0, 2, 3, 4)
    shape_c = (1, c, 1, 1, 1)
    if mode == "eval":
        inv = 1.0 / np.sqrt(running_var.data + eps)
        scale = (gamma.data * inv).reshape(shape_c)
        xhat = (xd - running_mean.data.reshape(shape_c)) * inv.reshape(shape_c)
        out = gamma.data.reshape(shape_c) * xhat + beta.data.reshape(shape_c)

        def bwd_eval(g):
            return (
                g * scale,
                (g * xhat).sum(axis=axes),
                g.sum(axis=axes),
            )

        return record([x, gamma, beta], out, bwd_eval)

    m = xd.shape[0] * xd.shape[2] * xd.shape[3] * xd.shape[4]
    if m < 2:
        raise ValueError(
            f"batchnorm3d: train mode needs >=2 elements per channel, got {m}"
        )
    mu = xd.mean(axis=axes)
    var = xd.var(axis=axes)
    running_mean.data = (1.0 - momentum) * running_mean.data + momentum * mu
    running_var.data = (1.0 - momentum) * running_var.data + momentum * var

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(shape_c)) * inv.reshape(shape_c)
    out = gamma.data.reshape(shape_c) * xhat + beta.data.reshape(shape_c)

    def bwd_train(g):
        gxh = g * gamma.data.reshape(shape_c)
        m1 = gxh.mean(axis=axes).reshape(shape_c)
        m2 = (gxh * xhat).mean(axis=axes).reshape(shape_c)
        gx = inv.reshape(shape_c) * (gxh - m1 - xhat * m2)
        return (gx, (g * xhat).sum(axis=axes), g.sum(axis=axes))

    return record([x, gamma, beta], out, bwd_train)
