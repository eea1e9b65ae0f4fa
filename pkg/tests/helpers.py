"""Shared test oracles: naive reference implementations and finite differences.

Everything here is deliberately independent of the library's fast paths:
convolution is a seven-deep python loop, matmul a triple loop, gradients come
from central finite differences on the forward value alone.
"""

import numpy as np

from fedseg.tensor import Tape, backward


def naive_conv3d(x, w, b=None, stride=1, padding=1):
    """Direct cross-correlation with explicit loops (reference only)."""
    n, ci, d, h, wi = x.shape
    co, _, k, _, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0)) + ((padding, padding),) * 3)
    do = (d + 2 * padding - k) // stride + 1
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wi + 2 * padding - k) // stride + 1
    out = np.zeros((n, co, do, ho, wo))
    for ni in range(n):
        for o in range(co):
            for dd in range(do):
                for hh in range(ho):
                    for ww in range(wo):
                        acc = 0.0
                        for c in range(ci):
                            for kd in range(k):
                                for kh in range(k):
                                    for kw in range(k):
                                        acc += (
                                            w[o, c, kd, kh, kw]
                                            * xp[
                                                ni,
                                                c,
                                                dd * stride + kd,
                                                hh * stride + kh,
                                                ww * stride + kw,
                                            ]
                                        )
                        out[ni, o, dd, hh, ww] = acc + (b[o] if b is not None else 0.0)
    return out


def naive_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def naive_maxpool3d(x):
    n, c, d, h, w = x.shape
    out = np.empty((n, c, d // 2, h // 2, w // 2))
    for ni in range(n):
        for ci in range(c):
            for dd in range(d // 2):
                for hh in range(h // 2):
                    for ww in range(w // 2):
                        out[ni, ci, dd, hh, ww] = x[
                            ni,
                            ci,
                            2 * dd : 2 * dd + 2,
                            2 * hh : 2 * hh + 2,
                            2 * ww : 2 * ww + 2,
                        ].max()
    return out


def fd_gradient(value_fn, arr, indices, h=1e-5):
    """Central finite differences of value_fn() w.r.t. arr at flat indices."""
    flat = arr.reshape(-1)
    grads = np.empty(len(indices))
    for j, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + h
        up = value_fn()
        flat[i] = orig - h
        down = value_fn()
        flat[i] = orig
        grads[j] = (up - down) / (2.0 * h)
    return grads


def gradcheck(build_loss, tensors, rng, samples=8, h=1e-5, rtol=1e-4, floor=1e-3):
    """Compare tape gradients of build_loss() against finite differences.

    ``build_loss`` must rerun the forward pass from the current tensor data.
    Relative error uses an absolute floor so near-zero gradients compare
    absolutely.
    """
    for t in tensors:
        t.grad = None
    with Tape():
        loss = build_loss()
        backward(loss)
    analytic = {id(t): (t.grad if t.grad is not None else np.zeros_like(t.data)) for t in tensors}

    def value():
        return float(build_loss().data)

    worst = 0.0
    for t in tensors:
        n = t.data.size
        k = min(samples, n)
        idx = rng.choice(n, size=k, replace=False)
        fd = fd_gradient(value, t.data, idx, h=h)
        an = analytic[id(t)].reshape(-1)[idx]
        rel = np.abs(an - fd) / np.maximum(floor, np.maximum(np.abs(an), np.abs(fd)))
        worst = max(worst, float(rel.max()))
        assert rel.max() < rtol, (
            f"gradient mismatch (rel {rel.max():.3e}) analytic={an} fd={fd}"
        )
    return worst
