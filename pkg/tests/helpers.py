"""Shared test oracles: brute-force references kept deliberately naive
and independent of the library's vectorized paths."""

import numpy as np


def conv2d_brute_force(x, kernel, stride=1, pad=0):
    """Nested-loop cross-correlation; the reference conv2d is checked
    against."""
    n, cin, h, w = x.shape
    cout, _, kh, kw = kernel.shape
    xp = np.pad(np.asarray(x, dtype=np.float64),
                ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, oh, ow))
    k64 = np.asarray(kernel, dtype=np.float64)
    for b in range(n):
        for o in range(cout):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[b, :, i * stride : i * stride + kh,
                               j * stride : j * stride + kw]
                    out[b, o, i, j] = np.sum(patch * k64[o])
    return out


def central_diff(f, x, eps):
    """Dense central-difference gradient of scalar f at flat array x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        g[i] = (fp - fm) / (2 * eps)
    return grad


def max_2x2_minor(matrix) -> float:
    """Largest |2x2 minor| over all row/column pairs (0 iff rank <= 1)."""
    m = np.asarray(matrix, dtype=np.float64)
    rows, cols = m.shape
    worst = 0.0
    for r1 in range(rows):
        for r2 in range(r1 + 1, rows):
            # all column pairs at once for this row pair
            a, b = m[r1], m[r2]
            minors = np.abs(a[:, None] * b[None, :] - a[None, :] * b[:, None])
            worst = max(worst, float(minors.max()))
    return worst


def mode_unfoldings(tensor):
    """All matricizations of a 3-way tensor."""
    t = np.asarray(tensor)
    return [np.moveaxis(t, mode, 0).reshape(t.shape[mode], -1) for mode in range(t.ndim)]


def relative_error(got, want, floor=1e-12) -> float:
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    denom = np.maximum(np.abs(want), floor)
    return float(np.max(np.abs(got - want) / denom))
