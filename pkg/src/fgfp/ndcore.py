"""Dense-tensor plumbing: NCHW convolution, SGD, and seeded RNG streams.

Tensors are plain numpy arrays in row-major layout with index order
(N, C, H, W). float32 is the storage type everywhere; convolution
accumulates partial sums in float64 and rounds on store, and every
operation also accepts float64 inputs outright (gradient-check harnesses
run the whole engine at 64-bit).

All operations are pure: inputs are never mutated, outputs are freshly
allocated, and identical inputs give bit-identical outputs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NumericError

__all__ = [
    "Grad",
    "tensor",
    "zeros",
    "substream",
    "im2col",
    "conv2d_forward",
    "conv2d_backward",
    "sgd_step",
]


def tensor(shape, values, dtype=np.float32) -> np.ndarray:
    """Build a dense tensor from a flat row-major value sequence."""
    arr = np.asarray(values, dtype=dtype).reshape(-1)
    n = int(np.prod(shape))
    if arr.size != n:
        raise DimensionError(f"shape {tuple(shape)} needs {n} values, got {arr.size}")
    if any(s < 1 for s in shape):
        raise DimensionError(f"shape extents must be >= 1, got {tuple(shape)}")
    return arr.reshape(shape)


def zeros(shape, dtype=np.float32) -> np.ndarray:
    return np.zeros(shape, dtype=dtype)


@dataclass
class Grad:
    """A value tensor paired with a same-shaped gradient accumulator."""

    value: np.ndarray
    gradient: np.ndarray

    def __post_init__(self):
        if self.value.shape != self.gradient.shape:
            raise DimensionError(
                f"gradient shape {self.gradient.shape} != value shape {self.value.shape}"
            )

    @classmethod
    def of(cls, value: np.ndarray) -> "Grad":
        return cls(value=value, gradient=np.zeros_like(value))


def substream(seed: int, *names: str) -> np.random.Generator:
    """Derive an independent, reproducible RNG stream from a root seed.

    Stream identity depends only on (seed, names), so stages of a run can
    be re-executed in isolation.
    """
    keys = [seed & 0xFFFFFFFF]
    for name in names:
        digest = hashlib.sha256(name.encode()).digest()
        keys.append(int.from_bytes(digest[:4], "little"))
    return np.random.default_rng(np.random.SeedSequence(keys))


def _out_extent(extent: int, k: int, stride: int, pad: int) -> int:
    return (extent + 2 * pad - k) // stride + 1


def _check_conv_shapes(inp: np.ndarray, kernel: np.ndarray, stride: int, pad: int):
    if inp.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(
            f"conv2d expects 4-d input/kernel, got {inp.ndim}-d and {kernel.ndim}-d"
        )
    n, cin, h, w = inp.shape
    cout, kcin, kh, kw = kernel.shape
    if cin != kcin:
        raise DimensionError(f"input has {cin} channels but kernel expects {kcin}")
    if stride < 1 or pad < 0:
        raise DimensionError(f"stride must be >= 1 and pad >= 0, got {stride}, {pad}")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}"
        )


def _pad_input(inp: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return inp
    return np.pad(inp, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _window_view(padded: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int):
    # [N, Cin, OH, OW, Kh, Kw] strided view over the padded input
    n, cin = padded.shape[:2]
    sn, sc, sh, sw = padded.strides
    return np.lib.stride_tricks.as_strided(
        padded,
        shape=(n, cin, oh, ow, kh, kw),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )


def im2col(inp: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Receptive-field matrix [N*OH*OW, Cin*Kh*Kw] in float64.

    Row r corresponds to output position (n, oh, ow) in row-major order;
    within a row the layout is (cin, kh, kw). Layers may compute this
    once per step and hand it to conv2d_backward.
    """
    n, cin, h, w = inp.shape
    oh = _out_extent(h, kh, stride, pad)
    ow = _out_extent(w, kw, stride, pad)
    padded = _pad_input(inp, pad)
    windows = _window_view(padded, kh, kw, stride, oh, ow)
    perm = windows.transpose(0, 2, 3, 1, 4, 5)  # [N, OH, OW, Cin, Kh, Kw]
    return np.ascontiguousarray(perm, dtype=np.float64).reshape(
        n * oh * ow, cin * kh * kw
    )


def conv2d_forward(
    inp: np.ndarray,
    kernel: np.ndarray,
    stride: int = 1,
    pad: int = 0,
    cols: np.ndarray | None = None,
) -> np.ndarray:
    """Cross-correlate a [N,Cin,H,W] batch with a [Cout,Cin,Kh,Kw] kernel.

    Zero padding; output is [N, Cout, H', W'] with
    H' = floor((H + 2 pad - Kh) / stride) + 1 and likewise for W'.
    Partial sums accumulate in float64 and round on store. ``cols`` may
    carry a cached im2col(inp, ...) for this call's geometry.
    """
    _check_conv_shapes(inp, kernel, stride, pad)
    n, cin, h, w = inp.shape
    cout, _, kh, kw = kernel.shape
    oh = _out_extent(h, kh, stride, pad)
    ow = _out_extent(w, kw, stride, pad)

    if cols is None:
        cols = im2col(inp, kh, kw, stride, pad)
    kmat = kernel.reshape(cout, cin * kh * kw).astype(np.float64)
    out = cols @ kmat.T
    out = out.reshape(n, oh, ow, cout).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out, dtype=inp.dtype)


def conv2d_backward(
    grad_out: np.ndarray,
    inp: np.ndarray,
    kernel: np.ndarray,
    stride: int = 1,
    pad: int = 0,
    cols: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of a scalar sum-loss w.r.t. conv2d input and kernel.

    ``cols`` may carry a cached im2col(inp, ...) of the same call to skip
    recomputing it.
    """
    _check_conv_shapes(inp, kernel, stride, pad)
    n, cin, h, w = inp.shape
    cout, _, kh, kw = kernel.shape
    oh = _out_extent(h, kh, stride, pad)
    ow = _out_extent(w, kw, stride, pad)
    if grad_out.shape != (n, cout, oh, ow):
        raise DimensionError(
            f"grad_out shape {grad_out.shape} != expected {(n, cout, oh, ow)}"
        )

    if cols is None:
        cols = im2col(inp, kh, kw, stride, pad)
    gmat = (
        grad_out.astype(np.float64)
        .transpose(0, 2, 3, 1)
        .reshape(n * oh * ow, cout)
    )
    kmat = kernel.reshape(cout, cin * kh * kw).astype(np.float64)

    grad_kernel = (gmat.T @ cols).reshape(cout, cin, kh, kw)

    # col2im: scatter (grad_out @ kernel) back onto the padded input; each
    # kernel tap (i, j) owns a disjoint strided slice.
    gcols = (gmat @ kmat).reshape(n, oh, ow, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    grad_padded = np.zeros((n, cin, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            grad_padded[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += (
                gcols[:, :, :, :, i, j]
            )
    if pad:
        grad_input = grad_padded[:, :, pad:-pad, pad:-pad]
    else:
        grad_input = grad_padded
    return (
        np.ascontiguousarray(grad_input, dtype=inp.dtype),
        grad_kernel.astype(kernel.dtype),
    )


def sgd_step(
    params: np.ndarray,
    grads: np.ndarray,
    lr: float,
    momentum_buf: np.ndarray,
    momentum: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """One SGD step with classical momentum.

    buf <- momentum * buf + grad; param <- param - lr * buf. Inputs are
    untouched; the updated (params, buf) pair is returned.
    """
    if params.shape != grads.shape or params.shape != momentum_buf.shape:
        raise DimensionError(
            f"sgd_step shapes differ: {params.shape}, {grads.shape}, {momentum_buf.shape}"
        )
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must be in [0, 1), got {momentum}")
    if lr <= 0.0:
        raise ValueError(f"lr must be positive, got {lr}")
    if not np.all(np.isfinite(grads)):
        raise NumericError("non-finite gradient in sgd_step")
    buf = momentum * momentum_buf + grads
    return params - lr * buf, buf
