"""Differentiable operations on ``Tensor``.

Spatial ops take ``[C, H, W]`` or batched ``[N, C, H, W]`` input and return
the same rank. Convolution is cross-correlation (no kernel flip).

float32 convolution runs through im2col + BLAS. float64 convolution
accumulates kernel taps in a fixed (channel, row, column) order with
separate multiply and add, so it reproduces a scalar nested-loop reference
to the bit; that mode exists for oracle and gradient tests.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import Tensor, as_tensor

__all__ = [
    "add", "sub", "mul", "matmul", "sum", "mean", "reshape", "exp", "log",
    "relu", "sigmoid", "linear", "conv2d", "conv_output_size", "maxpool2d",
    "global_avg_pool", "batchnorm2d", "softmax_spatial", "log_softmax_spatial",
    "softmax_vec", "cross_entropy", "euclidean_distance",
]


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise / reductions -------------------------------------------------

def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return Tensor._make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return Tensor._make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor._make(a.data * b.data, (a, b), backward, "mul")


def matmul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)

    def backward(g):
        if a.requires_grad:
            bt = np.swapaxes(b.data, -1, -2) if b.ndim > 1 else b.data
            ga = g[..., None] * b.data if b.ndim == 1 else g @ bt
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            if a.ndim == 1:
                gb = np.outer(a.data, g) if b.ndim == 2 else a.data * g
            else:
                gb = np.swapaxes(a.data, -1, -2) @ (g if b.ndim > 1 else g[..., None])
                if b.ndim == 1:
                    gb = gb[..., 0]
            b._accumulate(_unbroadcast(gb, b.shape))

    return Tensor._make(a.data @ b.data, (a, b), backward, "matmul")


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    out = np.sum(x.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else axis
            g = np.expand_dims(g, tuple(a % len(shape) for a in axes))
        x._accumulate(np.broadcast_to(g, shape).astype(x.dtype))

    return Tensor._make(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    orig = x.shape

    def backward(g):
        x._accumulate(g.reshape(orig))

    return Tensor._make(x.data.reshape(shape), (x,), backward, "reshape")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def backward(g):
        x._accumulate(g * out)

    return Tensor._make(out, (x,), backward, "exp")


def log(x: Tensor) -> Tensor:
    def backward(g):
        x._accumulate(g / x.data)

    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return Tensor._make(out, (x,), backward, "log")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        x._accumulate(g * mask)

    return Tensor._make(np.where(mask, x.data, 0).astype(x.dtype), (x,), backward, "relu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split form avoids overflow in exp for large |x|
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)

    def backward(g):
        x._accumulate(g * out * (1 - out))

    return Tensor._make(out, (x,), backward, "sigmoid")


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map ``x @ W.T + b`` for ``x`` of shape ``[N]`` or ``[B, N]``."""
    if x.shape[-1] != W.shape[1]:
        raise ValueError(f"linear: input width {x.shape[-1]} != weight columns {W.shape[1]}")
    if b is not None and b.shape != (W.shape[0],):
        raise ValueError(f"linear: bias shape {b.shape} != ({W.shape[0]},)")
    out = x.data @ W.data.T
    if b is not None:
        out = out + b.data

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ W.data)
        if W.requires_grad:
            g2 = g.reshape(-1, g.shape[-1])
            W._accumulate(g2.T @ x.data.reshape(-1, x.shape[-1]))
        if b is not None and b.requires_grad:
            b._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))

    parents = (x, W) if b is None else (x, W, b)
    return Tensor._make(out, parents, backward, "linear")


# -- convolution --------------------------------------------------------------

def conv_output_size(n: int, k: int, stride: int, dilation: int, padding: int) -> int:
    return (n + 2 * padding - (k - 1) * dilation - 1) // stride + 1


def _as_batch(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ValueError(f"expected [C,H,W] or [N,C,H,W] input, got shape {x.shape}")


def _windows(xp: np.ndarray, k: int, stride: int, dilation: int, Ho: int, Wo: int) -> np.ndarray:
    """Strided view [C, k, k, N, Ho, Wo] of a padded [N, C, Hp, Wp] array."""
    sN, sC, sH, sW = xp.strides
    N, C = xp.shape[:2]
    return as_strided(
        xp,
        shape=(C, k, k, N, Ho, Wo),
        strides=(sC, sH * dilation, sW * dilation, sN, sH * stride, sW * stride),
        writeable=False,
    )


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    dilation: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    xb, squeeze = _as_batch(x)
    N, C, H, W = xb.shape
    O, Cg, k, k2 = weight.shape
    if k != k2:
        raise ValueError("conv2d: only square kernels are supported")
    if stride < 1 or dilation < 1 or padding < 0 or groups < 1:
        raise ValueError("conv2d: stride, dilation, groups must be positive and padding nonnegative")
    if C % groups or O % groups:
        raise ValueError(f"conv2d: channels ({C} in, {O} out) not divisible by groups={groups}")
    if Cg != C // groups:
        raise ValueError(f"conv2d: kernel expects {Cg} channels per group, input has {C // groups}")
    if bias is not None and bias.shape != (O,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({O},)")
    Ho = conv_output_size(H, k, stride, dilation, padding)
    Wo = conv_output_size(W, k, stride, dilation, padding)
    if Ho < 1 or Wo < 1:
        raise ValueError(f"conv2d: empty output for input {H}x{W}, kernel {k}, dilation {dilation}")
    G, Og = groups, O // groups
    dtype = xb.dtype
    w = weight.data.astype(dtype, copy=False)

    xp = np.pad(xb, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xb
    win = _windows(xp, k, stride, dilation, Ho, Wo)
    cols_cache: list[np.ndarray] = []

    def cols() -> np.ndarray:
        if not cols_cache:
            cols_cache.append(np.ascontiguousarray(win).reshape(G, Cg * k * k, N * Ho * Wo))
        return cols_cache[0]

    if dtype == np.float64:
        out = np.zeros((N, O, Ho, Wo), dtype=np.float64)
        wg = w.reshape(G, Og, Cg, k, k)
        for gi in range(G):
            acc = out[:, gi * Og:(gi + 1) * Og]
            for c in range(Cg):
                ch = gi * Cg + c
                for n in range(k):
                    for m in range(k):
                        tap = win[ch, n, m]  # [N, Ho, Wo]
                        acc += tap[:, None] * wg[gi, :, c, n, m][None, :, None, None]
        if bias is not None:
            out += bias.data.astype(dtype)[None, :, None, None]
    else:
        res = np.matmul(w.reshape(G, Og, Cg * k * k), cols())  # [G, Og, N*Ho*Wo]
        out = res.reshape(O, N, Ho, Wo).transpose(1, 0, 2, 3)
        if bias is not None:
            out = out + bias.data.astype(dtype)[None, :, None, None]
        out = np.ascontiguousarray(out)

    def backward(g):
        gb = g[None] if squeeze else g
        gmat = gb.transpose(1, 0, 2, 3).reshape(G, Og, N * Ho * Wo)
        if weight.requires_grad:
            gw = np.matmul(gmat, cols().transpose(0, 2, 1))
            weight._accumulate(gw.reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(gb.sum(axis=(0, 2, 3), dtype=np.float64).astype(dtype))
        if x.requires_grad:
            dcols = np.matmul(w.reshape(G, Og, Cg * k * k).transpose(0, 2, 1), gmat)
            dcols = dcols.reshape(C, k, k, N, Ho, Wo)
            dxp = np.zeros(xp.shape, dtype=dtype)
            for n in range(k):
                for m in range(k):
                    r0, c0 = n * dilation, m * dilation
                    dxp[:, :, r0:r0 + stride * (Ho - 1) + 1:stride, c0:c0 + stride * (Wo - 1) + 1:stride] += (
                        dcols[:, n, m].transpose(1, 0, 2, 3)
                    )
            if padding:
                dxp = dxp[:, :, padding:padding + H, padding:padding + W]
            x._accumulate(dxp[0] if squeeze else dxp)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out[0] if squeeze else out, parents, backward, "conv2d")


# -- pooling ------------------------------------------------------------------

def maxpool2d(x: Tensor, k: int, stride: int, padding: int = 0) -> Tensor:
    """Max over k x k windows; padding cells are -inf and never selected.

    Gradient goes to the first maximal cell of each window (row-major).
    """
    if k < 1 or stride < 1:
        raise ValueError("maxpool2d: k and stride must be positive")
    if padding >= k:
        raise ValueError("maxpool2d: padding must be smaller than the window")
    xb, squeeze = _as_batch(x)
    N, C, H, W = xb.shape
    Ho = conv_output_size(H, k, stride, 1, padding)
    Wo = conv_output_size(W, k, stride, 1, padding)
    if Ho < 1 or Wo < 1:
        raise ValueError(f"maxpool2d: empty output for input {H}x{W}")
    xp = xb
    if padding:
        xp = np.pad(xb, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    sN, sC, sH, sW = xp.strides
    win = as_strided(xp, (N, C, Ho, Wo, k, k), (sN, sC, sH * stride, sW * stride, sH, sW), writeable=False)
    flat = win.reshape(N, C, Ho, Wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = g[None] if squeeze else g
        dxp = np.zeros(xp.shape, dtype=xb.dtype)
        for t in range(k * k):
            n, m = divmod(t, k)
            sel = arg == t
            if sel.any():
                dxp[:, :, n:n + stride * (Ho - 1) + 1:stride, m:m + stride * (Wo - 1) + 1:stride] += gb * sel
        if padding:
            dxp = dxp[:, :, padding:padding + H, padding:padding + W]
        x._accumulate(dxp[0] if squeeze else dxp)

    out = np.ascontiguousarray(out)
    return Tensor._make(out[0] if squeeze else out, (x,), backward, "maxpool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the two trailing spatial axes: [C,H,W] -> [C], [N,C,H,W] -> [N,C]."""
    if x.ndim not in (3, 4):
        raise ValueError(f"global_avg_pool: expected 3-D or 4-D input, got {x.shape}")
    H, W = x.shape[-2:]
    if H * W < 1:
        raise ValueError("global_avg_pool: empty spatial extent")
    out = x.data.mean(axis=(-2, -1), dtype=np.float64).astype(x.dtype)
    scale = 1.0 / (H * W)

    def backward(g):
        x._accumulate(np.broadcast_to((g * scale)[..., None, None], x.shape).astype(x.dtype))

    return Tensor._make(out, (x,), backward, "global_avg_pool")


# -- normalization ------------------------------------------------------------

def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over batch and spatial axes.

    Train mode uses the (biased) batch statistics and updates the running
    buffers in place; eval mode is the affine map given by the buffers.
    """
    if eps <= 0:
        raise ValueError("batchnorm2d: eps must be positive")
    xb, squeeze = _as_batch(x)
    dtype = xb.dtype
    C = xb.shape[1]
    axes = (0, 2, 3)
    if training:
        mu = xb.mean(axis=axes, dtype=np.float64)
        var = ((xb - mu.astype(dtype)[None, :, None, None]) ** 2).mean(axis=axes, dtype=np.float64)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var
    else:
        mu = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
    inv = (1.0 / np.sqrt(var + eps)).astype(dtype)
    mu = mu.astype(dtype)
    xhat = (xb - mu[None, :, None, None]) * inv[None, :, None, None]
    gm = gamma.data.astype(dtype).reshape(1, C, 1, 1)
    out = xhat * gm + beta.data.astype(dtype).reshape(1, C, 1, 1)

    def backward(g):
        gb = g[None] if squeeze else g
        if gamma.requires_grad:
            gamma._accumulate((gb * xhat).sum(axis=axes, dtype=np.float64).astype(dtype))
        if beta.requires_grad:
            beta._accumulate(gb.sum(axis=axes, dtype=np.float64).astype(dtype))
        if x.requires_grad:
            gx = gb * gm
            if training:
                m = xb.shape[0] * xb.shape[2] * xb.shape[3]
                s1 = gx.sum(axis=axes, dtype=np.float64).astype(dtype)[None, :, None, None]
                s2 = (gx * xhat).sum(axis=axes, dtype=np.float64).astype(dtype)[None, :, None, None]
                dx = (gx - s1 / m - xhat * s2 / m) * inv[None, :, None, None]
            else:
                dx = gx * inv[None, :, None, None]
            x._accumulate(dx[0] if squeeze else dx)

    return Tensor._make(out[0] if squeeze else out, (x, gamma, beta), backward, "batchnorm2d")


# -- softmax family -----------------------------------------------------------

def _log_softmax_last(z: np.ndarray) -> np.ndarray:
    z64 = z.astype(np.float64)
    m = z64.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(z64 - m).sum(axis=-1, keepdims=True))
    return z64 - lse


def log_softmax_spatial(A: Tensor) -> Tensor:
    """Log of the softmax taken jointly over the two trailing axes."""
    shape = A.shape
    flat = A.data.reshape(*shape[:-2], -1)
    ls = _log_softmax_last(flat)
    p = np.exp(ls)

    def backward(g):
        gf = g.reshape(flat.shape).astype(np.float64)
        gz = gf - p * gf.sum(axis=-1, keepdims=True)
        A._accumulate(gz.reshape(shape).astype(A.dtype))

    return Tensor._make(ls.reshape(shape).astype(A.dtype), (A,), backward, "log_softmax_spatial")


def softmax_spatial(A: Tensor) -> Tensor:
    """exp(A_ij) / sum exp(A), jointly over the two trailing axes."""
    shape = A.shape
    flat = A.data.reshape(*shape[:-2], -1)
    p64 = np.exp(_log_softmax_last(flat))
    p = p64.reshape(shape).astype(A.dtype)

    def backward(g):
        gf = g.reshape(flat.shape).astype(np.float64)
        gz = p64 * (gf - (gf * p64).sum(axis=-1, keepdims=True))
        A._accumulate(gz.reshape(shape).astype(A.dtype))

    return Tensor._make(p, (A,), backward, "softmax_spatial")


def softmax_vec(z: Tensor) -> Tensor:
    """Softmax over the last axis."""
    if z.shape[-1] < 2:
        raise ValueError("softmax_vec: need at least two entries")
    p64 = np.exp(_log_softmax_last(z.data))

    def backward(g):
        g64 = g.astype(np.float64)
        z._accumulate((p64 * (g64 - (g64 * p64).sum(axis=-1, keepdims=True))).astype(z.dtype))

    return Tensor._make(p64.astype(z.dtype), (z,), backward, "softmax_vec")


def cross_entropy(logits: Tensor, labels, weights=None) -> Tensor:
    """Mean of -log softmax(logits)[label] over the batch (fused, stable).

    ``logits`` is ``[K]`` or ``[B, K]``; ``labels`` an int or int array.
    """
    z = logits.data if logits.ndim == 2 else logits.data[None]
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    B, K = z.shape
    if K < 2:
        raise ValueError("cross_entropy: need at least two classes")
    if y.shape != (B,):
        raise ValueError(f"cross_entropy: {y.shape[0]} labels for {B} rows")
    if (y < 0).any() or (y >= K).any():
        raise ValueError(f"cross_entropy: label out of range [0, {K})")
    w = np.ones(B) if weights is None else np.asarray(weights, dtype=np.float64)
    ls = _log_softmax_last(z)
    rows = np.arange(B)
    loss = -(w * ls[rows, y]).sum() / B

    def backward(g):
        p = np.exp(ls)
        p[rows, y] -= 1.0
        gz = p * (w[:, None] * float(g) / B)
        gz = gz.astype(logits.dtype)
        logits._accumulate(gz if logits.ndim == 2 else gz[0])

    return Tensor._make(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


def euclidean_distance(a: Tensor, b) -> Tensor:
    """Row-wise L2 distance over the last axis; zero gradient at coincidence."""
    b = _lift(b, a)
    diff = (a.data - b.data).astype(np.float64)
    d = np.sqrt((diff ** 2).sum(axis=-1))

    def backward(g):
        with np.errstate(invalid="ignore", divide="ignore"):
            unit = np.where(d[..., None] > 0, diff / d[..., None], 0.0)
        ga = (g[..., None] * unit).astype(a.dtype)
        if a.requires_grad:
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-ga, b.shape))

    return Tensor._make(d.astype(a.dtype), (a, b), backward, "euclidean_distance")
