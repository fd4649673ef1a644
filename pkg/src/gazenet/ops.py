"""Differentiable operations over :class:`~gazenet.tensor.Tensor`.

Images use N x C x H x W layout.  Every op checks its forward result for
NaN/Inf and raises :class:`FloatingPointError` naming the op.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .tensor import Tensor, active_tape

Scalar = Union[int, float]

BN_MOMENTUM = 0.9
BN_EPS = 1e-5


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _finish(op: str, data: np.ndarray, inputs: Tuple[Tensor, ...], backward) -> Tensor:
    # one native-precision reduction is much cheaper than isfinite() on big
    # arrays and still propagates any NaN/Inf
    if not np.isfinite(data.sum()):
        raise FloatingPointError(f"{op}: forward produced non-finite values")
    tape = active_tape()
    requires_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = requires_grad
    out.grad = None
    out.name = None
    if requires_grad:
        tape.record(op, out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _finish("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _finish("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data
    return _finish("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    out = np.asarray(x.data.sum(axis=axis))

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _finish("sum", out, (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    shape = x.shape
    out = np.asarray(x.data.mean(axis=axis))
    count = x.size // max(out.size, 1)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).astype(x.dtype),)

    return _finish("mean", out, (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _finish("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _finish("concat", out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return _finish("relu", out, (x,), lambda g: (g * (out > 0),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _finish("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


# ------------------------------------------------------------------ layers

def _out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(dcols: np.ndarray, shape, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c, hp, wp = shape
    dxp = np.zeros(shape, dtype=dcols.dtype)
    dc = dcols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dc[:, :, i, j]
    return dxp


def _tap_slices(n_out: int, n_in: int, offset: int) -> Tuple[slice, slice]:
    """Output/input index ranges where ``out[a] += in[a + offset]`` stays in bounds."""
    lo = max(0, -offset)
    hi = min(n_out, n_in - offset)
    return slice(lo, max(lo, hi)), slice(lo + offset, max(lo, hi) + offset)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with per-output-channel bias.

    Stride-1 kernels multiply first and shift afterwards: one GEMM produces
    every tap's contribution, which are then added at their spatial offsets.
    This avoids materializing a k*k-times inflated patch matrix.  Strided
    kernels use im2col.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if c != cw:
        raise ValueError(f"conv2d channel mismatch: input has {c}, weight expects {cw}")
    if b.shape != (o,):
        raise ValueError(f"conv2d bias shape {b.shape} != ({o},)")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d needs stride >= 1 and padding >= 0")
    ho, wo = _out_size(h, kh, stride, padding), _out_size(wd, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d output size {ho}x{wo} is not positive for input {h}x{wd}")

    if kh == 1 and kw == 1 and padding == 0:
        return _conv_pointwise(x, w, b, stride, ho, wo)
    if stride == 1:
        return _conv_shifted(x, w, b, padding, ho, wo)
    return _conv_im2col(x, w, b, stride, padding, ho, wo)


def _conv_pointwise(x, w, b, stride, ho, wo):
    n, c, h, wd = x.shape
    o = w.shape[0]
    xs = x.data if stride == 1 else x.data[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(xs).reshape(n, c, ho * wo)
    w2 = w.data.reshape(o, c)
    out = np.matmul(w2, cols)
    out += b.data[:, None]

    def backward(g):
        gout = g.reshape(n, o, ho * wo)
        db = gout.sum(axis=(0, 2))
        dw = np.matmul(gout, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        dx = None
        if x.requires_grad:
            dcols = np.matmul(w2.T, gout)
            if stride == 1:
                dx = dcols.reshape(x.shape)
            else:
                dx = np.zeros(x.shape, dtype=g.dtype)
                dx[:, :, ::stride, ::stride] = dcols.reshape(n, c, ho, wo)
        return dx, dw, db

    return _finish("conv2d", out.reshape(n, o, ho, wo), (x, w, b), backward)


def _conv_shifted(x, w, b, padding, ho, wo):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    taps = [(i, j) + _tap_slices(ho, h, i - padding) + _tap_slices(wo, wd, j - padding)
            for i in range(kh) for j in range(kw)]
    w_all = w.data.transpose(2, 3, 0, 1).reshape(kh * kw * o, c)
    xs = x.data.reshape(n, c, h * wd)
    z = np.matmul(w_all, xs).reshape(n, kh, kw, o, h, wd)
    out = np.empty((n, o, ho, wo), dtype=z.dtype)
    out[...] = b.data[None, :, None, None]
    for i, j, oy, iy, ox, ix in taps:
        out[:, :, oy, ox] += z[:, i, j, :, iy, ix]

    def backward(g):
        db = g.sum(axis=(0, 2, 3))
        dz = np.zeros((n, kh, kw, o, h, wd), dtype=g.dtype)
        for i, j, oy, iy, ox, ix in taps:
            dz[:, i, j, :, iy, ix] = g[:, :, oy, ox]
        dz = dz.reshape(n, kh * kw * o, h * wd)
        dw_all = np.matmul(dz, xs.transpose(0, 2, 1)).sum(axis=0)
        dw = dw_all.reshape(kh, kw, o, c).transpose(2, 3, 0, 1)
        dx = np.matmul(w_all.T, dz).reshape(x.shape) if x.requires_grad else None
        return dx, np.ascontiguousarray(dw), db

    return _finish("conv2d", out, (x, w, b), backward)


def _conv_im2col(x, w, b, stride, padding, ho, wo):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    w2 = w.data.reshape(o, c * kh * kw)
    out = np.matmul(w2, cols)
    out += b.data[:, None]

    def backward(g):
        gout = g.reshape(n, o, ho * wo)
        db = gout.sum(axis=(0, 2))
        dw = np.matmul(gout, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        dx = None
        if x.requires_grad:
            dxp = _col2im(np.matmul(w2.T, gout), xp.shape, kh, kw, stride, ho, wo)
            dx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
        return dx, dw, db

    return _finish("conv2d", out.reshape(n, o, ho, wo), (x, w, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map ``x @ w + b`` for x of shape N x F and w of shape F x G."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"linear shape mismatch: x {x.shape}, w {w.shape}")
    if b.shape != (w.shape[1],):
        raise ValueError(f"linear bias shape {b.shape} != ({w.shape[1]},)")
    xd, wd = x.data, w.data
    return _finish("linear", xd @ wd + b.data, (x, w, b),
                   lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)))


@dataclass
class BatchNormState:
    """Running statistics for one normalization layer (None until first update)."""

    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None
    momentum: float = BN_MOMENTUM


def _channel_sum(a: np.ndarray) -> np.ndarray:
    """Per-channel sum over every axis but 1, accumulated in 64-bit across the batch."""
    n, c = a.shape[:2]
    if a.ndim == 2:
        return a.astype(np.float64, copy=False).sum(axis=0)
    # contiguous reduction over H*W first; numpy is slow reducing strided axes
    return a.reshape(n, c, -1).sum(axis=2).astype(np.float64).sum(axis=0)


def _channel_sumsq(a: np.ndarray) -> np.ndarray:
    """Per-channel sum of squares without allocating ``a * a``."""
    if a.ndim == 2:
        return np.einsum("nc,nc->c", a, a, dtype=np.float64)
    n, c = a.shape[:2]
    a3 = a.reshape(n, c, 1, -1)
    return (a3 @ a3.transpose(0, 1, 3, 2)).reshape(n, c).astype(np.float64).sum(axis=0)


def _channel_dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim == 2:
        return np.einsum("nc,nc->c", a, b, dtype=np.float64)
    n, c = a.shape[:2]
    return (a.reshape(n, c, 1, -1) @ b.reshape(n, c, -1, 1)).reshape(n, c).astype(np.float64).sum(axis=0)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               train: bool, eps: float = BN_EPS) -> Tensor:
    """Per-channel normalization over N, H, W.

    In training mode batch statistics are used and the running estimates are
    updated as ``running = momentum * running + (1 - momentum) * batch``.
    """
    if eps <= 0:
        raise ValueError("batch_norm eps must be positive")
    if x.ndim == 4:
        bshape = (1, -1, 1, 1)
    elif x.ndim == 2:
        bshape = (1, -1)
    else:
        raise ValueError(f"batch_norm expects 2-D or 4-D input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm scale/shift must have shape ({c},)")
    count = x.size // c
    if count < 1:
        raise ValueError("batch_norm needs at least one value per channel")
    xd = x.data
    dt = xd.dtype
    gd = gamma.data.reshape(bshape)

    if train:
        mu = _channel_sum(xd) / count
        xhat = xd - mu.astype(dt).reshape(bshape)
        var = _channel_sumsq(xhat) / count
        if state.running_mean is None:
            state.running_mean = np.zeros(c)
            state.running_var = np.ones(c)
        m = state.momentum
        state.running_mean = m * state.running_mean + (1 - m) * mu
        state.running_var = m * state.running_var + (1 - m) * var
        invstd = (1.0 / np.sqrt(var + eps)).astype(dt).reshape(bshape)
        xhat *= invstd
        out = xhat * gd
        out += beta.data.reshape(bshape)

        def backward(g):
            dbeta = _channel_sum(g)
            dgamma = _channel_dot(g, xhat)
            dx = None
            if x.requires_grad:
                dx = g - (dbeta / count).astype(dt).reshape(bshape)
                dx -= xhat * (dgamma / count).astype(dt).reshape(bshape)
                dx *= gd * invstd
            return dx, dgamma.astype(dt), dbeta.astype(dt)
    else:
        if state.running_mean is None:
            raise RuntimeError("batch_norm in eval mode before running statistics were initialized")
        invstd = (1.0 / np.sqrt(state.running_var + eps)).astype(dt).reshape(bshape)
        xhat = (xd - state.running_mean.astype(dt).reshape(bshape)) * invstd
        out = xhat * gd + beta.data.reshape(bshape)

        def backward(g):
            return (g * (gd * invstd), _channel_dot(g, xhat).astype(dt), _channel_sum(g).astype(dt))

    return _finish("batch_norm", out, (x, gamma, beta), backward)


def _window_view(xd: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xd, (k, k), axis=(2, 3))
    return win[:, :, :stride * (ho - 1) + 1:stride, :stride * (wo - 1) + 1:stride]


def pool2d(x: Tensor, kind: str, k: int, stride: int) -> Tensor:
    """Max or average pooling without padding; trailing partial windows are dropped."""
    if kind not in ("max", "avg"):
        raise ValueError(f"unknown pooling kind {kind!r}")
    n, c, h, w = x.shape
    ho, wo = _out_size(h, k, stride, 0), _out_size(w, k, stride, 0)
    if ho < 1 or wo < 1:
        raise ValueError(f"pool2d output size {ho}x{wo} is not positive for input {h}x{w}")
    xd = x.data

    if kind == "avg":
        if k == stride:
            out = xd[:, :, :ho * k, :wo * k].reshape(n, c, ho, k, wo, k).mean(axis=(3, 5))
        else:
            out = _window_view(xd, k, stride, ho, wo).mean(axis=(4, 5))
        out = out.astype(xd.dtype, copy=False)

        def backward(g):
            dx = np.zeros_like(xd)
            gk = g / (k * k)
            for i in range(k):
                for j in range(k):
                    dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gk
            return (dx,)

        return _finish("avg_pool2d", out, (x,), backward)

    if k == 2 and stride == 2:
        # four strided quadrants; ties resolve to the earliest quadrant in row-major order
        quads = [xd[:, :, i:2 * ho:2, j:2 * wo:2] for i in (0, 1) for j in (0, 1)]
        out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))

        def backward(g):
            dx = np.zeros_like(xd)
            taken = np.zeros(out.shape, dtype=bool)
            for idx, q in enumerate(quads):
                hit = q == out
                hit &= ~taken
                taken |= hit
                i, j = divmod(idx, 2)
                dx[:, :, i:2 * ho:2, j:2 * wo:2] = g * hit
            return (dx,)

        return _finish("max_pool2d", out, (x,), backward)

    win = _window_view(xd, k, stride, ho, wo)
    flat = win.reshape(n, c, ho, wo, k * k)
    # argmax returns the first maximum, i.e. row-major tie-break inside the window
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        dx = np.zeros_like(xd)
        for idx in range(k * k):
            i, j = divmod(idx, k)
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g * (arg == idx)
        return (dx,)

    return _finish("max_pool2d", out, (x,), backward)


def upsample_nearest(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Nearest-neighbour upsampling with ``src = floor(dst * H / out_h)``."""
    n, c, h, w = x.shape
    if out_h < h or out_w < w:
        raise ValueError(f"upsample_nearest cannot downsample {h}x{w} to {out_h}x{out_w}")
    rows = (np.arange(out_h) * h) // out_h
    cols = (np.arange(out_w) * w) // out_w
    out = x.data[:, :, rows][:, :, :, cols]
    # every source index appears at least once because out >= in
    row_starts = np.flatnonzero(np.r_[True, rows[1:] != rows[:-1]])
    col_starts = np.flatnonzero(np.r_[True, cols[1:] != cols[:-1]])

    def backward(g):
        g = np.add.reduceat(g, row_starts, axis=2)
        return (np.add.reduceat(g, col_starts, axis=3),)

    return _finish("upsample_nearest", out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over H and W, returning N x C."""
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3)).astype(x.dtype, copy=False)
    return _finish("global_avg_pool", out, (x,),
                   lambda g: (np.broadcast_to((g / (h * w))[:, :, None, None], x.shape).copy(),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def local_response_norm(x: Tensor, depth: int, alpha: float, beta: float, k: float) -> Tensor:
    """Cross-channel normalization ``x / (k + alpha * sum_window x^2) ** beta``.

    The window of ``depth`` channels is centred on each channel and zero-padded
    at the channel boundaries.
    """
    if depth < 1 or depth % 2 == 0:
        raise ValueError("local_response_norm depth must be odd and >= 1")
    xd = x.data
    half = depth // 2

    def window_sum(a):
        padded = np.pad(a, ((0, 0), (half, half), (0, 0), (0, 0)))
        cs = np.cumsum(padded, axis=1)
        cs = np.concatenate([np.zeros_like(cs[:, :1]), cs], axis=1)
        return cs[:, depth:] - cs[:, :-depth]

    s = k + alpha * window_sum(xd * xd)
    scale = s ** (-beta)
    out = xd * scale

    def backward(g):
        inner = window_sum(g * xd * scale / s)
        return (g * scale - 2.0 * alpha * beta * xd * inner,)

    return _finish("local_response_norm", out, (x,), backward)


def dropout(x: Tensor, p: float, train: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout: survivors are scaled by 1 / (1 - p) in training mode."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _finish("dropout", x.data * mask, (x,), lambda g: (g * mask,))


# ------------------------------------------------------------------ losses

def bce_with_logits_sum(logits: Tensor, target: np.ndarray) -> Tensor:
    """Summed binary cross-entropy of ``sigmoid(logits)`` against a 0/1 target."""
    if logits.shape != target.shape:
        raise ValueError(f"bce shape mismatch: logits {logits.shape}, target {target.shape}")
    z = logits.data
    t = target.astype(z.dtype, copy=False)
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray(per.sum(dtype=np.float64), dtype=z.dtype)
    return _finish("bce_with_logits_sum", out, (logits,), lambda g: (g * (_sigmoid(z) - t),))
