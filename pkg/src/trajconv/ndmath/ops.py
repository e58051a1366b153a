"""Differentiable operations over :class:`NdArray`.

Only the op set needed by the trajectory predictors is provided. Convolutions
use cross-correlation semantics with zero padding and unit stride (transpose
convolution additionally accepts a stride).
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .array import ContractError, DimensionError, NdArray, as_array, make_node

# upper bound on im2col buffer elements per chunk
_COL_BUDGET = 1 << 19


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _lift(x, like: NdArray) -> NdArray:
    if isinstance(x, NdArray):
        return x
    return NdArray(np.asarray(x, dtype=like.data.dtype))


# elementwise ---------------------------------------------------------------

def add(a, b) -> NdArray:
    a = as_array(a)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape
    return make_node(
        a.data + b.data, (a, b), "add",
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        np.add,
    )


def sub(a, b) -> NdArray:
    if not isinstance(a, NdArray):
        b = as_array(b)
        a = _lift(a, b)
    a = as_array(a)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape
    return make_node(
        a.data - b.data, (a, b), "sub",
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        np.subtract,
    )


def mul(a, b) -> NdArray:
    a = as_array(a)
    b = _lift(b, a)
    ad, bd = a.data, b.data
    return make_node(
        ad * bd, (a, b), "mul",
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        np.multiply,
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: NdArray) -> NdArray:
    y = _sigmoid(x.data)
    return make_node(y, (x,), "sigmoid", lambda g: (g * y * (1 - y),), _sigmoid)


def tanh(x: NdArray) -> NdArray:
    y = np.tanh(x.data)
    return make_node(y, (x,), "tanh", lambda g: (g * (1 - y * y),), np.tanh)


def _relu(x):
    return np.maximum(x, 0)


def relu_apply(x: NdArray) -> NdArray:
    """Elementwise max(0, x); the subgradient at 0 is 0."""
    mask = x.data > 0
    return make_node(x.data * mask, (x,), "relu", lambda g: (g * mask,), _relu)


# shape ops -------------------------------------------------------------------

def reshape(x: NdArray, shape) -> NdArray:
    src = x.shape
    return make_node(
        x.data.reshape(shape), (x,), "reshape",
        lambda g: (g.reshape(src),),
        lambda a: a.reshape(shape),
    )


def transpose(x: NdArray, axes=None) -> NdArray:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return make_node(
        x.data.transpose(axes), (x,), "transpose",
        lambda g: (g.transpose(inv),),
        lambda a: a.transpose(axes),
    )


def getitem(x: NdArray, index) -> NdArray:
    src, dtype = x.shape, x.data.dtype

    def back(g):
        gx = np.zeros(src, dtype=dtype)
        gx[index] += g
        return (gx,)

    return make_node(x.data[index], (x,), "getitem", back, lambda a: a[index])


def stack(xs: Sequence[NdArray], axis: int = 0) -> NdArray:
    xs = [as_array(x) for x in xs]
    n = len(xs)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return make_node(
        np.stack([x.data for x in xs], axis=axis), xs, "stack", back,
        lambda *arrs: np.stack(arrs, axis=axis),
    )


def concat(xs: Sequence[NdArray], axis: int = -1) -> NdArray:
    xs = [as_array(x) for x in xs]
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_node(
        np.concatenate([x.data for x in xs], axis=axis), xs, "concat", back,
        lambda *arrs: np.concatenate(arrs, axis=axis),
    )


def sum(x: NdArray, axis=None, keepdims: bool = False) -> NdArray:  # noqa: A001
    src = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return make_node(
        np.sum(x.data, axis=axis, keepdims=keepdims), (x,), "sum", back,
        lambda a: np.sum(a, axis=axis, keepdims=keepdims),
    )


def mean(x: NdArray, axis=None, keepdims: bool = False) -> NdArray:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def cumsum(x: NdArray, axis: int) -> NdArray:
    def back(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return make_node(
        np.cumsum(x.data, axis=axis), (x,), "cumsum", back,
        lambda a: np.cumsum(a, axis=axis),
    )


# dense ---------------------------------------------------------------------------

def fc_apply(x: NdArray, weight: NdArray, bias: NdArray | None = None) -> NdArray:
    """Affine map over the last axis: ``x @ weight.T + bias``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"fc: input {x.shape} does not conform to weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"fc: bias {bias.shape} does not conform to weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd
        gw = g2.T @ xd.reshape(-1, xd.shape[-1])
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    if bias is None:
        return make_node(out, (x, weight), "fc", back, lambda a, w: a @ w.T)
    return make_node(out, (x, weight, bias), "fc", back, lambda a, w, b: a @ w.T + b)


# convolution core (numpy, no graph) ----------------------------------------------

def _chunks(batch: int, per_item: int):
    step = max(1, _COL_BUDGET // max(per_item, 1))
    for b0 in range(0, batch, step):
        yield b0, min(batch, b0 + step)


def _im2col(xh: np.ndarray, kh: int, kw: int):
    """Column view of a channels-last input; rows (B, Ho, Wo), columns (kh, kw, C)."""
    win = sliding_window_view(xh, (kh, kw), axis=(1, 2))  # (B, Ho, Wo, C, kh, kw)
    return win.transpose(0, 1, 2, 4, 5, 3)


def _corr2d(xp: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Valid 2D cross-correlation: (B,C,Hp,Wp) x (O,C,kh,kw) -> (B,O,Ho,Wo)."""
    B, C, Hp, Wp = xp.shape
    O, _, kh, kw = k.shape
    Ho, Wo = Hp - kh + 1, Wp - kw + 1
    xh = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
    win = _im2col(xh, kh, kw)
    k2 = np.ascontiguousarray(k.transpose(0, 2, 3, 1).reshape(O, -1).T)
    out = np.empty((B, Ho, Wo, O), dtype=np.result_type(xp, k))
    for b0, b1 in _chunks(B, Ho * Wo * C * kh * kw):
        cols = win[b0:b1].reshape((b1 - b0) * Ho * Wo, -1)
        out[b0:b1] = (cols @ k2).reshape(b1 - b0, Ho, Wo, O)
    return out.transpose(0, 3, 1, 2)


def _corr2d_wgrad(xp: np.ndarray, g: np.ndarray, kh: int, kw: int) -> np.ndarray:
    B, C = xp.shape[:2]
    O, Ho, Wo = g.shape[1:]
    xh = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
    win = _im2col(xh, kh, kw)
    gh = g.transpose(0, 2, 3, 1)
    acc = np.zeros((O, kh * kw * C), dtype=np.result_type(xp, g))
    for b0, b1 in _chunks(B, Ho * Wo * C * kh * kw):
        cols = win[b0:b1].reshape((b1 - b0) * Ho * Wo, -1)
        acc += gh[b0:b1].reshape(-1, O).T @ cols
    return acc.reshape(O, kh, kw, C).transpose(0, 3, 1, 2)


def _pad2d(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _corr2d_xgrad(g: np.ndarray, k: np.ndarray, ph: int, pw: int, H: int, W: int) -> np.ndarray:
    kh, kw = k.shape[2:]
    full = _corr2d(_pad2d(g, kh - 1, kw - 1), np.flip(k, (2, 3)).transpose(1, 0, 2, 3))
    return full[:, :, ph:ph + H, pw:pw + W]


def _conv2d_forward(x, k, b, ph, pw):
    out = _corr2d(_pad2d(x, ph, pw), k)
    if b is not None:
        out += b.reshape(1, -1, 1, 1)
    return out


# convolution ops -------------------------------------------------------------------

def conv2d_apply(x: NdArray, kernels: NdArray, bias: NdArray | None = None,
                 padding: tuple[int, int] | int = 0) -> NdArray:
    """Stride-1, zero-padded 2D cross-correlation over (B, C, H, W)."""
    ph, pw = (padding, padding) if np.isscalar(padding) else padding
    if x.ndim != 4 or kernels.ndim != 4 or x.shape[1] != kernels.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} does not conform to kernels {kernels.shape}")
    B, C, H, W = x.shape
    O, _, kh, kw = kernels.shape
    if kh > H + 2 * ph or kw > W + 2 * pw:
        raise DimensionError(
            f"conv2d: kernel {kernels.shape} larger than padded input {(B, C, H + 2 * ph, W + 2 * pw)}"
        )
    if bias is not None and bias.shape != (O,):
        raise DimensionError(f"conv2d: bias {bias.shape} does not conform to kernels {kernels.shape}")
    xd, kd = x.data, kernels.data
    out = _conv2d_forward(xd, kd, None if bias is None else bias.data, ph, pw)

    def back(g):
        gx = _corr2d_xgrad(g, kd, ph, pw, H, W) if x.requires_grad else None
        gk = _corr2d_wgrad(_pad2d(xd, ph, pw), g, kh, kw) if kernels.requires_grad else None
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(0, 2, 3))

    if bias is None:
        return make_node(out, (x, kernels), "conv2d", back,
                         lambda a, k: _conv2d_forward(a, k, None, ph, pw))
    return make_node(out, (x, kernels, bias), "conv2d", back,
                     lambda a, k, b: _conv2d_forward(a, k, b, ph, pw))


def conv1d_apply(x: NdArray, kernels: NdArray, bias: NdArray | None = None, padding: int = 0) -> NdArray:
    """Stride-1, zero-padded 1D cross-correlation over (B, C, L)."""
    if x.ndim != 3 or kernels.ndim != 3 or x.shape[1] != kernels.shape[1]:
        raise DimensionError(f"conv1d: input {x.shape} does not conform to kernels {kernels.shape}")
    if kernels.shape[2] > x.shape[2] + 2 * padding:
        raise DimensionError(
            f"conv1d: kernel {kernels.shape} larger than padded input length {x.shape[2] + 2 * padding}"
        )
    B, C, L = x.shape
    O, _, k = kernels.shape
    x4 = reshape(x, (B, C, 1, L))
    k4 = reshape(kernels, (O, C, 1, k))
    out = conv2d_apply(x4, k4, bias, (0, padding))
    return reshape(out, (B, O, out.shape[-1]))


def _dilate(x: np.ndarray, s: int) -> np.ndarray:
    if s == 1:
        return x
    B, C, L = x.shape
    out = np.zeros((B, C, (L - 1) * s + 1), dtype=x.dtype)
    out[:, :, ::s] = x
    return out


def _pad_or_crop1d(x: np.ndarray, q: int) -> np.ndarray:
    if q >= 0:
        return np.pad(x, ((0, 0), (0, 0), (q, q))) if q else x
    return x[:, :, -q:q]


def _tconv1d_forward(x, w, b, s, p):
    k = w.shape[2]
    xp = _pad_or_crop1d(_dilate(x, s), k - 1 - p)
    wc = np.flip(w, 2).transpose(1, 0, 2)
    out = _corr2d(xp[:, :, None, :], wc[:, :, None, :])[:, :, 0, :]
    if b is not None:
        out = out + b.reshape(1, -1, 1)
    return out


def transpose_conv1d_apply(x: NdArray, kernels: NdArray, bias: NdArray | None = None,
                           stride: int = 1, padding: int = 0) -> NdArray:
    """Adjoint of :func:`conv1d_apply` (with stride); kernels are (C_in, C_out, k).

    Output length is ``(L - 1) * stride - 2 * padding + k``.
    """
    if x.ndim != 3 or kernels.ndim != 3 or x.shape[1] != kernels.shape[0]:
        raise DimensionError(f"transpose_conv1d: input {x.shape} does not conform to kernels {kernels.shape}")
    B, Cin, L = x.shape
    _, Cout, k = kernels.shape
    s, p = int(stride), int(padding)
    L_out = (L - 1) * s - 2 * p + k
    if L_out <= 0 or s < 1:
        raise DimensionError(f"transpose_conv1d: output length {L_out} from input {x.shape}, kernels {kernels.shape}")
    if bias is not None and bias.shape != (Cout,):
        raise DimensionError(f"transpose_conv1d: bias {bias.shape} does not conform to kernels {kernels.shape}")
    xd, wd = x.data, kernels.data
    out = _tconv1d_forward(xd, wd, None if bias is None else bias.data, s, p)

    def back(g):
        gx = gw = None
        if x.requires_grad:
            gp = np.pad(g, ((0, 0), (0, 0), (p, p)))
            full = _corr2d(gp[:, :, None, :], wd[:, :, None, :])[:, :, 0, :]
            gx = full[:, :, ::s][:, :, :L]
        if kernels.requires_grad:
            xp = _pad_or_crop1d(_dilate(xd, s), k - 1 - p)
            gwc = _corr2d_wgrad(xp[:, :, None, :], g[:, :, None, :], 1, k)[:, :, 0, :]
            gw = np.flip(gwc.transpose(1, 0, 2), 2)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2))

    if bias is None:
        return make_node(out, (x, kernels), "transpose_conv1d", back,
                         lambda a, w: _tconv1d_forward(a, w, None, s, p))
    return make_node(out, (x, kernels, bias), "transpose_conv1d", back,
                     lambda a, w, b: _tconv1d_forward(a, w, b, s, p))


def upsample2x_time(x: NdArray) -> NdArray:
    """Nearest-neighbour doubling of the last (time) axis."""
    if x.shape[-1] < 1:
        raise DimensionError(f"upsample: empty time axis in {x.shape}")
    src = x.shape

    def back(g):
        return (g.reshape(*src, 2).sum(axis=-1),)

    return make_node(np.repeat(x.data, 2, axis=-1), (x,), "upsample2x", back,
                     lambda a: np.repeat(a, 2, axis=-1))


# normalization ----------------------------------------------------------------------

class BatchNormState:
    """Running statistics for one batch-norm layer."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.mean = np.zeros(channels, dtype=np.float32)
        self.var = np.ones(channels, dtype=np.float32)
        self.momentum = momentum
        self.eps = eps


class InvalidBatchError(ValueError):
    pass


def batchnorm_apply(x: NdArray, gamma: NdArray, beta: NdArray, state: BatchNormState,
                    mode: str = "train") -> NdArray:
    """Per-channel normalization over batch and spatial axes; channel axis is 1."""
    if x.ndim < 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"batchnorm: input {x.shape} does not conform to gamma {gamma.shape}")
    C = x.shape[1]
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, C) + (1,) * (x.ndim - 2)
    xd = x.data
    eps = state.eps
    if mode == "train":
        if x.shape[0] < 2:
            raise InvalidBatchError(f"batchnorm: train mode needs batch >= 2, got {x.shape[0]}")
        n = xd.size // C
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        m = state.momentum
        state.mean = ((1 - m) * state.mean + m * mu).astype(state.mean.dtype)
        state.var = ((1 - m) * state.var + m * var * (n / max(n - 1, 1))).astype(state.var.dtype)
    elif mode == "eval":
        mu = state.mean.astype(xd.dtype)
        var = state.var.astype(xd.dtype)
    else:
        raise ContractError(f"batchnorm: unknown mode {mode!r}")
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.reshape(bshape)) * inv.reshape(bshape)
    gd = gamma.data.reshape(bshape)
    out = xhat * gd + beta.data.reshape(bshape)
    mu_c, inv_c = mu, inv

    def back(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        dxhat = g * gd
        if mode == "train":
            n = xd.size // C
            s1 = dxhat.sum(axis=axes, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
            gx = inv.reshape(bshape) / n * (n * dxhat - s1 - xhat * s2)
        else:
            gx = dxhat * inv.reshape(bshape)
        return gx, gg, gb

    def fwd(a, gm, bt):
        return (a - mu_c.reshape(bshape)) * inv_c.reshape(bshape) * gm.reshape(bshape) + bt.reshape(bshape)

    return make_node(out, (x, gamma, beta), "batchnorm", back, fwd)


# recurrent --------------------------------------------------------------------------

def _lstm_forward(x, h, c, w_ih, w_hh, b):
    H = h.shape[-1]
    z = x @ w_ih.T + h @ w_hh.T + b
    i = _sigmoid(z[:, :H])
    f = _sigmoid(z[:, H:2 * H])
    gg = np.tanh(z[:, 2 * H:3 * H])
    o = _sigmoid(z[:, 3 * H:])
    c2 = f * c + i * gg
    tc = np.tanh(c2)
    return i, f, gg, o, c2, tc, np.concatenate([o * tc, c2], axis=1)


def lstm_step(x: NdArray, h: NdArray, c: NdArray, w_ih: NdArray, w_hh: NdArray, b: NdArray):
    """One LSTM cell step with gate order (input, forget, cell, output).

    Weights are ``w_ih`` (4H, Din), ``w_hh`` (4H, H) and a single bias (4H,).
    Returns ``(h_next, c_next)``.
    """
    H = h.shape[-1]
    if (w_ih.shape != (4 * H, x.shape[-1]) or w_hh.shape != (4 * H, H) or b.shape != (4 * H,)
            or c.shape != h.shape or x.shape[0] != h.shape[0]):
        raise DimensionError(
            f"lstm_step: x {x.shape}, h {h.shape}, c {c.shape} do not conform to "
            f"w_ih {w_ih.shape}, w_hh {w_hh.shape}, b {b.shape}"
        )
    xd, hd, cd = x.data, h.data, c.data
    i, f, gg, o, c2, tc, hc = _lstm_forward(xd, hd, cd, w_ih.data, w_hh.data, b.data)

    def back(g):
        gh, gc = g[:, :H], g[:, H:]
        do = gh * tc
        dc2 = gc + gh * o * (1 - tc * tc)
        dz = np.concatenate(
            [dc2 * gg * i * (1 - i), dc2 * cd * f * (1 - f), dc2 * i * (1 - gg * gg), do * o * (1 - o)],
            axis=1,
        )
        return (dz @ w_ih.data, dz @ w_hh.data, dc2 * f, dz.T @ xd, dz.T @ hd, dz.sum(axis=0))

    node = make_node(hc, (x, h, c, w_ih, w_hh, b), "lstm_step", back,
                     lambda *a: _lstm_forward(*a)[-1])
    return getitem(node, (slice(None), slice(0, H))), getitem(node, (slice(None), slice(H, 2 * H)))


# loss -----------------------------------------------------------------------------------

def mean_euclidean(pred: NdArray, target: NdArray) -> NdArray:
    """Mean over all points of the Euclidean distance along the last axis."""
    if pred.shape != target.shape:
        raise DimensionError(f"mean_euclidean: pred {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    dist = np.sqrt((diff * diff).sum(axis=-1))
    n = dist.size
    out = np.asarray(dist.mean(), dtype=pred.data.dtype)

    def back(g):
        safe = np.where(dist > 0, dist, 1.0)
        gp = g * np.where(dist[..., None] > 0, diff / safe[..., None], 0.0) / n
        return gp.astype(pred.data.dtype), (-gp).astype(target.data.dtype)

    def fwd(p, t):
        d = p - t
        return np.asarray(np.sqrt((d * d).sum(axis=-1)).mean(), dtype=p.dtype)

    return make_node(out, (pred, target), "mean_euclidean", back, fwd)
