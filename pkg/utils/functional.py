"""
Operator set
Every differentiable op used by the segmenter, each with its vector-Jacobian product
"""

import builtins
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf, expit

from utils.tensor import ShapeError, Tensor, default_dtype, record

PADDING_MODES = ("zero", "reflect")


class PaddingModeError(ValueError):
    pass


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor.wrap(np.asarray(value, dtype=default_dtype()))


def constant(value) -> Tensor:
    return Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast(op: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape, detail="not broadcastable")


def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _expand_reduced(grad: np.ndarray, axes: Tuple[int, ...], keepdims: bool) -> np.ndarray:
    if keepdims:
        return grad
    for a in axes:
        grad = np.expand_dims(grad, a)
    return grad


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record("add", (a, b), a.data + b.data, backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record("sub", (a, b), a.data - b.data, backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("mul", a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record("mul", (a, b), a.data * b.data, backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("div", a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record("div", (a, b), out, backward)


def neg(x) -> Tensor:
    x = as_tensor(x)
    return record("neg", (x,), -x.data, lambda g: (-g,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return record("exp", (x,), out, lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return record("log", (x,), np.log(x.data), lambda g: (g / x.data,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return record("sqrt", (x,), out, lambda g: (g * 0.5 / out,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = expit(x.data)
    return record("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def softplus(x) -> Tensor:
    """log(1 + exp(x)) without overflow; never evaluates log(0)"""
    x = as_tensor(x)
    out = np.logaddexp(0.0, x.data).astype(x.data.dtype, copy=False)
    return record("softplus", (x,), out, lambda g: (g * expit(x.data),))


def gelu(x) -> Tensor:
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / np.sqrt(2.0)))
    out = x.data * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) / np.sqrt(2.0 * np.pi)
        return (g * (cdf + x.data * pdf),)

    return record("gelu", (x,), out, backward)


# ---------------------------------------------------------------- layout

def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    known = int(np.prod([s for s in shape if s != -1]))
    if (-1 not in shape and known != x.size) or (-1 in shape and (known == 0 or x.size % known)):
        raise ShapeError("reshape", x.shape, shape)
    return record("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(x.shape),))


def transpose(x, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError("transpose", x.shape, detail=f"invalid permutation {axes}")
    inverse = tuple(np.argsort(axes))
    return record("transpose", (x,), np.transpose(x.data, axes), lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis):
            raise ShapeError("concat", *[t.shape for t in tensors], detail=f"axis={axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record("concat", tuple(tensors), np.concatenate([t.data for t in tensors], axis=axis), backward)


def slice_axis(x, axis: int, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    axis = axis % x.ndim
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return record("slice", (x,), x.data[index], backward)


def split(x, axis: int, parts: Union[int, Sequence[int]]) -> List[Tensor]:
    x = as_tensor(x)
    size = x.shape[axis % x.ndim]
    if isinstance(parts, int):
        if parts <= 0 or size % parts:
            raise ShapeError("split", x.shape, detail=f"axis {axis} of size {size} not divisible into {parts} parts")
        parts = [size // parts] * parts
    if builtins.sum(parts) != size:
        raise ShapeError("split", x.shape, detail=f"part sizes {list(parts)} do not sum to {size}")
    pieces, start = [], 0
    for part in parts:
        pieces.append(slice_axis(x, axis, start, start + part))
        start += part
    return pieces


# ---------------------------------------------------------------- reductions
# Reductions accumulate in float64 and store back in the input dtype

def sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    out = np.sum(x.data, axis=axes, dtype=np.float64, keepdims=keepdims).astype(x.data.dtype)

    def backward(g):
        return (np.broadcast_to(_expand_reduced(g, axes, keepdims), x.shape).copy(),)

    return record("sum", (x,), out, backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    out = np.mean(x.data, axis=axes, dtype=np.float64, keepdims=keepdims).astype(x.data.dtype)

    def backward(g):
        return (np.broadcast_to(_expand_reduced(g, axes, keepdims) / count, x.shape).copy(),)

    return record("mean", (x,), out, backward)


def var(x, axis=None, keepdims: bool = False) -> Tensor:
    """Population variance (divide by the reduced count)"""
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    centered = x.data - np.mean(x.data, axis=axes, dtype=np.float64, keepdims=True)
    out = np.mean(centered * centered, axis=axes, keepdims=keepdims).astype(x.data.dtype)

    def backward(g):
        grad = _expand_reduced(g, axes, keepdims) * (2.0 / count) * centered
        return (grad.astype(x.data.dtype),)

    return record("var", (x,), out, backward)


def max(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    kept = np.max(x.data, axis=axes, keepdims=True)
    out = kept if keepdims else np.squeeze(kept, axis=axes)

    def backward(g):
        hits = (x.data == kept).astype(x.data.dtype)
        hits /= np.sum(hits, axis=axes, keepdims=True)
        return (hits * _expand_reduced(g, axes, keepdims),)

    return record("max", (x,), out, backward)


# ---------------------------------------------------------------- normalisation

def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return record("softmax", (x,), out, backward)


def layer_norm(x, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalise over one axis; affine gain/bias are applied by the caller"""
    x = as_tensor(x)
    mu = np.mean(x.data, axis=axis, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt(np.mean(centered * centered, axis=axis, keepdims=True) + eps)
    out = centered * inv_std

    def backward(g):
        g_mean = np.mean(g, axis=axis, keepdims=True)
        gx_mean = np.mean(g * out, axis=axis, keepdims=True)
        return (inv_std * (g - g_mean - out * gx_mean),)

    return record("layer_norm", (x,), out.astype(x.data.dtype, copy=False), backward)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch dims not broadcastable")

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return record("matmul", (a, b), np.matmul(a.data, b.data), backward)


def linear(x, weight, bias=None) -> Tensor:
    """x @ weight (+ bias), weight stored as [in, out]"""
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


# ---------------------------------------------------------------- convolution

def _pad_map(size: int, pad: int, mode: str) -> np.ndarray:
    return np.pad(np.arange(size), pad, mode="reflect") if mode == "reflect" else None


def _pad(data: np.ndarray, pad: int, mode: str) -> np.ndarray:
    if pad == 0:
        return data
    width = ((0, 0), (0, 0), (pad, pad), (pad, pad))
    return np.pad(data, width, mode="reflect" if mode == "reflect" else "constant")


def _unpad(grad: np.ndarray, shape: Tuple[int, ...], pad: int, mode: str) -> np.ndarray:
    if pad == 0:
        return grad
    h, w = shape[2], shape[3]
    if mode == "zero":
        return grad[:, :, pad:pad + h, pad:pad + w]
    rows = np.zeros(grad.shape[:2] + (h, grad.shape[3]), dtype=grad.dtype)
    np.add.at(rows, (slice(None), slice(None), _pad_map(h, pad, mode)), grad)
    out = np.zeros(shape, dtype=grad.dtype)
    np.add.at(out, (slice(None), slice(None), slice(None), _pad_map(w, pad, mode)), rows)
    return out


def _correlate(xp: np.ndarray, wg: np.ndarray, stride: int) -> np.ndarray:
    """xp [B,G,Cg,Hp,Wp] against wg [G,Og,Cg,k,k] -> [B,G,Og,Ho,Wo]"""
    k = wg.shape[-1]
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(3, 4))
    windows = windows[:, :, :, ::stride, ::stride]
    return np.einsum("bgchwpq,gocpq->bgohw", windows, wg, optimize=True)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0,
           padding_mode: str = "zero", groups: int = 1) -> Tensor:
    """2D cross-correlation; weight [O, C/groups, k, k]"""
    x, weight = as_tensor(x), as_tensor(weight)
    if padding_mode not in PADDING_MODES:
        raise PaddingModeError(f"conv2d: unknown padding mode '{padding_mode}', expected one of {PADDING_MODES}")
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d", x.shape, weight.shape, detail="expected 4D input and weight")
    b, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    if kh != kw or c % groups or o % groups or cg != c // groups:
        raise ShapeError("conv2d", x.shape, weight.shape, detail=f"groups={groups}")
    k = kh
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < k or wp < k:
        raise ShapeError("conv2d", x.shape, weight.shape, detail=f"kernel larger than padded input (padding={padding})")

    og = o // groups
    xp = _pad(x.data, padding, padding_mode).reshape(b, groups, cg, hp, wp)
    wg = weight.data.reshape(groups, og, cg, k, k)
    out5 = _correlate(xp, wg, stride)
    ho, wo = out5.shape[-2:]
    out = out5.reshape(b, o, ho, wo).astype(x.data.dtype, copy=False)

    def backward(g):
        g5 = g.reshape(b, groups, og, ho, wo)
        gx = gw = None
        if weight.requires_grad:
            windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(3, 4))[:, :, :, ::stride, ::stride]
            gw = np.einsum("bgohw,bgchwpq->gocpq", g5, windows, optimize=True).reshape(weight.shape)
        if x.requires_grad:
            if stride == 1:
                # full correlation of the upstream grad with the flipped, channel-swapped kernel
                gpad = np.pad(g5, ((0, 0), (0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
                flipped = np.ascontiguousarray(np.swapaxes(wg[..., ::-1, ::-1], 1, 2))
                gxp = _correlate(gpad, flipped, 1)
            else:
                gxp = np.zeros((b, groups, cg, hp, wp), dtype=g.dtype)
                for p in range(k):
                    for q in range(k):
                        gxp[:, :, :, p:p + stride * (ho - 1) + 1:stride, q:q + stride * (wo - 1) + 1:stride] += \
                            np.einsum("bgohw,goc->bgchw", g5, wg[..., p, q], optimize=True)
            gx = _unpad(gxp.reshape(b, c, hp, wp), x.shape, padding, padding_mode)
        return gx, gw

    result = record("conv2d", (x, weight), out, backward)
    if bias is not None:
        result = add(result, reshape(bias, (1, -1, 1, 1)))
    return result


# ---------------------------------------------------------------- sampling

def bilinear_sample(value, points) -> Tensor:
    """
    Sample value [B,C,H,W] at normalised points [B,Q,K,2] (x, y in [0,1]).
    Half-pixel convention; positions are clamped to [0,1]^2 and to the border
    pixel centres. Returns [B,Q,K,C].
    """
    value, points = as_tensor(value), as_tensor(points)
    if value.ndim != 4 or points.ndim != 4 or points.shape[-1] != 2 or points.shape[0] != value.shape[0]:
        raise ShapeError("bilinear_sample", value.shape, points.shape)
    b, c, h, w = value.shape
    loc = points.data
    inside_x = (loc[..., 0] > 0.0) & (loc[..., 0] < 1.0)
    inside_y = (loc[..., 1] > 0.0) & (loc[..., 1] < 1.0)
    px_raw = np.clip(loc[..., 0], 0.0, 1.0) * w - 0.5
    py_raw = np.clip(loc[..., 1], 0.0, 1.0) * h - 0.5
    inside_x &= (px_raw > 0.0) & (px_raw < w - 1)
    inside_y &= (py_raw > 0.0) & (py_raw < h - 1)
    px = np.clip(px_raw, 0.0, w - 1)
    py = np.clip(py_raw, 0.0, h - 1)
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (px - x0)[..., None]
    wy = (py - y0)[..., None]

    v = np.transpose(value.data, (0, 2, 3, 1))
    bidx = np.arange(b).reshape(b, 1, 1)
    v00, v01 = v[bidx, y0, x0], v[bidx, y0, x1]
    v10, v11 = v[bidx, y1, x0], v[bidx, y1, x1]
    out = (1 - wx) * (1 - wy) * v00 + wx * (1 - wy) * v01 + (1 - wx) * wy * v10 + wx * wy * v11

    def backward(g):
        gv = gp = None
        if value.requires_grad:
            acc = np.zeros_like(v)
            np.add.at(acc, (bidx, y0, x0), g * (1 - wx) * (1 - wy))
            np.add.at(acc, (bidx, y0, x1), g * wx * (1 - wy))
            np.add.at(acc, (bidx, y1, x0), g * (1 - wx) * wy)
            np.add.at(acc, (bidx, y1, x1), g * wx * wy)
            gv = np.transpose(acc, (0, 3, 1, 2))
        if points.requires_grad:
            dx = np.sum(g * ((1 - wy) * (v01 - v00) + wy * (v11 - v10)), axis=-1)
            dy = np.sum(g * ((1 - wx) * (v10 - v00) + wx * (v11 - v01)), axis=-1)
            gp = np.stack([dx * w * inside_x, dy * h * inside_y], axis=-1).astype(loc.dtype)
        return gv, gp

    return record("bilinear_sample", (value, points), out.astype(value.data.dtype, copy=False), backward)


def _interp_matrix(in_size: int, out_size: int, mode: str) -> np.ndarray:
    matrix = np.zeros((out_size, in_size))
    scale = in_size / out_size
    for i in range(out_size):
        if mode == "nearest":
            matrix[i, min(int(np.floor(i * scale)), in_size - 1)] = 1.0
            continue
        src = np.clip((i + 0.5) * scale - 0.5, 0.0, in_size - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, in_size - 1)
        frac = src - i0
        matrix[i, i0] += 1.0 - frac
        matrix[i, i1] += frac
    return matrix


def resize(x, size: Tuple[int, int], mode: str = "bilinear") -> Tensor:
    """Separable nearest/bilinear resize of [B,C,H,W], expressed as two matmuls"""
    x = as_tensor(x)
    if mode not in ("nearest", "bilinear"):
        raise ValueError(f"resize: unknown mode '{mode}'")
    if x.ndim != 4:
        raise ShapeError("resize", x.shape, detail="expected [B,C,H,W]")
    rows = constant(_interp_matrix(x.shape[2], size[0], mode))
    cols = constant(_interp_matrix(x.shape[3], size[1], mode).T)
    return matmul(matmul(rows, x), cols)
