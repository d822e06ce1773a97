"""Differentiable primitives.

Spatial ops work on ``[N, C, X, Y, Z]`` arrays (batch of streams, channels,
then the three grid axes with axis ``Z`` as the slice axis).
"""

from __future__ import annotations

import numpy as np

from .engine import DTensor, ShapeError, as_tensor, record

GROUP_SIZE = 4
GN_EPS = 1e-5


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _pair(a, b):
    a = as_tensor(a, like=b if isinstance(b, DTensor) else None)
    b = as_tensor(b, like=a)
    return a, b


# elementwise ---------------------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = _pair(a, b)

    def bw(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return record(a.data / b.data, (a, b), bw, "div")


def power(a, p: float):
    a = as_tensor(a)

    def bw(g):
        return (g * p * a.data ** (p - 1),)

    return record(a.data**p, (a,), bw, "pow")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    return record(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return record(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    a = as_tensor(a)
    s = _sigmoid_np(a.data)
    return record(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(a):
    a = as_tensor(a)
    s = _sigmoid_np(a.data)
    out = a.data * s
    return record(out, (a,), lambda g: (g * (s + out * (1.0 - s)),), "silu")


# reductions and shape ------------------------------------------------------

def sum(a, axis=None, keepdims=False):  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record(np.asarray(out), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    total = sum(a, axis, keepdims)
    return mul(total, total.data.size / a.data.size)


def reshape(a, shape):
    a = as_tensor(a)
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, idx):
    a = as_tensor(a)

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return record(np.asarray(a.data[idx]), (a,), bw, "getitem")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    dtype = np.result_type(*[t.dtype for t in tensors])
    out = np.concatenate([t.data.astype(dtype, copy=False) for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis).astype(t.dtype, copy=False)
            for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:])
        )

    return record(out, tuple(tensors), bw, "concat")


def broadcast_to(a, shape):
    a = as_tensor(a)
    return record(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast")


def matmul(a, b):
    a, b = _pair(a, b)

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return record(a.data @ b.data, (a, b), bw, "matmul")


def linear(x, w, b=None):
    """``x @ w + b`` with ``w`` of shape [in, out]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    out = matmul(x, w)
    return out if b is None else add(out, b)


def softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return record(s, (a,), bw, "softmax")


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def bw(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return record(out, (a,), bw, "log_softmax")


def global_max(a):
    """Max over the spatial axes of ``[N, C, X, Y, Z]`` -> ``[N, C]``.

    Ties split the gradient evenly so the op stays deterministic.
    """
    a = as_tensor(a)
    n, c = a.shape[:2]
    flat = a.data.reshape(n, c, -1)
    m = flat.max(axis=-1)
    hit = flat == m[..., None]
    share = hit / hit.sum(axis=-1, keepdims=True)

    def bw(g):
        return ((share * g[..., None]).reshape(a.shape).astype(a.dtype, copy=False),)

    return record(m, (a,), bw, "global_max")


def embedding_lookup(table, ids):
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding id out of range")

    def bw(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids, g)
        return (out,)

    return record(table.data[ids], (table,), bw, "embedding")


def rms_norm(x, weight, eps=1e-6):
    x, weight = as_tensor(x), as_tensor(weight)
    ms = (x.data * x.data).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    xhat = x.data * inv
    d = x.shape[-1]

    def bw(g):
        gw = _unbroadcast(g * xhat, weight.shape)
        gx_hat = g * weight.data
        gx = inv * (gx_hat - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True) / d)
        return gx, gw

    return record(xhat * weight.data, (x, weight), bw, "rms_norm")


def group_norm(x, group_size=GROUP_SIZE, eps=GN_EPS):
    """Normalize each run of ``group_size`` channels over channels and space."""
    x = as_tensor(x)
    n, c = x.shape[:2]
    if c % group_size:
        raise ShapeError(f"group_norm: {c} channels not divisible by group size {group_size}")
    gshape = (n, c // group_size, -1)
    xg = x.data.reshape(gshape)
    mu = xg.mean(axis=-1, keepdims=True)
    var = xg.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xg - mu) * inv
    m = xg.shape[-1]

    def bw(g):
        gg = g.reshape(gshape)
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True) - xhat * (gg * xhat).sum(axis=-1, keepdims=True) / m)
        return (gx.reshape(x.shape),)

    return record(xhat.reshape(x.shape), (x,), bw, "group_norm")


# spatial -------------------------------------------------------------------

_OFFSETS3 = [(i, j, k) for i in range(3) for j in range(3) for k in range(3)]
_OFFSETS2 = [(i, j) for i in range(3) for j in range(3)]


def _im2col3(xp, shape):
    X, Y, Z = shape
    cols = np.stack([xp[:, :, i : i + X, j : j + Y, k : k + Z] for i, j, k in _OFFSETS3], axis=0)
    # [27, N, C, X, Y, Z] -> [27*C, N*X*Y*Z] with rows ordered (offset, channel)
    n, c = xp.shape[:2]
    return cols.transpose(0, 2, 1, 3, 4, 5).reshape(27 * c, n * X * Y * Z)


def conv3d(x, w, b=None):
    """3x3x3 convolution with zero 'same' padding; ``w`` is [O, C, 3, 3, 3]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 5 or w.ndim != 5 or w.shape[2:] != (3, 3, 3) or w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv3d: incompatible shapes {x.shape} and {w.shape}")
    n, c, X, Y, Z = x.shape
    o = w.shape[0]
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    cols = _im2col3(xp, (X, Y, Z))
    wm = w.data.transpose(0, 2, 3, 4, 1).reshape(o, 27 * c)
    out = (wm @ cols).reshape(o, n, X, Y, Z).transpose(1, 0, 2, 3, 4)

    def bw(g):
        gm = g.transpose(1, 0, 2, 3, 4).reshape(o, -1)
        gw = (gm @ cols.T).reshape(o, 3, 3, 3, c).transpose(0, 4, 1, 2, 3)
        dcols = (wm.T @ gm).reshape(27, c, n, X, Y, Z)
        dxp = np.zeros_like(xp)
        for t, (i, j, k) in enumerate(_OFFSETS3):
            dxp[:, :, i : i + X, j : j + Y, k : k + Z] += dcols[t].transpose(1, 0, 2, 3, 4)
        return dxp[:, :, 1:-1, 1:-1, 1:-1], gw

    out = record(np.ascontiguousarray(out), (x, w), bw, "conv3d")
    return out if b is None else add(out, as_tensor(b).reshape((1, o, 1, 1, 1)))


def conv2d_slicewise(x, w, b=None):
    """Per-slice 2D convolution using the central through-plane slice of a 3x3x3 kernel."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 5 or w.ndim != 5 or w.shape[2:] != (3, 3, 3) or w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d_slicewise: incompatible shapes {x.shape} and {w.shape}")
    n, c, X, Y, Z = x.shape
    o = w.shape[0]
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.stack([xp[:, :, i : i + X, j : j + Y, :] for i, j in _OFFSETS2], axis=0)
    cols = cols.transpose(0, 2, 1, 3, 4, 5).reshape(9 * c, n * X * Y * Z)
    wc = w.data[:, :, :, :, 1]
    wm = wc.transpose(0, 2, 3, 1).reshape(o, 9 * c)
    out = (wm @ cols).reshape(o, n, X, Y, Z).transpose(1, 0, 2, 3, 4)

    def bw(g):
        gm = g.transpose(1, 0, 2, 3, 4).reshape(o, -1)
        gw = np.zeros_like(w.data)
        gw[:, :, :, :, 1] = (gm @ cols.T).reshape(o, 3, 3, c).transpose(0, 3, 1, 2)
        dcols = (wm.T @ gm).reshape(9, c, n, X, Y, Z)
        dxp = np.zeros_like(xp)
        for t, (i, j) in enumerate(_OFFSETS2):
            dxp[:, :, i : i + X, j : j + Y, :] += dcols[t].transpose(1, 0, 2, 3, 4)
        return dxp[:, :, 1:-1, 1:-1, :], gw

    out = record(np.ascontiguousarray(out), (x, w), bw, "conv2d_slicewise")
    return out if b is None else add(out, as_tensor(b).reshape((1, o, 1, 1, 1)))


def max_pool(x, factors):
    """Non-overlapping max pooling over the last three axes.

    Axes whose length is not a multiple of the factor are padded at the high
    end with the edge value, so the output length is ``ceil(n / f)``.
    """
    x = as_tensor(x)
    fx, fy, fz = factors
    n, c, X, Y, Z = x.shape
    ox, oy, oz = -(-X // fx), -(-Y // fy), -(-Z // fz)
    pad = ((0, 0), (0, 0), (0, ox * fx - X), (0, oy * fy - Y), (0, oz * fz - Z))
    xp = np.pad(x.data, pad, mode="edge") if any(p[1] for p in pad) else x.data
    blocks = xp.reshape(n, c, ox, fx, oy, fy, oz, fz).transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(n, c, ox, oy, oz, -1)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gp = gb.reshape(n, c, ox, oy, oz, fx, fy, fz).transpose(0, 1, 2, 5, 3, 6, 4, 7).reshape(xp.shape)
        return (np.ascontiguousarray(gp[:, :, :X, :Y, :Z]),)

    return record(out, (x,), bw, "max_pool")


def axis_map(x, axis, M):
    """Apply a fixed linear map ``M`` [n_out, n_in] along one axis."""
    x = as_tensor(x)
    M = np.asarray(M, dtype=x.dtype)
    if M.shape[1] != x.shape[axis]:
        raise ShapeError(f"axis_map: map expects length {M.shape[1]}, axis has {x.shape[axis]}")
    moved = np.moveaxis(x.data, axis, -1)
    out = np.moveaxis(moved @ M.T, -1, axis)

    def bw(g):
        gm = np.moveaxis(g, axis, -1) @ M
        return (np.ascontiguousarray(np.moveaxis(gm, -1, axis)),)

    return record(np.ascontiguousarray(out), (x,), bw, "axis_map")


def trilinear_resize(x, out_shape, ratios):
    """Resample the grid axes of ``[N, C, X, Y, Z]`` with corner alignment.

    ``ratios`` are output/input voxel sizes per axis.
    """
    from ..voxelcore.geometry import interp_matrix

    out = as_tensor(x)
    for k, (n_out, r) in enumerate(zip(out_shape, ratios)):
        ax = 2 + k
        if out.shape[ax] == n_out and abs(r - 1.0) < 1e-12:
            continue
        out = axis_map(out, ax, interp_matrix(out.shape[ax], n_out, r))
    return out


def trilinear_upsample(x, factors):
    """Integer-factor trilinear upsampling of the grid axes."""
    x = as_tensor(x)
    shape = tuple(n * f for n, f in zip(x.shape[2:], factors))
    return trilinear_resize(x, shape, [1.0 / f for f in factors])


# losses --------------------------------------------------------------------

def cross_entropy(logits, targets, mask=None):
    """Mean negative log-likelihood of ``targets`` over unmasked positions."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    gamma = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= gamma):
        raise ShapeError(f"target id out of range [0, {gamma})")
    if mask is None:
        mask = np.ones(targets.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    count = max(int(mask.sum()), 1)
    lsm = log_softmax(logits, axis=-1)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
    onehot *= mask[..., None]
    return mul(sum(mul(lsm, onehot)), -1.0 / count)


SOFT_DICE_EPS = 1e-6


def soft_dice_loss(pred, target, eps=SOFT_DICE_EPS):
    """``1 - (2 sum(p t) + eps) / (sum(p) + sum(t) + eps)``."""
    pred = as_tensor(pred)
    t = np.asarray(target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise ShapeError(f"soft_dice_loss: shapes {pred.shape} and {t.shape} differ")
    inter = sum(mul(pred, t))
    denom = add(sum(pred), float(t.sum()) + eps)
    return sub(1.0, div(add(mul(inter, 2.0), eps), denom))


def sigmoid_bce(logits, target):
    """Mean binary cross-entropy of ``sigmoid(logits)`` against ``target``, computed stably from logits."""
    logits = as_tensor(logits)
    x = logits.data
    t = np.asarray(target, dtype=x.dtype)
    if t.shape != x.shape:
        raise ShapeError(f"sigmoid_bce: shapes {x.shape} and {t.shape} differ")
    n = x.size
    val = (np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))).sum() / n
    p = _sigmoid_np(x)
    return record(np.asarray(val, dtype=x.dtype), (logits,), lambda g: (g * (p - t) / n,), "sigmoid_bce")


KINDS = {
    "linear": linear,
    "conv3d": conv3d,
    "conv2d_slicewise": conv2d_slicewise,
    "softmax": softmax,
    "silu": silu,
    "sigmoid": sigmoid,
    "group_norm": group_norm,
    "max_pool": max_pool,
    "trilinear_upsample": trilinear_upsample,
    "global_max": global_max,
    "concat": concat,
    "embedding_lookup": embedding_lookup,
}


def forward_op(kind: str, *inputs, **kw):
    try:
        fn = KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kw)
