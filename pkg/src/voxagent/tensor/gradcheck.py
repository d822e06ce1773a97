"""Central-difference verification of the recorded backward passes."""

from __future__ import annotations

import numpy as np

from . import ops
from .engine import DTensor, backward, default_dtype

REL_FLOOR = 1e-6


def _scalarize(out: DTensor, proj: np.ndarray) -> DTensor:
    return ops.sum(ops.mul(out, proj))


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    return float((diff / scale).max()) if diff.size else 0.0


def finite_diff_check(fn, inputs: list, eps: float = 1e-5, seed: int = 0, max_elems: int | None = None) -> float:
    """Worst elementwise relative error between backward and central differences.

    ``fn`` maps the list of input tensors to an output tensor; a fixed random
    projection turns non-scalar outputs into a scalar loss. Only inputs given
    as DTensors with ``requires_grad`` are perturbed.
    """
    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        probe = fn(inputs)
        proj = rng.standard_normal(probe.shape) if probe.data.size > 1 else np.ones(probe.shape)
        for t in inputs:
            if isinstance(t, DTensor):
                t.grad = None
        loss = _scalarize(fn(inputs), proj)
        backward(loss)
        worst = 0.0
        for t in inputs:
            if not (isinstance(t, DTensor) and t.requires_grad):
                continue
            analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
            numeric = np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            idxs = np.arange(flat.size)
            if max_elems is not None and flat.size > max_elems:
                idxs = rng.choice(flat.size, max_elems, replace=False)
            for i in idxs:
                orig = flat[i]
                flat[i] = orig + eps
                fp = _scalarize(fn(inputs), proj).item()
                flat[i] = orig - eps
                fm = _scalarize(fn(inputs), proj).item()
                flat[i] = orig
                numeric.reshape(-1)[i] = (fp - fm) / (2 * eps)
            worst = max(worst, relative_error(analytic.reshape(-1)[idxs], numeric.reshape(-1)[idxs]))
        return worst


def _leaf(rng, *shape, scale=1.0):
    return DTensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype=np.float64)


def sample_cases(seed: int = 0):
    """One representative differentiable sample per registered op kind.

    Returns ``{name: (fn, inputs)}`` ready for :func:`finite_diff_check`.
    """
    rng = np.random.default_rng(seed)
    cases = {}
    x = _leaf(rng, 3, 5)
    w = _leaf(rng, 5, 4)
    b = _leaf(rng, 4)
    cases["linear"] = (lambda t: ops.linear(*t), [x, w, b])
    cases["conv3d"] = (lambda t: ops.conv3d(*t), [_leaf(rng, 2, 2, 4, 3, 3), _leaf(rng, 3, 2, 3, 3, 3), _leaf(rng, 3)])
    cases["conv2d_slicewise"] = (
        lambda t: ops.conv2d_slicewise(*t),
        [_leaf(rng, 2, 2, 4, 3, 2), _leaf(rng, 3, 2, 3, 3, 3), _leaf(rng, 3)],
    )
    cases["softmax"] = (lambda t: ops.softmax(t[0], axis=-1), [_leaf(rng, 3, 6)])
    cases["silu"] = (lambda t: ops.silu(t[0]), [_leaf(rng, 4, 5, scale=2.0)])
    cases["sigmoid"] = (lambda t: ops.sigmoid(t[0]), [_leaf(rng, 4, 5, scale=2.0)])
    cases["group_norm"] = (lambda t: ops.group_norm(t[0]), [_leaf(rng, 2, 8, 3, 2, 2)])
    cases["max_pool"] = (lambda t: ops.max_pool(t[0], (2, 2, 1)), [_leaf(rng, 1, 2, 4, 5, 3)])
    cases["trilinear_upsample"] = (lambda t: ops.trilinear_upsample(t[0], (2, 2, 1)), [_leaf(rng, 1, 2, 3, 2, 3)])
    cases["trilinear_resize"] = (
        lambda t: ops.trilinear_resize(t[0], (3, 2, 4), (0.75, 1.5, 0.75)),
        [_leaf(rng, 1, 2, 4, 3, 3)],
    )
    cases["global_max"] = (lambda t: ops.global_max(t[0]), [_leaf(rng, 2, 3, 3, 2, 2)])
    cases["concat"] = (lambda t: ops.concat(t, axis=1), [_leaf(rng, 2, 3), _leaf(rng, 2, 2)])
    ids = np.array([0, 3, 3, 1])
    cases["embedding_lookup"] = (lambda t: ops.embedding_lookup(t[0], ids), [_leaf(rng, 5, 4)])
    cases["rms_norm"] = (lambda t: ops.rms_norm(*t), [_leaf(rng, 3, 6), _leaf(rng, 6)])
    cases["matmul"] = (lambda t: ops.matmul(*t), [_leaf(rng, 2, 3, 4), _leaf(rng, 2, 4, 5)])
    targets = np.array([1, 4, 0])
    cases["softmax_cross_entropy"] = (
        lambda t: ops.cross_entropy(t[0], targets, mask=np.array([True, True, False])),
        [_leaf(rng, 3, 6)],
    )
    target = (rng.random((1, 1, 3, 3, 2)) > 0.5).astype(np.float64)
    cases["sigmoid_bce"] = (lambda t: ops.sigmoid_bce(t[0], target), [_leaf(rng, 1, 1, 3, 3, 2)])
    cases["soft_dice_loss"] = (lambda t: ops.soft_dice_loss(ops.sigmoid(t[0]), target), [_leaf(rng, 1, 1, 3, 3, 2)])
    return cases


def run_suite(seed: int = 0, eps: float = 1e-5) -> dict[str, float]:
    return {name: finite_diff_check(fn, inputs, eps=eps, seed=seed) for name, (fn, inputs) in sample_cases(seed).items()}
