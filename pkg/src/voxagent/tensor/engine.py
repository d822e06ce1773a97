"""Reverse-mode automatic differentiation over numpy arrays.

Every differentiable op builds its output with :func:`record`, which stores
the parents and a closure mapping the output gradient to parent gradients.
Nodes carry a monotonically increasing sequence number, so creation order is
already a topological order: :func:`backward` replays the recorded ops in
reverse sequence order, exactly once.
"""

from __future__ import annotations

import contextlib
import itertools

import numpy as np

_seq = itertools.count()
_grad_enabled = True
_default_dtype = np.float32


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


def set_default_dtype(dtype):
    global _default_dtype
    _default_dtype = np.dtype(dtype).type


def get_default_dtype():
    return _default_dtype


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class DTensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_seq", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, DTensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._seq = next(_seq)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> DTensor:
        return DTensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"DTensor(shape={self.shape}, op={self._op}{flag})"

    # operator sugar; semantics live in ops
    def __add__(self, o):
        from . import ops
        return ops.add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        from . import ops
        return ops.sub(self, o)

    def __rsub__(self, o):
        from . import ops
        return ops.sub(o, self)

    def __mul__(self, o):
        from . import ops
        return ops.mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        from . import ops
        return ops.div(self, o)

    def __rtruediv__(self, o):
        from . import ops
        return ops.div(o, self)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __pow__(self, p):
        from . import ops
        return ops.power(self, p)

    def __matmul__(self, o):
        from . import ops
        return ops.matmul(self, o)

    def __getitem__(self, idx):
        from . import ops
        return ops.getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis, keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)


def as_tensor(x, like=None) -> DTensor:
    if isinstance(x, DTensor):
        return x
    dtype = like.dtype if isinstance(like, DTensor) else None
    return DTensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def parameter(data, name=None) -> DTensor:
    return DTensor(np.asarray(data, dtype=_default_dtype), requires_grad=True, name=name)


def record(data, parents, backward_fn, op) -> DTensor:
    """Wrap ``data`` as the output of an op; attach the tape entry if needed."""
    out = DTensor(data, dtype=data.dtype if np.issubdtype(np.asarray(data).dtype, np.floating) else None)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    out._op = op
    return out


def _consumed(g):
    raise TapeError("the tape behind this node was already consumed by backward()")


def _collect(root: DTensor) -> list[DTensor]:
    seen = {id(root): root}
    stack = [root]
    while stack:
        node = stack.pop()
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                seen[id(p)] = p
                stack.append(p)
    return sorted(seen.values(), key=lambda n: n._seq, reverse=True)


def backward(root: DTensor, grad=None, retain_graph=False):
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if grad is None:
        if root.data.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
        grad = np.ones_like(root.data)
    if root._backward is _consumed:
        raise TapeError("the tape behind this root was already consumed by backward()")
    if not root.requires_grad:
        return
    order = _collect(root)
    grads = {id(root): np.asarray(grad, dtype=root.dtype)}
    for node in order:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                raise ShapeError(f"{node._op}: gradient shape {pg.shape} != input shape {p.shape}")
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg
        if not retain_graph:
            node._parents = ()
            node._backward = _consumed
