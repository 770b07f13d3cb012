"""Tensor value type and the reverse-mode tape."""

import contextlib

import numpy as np

from ..errors import ContractError, NonFiniteError, ShapeError

_default_dtype = np.dtype(np.float32)
_grad_enabled = True
_check_finite = False


def default_dtype():
    return _default_dtype


def set_default_dtype(dtype):
    """Set the dtype for tensors built from Python scalars/lists; returns the old one."""
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    prev, _default_dtype = _default_dtype, dtype
    return prev


@contextlib.contextmanager
def float64_mode():
    """Verification precision for everything created inside the block."""
    prev = set_default_dtype(np.float64)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_debug_nans(flag):
    """When on, every op checks its output and raises NonFiniteError on NaN/Inf."""
    global _check_finite
    prev, _check_finite = _check_finite, bool(flag)
    return prev


class Tensor:
    """Dense real array with an optional gradient.

    Leaves created with ``requires_grad=True`` receive ``.grad`` on
    ``backward``; gradients add up across calls until ``zero_grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, (np.ndarray, np.generic)) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _default_dtype
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            raise ValueError(f"unsupported dtype {arr.dtype}")
        if any(n <= 0 for n in arr.shape):
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"

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
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{flag})"

    def backward(self):
        backward(self)

    # arithmetic sugar; the implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.add(ops.neg(self), other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a primitive")
        return ops.mul(self, 1.0 / other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)


def make(data, parents, backward_fn, op):
    """Wrap an op result, recording it on the tape when any parent needs grad."""
    out = Tensor(data)
    out.op = op
    if _check_finite and not np.all(np.isfinite(out.data)):
        raise NonFiniteError(f"non-finite output from {op}")
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


class Tape:
    """Topologically ordered record of the ops reachable from a root tensor.

    Every node appears after all of its inputs.  ``backward`` walks the list in
    reverse, visiting each record once.
    """

    def __init__(self, root):
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.nodes = order

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    tape = Tape(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            if node.requires_grad:
                g = g.astype(node.dtype, copy=False)
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                raise ShapeError(f"{node.op}: gradient shape {pg.shape} != input shape {p.shape}")
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg
    return tape
