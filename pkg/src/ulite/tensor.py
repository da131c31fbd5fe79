"""Rank-4 NCHW tensors with reverse-mode automatic differentiation.

Activations are `Tensor` values laid out as (batch, channels, height, width),
row-major with width innermost. Each operation computes its output eagerly
and records a closure that routes the output gradient back to its inputs, so
calling ``backward`` on a scalar-shaped loss fills the ``grad`` slot of every
parameter and of every tensor created with ``requires_grad=True``. Gradients
accumulate additively across uses; callers zero them between optimizer steps.

Learnable arrays live in `Param` objects (any rank, value plus grad slot);
ops that own parameters accumulate into those grads directly from their
backward closures. All compute is float32 unless inputs are created as
float64, which exists solely for tighter finite-difference checks.

Every op output passes a finiteness check (toggle with ``set_finite_checks``)
and failures name the producing op, qualified by the ``op_scope`` stack.
"""

import os
from contextlib import contextmanager

import numpy as np

from .errors import NonFiniteError, ShapeError

# ---------------------------------------------------------------------------
# global knobs: finiteness checking, op naming, thread count
# ---------------------------------------------------------------------------

_finite_checks = True
_scope: list[str] = []


def set_finite_checks(enabled: bool) -> bool:
    """Enable/disable per-op NaN/Inf detection. Returns the previous setting."""
    global _finite_checks
    previous = _finite_checks
    _finite_checks = bool(enabled)
    return previous


def finite_checks_enabled() -> bool:
    return _finite_checks


@contextmanager
def op_scope(name: str):
    """Push a diagnostic name onto the op-context stack (e.g. a layer name)."""
    _scope.append(name)
    try:
        yield
    finally:
        _scope.pop()


def _qualify(op: str) -> str:
    return "/".join((*_scope, op)) if _scope else op


def _num_threads_from_env() -> int:
    raw = os.environ.get("ULITE_THREADS", "1")
    try:
        value = int(raw)
    except ValueError:
        raise ValueError(f"ULITE_THREADS must be an integer, got {raw!r}") from None
    if value < 1:
        raise ValueError(f"ULITE_THREADS must be >= 1, got {value}")
    return value


_num_threads = _num_threads_from_env()


def set_num_threads(count: int) -> None:
    global _num_threads
    if count < 1:
        raise ValueError(f"thread count must be >= 1, got {count}")
    _num_threads = int(count)


def get_num_threads() -> int:
    return _num_threads


# ---------------------------------------------------------------------------
# core node types
# ---------------------------------------------------------------------------


class Tensor:
    """One rank-4 activation node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        data = np.asarray(data)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float32)
        _validate_dims(data)
        if _finite_checks and not np.all(np.isfinite(data)):
            raise NonFiniteError(_qualify("tensor"), "leaf created from non-finite data")
        self.data = data
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self._op = "leaf"

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, dims {self.dims}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed=None) -> None:
        """Reverse sweep from this node.

        `seed` is d(loss)/d(self); it defaults to ones, which for a
        (1,1,1,1) loss tensor is the usual starting gradient and for larger
        tensors corresponds to differentiating their element sum.
        """
        if seed is None:
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=self.data.dtype)
            if seed.shape != self.data.shape:
                raise ShapeError(
                    f"backward seed dims {seed.shape} != tensor dims {self.data.shape}"
                )
        order = _toposort(self)
        self.grad = seed.copy()
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(dims={self.dims}, dtype={self.data.dtype.name}, op={self._op}{flag})"


class Param:
    """Named learnable array with an additively accumulated gradient slot.

    The grad slot always exists, is zero after construction and after
    ``zero_grad``, and has the same dims/dtype as the value.
    """

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)

    @property
    def dims(self):
        return self.value.shape

    def numel(self) -> int:
        return int(self.value.size)

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def __repr__(self) -> str:
        return f"Param(dims={self.value.shape}, dtype={self.value.dtype.name})"


def _validate_dims(data: np.ndarray) -> None:
    if data.ndim != 4:
        raise ShapeError(f"tensors are rank-4 NCHW, got rank {data.ndim}")
    if any(d < 1 for d in data.shape):
        raise ShapeError(f"all dims must be >= 1, got {data.shape}")


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def accumulate(target: Tensor, grad: np.ndarray) -> None:
    """Add `grad` into an input tensor's slot (no-op for non-grad leaves)."""
    if not target.requires_grad:
        return
    if target.grad is None:
        target.grad = np.zeros_like(target.data)
    target.grad += grad


def result(data: np.ndarray, parents: tuple, backward, op: str) -> Tensor:
    """Wrap an op output as a graph node, running the finiteness check."""
    if _finite_checks and not np.all(np.isfinite(data)):
        raise NonFiniteError(_qualify(op))
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = True
    out._parents = parents
    out._backward = backward
    out._op = op
    return out


# ---------------------------------------------------------------------------
# creation ops
# ---------------------------------------------------------------------------


def from_array(array, requires_grad: bool = False) -> Tensor:
    """Leaf tensor from an existing rank-4 array (cast to float32 if needed)."""
    return Tensor(array, requires_grad=requires_grad)


def zeros(dims, dtype=np.float32) -> Tensor:
    arr = np.zeros(tuple(int(d) for d in dims), dtype=dtype)
    _validate_dims(arr)
    return Tensor(arr)


def rand_normal(dims, rng, mean: float = 0.0, std: float = 1.0, dtype=np.float32,
                requires_grad: bool = False) -> Tensor:
    """Seeded normal draws; identical bits for identical (seed, dims, mean, std)."""
    dims = tuple(int(d) for d in dims)
    probe = np.zeros(dims, dtype=dtype)
    _validate_dims(probe)
    draws = rng.normal(int(np.prod(dims)), mean=mean, std=std)
    return Tensor(draws.reshape(dims).astype(dtype), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def _require_same_dims(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: dims {a.data.shape} != {b.data.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_dims(a, b, "add")

    def backward(g):
        accumulate(a, g)
        accumulate(b, g)

    return result(a.data + b.data, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product."""
    _require_same_dims(a, b, "mul")

    def backward(g):
        accumulate(a, g * b.data)
        accumulate(b, g * a.data)

    return result(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        accumulate(a, g * s)

    return result(a.data * s, (a,), backward, "scale")


def map_unary(a: Tensor, fn, dfn, name: str = "map_unary") -> Tensor:
    """Elementwise fn with hand-supplied derivative dfn (both vectorized).

    The output must keep the input dims; fn gets the raw ndarray.
    """
    out = np.asarray(fn(a.data))
    if out.shape != a.data.shape:
        raise ShapeError(f"{name}: fn changed dims {a.data.shape} -> {out.shape}")

    def backward(g):
        accumulate(a, g * np.asarray(dfn(a.data)))

    return result(out.astype(a.data.dtype, copy=False), (a,), backward, name)


def sum_all(a: Tensor) -> Tensor:
    """Reduce every element to a (1,1,1,1) scalar tensor."""
    total = a.data.sum(dtype=a.data.dtype)

    def backward(g):
        accumulate(a, np.broadcast_to(g, a.data.shape))

    return result(np.full((1, 1, 1, 1), total, dtype=a.data.dtype), (a,), backward, "sum_all")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.data.shape, b.data.shape
    if (sa[0], sa[2], sa[3]) != (sb[0], sb[2], sb[3]):
        raise ShapeError(f"concat_channels: N/H/W mismatch {sa} vs {sb}")
    split = sa[1]

    def backward(g):
        accumulate(a, g[:, :split])
        accumulate(b, g[:, split:])

    return result(np.concatenate((a.data, b.data), axis=1), (a, b), backward, "concat_channels")


def zero_grads(params) -> None:
    """Zero the grad slot of every Param in an iterable."""
    for p in params:
        p.zero_grad()
