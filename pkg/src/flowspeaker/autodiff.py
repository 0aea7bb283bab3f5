"""Minimal reverse-mode autodiff over float64 numpy arrays.

Model code in this project is written against a tiny generic op set
(`exp`, `tanh`, `matmul` via `@`, slicing, `concat`, ...) that accepts either
plain ndarrays or :class:`Var` nodes. With ndarrays the functions are plain
numpy (fast inference path); with Vars they record a tape and `backward`
accumulates exact gradients. The finite-difference oracle in
:mod:`flowspeaker.numerics` stays independent of this module and is used by
the test suite to verify every gradient that flows through here.

Trainable parameters live in dataclasses whose float64 ndarray fields are the
leaves; the tree helpers at the bottom lift such a dataclass to Vars and map
updates back.
"""

from __future__ import annotations

import dataclasses
from typing import Any, Callable, Iterator

import numpy as np

Array = np.ndarray


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum gradient g down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


class Var:
    """A node in the reverse-mode tape: value, accumulated grad, and a
    vector-Jacobian callback that pushes grad into the parents."""

    __slots__ = ("value", "grad", "_parents", "_vjp")
    __array_ufunc__ = None  # keep numpy from consuming Var operands

    def __init__(self, value, parents=(), vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Array | None = None
        self._parents = parents
        self._vjp = vjp

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def accumulate(self, g: Array) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += _unbroadcast(np.asarray(g, dtype=np.float64), self.value.shape)

    def backward(self) -> None:
        """Reverse sweep from this (typically scalar) node."""
        order = _topo_order(self)
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._vjp is not None and node.grad is not None:
                node._vjp(node.grad)

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return mul(self, reciprocal(other))

    def __rtruediv__(self, other):
        return mul(other, reciprocal(self))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return take(self, idx)

    def __repr__(self):
        return f"Var(shape={self.value.shape})"


def _topo_order(root: Var) -> list[Var]:
    """Parents-before-children order via iterative DFS (no recursion limit)."""
    order: list[Var] = []
    state: dict[int, int] = {}  # 0 = visiting, 1 = done
    stack = [root]
    while stack:
        node = stack[-1]
        s = state.get(id(node))
        if s is None:
            state[id(node)] = 0
            for p in node._parents:
                if isinstance(p, Var) and id(p) not in state:
                    stack.append(p)
        else:
            stack.pop()
            if s == 0:
                state[id(node)] = 1
                order.append(node)
    return order


def is_var(x) -> bool:
    return isinstance(x, Var)


def value_of(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def detach(x):
    """Value with the tape cut."""
    return x.value if isinstance(x, Var) else x


# ---------------------------------------------------------------------------
# Primitive ops (each handles the all-ndarray fast path first)
# ---------------------------------------------------------------------------

def add(a, b):
    if not (is_var(a) or is_var(b)):
        return np.add(a, b)
    av, bv = value_of(a), value_of(b)
    out = av + bv

    def vjp(g):
        if is_var(a):
            a.accumulate(g)
        if is_var(b):
            b.accumulate(g)

    return Var(out, (a, b), vjp)


def mul(a, b):
    if not (is_var(a) or is_var(b)):
        return np.multiply(a, b)
    av, bv = value_of(a), value_of(b)
    out = av * bv

    def vjp(g):
        if is_var(a):
            a.accumulate(g * bv)
        if is_var(b):
            b.accumulate(g * av)

    return Var(out, (a, b), vjp)


def reciprocal(a):
    if not is_var(a):
        return 1.0 / np.asarray(a, dtype=np.float64)
    av = a.value
    out = 1.0 / av

    def vjp(g):
        a.accumulate(-g * out * out)

    return Var(out, (a,), vjp)


def matmul(a, b):
    if not (is_var(a) or is_var(b)):
        return np.matmul(a, b)
    av, bv = value_of(a), value_of(b)
    out = av @ bv

    def vjp(g):
        g = np.asarray(g, dtype=np.float64)
        if av.ndim == 1 and bv.ndim == 1:
            ga, gb = g * bv, g * av
        elif av.ndim == 1:           # (k,) @ (k,n) -> (n,)
            ga, gb = bv @ g, np.outer(av, g)
        elif bv.ndim == 1:           # (m,k) @ (k,) -> (m,)
            ga, gb = np.outer(g, bv), av.T @ g
        else:                        # (m,k) @ (k,n) -> (m,n)
            ga, gb = g @ bv.T, av.T @ g
        if is_var(a):
            a.accumulate(ga)
        if is_var(b):
            b.accumulate(gb)

    return Var(out, (a, b), vjp)


def transpose(a):
    if not is_var(a):
        return np.asarray(a).T
    out = a.value.T

    def vjp(g):
        a.accumulate(g.T)

    return Var(out, (a,), vjp)


def take(a, idx):
    """Indexing/slicing; gradient scatters back with duplicate accumulation."""
    if not is_var(a):
        return np.asarray(a)[idx]
    out = a.value[idx]

    def vjp(g):
        full = np.zeros_like(a.value)
        np.add.at(full, idx, g)
        a.accumulate(full)

    return Var(out, (a,), vjp)


def concat(parts, axis=0):
    if not any(is_var(p) for p in parts):
        return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts], axis=axis)
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    sizes = [v.shape[axis] for v in vals]

    def vjp(g):
        offset = 0
        for p, size in zip(parts, sizes):
            if is_var(p):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(offset, offset + size)
                p.accumulate(g[tuple(sl)])
            offset += size

    return Var(out, tuple(parts), vjp)


def stack_rows(parts):
    """Stack 1-D pieces into a matrix (axis 0)."""
    if not any(is_var(p) for p in parts):
        return np.stack([np.asarray(p, dtype=np.float64) for p in parts])
    vals = [value_of(p) for p in parts]
    out = np.stack(vals)

    def vjp(g):
        for i, p in enumerate(parts):
            if is_var(p):
                p.accumulate(g[i])

    return Var(out, tuple(parts), vjp)


def sum_(a, axis=None, keepdims=False):
    if not is_var(a):
        return np.sum(a, axis=axis, keepdims=keepdims)
    out = np.sum(a.value, axis=axis, keepdims=keepdims)
    shape = a.value.shape

    def vjp(g):
        g = np.asarray(g, dtype=np.float64)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate(np.broadcast_to(g, shape))

    return Var(out, (a,), vjp)


def mean_(a, axis=None, keepdims=False):
    n = value_of(a).size if axis is None else value_of(a).shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def exp(a):
    if not is_var(a):
        return np.exp(a)
    out = np.exp(a.value)

    def vjp(g):
        a.accumulate(g * out)

    return Var(out, (a,), vjp)


def log(a):
    if not is_var(a):
        return np.log(a)
    av = a.value
    out = np.log(av)

    def vjp(g):
        a.accumulate(g / av)

    return Var(out, (a,), vjp)


def tanh(a):
    if not is_var(a):
        return np.tanh(a)
    out = np.tanh(a.value)

    def vjp(g):
        a.accumulate(g * (1.0 - out * out))

    return Var(out, (a,), vjp)


def sigmoid(a):
    if not is_var(a):
        av = np.asarray(a, dtype=np.float64)
        return 1.0 / (1.0 + np.exp(-av))
    out = 1.0 / (1.0 + np.exp(-a.value))

    def vjp(g):
        a.accumulate(g * out * (1.0 - out))

    return Var(out, (a,), vjp)


def relu(a):
    if not is_var(a):
        return np.maximum(a, 0.0)
    mask = a.value > 0.0
    out = a.value * mask

    def vjp(g):
        a.accumulate(g * mask)

    return Var(out, (a,), vjp)


def clip(a, lo: float, hi: float):
    """Clamp with zero gradient outside the open interval (lo, hi)."""
    if not is_var(a):
        return np.clip(a, lo, hi)
    mask = (a.value > lo) & (a.value < hi)
    out = np.clip(a.value, lo, hi)

    def vjp(g):
        a.accumulate(g * mask)

    return Var(out, (a,), vjp)


def softmax(a, axis=-1):
    """Shift-stable softmax; the max shift is detached so gradients are exact."""
    shift = np.max(value_of(a), axis=axis, keepdims=True)
    e = exp(add(a, -shift))
    return mul(e, reciprocal(sum_(e, axis=axis, keepdims=True)))


# ---------------------------------------------------------------------------
# Parameter trees
# ---------------------------------------------------------------------------

def _is_leaf(x) -> bool:
    return (isinstance(x, np.ndarray) and x.dtype == np.float64) or isinstance(x, Var)


def tree_leaves(obj, prefix: str = "") -> Iterator[tuple[str, Any]]:
    """Yield (path, leaf) for every float64-ndarray/Var field, in a stable
    field-declaration order. Non-float arrays (permutations, signs) and
    plain scalars are structure, not leaves."""
    if _is_leaf(obj):
        yield prefix.rstrip(".") or "leaf", obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from tree_leaves(getattr(obj, f.name), f"{prefix}{f.name}.")
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from tree_leaves(item, f"{prefix}{i}.")
    elif isinstance(obj, dict):
        for k in sorted(obj):
            yield from tree_leaves(obj[k], f"{prefix}{k}.")
    # every other type is structural and skipped


def tree_map(fn: Callable[[Any], Any], obj):
    """Rebuild the tree with fn applied to every leaf."""
    if _is_leaf(obj):
        return fn(obj)
    if dataclasses.is_dataclass(obj):
        kwargs = {f.name: tree_map(fn, getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        return type(obj)(**kwargs)
    if isinstance(obj, list):
        return [tree_map(fn, x) for x in obj]
    if isinstance(obj, tuple):
        return tuple(tree_map(fn, x) for x in obj)
    if isinstance(obj, dict):
        return {k: tree_map(fn, v) for k, v in obj.items()}
    return obj


def lift(params):
    """Replace every leaf by a Var over the same storage."""
    return tree_map(lambda a: a if isinstance(a, Var) else Var(a), params)


def lower(params):
    """Replace every Var leaf by its value."""
    return tree_map(lambda a: a.value if isinstance(a, Var) else a, params)


def grads_of(lifted) -> dict[str, Array]:
    """Gradients of the lifted tree's leaves keyed by path, zeros where
    untouched by the reverse sweep."""
    out: dict[str, Array] = {}
    for path, leaf in tree_leaves(lifted):
        if isinstance(leaf, Var):
            out[path] = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
        else:
            out[path] = np.zeros_like(leaf)
    return out
