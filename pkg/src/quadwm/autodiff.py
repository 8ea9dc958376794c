"""Define-by-run reverse-mode differentiation over numpy arrays.

A :class:`Tape` records every primitive applied to its :class:`Var` handles
together with a closure producing the parent cotangents. ``backward`` walks
the records once, newest first. Values are float64 arrays of any shape, so a
batch of states is one node per state component rather than one per scalar.

The module-level functions (``sin``, ``tanh``, ``matmul``, ...) dispatch on
their argument: given plain floats or arrays they return plain numpy results,
given a ``Var`` they record on its tape. Code written against them runs on
both paths unchanged.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

_reduce = np.add.reduce
_isfinite = math.isfinite


class NonFiniteError(FloatingPointError):
    def __init__(self, node: int, op: str):
        super().__init__(f"non-finite value produced at tape node {node} ({op})")
        self.node = node
        self.op = op


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Tape:
    """Single-threaded operation record."""

    __slots__ = ("parents", "vjps", "ops", "check_finite")

    def __init__(self, check_finite: bool = True):
        self.parents: list[tuple] = []
        self.vjps: list[Callable | None] = []
        self.ops: list[str] = []
        self.check_finite = check_finite

    def __len__(self) -> int:
        return len(self.parents)

    def var(self, value) -> "Var":
        """A new leaf holding ``value``."""
        return self._push(np.array(value, dtype=float), (), None, "leaf")

    def _push(self, value, parents, vjp, op) -> "Var":
        idx = len(self.parents)
        # a sum is non-finite whenever any entry is; confirm before raising
        if self.check_finite and not _isfinite(_reduce(value, axis=None)) and not np.all(np.isfinite(value)):
            raise NonFiniteError(idx, op)
        self.parents.append(parents)
        self.vjps.append(vjp)
        self.ops.append(op)
        return Var(self, idx, value)

    def backward(self, out: "Var", seed=None) -> list:
        """Cotangents for every node given ``d out = seed`` (ones by default)."""
        grads: list = [None] * (out.index + 1)
        grads[out.index] = np.ones_like(out.value) if seed is None else np.asarray(seed, dtype=float)
        parents, vjps = self.parents, self.vjps
        for i in range(out.index, -1, -1):
            g = grads[i]
            if g is None:
                continue
            vjp = vjps[i]
            if vjp is None:
                continue
            pgs = vjp(g)
            for p, pg in zip(parents[i], pgs):
                if pg is None:
                    continue
                cur = grads[p]
                grads[p] = pg if cur is None else cur + pg
        return grads


class Var:
    __slots__ = ("tape", "index", "value")
    __array_priority__ = 1000

    def __init__(self, tape: Tape, index: int, value: np.ndarray):
        self.tape = tape
        self.index = index
        self.value = value

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.value.shape})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    # binary arithmetic -------------------------------------------------
    def _binary(self, other, fwd, vjp_self, vjp_other, op):
        if isinstance(other, Var):
            a, b = self.value, other.value
            out = fwd(a, b)
            sa, sb = a.shape, b.shape

            def vjp(g):
                return (_unbroadcast(vjp_self(g, a, b), sa), _unbroadcast(vjp_other(g, a, b), sb))

            return self.tape._push(out, (self.index, other.index), vjp, op)
        a, b = self.value, np.asarray(other, dtype=float)
        out = fwd(a, b)
        sa = a.shape

        def vjp(g):
            return (_unbroadcast(vjp_self(g, a, b), sa),)

        return self.tape._push(out, (self.index,), vjp, op)

    def __add__(self, other):
        return self._binary(other, np.add, lambda g, a, b: g, lambda g, a, b: g, "add")

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        return self._binary(other, np.subtract, lambda g, a, b: g, lambda g, a, b: -g, "sub")

    def __rsub__(self, other):
        return (-self).__add__(other)

    def __mul__(self, other):
        return self._binary(other, np.multiply, lambda g, a, b: g * b, lambda g, a, b: g * a, "mul")

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        return self._binary(
            other, np.divide, lambda g, a, b: g / b, lambda g, a, b: -g * a / (b * b), "div"
        )

    def __rtruediv__(self, other):
        other = np.asarray(other, dtype=float)
        a = self.value
        out = other / a
        return self.tape._push(out, (self.index,), lambda g: (_unbroadcast(-g * other / (a * a), a.shape),), "rdiv")

    def __neg__(self):
        return self.tape._push(-self.value, (self.index,), lambda g: (-g,), "neg")

    def __pos__(self):
        return self

    def __pow__(self, k):
        if isinstance(k, Var):
            raise TypeError("only constant exponents are supported")
        a = self.value
        return self.tape._push(a**k, (self.index,), lambda g: (g * k * a ** (k - 1),), "pow")

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    # structure ---------------------------------------------------------
    def __getitem__(self, idx):
        a = self.value
        shape = a.shape

        basic = _is_basic_index(idx)

        def vjp(g):
            full = np.zeros(shape)
            if basic:
                full[idx] = g
            else:
                np.add.at(full, idx, g)
            return (full,)

        return self.tape._push(a[idx], (self.index,), vjp, "index")

    def reshape(self, *shape):
        src = self.value.shape
        return self.tape._push(self.value.reshape(*shape), (self.index,), lambda g: (g.reshape(src),), "reshape")

    @property
    def T(self):
        return self.tape._push(self.value.T, (self.index,), lambda g: (g.T,), "transpose")

    def sum(self, axis=None):
        shape = self.value.shape

        def vjp(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return self.tape._push(np.asarray(self.value.sum(axis=axis)), (self.index,), vjp, "sum")

    def mean(self, axis=None):
        n = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis) * (1.0 / n)

    # unary elementwise -------------------------------------------------
    def _unary(self, out, dfn, op):
        return self.tape._push(out, (self.index,), lambda g: (g * dfn(),), op)

    def sin(self):
        a = self.value
        return self._unary(np.sin(a), lambda: np.cos(a), "sin")

    def cos(self):
        a = self.value
        return self._unary(np.cos(a), lambda: -np.sin(a), "cos")

    def tan(self):
        a = self.value
        out = np.tan(a)
        return self._unary(out, lambda: 1.0 + out * out, "tan")

    def tanh(self):
        out = np.tanh(self.value)
        return self._unary(out, lambda: 1.0 - out * out, "tanh")

    def sigmoid(self):
        out = _sigmoid(self.value)
        return self._unary(out, lambda: out * (1.0 - out), "sigmoid")

    def exp(self):
        out = np.exp(self.value)
        return self._unary(out, lambda: out, "exp")

    def sqrt(self):
        out = np.sqrt(self.value)
        return self._unary(out, lambda: 0.5 / out, "sqrt")

    def clamp(self, lo, hi):
        a = self.value
        inside = ((a > lo) & (a < hi)).astype(float)
        return self._unary(np.clip(a, lo, hi), lambda: inside, "clamp")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis for i in items)


def _sigmoid(a):
    # split form avoids overflow in exp for large |a|
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


# ---------------------------------------------------------------------------
# dispatching functions


def is_var(x) -> bool:
    return isinstance(x, Var)


def value(x):
    return x.value if isinstance(x, Var) else x


def sin(x):
    return x.sin() if isinstance(x, Var) else np.sin(x)


def cos(x):
    return x.cos() if isinstance(x, Var) else np.cos(x)


def tan(x):
    return x.tan() if isinstance(x, Var) else np.tan(x)


def tanh(x):
    return x.tanh() if isinstance(x, Var) else np.tanh(x)


def sigmoid(x):
    if isinstance(x, Var):
        return x.sigmoid()
    return _sigmoid(np.asarray(x, dtype=float))


def exp(x):
    return x.exp() if isinstance(x, Var) else np.exp(x)


def sqrt(x):
    return x.sqrt() if isinstance(x, Var) else np.sqrt(x)


def clamp(x, lo, hi):
    return x.clamp(lo, hi) if isinstance(x, Var) else np.clip(x, lo, hi)


def square(x):
    return x * x


def matmul(a, b):
    if not isinstance(a, Var) and not isinstance(b, Var):
        return np.matmul(a, b)
    tape = a.tape if isinstance(a, Var) else b.tape
    av, bv = value(a), value(b)
    out = np.matmul(av, bv)

    a1, b1 = av.ndim == 1, bv.ndim == 1
    A = av[None, :] if a1 else av
    B = bv[:, None] if b1 else bv

    def _lift(g):
        if b1:
            g = g[..., None]
        if a1:
            g = np.expand_dims(g, -2)
        return g

    def ga(g):
        d = np.matmul(_lift(g), np.swapaxes(B, -1, -2))
        return _unbroadcast(d[..., 0, :] if a1 else d, av.shape)

    def gb(g):
        d = np.matmul(np.swapaxes(A, -1, -2), _lift(g))
        return _unbroadcast(d[..., 0] if b1 else d, bv.shape)

    if isinstance(a, Var) and isinstance(b, Var):
        return tape._push(out, (a.index, b.index), lambda g: (ga(g), gb(g)), "matmul")
    if isinstance(a, Var):
        return tape._push(out, (a.index,), lambda g: (ga(g),), "matmul")
    return tape._push(out, (b.index,), lambda g: (gb(g),), "matmul")


def matvec(m, v):
    return matmul(m, v)


def dot(a, b):
    return (a * b).sum(axis=-1) if isinstance(a, Var) or isinstance(b, Var) else np.sum(a * b, axis=-1)


def stack(items: Sequence, axis: int = -1):
    """Stack equally-shaped items; plain entries are treated as constants."""
    tape = next((x.tape for x in items if isinstance(x, Var)), None)
    vals = [value(x) for x in items]
    vals = np.broadcast_arrays(*[np.asarray(v, dtype=float) for v in vals])
    out = np.stack(vals, axis=axis)
    if tape is None:
        return out
    var_pos = [i for i, x in enumerate(items) if isinstance(x, Var)]
    shapes = [items[i].value.shape for i in var_pos]

    def vjp(g):
        return tuple(_unbroadcast(np.take(g, i, axis=axis), s) for i, s in zip(var_pos, shapes))

    return tape._push(out, tuple(items[i].index for i in var_pos), vjp, "stack")


def concat(items: Sequence, axis: int = -1):
    tape = next((x.tape for x in items if isinstance(x, Var)), None)
    vals = [np.asarray(value(x), dtype=float) for x in items]
    out = np.concatenate(vals, axis=axis)
    if tape is None:
        return out
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])
    var_pos = [i for i, x in enumerate(items) if isinstance(x, Var)]

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in var_pos)

    return tape._push(out, tuple(items[i].index for i in var_pos), vjp, "concat")


def unstack(x, axis: int = -1) -> list:
    """Split along ``axis`` into a list of slices."""
    if isinstance(x, Var):
        n = x.value.shape[axis]
        ax = axis % x.value.ndim
        return [x[(slice(None),) * ax + (i,)] for i in range(n)]
    x = np.asarray(x)
    return [np.take(x, i, axis=axis) for i in range(x.shape[axis])]


# ---------------------------------------------------------------------------
# gradient entry points


def grad(f: Callable, x) -> tuple[float, np.ndarray]:
    """Value and gradient of scalar ``f`` at ``x``.

    ``f`` receives a ``Var`` leaf shaped like ``x`` and must return a scalar
    ``Var`` (or a plain number if it does not depend on its input).
    """
    tape = Tape()
    xv = tape.var(np.asarray(x, dtype=float))
    out = f(xv)
    if not isinstance(out, Var):
        return float(np.asarray(out)), np.zeros_like(xv.value)
    if out.value.size != 1:
        raise ValueError("grad requires a scalar output")
    grads = tape.backward(out)
    g = grads[xv.index]
    return float(out.value), (np.zeros_like(xv.value) if g is None else g)


def evaluate(f: Callable, x) -> float:
    """Forward value of ``f`` on plain inputs."""
    return float(np.asarray(value(f(np.asarray(x, dtype=float)))))


def check_gradient(f: Callable, x, h: float = 1e-5) -> float:
    """Max over components of ``|analytic - central| / max(1, |central|)``.

    ``f`` must accept plain arrays as well as tape variables (write it with
    this module's dispatching functions).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=float)
    _, analytic = grad(f, x)
    flat = x.ravel()
    numeric = np.empty(flat.size)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        numeric[i] = (evaluate(f, xp.reshape(x.shape)) - evaluate(f, xm.reshape(x.shape))) / (2 * h)
    err = np.abs(analytic.ravel() - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0
