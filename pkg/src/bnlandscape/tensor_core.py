"""Small reverse-mode autodiff over dense float64 arrays.

A :class:`Graph` is an append-only list of nodes. Nodes are created
symbolically through :class:`Node` handles and evaluated by
:meth:`Graph.forward` with a set of root bindings, so one graph can be
re-evaluated at many parameter values (training steps, probes, oracles).

Finite-difference oracles (:func:`fd_grad`, :func:`hvp`) live here too.
"""

from __future__ import annotations

import zlib
from typing import Callable, NamedTuple

import numpy as np

__all__ = [
    "NonFiniteError",
    "ShapeError",
    "GraphError",
    "as_tensor",
    "colsum",
    "Graph",
    "Node",
    "register_op",
    "op_kinds",
    "fd_grad",
    "hvp",
    "Rng",
]


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


def as_tensor(x) -> np.ndarray:
    """Copy ``x`` into a float64 array, refusing non-finite entries."""
    a = np.array(x, dtype=np.float64)
    if not np.isfinite(a).all():
        raise NonFiniteError("tensor contains NaN or Inf")
    return a


_ZEROS: dict[int, np.ndarray] = {}


def all_finite(v: np.ndarray) -> bool:
    """True iff no entry is NaN or Inf (``0 * x`` is NaN exactly for those)."""
    n = v.size
    if n < 256:
        return bool(np.isfinite(v).all())
    zeros = _ZEROS.get(n)
    if zeros is None:
        zeros = _ZEROS[n] = np.zeros(n)
        zeros.flags.writeable = False
    return bool(np.isfinite(np.dot(v.reshape(-1), zeros)))


class _Op(NamedTuple):
    forward: Callable
    backward: Callable


_OPS: dict[str, _Op] = {}


def register_op(kind: str, forward: Callable, backward: Callable) -> None:
    """Register an op kind.

    ``forward(attrs, *values) -> (value, aux)`` and
    ``backward(attrs, grad, value, aux, needs, *values) -> tuple`` with one
    entry per input (``None`` where ``needs[k]`` is false).
    """
    _OPS[kind] = _Op(forward, backward)


def op_kinds() -> list[str]:
    return sorted(_OPS)


_ONES: dict[int, np.ndarray] = {}


def colsum(a: np.ndarray) -> np.ndarray:
    """Sum over rows of an ``m x d`` matrix (BLAS; far faster than ``sum(axis=0)`` for small d)."""
    m = a.shape[0]
    ones = _ONES.get(m)
    if ones is None:
        ones = _ONES[m] = np.ones(m)
        ones.flags.writeable = False
    return ones @ a


def _same_shape(kind, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} differ")


def _matrix(kind, a):
    if a.ndim != 2:
        raise ShapeError(f"{kind}: expected a matrix, got shape {a.shape}")


# -- elementwise binary -------------------------------------------------------

def _add_f(at, a, b):
    _same_shape("add", a, b)
    return a + b, None


def _add_b(at, g, v, aux, needs, a, b):
    return (g if needs[0] else None, g if needs[1] else None)


def _sub_f(at, a, b):
    _same_shape("sub", a, b)
    return a - b, None


def _sub_b(at, g, v, aux, needs, a, b):
    return (g if needs[0] else None, -g if needs[1] else None)


def _mul_f(at, a, b):
    _same_shape("mul", a, b)
    return a * b, None


def _mul_b(at, g, v, aux, needs, a, b):
    return (g * b if needs[0] else None, g * a if needs[1] else None)


def _div_f(at, a, b):
    _same_shape("div", a, b)
    return a / b, None


def _div_b(at, g, v, aux, needs, a, b):
    return (g / b if needs[0] else None, -g * v / b if needs[1] else None)


# -- linear algebra and reductions -----------------------------------------

def _matmul_f(at, a, b):
    _matrix("matmul", a)
    _matrix("matmul", b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    return a @ b, None


def _matmul_b(at, g, v, aux, needs, a, b):
    # a contiguous copy of b.T keeps g @ b.T on the fast BLAS path
    return (g @ np.ascontiguousarray(b.T) if needs[0] else None, a.T @ g if needs[1] else None)


def _add_row_f(at, a, r):
    _matrix("add_row", a)
    if r.shape != (a.shape[1],):
        raise ShapeError(f"add_row: bias {r.shape} for rows of width {a.shape[1]}")
    return a + r, None


def _add_row_b(at, g, v, aux, needs, a, r):
    return (g if needs[0] else None, colsum(g) if needs[1] else None)


def _expand_rows_f(at, r, like):
    _matrix("expand_rows", like)
    if r.shape != (like.shape[1],):
        raise ShapeError(f"expand_rows: {r.shape} against rows of width {like.shape[1]}")
    return np.tile(r, (like.shape[0], 1)), None


def _expand_rows_b(at, g, v, aux, needs, r, like):
    return (colsum(g) if needs[0] else None, None)


def _sum_rows_f(at, a):
    _matrix("sum_rows", a)
    return colsum(a), None


def _sum_rows_b(at, g, v, aux, needs, a):
    return (np.tile(g, (a.shape[0], 1)),)


def _mean_rows_f(at, a):
    _matrix("mean_rows", a)
    return colsum(a) / a.shape[0], None


def _mean_rows_b(at, g, v, aux, needs, a):
    return (np.tile(g / a.shape[0], (a.shape[0], 1)),)


def _max_rows_f(at, a):
    _matrix("max_rows", a)
    idx = np.argmax(a, axis=0)
    return a[idx, np.arange(a.shape[1])], idx


def _max_rows_b(at, g, v, idx, needs, a):
    out = np.zeros_like(a)
    out[idx, np.arange(a.shape[1])] = g
    return (out,)


def _sum_f(at, a):
    return np.asarray(a.sum()), None


def _sum_b(at, g, v, aux, needs, a):
    return (np.full(a.shape, float(g)),)


def _scale_f(at, a):
    return a * at["c"], None


def _scale_b(at, g, v, aux, needs, a):
    return (g * at["c"],)


def _add_const_f(at, a):
    return a + at["c"], None


def _add_const_b(at, g, v, aux, needs, a):
    return (g,)


def _smul_f(at, a, s):
    if s.shape != ():
        raise ShapeError(f"smul: scale must be a scalar, got {s.shape}")
    return a * s, None


def _smul_b(at, g, v, aux, needs, a, s):
    return (g * s if needs[0] else None, np.asarray((g * a).sum()) if needs[1] else None)


# -- elementwise unary ------------------------------------------------------

def _square_f(at, a):
    return a * a, None


def _square_b(at, g, v, aux, needs, a):
    return (2.0 * g * a,)


def _sqrt_f(at, a):
    if (a < 0).any():
        raise NonFiniteError("sqrt of a negative value")
    return np.sqrt(a), None


def _sqrt_b(at, g, v, aux, needs, a):
    return (g / (2.0 * v),)


def _abs_f(at, a):
    return np.abs(a), None


def _abs_b(at, g, v, aux, needs, a):
    return (g * np.sign(a),)


def _relu_f(at, a):
    return np.maximum(a, 0.0), None


def _relu_b(at, g, v, aux, needs, a):
    return (g * (a > 0),)


def _exp_f(at, a):
    return np.exp(a), None


def _exp_b(at, g, v, aux, needs, a):
    return (g * v,)


def _log_f(at, a):
    if (a <= 0).any():
        raise NonFiniteError("log of a non-positive value")
    return np.log(a), None


def _log_b(at, g, v, aux, needs, a):
    return (g / a,)


def _tanh_f(at, a):
    return np.tanh(a), None


def _tanh_b(at, g, v, aux, needs, a):
    return (g * (1.0 - v * v),)


def _logcosh_f(at, a):
    # log(cosh a) = |a| + log1p(exp(-2|a|)) - log 2, stable for large |a|
    b = np.abs(a)
    return b + np.log1p(np.exp(-2.0 * b)) - np.log(2.0), None


def _logcosh_b(at, g, v, aux, needs, a):
    return (g * np.tanh(a),)


def _softmax_ce_f(at, logits, onehot):
    _same_shape("softmax_ce", logits, onehot)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    loss = -(onehot * logp).sum() / logits.shape[0]
    return np.asarray(loss), np.exp(logp)


def _softmax_ce_b(at, g, v, probs, needs, logits, onehot):
    m = logits.shape[0]
    d_logits = (probs - onehot) * (float(g) / m) if needs[0] else None
    d_onehot = -(np.log(probs)) * (float(g) / m) if needs[1] else None
    return (d_logits, d_onehot)


def _quad_form_f(at, a):
    A = at["A"]
    v = a.reshape(-1)
    if A.shape != (v.size, v.size):
        raise ShapeError(f"quad_form: matrix {A.shape} for {v.size} entries")
    return np.asarray(0.5 * v @ (A @ v)), None


def _quad_form_b(at, g, v, aux, needs, a):
    A = at["A"]
    x = a.reshape(-1)
    return ((0.5 * float(g)) * (A @ x + A.T @ x).reshape(a.shape),)


for _name, _f, _b in [
    ("add", _add_f, _add_b),
    ("sub", _sub_f, _sub_b),
    ("mul", _mul_f, _mul_b),
    ("div", _div_f, _div_b),
    ("matmul", _matmul_f, _matmul_b),
    ("add_row", _add_row_f, _add_row_b),
    ("expand_rows", _expand_rows_f, _expand_rows_b),
    ("sum_rows", _sum_rows_f, _sum_rows_b),
    ("mean_rows", _mean_rows_f, _mean_rows_b),
    ("max_rows", _max_rows_f, _max_rows_b),
    ("sum", _sum_f, _sum_b),
    ("scale", _scale_f, _scale_b),
    ("add_const", _add_const_f, _add_const_b),
    ("smul", _smul_f, _smul_b),
    ("square", _square_f, _square_b),
    ("sqrt", _sqrt_f, _sqrt_b),
    ("abs", _abs_f, _abs_b),
    ("relu", _relu_f, _relu_b),
    ("exp", _exp_f, _exp_b),
    ("log", _log_f, _log_b),
    ("tanh", _tanh_f, _tanh_b),
    ("logcosh", _logcosh_f, _logcosh_b),
    ("softmax_ce", _softmax_ce_f, _softmax_ce_b),
    ("quad_form", _quad_form_f, _quad_form_b),
]:
    register_op(_name, _f, _b)


class Node:
    """Handle to a graph node; arithmetic on handles appends new nodes."""

    __slots__ = ("graph", "id")

    def __init__(self, graph: "Graph", id: int):
        self.graph = graph
        self.id = id

    def __add__(self, other):
        return self.graph.apply("add", self, other)

    def __sub__(self, other):
        return self.graph.apply("sub", self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.graph.apply("scale", self, c=float(other))
        return self.graph.apply("mul", self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self.graph.apply("div", self, other)

    def __neg__(self):
        return self.graph.apply("scale", self, c=-1.0)

    def __matmul__(self, other):
        return self.graph.apply("matmul", self, other)

    def __getattr__(self, kind):
        # g.relu(), g.sum(), ... for unary kinds
        if kind.startswith("_") or kind not in _OPS:
            raise AttributeError(kind)
        return lambda **attrs: self.graph.apply(kind, self, **attrs)

    def __repr__(self):
        return f"Node({self.graph.kinds[self.id]}#{self.id})"


class Graph:
    """Append-only computation graph with named, re-bindable roots."""

    def __init__(self):
        self.kinds: list[str] = []
        self.inputs: list[tuple[int, ...]] = []
        self.attrs: list[dict] = []
        self.values: list[np.ndarray | None] = []
        self.aux: list = []
        self.needs_grad: list[bool] = []
        self.roots: dict[str, int] = {}
        self.output: int | None = None
        self._bound: dict[str, np.ndarray] = {}
        self._ran = False

    def __len__(self):
        return len(self.kinds)

    def _append(self, kind, inputs, attrs, value, needs):
        self.kinds.append(kind)
        self.inputs.append(inputs)
        self.attrs.append(attrs)
        self.values.append(value)
        self.aux.append(None)
        self.needs_grad.append(needs)
        self._ran = False
        return Node(self, len(self.kinds) - 1)

    def root(self, name: str, value=None, requires_grad: bool = True) -> Node:
        if name in self.roots:
            raise GraphError(f"duplicate root {name!r}")
        node = self._append("root", (), {"name": name}, None, requires_grad)
        self.roots[name] = node.id
        if value is not None:
            self._bound[name] = as_tensor(value)
        return node

    def const(self, value) -> Node:
        return self._append("const", (), {}, as_tensor(value), False)

    def apply(self, kind: str, *inputs: Node, **attrs) -> Node:
        if kind not in _OPS:
            raise GraphError(f"unknown op kind {kind!r}")
        ids = tuple(n.id for n in inputs)
        needs = any(self.needs_grad[i] for i in ids)
        return self._append(kind, ids, attrs, None, needs)

    def set_output(self, node: Node) -> None:
        self.output = node.id
        self._ran = False

    def bind(self, bindings: dict) -> None:
        for name, value in bindings.items():
            if name not in self.roots:
                raise GraphError(f"unknown root {name!r}")
            self._bound[name] = np.asarray(value, dtype=np.float64)

    def forward(self, bindings: dict | None = None, start: int = 0) -> float:
        """Evaluate the graph; return the scalar value of the output node.

        With ``start > 0`` only nodes ``start, start+1, ...`` are recomputed and
        earlier nodes keep their cached values. The caller guarantees that
        nothing feeding those earlier nodes changed since the last forward.
        """
        if self.output is None:
            raise GraphError("no output node set")
        if bindings:
            self.bind(bindings)
        if start and not self._ran:
            raise GraphError("partial forward needs a previous complete forward")
        kinds, inputs, attrs, values, aux = self.kinds, self.inputs, self.attrs, self.values, self.aux
        self._ran = False
        for i in range(start, len(kinds)):
            kind = kinds[i]
            if kind == "const":
                continue
            if kind == "root":
                name = attrs[i]["name"]
                if name not in self._bound:
                    raise GraphError(f"root {name!r} is not bound")
                v = self._bound[name]
                if not all_finite(v):
                    raise NonFiniteError(f"root {name!r} holds NaN or Inf")
                values[i] = v
                continue
            v, a = _OPS[kind].forward(attrs[i], *(values[k] for k in inputs[i]))
            if not all_finite(v):
                raise NonFiniteError(f"node {i} ({kind}) produced NaN or Inf")
            values[i] = v
            aux[i] = a
        out = values[self.output]
        if out.shape != ():
            raise ShapeError(f"output node has shape {out.shape}, expected a scalar")
        self._ran = True
        return float(out)

    def value(self, node: Node | int) -> np.ndarray:
        i = node if isinstance(node, int) else node.id
        if self.values[i] is None:
            raise GraphError("node has no value; run forward first")
        return self.values[i]

    def backward(self, stop: int = 0) -> dict[str, np.ndarray]:
        """Gradients of the output w.r.t. every root (zeros where unused).

        Nodes below index ``stop`` are skipped, so roots created before
        ``stop`` report zero gradient; use it when only later roots matter.
        """
        if not self._ran:
            raise GraphError("backward called before a successful forward")
        n = self.output + 1
        grads: list = [None] * n
        grads[self.output] = np.asarray(1.0)
        kinds, inputs, attrs, values, aux, needs_grad = (
            self.kinds, self.inputs, self.attrs, self.values, self.aux, self.needs_grad)
        for i in range(n - 1, stop - 1, -1):
            g = grads[i]
            kind = kinds[i]
            if g is None or kind == "root" or kind == "const" or not needs_grad[i]:
                continue
            ins = inputs[i]
            needs = tuple(needs_grad[k] and k >= stop for k in ins)
            in_grads = _OPS[kind].backward(attrs[i], g, values[i], aux[i], needs,
                                           *(values[k] for k in ins))
            for k, gk, nk in zip(ins, in_grads, needs):
                if gk is None or not nk:
                    continue
                grads[k] = gk if grads[k] is None else grads[k] + gk
        out = {}
        for name, i in self.roots.items():
            g = grads[i] if i < n else None
            out[name] = np.zeros_like(values[i]) if g is None else np.asarray(g, dtype=np.float64)
        return out


# -- finite-difference oracles ------------------------------------------------

def fd_grad(f: Callable[[np.ndarray], float], x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite function value at coordinate {i}")
        out[i] = (fp - fm) / (2.0 * eps)
    return out.reshape(x.shape)


def hvp(grad: Callable[[np.ndarray], np.ndarray], x, v, eps: float = 1e-4) -> np.ndarray:
    """Finite-difference Hessian-vector product ``H(x) @ v``.

    The step is taken along the unit vector ``v/|v|`` and the result rescaled,
    so the truncation error does not depend on the length of ``v``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if not norm > 0:
        raise ValueError("direction must be non-zero")
    u = v / norm
    gp = np.asarray(grad(x + eps * u), dtype=np.float64)
    gm = np.asarray(grad(x - eps * u), dtype=np.float64)
    if not (np.isfinite(gp).all() and np.isfinite(gm).all()):
        raise NonFiniteError("non-finite gradient in hvp")
    return (gp - gm) * (norm / (2.0 * eps))


# -- seeded random streams ------------------------------------------------------

def _key_part(k) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode())
    k = int(k)
    if k < 0:
        raise ValueError("rng keys must be non-negative")
    return k


class Rng:
    """Seeded, splittable random stream.

    ``Rng(seed).split("data", 3)`` gives a stream that depends only on the seed
    and the key path, never on how many draws other streams have made.
    """

    def __init__(self, seed: int, key: tuple = ()):
        self.seed = int(seed)
        self.key = tuple(_key_part(k) for k in key)
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=self.key)))

    def split(self, *key) -> "Rng":
        return Rng(self.seed, self.key + tuple(_key_part(k) for k in key))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self._gen.choice(a, size=size, replace=replace)

    def __repr__(self):
        return f"Rng(seed={self.seed}, key={self.key})"
