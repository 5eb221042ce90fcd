"""Reverse-mode differentiation over a fixed set of dense-array primitives.

A Graph is an append-only tape: applying an op appends a node whose
inputs already sit on the tape, so walking the tape backwards is a
reverse topological order for free.  The primitive set is deliberately
small (PRIMITIVES, 13 kinds) and every adjoint is written out by hand;
anything else the model needs is composed from these.  Broadcasting is
restricted to the one pattern the model uses, bias addition over leading
axes; everything else requires exact shape agreement, which keeps the
adjoints trivially auditable.

Convention: relu backpropagates zero at the kink, and ``log`` demands a
strictly positive input up front rather than producing -inf mid-tape.
"""

from contextlib import contextmanager

import numpy as np

from . import _kernels

PRIMITIVES = (
    "matmul", "add", "mul", "concat", "gather_rows",
    "relu", "sigmoid", "exp", "log", "softplus", "square",
    "reduce_sum", "reduce_mean",
)


class GraphError(Exception):
    """Base for errors raised while building or differentiating a graph."""


class ShapeMismatch(GraphError):
    pass


class DomainError(GraphError):
    pass


class IndexOutOfRange(GraphError):
    def __init__(self, index: int, table_rows: int):
        self.index = int(index)
        self.table_rows = int(table_rows)
        super().__init__(
            f"gather_rows: index {self.index} out of range for table with "
            f"{self.table_rows} rows")


_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """Dense float array plus a trainable flag.

    Pure parameter container; all arithmetic happens through a Graph.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        flag = ", trainable" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"


class Var:
    """Handle to one node on a Graph tape."""

    __slots__ = ("graph", "nid")

    def __init__(self, graph: "Graph", nid: int):
        self.graph = graph
        self.nid = nid

    @property
    def data(self) -> np.ndarray:
        return self.graph._nodes[self.nid].value

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        node = self.graph._nodes[self.nid]
        return f"Var(nid={self.nid}, kind={node.kind}, shape={node.value.shape})"


class _Node:
    __slots__ = ("kind", "inputs", "value", "adjoint", "trainable")

    def __init__(self, kind, inputs, value, adjoint, trainable=False):
        self.kind = kind
        self.inputs = inputs
        self.value = value
        self.adjoint = adjoint  # callable(out_grad) -> per-input grads, or None
        self.trainable = trainable


# fault injection for the gradcheck self-test: adjoints of the named kind
# are rescaled, which a correct checker must flag
_ADJOINT_SCALE: dict[str, float] = {}


@contextmanager
def scaled_adjoint(kind: str, factor: float):
    """Deliberately mis-scale one primitive's adjoint within the block."""
    if kind not in PRIMITIVES:
        raise ValueError(f"unknown primitive kind: {kind!r}")
    _ADJOINT_SCALE[kind] = float(factor)
    try:
        yield
    finally:
        del _ADJOINT_SCALE[kind]


def _same_dtype(kind, *arrays):
    dt = arrays[0].dtype
    for a in arrays[1:]:
        if a.dtype != dt:
            raise ShapeMismatch(
                f"{kind}: mixed dtypes {[str(a.dtype) for a in arrays]}")
    return dt


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    flat = np.atleast_1d(x)
    out = np.empty_like(flat)
    pos = flat >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-flat[pos]))
    ex = np.exp(flat[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out.reshape(np.shape(x))


class Graph:
    """Append-only tape of primitive applications."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __len__(self):
        return len(self._nodes)

    # -- node creation ---------------------------------------------------

    def _push(self, kind, inputs, value, adjoint, trainable=False) -> Var:
        factor = _ADJOINT_SCALE.get(kind)
        if factor is not None and adjoint is not None:
            inner = adjoint

            def adjoint(g, _inner=inner, _f=factor):
                return tuple(None if gi is None else gi * _f
                             for gi in _inner(g))

        self._nodes.append(_Node(kind, inputs, value, adjoint, trainable))
        return Var(self, len(self._nodes) - 1)

    def leaf(self, tensor, trainable: bool | None = None) -> Var:
        """Put a Tensor (or array) on the tape as a leaf."""
        if not isinstance(tensor, Tensor):
            tensor = Tensor(tensor)
        train = tensor.requires_grad if trainable is None else bool(trainable)
        return self._push("leaf", (), tensor.data, None, trainable=train)

    def const(self, value, shape=None, dtype=None) -> Var:
        """Non-trainable leaf holding a full-shape constant.

        Scalar broadcasting is not a primitive, so constants that multiply
        or add into an array are materialised at that array's shape.
        """
        arr = np.asarray(value, dtype=dtype)
        if shape is not None:
            arr = np.broadcast_to(arr, shape).copy()
        if arr.dtype.type not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        return self._push("leaf", (), arr, None, trainable=False)

    # -- primitives ------------------------------------------------------

    def apply(self, kind: str, *inputs, **kwargs) -> Var:
        """Apply a primitive by name; the named methods are the real API."""
        if kind not in PRIMITIVES:
            raise GraphError(f"unknown primitive kind: {kind!r}")
        fn = getattr(self, kind)
        if kind == "concat":
            return fn(list(inputs), **kwargs)
        return fn(*inputs, **kwargs)

    def matmul(self, a: Var, b: Var) -> Var:
        av, bv = a.data, b.data
        if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
            raise ShapeMismatch(
                f"matmul: incompatible shapes {av.shape} x {bv.shape}")
        _same_dtype("matmul", av, bv)
        out = av @ bv

        def adjoint(g):
            return g @ bv.T, av.T @ g

        return self._push("matmul", (a.nid, b.nid), out, adjoint)

    def add(self, a: Var, b: Var) -> Var:
        av, bv = a.data, b.data
        _same_dtype("add", av, bv)
        if av.shape == bv.shape:
            def adjoint(g):
                return g, g
        elif bv.shape == av.shape[av.ndim - bv.ndim:] and bv.ndim < av.ndim:
            # bias broadcast over leading axes; grad sums them away
            lead = tuple(range(av.ndim - bv.ndim))

            def adjoint(g):
                return g, g.sum(axis=lead)
        else:
            raise ShapeMismatch(
                f"add: shapes {av.shape} and {bv.shape} neither match nor "
                f"form a bias broadcast")
        return self._push("add", (a.nid, b.nid), av + bv, adjoint)

    def mul(self, a: Var, b: Var) -> Var:
        av, bv = a.data, b.data
        if av.shape != bv.shape:
            raise ShapeMismatch(
                f"mul: shapes {av.shape} and {bv.shape} differ "
                f"(elementwise only; materialise constants at full shape)")
        _same_dtype("mul", av, bv)

        def adjoint(g):
            return g * bv, g * av

        return self._push("mul", (a.nid, b.nid), av * bv, adjoint)

    def concat(self, parts: list[Var]) -> Var:
        if not parts:
            raise ShapeMismatch("concat: empty input list")
        vals = [p.data for p in parts]
        _same_dtype("concat", *vals)
        nd = vals[0].ndim
        if nd < 1:
            raise ShapeMismatch("concat: inputs must have at least one axis")
        lead = vals[0].shape[:-1]
        for v in vals:
            if v.ndim != nd or v.shape[:-1] != lead:
                raise ShapeMismatch(
                    f"concat: shapes {[v.shape for v in vals]} differ off "
                    f"the last axis")
        widths = [v.shape[-1] for v in vals]
        out = np.concatenate(vals, axis=-1)
        offsets = np.cumsum([0] + widths)

        def adjoint(g):
            return tuple(g[..., offsets[i]:offsets[i + 1]]
                         for i in range(len(vals)))

        return self._push("concat", tuple(p.nid for p in parts), out, adjoint)

    def gather_rows(self, table: Var, indices) -> Var:
        tv = table.data
        if tv.ndim != 2:
            raise ShapeMismatch(
                f"gather_rows: table must be 2-d, got shape {tv.shape}")
        idx = np.asarray(indices)
        if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
            raise ShapeMismatch(
                "gather_rows: indices must be a 1-d integer array")
        n = tv.shape[0]
        if idx.size:
            lo, hi = int(idx.min()), int(idx.max())
            if lo < 0 or hi >= n:
                bad = lo if lo < 0 else hi
                raise IndexOutOfRange(bad, n)
        idx = idx.astype(np.int64, copy=True)
        out = tv[idx]

        def adjoint(g):
            tg = np.zeros_like(tv)
            _kernels.scatter_add_rows(tg, idx, np.ascontiguousarray(g))
            return (tg,)

        return self._push("gather_rows", (table.nid,), out, adjoint)

    def relu(self, x: Var) -> Var:
        xv = x.data
        out = np.maximum(xv, 0)
        mask = (xv > 0).astype(xv.dtype)  # subgradient 0 at the kink

        def adjoint(g):
            return (g * mask,)

        return self._push("relu", (x.nid,), out, adjoint)

    def sigmoid(self, x: Var) -> Var:
        out = _stable_sigmoid(x.data)

        def adjoint(g):
            return (g * (out * (1 - out)),)

        return self._push("sigmoid", (x.nid,), out, adjoint)

    def exp(self, x: Var) -> Var:
        out = np.exp(x.data)

        def adjoint(g):
            return (g * out,)

        return self._push("exp", (x.nid,), out, adjoint)

    def log(self, x: Var) -> Var:
        xv = x.data
        if not np.all(xv > 0):
            raise DomainError("log: input must be strictly positive")
        out = np.log(xv)

        def adjoint(g):
            return (g / xv,)

        return self._push("log", (x.nid,), out, adjoint)

    def softplus(self, x: Var) -> Var:
        xv = x.data
        out = np.logaddexp(xv.dtype.type(0), xv)
        sig = _stable_sigmoid(xv)

        def adjoint(g):
            return (g * sig,)

        return self._push("softplus", (x.nid,), out, adjoint)

    def square(self, x: Var) -> Var:
        xv = x.data

        def adjoint(g):
            return (g * (2 * xv),)

        return self._push("square", (x.nid,), xv * xv, adjoint)

    def _reduce(self, kind, x, axis, keepdims):
        xv = x.data
        if axis is not None:
            if not isinstance(axis, int) or not -xv.ndim <= axis < xv.ndim:
                raise ShapeMismatch(
                    f"{kind}: axis {axis!r} invalid for shape {xv.shape}")
            axis = axis % xv.ndim
        fn = np.sum if kind == "reduce_sum" else np.mean
        out = fn(xv, axis=axis, keepdims=keepdims)
        out = np.asarray(out, dtype=xv.dtype)
        scale = 1.0 if kind == "reduce_sum" else (
            xv.size if axis is None else xv.shape[axis])

        def adjoint(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            g = np.broadcast_to(g, xv.shape)
            if scale != 1.0:
                g = g / xv.dtype.type(scale)
            else:
                g = g.copy()
            return (g,)

        return self._push(kind, (x.nid,), out, adjoint)

    def reduce_sum(self, x: Var, axis: int | None = None,
                   keepdims: bool = False) -> Var:
        return self._reduce("reduce_sum", x, axis, keepdims)

    def reduce_mean(self, x: Var, axis: int | None = None,
                    keepdims: bool = False) -> Var:
        return self._reduce("reduce_mean", x, axis, keepdims)

    # -- reverse pass ----------------------------------------------------

    def backward(self, loss: Var) -> dict[int, np.ndarray]:
        """Accumulate d(loss)/d(leaf) for every trainable leaf.

        Returns nid -> gradient for exactly the trainable leaves; a
        trainable leaf the loss never touched maps to zeros.  Rebuilding
        the same graph and calling backward again reproduces the result
        bitwise: the tape fixes the accumulation order.
        """
        if loss.graph is not self:
            raise GraphError("backward: loss belongs to a different graph")
        root = self._nodes[loss.nid]
        if root.value.size != 1:
            raise ShapeMismatch(
                f"backward: loss must be scalar, got shape {root.value.shape}")
        grads: dict[int, np.ndarray] = {loss.nid: np.ones_like(root.value)}
        for nid in range(loss.nid, -1, -1):
            node = self._nodes[nid]
            if node.adjoint is None:
                continue
            g = grads.pop(nid, None)
            if g is None:
                continue
            for inp, ig in zip(node.inputs, node.adjoint(g)):
                if ig is None:
                    continue
                prev = grads.get(inp)
                grads[inp] = ig if prev is None else prev + ig
        out: dict[int, np.ndarray] = {}
        for nid, node in enumerate(self._nodes):
            if node.trainable:
                g = grads.get(nid)
                out[nid] = np.zeros_like(node.value) if g is None else \
                    np.ascontiguousarray(g)
        return out


def neg(g: Graph, x: Var) -> Var:
    """Composed negation: mul by a materialised -1 (not a primitive)."""
    return g.mul(x, g.const(-1.0, shape=x.shape, dtype=x.data.dtype))


def sub(g: Graph, a: Var, b: Var) -> Var:
    """Composed subtraction a - b."""
    return g.add(a, neg(g, b))


def reciprocal(g: Graph, x: Var) -> Var:
    """Composed 1/x as exp(-log x); valid for x > 0."""
    return g.exp(neg(g, g.log(x)))


def grad_check(fn, point, step: float = 1e-5) -> float:
    """Max relative error of the analytic gradient at ``point``.

    ``fn(graph, x)`` must build and return a scalar Var from the single
    leaf ``x``.  Compares against central differences coordinate by
    coordinate: err = |analytic - numeric| / max(1, |analytic|).  The
    caller is responsible for keeping ``fn`` smooth at the point.
    """
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    base = point.data if isinstance(point, Tensor) else point
    base = np.array(base, dtype=np.float64)

    def value_at(arr) -> float:
        g = Graph()
        x = g.leaf(Tensor(arr, requires_grad=True))
        v = fn(g, x).data
        if v.size != 1:
            raise ShapeMismatch(
                f"grad_check: fn must return a scalar, got shape {v.shape}")
        return float(v)

    g = Graph()
    x = g.leaf(Tensor(base, requires_grad=True))
    loss = fn(g, x)
    if loss.data.size != 1:
        raise ShapeMismatch(
            f"grad_check: fn must return a scalar, got shape {loss.data.shape}")
    analytic = g.backward(loss)[x.nid].ravel()
    if not np.all(np.isfinite(analytic)):
        raise DomainError("grad_check: non-finite analytic gradient")

    flat = base.ravel()
    max_err = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = value_at(base)
        flat[i] = orig - step
        fm = value_at(base)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise DomainError("grad_check: non-finite evaluation near point")
        numeric = (fp - fm) / (2 * step)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        max_err = max(max_err, err)
    return max_err
