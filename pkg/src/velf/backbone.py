"""Prediction heads over per-field embedding blocks.

Every field contributes one block of ``dim`` values (default 8); blocks
concatenate in a fixed FieldLayout order into the MLP input.  The DeepFM
variant adds the second-order factorisation term, computed through the
half-identity 0.5 * (||sum||^2 - sum ||v||^2) rather than the pairwise
loop, and a first-order part with one scalar weight per (field, value).

predict_ctr clamps probabilities to [1e-7, 1 - 1e-7]; metrics downstream
take a log of both p and 1 - p, and the clamp bounds them away from the
poles.  Training never goes through the clamp, its loss is computed in
logit space.
"""

import numpy as np

from .diffgraph import Graph, ShapeMismatch, Tensor, Var, sub as _sub


class FieldLayout:
    """Ordered field names feeding the head, each a ``dim``-wide block."""

    def __init__(self, names, dim: int = 8):
        names = tuple(names)
        if len(set(names)) != len(names):
            raise ValueError(f"layout: duplicate field names in {names}")
        if not names:
            raise ValueError("layout: at least one field required")
        if dim < 1:
            raise ValueError("layout: dim must be >= 1")
        self.names = names
        self.dim = int(dim)

    @property
    def n_fields(self) -> int:
        return len(self.names)

    @property
    def concat_dim(self) -> int:
        return self.dim * len(self.names)

    def __eq__(self, other):
        return (isinstance(other, FieldLayout)
                and self.names == other.names and self.dim == other.dim)

    def __repr__(self):
        return f"FieldLayout({list(self.names)}, dim={self.dim})"


def assemble_input(blocks, layout: FieldLayout) -> np.ndarray:
    """Concatenate per-field blocks in layout order.

    ``blocks`` is either a dict name -> [m, dim] array or a list of
    (name, array) pairs already in layout order; a permuted list is an
    error, not something to silently fix.
    """
    if isinstance(blocks, dict):
        missing = [n for n in layout.names if n not in blocks]
        extra = [n for n in blocks if n not in layout.names]
        if missing or extra:
            raise ShapeMismatch(
                f"assemble: fields missing={missing} extra={extra} "
                f"for layout {layout.names}")
        ordered = [blocks[n] for n in layout.names]
    else:
        got = tuple(n for n, _ in blocks)
        if got != layout.names:
            raise ShapeMismatch(
                f"assemble: field order {got} does not match layout "
                f"{layout.names}")
        ordered = [b for _, b in blocks]
    m = ordered[0].shape[0]
    for name, b in zip(layout.names, ordered):
        if b.shape != (m, layout.dim):
            raise ShapeMismatch(
                f"assemble: block {name!r} has shape {b.shape}, "
                f"expected ({m}, {layout.dim})")
    return np.concatenate(ordered, axis=1)


def fm_interaction(vectors) -> float:
    """Sum of pairwise dot products over field vectors, via the
    half-identity 0.5 * (||sum v||^2 - sum ||v||^2)."""
    arr = np.asarray(vectors, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 2:
        raise ValueError(
            f"fm: need at least two field vectors, got shape {arr.shape}")
    s = arr.sum(axis=0)
    return float(0.5 * (s @ s - (arr * arr).sum()))


class MlpHead:
    """Relu trunk on the assembled input, scalar output, no final
    nonlinearity."""

    def __init__(self, weights: list[Tensor], out_w: Tensor, out_b: Tensor):
        self.weights = weights  # [w1, b1, w2, b2, ...]
        self.out_w = out_w
        self.out_b = out_b

    @classmethod
    def initialize(cls, in_dim: int, hidden: int, rng, n_layers: int = 3,
                   dtype=np.float32) -> "MlpHead":
        def glorot(fi, fo):
            a = np.sqrt(6.0 / (fi + fo))
            return rng.uniform(-a, a, size=(fi, fo)).astype(dtype)

        weights = []
        w_in = in_dim
        for _ in range(n_layers):
            weights.append(Tensor(glorot(w_in, hidden), requires_grad=True))
            weights.append(Tensor(np.zeros(hidden, dtype=dtype),
                                  requires_grad=True))
            w_in = hidden
        out_w = Tensor(glorot(w_in, 1), requires_grad=True)
        out_b = Tensor(np.zeros(1, dtype=dtype), requires_grad=True)
        return cls(weights, out_w, out_b)

    @property
    def n_layers(self) -> int:
        return len(self.weights) // 2

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for i in range(0, len(self.weights), 2):
            out[f"w{i // 2 + 1}"] = self.weights[i]
            out[f"b{i // 2 + 1}"] = self.weights[i + 1]
        out["out_w"], out["out_b"] = self.out_w, self.out_b
        return out

    def logit(self, blocks, codes, layout: FieldLayout) -> np.ndarray:
        """[m, 1] raw scores; ``codes`` is unused but kept for a uniform
        head interface."""
        h = assemble_input(blocks, layout)
        for i in range(0, len(self.weights), 2):
            h = np.maximum(h @ self.weights[i].data + self.weights[i + 1].data,
                           0)
        return h @ self.out_w.data + self.out_b.data


class DeepFmHead:
    """MlpHead plus factorisation-machine and first-order terms."""

    def __init__(self, mlp: MlpHead, linear_tables: dict[str, Tensor]):
        self.mlp = mlp
        self.linear_tables = linear_tables  # field name -> [vocab, 1]

    @classmethod
    def initialize(cls, layout: FieldLayout, vocab_sizes: dict[str, int],
                   hidden: int, rng, n_layers: int = 3,
                   dtype=np.float32) -> "DeepFmHead":
        mlp = MlpHead.initialize(layout.concat_dim, hidden, rng,
                                 n_layers=n_layers, dtype=dtype)
        # wide part starts silent; it only speaks once trained
        linear = {name: Tensor(np.zeros((vocab_sizes[name], 1), dtype=dtype),
                               requires_grad=True)
                  for name in layout.names}
        return cls(mlp, linear)

    def parameters(self) -> dict[str, Tensor]:
        out = {f"mlp.{k}": v for k, v in self.mlp.parameters().items()}
        for name, t in self.linear_tables.items():
            out[f"linear.{name}"] = t
        return out

    def logit(self, blocks, codes, layout: FieldLayout) -> np.ndarray:
        deep = self.mlp.logit(blocks, codes, layout)
        if isinstance(blocks, dict):
            ordered = [blocks[n] for n in layout.names]
        else:
            ordered = [b for _, b in blocks]
        s = ordered[0].copy()
        sq = ordered[0] * ordered[0]
        for b in ordered[1:]:
            s += b
            sq += b * b
        fm = 0.5 * (s * s - sq).sum(axis=1, keepdims=True)
        lin = np.zeros_like(deep)
        for name in layout.names:
            lin += self.linear_tables[name].data[codes[name]]
        return deep + fm + lin


def predict_ctr(head, blocks, codes, layout: FieldLayout) -> np.ndarray:
    """Clamped click probabilities, shape [m]."""
    t = head.logit(blocks, codes, layout)[:, 0]
    p = np.empty_like(t)
    pos = t >= 0
    p[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    ex = np.exp(t[~pos])
    p[~pos] = ex / (1.0 + ex)
    lo = t.dtype.type(1e-7)
    return np.clip(p, lo, 1 - lo)


# -- graph-side builders ------------------------------------------------

def mlp_logit_nodes(g: Graph, leaves: dict[str, Var], prefix: str,
                    n_layers: int, x: Var) -> Var:
    """Trunk forward on the tape over the assembled input x [m, D]."""
    h = x
    for i in range(1, n_layers + 1):
        h = g.relu(g.add(g.matmul(h, leaves[f"{prefix}.w{i}"]),
                         leaves[f"{prefix}.b{i}"]))
    return g.add(g.matmul(h, leaves[f"{prefix}.out_w"]),
                 leaves[f"{prefix}.out_b"])


def fm_nodes(g: Graph, blocks: list[Var]) -> Var:
    """FM second-order term per row: [m, 1] from field blocks [m, d]."""
    if len(blocks) < 2:
        raise ValueError("fm: need at least two field blocks")
    s = blocks[0]
    sq = g.square(blocks[0])
    for b in blocks[1:]:
        s = g.add(s, b)
        sq = g.add(sq, g.square(b))
    diff = _sub(g, g.square(s), sq)
    row = g.reduce_sum(diff, axis=1, keepdims=True)
    m = row.shape[0]
    return g.mul(row, g.const(0.5, shape=(m, 1), dtype=row.data.dtype))


def deepfm_logit_nodes(g: Graph, leaves: dict[str, Var], prefix: str,
                       n_layers: int, blocks: list[Var],
                       codes: list[np.ndarray],
                       layout: FieldLayout) -> Var:
    """Full DeepFM score on the tape; blocks/codes follow layout order."""
    x = g.concat(blocks)
    deep = mlp_logit_nodes(g, leaves, f"{prefix}.mlp", n_layers, x)
    fm = fm_nodes(g, blocks)
    lin = None
    for name, c in zip(layout.names, codes):
        term = g.gather_rows(leaves[f"{prefix}.linear.{name}"],
                             np.asarray(c))
        lin = term if lin is None else g.add(lin, term)
    return g.add(g.add(deep, fm), lin)
