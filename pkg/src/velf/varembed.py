"""Gaussian embedding machinery.

Per-ID posteriors live in a table of (mu, rho) rows with sigma =
softplus(rho), so sigma stays positive without constrained updates.
Priors are not free parameters: a small network maps an entity's
attributes to (mu_p, sigma_p), which is what carries cold-start
information, and the priors are themselves pulled toward N(0, I).

The KL here is the diagonal-Gaussian closed form including the -1/2 per
dimension, so KL(q || q) is exactly zero.

Numpy-facing functions (posterior_params, kl_gaussian, gate, ...) serve
inference and tests; the *_nodes builders compose the same math on a
diffgraph tape for training.
"""

from dataclasses import dataclass

import numpy as np

from .diffgraph import Graph, Tensor, Var, _stable_sigmoid, neg as _neg, \
    sub as _sub, reciprocal as _reciprocal


class UnseenIdError(KeyError):
    """Lookup of an ID with no training-time row; distinct from count 0."""

    def __init__(self, kind: str, id_code: int):
        self.kind = kind
        self.id_code = int(id_code)
        super().__init__(f"{kind} id {id_code} was never seen in training")


def softplus(x):
    x = np.asarray(x)
    return np.logaddexp(x.dtype.type(0) if x.dtype.kind == "f" else 0.0, x)


def sigmoid(x):
    # same branch-split evaluation as the graph primitive, so serving and
    # training agree bitwise
    return _stable_sigmoid(np.asarray(x, dtype=np.float64))


class PosteriorTable:
    """Mean-field Gaussian rows, one per ID code seen in training.

    Codes cover the full vocabulary so test-time IDs are addressable, but
    rows are only meaningful where ``seen`` is set; params() on an unseen
    code raises rather than returning the untrained initial values.
    """

    def __init__(self, mu: Tensor, rho: Tensor, seen: np.ndarray, kind: str = "id"):
        if mu.shape != rho.shape or mu.data.ndim != 2:
            raise ValueError(
                f"posterior table: mu {mu.shape} and rho {rho.shape} must be "
                f"equal 2-d shapes")
        if seen.shape != (mu.shape[0],):
            raise ValueError("posterior table: seen mask must be (n_ids,)")
        self.mu = mu
        self.rho = rho
        self.seen = seen.astype(bool)
        self.kind = kind

    @classmethod
    def initialize(cls, n_ids: int, dim: int, seen: np.ndarray, rng,
                   dtype=np.float32, kind: str = "id") -> "PosteriorTable":
        # mu near zero; rho = 0 puts the initial sigma at softplus(0) = ln 2,
        # matching the zero-initialised prior heads
        mu = rng.normal(0.0, 0.01, size=(n_ids, dim)).astype(dtype)
        rho = np.zeros((n_ids, dim), dtype=dtype)
        return cls(Tensor(mu, requires_grad=True),
                   Tensor(rho, requires_grad=True), seen, kind)

    @property
    def n_ids(self) -> int:
        return self.mu.shape[0]

    @property
    def dim(self) -> int:
        return self.mu.shape[1]

    def has(self, id_code: int) -> bool:
        return 0 <= id_code < self.n_ids and bool(self.seen[id_code])

    def params(self, id_code: int) -> tuple[np.ndarray, np.ndarray]:
        """(mu_q, sigma_q) for one seen ID."""
        if not self.has(id_code):
            raise UnseenIdError(self.kind, id_code)
        return (self.mu.data[id_code].copy(),
                softplus(self.rho.data[id_code]))


def posterior_params(table: PosteriorTable, id_code: int):
    return table.params(id_code)


class PriorNetwork:
    """Attribute codes -> embeddings -> relu trunk -> (mu_p, sigma_p) heads.

    The sigma head output passes through softplus.  Heads initialise to
    zero so every prior starts at N(0, softplus(0)^2 I) regardless of
    attributes; attribute structure appears as training shapes the heads.
    """

    def __init__(self, attr_tables: list[Tensor], trunk: list[Tensor],
                 mu_head: tuple[Tensor, Tensor], rho_head: tuple[Tensor, Tensor],
                 kind: str = "prior"):
        self.attr_tables = attr_tables
        self.trunk = trunk  # [w1, b1, w2, b2, ...]
        self.mu_w, self.mu_b = mu_head
        self.rho_w, self.rho_b = rho_head
        self.kind = kind

    @classmethod
    def initialize(cls, attr_sizes: list[int], dim: int, hidden: int, rng,
                   n_layers: int = 3, dtype=np.float32,
                   kind: str = "prior") -> "PriorNetwork":
        def glorot(fan_in, fan_out):
            a = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-a, a, size=(fan_in, fan_out)).astype(dtype)

        attr_tables = [
            Tensor(rng.normal(0.0, 0.01, size=(n, dim)).astype(dtype),
                   requires_grad=True)
            for n in attr_sizes]
        trunk = []
        width_in = dim * len(attr_sizes)
        for _ in range(n_layers):
            trunk.append(Tensor(glorot(width_in, hidden), requires_grad=True))
            trunk.append(Tensor(np.zeros(hidden, dtype=dtype),
                                requires_grad=True))
            width_in = hidden
        mu_head = (Tensor(np.zeros((width_in, dim), dtype=dtype), requires_grad=True),
                   Tensor(np.zeros(dim, dtype=dtype), requires_grad=True))
        rho_head = (Tensor(np.zeros((width_in, dim), dtype=dtype), requires_grad=True),
                    Tensor(np.zeros(dim, dtype=dtype), requires_grad=True))
        return cls(attr_tables, trunk, mu_head, rho_head, kind)

    @property
    def n_fields(self) -> int:
        return len(self.attr_tables)

    @property
    def dim(self) -> int:
        return self.mu_w.shape[1]

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, t in enumerate(self.attr_tables):
            out[f"attr{i}"] = t
        for i in range(0, len(self.trunk), 2):
            out[f"w{i // 2 + 1}"] = self.trunk[i]
            out[f"b{i // 2 + 1}"] = self.trunk[i + 1]
        out["mu_w"], out["mu_b"] = self.mu_w, self.mu_b
        out["rho_w"], out["rho_b"] = self.rho_w, self.rho_b
        return out

    def params_batch(self, attr_codes: list[np.ndarray]):
        """(mu_p [m, dim], sigma_p [m, dim]) for a batch of attribute rows."""
        if len(attr_codes) != self.n_fields:
            raise ValueError(
                f"{self.kind}: expected {self.n_fields} attribute fields, "
                f"got {len(attr_codes)}")
        cols = []
        for table, codes in zip(self.attr_tables, attr_codes):
            codes = np.asarray(codes)
            if codes.size and (codes.min() < 0 or codes.max() >= table.shape[0]):
                raise ValueError(
                    f"{self.kind}: attribute code out of range for table "
                    f"of {table.shape[0]} rows")
            cols.append(table.data[codes])
        h = np.concatenate(cols, axis=1)
        for i in range(0, len(self.trunk), 2):
            h = np.maximum(h @ self.trunk[i].data + self.trunk[i + 1].data, 0)
        mu = h @ self.mu_w.data + self.mu_b.data
        sigma = softplus(h @ self.rho_w.data + self.rho_b.data)
        return mu, sigma

    def params(self, attrs) -> tuple[np.ndarray, np.ndarray]:
        """(mu_p, sigma_p) for a single entity's attribute codes."""
        cols = [np.asarray([a]) for a in attrs]
        mu, sigma = self.params_batch(cols)
        return mu[0], sigma[0]


def prior_params(net: PriorNetwork, attrs):
    return net.params(attrs)


class FrequencyTable:
    """Training-split occurrence count per ID code.

    Absent IDs are reported as unseen, never as count zero: the gate must
    not be evaluated for an entity with no posterior row.
    """

    def __init__(self, counts: np.ndarray, kind: str = "id"):
        counts = np.asarray(counts)
        if counts.ndim != 1 or (counts.size and counts.min() < 0):
            raise ValueError("frequency table: counts must be 1-d, >= 0")
        self.counts = counts.astype(np.int64)
        self.kind = kind

    @classmethod
    def from_codes(cls, codes: np.ndarray, n_ids: int,
                   kind: str = "id") -> "FrequencyTable":
        return cls(np.bincount(np.asarray(codes), minlength=n_ids), kind)

    @property
    def n_ids(self) -> int:
        return self.counts.size

    def has(self, id_code: int) -> bool:
        return 0 <= id_code < self.n_ids and self.counts[id_code] > 0

    def count(self, id_code: int) -> int:
        if not self.has(id_code):
            raise UnseenIdError(self.kind, id_code)
        return int(self.counts[id_code])

    def seen_mask(self) -> np.ndarray:
        return self.counts > 0


@dataclass(frozen=True)
class GateConfig:
    """Frequency gate settings; stability_eps shifts the sigmoid argument."""

    stability_eps: float = 1e-3

    def __post_init__(self):
        if self.stability_eps < 0:
            raise ValueError("gate: stability_eps must be >= 0")


def gate(freq, cfg: GateConfig = GateConfig()):
    """Posterior weight g = sigmoid(freq - eps), in (0, 1), increasing."""
    freq = np.asarray(freq, dtype=np.float64)
    if np.any(freq < 0):
        raise ValueError("gate: frequency must be >= 0")
    return sigmoid(freq - cfg.stability_eps)


def sample_embedding(mu: np.ndarray, sigma: np.ndarray,
                     noise: np.ndarray) -> np.ndarray:
    """One reparameterised draw z = mu + sigma * noise."""
    if not (mu.shape == sigma.shape == noise.shape):
        raise ValueError(
            f"sample: shapes differ mu={mu.shape} sigma={sigma.shape} "
            f"noise={noise.shape}")
    return mu + sigma * noise


def kl_gaussian(mu_q, sigma_q, mu_p, sigma_p) -> float:
    """KL(N(mu_q, sigma_q^2) || N(mu_p, sigma_p^2)), diagonal, summed."""
    mu_q, sigma_q, mu_p, sigma_p = (
        np.asarray(a, dtype=np.float64) for a in (mu_q, sigma_q, mu_p, sigma_p))
    if not (mu_q.shape == sigma_q.shape == mu_p.shape == sigma_p.shape):
        raise ValueError("kl: all four parameter arrays must share a shape")
    if np.any(sigma_q <= 0) or np.any(sigma_p <= 0):
        raise ValueError("kl: sigmas must be strictly positive")
    terms = (np.log(sigma_p / sigma_q)
             + (sigma_q ** 2 + (mu_q - mu_p) ** 2) / (2.0 * sigma_p ** 2)
             - 0.5)
    return float(terms.sum())


def kl_to_standard(mu_p, sigma_p) -> float:
    """KL against the fixed N(0, I) hyper-prior."""
    mu_p = np.asarray(mu_p, dtype=np.float64)
    return kl_gaussian(mu_p, sigma_p, np.zeros_like(mu_p),
                       np.ones_like(mu_p))


def inference_embedding(table: PosteriorTable, net: PriorNetwork,
                        id_code: int | None, attrs, freqs: FrequencyTable,
                        cfg: GateConfig = GateConfig()) -> np.ndarray:
    """Deterministic serving embedding.

    Seen ID: blend g * mu_q + (1 - g) * mu_p with g from the frequency
    gate, so rarely-observed IDs lean on their attribute prior.  Unseen
    ID (or id_code None): exactly the prior mean.
    """
    mu_p, _ = net.params(attrs)
    if id_code is None or not table.has(id_code):
        return mu_p
    mu_q, _ = table.params(id_code)
    w = float(gate(freqs.count(id_code), cfg))
    return w * mu_q + (1.0 - w) * mu_p


# -- graph-side builders ------------------------------------------------

def sample_nodes(g: Graph, mu: Var, sigma: Var, noise: np.ndarray) -> Var:
    """Reparameterised draw on the tape; noise enters as a constant leaf."""
    eps = g.const(np.asarray(noise, dtype=mu.data.dtype))
    return g.add(mu, g.mul(sigma, eps))


def kl_diag_nodes(g: Graph, mu_q: Var, sigma_q: Var, mu_p: Var,
                  sigma_p: Var) -> Var:
    """Row-wise KL between diagonal Gaussians: [m, d] inputs -> [m, 1]."""
    m, d = mu_q.shape
    dt = mu_q.data.dtype
    log_ratio = _sub(g, g.log(sigma_p), g.log(sigma_q))
    num = g.add(g.square(sigma_q), g.square(_sub(g, mu_q, mu_p)))
    den = g.mul(g.square(sigma_p), g.const(2.0, shape=(m, d), dtype=dt))
    per_dim = g.add(log_ratio, g.mul(num, _reciprocal(g, den)))
    row = g.reduce_sum(per_dim, axis=1, keepdims=True)
    return g.add(row, g.const(-0.5 * d, shape=(m, 1), dtype=dt))


def kl_standard_nodes(g: Graph, mu: Var, sigma: Var) -> Var:
    """Row-wise KL against N(0, I): [m, d] inputs -> [m, 1]."""
    m, d = mu.shape
    dt = mu.data.dtype
    half = g.const(0.5, shape=(m, d), dtype=dt)
    quad = g.mul(g.add(g.square(sigma), g.square(mu)), half)
    row = g.reduce_sum(g.add(_neg(g, g.log(sigma)), quad),
                       axis=1, keepdims=True)
    return g.add(row, g.const(-0.5 * d, shape=(m, 1), dtype=dt))


def prior_nodes(g: Graph, leaves: dict[str, Var], prefix: str,
                n_fields: int, n_layers: int,
                attr_codes: list[np.ndarray]) -> tuple[Var, Var]:
    """Prior network forward on the tape; leaves hold its parameters.

    Names mirror PriorNetwork.parameters() under ``prefix``, e.g.
    "prior_user.attr0".  Returns (mu_p [m, d], sigma_p [m, d]).
    """
    if len(attr_codes) != n_fields:
        raise ValueError(
            f"{prefix}: expected {n_fields} attribute fields, "
            f"got {len(attr_codes)}")
    cols = [g.gather_rows(leaves[f"{prefix}.attr{i}"], np.asarray(codes))
            for i, codes in enumerate(attr_codes)]
    h = g.concat(cols) if len(cols) > 1 else cols[0]
    for i in range(1, n_layers + 1):
        h = g.relu(g.add(g.matmul(h, leaves[f"{prefix}.w{i}"]),
                         leaves[f"{prefix}.b{i}"]))
    mu = g.add(g.matmul(h, leaves[f"{prefix}.mu_w"]),
               leaves[f"{prefix}.mu_b"])
    sigma = g.softplus(g.add(g.matmul(h, leaves[f"{prefix}.rho_w"]),
                             leaves[f"{prefix}.rho_b"]))
    return mu, sigma
