"""Annealed ELBO training loop.

The objective per batch is mean logistic loss plus alpha times the sum
of the variant's KL means, with alpha ramping linearly from 0 to 1 over
``anneal_steps`` optimiser steps (one epoch's worth by default): early
steps fit the data, later ones feel the full regulariser.  Optimisation
is plain Adam with dense updates; every parameter tensor gets a gradient
on every step, untouched ones a zero one, so the update order never
depends on the batch.

Everything downstream of a (config, seed) pair is deterministic: model
init, batch order, and noise draws come from separate fixed streams.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .data import FieldSchema, Instances, batch_iterator, build_frequency_table
from .diffgraph import DomainError, Graph, ShapeMismatch, Tensor
from .model import HEADS, VARIANTS, VelfModel

# the learning-rate ladder the operating point was searched over
LR_GRID = (1e-5, 5e-5, 1e-4, 5e-4, 1e-3, 5e-3, 1e-2)

BREAKDOWN_FIELDS = ("log_loss", "kl_user_post", "kl_item_post",
                    "kl_user_prior_reg", "kl_item_prior_reg")


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, component: str, value: float):
        self.step = step
        self.component = component
        self.value = value
        super().__init__(
            f"training diverged at step {step}: {component} = {value!r}")


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "full"
    dim: int = 8
    hidden: int = 200
    n_layers: int = 3
    head: str = "deepfm"
    batch_size: int = 256
    learning_rate: float = 1e-3
    epochs: int = 2
    anneal_steps: int | None = None   # None: one epoch of steps
    seed: int = 0
    monte_carlo: int = 1
    gate_eps: float = 1e-3
    include_attr_fields: bool = True
    log_train_auc: bool = False

    def validate(self) -> "TrainConfig":
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")
        for name in ("dim", "hidden", "n_layers", "batch_size", "epochs",
                     "monte_carlo"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.anneal_steps is not None and self.anneal_steps < 1:
            raise ValueError("anneal_steps must be >= 1 when given")
        if self.gate_eps < 0:
            raise ValueError("gate_eps must be >= 0")
        return self


@dataclass(frozen=True)
class ElboBreakdown:
    """Scalar loss components of one batch; total is reconstructed from
    the parts, so total == log_loss + alpha * kl_sum holds exactly."""

    log_loss: float
    kl_user_post: float = 0.0
    kl_item_post: float = 0.0
    kl_user_prior_reg: float = 0.0
    kl_item_prior_reg: float = 0.0
    alpha: float = 0.0
    total: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "total",
                           self.log_loss + self.alpha * self.kl_sum())

    def kl_sum(self) -> float:
        return (self.kl_user_post + self.kl_item_post
                + self.kl_user_prior_reg + self.kl_item_prior_reg)

    def as_dict(self) -> dict:
        return {name: getattr(self, name)
                for name in BREAKDOWN_FIELDS + ("alpha", "total")}


def anneal_alpha(step: int, total_steps: int) -> float:
    """Linear KL weight ramp: min(step / total_steps, 1)."""
    if total_steps < 1:
        raise ValueError("anneal: total_steps must be >= 1")
    if step < 0:
        raise ValueError("anneal: step must be >= 0")
    return min(step / total_steps, 1.0)


class AdamState:
    """First/second moment slots per parameter name plus the shared step
    count."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def slots(self, name: str, like: np.ndarray):
        if name not in self.m:
            self.m[name] = np.zeros(like.size, dtype=like.dtype)
            self.v[name] = np.zeros(like.size, dtype=like.dtype)
        return self.m[name], self.v[name]


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update over every parameter, in place."""
    state.t += 1
    t = state.t
    for name, tensor in params.items():
        g = grads.get(name)
        if g is None:
            raise KeyError(f"adam: no gradient supplied for {name!r}")
        if g.shape != tensor.data.shape:
            raise ShapeMismatch(
                f"adam: gradient shape {g.shape} != param shape "
                f"{tensor.data.shape} for {name!r}")
        m, v = state.slots(name, tensor.data)
        dt = tensor.data.dtype.type
        _kernels.adam_update(
            tensor.data.reshape(-1), np.ascontiguousarray(g).reshape(-1),
            m, v, dt(lr), dt(state.beta1), dt(state.beta2),
            dt(1.0 - state.beta1), dt(1.0 - state.beta2), dt(state.eps),
            dt(1.0 - state.beta1 ** t), dt(1.0 - state.beta2 ** t))


def seed_streams(seed: int):
    """(batch_rng, noise_rng); the model-init stream is SeedSequence(seed)
    inside VelfModel.create, disjoint from these."""
    return (np.random.default_rng(np.random.SeedSequence((seed, 1))),
            np.random.default_rng(np.random.SeedSequence((seed, 2))))


def draw_noise(rng, m: int, dim: int, n_samples: int, dtype):
    """Per-sample (user, item) standard-normal draws, in a fixed order."""
    out = []
    for _ in range(n_samples):
        nu = rng.standard_normal((m, dim), dtype=dtype)
        ni = rng.standard_normal((m, dim), dtype=dtype)
        out.append((nu, ni))
    return out


def elbo_step(model: VelfModel, insts: Instances, alpha: float,
              noise) -> tuple[ElboBreakdown, dict[str, np.ndarray]]:
    """Build the batch graph, run backward,
    return (breakdown, grads by param name)."""
    g = Graph()
    leaves = model.register(g)
    components, total = model.build_elbo(g, leaves, insts, alpha, noise)
    node_grads = g.backward(total)
    grads = {name: node_grads[var.nid] for name, var in leaves.items()}
    values = {k: float(v.data) for k, v in components.items()}
    return ElboBreakdown(alpha=alpha, **values), grads


def elbo_loss(model: VelfModel, insts: Instances, alpha: float, rng,
              n_samples: int = 1) -> ElboBreakdown:
    """Breakdown only, drawing fresh reparameterisation noise from rng."""
    noise = [] if model.variant == "point" else draw_noise(
        rng, len(insts), model.layout.dim, n_samples, model.dtype)
    breakdown, _ = elbo_step(model, insts, alpha, noise)
    return breakdown


def _check_finite(bd: ElboBreakdown, step: int):
    for name in BREAKDOWN_FIELDS + ("total",):
        v = getattr(bd, name)
        if not math.isfinite(v):
            raise TrainingDivergedError(step, name, v)


@dataclass
class TrainResult:
    model: VelfModel
    epoch_log: list[dict]
    config: TrainConfig


def train(config: TrainConfig, schema: FieldSchema, train_set: Instances,
          on_step=None, on_epoch=None) -> TrainResult:
    """Run the full loop; deterministic in (config, train_set).

    on_step(step, breakdown) and on_epoch(entry) are observation hooks;
    the epoch log aggregates instance-weighted means of the breakdown.
    """
    cfg = config.validate()
    if len(train_set) == 0:
        raise ValueError("train: empty training split")
    freq_user, freq_item = build_frequency_table(train_set, schema)
    model = VelfModel.create(
        schema, freq_user, freq_item, variant=cfg.variant, dim=cfg.dim,
        hidden=cfg.hidden, n_layers=cfg.n_layers, head=cfg.head,
        include_attr_fields=cfg.include_attr_fields, gate_eps=cfg.gate_eps,
        seed=cfg.seed)
    batch_rng, noise_rng = seed_streams(cfg.seed)
    n = len(train_set)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    anneal_total = cfg.anneal_steps or steps_per_epoch
    adam = AdamState()
    params = model.params()
    epoch_log: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        sums = {name: 0.0 for name in BREAKDOWN_FIELDS}
        seen = 0
        last_alpha = 0.0
        for idx in batch_iterator(n, cfg.batch_size, batch_rng):
            batch = train_set.take(idx)
            alpha = anneal_alpha(step, anneal_total)
            noise = [] if cfg.variant == "point" else draw_noise(
                noise_rng, len(batch), cfg.dim, cfg.monte_carlo, model.dtype)
            try:
                bd, grads = elbo_step(model, batch, alpha, noise)
            except DomainError as e:
                # every log in the objective takes a sigma, positive by
                # construction; an exact zero means a rho ran off to
                # -inf far enough for float32 softplus to underflow
                raise TrainingDivergedError(step, "sigma_underflow",
                                            math.nan) from e
            _check_finite(bd, step)
            adam_step(params, grads, adam, cfg.learning_rate)
            if on_step is not None:
                on_step(step, bd)
            for name in BREAKDOWN_FIELDS:
                sums[name] += getattr(bd, name) * len(batch)
            seen += len(batch)
            last_alpha = alpha
            step += 1
        entry = {"epoch": epoch}
        entry.update({name: sums[name] / seen for name in BREAKDOWN_FIELDS})
        entry["alpha"] = last_alpha
        if cfg.log_train_auc:
            from . import evaluation
            entry["train_auc"] = evaluation.auc(model.score(train_set),
                                                train_set.labels)
        epoch_log.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
    return TrainResult(model, epoch_log, cfg)
