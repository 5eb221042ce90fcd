"""The full model: variational ID embeddings under a prediction head.

One VelfModel owns every parameter of every variant, created in a fixed
order from a single seeded generator, so two variants built from the
same seed share their initialisation bit for bit.  The ablation variants
then differ only in which terms the training graph wires up:

  full   posterior KL against the attribute prior, plus the prior's own
         KL against N(0, I)
  no_r   posterior KL against the attribute prior only
  fixed  posterior KL against N(0, I); the prior network is never used
  point  deterministic embeddings, no sampling and no KL at all

Serving never samples: seen IDs blend posterior and prior means through
the frequency gate, unseen IDs fall back to the prior mean (zero under
the "fixed" variant, whose prior is the standard normal).
"""

import numpy as np

from . import backbone
from .backbone import DeepFmHead, FieldLayout, MlpHead, predict_ctr
from .data import FieldSchema
from .diffgraph import Graph, Tensor, Var, neg
from .varembed import (
    FrequencyTable, GateConfig, PosteriorTable, PriorNetwork, UnseenIdError,
    gate, kl_diag_nodes, kl_standard_nodes, prior_nodes, sample_nodes,
)

VARIANTS = ("full", "no_r", "fixed", "point")
HEADS = ("deepfm", "mlp")


class VelfModel:
    def __init__(self, schema: FieldSchema, layout: FieldLayout, variant: str,
                 posterior_user: PosteriorTable, posterior_item: PosteriorTable,
                 prior_user: PriorNetwork, prior_item: PriorNetwork,
                 features: dict[str, Tensor], head, head_kind: str,
                 freq_user: FrequencyTable, freq_item: FrequencyTable,
                 gate_cfg: GateConfig, n_layers: int, dtype):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}, expected {VARIANTS}")
        self.schema = schema
        self.layout = layout
        self.variant = variant
        self.posterior_user = posterior_user
        self.posterior_item = posterior_item
        self.prior_user = prior_user
        self.prior_item = prior_item
        self.features = features
        self.head = head
        self.head_kind = head_kind
        self.freq_user = freq_user
        self.freq_item = freq_item
        self.gate_cfg = gate_cfg
        self.n_layers = n_layers
        self.dtype = np.dtype(dtype)
        self.user_attr_names = tuple(
            f.name for f in schema.by_kind("user_attr"))
        self.item_attr_names = tuple(
            f.name for f in schema.by_kind("item_attr"))

    @classmethod
    def create(cls, schema: FieldSchema, freq_user: FrequencyTable,
               freq_item: FrequencyTable, *, variant: str = "full",
               dim: int = 8, hidden: int = 200, n_layers: int = 3,
               head: str = "deepfm", include_attr_fields: bool = True,
               gate_eps: float = 1e-3, dtype=np.float32,
               seed: int = 0) -> "VelfModel":
        """Build all parameters in a fixed draw order from ``seed``."""
        if head not in HEADS:
            raise ValueError(f"unknown head {head!r}, expected {HEADS}")
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}, expected {VARIANTS}")
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        uf, itf = schema.user_id, schema.item_id
        if include_attr_fields:
            layout_names = schema.names()
        else:
            layout_names = (uf.name, itf.name)
        layout = FieldLayout(layout_names, dim=dim)

        post_u = PosteriorTable.initialize(
            uf.size, dim, freq_user.seen_mask(), rng, dtype=dtype, kind="user")
        post_i = PosteriorTable.initialize(
            itf.size, dim, freq_item.seen_mask(), rng, dtype=dtype, kind="item")
        prior_u = PriorNetwork.initialize(
            [f.size for f in schema.by_kind("user_attr")], dim, hidden, rng,
            n_layers=n_layers, dtype=dtype, kind="prior_user")
        prior_i = PriorNetwork.initialize(
            [f.size for f in schema.by_kind("item_attr")], dim, hidden, rng,
            n_layers=n_layers, dtype=dtype, kind="prior_item")
        features = {}
        for name in layout.names:
            if name in (uf.name, itf.name):
                continue
            features[name] = Tensor(
                rng.normal(0.0, 0.01, size=(schema.field(name).size, dim))
                .astype(dtype), requires_grad=True)
        if head == "deepfm":
            head_obj = DeepFmHead.initialize(
                layout, schema.sizes(), hidden, rng, n_layers=n_layers,
                dtype=dtype)
        else:
            head_obj = MlpHead.initialize(
                layout.concat_dim, hidden, rng, n_layers=n_layers, dtype=dtype)
        return cls(schema, layout, variant, post_u, post_i, prior_u, prior_i,
                   features, head_obj, head, freq_user, freq_item,
                   GateConfig(gate_eps), n_layers, dtype)

    # -- parameters ------------------------------------------------------

    def params(self) -> dict[str, Tensor]:
        """All trainable tensors under stable dotted names, fixed order."""
        out = {
            "posterior_user.mu": self.posterior_user.mu,
            "posterior_user.rho": self.posterior_user.rho,
            "posterior_item.mu": self.posterior_item.mu,
            "posterior_item.rho": self.posterior_item.rho,
        }
        for prefix, net in (("prior_user", self.prior_user),
                            ("prior_item", self.prior_item)):
            for k, t in net.parameters().items():
                out[f"{prefix}.{k}"] = t
        for name in self.layout.names:
            if name in self.features:
                out[f"feature.{name}"] = self.features[name]
        for k, t in self.head.parameters().items():
            out[f"head.{k}"] = t
        return out

    def register(self, g: Graph) -> dict[str, Var]:
        return {name: g.leaf(t) for name, t in self.params().items()}

    # -- column plumbing -------------------------------------------------

    def _id_codes(self, insts):
        return (insts.columns[self.schema.user_id.name],
                insts.columns[self.schema.item_id.name])

    def _attr_codes(self, insts, names):
        return [insts.columns[n] for n in names]

    def _check_seen(self, codes: np.ndarray, freq: FrequencyTable):
        mask = freq.seen_mask()
        bad = codes[(codes < 0) | (codes >= mask.size) | ~mask[
            np.clip(codes, 0, mask.size - 1)]]
        if bad.size:
            raise UnseenIdError(freq.kind, int(bad[0]))

    # -- training graph --------------------------------------------------

    def build_elbo(self, g: Graph, leaves: dict[str, Var], insts, alpha: float,
                   noise: list[tuple[np.ndarray, np.ndarray]]):
        """Wire one batch's negative-ELBO onto the tape.

        Returns (components, total) where components maps the breakdown
        names to scalar Vars (only the terms this variant uses) and
        total is the scalar to differentiate: mean logistic loss plus
        alpha times the sum of the KL means.
        """
        uid, iid = self._id_codes(insts)
        self._check_seen(uid, self.freq_user)
        self._check_seen(iid, self.freq_item)
        m = len(insts)
        dt = self.dtype
        point = self.variant == "point"

        muq_u = g.gather_rows(leaves["posterior_user.mu"], uid)
        muq_i = g.gather_rows(leaves["posterior_item.mu"], iid)
        if not point:
            sq_u = g.softplus(g.gather_rows(leaves["posterior_user.rho"], uid))
            sq_i = g.softplus(g.gather_rows(leaves["posterior_item.rho"], iid))
        if self.variant in ("full", "no_r"):
            mu_pu, sig_pu = prior_nodes(
                g, leaves, "prior_user", len(self.user_attr_names),
                self.n_layers, self._attr_codes(insts, self.user_attr_names))
            mu_pi, sig_pi = prior_nodes(
                g, leaves, "prior_item", len(self.item_attr_names),
                self.n_layers, self._attr_codes(insts, self.item_attr_names))

        if point:
            z_samples = [(muq_u, muq_i)]
        else:
            z_samples = [(sample_nodes(g, muq_u, sq_u, nu),
                          sample_nodes(g, muq_i, sq_i, ni))
                         for nu, ni in noise]
            if not z_samples:
                raise ValueError("build_elbo: at least one noise draw required")

        # per-field blocks shared across samples except the two ID slots
        uf, itf = self.schema.user_id.name, self.schema.item_id.name
        shared = {}
        for name in self.layout.names:
            if name in (uf, itf):
                continue
            shared[name] = g.gather_rows(leaves[f"feature.{name}"],
                                         insts.columns[name])
        layout_codes = [insts.columns[n] for n in self.layout.names]

        y = insts.labels.astype(dt).reshape(m, 1)
        y_const = g.const(y)
        one_minus_y = g.const(1.0 - y)

        loss_rows = []
        for z_u, z_i in z_samples:
            blocks = [z_u if n == uf else z_i if n == itf else shared[n]
                      for n in self.layout.names]
            if self.head_kind == "deepfm":
                t = backbone.deepfm_logit_nodes(
                    g, leaves, "head", self.n_layers, blocks, layout_codes,
                    self.layout)
            else:
                t = backbone.mlp_logit_nodes(
                    g, leaves, "head", self.n_layers, g.concat(blocks))
            # y softplus(-t) + (1 - y) softplus(t): the logit-space
            # logistic loss, finite for any t
            loss_rows.append(g.add(g.mul(y_const, g.softplus(neg(g, t))),
                                   g.mul(one_minus_y, g.softplus(t))))
        row = loss_rows[0]
        for r in loss_rows[1:]:
            row = g.add(row, r)
        if len(loss_rows) > 1:
            row = g.mul(row, g.const(1.0 / len(loss_rows), shape=(m, 1),
                                     dtype=dt))
        components = {"log_loss": g.reduce_mean(row)}

        if self.variant == "full":
            components["kl_user_post"] = g.reduce_mean(
                kl_diag_nodes(g, muq_u, sq_u, mu_pu, sig_pu))
            components["kl_item_post"] = g.reduce_mean(
                kl_diag_nodes(g, muq_i, sq_i, mu_pi, sig_pi))
            components["kl_user_prior_reg"] = g.reduce_mean(
                kl_standard_nodes(g, mu_pu, sig_pu))
            components["kl_item_prior_reg"] = g.reduce_mean(
                kl_standard_nodes(g, mu_pi, sig_pi))
        elif self.variant == "no_r":
            components["kl_user_post"] = g.reduce_mean(
                kl_diag_nodes(g, muq_u, sq_u, mu_pu, sig_pu))
            components["kl_item_post"] = g.reduce_mean(
                kl_diag_nodes(g, muq_i, sq_i, mu_pi, sig_pi))
        elif self.variant == "fixed":
            components["kl_user_post"] = g.reduce_mean(
                kl_standard_nodes(g, muq_u, sq_u))
            components["kl_item_post"] = g.reduce_mean(
                kl_standard_nodes(g, muq_i, sq_i))

        kl_terms = [v for k, v in components.items() if k != "log_loss"]
        total = components["log_loss"]
        if kl_terms:
            kl_sum = kl_terms[0]
            for t in kl_terms[1:]:
                kl_sum = g.add(kl_sum, t)
            total = g.add(total, g.mul(kl_sum, g.const(alpha, dtype=dt)))
        return components, total

    # -- deterministic inference -----------------------------------------

    def _infer_side(self, codes: np.ndarray, attr_codes,
                    post: PosteriorTable, net: PriorNetwork,
                    freq: FrequencyTable) -> np.ndarray:
        if self.variant == "fixed":
            mu_p = np.zeros((codes.size, post.dim), dtype=self.dtype)
        else:
            mu_p, _ = net.params_batch(attr_codes)
        in_range = (codes >= 0) & (codes < post.n_ids)
        if not np.all(in_range):
            raise UnseenIdError(freq.kind, int(codes[~in_range][0]))
        seen = post.seen[codes]
        mu_q = post.mu.data[codes]
        if self.variant == "point":
            w = seen.astype(self.dtype)
        else:
            g = gate(freq.counts[codes], self.gate_cfg).astype(self.dtype)
            w = np.where(seen, g, self.dtype.type(0))
        w = w[:, None]
        return w * mu_q + (1 - w) * mu_p

    def score(self, insts) -> np.ndarray:
        """Clamped click probabilities through the serving path; no
        sampling anywhere."""
        uid, iid = self._id_codes(insts)
        z_u = self._infer_side(uid, self._attr_codes(insts, self.user_attr_names),
                               self.posterior_user, self.prior_user,
                               self.freq_user)
        z_i = self._infer_side(iid, self._attr_codes(insts, self.item_attr_names),
                               self.posterior_item, self.prior_item,
                               self.freq_item)
        uf, itf = self.schema.user_id.name, self.schema.item_id.name
        blocks = {}
        for name in self.layout.names:
            if name == uf:
                blocks[name] = z_u
            elif name == itf:
                blocks[name] = z_i
            else:
                codes = insts.columns[name]
                field = self.schema.field(name)
                if codes.size and (codes.min() < 0 or codes.max() >= field.size):
                    raise ValueError(
                        f"score: {name} code out of range for vocab of "
                        f"{field.size}")
                blocks[name] = self.features[name].data[codes]
        codes = {name: insts.columns[name] for name in self.layout.names}
        return predict_ctr(self.head, blocks, codes, self.layout)
