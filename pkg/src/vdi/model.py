"""Variational domain indexing: generative and inference heads, the global
index pipeline (group -> EMD -> MDS -> Gaussian head), ELBO terms, the
domain discriminator and the contrastive loss on local indices.

Gradients never flow through the EMD/MDS stage: raw global indices are plain
arrays, and only the Gaussian head on top of them is differentiable.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .distributions import (
    Categorical,
    DiagGaussian,
    entropy_gaussian,
    kl_gaussian,
    log_prob_categorical,
    log_prob_gaussian,
    sample_reparam,
)
from .mds import Embedding, classical_mds, procrustes_align
from .nn import Mlp, gradient_reversal
from .transport import pairwise_emd

log = logging.getLogger(__name__)


@dataclass
class VdiConfig:
    x_dim: int
    n_domains: int
    task: str = "classification"     # or "regression"
    n_classes: int = 2
    y_dim: int = 1
    u_dim: int = 4
    beta_dim: int = 2
    z_dim: int = 8
    hidden: tuple[int, ...] = (64, 64)
    lambda_d: float = 0.5
    mu_alpha: float = 0.0
    sigma_alpha: float = 1.0
    tau: float = 1.0
    contrastive_weight: float = 1.0
    sigma_x: float = 0.1
    sigma_u: float = 0.1
    sigma_y: float = 1.0
    proj_dim: int = 16
    index_momentum: float = 0.9      # EMA of aligned raw indices kept as the alignment reference
    init_log_sigma: float = -2.0     # initial log-std output of the Gaussian heads

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if self.task not in ("classification", "regression"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.beta_dim >= self.n_domains:
            raise ValueError("beta_dim must be smaller than the number of domains")
        if self.lambda_d < 0 or self.tau <= 0:
            raise ValueError("lambda_d must be >= 0 and tau > 0")
        if self.u_dim > self.x_dim or self.beta_dim > self.x_dim:
            log.warning("index dims (u=%d, beta=%d) exceed x_dim=%d", self.u_dim, self.beta_dim, self.x_dim)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class DomainBatch:
    x: np.ndarray              # (b*N, B_x), rows grouped domain-major
    k: np.ndarray              # (b*N,)
    y: np.ndarray | None       # labels/targets aligned with x; ignored where not source
    source_mask: np.ndarray    # (b*N,) bool
    per_domain: int            # b

    def __post_init__(self):
        if self.source_mask.any() and self.y is None:
            raise ValueError("labels missing for source rows")


@dataclass
class IndexState:
    U: list[np.ndarray]
    S: np.ndarray
    embedding: Embedding
    beta_raw: np.ndarray
    beta_dist: DiagGaussian
    beta_sample: Tensor


@dataclass
class Latents:
    q_u: DiagGaussian
    u: Tensor
    index: IndexState
    beta_rows: Tensor
    q_z: DiagGaussian
    z: Tensor


@dataclass
class LossBreakdown:
    rec_x: float = 0.0
    pred_y: float = 0.0
    rec_u: float = 0.0
    reg: float = 0.0
    elbo: float = 0.0
    disc: float = 0.0
    contrastive: float = 0.0
    total: float = 0.0
    extras: dict = field(default_factory=dict)


class VdiModel:
    """Parameters plus the forward computations of the model."""

    def __init__(self, config: VdiConfig, rng: np.random.Generator | None = None):
        self.config = c = config
        rng = np.random.default_rng(0) if rng is None else rng
        h = list(c.hidden)
        zin = c.x_dim + c.u_dim + c.beta_dim
        y_out = c.n_classes if c.task == "classification" else c.y_dim
        self.nets: dict[str, Mlp] = {
            # inference (phi)
            "q_u": Mlp([c.x_dim, *h, 2 * c.u_dim], rng, name="q_u"),
            "q_beta": Mlp([c.beta_dim, *h, 2 * c.beta_dim], rng, name="q_beta"),
            "q_z": Mlp([zin, *h, 2 * c.z_dim], rng, name="q_z"),
            # generative (theta)
            "p_u": Mlp([c.beta_dim, *h, c.u_dim], rng, name="p_u"),
            "p_x": Mlp([c.u_dim, *h, c.x_dim], rng, name="p_x"),
            "p_z": Mlp([zin, *h, 2 * c.z_dim], rng, name="p_z"),
            "p_y": Mlp([c.z_dim, *h, y_out], rng, name="p_y"),
            # adversary and contrastive projection
            "disc": Mlp([c.z_dim, *h, c.n_domains], rng, name="disc"),
            "proj": Mlp([c.u_dim, *h, c.proj_dim], rng, name="proj"),
        }
        # start the Gaussian heads narrow; at sigma ~ 1 q(z) and p(z) collapse onto each other
        for name, dim in (("q_u", c.u_dim), ("q_beta", c.beta_dim), ("q_z", c.z_dim), ("p_z", c.z_dim)):
            self.nets[name].layers[-1][1].data[dim:] = c.init_log_sigma
        self.index_reference: np.ndarray | None = None

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return [p for net in self.nets.values() for p in net.parameters()]

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.parameters()}

    def discriminator_parameters(self) -> list[Tensor]:
        return self.nets["disc"].parameters()

    # -- inference ------------------------------------------------------------

    def infer_local(self, x, noise=None) -> tuple[DiagGaussian, Tensor]:
        x = ad.as_tensor(x)
        if x.data.ndim != 2 or x.shape[1] != self.config.x_dim:
            raise ad.ShapeError(f"infer_local: x must be (n, {self.config.x_dim}), got {x.shape}")
        q = DiagGaussian.from_head(self.nets["q_u"](x), self.config.u_dim)
        if noise is None:
            noise = np.zeros(q.mu.shape)
        return q, sample_reparam(q, noise)

    def raw_indices(self, U: list[np.ndarray], reference: np.ndarray | None = None):
        """Steps 1-3 of the global index pipeline (no gradients)."""
        S = pairwise_emd(U)
        emb = classical_mds(S, self.config.beta_dim)
        raw = emb.coords
        if reference is not None:
            raw = procrustes_align(raw, reference)
        return S, emb, raw

    def infer_global(self, U: list[np.ndarray], noise=None, reference="model") -> IndexState:
        """Group -> pairwise EMD -> classical MDS -> Gaussian head -> one sample per domain.

        ``reference`` is an array to Procrustes-align the raw indices to, None
        for no alignment, or "model" for the running reference kept on the model.
        """
        n = self.config.n_domains
        if len(U) != n:
            raise ValueError(f"infer_global: expected {n} local index sets, got {len(U)}")
        for k, Uk in enumerate(U):
            if Uk is None or len(Uk) == 0:
                raise ValueError(f"infer_global: domain {k} has no local indices")
        U = [np.asarray(Uk, dtype=np.float64) for Uk in U]
        if isinstance(reference, str):
            reference = self.index_reference
        S, emb, raw = self.raw_indices(U, reference)
        q = DiagGaussian.from_head(self.nets["q_beta"](Tensor(raw)), self.config.beta_dim)
        if noise is None:
            noise = np.zeros(q.mu.shape)
        return IndexState(U, S, emb, raw, q, sample_reparam(q, noise))

    def update_reference(self, raw: np.ndarray) -> None:
        m = self.config.index_momentum
        if self.index_reference is None:
            self.index_reference = raw.copy()
        else:
            self.index_reference = m * self.index_reference + (1 - m) * raw

    def infer_encoding(self, x, u, beta_rows, noise=None) -> tuple[DiagGaussian, Tensor]:
        inp = ad.concat([ad.as_tensor(x), ad.as_tensor(u), ad.as_tensor(beta_rows)], axis=1)
        if inp.shape[1] != self.nets["q_z"].in_dim:
            raise ad.ShapeError(f"infer_encoding: input width {inp.shape[1]} != {self.nets['q_z'].in_dim}")
        q = DiagGaussian.from_head(self.nets["q_z"](inp), self.config.z_dim)
        if noise is None:
            noise = np.zeros(q.mu.shape)
        return q, sample_reparam(q, noise)

    def prior_z(self, x, u, beta_rows) -> DiagGaussian:
        inp = ad.concat([ad.as_tensor(x), ad.as_tensor(u), ad.as_tensor(beta_rows)], axis=1)
        return DiagGaussian.from_head(self.nets["p_z"](inp), self.config.z_dim)

    def encode(self, batch: DomainBatch, rng: np.random.Generator | None, reference="model") -> Latents:
        """Run all inference heads on a batch; ``rng=None`` means zero noise."""
        c = self.config
        n_rows = len(batch.x)

        def noise(shape):
            return np.zeros(shape) if rng is None else rng.standard_normal(shape)

        q_u, u = self.infer_local(batch.x, noise((n_rows, c.u_dim)))
        U = [u.data[batch.k == kk] for kk in range(c.n_domains)]
        index = self.infer_global(U, noise((c.n_domains, c.beta_dim)), reference=reference)
        beta_rows = ad.take_rows(index.beta_sample, batch.k)
        q_z, z = self.infer_encoding(batch.x, u, beta_rows, noise((n_rows, c.z_dim)))
        return Latents(q_u, u, index, beta_rows, q_z, z)

    # -- objective ------------------------------------------------------------

    def predictor(self, z) -> Tensor:
        return self.nets["p_y"](z)

    def label_log_lik(self, z: Tensor, y, mask: np.ndarray) -> Tensor:
        """Mean log p(y|z) over rows where ``mask`` is set."""
        rows = np.flatnonzero(mask)
        if rows.size == 0:
            return Tensor(0.0)
        out = self.predictor(ad.take_rows(z, rows))
        if self.config.task == "classification":
            ll = log_prob_categorical(Categorical(out), np.asarray(y)[rows].astype(np.int64))
        else:
            yr = np.asarray(y, dtype=np.float64)[rows]
            yr = yr.reshape(len(rows), -1)
            ll = log_prob_gaussian(DiagGaussian(out, np.full(yr.shape[1], np.log(self.config.sigma_y))), yr)
        return ad.mean(ll)

    def elbo_terms(self, batch: DomainBatch, lat: Latents) -> dict[str, Tensor]:
        c = self.config
        if batch.source_mask.any() and batch.y is None:
            raise ValueError("elbo_terms: labels missing on source rows")
        log_sx = np.full(c.x_dim, np.log(c.sigma_x))
        log_su = np.full(c.u_dim, np.log(c.sigma_u))
        rec_x = ad.mean(log_prob_gaussian(DiagGaussian(self.nets["p_x"](lat.u), log_sx), batch.x))
        pred_y = self.label_log_lik(lat.z, batch.y, batch.source_mask)
        rec_u = ad.mean(log_prob_gaussian(DiagGaussian(self.nets["p_u"](lat.beta_rows), log_su), lat.u))
        prior_beta = DiagGaussian(np.full(c.beta_dim, c.mu_alpha), np.full(c.beta_dim, np.log(c.sigma_alpha)))
        kl_beta = ad.mean(kl_gaussian(lat.index.beta_dist, prior_beta))
        p_z = self.prior_z(batch.x, lat.u, lat.beta_rows)
        kl_z = ad.mean(kl_gaussian(lat.q_z, p_z))
        ent_u = ad.mean(entropy_gaussian(lat.q_u))
        reg = ad.add(ad.sub(ent_u, kl_beta), ad.scale(kl_z, -1.0))
        total = ad.add(ad.add(rec_x, pred_y), ad.add(rec_u, reg))
        return {"rec_x": rec_x, "pred_y": pred_y, "rec_u": rec_u, "reg": reg, "total": total,
                "kl_beta": kl_beta, "kl_z": kl_z, "entropy_u": ent_u}

    def discriminator_loss(self, z, k) -> Tensor:
        """Mean log D(k|z): log-likelihood of the true domain identity."""
        k = np.asarray(k)
        if np.any(k < 0) or np.any(k >= self.config.n_domains):
            raise ValueError("discriminator_loss: domain identity out of range")
        return ad.mean(log_prob_categorical(Categorical(self.nets["disc"](z)), k.astype(np.int64)))

    def contrastive_loss(self, u, k, per_domain: int) -> Tensor:
        """Mean over rows of the cross-domain contrastive loss on projected local indices.

        Row i of domain k is paired with row (i + 1) mod b of the same domain;
        the denominator runs over rows of every other domain.
        """
        return contrastive_loss(self.nets["proj"](u), k, per_domain, self.config.tau)

    def total_loss(self, batch: DomainBatch, rng: np.random.Generator | None,
                   adversarial: bool = True, source_only: bool = False,
                   lat: Latents | None = None) -> tuple[Tensor, LossBreakdown, Latents]:
        """Scalar to minimise: -ELBO + lambda_d * CE(D(grl(z))) + w * contrastive.

        The gradient-reversal layer makes the discriminator minimise its
        cross-entropy while the encoder maximises it. ``source_only`` keeps the
        label term alone (baseline).
        """
        c = self.config
        if lat is None:
            lat = self.encode(batch, rng)
        if source_only:
            pred = self.label_log_lik(lat.z, batch.y, batch.source_mask)
            loss = ad.scale(pred, -1.0)
            return loss, LossBreakdown(pred_y=pred.item(), total=loss.item()), lat
        terms = self.elbo_terms(batch, lat)
        loss = ad.scale(terms["total"], -1.0)
        disc = 0.0
        if adversarial and c.lambda_d > 0:
            ll = self.discriminator_loss(gradient_reversal(lat.z, 1.0), batch.k)
            loss = ad.add(loss, ad.scale(ll, -c.lambda_d))
            disc = ll.item()
        con = 0.0
        if c.contrastive_weight > 0:
            cl = self.contrastive_loss(lat.u, batch.k, batch.per_domain)
            loss = ad.add(loss, ad.scale(cl, c.contrastive_weight))
            con = cl.item()
        br = LossBreakdown(
            rec_x=terms["rec_x"].item(), pred_y=terms["pred_y"].item(), rec_u=terms["rec_u"].item(),
            reg=terms["reg"].item(), elbo=terms["total"].item(), disc=disc, contrastive=con,
            total=loss.item(),
            extras={"kl_beta": terms["kl_beta"].item(), "kl_z": terms["kl_z"].item(),
                    "entropy_u": terms["entropy_u"].item()},
        )
        return loss, br, lat

    # -- evaluation helpers ------------------------------------------------------

    def beta_table(self, raw: np.ndarray | None = None) -> np.ndarray:
        """Posterior means of the global indices for given (or reference) raw indices."""
        raw = self.index_reference if raw is None else raw
        if raw is None:
            raise ValueError("no raw global indices available; train the model first")
        return DiagGaussian.from_head(self.nets["q_beta"](Tensor(raw)), self.config.beta_dim).mu.data.copy()

    def encode_mean(self, x: np.ndarray, k: np.ndarray, beta: np.ndarray) -> np.ndarray:
        """z = mu_z(x, mu_u(x), beta_k) with no sampling."""
        q_u, u = self.infer_local(x)
        q_z, _ = self.infer_encoding(x, q_u.mu, beta[k])
        return q_z.mu.data

    def encode_sample(self, x: np.ndarray, k: np.ndarray, beta: np.ndarray,
                      rng: np.random.Generator) -> np.ndarray:
        """One draw u ~ q(u|x), then z ~ q(z|x, u, beta_k), as seen by the discriminator."""
        c = self.config
        _, u = self.infer_local(x, rng.standard_normal((len(x), c.u_dim)))
        _, z = self.infer_encoding(x, u, beta[k], rng.standard_normal((len(x), c.z_dim)))
        return z.data

    def predict(self, x: np.ndarray, k: np.ndarray, beta: np.ndarray) -> np.ndarray:
        out = self.predictor(Tensor(self.encode_mean(x, k, beta))).data
        if self.config.task == "classification":
            return out.argmax(axis=1)
        return out


def contrastive_loss(h, k, per_domain: int, tau: float = 1.0) -> Tensor:
    h = ad.as_tensor(h)
    k = np.asarray(k)
    n = len(k)
    b = per_domain
    if b < 2:
        raise ValueError("contrastive_loss needs at least 2 rows per domain")
    if n % b:
        raise ValueError("rows must be grouped as b rows per domain")
    norms = ad.sqrt(ad.add(ad.sum(ad.square(h), axis=1), 1e-24))
    hn = ad.div(h, ad.slice_(norms, (slice(None), None)))
    pos_idx = np.arange(n) - np.arange(n) % b + (np.arange(n) % b + 1) % b
    pos = ad.sum(ad.mul(hn, ad.take_rows(hn, pos_idx)), axis=1)
    sim = ad.scale(ad.matmul(hn, ad.transpose(hn)), 1.0 / tau)
    other = k[:, None] != k[None, :]
    # same-domain columns get -inf, so they drop out of the denominator exactly
    masked = ad.add(sim, np.where(other, 0.0, -np.inf))
    denom = ad.logsumexp(masked, axis=1)
    return ad.mean(ad.sub(denom, ad.scale(pos, 1.0 / tau)))
