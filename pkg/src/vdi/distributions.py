"""Diagonal Gaussian and categorical primitives on autodiff tensors.

All functions reduce over the last axis, so a ``(D,)`` input gives a scalar
and an ``(n, D)`` batch gives ``(n,)`` per-row values.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOG_SIGMA_MIN = -5.0
LOG_SIGMA_MAX = 3.0
HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


@dataclass
class DiagGaussian:
    mu: Tensor
    log_sigma: Tensor

    def __post_init__(self):
        self.mu = ad.as_tensor(self.mu)
        self.log_sigma = ad.as_tensor(self.log_sigma)
        if self.mu.shape != self.log_sigma.shape:
            try:
                np.broadcast_shapes(self.mu.shape, self.log_sigma.shape)
            except ValueError:
                raise ad.ShapeError(
                    f"DiagGaussian: mu {self.mu.shape} vs log_sigma {self.log_sigma.shape}"
                ) from None

    @classmethod
    def from_sigma(cls, mu, sigma) -> DiagGaussian:
        sigma = np.asarray(sigma, dtype=np.float64)
        if np.any(sigma <= 0):
            raise ValueError("sigma must be strictly positive")
        return cls(ad.as_tensor(mu), Tensor(np.log(sigma)))

    @classmethod
    def from_head(cls, out: Tensor, dim: int) -> DiagGaussian:
        """Split a network output ``[mu | raw log sigma]`` and clamp log sigma."""
        if out.shape[-1] != 2 * dim:
            raise ad.ShapeError(f"head width {out.shape[-1]} != 2*{dim}")
        mu = out[..., :dim]
        log_sigma = ad.clip(out[..., dim:], LOG_SIGMA_MIN, LOG_SIGMA_MAX)
        return cls(mu, log_sigma)

    @property
    def sigma(self) -> Tensor:
        return ad.exp(self.log_sigma)

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]


@dataclass
class Categorical:
    logits: Tensor

    def __post_init__(self):
        self.logits = ad.as_tensor(self.logits)


def sample_reparam(d: DiagGaussian, noise) -> Tensor:
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape[-1] != d.dim:
        raise ad.ShapeError(f"sample_reparam: noise {noise.shape} vs dim {d.dim}")
    return ad.add(d.mu, ad.mul(d.sigma, noise))


def log_prob_gaussian(d: DiagGaussian, x) -> Tensor:
    x = ad.as_tensor(x)
    if x.shape[-1] != d.dim:
        raise ad.ShapeError(f"log_prob_gaussian: x {x.shape} vs dim {d.dim}")
    z = ad.mul(ad.sub(x, d.mu), ad.exp(ad.scale(d.log_sigma, -1.0)))
    per_dim = ad.add(ad.scale(ad.square(z), -0.5), ad.scale(d.log_sigma, -1.0))
    return ad.add(ad.sum(per_dim, axis=-1), -HALF_LOG_2PI * d.dim)


def kl_gaussian(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """KL(q || p), closed form, summed over dimensions."""
    if q.dim != p.dim:
        raise ad.ShapeError(f"kl_gaussian: dims {q.dim} vs {p.dim}")
    inv_var_p = ad.exp(ad.scale(p.log_sigma, -2.0))
    var_q = ad.exp(ad.scale(q.log_sigma, 2.0))
    diff2 = ad.square(ad.sub(q.mu, p.mu))
    per_dim = ad.add(
        ad.sub(p.log_sigma, q.log_sigma),
        ad.scale(ad.mul(ad.add(var_q, diff2), inv_var_p), 0.5),
    )
    return ad.add(ad.sum(per_dim, axis=-1), -0.5 * q.dim)


def entropy_gaussian(d: DiagGaussian) -> Tensor:
    const = 0.5 * math.log(2 * math.pi * math.e)
    ls = ad.add(d.log_sigma, np.zeros(d.mu.shape)) if d.log_sigma.shape != d.mu.shape else d.log_sigma
    return ad.add(ad.sum(ls, axis=-1), const * d.dim)


def log_prob_categorical(d: Categorical, cls) -> Tensor:
    """log softmax(logits)[cls]; ``cls`` is an int or an int array of row labels."""
    n_classes = d.logits.shape[-1]
    cls_arr = np.asarray(cls)
    if not np.issubdtype(cls_arr.dtype, np.integer):
        raise TypeError("class labels must be integers")
    if np.any(cls_arr < 0) or np.any(cls_arr >= n_classes):
        raise ValueError(f"class label out of range [0, {n_classes})")
    lsm = ad.log_softmax(d.logits, axis=-1)
    if d.logits.data.ndim == 1:
        return lsm[int(cls_arr)]
    return lsm[(np.arange(d.logits.shape[0]), cls_arr)]
