"""Diagonal Gaussians with reparameterized sampling.

Everything differentiable flows through autodiff Tensors; log_prob and
kl_diag return scalar tensors so they can sit inside a loss graph.
log variances are clamped to [-LOG_VAR_LIMIT, LOG_VAR_LIMIT] on entry
and a module-level counter records how often clamping fired, which is
cheap early warning for collapsing or exploding posteriors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError, UsageError

LOG_VAR_LIMIT = 20.0

_LOG_2PI = math.log(2.0 * math.pi)


class ClampCounter:
    """Counts elements hit by the log-variance clamp since last reset."""

    def __init__(self):
        self.events = 0

    def reset(self) -> None:
        self.events = 0


clamp_diagnostics = ClampCounter()


@dataclass
class DiagGaussian:
    """Mean and log-variance vectors of a factorized Gaussian."""

    mean: Tensor
    log_var: Tensor

    def __post_init__(self):
        if self.mean.data.ndim != 1 or self.log_var.data.ndim != 1:
            raise ShapeError("DiagGaussian expects vector mean and log_var")
        if self.mean.shape != self.log_var.shape:
            raise ShapeError(f"DiagGaussian: mean {self.mean.shape} and "
                             f"log_var {self.log_var.shape} differ")

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass
class LatentSample:
    """A reparameterized draw: value = mean + exp(log_var / 2) * eps."""

    value: Tensor
    log_q0: float
    source_eps: np.ndarray = field(repr=False)


def make_gaussian(mean: Tensor, log_var: Tensor) -> DiagGaussian:
    """Build a DiagGaussian, clamping log_var into the stable range."""
    outside = int(np.count_nonzero(np.abs(log_var.data) > LOG_VAR_LIMIT))
    if outside:
        clamp_diagnostics.events += outside
        log_var = ad.clamp(log_var, -LOG_VAR_LIMIT, LOG_VAR_LIMIT)
    return DiagGaussian(mean=mean, log_var=log_var)


def sample_reparam(dist: DiagGaussian, eps: np.ndarray) -> LatentSample:
    """Draw via the reparameterization trick with externally supplied eps."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != (dist.dim,):
        raise ShapeError(f"eps shape {eps.shape} != ({dist.dim},)")
    std = ad.exp(ad.mul(dist.log_var, ad.Tensor(np.array(0.5))))
    value = ad.add(dist.mean, ad.mul(std, Tensor(eps)))
    return LatentSample(value=value, log_q0=log_prob(dist, value).item(),
                        source_eps=eps.copy())


def log_prob(dist: DiagGaussian, z) -> Tensor:
    """Log density of the factorized Gaussian at z, as a scalar tensor.

    z may be a Tensor (stays in the graph) or a plain array.
    """
    zt = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float64))
    if zt.data.shape != (dist.dim,):
        raise ShapeError(f"log_prob: z shape {zt.data.shape} != ({dist.dim},)")
    diff = ad.sub(zt, dist.mean)
    inv_var = ad.exp(ad.neg(dist.log_var))
    quad = ad.mul(ad.mul(diff, diff), inv_var)
    per_dim = ad.mul(ad.add(ad.add(quad, dist.log_var),
                            Tensor(np.full(dist.dim, _LOG_2PI))),
                     Tensor(np.array(-0.5)))
    return ad.sum_all(per_dim)


def kl_diag(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """Closed-form KL(q || p) between two factorized Gaussians."""
    if q.dim != p.dim:
        raise ShapeError(f"kl_diag: dimensions differ, {q.dim} vs {p.dim}")
    var_ratio = ad.exp(ad.sub(q.log_var, p.log_var))
    diff = ad.sub(q.mean, p.mean)
    scaled_sq = ad.mul(ad.mul(diff, diff), ad.exp(ad.neg(p.log_var)))
    ones = Tensor(np.ones(q.dim))
    per_dim = ad.sub(ad.add(var_ratio, scaled_sq),
                     ad.add(ones, ad.sub(q.log_var, p.log_var)))
    return ad.mul(ad.sum_all(per_dim), Tensor(np.array(0.5)))


def standard_gaussian(dim: int) -> DiagGaussian:
    """N(0, I) as a DiagGaussian with constant parameters."""
    if dim < 1:
        raise UsageError(f"dimension must be >= 1, got {dim}")
    return DiagGaussian(mean=Tensor(np.zeros(dim)), log_var=Tensor(np.zeros(dim)))
