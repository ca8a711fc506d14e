"""Invertible latent transforms: planar and radial steps and their chains.

Each step maps z -> z' and reports log|det(dz'/dz)| as a scalar tensor,
so a chain's summed log determinant can enter a loss graph. Raw
parameters are unconstrained; invertibility constraints are applied
inside apply() on every call.

numeric_logdet_oracle estimates the same log determinant from a
finite-difference Jacobian, as an independent cross-check.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError, UsageError

# softplus(x) = 1 at this x, so constrained scales start at exact identity
_SOFTPLUS_INV_1 = math.log(math.e - 1.0)


def constrain_planar_u(u: Tensor, w: Tensor) -> Tensor:
    """Project u so that u_hat . w >= -1, keeping z -> z' invertible.

    u_hat = u + (-1 + softplus(w.u) - w.u) * w / |w|^2; if w is exactly
    zero the constraint is vacuous and u passes through.
    """
    if u.shape != w.shape:
        raise ShapeError(f"planar u {u.shape} and w {w.shape} differ")
    wnorm_sq = ad.dot(w, w)
    if float(wnorm_sq.data) == 0.0:
        return u
    wu = ad.dot(w, u)
    shift = ad.sub(ad.sub(ad.softplus(wu), Tensor(np.array(1.0))), wu)
    return ad.add(u, ad.mul(ad.div(shift, wnorm_sq), w))


def planar_transform(u_hat: Tensor, w: Tensor, b: Tensor,
                     z: Tensor) -> tuple[Tensor, Tensor]:
    """Apply z' = z + u_hat * tanh(w.z + b); u_hat must be pre-constrained.

    Returns (z', log|det|) with log|det| = log|1 + (1 - tanh^2) u_hat.w|.
    """
    inner = ad.add(ad.dot(w, z), ad.sum_all(b))
    t = ad.tanh(inner)
    z_new = ad.add(z, ad.mul(u_hat, t))
    one = Tensor(np.array(1.0))
    dtanh = ad.sub(one, ad.mul(t, t))
    det_term = ad.add(one, ad.mul(dtanh, ad.dot(u_hat, w)))
    return z_new, ad.log(ad.absolute(det_term))


class PlanarStep:
    """Learnable planar transform holding raw (u, w, b)."""

    kind = "planar"

    def __init__(self, u: Tensor, w: Tensor, b: Tensor):
        self.u = u
        self.w = w
        self.b = b

    @classmethod
    def init_random(cls, dim: int, rng: np.random.Generator) -> "PlanarStep":
        # small raw parameters keep the starting map close to identity
        return cls(u=Tensor(rng.normal(0.0, 0.1, size=dim), requires_grad=True),
                   w=Tensor(rng.normal(0.0, 0.1, size=dim), requires_grad=True),
                   b=Tensor(np.zeros(1), requires_grad=True))

    def apply(self, z: Tensor) -> tuple[Tensor, Tensor]:
        u_hat = constrain_planar_u(self.u, self.w)
        return planar_transform(u_hat, self.w, self.b, z)

    def params(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [(f"{prefix}.u", self.u), (f"{prefix}.w", self.w),
                (f"{prefix}.b", self.b)]


class RadialStep:
    """Learnable radial transform around a reference point.

    alpha = softplus(alpha_raw) > 0 and beta_hat = -alpha +
    softplus(beta_raw) >= -alpha together guarantee invertibility.
    """

    kind = "radial"

    def __init__(self, ref: Tensor, alpha_raw: Tensor, beta_raw: Tensor):
        self.ref = ref
        self.alpha_raw = alpha_raw
        self.beta_raw = beta_raw

    @classmethod
    def init_random(cls, dim: int, rng: np.random.Generator) -> "RadialStep":
        # softplus(raw) = 1 => alpha = 1, beta_hat = 0: an exact identity start
        return cls(ref=Tensor(rng.normal(0.0, 0.1, size=dim), requires_grad=True),
                   alpha_raw=Tensor(np.full(1, _SOFTPLUS_INV_1), requires_grad=True),
                   beta_raw=Tensor(np.full(1, _SOFTPLUS_INV_1), requires_grad=True))

    def apply(self, z: Tensor) -> tuple[Tensor, Tensor]:
        if z.shape != self.ref.shape:
            raise ShapeError(f"radial ref {self.ref.shape} and z {z.shape} differ")
        dim = z.size
        one = Tensor(np.array(1.0))
        alpha = ad.softplus(self.alpha_raw)
        beta_hat = ad.sub(ad.softplus(self.beta_raw), alpha)
        dz = ad.sub(z, self.ref)
        r = ad.sqrt(ad.dot(dz, dz))
        h = ad.div(one, ad.add(ad.sum_all(alpha), r))
        bh = ad.mul(ad.sum_all(beta_hat), h)
        z_new = ad.add(z, ad.mul(dz, bh))
        # log|det| = (L-1) log(1 + bh) + log(1 + bh - beta_hat r h^2)
        tail = ad.sub(ad.add(one, bh),
                      ad.mul(ad.mul(ad.sum_all(beta_hat), r), ad.mul(h, h)))
        logdet = ad.add(ad.mul(Tensor(np.array(float(dim - 1))), ad.log(ad.add(one, bh))),
                        ad.log(tail))
        return z_new, logdet

    def params(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [(f"{prefix}.ref", self.ref), (f"{prefix}.alpha_raw", self.alpha_raw),
                (f"{prefix}.beta_raw", self.beta_raw)]


class FlowChain:
    """A fixed-length composition of planar or radial steps."""

    def __init__(self, steps: list, kind: str):
        if kind not in ("planar", "radial", "none"):
            raise UsageError(f"unknown flow kind {kind!r}")
        if kind == "none" and steps:
            raise UsageError("kind 'none' cannot carry steps")
        self.steps = list(steps)
        self.kind = kind

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    def apply(self, z0: Tensor) -> tuple[Tensor, Tensor]:
        """Run z0 through every step; returns (z_K, summed log|det|)."""
        z = z0
        total = Tensor(np.array(0.0))
        for step in self.steps:
            z, logdet = step.apply(z)
            total = ad.add(total, ad.sum_all(logdet))
        return z, total

    def params(self, prefix: str = "flow") -> list[tuple[str, Tensor]]:
        out = []
        for i, step in enumerate(self.steps):
            out.extend(step.params(f"{prefix}.{i}"))
        return out


def make_chain(kind: str, n_steps: int, dim: int,
               rng: np.random.Generator) -> FlowChain:
    """Build a homogeneous chain of freshly initialized steps."""
    if kind == "none":
        return FlowChain([], "none")
    if n_steps < 0:
        raise UsageError(f"n_steps must be >= 0, got {n_steps}")
    if kind == "planar":
        return FlowChain([PlanarStep.init_random(dim, rng) for _ in range(n_steps)],
                         "planar")
    if kind == "radial":
        return FlowChain([RadialStep.init_random(dim, rng) for _ in range(n_steps)],
                         "radial")
    raise UsageError(f"unknown flow kind {kind!r}")


def numeric_logdet_oracle(f, z: np.ndarray, h: float = 1e-5) -> float:
    """log|det(Jacobian of f)| at z from central finite differences.

    f maps a plain vector to a plain vector of the same length. Returns
    -inf when the numeric Jacobian is singular or non-finite.
    """
    z = np.asarray(z, dtype=np.float64)
    n = z.size
    jac = np.empty((n, n))
    for j in range(n):
        zp = z.copy()
        zm = z.copy()
        zp[j] += h
        zm[j] -= h
        jac[:, j] = (np.asarray(f(zp), dtype=np.float64)
                     - np.asarray(f(zm), dtype=np.float64)) / (2.0 * h)
    if not np.all(np.isfinite(jac)):
        return float("-inf")
    sign, logabs = np.linalg.slogdet(jac)
    if sign <= 0:
        return float("-inf")
    return float(logabs)
