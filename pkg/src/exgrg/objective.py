"""Variance, covariance, relation-weighted invariance, regularizer and their sum."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .clustering import ot_alignment_loss

VARIANCE_EPS = 1e-4


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 100.0
    beta: float = 80.0
    gamma: float = 5.0
    alpha1: float = 0.2
    alpha2: float = 0.5

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v}")


@dataclass
class LossReport:
    L_V: float
    L_C: float
    L_Iprime: float
    L_O: float
    L_R: float
    total: float
    lambdas: tuple[float, ...] = field(default_factory=tuple)

    def row(self) -> list[float]:
        return [self.L_V, self.L_C, self.L_Iprime, self.L_O, self.L_R, self.total, *self.lambdas]


def _centered(z: Tensor) -> Tensor:
    if z.shape[0] < 2:
        raise ValueError("need at least two rows to estimate a covariance")
    return ad.sub(z, ad.mean(z, axis=0))


def variance_loss(z) -> Tensor:
    """``sum_k max(0, 1 - sqrt(Var_k + 1e-4))`` with the unbiased variance."""
    z = ad.as_tensor(z)
    zc = _centered(z)
    var = ad.scalar_mul(ad.sum(ad.square(zc), axis=0), 1.0 / (z.shape[0] - 1))
    return ad.sum(ad.hinge(ad.sqrt(var, VARIANCE_EPS), 1.0))


def covariance_loss(z) -> Tensor:
    """Sum of squared off-diagonal covariance entries."""
    z = ad.as_tensor(z)
    zc = _centered(z)
    cov = ad.scalar_mul(ad.matmul(ad.transpose(zc), zc), 1.0 / (z.shape[0] - 1))
    off = 1.0 - np.eye(z.shape[1])
    return ad.sum(ad.mul(ad.square(cov), off))


def invariance_loss(z, g) -> Tensor:
    """``sum_ij G_ij ||z_i - z_j||^2`` over ordered pairs.

    Expanded as ``s.r + c.s - 2 <G, Z Z^T>`` with squared norms ``s`` and the
    row/column sums ``r``/``c`` of G, which avoids an N x N x D tensor.
    """
    z = ad.as_tensor(z)
    g = _as_dense(g)
    n = z.shape[0]
    if g.shape != (n, n):
        raise ad.ShapeError(f"relation graph {g.shape} does not match {n} rows")
    s = ad.sum(ad.square(z), axis=1)
    t1 = ad.sum(ad.mul(s, ad.sum(g, axis=1)))
    t2 = ad.matmul(ad.sum(g, axis=0), s)
    gram = ad.matmul(z, ad.transpose(z))
    t3 = ad.sum(ad.mul(g, gram))
    return ad.sub(ad.add(t1, t2), ad.scalar_mul(t3, 2.0))


def relation_regularizer(g) -> Tensor:
    return ad.scalar_mul(ad.sum(ad.square(_as_dense(g))), -1.0)


def _as_dense(g) -> Tensor:
    if isinstance(g, Tensor):
        return g
    if hasattr(g, "weights"):
        g = g.weights
    if hasattr(g, "toarray"):
        g = g.toarray()
    return ad.constant(g)


def binarize(g: Tensor, threshold: float = 0.5) -> Tensor:
    """0/1 relation graph (a constant: no gradient reaches the aggregator)."""
    return ad.constant((g.value >= threshold).astype(np.float64))


def total_loss(z, g, log_p, q, pairs, weights: LossWeights, lambdas=None) -> tuple[Tensor, LossReport]:
    """Weighted sum of the five terms and a report of their values.

    ``log_p = None`` (clustering disabled) makes ``L_O`` a constant zero.
    """
    terms = {
        "L_V": variance_loss(z),
        "L_C": covariance_loss(z),
        "L_Iprime": invariance_loss(z, g),
        "L_O": ad.constant(0.0) if log_p is None else ot_alignment_loss(log_p, q, pairs),
        "L_R": relation_regularizer(g),
    }
    coeffs = {"L_V": weights.alpha, "L_C": weights.beta, "L_Iprime": weights.gamma,
              "L_O": weights.alpha1, "L_R": weights.alpha2}
    total = None
    for name, t in terms.items():
        part = ad.scalar_mul(t, coeffs[name])
        total = part if total is None else ad.add(total, part)
    lam = () if lambdas is None else tuple(float(x) for x in ad.as_tensor(lambdas).value.ravel())
    report = LossReport(*(terms[k].item() for k in terms), total.item(), lam)
    return total, report
