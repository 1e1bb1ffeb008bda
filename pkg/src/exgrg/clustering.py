"""Prototype assignments, Sinkhorn-Knopp codes and the alignment loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import autodiff as ad
from .autodiff import Tensor


class SinkhornUnderflowError(FloatingPointError):
    pass


@dataclass
class PrototypeBank:
    """``K x D_H`` prototypes with the softmax and transport temperatures."""

    C: np.ndarray
    tau: float = 0.1
    epsilon: float = 0.05
    sinkhorn_iters: int = 6

    def __post_init__(self):
        self.C = np.asarray(self.C, dtype=np.float64)
        if self.C.ndim != 2 or self.C.shape[0] < 2:
            raise ValueError(f"need at least 2 prototypes, got shape {self.C.shape}")
        if self.tau <= 0 or self.epsilon <= 0:
            raise ValueError("tau and epsilon must be positive")
        if self.sinkhorn_iters < 1:
            raise ValueError("sinkhorn_iters must be at least 1")

    @property
    def num_prototypes(self) -> int:
        return self.C.shape[0]

    @classmethod
    def random(cls, k: int, dim: int, rng: np.random.Generator, **kwargs) -> "PrototypeBank":
        return cls(normalize_prototypes(rng.standard_normal((k, dim))), **kwargs)


def normalize_prototypes(c: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(c, axis=1, keepdims=True)
    return c / np.where(norms > 0, norms, 1.0)


def _scores(h: Tensor, c: Tensor) -> Tensor:
    if h.shape[1] != c.shape[1]:
        raise ad.ShapeError(f"H has {h.shape[1]} columns, prototypes have {c.shape[1]}")
    return ad.matmul(h, ad.transpose(c))


def assign_probabilities(h, c, tau: float) -> Tensor:
    """``P = softmax(H C^T / tau)`` row-wise, on the tape of ``h``/``c``."""
    return ad.row_softmax(_scores(ad.as_tensor(h), ad.as_tensor(c)), tau)


def assign_log_probabilities(h, c, tau: float) -> Tensor:
    """``log P`` computed directly, which stays finite when P underflows."""
    return ad.log_row_softmax(_scores(ad.as_tensor(h), ad.as_tensor(c)), tau)


def sinkhorn(scores: np.ndarray, epsilon: float, iters: int) -> np.ndarray:
    """Entropic transport plan with row sums 1/N and column sums 1/K.

    Runs in the log domain: per-row max subtraction, then alternating column
    and row normalizations, finishing on the rows.
    """
    s = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise FloatingPointError("Sinkhorn scores contain non-finite values")
    n, k = s.shape
    log_q = s / epsilon
    log_q = log_q - log_q.max(axis=1, keepdims=True)
    log_q -= logsumexp(log_q)
    for _ in range(iters):
        log_q -= logsumexp(log_q, axis=0, keepdims=True) + np.log(k)
        log_q -= logsumexp(log_q, axis=1, keepdims=True) + np.log(n)
    q = np.exp(log_q)
    if np.any(q.sum(axis=1) == 0.0):
        raise SinkhornUnderflowError(f"a code row underflowed to zero; increase epsilon (now {epsilon})")
    return q


def sinkhorn_codes(h, bank: PrototypeBank) -> np.ndarray:
    """Codes Q for detached representations ``h`` (off-tape)."""
    hv = ad.as_tensor(h).value
    if hv.shape[1] != bank.C.shape[1]:
        raise ad.ShapeError(f"H has {hv.shape[1]} columns, prototypes have {bank.C.shape[1]}")
    return sinkhorn(hv @ bank.C.T, bank.epsilon, bank.sinkhorn_iters)


def alignment_pairs(n: int, augment_pairs, mode: str = "full") -> np.ndarray:
    """Pair set S_O as an ``(m, 2)`` array of (code row, prediction row).

    ``full`` is self pairs plus augmentation pairs in both orientations,
    ``self`` and ``aug`` keep one of the two parts.
    """
    own = np.stack([np.arange(n), np.arange(n)], axis=1)
    ap = np.asarray(augment_pairs, dtype=np.int64).reshape(-1, 2)
    aug = np.concatenate([ap, ap[:, ::-1]]) if len(ap) else ap
    if mode == "full":
        return np.concatenate([own, aug])
    if mode == "self":
        return own
    if mode == "aug":
        return aug
    raise ValueError(f"unknown S_O mode {mode!r}")


def ot_alignment_loss(log_p, q: np.ndarray, pairs) -> Tensor:
    """Mean cross-entropy between code rows and predicted rows over S_O.

    Code rows are rescaled to sum to one (Q itself has row sums 1/N).
    """
    log_p = ad.as_tensor(log_p)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        raise ValueError("S_O is empty")
    q = np.asarray(q, dtype=np.float64)
    if q.shape != log_p.shape:
        raise ad.ShapeError(f"Q {q.shape} and log P {log_p.shape} differ")
    targets = q / q.sum(axis=1, keepdims=True)
    picked = ad.take_rows(log_p, pairs[:, 1])
    ce = ad.sum(ad.mul(ad.constant(targets[pairs[:, 0]]), picked))
    return ad.scalar_mul(ce, -1.0 / len(pairs))
