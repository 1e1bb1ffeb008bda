"""Linear probing of frozen representations and the collapse metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax

from .graph import random_splits

log = logging.getLogger(__name__)

RANK_TOL = 1e-7


@dataclass(frozen=True)
class ProbeConfig:
    penalties: tuple[float, ...] = (1e-4, 1e-3, 1e-2, 1e-1, 1.0)
    max_iter: int = 500
    tol: float = 1e-7
    trials: int = 20
    ratios: tuple[float, float, float] = (0.1, 0.1, 0.8)
    seed: int = 0

    def __post_init__(self):
        if not self.penalties or any(p <= 0 for p in self.penalties):
            raise ValueError("penalties must be positive")
        if abs(sum(self.ratios) - 1.0) > 1e-9 or any(r < 0 for r in self.ratios):
            raise ValueError(f"split ratios must be nonnegative and sum to 1, got {self.ratios}")
        if self.trials < 1 or self.max_iter < 1:
            raise ValueError("trials and max_iter must be >= 1")


def fit_logistic(x: np.ndarray, y: np.ndarray, num_classes: int, penalty: float, max_iter: int, tol: float) -> np.ndarray:
    """Multinomial logistic regression by Nesterov-accelerated gradient descent.

    Minimizes mean cross-entropy plus ``penalty/2 * ||W||^2`` (bias excluded).
    ``x`` must already contain a trailing column of ones.
    """
    n, d = x.shape
    onehot = np.eye(num_classes)[y]
    reg = np.ones((d, 1))
    reg[-1] = 0.0
    # softmax cross-entropy is (1/2)||X||^2/n smooth
    lip = 0.5 * np.linalg.norm(x, 2) ** 2 / n + penalty
    step = 1.0 / lip
    w = np.zeros((d, num_classes))
    w_prev = w
    for k in range(1, max_iter + 1):
        look = w + (k - 1.0) / (k + 2.0) * (w - w_prev)
        p = np.exp(log_softmax(x @ look, axis=1))
        grad = x.T @ (p - onehot) / n + penalty * reg * look
        w_prev, w = w, look - step * grad
        if np.linalg.norm(w - w_prev) <= tol * max(1.0, np.linalg.norm(w)):
            break
    return w


def _design(x: np.ndarray, mean: np.ndarray, scale: np.ndarray) -> np.ndarray:
    return np.hstack([(x - mean) / scale, np.ones((x.shape[0], 1))])


def _accuracy(w: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.argmax(x @ w, axis=1) == y))


def probe_split(h: np.ndarray, labels: np.ndarray, split: dict[str, np.ndarray], cfg: ProbeConfig) -> float:
    """Test accuracy with the penalty chosen on validation accuracy."""
    tr, va, te = split["train"], split["val"], split["test"]
    num_classes = int(labels.max()) + 1
    mean = h[tr].mean(axis=0)
    sd = h[tr].std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    xtr, xva, xte = (_design(h[i], mean, sd) for i in (tr, va, te))
    best, best_w = -1.0, None
    for pen in cfg.penalties:
        w = fit_logistic(xtr, labels[tr], num_classes, pen, cfg.max_iter, cfg.tol)
        acc = _accuracy(w, xva, labels[va]) if len(va) else _accuracy(w, xtr, labels[tr])
        if acc > best:
            best, best_w = acc, w
    return _accuracy(best_w, xte, labels[te])


def linear_probe(h, labels, cfg: ProbeConfig = ProbeConfig(), splits: dict[str, np.ndarray] | None = None) -> np.ndarray:
    """Per-trial test accuracies.

    With ``splits`` every trial reuses that split; otherwise each trial draws
    a fresh random split, re-drawing any whose training part misses a class.
    """
    h = np.asarray(h, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if h.shape[0] != labels.shape[0]:
        raise ValueError(f"{h.shape[0]} representations but {labels.shape[0]} labels")
    if splits is not None:
        parts = [splits[k] for k in ("train", "val", "test")]
        merged = np.concatenate(parts)
        if len(np.unique(merged)) != len(merged):
            raise ValueError("train/val/test splits overlap")
    num_classes = int(labels.max()) + 1
    rng = np.random.default_rng(cfg.seed)
    accs = []
    for trial in range(cfg.trials):
        split = splits
        if split is None:
            for attempt in range(100):
                split = random_splits(len(labels), rng, cfg.ratios)
                if len(np.unique(labels[split["train"]])) == num_classes:
                    break
                log.info("trial %d: split %d misses a class in train, re-drawing", trial, attempt)
            else:
                raise ValueError("could not draw a split covering every class")
        accs.append(probe_split(h, labels, split, cfg))
    return np.array(accs)


# ----------------------------------------------------------------- metrics


def _check(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise ValueError("metric input must be a non-empty matrix")
    if m.shape[0] < 2:
        raise ValueError("metrics need at least two rows")
    return m


def metric_corr(m) -> float:
    """Mean squared off-diagonal covariance entry."""
    m = _check(m)
    d = m.shape[1]
    if d < 2:
        return 0.0
    cov = np.cov(m, rowvar=False, ddof=1)
    off = cov[~np.eye(d, dtype=bool)]
    return float(np.mean(off**2))


def metric_std(m) -> float:
    return float(np.mean(np.std(_check(m), axis=0, ddof=1)))


def metric_nstd(m) -> float:
    m = _check(m)
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return metric_std(m / np.where(norms > 0, norms, 1.0))


def metric_rank(m, tol: float = RANK_TOL) -> int:
    """Singular values above ``tol * sigma_max``, taken from the smaller Gram matrix."""
    m = _check(m)
    gram = m.T @ m if m.shape[1] <= m.shape[0] else m @ m.T
    ev = np.clip(np.linalg.eigvalsh(gram), 0.0, None)
    sv = np.sqrt(ev)
    if sv.max() == 0.0:
        return 0
    return int(np.count_nonzero(sv > tol * sv.max()))


def metrics_report(h, z=None) -> dict[str, float]:
    out = {"corr H": metric_corr(h), "std H": metric_std(h), "nstd H": metric_nstd(h), "rank H": metric_rank(h)}
    if z is not None:
        out.update({"corr Z": metric_corr(z), "std Z": metric_std(z), "rank Z": metric_rank(z)})
    return out
