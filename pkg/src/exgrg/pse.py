"""Laplacian eigenvectors, random-walk return probabilities and SignNet encodings.

All encodings are computed on the source graph once; batch rows index them
through their source node.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .graph import SourceGraph

log = logging.getLogger(__name__)

ZERO_EIGENVALUE_TOL = 1e-8
RWSE_EXACT_MAX_NODES = 5000
RWSE_MC_WALKS = 2000


class ConvergenceError(RuntimeError):
    pass


class InsufficientSpectrumError(ValueError):
    pass


@dataclass(frozen=True)
class Encoding:
    matrix: np.ndarray
    kind: str
    params: dict = field(default_factory=dict)
    # nodes whose row is undefined (isolated nodes for rwse); rows are zero
    flagged: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True)
class SpectralDecomposition:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    laplacian_kind: str = "matrix"

    def residuals(self, matrix) -> np.ndarray:
        m = matrix.toarray() if sp.issparse(matrix) else np.asarray(matrix)
        r = m @ self.eigenvectors - self.eigenvectors * self.eigenvalues[None, :]
        return np.linalg.norm(r, axis=0)

    def orthonormality_error(self) -> float:
        v = self.eigenvectors
        return float(np.abs(v.T @ v - np.eye(v.shape[1])).max()) if v.size else 0.0


def laplacian(g: SourceGraph, normalized: bool = True) -> np.ndarray:
    """Dense ``D - A`` or ``I - D^-1/2 A D^-1/2`` (isolated rows: identity)."""
    a = g.adjacency.toarray()
    deg = a.sum(axis=1)
    if not normalized:
        return np.diag(deg) - a
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    return np.eye(len(deg)) - inv_sqrt[:, None] * a * inv_sqrt[None, :]


def canonicalize_signs(vectors: np.ndarray, rel_tol: float = 1e-10) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive.

    Entries within ``rel_tol`` of the column maximum count as ties; the
    lowest such index decides.
    """
    v = np.array(vectors, dtype=np.float64, copy=True)
    if v.size == 0:
        return v
    mag = np.abs(v)
    top = mag.max(axis=0)
    for j in range(v.shape[1]):
        lead = int(np.flatnonzero(mag[:, j] >= top[j] * (1.0 - rel_tol))[0])
        if v[lead, j] < 0:
            v[:, j] = -v[:, j]
    return v


def jacobi_eigh(matrix, tol: float = 1e-14, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi rotations for a small dense symmetric matrix."""
    a = np.array(matrix, dtype=np.float64, copy=True)
    n = a.shape[0]
    v = np.eye(n)
    scale = max(np.abs(a).max(), 1.0) if n else 1.0
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.triu(a, 1) ** 2))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        off = np.sqrt(np.sum(np.triu(a, 1) ** 2))
        raise ConvergenceError(f"Jacobi did not converge: off-diagonal norm {off:.3e}")
    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


def eigendecompose_symmetric(
    matrix, method: str = "lapack", laplacian_kind: str = "matrix", check: bool = True
) -> SpectralDecomposition:
    """Full spectrum, ascending, with sign-canonical eigenvectors."""
    m = matrix.toarray() if sp.issparse(matrix) else np.asarray(matrix, dtype=np.float64)
    if m.shape[0] != m.shape[1]:
        raise ValueError(f"matrix must be square, got {m.shape}")
    if not np.allclose(m, m.T, rtol=0, atol=1e-12 * max(1.0, np.abs(m).max(initial=0.0))):
        raise ValueError("matrix is not symmetric")
    if method == "lapack":
        try:
            w, v = np.linalg.eigh(m)
        except np.linalg.LinAlgError as exc:
            raise ConvergenceError(f"eigh failed: {exc}") from exc
    elif method == "jacobi":
        w, v = jacobi_eigh(m)
    else:
        raise ValueError(f"unknown method {method!r}")
    dec = SpectralDecomposition(w, canonicalize_signs(v), laplacian_kind)
    if check and m.size:
        res = dec.residuals(m)
        bound = 1e-8 * np.maximum(1.0, np.abs(w))
        if np.any(res > bound):
            raise ConvergenceError(f"eigen residual {res.max():.3e} above tolerance")
        orth = dec.orthonormality_error()
        if orth > 1e-8:
            raise ConvergenceError(f"eigenvectors not orthonormal: {orth:.3e}")
    return dec


def count_components(adjacency) -> int:
    n, _ = connected_components(sp.csr_matrix(adjacency), directed=False)
    return int(n)


def nonzero_modes(g: SourceGraph, freq: int, normalized: bool = True, decomposition=None):
    """Eigenpairs of the ``freq`` lowest eigenvalues above the zero threshold."""
    dec = decomposition or eigendecompose_symmetric(
        laplacian(g, normalized), laplacian_kind="normalized" if normalized else "unnormalized"
    )
    keep = np.flatnonzero(dec.eigenvalues > ZERO_EIGENVALUE_TOL)
    if freq > len(keep):
        raise InsufficientSpectrumError(
            f"requested {freq} non-zero modes but the graph has {len(keep)} "
            f"({g.num_nodes} nodes, {g.num_nodes - len(keep)} zero eigenvalues)"
        )
    idx = keep[:freq]
    return dec.eigenvalues[idx], dec.eigenvectors[:, idx]


def lappe(g: SourceGraph, freq: int, normalized: bool = True, decomposition=None) -> Encoding:
    _, vecs = nonzero_modes(g, freq, normalized, decomposition)
    return Encoding(vecs, "lappe", {"freq": freq, "normalized": normalized})


def _return_probs_exact(adj: sp.csr_matrix, kernel: int) -> np.ndarray:
    # Propagates all walk distributions at once.  Each new entry is a sum of
    # neighbor contributions taken in sorted order, so relabeling nodes cannot
    # change any rounding: the result is exactly permutation-equivariant.
    m = adj.shape[0]
    deg = np.diff(adj.indptr)
    groups = []
    for d in np.unique(deg[deg > 0]):
        nodes = np.flatnonzero(deg == d)
        nbrs = np.stack([adj.indices[adj.indptr[j] : adj.indptr[j + 1]] for j in nodes])
        groups.append((nodes, nbrs, int(d)))
    safe_deg = np.where(deg > 0, deg, 1).astype(np.float64)
    x = np.eye(m)
    out = np.zeros((m, kernel))
    for t in range(kernel):
        contrib = x / safe_deg[None, :]
        nxt = np.zeros_like(x)
        for nodes, nbrs, d in groups:
            terms = contrib[:, nbrs]
            terms.sort(axis=2)
            acc = terms[:, :, 0].copy()
            for p in range(1, d):
                acc += terms[:, :, p]
            nxt[:, nodes] = acc
        x = nxt
        out[:, t] = np.diagonal(x)
    return out


def _return_probs_monte_carlo(adj: sp.csr_matrix, kernel: int, walks: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    m = adj.shape[0]
    deg = np.diff(adj.indptr)
    out = np.zeros((m, kernel))
    starts = np.flatnonzero(deg > 0)
    for s in starts:
        cur = np.full(walks, s)
        for t in range(kernel):
            step = (rng.random(walks) * deg[cur]).astype(np.int64)
            cur = adj.indices[adj.indptr[cur] + step]
            out[s, t] = np.count_nonzero(cur == s) / walks
    return out


def rwse(g: SourceGraph, kernel: int, walks: int = RWSE_MC_WALKS, seed: int = 0) -> Encoding:
    """Return probabilities ``((D^-1 A)^(k+1))_ii`` for ``k = 0 .. kernel-1``.

    Exact for graphs up to ``RWSE_EXACT_MAX_NODES`` nodes; larger graphs use
    ``walks`` seeded random walks per node.  Isolated nodes get zero rows and
    are listed in ``flagged``.
    """
    if kernel < 1:
        raise ValueError("kernel must be at least 1")
    adj = sp.csr_matrix(g.adjacency)
    adj.sort_indices()
    isolated = np.flatnonzero(np.diff(adj.indptr) == 0)
    if g.num_nodes <= RWSE_EXACT_MAX_NODES:
        mat = _return_probs_exact(adj, kernel)
        params = {"kernel": kernel, "method": "exact"}
    else:
        log.info("rwse: %d nodes, estimating with %d walks per node", g.num_nodes, walks)
        mat = _return_probs_monte_carlo(adj, kernel, walks, seed)
        params = {"kernel": kernel, "method": "monte_carlo", "walks": walks, "seed": seed}
    mat[isolated] = 0.0
    return Encoding(mat, "rwse", params, flagged=isolated)


# ------------------------------------------------------------------ SignNet


@dataclass(frozen=True)
class SignNetSpec:
    freq: int
    hidden: int = 16
    arch: str = "deepset"

    def __post_init__(self):
        if self.arch not in ("deepset", "mlp"):
            raise ValueError(f"unknown SignNet arch {self.arch!r}")

    @property
    def phi(self) -> nn.LayerStackSpec:
        return nn.LayerStackSpec((1, self.hidden, self.hidden), "relu", "none", "relu", "none")

    @property
    def rho(self) -> nn.LayerStackSpec:
        d_in = self.hidden if self.arch == "deepset" else self.freq * self.hidden
        return nn.LayerStackSpec((d_in, self.hidden, self.freq), "relu", "none", "identity", "none")


def init_signnet(spec: SignNetSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = nn.init_parameters("signnet.phi", spec.phi, rng)
    params.update(nn.init_parameters("signnet.rho", spec.rho, rng))
    return params


def signnet_forward(vectors: np.ndarray, spec: SignNetSpec, params: dict[str, Tensor]) -> Tensor:
    """``rho(aggregate_j [phi(v_j) + phi(-v_j)])`` per node.

    ``phi`` sees one scalar eigenvector entry at a time.  Both signs are run
    through identically shaped calls, so flipping a column swaps two addends
    and leaves every output bit unchanged.
    """
    m, f = vectors.shape
    if f != spec.freq:
        raise ad.ShapeError(f"SignNet built for {spec.freq} eigenvectors, got {f}")
    phi = nn.dense_layers("signnet.phi", spec.phi, params)
    rho = nn.dense_layers("signnet.rho", spec.rho, params)
    flat = vectors.reshape(m * f, 1)
    both = ad.add(nn.mlp_forward(phi, flat), nn.mlp_forward(phi, -flat))
    if spec.arch == "deepset":
        pool = sp.csr_matrix((np.ones(m * f), (np.repeat(np.arange(m), f), np.arange(m * f))), shape=(m, m * f))
        pooled = ad.sparse_dense_matmul(pool, both)
    else:
        pooled = ad.reshape(both, (m, f * spec.hidden))
    return nn.mlp_forward(rho, pooled)


def signnet_encode(
    g: SourceGraph,
    spec: SignNetSpec,
    params: dict[str, np.ndarray],
    normalized: bool = True,
    vectors: np.ndarray | None = None,
) -> Encoding:
    if vectors is None:
        _, vectors = nonzero_modes(g, spec.freq, normalized)
    out = signnet_forward(vectors, spec, nn.lift(params, None))
    return Encoding(out.value, "signnet", {"freq": spec.freq, "arch": spec.arch})


# --------------------------------------------------------------- diagnostic


def laplacian_rank_diagnostic(rg) -> tuple[int, int]:
    """Zero-eigenvalue count of ``D - G`` and component count of G's support."""
    w = rg.weights if hasattr(rg, "weights") else rg
    w = sp.csr_matrix(w, dtype=np.float64)
    sym = ((w + w.T) * 0.5).toarray()
    lap = np.diag(sym.sum(axis=1)) - sym
    zeros = int(np.count_nonzero(np.linalg.eigvalsh(lap) < ZERO_EIGENVALUE_TOL))
    return zeros, count_components(sym != 0)
