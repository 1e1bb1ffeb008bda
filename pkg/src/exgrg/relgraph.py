"""Relation-graph generators, sparsifying filters and the learnable aggregation.

Every generator takes detached inputs and returns a ``RelationGraph`` over the
N batch rows.  ``aggregate`` is the only step that lives on the tape: it mixes
the constant graphs with coefficients produced by the hypernetwork.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.spatial.distance import cdist

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .graph import MiniBatchIndex, SourceGraph

KINDS = ("aug", "knn", "adj", "adj_filtered", "lappe", "rwse", "rwse_filtered", "signnet", "cluster", "aggregate")
STATS_SCALE = 0.05


@dataclass(frozen=True)
class RelationGraph:
    weights: sp.csr_matrix
    source_kind: str
    intra_enabled: bool = False

    def __post_init__(self):
        if self.source_kind not in KINDS:
            raise ValueError(f"unknown relation graph kind {self.source_kind!r}")

    @property
    def size(self) -> int:
        return self.weights.shape[0]

    @property
    def nnz(self) -> int:
        return int(self.weights.count_nonzero())

    def dense(self) -> np.ndarray:
        return self.weights.toarray()


def _finalize(weights, kind: str, intra: bool) -> RelationGraph:
    w = sp.csr_matrix(weights, dtype=np.float64)
    w.setdiag(0.0)
    w.data = np.maximum(w.data, 0.0)
    w.eliminate_zeros()
    w.sort_indices()
    return RelationGraph(w, kind, intra)


def candidate_mask(batch: MiniBatchIndex, intra: bool = False) -> np.ndarray:
    """Pairs a generator may relate: off-diagonal, and cross-view unless ``intra``."""
    n = batch.size
    mask = ~np.eye(n, dtype=bool)
    if not intra:
        v = batch.view_ids
        mask &= v[:, None] != v[None, :]
    return mask


# ------------------------------------------------------------------ filters


def similarity_matrix(x, metric: str = "cosine") -> np.ndarray:
    """Pairwise similarity of rows with a zeroed diagonal."""
    x = np.asarray(ad.as_tensor(x).value if isinstance(x, Tensor) else x, dtype=np.float64)
    if metric == "cosine":
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        unit = x / np.where(norms > 0, norms, 1.0)
        s = unit @ unit.T
    elif metric == "neg_euclidean":
        s = -cdist(x, x)
    else:
        raise ValueError(f"unknown metric {metric!r}")
    np.fill_diagonal(s, 0.0)
    return s


def f_k_rowwise(s: np.ndarray, k: int, candidates: np.ndarray | None = None) -> sp.csr_matrix:
    """Keep the k largest entries of each row; ties go to the lower column.

    The result stores exactly the selected positions, even where the kept
    value is zero.  Entries outside ``candidates`` are never selected.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    s = np.asarray(s, dtype=np.float64)
    n, m = s.shape
    keyed = s if candidates is None else np.where(candidates, s, -np.inf)
    k_eff = min(k, m)
    order = np.argsort(-keyed, axis=1, kind="stable")[:, :k_eff]
    rows = np.repeat(np.arange(n), k_eff)
    cols = order.ravel()
    if candidates is not None:
        ok = candidates[rows, cols]
        rows, cols = rows[ok], cols[ok]
    return sp.csr_matrix((s[rows, cols], (rows, cols)), shape=(n, m))


def f_K_global(s: np.ndarray, k_g: int, candidates: np.ndarray | None = None) -> sp.csr_matrix:
    """Keep the ``k_g`` largest entries overall; ties go to the lower flat index."""
    if k_g < 1:
        raise ValueError("K_g must be at least 1")
    s = np.asarray(s, dtype=np.float64)
    flat = s.ravel() if candidates is None else np.where(candidates, s, -np.inf).ravel()
    top = np.argsort(-flat, kind="stable")[: min(k_g, flat.size)]
    if candidates is not None:
        top = top[candidates.ravel()[top]]
    rows, cols = np.divmod(top, s.shape[1])
    return sp.csr_matrix((s[rows, cols], (rows, cols)), shape=s.shape)


def f_n_normalize(s: np.ndarray, candidates: np.ndarray | None = None) -> np.ndarray:
    """Min-max scaling to [0, 1] over the candidate entries; constant input maps to 0."""
    s = np.asarray(s, dtype=np.float64)
    vals = s if candidates is None else s[candidates]
    out = np.zeros_like(s)
    if vals.size == 0:
        return out
    lo, hi = vals.min(), vals.max()
    if hi > lo:
        out = (s - lo) / (hi - lo)
    if candidates is not None:
        out = np.where(candidates, out, 0.0)
    return out


def rescale_rows_minmax(m: sp.csr_matrix) -> sp.csr_matrix:
    """Per-row min-max of the stored entries; a row with one distinct value maps to 1."""
    m = sp.csr_matrix(m, copy=True)
    for i in range(m.shape[0]):
        seg = slice(m.indptr[i], m.indptr[i + 1])
        vals = m.data[seg]
        if vals.size == 0:
            continue
        lo, hi = vals.min(), vals.max()
        m.data[seg] = (vals - lo) / (hi - lo) if hi > lo else 1.0
    return m


def _knn_graph(x: np.ndarray, k: int, metric: str, candidates, kind: str, intra: bool) -> RelationGraph:
    kept = f_k_rowwise(similarity_matrix(x, metric), k, candidates)
    if metric == "neg_euclidean":
        kept = rescale_rows_minmax(kept)
    return _finalize(kept, kind, intra)


# --------------------------------------------------------------- generators


def g_aug(batch: MiniBatchIndex) -> RelationGraph:
    n = batch.size
    pairs = np.asarray(batch.augment_pairs, dtype=np.int64).reshape(-1, 2)
    rows = np.concatenate([pairs[:, 0], pairs[:, 1]])
    cols = np.concatenate([pairs[:, 1], pairs[:, 0]])
    w = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    w.data[:] = 1.0
    return _finalize(w, "aug", False)


def g_knn(h, batch: MiniBatchIndex, k: int, metric: str = "cosine", intra: bool = False) -> RelationGraph:
    """kNN graph on detached batch representations."""
    hv = h.value if isinstance(h, Tensor) else np.asarray(h)
    return _knn_graph(hv, k, metric, candidate_mask(batch, intra), "knn", intra)


def g_adj(g: SourceGraph, batch: MiniBatchIndex) -> RelationGraph:
    """1 where the source nodes behind two batch rows are adjacent.

    Adjacency is a property of the source nodes, so both intra- and
    inter-view pairs are kept whatever the intra flag says.
    """
    src = batch.source_nodes
    sub = g.adjacency[src][:, src].toarray()
    return _finalize((sub != 0).astype(np.float64), "adj", True)


def elementwise_filter(base: RelationGraph, knn: RelationGraph, kind: str) -> RelationGraph:
    """``base * G^k`` entrywise; keeps the kNN soft weight on surviving pairs."""
    return _finalize(base.weights.multiply(knn.weights), kind, base.intra_enabled)


def g_adj_filtered(adj: RelationGraph, knn: RelationGraph) -> RelationGraph:
    return elementwise_filter(adj, knn, "adj_filtered")


def g_rwse_filtered(rwse_graph: RelationGraph, knn: RelationGraph) -> RelationGraph:
    return elementwise_filter(rwse_graph, knn, "rwse_filtered")


def g_pse(encoding, batch: MiniBatchIndex, k: int, metric: str = "cosine", intra: bool = False) -> RelationGraph:
    """kNN graph over PSE rows; both view rows of a node share its encoding row."""
    kind = getattr(encoding, "kind", "lappe")
    e = encoding.matrix if hasattr(encoding, "matrix") else np.asarray(encoding)
    return _knn_graph(e[batch.source_nodes], k, metric, candidate_mask(batch, intra), kind, intra)


def g_cluster(
    p, k_g: int, batch: MiniBatchIndex | None = None, intra: bool = False, log_p=None
) -> RelationGraph:
    """Global top-``k_g`` of the min-max scaled ``P log P^T`` (diagonal excluded)."""
    pv = p.value if isinstance(p, Tensor) else np.asarray(p)
    if log_p is None:
        with np.errstate(divide="ignore"):
            lp = np.log(pv)
        lp = np.maximum(lp, np.log(np.finfo(np.float64).tiny))
    else:
        lp = log_p.value if isinstance(log_p, Tensor) else np.asarray(log_p)
    gp = pv @ lp.T
    n = gp.shape[0]
    cand = candidate_mask(batch, intra) if batch is not None else ~np.eye(n, dtype=bool)
    return _finalize(f_K_global(f_n_normalize(gp, cand), k_g, cand), "cluster", intra)


# -------------------------------------------------------------- aggregation


def stats_f_s(rg) -> tuple[float, float]:
    """Raw (sum of weights, number of nonzero weights)."""
    w = rg.weights if isinstance(rg, RelationGraph) else sp.csr_matrix(rg)
    return float(w.sum()), float(w.count_nonzero())


def scaled_stats(rg: RelationGraph, scale: float = STATS_SCALE) -> np.ndarray:
    """Statistics divided by ``N^2`` and then by ``scale``: the input of the hypernetwork."""
    n = rg.size
    total, count = stats_f_s(rg)
    return np.array([total, count]) / (n * n) / scale


def aggregator_spec(depth: int = 3, hidden_ratio: int = 2, activation: str = "elu") -> nn.LayerStackSpec:
    """Hypernetwork: 2 statistics in, one logit out, ``depth`` dense layers."""
    if depth < 1:
        raise ValueError("aggregator depth must be at least 1")
    hidden = 2 * hidden_ratio
    return nn.LayerStackSpec((2,) + (hidden,) * (depth - 1) + (1,), activation, "none", "identity", "none")


@dataclass(frozen=True)
class AggregatorNet:
    spec: nn.LayerStackSpec
    prefix: str = "psi"
    stats_scale: float = STATS_SCALE

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        return nn.init_parameters(self.prefix, self.spec, rng)

    def layers(self, params: dict[str, Tensor]) -> list[nn.DenseLayer]:
        return nn.dense_layers(self.prefix, self.spec, params)


def aggregate(
    graphs: list[RelationGraph],
    net: AggregatorNet,
    params: dict[str, Tensor],
    on_tape: dict[int, Tensor] | None = None,
) -> tuple[Tensor, Tensor]:
    """``G = sum_i lambda_i G^(i)`` with ``lambda = softmax(Psi(stats))``.

    Returns the dense ``N x N`` aggregate and the ``1 x n`` coefficient row,
    both on the tape of the hypernetwork parameters.  ``on_tape`` maps a graph
    index to a differentiable dense version of that graph, used in place of
    its constant weights (statistics still come from the constant).
    """
    if not graphs:
        raise ValueError("no relation graphs to aggregate")
    n = graphs[0].size
    if any(rg.size != n for rg in graphs):
        raise ad.ShapeError("relation graphs differ in size")
    stats = np.stack([scaled_stats(rg, net.stats_scale) for rg in graphs])
    logits = nn.mlp_forward(net.layers(params), stats)
    lambdas = ad.row_softmax(ad.transpose(logits))
    on_tape = on_tape or {}
    stacked = np.stack([np.zeros(n * n) if i in on_tape else rg.dense().ravel() for i, rg in enumerate(graphs)])
    g = ad.reshape(ad.matmul(lambdas, stacked), (n, n))
    column = ad.transpose(lambdas)
    for i in sorted(on_tape):
        g = ad.add(g, ad.mul(ad.take_rows(column, [i]), on_tape[i]))
    return g, lambdas


def to_triples(weights, kind: str) -> str:
    """Text dump: ``# kind N nnz`` then one ``i j w`` line per stored entry."""
    w = sp.coo_matrix(weights)
    w = sp.csr_matrix(w)
    w.eliminate_zeros()
    w.sort_indices()
    coo = w.tocoo()
    lines = [f"# {kind} {w.shape[0]} {coo.nnz}"]
    lines += [f"{i} {j} {v:.17g}" for i, j, v in zip(coo.row, coo.col, coo.data)]
    return "\n".join(lines) + "\n"
