"""Source graphs, file ingestion, SBM generation, augmentation and batching."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)


class GraphFormatError(ValueError):
    """Malformed or inconsistent graph input."""


@dataclass(frozen=True)
class SourceGraph:
    adjacency: sp.csr_matrix
    features: np.ndarray
    labels: np.ndarray | None = None
    num_classes: int = 0

    def __post_init__(self):
        m = self.adjacency.shape[0]
        if self.adjacency.shape != (m, m):
            raise GraphFormatError(f"adjacency must be square, got {self.adjacency.shape}")
        if (abs(self.adjacency - self.adjacency.T) > 0).nnz:
            raise GraphFormatError("adjacency is not symmetric")
        if np.any(self.adjacency.diagonal() != 0):
            raise GraphFormatError("adjacency has self-loops")
        if self.features.shape[0] != m:
            raise GraphFormatError(f"{self.features.shape[0]} feature rows for {m} nodes")
        if self.labels is not None:
            if self.labels.shape != (m,):
                raise GraphFormatError(f"{self.labels.shape[0]} labels for {m} nodes")
            if m and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
                raise GraphFormatError("labels must lie in [0, num_classes)")

    @property
    def num_nodes(self) -> int:
        return self.adjacency.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def num_edges(self) -> int:
        """Undirected edge count."""
        return self.adjacency.nnz // 2

    def degrees(self) -> np.ndarray:
        return np.asarray(self.adjacency.sum(axis=1)).ravel()


@dataclass(frozen=True)
class AugmentConfig:
    edge_drop_prob: float = 0.0
    feature_mask_prob: float = 0.0
    # column-wise masking zeroes a feature dimension for every node;
    # node-wise masking zeroes individual entries
    feature_mask_mode: str = "column"

    def __post_init__(self):
        for name in ("edge_drop_prob", "feature_mask_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if self.feature_mask_mode not in ("column", "entry"):
            raise ValueError(f"unknown feature_mask_mode {self.feature_mask_mode!r}")


@dataclass(frozen=True)
class View:
    adjacency: sp.csr_matrix
    features: np.ndarray

    @property
    def num_nodes(self) -> int:
        return self.adjacency.shape[0]


@dataclass(frozen=True)
class ViewPair:
    view1: View
    view2: View
    block_adjacency: sp.csr_matrix
    stacked_features: np.ndarray

    @property
    def num_source_nodes(self) -> int:
        return self.view1.num_nodes


@dataclass(frozen=True)
class MiniBatchIndex:
    """Rows of the stacked 2M-row matrix chosen for one iteration.

    ``augment_pairs`` hold positions into ``batch_nodes`` (not stacked rows).
    """

    batch_nodes: np.ndarray
    augment_pairs: np.ndarray
    num_source_nodes: int
    _source: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "_source", self.batch_nodes % self.num_source_nodes)

    @property
    def size(self) -> int:
        return len(self.batch_nodes)

    @property
    def source_nodes(self) -> np.ndarray:
        """Source-graph node behind each batch row."""
        return self._source

    @property
    def view_ids(self) -> np.ndarray:
        return self.batch_nodes // self.num_source_nodes


def symmetric_adjacency(rows, cols, num_nodes: int) -> sp.csr_matrix:
    """Symmetrized, deduplicated 0/1 adjacency without self-loops."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    keep = rows != cols
    r = np.concatenate([rows[keep], cols[keep]])
    c = np.concatenate([cols[keep], rows[keep]])
    a = sp.csr_matrix((np.ones(len(r)), (r, c)), shape=(num_nodes, num_nodes))
    a.sum_duplicates()
    a.data[:] = 1.0
    a.sort_indices()
    return a


def _parse_edges(path: Path) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) != 2:
                raise GraphFormatError(f"{path}:{lineno}: expected two node ids, got {len(parts)} fields")
            for col, tok in enumerate(parts, 1):
                try:
                    v = int(tok)
                except ValueError:
                    raise GraphFormatError(f"{path}:{lineno}:{col}: not an integer: {tok!r}") from None
                if v < 0:
                    raise GraphFormatError(f"{path}:{lineno}:{col}: negative node id {v}")
                (rows if col == 1 else cols).append(v)
    return np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64)


def _parse_features(path: Path) -> np.ndarray:
    data = []
    width = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text:
                continue
            fields = text.split(",")
            try:
                row = [float(x) for x in fields]
            except ValueError:
                for col, tok in enumerate(fields, 1):
                    try:
                        float(tok)
                    except ValueError:
                        raise GraphFormatError(f"{path}:{lineno}:{col}: not a number: {tok!r}") from None
                raise
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise GraphFormatError(f"{path}:{lineno}: expected {width} columns, got {len(row)}")
            data.append(row)
    if not data:
        raise GraphFormatError(f"{path}: no feature rows")
    return np.array(data, dtype=np.float64)


def _parse_labels(path: Path) -> np.ndarray:
    labels = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text:
                continue
            try:
                labels.append(int(text))
            except ValueError:
                raise GraphFormatError(f"{path}:{lineno}:1: not an integer label: {text!r}") from None
    return np.array(labels, dtype=np.int64)


def load_graph(edge_list_path, features_path, labels_path=None) -> SourceGraph:
    """Read an edge list, a feature CSV and optional labels into a SourceGraph."""
    features = _parse_features(Path(features_path))
    m = features.shape[0]
    rows, cols = _parse_edges(Path(edge_list_path))
    if len(rows) and max(rows.max(), cols.max()) >= m:
        bad = int(max(rows.max(), cols.max()))
        raise GraphFormatError(f"{edge_list_path}: node id {bad} out of range for {m} feature rows")
    labels, num_classes = None, 0
    if labels_path is not None:
        labels = _parse_labels(Path(labels_path))
        if len(labels) != m:
            raise GraphFormatError(f"{labels_path}: {len(labels)} labels for {m} nodes")
        if labels.min() < 0:
            raise GraphFormatError(f"{labels_path}: negative label")
        num_classes = int(labels.max()) + 1
    return SourceGraph(symmetric_adjacency(rows, cols, m), features, labels, num_classes)


def load_splits(path) -> dict[str, np.ndarray]:
    """Parse a split file with ``train:``, ``val:`` and ``test:`` lines."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text:
                continue
            key, sep, rest = text.partition(":")
            key = key.strip()
            if not sep or key not in ("train", "val", "test"):
                raise GraphFormatError(f"{path}:{lineno}: expected 'train:', 'val:' or 'test:'")
            ids = [t for t in rest.replace(" ", "").split(",") if t]
            try:
                out[key] = np.array([int(t) for t in ids], dtype=np.int64)
            except ValueError:
                raise GraphFormatError(f"{path}:{lineno}: node ids must be integers") from None
    missing = {"train", "val", "test"} - out.keys()
    if missing:
        raise GraphFormatError(f"{path}: missing split(s) {sorted(missing)}")
    return out


def save_graph(g: SourceGraph, directory) -> None:
    """Write ``edges.txt``, ``features.csv`` and (if present) ``labels.txt``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    upper = sp.triu(g.adjacency, k=1).tocoo()
    order = np.lexsort((upper.col, upper.row))
    with open(d / "edges.txt", "w", encoding="utf-8") as fh:
        fh.write(f"# {g.num_nodes} nodes, {len(order)} undirected edges\n")
        for i, j in zip(upper.row[order], upper.col[order]):
            fh.write(f"{i} {j}\n")
    np.savetxt(d / "features.csv", g.features, delimiter=",", fmt="%.17g")
    if g.labels is not None:
        np.savetxt(d / "labels.txt", g.labels, fmt="%d")


def generate_sbm(
    blocks: int,
    nodes_per_block: int,
    p_in: float,
    p_out: float,
    feature_dim: int,
    seed: int,
    noise: float = 1.0,
) -> SourceGraph:
    """Stochastic block model with block-indicator features plus Gaussian noise.

    The first ``blocks`` feature columns carry the one-hot block signal (when
    ``feature_dim >= blocks``); all columns get ``noise``-scaled noise.
    """
    for name, p in (("p_in", p_in), ("p_out", p_out)):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"{name} must be in [0, 1], got {p}")
    m = blocks * nodes_per_block
    if m == 0:
        raise ValueError("graph would have zero nodes")
    if feature_dim < 1:
        raise ValueError("feature_dim must be at least 1")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(blocks), nodes_per_block)
    iu, ju = np.triu_indices(m, k=1)
    prob = np.where(labels[iu] == labels[ju], p_in, p_out)
    hit = rng.random(len(iu)) < prob
    adjacency = symmetric_adjacency(iu[hit], ju[hit], m)
    features = noise * rng.standard_normal((m, feature_dim))
    features[np.arange(m), labels % feature_dim] += 1.0
    return SourceGraph(adjacency, features, labels, blocks)


def augment(g: SourceGraph | View, cfg: AugmentConfig, rng: np.random.Generator) -> View:
    """Drop undirected edges and mask feature columns independently."""
    a = g.adjacency
    if cfg.edge_drop_prob > 0.0:
        upper = sp.triu(a, k=1).tocoo()
        keep = rng.random(upper.nnz) >= cfg.edge_drop_prob
        a = symmetric_adjacency(upper.row[keep], upper.col[keep], g.adjacency.shape[0])
    x = g.features
    if cfg.feature_mask_prob > 0.0:
        if cfg.feature_mask_mode == "column":
            keep_cols = rng.random(x.shape[1]) >= cfg.feature_mask_prob
            x = x * keep_cols[None, :]
        else:
            x = x * (rng.random(x.shape) >= cfg.feature_mask_prob)
    return View(a, x)


def build_views(g: SourceGraph, cfg1: AugmentConfig, cfg2: AugmentConfig, rng: np.random.Generator) -> ViewPair:
    v1 = augment(g, cfg1, rng)
    v2 = augment(g, cfg2, rng)
    block = sp.block_diag([v1.adjacency, v2.adjacency], format="csr")
    stacked = np.vstack([v1.features, v2.features])
    return ViewPair(v1, v2, block, stacked)


def sample_batch(pair: ViewPair | int, batch_size: int, rng: np.random.Generator) -> MiniBatchIndex:
    """Sample ``batch_size / 2`` source nodes and take both of their view rows.

    Positions ``0 .. N/2-1`` hold view-1 rows and ``N/2 .. N-1`` the matching
    view-2 rows, so ``augment_pairs`` is ``(p, p + N/2)``.
    """
    m = pair if isinstance(pair, int) else pair.num_source_nodes
    n = int(batch_size)
    if n <= 0 or n % 2:
        raise ValueError(f"batch size must be a positive even number, got {n}")
    if n > 2 * m:
        raise ValueError(f"batch size {n} exceeds the {2 * m} stacked rows")
    half = n // 2
    if half == m:
        sources = np.arange(m)
    else:
        sources = np.sort(rng.choice(m, size=half, replace=False))
    batch = np.concatenate([sources, sources + m])
    pairs = np.stack([np.arange(half), np.arange(half) + half], axis=1)
    return MiniBatchIndex(batch, pairs, m)


def random_splits(
    num_nodes: int,
    rng: np.random.Generator,
    ratios: tuple[float, float, float] = (0.1, 0.1, 0.8),
) -> dict[str, np.ndarray]:
    perm = rng.permutation(num_nodes)
    n_train = int(round(ratios[0] * num_nodes))
    n_val = int(round(ratios[1] * num_nodes))
    return {
        "train": np.sort(perm[:n_train]),
        "val": np.sort(perm[n_train : n_train + n_val]),
        "test": np.sort(perm[n_train + n_val :]),
    }
