import numpy as np
import pytest
import scipy.sparse as sp

from exgrg import autodiff as ad
from exgrg import graph, nn
from exgrg import relgraph as rgm


def _tied_matrix(rng, n):
    # coarse quantization produces many exact ties
    return np.round(rng.random((n, n)) * 20) / 20


def _brute_rowwise(s, k, cand):
    keep = set()
    for i in range(s.shape[0]):
        cols = [j for j in range(s.shape[1]) if cand is None or cand[i, j]]
        cols.sort(key=lambda j: (-s[i, j], j))
        keep.update((i, j) for j in cols[:k])
    return keep


def _brute_global(s, k, cand):
    cells = [(i, j) for i in range(s.shape[0]) for j in range(s.shape[1]) if cand is None or cand[i, j]]
    cells.sort(key=lambda ij: (-s[ij], ij[0] * s.shape[1] + ij[1]))
    return set(cells[:k])


def _support(m):
    c = m.tocoo()
    return set(zip(c.row.tolist(), c.col.tolist()))


def _batch(m=20, n=10, seed=0):
    return graph.sample_batch(m, n, np.random.default_rng(seed))


class TestTopK:
    @pytest.mark.parametrize("k", [1, 5, 17])
    def test_rowwise_matches_sorting(self, k):
        rng = np.random.default_rng(k)
        s = _tied_matrix(rng, 200)
        assert _support(rgm.f_k_rowwise(s, k)) == _brute_rowwise(s, k, None)
        cand = rng.random((200, 200)) < 0.5
        got = rgm.f_k_rowwise(s, k, cand)
        assert _support(got) == _brute_rowwise(s, k, cand)
        np.testing.assert_array_equal(got.toarray()[cand], np.where(got.toarray() != 0, s, 0)[cand])

    @pytest.mark.parametrize("k_g", [1, 300, 5000])
    def test_global_matches_sorting(self, k_g):
        rng = np.random.default_rng(k_g)
        s = _tied_matrix(rng, 200)
        assert _support(rgm.f_K_global(s, k_g)) == _brute_global(s, k_g, None)
        cand = rng.random((200, 200)) < 0.3
        assert _support(rgm.f_K_global(s, k_g, cand)) == _brute_global(s, k_g, cand)

    def test_all_equal_row_picks_lowest_columns(self):
        kept = rgm.f_k_rowwise(np.ones((3, 6)), 2)
        assert _support(kept) == {(i, j) for i in range(3) for j in (0, 1)}

    def test_k_beyond_candidates(self):
        cand = np.zeros((3, 3), dtype=bool)
        cand[0, 1] = True
        assert _support(rgm.f_k_rowwise(np.ones((3, 3)), 5, cand)) == {(0, 1)}

    def test_invalid_k(self):
        with pytest.raises(ValueError):
            rgm.f_k_rowwise(np.ones((2, 2)), 0)
        with pytest.raises(ValueError):
            rgm.f_K_global(np.ones((2, 2)), 0)


class TestNormalize:
    def test_minmax(self):
        out = rgm.f_n_normalize(np.array([[1.0, 3.0], [2.0, 5.0]]))
        np.testing.assert_allclose(out, [[0, 0.5], [0.25, 1]])

    def test_constant_maps_to_zero(self):
        np.testing.assert_array_equal(rgm.f_n_normalize(np.full((3, 3), 7.0)), 0)

    def test_candidates_only(self):
        cand = np.array([[False, True], [True, False]])
        out = rgm.f_n_normalize(np.array([[100.0, 1.0], [3.0, -50.0]]), cand)
        np.testing.assert_allclose(out, [[0, 0], [1, 0]])

    def test_row_rescale_degenerate(self):
        m = sp.csr_matrix(np.array([[0, -2.0, -1.0, -4.0], [-3.0, 0, 0, 0]]))
        np.testing.assert_allclose(rgm.rescale_rows_minmax(m).toarray(), [[0, 2 / 3, 1, 0], [1, 0, 0, 0]])


class TestGenerators:
    def test_aug_pairs(self):
        b = _batch()
        a = rgm.g_aug(b).dense()
        for i, j in b.augment_pairs:
            assert a[i, j] == a[j, i] == 1
        assert a.sum() == b.size
        assert rgm.g_aug(b).nnz == b.size

    def test_candidate_mask(self):
        b = _batch()
        mask = rgm.candidate_mask(b)
        assert not mask.diagonal().any()
        v = b.view_ids
        assert np.all((v[:, None] != v[None, :]) | ~mask)
        assert rgm.candidate_mask(b, intra=True).sum() == b.size * (b.size - 1)

    def test_knn_inter_view_only(self):
        b = _batch(30, 16)
        h = np.random.default_rng(1).standard_normal((16, 5))
        rg = rgm.g_knn(h, b, 3)
        rows, cols = rg.weights.nonzero()
        assert np.all(b.view_ids[rows] != b.view_ids[cols])
        assert np.all(np.diff(rg.weights.indptr) <= 3)
        assert rg.weights.min() >= 0

    def test_knn_cosine_values(self):
        b = _batch(30, 16)
        h = np.random.default_rng(2).standard_normal((16, 5))
        rg = rgm.g_knn(h, b, 4, intra=True)
        u = h / np.linalg.norm(h, axis=1, keepdims=True)
        cos = np.maximum(u @ u.T, 0)
        rows, cols = rg.weights.nonzero()
        np.testing.assert_allclose(rg.weights[rows, cols].A1, cos[rows, cols], rtol=1e-12)

    def test_neg_euclidean_in_unit_range(self):
        b = _batch(30, 16)
        rg = rgm.g_knn(np.random.default_rng(3).standard_normal((16, 5)), b, 4, "neg_euclidean")
        assert rg.weights.max() <= 1 and rg.weights.min() >= 0

    def test_adj_matches_source(self):
        g = graph.generate_sbm(2, 10, 0.5, 0.1, 3, seed=0)
        b = _batch(20, 12, seed=3)
        a = rgm.g_adj(g, b).dense()
        src = b.source_nodes
        # both views are covered: adjacency belongs to the source nodes
        np.testing.assert_array_equal(a, g.adjacency.toarray()[np.ix_(src, src)])
        v = b.view_ids
        assert a[v[:, None] == v[None, :]].sum() > 0

    def test_filter_is_subset(self):
        g = graph.generate_sbm(2, 10, 0.6, 0.2, 3, seed=0)
        b = _batch(20, 12, seed=3)
        knn = rgm.g_knn(np.random.default_rng(0).standard_normal((12, 4)), b, 3)
        adj = rgm.g_adj(g, b)
        f = rgm.g_adj_filtered(adj, knn)
        assert _support(f.weights) <= _support(adj.weights) & _support(knn.weights)

    def test_pse_rows_shared_by_views(self):
        b = _batch(20, 10)
        enc = np.random.default_rng(0).standard_normal((20, 3))
        rg = rgm.g_pse(enc, b, 3)
        # pairs of the same source node have cosine 1 and are always kept
        a = rg.dense()
        for i, j in b.augment_pairs:
            assert a[i, j] == pytest.approx(1.0)

    def test_cluster_graph(self):
        b = _batch(20, 10)
        p = np.random.default_rng(0).dirichlet(np.ones(4), size=10)
        rg = rgm.g_cluster(p, 12, b)
        assert rg.nnz <= 12
        assert rg.weights.max() <= 1
        gp = p @ np.log(p).T
        cand = rgm.candidate_mask(b)
        keep = _brute_global(rgm.f_n_normalize(gp, cand), 12, cand)
        assert _support(rg.weights) <= keep

    def test_unknown_metric(self):
        with pytest.raises(ValueError):
            rgm.similarity_matrix(np.ones((2, 2)), "manhattan")


class TestAggregate:
    def _graphs(self, n=8):
        rng = np.random.default_rng(0)
        out = []
        for kind, d in (("aug", 0.2), ("knn", 0.5)):
            w = rng.random((n, n)) * (rng.random((n, n)) < d)
            np.fill_diagonal(w, 0)
            out.append(rgm.RelationGraph(sp.csr_matrix(w), kind))
        return out

    def test_convex_combination(self):
        graphs = self._graphs()
        net = rgm.AggregatorNet(rgm.aggregator_spec(3, 2))
        params = nn.lift(net.init(np.random.default_rng(1)), None)
        g, lam = rgm.aggregate(graphs, net, params)
        assert lam.shape == (1, 2)
        assert lam.value.sum() == pytest.approx(1.0)
        np.testing.assert_allclose(g.value, lam.value[0, 0] * graphs[0].dense() + lam.value[0, 1] * graphs[1].dense())

    def test_stats(self):
        w = np.zeros((4, 4))
        w[0, 1], w[2, 3] = 0.5, 1.5
        rg = rgm.RelationGraph(sp.csr_matrix(w), "knn")
        assert rgm.stats_f_s(rg) == (2.0, 2.0)
        np.testing.assert_allclose(rgm.scaled_stats(rg), [2 / 16 / 0.05, 2 / 16 / 0.05])

    def test_gradient_reaches_psi(self):
        graphs = self._graphs()
        net = rgm.AggregatorNet(rgm.aggregator_spec(2, 2))
        raw = net.init(np.random.default_rng(2))
        names = sorted(raw)

        def f(v):
            g, _ = rgm.aggregate(graphs, net, dict(zip(names, v)))
            return ad.sum(ad.square(g))

        # the output bias has an exactly zero gradient (softmax shift), so
        # this is bounded by central-difference round-off
        assert ad.finite_diff_check(f, [raw[k] for k in names]) < 1e-4

    def test_size_mismatch(self):
        net = rgm.AggregatorNet(rgm.aggregator_spec())
        params = nn.lift(net.init(np.random.default_rng(0)), None)
        a = rgm.RelationGraph(sp.csr_matrix((3, 3)), "aug")
        b = rgm.RelationGraph(sp.csr_matrix((4, 4)), "aug")
        with pytest.raises(ad.ShapeError):
            rgm.aggregate([a, b], net, params)


def test_triples_round_trip():
    w = sp.csr_matrix(np.array([[0, 0.1, 0], [1 / 3, 0, 0], [0, 0, 0]]))
    text = rgm.to_triples(w, "knn")
    lines = text.splitlines()
    assert lines[0] == "# knn 3 2"
    back = np.zeros((3, 3))
    for line in lines[1:]:
        i, j, v = line.split()
        back[int(i), int(j)] = float(v)
    np.testing.assert_array_equal(back, w.toarray())


def test_relation_graph_kind_checked():
    with pytest.raises(ValueError):
        rgm.RelationGraph(sp.csr_matrix((2, 2)), "bogus")
