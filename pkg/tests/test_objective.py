import numpy as np
import pytest
import scipy.sparse as sp

from exgrg import autodiff as ad
from exgrg import clustering as cl
from exgrg import objective as obj
from exgrg.relgraph import RelationGraph


def _pairwise_oracle(z, g):
    total = 0.0
    for i in range(len(z)):
        for j in range(len(z)):
            total += g[i, j] * np.sum((z[i] - z[j]) ** 2)
    return total


class TestVariance:
    def test_matches_numpy(self):
        z = np.random.default_rng(0).standard_normal((10, 4)) * np.array([0.1, 0.5, 2.0, 1.0])
        want = np.sum(np.maximum(0, 1 - np.sqrt(np.var(z, axis=0, ddof=1) + 1e-4)))
        assert obj.variance_loss(z).item() == pytest.approx(want, rel=1e-13)

    def test_collapsed_columns(self):
        assert obj.variance_loss(np.ones((5, 3))).item() == pytest.approx(3 * (1 - 0.01))

    def test_needs_two_rows(self):
        with pytest.raises(ValueError):
            obj.variance_loss(np.ones((1, 3)))


class TestCovariance:
    def test_matches_numpy(self):
        z = np.random.default_rng(1).standard_normal((12, 5))
        c = np.cov(z, rowvar=False)
        want = np.sum(c**2) - np.sum(np.diag(c) ** 2)
        assert obj.covariance_loss(z).item() == pytest.approx(want, rel=1e-12)

    def test_single_column_is_zero(self):
        assert obj.covariance_loss(np.random.default_rng(0).standard_normal((6, 1))).item() == 0.0

    def test_duplicated_column(self):
        x = np.random.default_rng(2).standard_normal((8, 1))
        v = np.var(x, ddof=1)
        assert obj.covariance_loss(np.hstack([x, x])).item() == pytest.approx(2 * v**2, rel=1e-12)


class TestInvariance:
    def test_matches_pairwise_loop(self):
        rng = np.random.default_rng(3)
        z = rng.standard_normal((9, 4))
        g = rng.random((9, 9)) * (rng.random((9, 9)) < 0.4)
        assert obj.invariance_loss(z, g).item() == pytest.approx(_pairwise_oracle(z, g), rel=1e-11)

    def test_accepts_relation_graph(self):
        rng = np.random.default_rng(4)
        z = rng.standard_normal((6, 2))
        w = sp.csr_matrix(np.triu(rng.random((6, 6)), 1))
        a = obj.invariance_loss(z, RelationGraph(w, "knn")).item()
        assert a == pytest.approx(_pairwise_oracle(z, w.toarray()), rel=1e-12)

    def test_identical_rows_zero(self):
        z = np.tile([[1.0, -2.0]], (4, 1))
        assert obj.invariance_loss(z, np.ones((4, 4))).item() == pytest.approx(0.0, abs=1e-12)

    def test_shape_check(self):
        with pytest.raises(ad.ShapeError):
            obj.invariance_loss(np.ones((3, 2)), np.ones((4, 4)))

    def test_gradient(self):
        rng = np.random.default_rng(5)
        z, g = rng.standard_normal((5, 3)), rng.random((5, 5))
        assert ad.finite_diff_check(lambda v: obj.invariance_loss(v[0], v[1]), [z, g]) < 1e-4


class TestRegularizer:
    def test_value(self):
        assert obj.relation_regularizer(np.array([[0, 0.5], [2.0, 0]])).item() == -4.25

    def test_binarize_is_constant(self):
        tape = ad.Tape()
        g = tape.parameter([[0.2, 0.5], [0.7, 0.0]])
        b = obj.binarize(g)
        assert not b.on_tape
        np.testing.assert_array_equal(b.value, [[0, 1], [1, 0]])


class TestTotal:
    def _parts(self):
        rng = np.random.default_rng(6)
        z = rng.standard_normal((6, 4))
        g = rng.random((6, 6))
        np.fill_diagonal(g, 0)
        h, c = rng.standard_normal((6, 3)), rng.standard_normal((4, 3))
        log_p = cl.assign_log_probabilities(h, c, 0.1)
        q = cl.sinkhorn(h @ c.T, 0.05, 3)
        pairs = cl.alignment_pairs(6, [(0, 3), (1, 4), (2, 5)])
        return z, g, log_p, q, pairs

    def test_weighted_sum(self):
        z, g, log_p, q, pairs = self._parts()
        w = obj.LossWeights(1.5, 2.0, 0.3, 0.7, 0.1)
        total, rep = obj.total_loss(z, g, log_p, q, pairs, w)
        want = 1.5 * rep.L_V + 2.0 * rep.L_C + 0.3 * rep.L_Iprime + 0.7 * rep.L_O + 0.1 * rep.L_R
        assert total.item() == pytest.approx(want, rel=1e-14)
        assert rep.L_O == pytest.approx(cl.ot_alignment_loss(log_p, q, pairs).item())
        assert rep.row()[:6] == [rep.L_V, rep.L_C, rep.L_Iprime, rep.L_O, rep.L_R, rep.total]

    def test_no_clustering(self):
        z, g, *_ = self._parts()
        _, rep = obj.total_loss(z, g, None, None, None, obj.LossWeights())
        assert rep.L_O == 0.0

    def test_lambdas_reported(self):
        z, g, log_p, q, pairs = self._parts()
        _, rep = obj.total_loss(z, g, log_p, q, pairs, obj.LossWeights(), np.array([[0.25, 0.75]]))
        assert rep.lambdas == (0.25, 0.75)

    def test_weight_validation(self):
        with pytest.raises(ValueError):
            obj.LossWeights(alpha=-1.0)
        with pytest.raises(ValueError):
            obj.LossWeights(gamma=float("nan"))
