import numpy as np
import pytest
import scipy.sparse as sp

from exgrg import autodiff as ad
from exgrg import nn


def _edge():
    return sp.csr_matrix(np.array([[0.0, 1.0], [1.0, 0.0]]))


class TestNormalizeAdjacency:
    def test_single_edge(self):
        np.testing.assert_allclose(nn.normalize_adjacency(_edge()).toarray(), np.full((2, 2), 0.5))

    def test_empty_graph_is_identity(self):
        np.testing.assert_array_equal(nn.normalize_adjacency(sp.csr_matrix((3, 3))).toarray(), np.eye(3))

    def test_triangle(self):
        a = sp.csr_matrix(np.ones((3, 3)) - np.eye(3))
        np.testing.assert_allclose(nn.normalize_adjacency(a).toarray(), np.full((3, 3), 1 / 3))

    def test_symmetric(self):
        a = sp.random(30, 30, density=0.1, random_state=0)
        a = ((a + a.T) > 0).astype(float)
        a.setdiag(0)
        n = nn.normalize_adjacency(a)
        assert abs(n - n.T).max() < 1e-15


class TestEncoder:
    def test_hand_example(self):
        layer = nn.GCNLayer(ad.constant(np.eye(2)), "identity", "none")
        h = nn.encoder_forward([layer], nn.normalize_adjacency(_edge()), np.eye(2))
        np.testing.assert_allclose(h.value, np.full((2, 2), 0.5))

    def test_no_edges_reduces_to_mlp(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((6, 4))
        w = rng.standard_normal((4, 3))
        layer = nn.GCNLayer(ad.constant(w), "relu", "batch_norm")
        h = nn.encoder_forward([layer], nn.normalize_adjacency(sp.csr_matrix((6, 6))), x)
        np.testing.assert_array_equal(h.value, ad.relu(ad.batch_norm(x @ w)).value)

    def test_output_width(self):
        rng = np.random.default_rng(0)
        spec = nn.LayerStackSpec((5, 16, 7), "prelu", "batch_norm", "prelu", "batch_norm", bias=False)
        params = nn.init_parameters("enc", spec, rng)
        layers = nn.gcn_layers("enc", spec, nn.lift(params, None))
        adj = nn.normalize_adjacency(sp.csr_matrix((10, 10)))
        assert nn.encoder_forward(layers, adj, rng.standard_normal((10, 5))).shape == (10, 7)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(1)
        a = sp.random(12, 12, density=0.3, random_state=1)
        a = ((a + a.T) > 0).astype(float)
        a.setdiag(0)
        a.eliminate_zeros()
        x = rng.standard_normal((12, 4))
        spec = nn.LayerStackSpec((4, 8, 3), "elu", "batch_norm", "relu", "none", bias=False)
        layers = nn.gcn_layers("e", spec, nn.lift(nn.init_parameters("e", spec, rng), None))
        perm = rng.permutation(12)
        p = sp.csr_matrix((np.ones(12), (np.arange(12), perm)), shape=(12, 12))
        h = nn.encoder_forward(layers, nn.normalize_adjacency(a), x).value
        hp = nn.encoder_forward(layers, nn.normalize_adjacency(p @ a @ p.T), x[perm]).value
        np.testing.assert_allclose(hp, h[perm], atol=1e-12)

    def test_shape_mismatch(self):
        layer = nn.GCNLayer(ad.constant(np.eye(3)))
        with pytest.raises(ad.ShapeError):
            nn.encoder_forward([layer], nn.normalize_adjacency(_edge()), np.eye(2))

    def test_gradients(self):
        rng = np.random.default_rng(2)
        a = sp.random(8, 8, density=0.4, random_state=3)
        a = ((a + a.T) > 0).astype(float)
        a.setdiag(0)
        adj = nn.normalize_adjacency(a)
        x = rng.standard_normal((8, 3))
        w1, w2 = rng.standard_normal((3, 5)), rng.standard_normal((5, 2))
        slope = np.array([[0.25]])

        def f(v):
            layers = [nn.GCNLayer(v[0], "prelu", "batch_norm", v[2]), nn.GCNLayer(v[1], "elu", "none")]
            return ad.sum(ad.square(nn.encoder_forward(layers, adj, x)))

        assert ad.finite_diff_check(f, [w1, w2, slope]) < 1e-4


class TestMLP:
    def test_identity_layer(self):
        h = np.random.default_rng(0).standard_normal((4, 3))
        layer = nn.DenseLayer(ad.constant(np.eye(3)), ad.constant(np.zeros((1, 3))), "identity", "none")
        np.testing.assert_array_equal(nn.expander_forward([layer], h).value, h)

    def test_zero_weights_give_bias_rows(self):
        b = np.array([[1.0, -2.0]])
        layer = nn.DenseLayer(ad.constant(np.zeros((3, 2))), ad.constant(b), "identity", "none")
        np.testing.assert_array_equal(nn.mlp_forward([layer], np.ones((4, 3))).value, np.repeat(b, 4, axis=0))

    def test_gradients(self):
        rng = np.random.default_rng(3)
        spec = nn.LayerStackSpec((3, 6, 4), "elu", "batch_norm")
        params = nn.init_parameters("m", spec, rng)
        params = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in params.items()}
        names = sorted(params)
        x = rng.standard_normal((7, 3))

        def f(v):
            layers = nn.dense_layers("m", spec, dict(zip(names, v)))
            return ad.sum(ad.square(nn.mlp_forward(layers, x)))

        assert ad.finite_diff_check(f, [params[k] for k in names]) < 1e-4


class TestInit:
    def test_seeded(self):
        spec = nn.LayerStackSpec((4, 5, 6))
        a = nn.init_parameters("p", spec, np.random.default_rng(0))
        b = nn.init_parameters("p", spec, np.random.default_rng(0))
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])

    def test_glorot_bound_and_zero_bias(self):
        spec = nn.LayerStackSpec((40, 60, 10), "prelu")
        p = nn.init_parameters("p", spec, np.random.default_rng(0))
        bound = np.sqrt(6 / (40 + 60))
        assert np.abs(p["p.0.weight"]).max() <= bound
        assert np.abs(p["p.0.weight"]).max() > 0.9 * bound
        np.testing.assert_array_equal(p["p.0.bias"], 0)
        assert p["p.0.slope"].shape == (1, 1)
        assert "p.1.slope" not in p

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            nn.LayerStackSpec((3,))
        with pytest.raises(ValueError):
            nn.LayerStackSpec((3, 2), activation="tanh")
