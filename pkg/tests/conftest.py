import pytest

from exgrg import config, graph


def tiny_config(**overrides):
    base = dict(
        batch_size=16, iterations=4, enc_hidden=12, dim_h=6, exp_hidden=12, dim_z=8, lappe_freq=3,
        lappe_k=3, rwse_kernel=4, rwse_k=3, signnet_freq=3, signnet_k=3, signnet_hidden=4, knn_k=3,
        num_prototypes=4, kg_ratio=2.0, lr=1e-3,
    )
    base.update(overrides)
    return config.preset("cora", **base)


@pytest.fixture
def tiny_graph():
    return graph.generate_sbm(2, 15, 0.4, 0.05, 5, seed=3)
