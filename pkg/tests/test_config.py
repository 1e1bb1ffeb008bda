import pytest

from exgrg import config


class TestPresets:
    def test_cora_row(self):
        cfg = config.preset("cora")
        assert (cfg.batch_size, cfg.lr, cfg.alpha, cfg.beta, cfg.alpha2) == (3072, 5e-4, 100.0, 80.0, 0.5)
        assert (cfg.dim_h, cfg.dim_z, cfg.knn_k, cfg.num_prototypes) == (1024, 1024, 32, 64)
        assert cfg.k_g == 12 * 3072

    def test_amzcomp_row(self):
        cfg = config.preset("amzcomp")
        assert (cfg.knn_k, cfg.lappe_k, cfg.iterations) == (12, 16, 9000)
        assert (cfg.alpha, cfg.beta, cfg.gamma, cfg.alpha1, cfg.alpha2) == (100, 80, 5, 0.01, 0.02)
        assert cfg.k_g == 8 * 3072
        assert cfg.optimizer == "adamw" and cfg.enc_activation == "prelu"

    def test_shared_rows(self):
        for name in config.PRESETS:
            cfg = config.preset(name)
            assert (cfg.tau, cfg.epsilon, cfg.sinkhorn_iters, cfg.enc_layers, cfg.exp_layers) == (0.1, 0.05, 6, 2, 2)

    def test_flag_rows(self):
        arch = [config.preset(n).signnet_arch for n in config.PRESETS]
        assert arch == ["deepset", "deepset", "mlp", "mlp", "mlp", "deepset", "mlp", "mlp", "mlp"]
        assert [config.preset(n).knn_standalone for n in config.PRESETS] == [False] * 4 + [True, False, True, False, False]
        assert [config.preset(n).enc_norm for n in ("citeseer", "dblp", "cora")] == ["none", "none", "batch_norm"]

    def test_every_preset_builds(self):
        for name in config.PRESETS:
            assert config.preset(name).gamma == 5.0

    def test_overrides(self):
        assert config.preset("cora", dim_h=64).dim_h == 64

    def test_unknown(self):
        with pytest.raises(config.ConfigError, match="unknown dataset"):
            config.preset("mnist")


class TestParse:
    def test_keys_and_comments(self):
        cfg = config.parse_config("preset = cora\n# comment\ntrain.batch_size = 32  # even\nloss.binary_g = true\n")
        assert cfg.batch_size == 32 and cfg.binary_g and cfg.alpha == 100.0

    def test_unknown_key(self):
        with pytest.raises(config.ConfigError, match="train.batchsize"):
            config.parse_config("train.batchsize = 4\n")

    def test_bad_value(self):
        with pytest.raises(config.ConfigError, match="train.lr"):
            config.parse_config("train.lr = fast\n")

    def test_duplicate(self):
        with pytest.raises(config.ConfigError, match="twice"):
            config.parse_config("train.lr = 1\ntrain.lr = 2\n")

    def test_missing_equals(self):
        with pytest.raises(config.ConfigError, match="line 1"):
            config.parse_config("train.lr 1\n")

    def test_dump_round_trip(self):
        cfg = config.preset("pubmed", lr=1.25e-4, metric="neg_euclidean")
        assert config.parse_config(config.dump_config(cfg)) == cfg

    def test_missing_file(self, tmp_path):
        with pytest.raises(config.ConfigError):
            config.load_config(tmp_path / "nope.cfg")


class TestValidation:
    @pytest.mark.parametrize("changes", [
        {"batch_size": 7}, {"pe1": 1.5}, {"metric": "l1"}, {"alpha": -1.0}, {"num_prototypes": 1},
        {"tau": 0.0}, {"dim_h": 0}, {"iterations": -1},
    ])
    def test_rejected(self, changes):
        with pytest.raises(config.ConfigError):
            config.TrainConfig(**changes)

    def test_loss_weights(self):
        w = config.TrainConfig(alpha1=0.7).loss_weights
        assert w.alpha1 == 0.7 and w.gamma == 5.0
