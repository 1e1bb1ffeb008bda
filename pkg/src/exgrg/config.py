"""Training configuration, per-dataset presets and the ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .objective import LossWeights


class ConfigError(ValueError):
    pass


def _k(key: str, default, **kw):
    return field(default=default, metadata={"key": key, **kw})


@dataclass(frozen=True)
class TrainConfig:
    seed: int = _k("train.seed", 0)
    batch_size: int = _k("train.batch_size", 256)
    optimizer: str = _k("train.optimizer", "adam", choices=("adam", "adamw"))
    lr: float = _k("train.lr", 5e-4)
    weight_decay: float = _k("train.weight_decay", 0.01)
    iterations: int = _k("train.iterations", 100)
    checkpoint_every: int = _k("train.checkpoint_every", 0)

    alpha: float = _k("loss.alpha", 100.0)
    beta: float = _k("loss.beta", 80.0)
    gamma: float = _k("loss.gamma", 5.0)
    alpha1: float = _k("loss.alpha1", 0.2)
    alpha2: float = _k("loss.alpha2", 0.5)
    binary_g: bool = _k("loss.binary_g", False)
    s_o: str = _k("loss.s_o", "full", choices=("full", "self", "aug"))

    enc_activation: str = _k("encoder.activation", "relu", choices=("relu", "prelu", "elu", "identity"))
    enc_norm: str = _k("encoder.norm", "batch_norm", choices=("batch_norm", "none"))
    enc_layers: int = _k("encoder.layers", 2)
    enc_hidden: int = _k("encoder.hidden", 256)
    dim_h: int = _k("encoder.dim", 128)

    exp_activation: str = _k("expander.activation", "elu", choices=("relu", "prelu", "elu", "identity"))
    exp_norm: str = _k("expander.norm", "batch_norm", choices=("batch_norm", "none"))
    exp_layers: int = _k("expander.layers", 2)
    exp_hidden: int = _k("expander.hidden", 256)
    dim_z: int = _k("expander.dim", 256)

    psi_enabled: bool = _k("psi.enabled", True)
    psi_layers: int = _k("psi.layers", 4)
    psi_hidden_ratio: int = _k("psi.hidden_ratio", 2)
    psi_activation: str = _k("psi.activation", "elu", choices=("relu", "elu", "identity"))

    pe1: float = _k("augment.pe1", 0.2)
    pn1: float = _k("augment.pn1", 0.3)
    pe2: float = _k("augment.pe2", 0.4)
    pn2: float = _k("augment.pn2", 0.4)
    mask_mode: str = _k("augment.mask_mode", "column", choices=("column", "entry"))

    intra: bool = _k("relgraph.intra", False)
    metric: str = _k("relgraph.metric", "cosine", choices=("cosine", "neg_euclidean"))
    stats_scale: float = _k("relgraph.stats_scale", 0.05)
    use_aug: bool = _k("relgraph.aug.enabled", True)
    knn_k: int = _k("relgraph.knn.k", 32)
    knn_standalone: bool = _k("relgraph.knn.standalone", False)
    use_adj: bool = _k("relgraph.adj.enabled", False)
    use_adj_filtered: bool = _k("relgraph.adj_filtered.enabled", True)
    use_lappe: bool = _k("relgraph.lappe.enabled", True)
    lappe_k: int = _k("relgraph.lappe.k", 8)
    lappe_freq: int = _k("relgraph.lappe.freq", 32)
    use_rwse: bool = _k("relgraph.rwse.enabled", True)
    rwse_k: int = _k("relgraph.rwse.k", 80)
    rwse_kernel: int = _k("relgraph.rwse.kernel", 24)
    rwse_filtered: bool = _k("relgraph.rwse.filtered", False)
    use_signnet: bool = _k("relgraph.signnet.enabled", True)
    signnet_k: int = _k("relgraph.signnet.k", 4)
    signnet_freq: int = _k("relgraph.signnet.freq", 10)
    signnet_arch: str = _k("relgraph.signnet.arch", "deepset", choices=("deepset", "mlp"))
    signnet_hidden: int = _k("relgraph.signnet.hidden", 16)
    signnet_trainable: bool = _k("relgraph.signnet.trainable", False)
    laplacian_normalized: bool = _k("pse.normalized_laplacian", True)

    use_cluster: bool = _k("cluster.enabled", True)
    num_prototypes: int = _k("cluster.K", 64)
    tau: float = _k("cluster.tau", 0.1)
    epsilon: float = _k("cluster.epsilon", 0.05)
    sinkhorn_iters: int = _k("cluster.iters", 6)
    kg_ratio: float = _k("cluster.kg_ratio", 12.0)

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            choices = f.metadata.get("choices")
            if choices and v not in choices:
                raise ConfigError(f"{f.metadata['key']}: {v!r} is not one of {', '.join(choices)}")
        if self.batch_size <= 0 or self.batch_size % 2:
            raise ConfigError(f"train.batch_size: must be a positive even number, got {self.batch_size}")
        for f in dataclasses.fields(self):
            key = f.metadata["key"]
            v = getattr(self, f.name)
            if key.startswith("augment.p") and not 0.0 <= v <= 1.0:
                raise ConfigError(f"{key}: probability must be in [0, 1], got {v}")
        positive = ("enc_layers", "enc_hidden", "dim_h", "exp_layers", "exp_hidden", "dim_z", "psi_layers",
                    "psi_hidden_ratio", "knn_k", "lappe_k", "lappe_freq", "rwse_k", "rwse_kernel",
                    "signnet_k", "signnet_freq", "signnet_hidden", "sinkhorn_iters")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{key_of(name)}: must be >= 1, got {getattr(self, name)}")
        for name in ("lr", "tau", "epsilon", "stats_scale", "kg_ratio"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{key_of(name)}: must be > 0, got {getattr(self, name)}")
        if self.num_prototypes < 2:
            raise ConfigError(f"cluster.K: need at least 2 prototypes, got {self.num_prototypes}")
        if self.iterations < 0 or self.checkpoint_every < 0 or self.weight_decay < 0:
            raise ConfigError("train.iterations, train.checkpoint_every and train.weight_decay must be >= 0")
        try:
            self.loss_weights
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.gamma, self.alpha1, self.alpha2)

    @property
    def k_g(self) -> int:
        return max(1, int(round(self.kg_ratio * self.batch_size)))

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


_FIELDS = {f.metadata["key"]: f for f in dataclasses.fields(TrainConfig)}
_NAMES = {f.name: f.metadata["key"] for f in dataclasses.fields(TrainConfig)}


def key_of(name: str) -> str:
    return _NAMES[name]


def _convert(key: str, raw: str):
    f = _FIELDS[key]
    kind = type(f.default)
    text = raw.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot read {text!r} as {kind.__name__}") from None


# Per-dataset settings; widths are the published ones and usually too large
# for a single CPU core, so desk-scale runs override the dims.
_TABLE6_COLUMNS = ("wikics", "amzcomp", "amzphoto", "cocs", "cophy", "cora", "citeseer", "pubmed", "dblp")
_TABLE6_ROWS = {
    "train.batch_size": (3072, 3072, 3072, 2560, 2048, 3072, 2048, 2560, 3072),
    "train.optimizer": ("adamw",) * 5 + ("adam",) * 4,
    "train.lr": (1e-4, 1e-4, 5e-5, 5e-6, 1e-5, 5e-4, 5e-5, 1e-4, 5e-4),
    "train.iterations": (1000, 9000, 9000, 2000, 6000, 5000, 10000, 10000, 10000),
    "loss.alpha": (40, 100, 80, 60, 60, 100, 40, 80, 100),
    "loss.beta": (10, 80, 10, 10, 100, 80, 100, 10, 10),
    "loss.gamma": (5,) * 9,
    "encoder.activation": ("prelu",) * 5 + ("relu", "prelu", "relu", "relu"),
    "encoder.norm": ("batch_norm",) * 6 + ("none", "batch_norm", "none"),
    "encoder.layers": (2,) * 9,
    "encoder.hidden": (1024,) * 9,
    "encoder.dim": (512, 512, 1024, 512, 512, 1024, 1024, 512, 1024),
    "expander.activation": ("prelu",) * 5 + ("elu",) * 4,
    "expander.norm": ("batch_norm",) * 4 + ("none", "batch_norm", "batch_norm", "none", "batch_norm"),
    "expander.layers": (2,) * 9,
    "expander.hidden": (2048, 2048, 1024, 2048, 512, 1024, 2048, 512, 512),
    "expander.dim": (1024, 1024, 1024, 1024, 128, 1024, 2048, 1024, 1024),
    "loss.alpha2": (0.05, 0.02, 0.5, 0.2, 2, 0.5, 0.02, 0.2, 2),
    "psi.layers": (3, 3, 3, 3, 3, 4, 2, 3, 4),
    "psi.hidden_ratio": (2,) * 9,
    "augment.pe1": (0.2, 0.5, 0.4, 0.3, 0.4, 0.2, 0.2, 0.4, 0.1),
    "augment.pn1": (0.2, 0.2, 0.1, 0.3, 0.1, 0.3, 0.3, 0.0, 0.1),
    "augment.pe2": (0.3, 0.4, 0.1, 0.2, 0.1, 0.4, 0.0, 0.1, 0.4),
    "augment.pn2": (0.1, 0.1, 0.2, 0.4, 0.4, 0.4, 0.2, 0.2, 0.0),
    "relgraph.knn.standalone": (False,) * 4 + (True, False, True, False, False),
    "relgraph.knn.k": (10, 12, 80, 8, 64, 32, 8, 4, 32),
    "relgraph.lappe.k": (32, 16, 8, 48, 4, 8, 24, 8, 48),
    "relgraph.lappe.freq": (40, 56, 8, 32, 16, 32, 64, 48, 40),
    "relgraph.rwse.k": (40, 64, 16, 8, 32, 80, 40, 56, 56),
    "relgraph.rwse.kernel": (20, 16, 8, 16, 8, 24, 16, 12, 20),
    "relgraph.rwse.filtered": (True,) * 4 + (False, False, True, True, True),
    "relgraph.signnet.k": (48, 32, 80, 4, 8, 4, 8, 32, 16),
    "relgraph.signnet.freq": (8, 16, 24, 10, 20, 10, 8, 12, 10),
    "relgraph.signnet.arch": ("deepset", "deepset", "mlp", "mlp", "mlp", "deepset", "mlp", "mlp", "mlp"),
    "cluster.K": (64,) * 6 + (128, 64, 64),
    "cluster.tau": (0.1,) * 9,
    "cluster.iters": (6,) * 9,
    "cluster.epsilon": (0.05,) * 9,
    "cluster.kg_ratio": (32, 8, 4, 14, 48, 12, 32, 8, 32),
    "loss.alpha1": (1, 0.01, 0.2, 0.01, 2, 0.2, 0.01, 0.02, 0.5),
}


def preset_values(name: str) -> dict[str, object]:
    name = name.lower()
    if name not in _TABLE6_COLUMNS:
        raise ConfigError(f"preset: unknown dataset {name!r}; known: {', '.join(_TABLE6_COLUMNS)}")
    col = _TABLE6_COLUMNS.index(name)
    out = {}
    for key, row in _TABLE6_ROWS.items():
        kind = type(_FIELDS[key].default)
        out[key] = kind(row[col])
    return out


PRESETS = _TABLE6_COLUMNS


def preset(name: str, **overrides) -> TrainConfig:
    """Per-dataset configuration; ``overrides`` use field names (``dim_h=64``)."""
    return from_mapping(preset_values(name)).replace(**overrides)


def from_mapping(values: dict[str, object]) -> TrainConfig:
    kwargs = {}
    for key, v in values.items():
        if key not in _FIELDS:
            raise ConfigError(f"{key}: unknown configuration key")
        f = _FIELDS[key]
        kwargs[f.name] = _convert(key, v) if isinstance(v, str) else v
    return TrainConfig(**kwargs)


def parse_config(text: str) -> TrainConfig:
    """Read ``key = value`` lines; ``#`` starts a comment.

    An optional ``preset = <dataset>`` line seeds the values from the
    per-dataset table before the other keys apply.
    """
    values: dict[str, object] = {}
    base: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {body!r}")
        key, raw = (s.strip() for s in body.split("=", 1))
        if key == "preset":
            base = preset_values(raw)
            continue
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: {key}: unknown configuration key")
        if key in values:
            raise ConfigError(f"line {lineno}: {key}: set twice")
        values[key] = _convert(key, raw)
    return from_mapping({**base, **values})


def load_config(path) -> TrainConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    return parse_config(text)


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        text = repr(v) if isinstance(v, float) else str(v).lower() if isinstance(v, bool) else str(v)
        lines.append(f"{f.metadata['key']} = {text}")
    return "\n".join(lines) + "\n"
