"""Pre-training loop, Adam/AdamW, checkpoints and the metrics trace.

Each iteration draws its randomness from ``default_rng([seed, t])``, so a run
resumed from a checkpoint at iteration t replays exactly the same views and
batches as an uninterrupted one.
"""

from __future__ import annotations

import csv
import io
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import clustering, nn, objective, pse, relgraph
from .config import ConfigError, TrainConfig, dump_config, parse_config
from .graph import AugmentConfig, SourceGraph, build_views, sample_batch

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
MAGIC = b"EXGRG01\0"
OPT_PREFIX = "opt."


class NumericAbort(RuntimeError):
    """A loss or gradient turned non-finite; carries the last per-term values."""


class CheckpointError(ValueError):
    pass


# ------------------------------------------------------------------ model


@dataclass(frozen=True)
class ModelSpec:
    encoder: nn.LayerStackSpec
    expander: nn.LayerStackSpec
    aggregator: relgraph.AggregatorNet
    signnet: pse.SignNetSpec | None

    @classmethod
    def from_config(cls, cfg: TrainConfig, d_in: int) -> "ModelSpec":
        enc_dims = (d_in,) + (cfg.enc_hidden,) * (cfg.enc_layers - 1) + (cfg.dim_h,)
        exp_dims = (cfg.dim_h,) + (cfg.exp_hidden,) * (cfg.exp_layers - 1) + (cfg.dim_z,)
        encoder = nn.LayerStackSpec(enc_dims, cfg.enc_activation, cfg.enc_norm, cfg.enc_activation, cfg.enc_norm, bias=False)
        expander = nn.LayerStackSpec(exp_dims, cfg.exp_activation, cfg.exp_norm, "identity", "none")
        agg = relgraph.AggregatorNet(
            relgraph.aggregator_spec(cfg.psi_layers, cfg.psi_hidden_ratio, cfg.psi_activation),
            stats_scale=cfg.stats_scale,
        )
        sn = pse.SignNetSpec(cfg.signnet_freq, cfg.signnet_hidden, cfg.signnet_arch) if cfg.use_signnet else None
        return cls(encoder, expander, agg, sn)


def init_params(cfg: TrainConfig, d_in: int) -> dict[str, np.ndarray]:
    spec = ModelSpec.from_config(cfg, d_in)
    rng = np.random.default_rng(cfg.seed)
    params = nn.init_parameters("encoder", spec.encoder, rng)
    params.update(nn.init_parameters("expander", spec.expander, rng))
    params.update(spec.aggregator.init(rng))
    if cfg.use_cluster:
        params["prototypes"] = clustering.normalize_prototypes(rng.standard_normal((cfg.num_prototypes, cfg.dim_h)))
    if spec.signnet is not None:
        params.update(pse.init_signnet(spec.signnet, rng))
    return params


def trainable_names(cfg: TrainConfig, params: dict[str, np.ndarray]) -> list[str]:
    names = [k for k in params if not k.startswith("signnet.") or cfg.signnet_trainable]
    if not cfg.psi_enabled:
        names = [k for k in names if not k.startswith("psi.")]
    return names


@dataclass
class Precomputed:
    """Source-graph encodings, built once before training."""

    lappe: pse.Encoding | None = None
    rwse: pse.Encoding | None = None
    signnet_vectors: np.ndarray | None = None

    @classmethod
    def build(cls, g: SourceGraph, cfg: TrainConfig) -> "Precomputed":
        out = cls()
        dec = None
        if cfg.use_lappe or cfg.use_signnet:
            lap = pse.laplacian(g, cfg.laplacian_normalized)
            dec = pse.eigendecompose_symmetric(lap, laplacian_kind="normalized" if cfg.laplacian_normalized else "unnormalized")
        if cfg.use_lappe:
            out.lappe = pse.lappe(g, cfg.lappe_freq, cfg.laplacian_normalized, dec)
        if cfg.use_signnet:
            _, out.signnet_vectors = pse.nonzero_modes(g, cfg.signnet_freq, cfg.laplacian_normalized, dec)
        if cfg.use_rwse:
            out.rwse = pse.rwse(g, cfg.rwse_kernel, seed=cfg.seed)
        return out


def embed(params: dict[str, np.ndarray], cfg: TrainConfig, g: SourceGraph) -> np.ndarray:
    """Frozen encoder on the un-augmented source graph."""
    spec = ModelSpec.from_config(cfg, g.num_features)
    layers = nn.gcn_layers("encoder", spec.encoder, nn.lift(params, None))
    return nn.encoder_forward(layers, nn.normalize_adjacency(g.adjacency), g.features).value


# -------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    kind: str = "adam"
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


def optimizer_step(
    params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState, lr: float
) -> dict[str, np.ndarray]:
    """One bias-corrected Adam step on the parameters named in ``grads``.

    AdamW shrinks each of those parameters by ``lr * weight_decay`` first.
    """
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ad.ShapeError(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericAbort(f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    out = dict(params)
    for name, g in grads.items():
        m = ADAM_BETA1 * state.m.get(name, 0.0) + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * state.v.get(name, 0.0) + (1.0 - ADAM_BETA2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - ADAM_BETA1**t)
        v_hat = v / (1.0 - ADAM_BETA2**t)
        p = params[name]
        if state.kind == "adamw":
            p = p * (1.0 - lr * state.weight_decay)
        out[name] = p - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return out


# -------------------------------------------------------------- iteration


@dataclass
class StepOutput:
    report: objective.LossReport
    grads: dict[str, np.ndarray]
    std_z: float
    graphs: list[relgraph.RelationGraph]
    aggregate: np.ndarray
    h: np.ndarray
    z: np.ndarray


def graph_names(cfg: TrainConfig) -> list[str]:
    """Relation graphs of S_G in aggregation order."""
    names = []
    if cfg.use_aug:
        names.append("aug")
    if cfg.knn_standalone:
        names.append("knn")
    if cfg.use_adj:
        names.append("adj")
    if cfg.use_adj_filtered:
        names.append("adj_filtered")
    if cfg.use_lappe:
        names.append("lappe")
    if cfg.use_rwse:
        names.append("rwse_filtered" if cfg.rwse_filtered else "rwse")
    if cfg.use_signnet:
        names.append("signnet")
    if cfg.use_cluster:
        names.append("cluster")
    if not names:
        raise ConfigError("relgraph: every relation graph is disabled")
    return names


def compute_step(
    params: dict[str, np.ndarray], g: SourceGraph, cfg: TrainConfig, pre: Precomputed, t: int
) -> StepOutput:
    """Forward, relation graphs, loss and gradients for iteration ``t``.

    Nothing is mutated: every relation graph comes from the parameters as
    passed in.
    """
    spec = ModelSpec.from_config(cfg, g.num_features)
    rng = np.random.default_rng([cfg.seed, t])
    views = build_views(
        g,
        AugmentConfig(cfg.pe1, cfg.pn1, cfg.mask_mode),
        AugmentConfig(cfg.pe2, cfg.pn2, cfg.mask_mode),
        rng,
    )
    batch = sample_batch(views, cfg.batch_size, rng)

    tape = ad.Tape()
    names = trainable_names(cfg, params)
    leaves = nn.lift({k: params[k] for k in names}, tape)
    frozen = nn.lift({k: v for k, v in params.items() if k not in leaves}, None)
    tp = {**frozen, **leaves}

    norm_adj = nn.normalize_adjacency(views.block_adjacency)
    h_all = nn.encoder_forward(nn.gcn_layers("encoder", spec.encoder, tp), norm_adj, views.stacked_features)
    h = ad.take_rows(h_all, batch.batch_nodes)
    z = nn.expander_forward(nn.dense_layers("expander", spec.expander, tp), h)

    # E-step on detached inputs
    hd = h.value
    kinds = graph_names(cfg)
    need_knn = cfg.knn_standalone or cfg.use_adj_filtered or (cfg.use_rwse and cfg.rwse_filtered)
    knn = relgraph.g_knn(hd, batch, cfg.knn_k, cfg.metric, cfg.intra) if need_knn else None
    adj = relgraph.g_adj(g, batch) if (cfg.use_adj or cfg.use_adj_filtered) else None
    log_p = q = None
    graphs: list[relgraph.RelationGraph] = []
    on_tape: dict[int, ad.Tensor] = {}
    for kind in kinds:
        if kind == "aug":
            graphs.append(relgraph.g_aug(batch))
        elif kind == "knn":
            graphs.append(knn)
        elif kind == "adj":
            graphs.append(adj)
        elif kind == "adj_filtered":
            graphs.append(relgraph.g_adj_filtered(adj, knn))
        elif kind == "lappe":
            graphs.append(relgraph.g_pse(pre.lappe, batch, cfg.lappe_k, cfg.metric, cfg.intra))
        elif kind in ("rwse", "rwse_filtered"):
            rg = relgraph.g_pse(pre.rwse, batch, cfg.rwse_k, cfg.metric, cfg.intra)
            graphs.append(relgraph.g_rwse_filtered(rg, knn) if kind == "rwse_filtered" else rg)
        elif kind == "signnet":
            enc = pse.signnet_forward(pre.signnet_vectors, spec.signnet, tp)
            rg = relgraph.g_pse(pse.Encoding(enc.value, "signnet"), batch, cfg.signnet_k, cfg.metric, cfg.intra)
            if cfg.signnet_trainable:
                on_tape[len(graphs)] = _signnet_graph_on_tape(enc, batch, rg)
            graphs.append(rg)
        elif kind == "cluster":
            log_p = clustering.assign_log_probabilities(h, tp["prototypes"], cfg.tau)
            bank = clustering.PrototypeBank(params["prototypes"], cfg.tau, cfg.epsilon, cfg.sinkhorn_iters)
            q = clustering.sinkhorn_codes(hd, bank)
            graphs.append(relgraph.g_cluster(np.exp(log_p.value), cfg.k_g, batch, cfg.intra, log_p=log_p.value))

    if cfg.psi_enabled:
        agg, lambdas = relgraph.aggregate(graphs, spec.aggregator, tp, on_tape)
    else:
        lambdas = ad.constant(np.full((1, len(graphs)), 1.0 / len(graphs)))
        agg = ad.reshape(ad.matmul(lambdas, np.stack([rg.dense().ravel() for rg in graphs])), (batch.size, batch.size))
        for i, gt in on_tape.items():
            agg = ad.add(agg, ad.scalar_mul(gt, 1.0 / len(graphs)))
    if cfg.binary_g:
        agg = objective.binarize(agg)

    # M-step loss
    pairs = clustering.alignment_pairs(batch.size, batch.augment_pairs, cfg.s_o)
    loss, report = objective.total_loss(z, agg, log_p, q, pairs, cfg.loss_weights, lambdas)
    grads = tape.backward(loss)
    named = {k: grads[leaves[k].node_id] for k in names}
    std_z = float(np.std(z.value, axis=0, ddof=1).mean())
    return StepOutput(report, named, std_z, graphs, agg.value, hd, z.value)


def _signnet_graph_on_tape(enc: ad.Tensor, batch, rg: relgraph.RelationGraph) -> ad.Tensor:
    # cosine weights on the support chosen by the detached kNN; the selection
    # itself is piecewise constant and carries no gradient
    unit = ad.l2_normalize_rows(ad.take_rows(enc, batch.source_nodes))
    sim = ad.matmul(unit, ad.transpose(unit))
    support = (rg.dense() > 0).astype(np.float64)
    return ad.mul(sim, support)


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    reports: list[objective.LossReport]
    std_z: list[float]
    optimizer: OptimizerState
    iteration: int


def pretrain(
    g: SourceGraph,
    cfg: TrainConfig,
    resume: "Checkpoint | None" = None,
    checkpoint_dir=None,
    precomputed: Precomputed | None = None,
    stop_at: int | None = None,
) -> TrainResult:
    """Run iterations ``resume.iteration`` (or 0) up to ``stop_at`` (default ``cfg.iterations``)."""
    if cfg.use_signnet and cfg.signnet_trainable and cfg.metric != "cosine":
        raise ConfigError("relgraph.signnet.trainable: requires relgraph.metric = cosine")
    pre = precomputed or Precomputed.build(g, cfg)
    if resume is None:
        params = init_params(cfg, g.num_features)
        opt = OptimizerState(cfg.optimizer, cfg.weight_decay if cfg.optimizer == "adamw" else 0.0)
        start = 0
    else:
        params = dict(resume.params)
        opt = resume.optimizer or OptimizerState(cfg.optimizer, cfg.weight_decay if cfg.optimizer == "adamw" else 0.0)
        start = resume.iteration
    end = cfg.iterations if stop_at is None else stop_at
    reports, stds = [], []
    last = None
    for t in range(start, end):
        try:
            out = compute_step(params, g, cfg, pre, t)
            before = params.get("prototypes")
            params = optimizer_step(params, out.grads, opt, cfg.lr)
        except ad.NonFiniteError as exc:
            raise NumericAbort(f"iteration {t}: {exc}; last terms {last}") from exc
        except NumericAbort as exc:
            raise NumericAbort(f"iteration {t}: {exc}; terms {out.report}") from exc
        if not np.isfinite(out.report.total):
            raise NumericAbort(f"iteration {t}: non-finite loss; terms {out.report}")
        # an unmoved bank is already unit-norm; renormalizing would only add rounding
        if before is not None and not np.array_equal(before, params["prototypes"]):
            params["prototypes"] = clustering.normalize_prototypes(params["prototypes"])
        last = out.report
        reports.append(out.report)
        stds.append(out.std_z)
        if t % 100 == 0:
            log.info("iter %d total %.6g std_z %.4g", t, out.report.total, out.std_z)
        if checkpoint_dir is not None and cfg.checkpoint_every and (t + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"ckpt_{t + 1:06d}.bin", params, dump_config(cfg), t + 1, opt)
    return TrainResult(params, reports, stds, opt, end if end > start else start)


# -------------------------------------------------------------- checkpoint


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config_text: str
    iteration: int
    optimizer: OptimizerState | None = None

    @property
    def config(self) -> TrainConfig:
        return parse_config(self.config_text)


def save_checkpoint(path, params: dict[str, np.ndarray], config_text: str, iteration: int, opt: OptimizerState | None = None) -> None:
    arrays = dict(params)
    if opt is not None:
        arrays[f"{OPT_PREFIX}step"] = np.array([[float(opt.step)]])
        arrays[f"{OPT_PREFIX}weight_decay"] = np.array([[opt.weight_decay]])
        arrays[f"{OPT_PREFIX}kind.{opt.kind}"] = np.zeros((1, 1))
        for k, v in opt.m.items():
            arrays[f"{OPT_PREFIX}m.{k}"] = v
        for k, v in opt.v.items():
            arrays[f"{OPT_PREFIX}v.{k}"] = v
    buf = io.BytesIO()
    blob = config_text.encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<Q", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<QQ", iteration, len(arrays)))
    for name, arr in arrays.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
        if a.ndim != 2:
            raise ValueError(f"parameter {name} is not 2-D")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<Q", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<QQ", *a.shape))
        buf.write(a.tobytes(order="C"))
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc.strerror})") from None
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated at byte {pos} (need {n} more, file has {len(data)})")
        out = data[pos : pos + n]
        pos += n
        return out

    magic = take(len(MAGIC))
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}; expected format version {MAGIC!r}")
    (clen,) = struct.unpack("<Q", take(8))
    try:
        config_text = take(clen).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"{path}: config blob is not UTF-8") from exc
    iteration, count = struct.unpack("<QQ", take(16))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<Q", take(8))
        name = take(nlen).decode("utf-8")
        rows, cols = struct.unpack("<QQ", take(16))
        arrays[name] = np.frombuffer(take(8 * rows * cols), dtype="<f8").reshape(rows, cols).astype(np.float64)
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")

    params = {k: v for k, v in arrays.items() if not k.startswith(OPT_PREFIX)}
    opt = None
    if f"{OPT_PREFIX}step" in arrays:
        kind = next(k.rsplit(".", 1)[1] for k in arrays if k.startswith(f"{OPT_PREFIX}kind."))
        opt = OptimizerState(
            kind,
            float(arrays[f"{OPT_PREFIX}weight_decay"][0, 0]),
            int(arrays[f"{OPT_PREFIX}step"][0, 0]),
            {k[len(OPT_PREFIX) + 2 :]: v for k, v in arrays.items() if k.startswith(f"{OPT_PREFIX}m.")},
            {k[len(OPT_PREFIX) + 2 :]: v for k, v in arrays.items() if k.startswith(f"{OPT_PREFIX}v.")},
        )
    return Checkpoint(params, config_text, int(iteration), opt)


# ----------------------------------------------------------------- metrics


def metrics_header(num_graphs: int) -> list[str]:
    return ["iteration", "L_V", "L_C", "L_Iprime", "L_O", "L_R", "total"] + [
        f"lambda_{i + 1}" for i in range(num_graphs)
    ]


def write_metrics_csv(path, reports: list[objective.LossReport], start: int = 0, append: bool = False) -> None:
    """One row per iteration; floats in shortest round-trip form."""
    path = Path(path)
    new = not (append and path.exists())
    with open(path, "a" if append else "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(metrics_header(len(reports[0].lambdas) if reports else 0))
        for i, r in enumerate(reports):
            w.writerow([start + i] + [repr(float(x)) for x in r.row()])
