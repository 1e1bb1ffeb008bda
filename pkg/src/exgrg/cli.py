"""Command-line driver: ``python -m exgrg <command> ...``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric abort.
Every command writes ``manifest.json`` into its output directory before
computing anything.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from . import evaluation, nn, pse, relgraph, trainer
from .config import ConfigError, TrainConfig, dump_config, load_config
from .graph import GraphFormatError, SourceGraph, generate_sbm, load_graph, load_splits, save_graph

log = logging.getLogger("exgrg")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

EDGES, FEATURES, LABELS, SPLITS = "edges.txt", "features.csv", "labels.txt", "splits.txt"


class DataError(RuntimeError):
    pass


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _data_files(data_dir, need_labels: bool = False) -> dict[str, Path]:
    d = Path(data_dir)
    files = {"edges": d / EDGES, "features": d / FEATURES}
    for key, p in files.items():
        if not p.is_file():
            raise DataError(f"{p}: missing {key} file")
    if (d / LABELS).is_file():
        files["labels"] = d / LABELS
    elif need_labels:
        raise DataError(f"{d / LABELS}: label file is required for this command")
    if (d / SPLITS).is_file():
        files["splits"] = d / SPLITS
    return files


def write_manifest(out_dir, command: str, inputs: dict[str, Path], cfg: TrainConfig | None, seed, extra=None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": dump_config(cfg) if cfg is not None else None,
        "inputs": {str(p): _sha256(p) for p in inputs.values()},
        "output_dir": str(out.resolve()),
    }
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _load(files: dict[str, Path]) -> SourceGraph:
    return load_graph(files["edges"], files["features"], files.get("labels"))


def _load_checkpoint(path) -> trainer.Checkpoint:
    ckpt = trainer.load_checkpoint(path)
    try:
        ckpt.config
    except ConfigError as exc:
        raise trainer.CheckpointError(f"{path}: stored config is invalid: {exc}") from exc
    return ckpt


# ---------------------------------------------------------------- commands


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.iterations is not None:
        cfg = cfg.replace(iterations=args.iterations)
    files = _data_files(args.data)
    files["config"] = Path(args.config)
    out = Path(args.out)
    write_manifest(out, "pretrain", files, cfg, cfg.seed)
    g = _load(files)
    res = trainer.pretrain(g, cfg, checkpoint_dir=out)
    trainer.write_metrics_csv(out / "metrics.csv", res.reports)
    trainer.save_checkpoint(out / "checkpoint.bin", res.params, dump_config(cfg), res.iteration, res.optimizer)
    log.info("wrote %s", out / "checkpoint.bin")
    return EXIT_OK


def cmd_probe(args) -> int:
    files = _data_files(args.data, need_labels=True)
    files["checkpoint"] = Path(args.checkpoint)
    ckpt = _load_checkpoint(args.checkpoint)
    cfg = ckpt.config
    write_manifest(args.out, "probe", files, cfg, args.seed, {"trials": args.trials})
    g = _load(files)
    splits = load_splits(files["splits"]) if "splits" in files else None
    h = trainer.embed(ckpt.params, cfg, g)
    accs = evaluation.linear_probe(h, g.labels, evaluation.ProbeConfig(trials=args.trials, seed=args.seed), splits)
    with open(Path(args.out) / "probe.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["trial", "accuracy"])
        for i, a in enumerate(accs):
            w.writerow([i, repr(float(a))])
        w.writerow(["mean", repr(float(accs.mean()))])
        w.writerow(["std", repr(float(accs.std()))])
    print(f"accuracy {accs.mean():.4f} +- {accs.std():.4f} over {len(accs)} trials")
    return EXIT_OK


def cmd_pse(args) -> int:
    files = _data_files(args.data)
    write_manifest(args.out, "pse", files, None, args.seed, {"kind": args.kind, "freq": args.freq, "kernel": args.kernel})
    g = _load(files)
    if args.kind == "lappe":
        enc = pse.lappe(g, args.freq)
    elif args.kind == "rwse":
        enc = pse.rwse(g, args.kernel, seed=args.seed)
    else:
        spec = pse.SignNetSpec(args.freq, args.hidden, args.arch)
        enc = pse.signnet_encode(g, spec, pse.init_signnet(spec, np.random.default_rng(args.seed)))
    path = Path(args.out) / f"pse_{args.kind}.csv"
    np.savetxt(path, enc.matrix, delimiter=",", fmt="%.17g")
    if enc.flagged is not None and len(enc.flagged):
        log.warning("%d isolated nodes have zero rows: %s", len(enc.flagged), enc.flagged[:10].tolist())
    return EXIT_OK


_KIND_FLAGS = {
    "aug": {"use_aug": True},
    "knn": {"knn_standalone": True},
    "adj": {"use_adj": True},
    "adj_filtered": {"use_adj_filtered": True},
    "lappe": {"use_lappe": True},
    "rwse": {"use_rwse": True, "rwse_filtered": False},
    "rwse_filtered": {"use_rwse": True, "rwse_filtered": True},
    "signnet": {"use_signnet": True},
    "cluster": {"use_cluster": True},
    "aggregate": {},
}
_KIND_K = {"knn": "knn_k", "adj_filtered": "knn_k", "lappe": "lappe_k", "rwse": "rwse_k",
           "rwse_filtered": "rwse_k", "signnet": "signnet_k"}


def cmd_relgraph(args) -> int:
    files = _data_files(args.data)
    if args.checkpoint:
        files["checkpoint"] = Path(args.checkpoint)
        ckpt = _load_checkpoint(args.checkpoint)
        cfg, params = ckpt.config, ckpt.params
    else:
        cfg = load_config(args.config) if args.config else TrainConfig()
        params = None
    if args.config:
        files["config"] = Path(args.config)
    changes = dict(_KIND_FLAGS[args.kind], seed=args.seed)
    if args.k is not None and args.kind in _KIND_K:
        changes[_KIND_K[args.kind]] = args.k
    if args.batch_size is not None:
        changes["batch_size"] = args.batch_size
    cfg = cfg.replace(**changes)
    write_manifest(args.out, "relgraph", files, cfg, cfg.seed, {"kind": args.kind, "iteration": args.iteration})
    g = _load(files)
    if cfg.batch_size > 2 * g.num_nodes:
        cfg = cfg.replace(batch_size=2 * g.num_nodes)
    if params is None or any(k not in params for k in trainer.init_params(cfg, g.num_features)):
        params = {**trainer.init_params(cfg, g.num_features), **(params or {})}
    step = trainer.compute_step(params, g, cfg, trainer.Precomputed.build(g, cfg), args.iteration)
    if args.kind == "aggregate":
        weights = step.aggregate
    else:
        weights = step.graphs[trainer.graph_names(cfg).index(args.kind)].weights
    text = relgraph.to_triples(weights, args.kind)
    (Path(args.out) / f"relgraph_{args.kind}.txt").write_text(text, encoding="utf-8")
    return EXIT_OK


def cmd_metrics(args) -> int:
    files = _data_files(args.data)
    files["checkpoint"] = Path(args.checkpoint)
    ckpt = _load_checkpoint(args.checkpoint)
    cfg = ckpt.config
    write_manifest(args.out, "metrics", files, cfg, cfg.seed)
    g = _load(files)
    h = trainer.embed(ckpt.params, cfg, g)
    spec = trainer.ModelSpec.from_config(cfg, g.num_features)
    z = nn.expander_forward(nn.dense_layers("expander", spec.expander, nn.lift(ckpt.params, None)), h).value
    report = evaluation.metrics_report(h, z)
    with open(Path(args.out) / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k, v in report.items():
            w.writerow([k, repr(v) if isinstance(v, float) else v])
    return EXIT_OK


def cmd_gen_sbm(args) -> int:
    write_manifest(args.out, "gen-sbm", {}, None, args.seed, {
        "blocks": args.blocks, "nodes_per_block": args.nodes_per_block,
        "p_in": args.p_in, "p_out": args.p_out, "feature_dim": args.feature_dim, "noise": args.noise,
    })
    g = generate_sbm(args.blocks, args.nodes_per_block, args.p_in, args.p_out, args.feature_dim, args.seed, args.noise)
    save_graph(g, args.out)
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="exgrg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pretrain", help="self-supervised pre-training")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--iterations", type=int)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("probe", help="linear probe on frozen representations")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--trials", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("pse", help="dump a positional/structural encoding as CSV")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--kind", choices=("lappe", "rwse", "signnet"), required=True)
    s.add_argument("--freq", type=int, default=8)
    s.add_argument("--kernel", type=int, default=16)
    s.add_argument("--hidden", type=int, default=16)
    s.add_argument("--arch", choices=("deepset", "mlp"), default="deepset")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_pse)

    s = sub.add_parser("relgraph", help="dump one relation graph of a mini-batch")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--kind", choices=tuple(_KIND_FLAGS), required=True)
    s.add_argument("--k", type=int)
    s.add_argument("--config")
    s.add_argument("--checkpoint")
    s.add_argument("--batch-size", type=int)
    s.add_argument("--iteration", type=int, default=0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_relgraph)

    s = sub.add_parser("metrics", help="collapse metrics of H and Z")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("gen-sbm", help="write a stochastic block model dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--blocks", type=int, default=2)
    s.add_argument("--nodes-per-block", type=int, default=50)
    s.add_argument("--p-in", type=float, default=0.3)
    s.add_argument("--p-out", type=float, default=0.02)
    s.add_argument("--feature-dim", type=int, default=16)
    s.add_argument("--noise", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gen_sbm)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, GraphFormatError, trainer.CheckpointError, pse.InsufficientSpectrumError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (trainer.NumericAbort, ad.NonFiniteError, pse.ConvergenceError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
