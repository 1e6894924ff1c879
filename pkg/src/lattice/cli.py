"""Command-line entry points: prepare, train, evaluate, sweep.

Every subcommand takes --config pointing at a key = value file; outputs land
in the config's out_dir unless --out overrides it.  All outputs embed the
digest of the resolved config.  LATTICE_THREADS caps how many sweep points
run as parallel worker processes (default 1, sequential).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import RunConfig, load_run_config
from .data import InteractionDataset, Split, load_features, load_interactions, split_cold, split_warm
from .errors import CheckpointError, ConfigError, LatticeError
from .evaluation import evaluate
from .graph import build_initial_graph, write_graph_dump
from .model import load_checkpoint, save_checkpoint
from .training import fit

CHECKPOINT_NAME = "checkpoint.bin"
TRAIN_LOG_NAME = "train_log.jsonl"
MANIFEST_NAME = "split_manifest.json"

SWEEP_AXES = ("k", "lambda")
_AXIS_KEYS = {"k": "k", "lambda": "fuse_lambda"}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lattice",
        description="Graph-augmented recommendation from multimodal content",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="path to the run config file")
        p.add_argument("--out", default=None, help="override the config's out_dir")

    p = sub.add_parser("prepare", help="split the data and write the manifest")
    common(p)
    p.add_argument(
        "--dump-graphs",
        action="store_true",
        help="also write per-modality content graphs as TSV + JSON",
    )

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    common(p)
    p.add_argument(
        "--checkpoint",
        default=None,
        help="not supported: training always starts fresh and reports an error",
    )

    p = sub.add_parser("evaluate", help="score a checkpoint on held-out data")
    common(p)
    p.add_argument("--checkpoint", default=None, help="checkpoint path (default: out_dir/checkpoint.bin)")
    p.add_argument("--partition", choices=("valid", "test"), default="test")

    p = sub.add_parser("sweep", help="retrain across one hyperparameter axis")
    common(p)
    p.add_argument("--axis", choices=SWEEP_AXES, required=True)
    p.add_argument("--values", required=True, help="comma-separated axis values")
    return parser


def _load_split(cfg: RunConfig) -> tuple[InteractionDataset, Split, dict]:
    dataset = load_interactions(cfg.interactions_path)
    features = {
        m: load_features(p, dataset.num_items, m)
        for m, p in sorted(cfg.feature_paths.items())
    }
    if cfg["split_mode"] == "warm":
        split = split_warm(dataset, cfg["split_seed"])
    else:
        split = split_cold(dataset, cfg["item_fraction"], cfg["split_seed"])
    return dataset, split, features


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_manifest(cfg: RunConfig, split: Split, out_dir: Path) -> Path:
    manifest = split.manifest()
    manifest["config_digest"] = cfg.digest()
    path = out_dir / MANIFEST_NAME
    _write_json(path, manifest)
    return path


def cmd_prepare(cfg: RunConfig, out_dir: Path, dump_graphs: bool) -> int:
    _, split, features = _load_split(cfg)
    path = _write_manifest(cfg, split, out_dir)
    print(f"wrote {path}")
    if dump_graphs:
        k = cfg["k"]
        n_mod = len(features)
        for m, feats in features.items():
            graph = build_initial_graph(feats.matrix, k)
            meta = {
                "modality": m,
                "k": k,
                "fuse_lambda": cfg["fuse_lambda"],
                "mixture_weights": {name: 1.0 / n_mod for name in features},
                "config_digest": cfg.digest(),
            }
            tsv, _ = write_graph_dump(graph, out_dir / f"graph_{m}", meta)
            print(f"wrote {tsv}")
    return 0


def cmd_train(cfg: RunConfig, out_dir: Path, checkpoint_arg: str | None) -> int:
    if checkpoint_arg is not None:
        raise ConfigError(
            "resuming from a checkpoint is not supported; train always starts fresh"
        )
    _, split, features = _load_split(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_manifest(cfg, split, out_dir)
    log_path = out_dir / TRAIN_LOG_NAME
    with open(log_path, "w", encoding="utf-8") as log_stream:
        result = fit(
            cfg.model_config(),
            cfg.train_config(),
            split,
            features,
            log_stream=log_stream,
        )
    ckpt_path = out_dir / CHECKPOINT_NAME
    best = result.history[result.best_epoch - 1] if result.best_epoch else None
    save_checkpoint(
        ckpt_path,
        result.model_cfg,
        result.params,
        meta={
            "config_digest": cfg.digest(),
            "best_epoch": result.best_epoch,
            "epochs_run": len(result.history),
            "best_val_recall": best.val_recall if best else 0.0,
        },
    )
    print(f"wrote {ckpt_path} (best epoch {result.best_epoch})")
    return 0


def cmd_evaluate(
    cfg: RunConfig, out_dir: Path, checkpoint_arg: str | None, partition: str
) -> int:
    ckpt_path = Path(checkpoint_arg) if checkpoint_arg else out_dir / CHECKPOINT_NAME
    model_cfg, params, _meta = load_checkpoint(ckpt_path)
    if model_cfg != cfg.model_config():
        raise CheckpointError(
            f"{ckpt_path}: checkpoint architecture {model_cfg} "
            f"does not match the config's {cfg.model_config()}"
        )
    _, split, features = _load_split(cfg)
    if params.user_emb.shape[0] != split.train.num_users or params.item_emb.shape[0] != split.train.num_items:
        raise CheckpointError(
            f"{ckpt_path}: checkpoint shapes do not match the dataset "
            f"({params.user_emb.shape[0]} users, {params.item_emb.shape[0]} items)"
        )
    if model_cfg.uses_modal_features and params.modalities != tuple(sorted(features)):
        raise CheckpointError(
            f"{ckpt_path}: checkpoint modalities {params.modalities} do not match "
            f"the config's {tuple(sorted(features))}"
        )
    report = evaluate(
        params, model_cfg, split, features, partition, cutoffs=cfg["cutoffs"]
    )
    payload = report.as_dict()
    payload["config_digest"] = cfg.digest()
    path = out_dir / f"report_{partition}.json"
    _write_json(path, payload)
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


def _parse_axis_values(axis: str, raw: str) -> list:
    values = []
    for token in raw.split(","):
        token = token.strip()
        if not token:
            continue
        try:
            values.append(int(token) if axis == "k" else float(token))
        except ValueError as exc:
            raise ConfigError(f"--values: cannot parse {token!r} for axis {axis}") from exc
    if not values:
        raise ConfigError("--values: no axis values given")
    deduped = list(dict.fromkeys(values))
    if len(deduped) != len(values):
        print("warning: duplicate sweep values ignored", file=sys.stderr)
    return deduped


def _sweep_point(config_path: str, out_override: str | None, axis: str, value) -> dict:
    """Train and test-evaluate one sweep point; runs in its own process."""
    cfg = load_run_config(config_path)
    if out_override is not None:
        cfg = cfg.with_values(out_dir=out_override)
    cfg = cfg.with_values(**{_AXIS_KEYS[axis]: value})
    _, split, features = _load_split(cfg)
    result = fit(cfg.model_config(), cfg.train_config(), split, features)
    report = evaluate(
        result.params,
        cfg.model_config(),
        split,
        features,
        "test",
        cutoffs=cfg["cutoffs"],
        inputs=result.inputs,
    )
    point_dir = cfg.out_dir / f"sweep_{axis}" / str(value)
    point_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(
        point_dir / CHECKPOINT_NAME,
        cfg.model_config(),
        result.params,
        meta={"config_digest": cfg.digest(), "axis": axis, "value": value},
    )
    payload = report.as_dict()
    payload["config_digest"] = cfg.digest()
    payload["axis"] = axis
    payload["value"] = value
    _write_json(point_dir / "report_test.json", payload)
    return payload


def cmd_sweep(
    cfg: RunConfig, out_dir: Path, config_path: str, out_override: str | None,
    axis: str, values_raw: str,
) -> int:
    values = _parse_axis_values(axis, values_raw)
    threads = _worker_count()
    if threads > 1 and len(values) > 1:
        with ProcessPoolExecutor(max_workers=min(threads, len(values))) as pool:
            payloads = list(
                pool.map(
                    _sweep_point,
                    [config_path] * len(values),
                    [out_override] * len(values),
                    [axis] * len(values),
                    values,
                )
            )
    else:
        payloads = [_sweep_point(config_path, out_override, axis, v) for v in values]

    cutoffs = cfg["cutoffs"]
    out_dir.mkdir(parents=True, exist_ok=True)
    table_path = out_dir / f"sweep_{axis}.tsv"
    header = ["value"]
    for c in cutoffs:
        header += [f"recall@{c}", f"precision@{c}", f"ndcg@{c}"]
    with open(table_path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(header) + "\n")
        for value, payload in zip(values, payloads):
            row = [str(value)]
            for c in cutoffs:
                block = payload["metrics"][str(c)]
                row += [repr(block["recall"]), repr(block["precision"]), repr(block["ndcg"])]
            fh.write("\t".join(row) + "\n")
    print(f"wrote {table_path}")
    return 0


def _worker_count() -> int:
    raw = os.environ.get("LATTICE_THREADS", "1")
    try:
        count = int(raw)
    except ValueError as exc:
        raise ConfigError(f"LATTICE_THREADS must be an integer, got {raw!r}") from exc
    if count < 1:
        raise ConfigError(f"LATTICE_THREADS must be at least 1, got {count}")
    return count


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config)
        if args.out is not None:
            cfg = cfg.with_values(out_dir=args.out)
        out_dir = cfg.out_dir
        out_dir.mkdir(parents=True, exist_ok=True)
        if args.command == "prepare":
            return cmd_prepare(cfg, out_dir, args.dump_graphs)
        if args.command == "train":
            return cmd_train(cfg, out_dir, args.checkpoint)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, out_dir, args.checkpoint, args.partition)
        if args.command == "sweep":
            return cmd_sweep(cfg, out_dir, args.config, args.out, args.axis, args.values)
        raise ConfigError(f"unknown command {args.command!r}")
    except LatticeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def console_main() -> None:
    sys.exit(main())
