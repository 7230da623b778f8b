"""Command-line entry point: augment / train / eval / sweep subcommands.

Exit codes: 0 success, 2 input error, 3 checkpoint/config mismatch,
4 numeric failure (non-finite loss). A run manifest is written into the
output directory before any long computation starts.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from pathlib import Path

from . import __version__, checkpoint, dataset, evaluate, model, pca_init, train
from .expr import TraversalVariant

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_MISMATCH = 3
EXIT_NUMERIC = 4


class CliInputError(Exception):
    pass


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _default_seed(args) -> int:
    if args.seed is not None:
        return args.seed
    return int(os.environ.get("MMTM_SEED", "0"))


def _load_corpus(path: str) -> dataset.CorpusLoad:
    p = Path(path)
    if not p.exists():
        raise CliInputError(f"corpus file not found: {path}")
    return dataset.load_corpus(p)


def _write_manifest(out_dir: Path, command: str, args, inputs: dict,
                    config: dict, plan: dict, artifacts: list[str]):
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "tool_version": __version__,
        "command": command,
        "seed": _default_seed(args),
        "inputs": {
            name: {"path": str(p), "sha256": _sha256(Path(p))}
            for name, p in inputs.items() if p
        },
        "config": config,
        "plan": plan,
        "artifacts": artifacts,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return manifest


def _resolve_config_plan(args, vocab_placeholder=True):
    """Config file values first, then flags (flags win)."""
    file_cfg = {}
    if getattr(args, "config", None):
        file_cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
    cfg = {
        "d_model": 64, "n_enc_layers": 1, "n_dec_layers": 1, "n_heads": 4,
        "dropout": 0.1, "dtype": "float64",
        "max_src_len": 128, "max_tgt_len": 48,
    }
    plan_kv = {}
    for key in list(cfg):
        if key in file_cfg:
            cfg[key] = file_cfg[key]
    for key in ("pretrain_epochs", "finetune_epochs", "pretrain_lr",
                "finetune_lr", "batch_size"):
        if key in file_cfg:
            plan_kv[key] = file_cfg[key]
    if getattr(args, "dim", None):
        cfg["d_model"] = args.dim
    if getattr(args, "layers", None):
        cfg["n_enc_layers"] = cfg["n_dec_layers"] = args.layers
    if getattr(args, "heads", None):
        cfg["n_heads"] = args.heads
    if getattr(args, "dtype", None):
        cfg["dtype"] = args.dtype
    for key in ("pretrain_epochs", "finetune_epochs", "pretrain_lr",
                "finetune_lr", "batch_size"):
        value = getattr(args, key, None)
        if value is not None:
            plan_kv[key] = value
    seed = _default_seed(args)
    cfg["seed"] = seed
    plan_kv["seed"] = seed
    return cfg, plan_kv


def cmd_augment(args) -> int:
    load = _load_corpus(args.corpus)
    out_dir = Path(args.out)
    _write_manifest(out_dir, "augment", args, {"corpus": args.corpus},
                    config={}, plan={},
                    artifacts=[f"task_{v.value}.jsonl" for v in TraversalVariant]
                    + ["quarantine.jsonl"])
    rows = dataset.augment_tokens(load.records)
    dataset.write_task_files(rows, out_dir)
    with open(out_dir / "quarantine.jsonl", "w", encoding="utf-8") as fh:
        for entry in load.quarantined:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    if load.quarantined:
        print(f"warning: {len(load.quarantined)} record(s) quarantined",
              file=sys.stderr)
    print(f"augmented {len(load.records)} records -> "
          f"{3 * len(load.records)} examples in {out_dir}")
    return EXIT_OK


def _train_common(args, records, embeddings, pretrain: bool):
    cfg_kv, plan_kv = _resolve_config_plan(args)
    vocab = dataset.build_vocab(records)
    config = model.ModelConfig(src_vocab_size=vocab.src_size,
                               tgt_vocab_size=vocab.tgt_size, **cfg_kv)
    plan = train.TrainPlan(**plan_kv)
    result = train.train_pipeline(records, config, plan, vocab=vocab,
                                  embeddings=embeddings, pretrain=pretrain)
    return result, config, plan


def cmd_train(args) -> int:
    load = _load_corpus(args.corpus)
    if not load.records:
        raise CliInputError("corpus has no valid records")
    embeddings = None
    if args.embeddings:
        if not Path(args.embeddings).exists():
            raise CliInputError(f"embeddings file not found: {args.embeddings}")
        embeddings = pca_init.load_embeddings_tsv(args.embeddings)
    out_dir = Path(args.out)
    cfg_kv, plan_kv = _resolve_config_plan(args)
    artifacts = ["checkpoint_final.mmtm", "trainlog_finetune.jsonl"]
    if not args.no_pretrain:
        artifacts = ["checkpoint_pretrain.mmtm",
                     "trainlog_pretrain.jsonl"] + artifacts
    _write_manifest(out_dir, "train", args,
                    {"corpus": args.corpus, "embeddings": args.embeddings},
                    config=cfg_kv, plan=plan_kv, artifacts=artifacts)
    result, _, _ = _train_common(args, load.records, embeddings,
                                 pretrain=not args.no_pretrain)
    if result.pretrain_params is not None:
        checkpoint.save(out_dir / "checkpoint_pretrain.mmtm",
                        result.pretrain_params, result.trained.vocab)
        (out_dir / "trainlog_pretrain.jsonl").write_text(
            result.pretrain_log.to_jsonl(), encoding="utf-8")
    checkpoint.save(out_dir / "checkpoint_final.mmtm",
                    result.trained.params, result.trained.vocab)
    (out_dir / "trainlog_finetune.jsonl").write_text(
        result.finetune_log.to_jsonl(), encoding="utf-8")
    print(f"trained on {len(load.records)} records; artifacts in {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if not Path(args.checkpoint).exists():
        raise CliInputError(f"checkpoint not found: {args.checkpoint}")
    trained = checkpoint.load(args.checkpoint)
    load = _load_corpus(args.test)
    report = evaluate.score(trained, load.records)
    if args.report:
        Path(args.report).write_text(report.to_json(), encoding="utf-8")
    if args.attention_out:
        att_dir = Path(args.attention_out)
        att_dir.mkdir(parents=True, exist_ok=True)
        for record in load.records:
            evaluate.export_attention(trained, record,
                                      path=att_dir / f"{record.id}.json")
    print(report.render_table())
    return EXIT_OK


def cmd_sweep(args) -> int:
    load = _load_corpus(args.corpus)
    test = _load_corpus(args.test)
    embeddings = None
    if args.embeddings:
        embeddings = pca_init.load_embeddings_tsv(args.embeddings)
    dims = [int(v) for v in args.dims.split(",")]
    layer_counts = [int(v) for v in args.layers.split(",")]
    inits = ["scratch"] + (["pca"] if embeddings is not None else [])
    out_dir = Path(args.out)
    _write_manifest(out_dir, "sweep", args,
                    {"corpus": args.corpus, "test": args.test,
                     "embeddings": args.embeddings},
                    config={"dims": dims, "layers": layer_counts, "inits": inits},
                    plan={}, artifacts=["sweep.csv"])
    csv_path = out_dir / "sweep.csv"
    done = set()
    rows = []
    if csv_path.exists():
        with open(csv_path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                done.add((int(row["dim"]), int(row["layers"]), row["init"]))
                rows.append(row)
    shapeless = argparse.Namespace(**{**vars(args), "dim": None, "layers": None})
    cfg_kv, plan_kv = _resolve_config_plan(shapeless)
    plan = train.TrainPlan(**plan_kv)
    for dim in dims:
        for layers in layer_counts:
            for init_kind in inits:
                key = (dim, layers, init_kind)
                if key in done:
                    continue
                cfg = dict(cfg_kv, d_model=dim, n_enc_layers=layers,
                           n_dec_layers=layers)
                if dim % cfg["n_heads"] != 0:
                    cfg["n_heads"] = 2 if dim % 2 == 0 else 1
                config = model.ModelConfig(src_vocab_size=8, tgt_vocab_size=8,
                                           **cfg)
                result = train.train_pipeline(
                    load.records, config, plan,
                    embeddings=embeddings if init_kind == "pca" else None)
                report = evaluate.score(result.trained, test.records)
                rows.append({"dim": dim, "layers": layers, "init": init_kind,
                             "accuracy": f"{report.accuracy:.6f}"})
                _write_sweep_csv(csv_path, rows)
    _write_sweep_csv(csv_path, rows)
    print(f"sweep complete: {len(rows)} rows in {csv_path}")
    return EXIT_OK


def _write_sweep_csv(path: Path, rows: list[dict]):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["dim", "layers", "init",
                                                "accuracy"])
        writer.writeheader()
        writer.writerows(rows)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmtm",
        description="Multi-task multi-decoder transformer for math word problems",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common_train_flags(p, with_shape=True):
        p.add_argument("--config", help="JSON config file (flags win)")
        if with_shape:
            p.add_argument("--dim", type=int, help="model width d_model")
            p.add_argument("--layers", type=int,
                           help="encoder/decoder layer count")
        p.add_argument("--heads", type=int)
        p.add_argument("--dtype", choices=["float64", "float32"])
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--pretrain-epochs", dest="pretrain_epochs", type=int)
        p.add_argument("--finetune-epochs", dest="finetune_epochs", type=int)
        p.add_argument("--pretrain-lr", dest="pretrain_lr", type=float)
        p.add_argument("--finetune-lr", dest="finetune_lr", type=float)

    p = sub.add_parser("augment", help="emit the three traversal task datasets")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="pretrain + finetune, write checkpoints")
    p.add_argument("--corpus", required=True)
    p.add_argument("--embeddings", help="pretrained embedding TSV for PCA init")
    p.add_argument("--no-pretrain", action="store_true",
                   help="skip multi-task pretraining (ablation arm)")
    p.add_argument("--out", required=True)
    add_common_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a test corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--report", help="write the EvalReport JSON here")
    p.add_argument("--attention-out", dest="attention_out",
                   help="directory for per-record attention JSON")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="accuracy grid over (dim, layers, init)")
    p.add_argument("--corpus", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--dims", default="32,64,128", help="comma list of widths")
    p.add_argument("--layers", default="1", help="comma list, e.g. 1,2")
    p.add_argument("--embeddings")
    p.add_argument("--out", required=True)
    add_common_train_flags(p, with_shape=False)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliInputError, dataset.DatasetError, pca_init.PcaError,
            FileNotFoundError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except checkpoint.CheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISMATCH
    except train.NonFiniteLoss as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
