"""Command-line entry point: ``gliomamil {synth,train,eval,heatmap,inspect}``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .backbone import bag_seed, forward, load_params, pad_indices, parse_params, save_params
from .config import RunConfig, backbone_from_kv, backbone_to_kv, read_kv, train_to_kv
from .errors import ConfigError, FormatError, IngestionError, NumericalError
from .graph import CooccurrenceMatrix, estimate_cooccurrence
from .heatmap import export_heatmap
from .metrics import format_report
from .synth import MAGIC, file_hash, generate_split, read_dataset, write_dataset, write_manifest
from .train import LOG_HEADER, evaluate, train
from .who import GliomaClass

EXIT_OK, EXIT_CONFIG, EXIT_FORMAT, EXIT_DIVERGED = 0, 2, 3, 4
CHECKPOINT = "model.ckpt"
RUN_MANIFEST = "run_manifest.txt"
TRAIN_LOG = "train_log.txt"


def _overrides(args) -> dict[str, str]:
    out = {}
    for flag, key in (("seed", "seed"), ("lambda_lc", "lambda_lc"), ("lambda_dcc", "lambda_dcc"),
                      ("epochs", "epochs"), ("n_patches", "n_patches")):
        value = getattr(args, flag, None)
        if value is not None:
            out[key] = str(value)
    return out


def _run_config(args) -> RunConfig:
    return RunConfig.load(args.config, _overrides(args))


def _dataset_file(path: str, default: str) -> Path:
    p = Path(path)
    return p / default if p.is_dir() else p


# ---------------------------------------------------------------- subcommands


def cmd_synth(args) -> int:
    cfg = _run_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for split, count in cfg.splits.items():
        path = out / f"{split}.milb"
        write_dataset(path, generate_split(cfg.synth, split, count), cfg.synth.d_in)
        files.append(path)
        print(f"wrote {path} ({count} cases)")
    write_manifest(out / "manifest.txt", cfg.synth, files)
    return EXIT_OK


def load_run(run_dir: Path):
    meta = read_kv(run_dir / RUN_MANIFEST)
    if "cooccurrence" not in meta:
        raise ConfigError(f"{run_dir / RUN_MANIFEST} lacks the co-occurrence entry")
    params = load_params(run_dir / CHECKPOINT)
    return params, backbone_from_kv(meta), CooccurrenceMatrix.from_manifest(meta["cooccurrence"]), meta


def cmd_train(args) -> int:
    cfg = _run_config(args)
    train_bags = read_dataset(_dataset_file(args.dataset, "train.milb"))
    val_path = Path(args.dataset) / "val.milb"
    val_bags = read_dataset(val_path) if Path(args.dataset).is_dir() and val_path.exists() else []
    if train_bags and train_bags[0].patch_features.shape[1] != cfg.backbone.d_in:
        cfg.backbone = replace(cfg.backbone, d_in=train_bags[0].patch_features.shape[1])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    print(LOG_HEADER, flush=True)
    result = train(train_bags, val_bags, cfg.backbone, cfg.train, on_epoch=lambda r: print(r.line(), flush=True))
    save_params(out / CHECKPOINT, result.params)
    (out / TRAIN_LOG).write_text(result.log_text())
    lines = ["# training run manifest"]
    lines += [f"{k}={v}" for k, v in backbone_to_kv(result.backbone).items()]
    lines += [f"{k}={v}" for k, v in train_to_kv(result.config).items()]
    lines += [
        f"cooccurrence={result.cooc.to_manifest()}",
        f"best_epoch={result.best_epoch}",
        f"best_val_macro_auc={'NA' if result.best_val_auc is None else repr(result.best_val_auc)}",
        f"checkpoint_sha256={file_hash(out / CHECKPOINT)}",
    ]
    (out / RUN_MANIFEST).write_text("\n".join(lines) + "\n")
    print(f"best epoch {result.best_epoch}; checkpoint {out / CHECKPOINT}")
    return EXIT_OK


def cmd_eval(args) -> int:
    run_dir = Path(args.out)
    params, backbone, cooc, _ = load_run(run_dir)
    ds = _dataset_file(args.dataset, "test.milb")
    bags = read_dataset(ds)
    text = format_report(evaluate(bags, params, backbone, cooc).report)
    (run_dir / f"metrics_{ds.stem}.txt").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_heatmap(args) -> int:
    run_dir = Path(args.out)
    params, backbone, cooc, _ = load_run(run_dir)
    bags = read_dataset(_dataset_file(args.dataset, "test.milb"))
    chosen = [b for b in bags if args.case is None or b.case_id in args.case]
    if args.case is None:
        chosen = chosen[: args.limit]
    if not chosen:
        raise ConfigError(f"no case matches {args.case}")
    for bag in chosen:
        src = pad_indices(bag.n_patches, backbone.N, bag_seed(bag.case_id, 0))
        with ad.no_grad():
            outputs = forward(bag.patch_features[src], params, backbone, cooc)
        target = run_dir / "heatmaps" / bag.case_id
        export_heatmap(outputs, target, src)
        print(f"wrote {target}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    path = Path(args.path)
    if path.is_dir():
        path = path / CHECKPOINT
    head = path.read_bytes()[:4]
    if head == MAGIC:
        bags = read_dataset(path)
        counts = np.bincount([int(b.labels.glioma_class) for b in bags], minlength=4)
        sizes = [b.n_patches for b in bags]
        print(f"dataset {path}: {len(bags)} cases, d_in={bags[0].patch_features.shape[1] if bags else 0}")
        if bags:
            print(f"bag sizes: min {min(sizes)} max {max(sizes)} mean {np.mean(sizes):.2f}")
            bits = np.array([b.labels.bits() for b in bags])
            for name, rate in zip(("idh_mutant", "codel", "cdkn", "nmp"), bits.mean(axis=0)):
                print(f"rate {name:<11} {rate:.4f}")
            for cls in GliomaClass:
                print(f"class {cls.name:<18} {counts[int(cls)]}")
            print("cooccurrence " + estimate_cooccurrence([b.labels for b in bags]).to_manifest())
    else:
        arrays = parse_params(path.read_bytes())
        total = sum(a.size for a in arrays.values())
        print(f"checkpoint {path}: {len(arrays)} tensors, {total} parameters")
        for name, arr in arrays.items():
            print(f"{name:<28} {'x'.join(map(str, arr.shape)) or 'scalar'}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gliomamil", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, dataset=True):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int)
        if dataset:
            p.add_argument("--dataset", required=True, help="dataset file or directory")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("synth", help="generate synthetic train/val/test datasets")
    common(p, dataset=False)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--lambda-lc", type=float, dest="lambda_lc")
    p.add_argument("--lambda-dcc", type=float, dest="lambda_dcc")
    p.add_argument("--epochs", type=int)
    p.add_argument("--n-patches", type=int, dest="n_patches")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained run on a dataset")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("heatmap", help="export patch decision scores")
    common(p)
    p.add_argument("--case", action="append", help="case id to export (repeatable)")
    p.add_argument("--limit", type=int, default=1, help="cases to export when --case is absent")
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("inspect", help="summarize a dataset or checkpoint")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, IngestionError) as exc:
        print(f"data format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except NumericalError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
