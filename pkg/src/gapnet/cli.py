"""Command-line entry points: gen-data, train, eval, grad-check, ablate.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(missing or malformed files), 3 failed gradient check or failed ablation cells.
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path
from typing import Optional

from . import config as config_io
from .config import ConfigError
from .data import DataError, GeneratorConfig, generate, load_split, load_vocab, make_batch, write_dataset
from .experiment import run_cell, summarize, write_records
from .gradcheck import DEFAULT_STEP, DEFAULT_TOL, check_gradients
from .metrics import evaluate, format_report, write_predictions
from .model import COMPONENT_PRESETS, GapNetParams, ModelConfig, load_checkpoint, predict_proba, preset, save_checkpoint
from .trainer import TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3

logger = logging.getLogger("gapnet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_or_default(cls, path):
    return config_io.load(cls, path) if path else cls()


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds must be a comma-separated list of integers, got {text!r}") from None
    if not seeds:
        raise UsageError("--seeds must list at least one seed")
    return seeds


def _sidecar_log(out_dir: Path) -> logging.Handler:
    """Timestamps live only in run.log so every other output stays byte-identical."""
    handler = logging.FileHandler(out_dir / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(name)s %(message)s"))
    logging.getLogger().addHandler(handler)
    logging.getLogger().setLevel(logging.INFO)
    return handler


def _detach(handler: logging.Handler) -> None:
    logging.getLogger().removeHandler(handler)
    handler.close()


# -- commands ---------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _load_or_default(GeneratorConfig, args.config)
    out = Path(args.out)
    if args.rho:
        for rho in args.rho:
            manifest = write_dataset(replace(cfg, noise_rate=rho), out / f"rho-{rho:g}")
            print(f"rho={rho:g}: " + ", ".join(f"{k} {v['n_instances']}" for k, v in manifest["files"].items()))
    else:
        manifest = write_dataset(cfg, out)
        print(", ".join(f"{k} {v['n_instances']}" for k, v in manifest["files"].items()))
    return EXIT_OK


def _model_config(path, data_dir) -> ModelConfig:
    cfg = _load_or_default(ModelConfig, path)
    vocab = load_vocab(data_dir)
    if vocab is None:
        raise DataError(f"{data_dir}: missing manifest.json (run gen-data first)")
    return cfg.with_vocab(vocab)


def cmd_train(args) -> int:
    ablation = preset(args.ablation)
    train_cfg = _load_or_default(TrainConfig, args.train_config)
    if args.seed is not None:
        train_cfg = replace(train_cfg, seed=args.seed)
    model_cfg = _model_config(args.model_config, args.data)
    train_data = load_split(args.data, "train")
    val_path = Path(args.data) / "val.jsonl"
    val_data = load_split(args.data, "val") if val_path.exists() else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    handler = _sidecar_log(out)
    try:
        result = train(model_cfg, ablation, train_data, val_data, train_cfg)
    finally:
        _detach(handler)
    save_checkpoint(out / "checkpoint.json", result.params, ablation)
    write_records(out / "history.jsonl", result.history)
    (out / "train_config.json").write_text(json.dumps(asdict(train_cfg), indent=2, sort_keys=True) + "\n")
    print(f"trained {args.ablation}: {len(result.history)} epoch(s), best epoch {result.best_epoch}, val AUC {result.best_val_auc}")
    return EXIT_OK


def cmd_eval(args) -> int:
    params, ablation = load_checkpoint(args.checkpoint)
    instances = load_split(args.data, args.split)
    scores = predict_proba(params, ablation, instances)
    rids = [i.request_id for i in instances]
    labels = [i.label for i in instances]
    report = evaluate(rids, scores, labels, k=args.k)
    print(format_report(report), end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_predictions(out / "predictions.jsonl", rids, scores, labels)
        (out / "metrics.json").write_text(json.dumps(report, sort_keys=True) + "\n")
        (out / "metrics.txt").write_text(format_report(report))
    return EXIT_OK


# a request with one positive and one negative: the 2-instance grad-check batch
GRAD_CHECK_DATA = GeneratorConfig(
    n_users=8, n_items=24, n_contexts=4, n_clusters=4, T_rt=3, T_st=4, T_lt=6, negatives_per_positive=1, n_requests=1
)

GRAD_CHECK_JITTER = 0.05


def cmd_grad_check(args) -> int:
    ablation = preset(args.ablation)
    data_cfg = replace(GRAD_CHECK_DATA, seed=args.seed)
    model_cfg = _load_or_default(ModelConfig, args.model_config).with_vocab(data_cfg.vocab)
    params = GapNetParams(model_cfg, ablation, seed=args.seed)
    # zero-initialized blocks would make some paths pass trivially
    params.jitter(GRAD_CHECK_JITTER, seed=args.seed)
    batch = make_batch(generate(data_cfg))
    started = time.perf_counter()
    report = check_gradients(params, ablation, batch, step=args.step, tol=args.tol, seed=args.seed)
    print(report.summary())
    logger.info("grad-check took %.1fs", time.perf_counter() - started)
    return EXIT_OK if report.passed else EXIT_CHECK


def _expand_datasets(pattern: str) -> list[Path]:
    dirs = sorted(Path(p) for p in glob.glob(pattern) if (Path(p) / "manifest.json").exists())
    if not dirs:
        raise DataError(f"no generated datasets match {pattern!r}")
    return dirs


def cmd_ablate(args) -> int:
    seeds = _parse_seeds(args.seeds)
    variants = args.variants.split(",") if args.variants else list(COMPONENT_PRESETS)
    for v in variants:
        preset(v)  # fail fast on typos
    train_cfg = _load_or_default(TrainConfig, args.train_config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    handler = _sidecar_log(out)
    records = []
    try:
        for data_dir in _expand_datasets(args.data_glob):
            rho = json.loads((data_dir / "manifest.json").read_text())["generator_config"]["noise_rate"]
            model_cfg = _model_config(args.model_config, data_dir)
            parts = {name: load_split(data_dir, name) for name in ("train", "val", "test")}
            for variant in variants:
                for seed in seeds:
                    cell = out / data_dir.name / variant.replace("+", "plus-") / f"seed-{seed}"
                    started = time.perf_counter()
                    try:
                        rec = run_cell(model_cfg, train_cfg, variant, parts, seed, out_dir=cell, k=args.k)
                    except Exception as exc:  # a failed cell is reported, the sweep goes on
                        logger.exception("cell %s failed", cell)
                        rec = {"variant": variant, "seed": seed, "status": "error", "error": f"{type(exc).__name__}: {exc}"}
                    rec.update(dataset=data_dir.name, rho=rho)
                    records.append(rec)
                    logger.info("cell %s done in %.1fs", cell, time.perf_counter() - started)
                    print(f"{data_dir.name} {variant} seed {seed}: {rec.get('status')} auc={rec.get('auc')}", flush=True)
    finally:
        _detach(handler)
    write_records(out / "ablation.jsonl", records)
    table = summarize(records)
    (out / "table.txt").write_text(table)
    print(table, end="")
    return EXIT_OK if all(r["status"] == "ok" for r in records) else EXIT_CHECK


# -- parser -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gapnet", description="Gated target-attention CTR model: data, training and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset with a checksum manifest")
    p.add_argument("--config", help="generator config (JSON)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--rho", type=float, nargs="+", help="sweep noise rates; one sub-directory per value")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one ablation variant")
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--model-config", help="model config (JSON)")
    p.add_argument("--train-config", help="training config (JSON)")
    p.add_argument("--ablation", default="full", help="ablation preset (default: full)")
    p.add_argument("--seed", type=int, help="overrides the training config seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a split with a checkpoint and report AUC/NDCG/MAP")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--k", type=int, help="NDCG cutoff (default: whole list)")
    p.add_argument("--out", help="directory for predictions and metrics files")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", help="finite-difference check of every parameter path")
    p.add_argument("--model-config", help="model config (JSON)")
    p.add_argument("--ablation", default="full")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=DEFAULT_STEP)
    p.add_argument("--tol", type=float, default=DEFAULT_TOL)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("ablate", help="train variants x seeds on every matching dataset and tabulate")
    p.add_argument("--data-glob", required=True, help="glob of dataset directories")
    p.add_argument("--seeds", required=True, help="comma-separated seeds, e.g. 0,1,2,3,4")
    p.add_argument("--variants", help=f"comma-separated presets (default: {','.join(COMPONENT_PRESETS)})")
    p.add_argument("--model-config", help="model config (JSON)")
    p.add_argument("--train-config", help="training config (JSON)")
    p.add_argument("--k", type=int, help="NDCG cutoff (default: whole list)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"gapnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"gapnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
