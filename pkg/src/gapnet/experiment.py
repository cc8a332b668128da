"""Ablation cells (variant x seed) and their summary table."""

from __future__ import annotations

import json
import math
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import Instance, Vocab
from .metrics import evaluate
from .model import COMPONENT_PRESETS, ModelConfig, predict_proba, preset, save_checkpoint
from .trainer import TrainConfig, train

# Desk-scale protocol for directional comparisons. Every variant sits on a
# validation plateau for the first few epochs, so a patience of 3 would stop
# them before they learn; instead the whole budget is spent and the best
# validation epoch is kept. Larger step sizes saturate the view weights of the
# fusion gate onto one view before the head has learned which view matters.
DESK_TRAIN = TrainConfig(learning_rate=0.001, batch_size=128, max_epochs=16, patience=16)
DESK_REQUESTS = 8000


def run_cell(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    variant: str,
    parts: dict,
    seed: int,
    vocab: Optional[Vocab] = None,
    out_dir=None,
    k: Optional[int] = None,
) -> dict:
    """Train one variant with one seed and evaluate it on the test split.

    With ``out_dir`` the checkpoint, history and metrics are written there.
    Returns a flat record suitable for ``ablation.jsonl``.
    """
    ablation = preset(variant)
    if vocab is not None:
        model_cfg = model_cfg.with_vocab(vocab)
    cfg = replace(train_cfg, seed=seed)
    result = train(model_cfg, ablation, parts["train"], parts.get("val"), cfg)
    test: Sequence[Instance] = parts["test"]
    probs = predict_proba(result.params, ablation, test)
    report = evaluate([i.request_id for i in test], probs, [i.label for i in test], k=k)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "checkpoint.json", result.params, ablation)
        write_records(out / "history.jsonl", result.history)
        (out / "metrics.json").write_text(json.dumps(report, sort_keys=True) + "\n")
    return {
        "variant": variant,
        "seed": seed,
        "status": "ok",
        "auc": report["auc"],
        "ndcg": report["ndcg"],
        "map": report["map"],
        "best_epoch": result.best_epoch,
        "epochs_run": len(result.history),
    }


def write_records(path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _mean_std(values) -> str:
    vals = [v for v in values if v is not None and not math.isnan(v)]
    if not vals:
        return "n/a"
    std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
    return f"{np.mean(vals):.4f} ± {std:.4f}"


def summarize(records: Sequence[dict], group_key: Optional[str] = "rho") -> str:
    """Mean ± std of AUC/NDCG/MAP per variant, overall and per ``group_key`` value."""
    ok = [r for r in records if r.get("status") == "ok"]
    variants = [v for v in COMPONENT_PRESETS if any(r["variant"] == v for r in ok)]
    variants += sorted({r["variant"] for r in ok} - set(variants))

    def block(rows, title):
        lines = [title, f"{'variant':<16}{'n':>3}  {'AUC':<18}{'NDCG':<18}{'MAP':<18}"]
        for v in variants:
            cell = [r for r in rows if r["variant"] == v]
            if not cell:
                continue
            stats = [_mean_std(r[m] for r in cell) for m in ("auc", "ndcg", "map")]
            lines.append(f"{v:<16}{len(cell):>3}  " + "".join(f"{s:<18}" for s in stats))
        return lines

    lines = block(ok, "all datasets")
    keys = sorted({r.get(group_key) for r in ok if r.get(group_key) is not None}) if group_key else []
    if len(keys) > 1:
        for key in keys:
            lines += [""] + block([r for r in ok if r.get(group_key) == key], f"{group_key} = {key}")
    failed = [r for r in records if r.get("status") != "ok"]
    if failed:
        lines += ["", f"{len(failed)} cell(s) failed:"]
        lines += [f"  {r.get('dataset')} {r['variant']} seed {r['seed']}: {r.get('error')}" for r in failed]
    return "\n".join(lines) + "\n"

