"""Paired with/without-attention-loss training runs and their report."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

from .checkpoint import load_checkpoint
from .data import Dataset
from .evaluation import MetricsReport, evaluate
from .losses import LossConfig
from .model import EncoderConfig, Vocab, init_model
from .training import TrainConfig, TrainResult, split_records, train

logger = logging.getLogger(__name__)


@dataclass
class AblationArm:
    attention_weight: float
    report: MetricsReport
    result: TrainResult


@dataclass
class AblationRun:
    seed: int
    without_attention: AblationArm
    with_attention: AblationArm

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "without_attention": self.without_attention.report.to_dict(),
            "with_attention": self.with_attention.report.to_dict(),
        }


def run_ablation(dataset: Dataset, encoder_cfg: EncoderConfig,
                 train_cfg: TrainConfig, loss_cfg: LossConfig,
                 out_dir, val_fraction: float = 0.2) -> AblationRun:
    """Train two arms differing only in the attention weight, same seed.

    The zero-weight arm still logs attention diagnostics.  Both arms are
    evaluated on the same held-out split with the full retrieval protocol.
    """
    out = Path(out_dir)
    seed = train_cfg.seed
    train_records, val_records = split_records(dataset, val_fraction, seed)
    vocab = Vocab.build(dataset.texts())
    if encoder_cfg.vocab_size < len(vocab):
        raise ValueError(
            f"run_ablation: vocab needs {len(vocab)} slots, config has "
            f"{encoder_cfg.vocab_size}"
        )

    arms = {}
    for label, weight in (
        ("without_attention", 0.0),
        ("with_attention", loss_cfg.attention_weight),
    ):
        logger.info("ablation seed %d, arm %s (weight %.2f)", seed, label, weight)
        model = init_model(replace(encoder_cfg, seed=seed))
        arm_dir = out / f"seed{seed}_{label}"
        result = train(
            dataset, train_records, val_records, model, vocab,
            train_cfg, replace(loss_cfg, attention_weight=weight), arm_dir,
        )
        # arms are compared at equal training budget: the final model, not
        # the probe-selected best, which would add probe noise to the pairing
        final_model, final_vocab, _ = load_checkpoint(result.last_checkpoint)
        report = evaluate(
            final_model, final_vocab, dataset, val_records,
            saliency_threshold=train_cfg.saliency_threshold,
        )
        arms[label] = AblationArm(weight, report, result)

    run = AblationRun(seed, arms["without_attention"], arms["with_attention"])
    with open(out / f"ablation_seed{seed}.json", "w") as fh:
        json.dump(run.to_dict(), fh, sort_keys=True, indent=2)
    return run


def render_comparison(runs: list[AblationRun]) -> str:
    """Side-by-side table of both arms across seeds."""
    rows = [
        f"{'seed':<6}{'arm':<20}{'R@1':>8}{'R@5':>8}{'Rs@1':>8}"
        f"{'composite':>11}{'IoU':>8}"
    ]
    for run in runs:
        for label, arm in (
            ("without attention", run.without_attention),
            ("with attention", run.with_attention),
        ):
            r = arm.report
            rows.append(
                f"{run.seed:<6}{label:<20}{r.recall_at[1]:>8.3f}"
                f"{r.recall_at[5]:>8.3f}{r.recall_subset_at[1]:>8.3f}"
                f"{r.composite:>11.3f}{r.mean_attention_iou:>8.3f}"
            )
    return "\n".join(rows)
