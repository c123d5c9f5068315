"""Command line: corpus generation, training, evaluation, attention export,
and the paired ablation.

Configuration comes from an optional JSON file with ``encoder``, ``train``
and ``loss`` sections whose keys mirror the config dataclass fields; flags
override file values.  Every subcommand takes ``--seed``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .ablation import render_comparison, run_ablation
from .attention import attention_map, channel_weights, similarity_score
from .autodiff import Tape
from .checkpoint import load_checkpoint
from .data import generate_synthetic, load_dataset, write_dataset
from .evaluation import evaluate, export_attention
from .losses import LossConfig, QuadrupletConfig
from .model import EncoderConfig, Vocab, encode_image, encode_joint, init_model, \
    tokenize
from .training import TrainConfig, split_records, train

logger = logging.getLogger(__name__)


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        cfg = json.load(fh)
    unknown = set(cfg) - {"encoder", "train", "loss"}
    if unknown:
        raise SystemExit(f"config: unknown sections {sorted(unknown)}")
    return cfg


def _build_configs(args, file_cfg: dict, vocab_floor: int):
    encoder_kwargs = dict(file_cfg.get("encoder", {}))
    train_kwargs = dict(file_cfg.get("train", {}))
    loss_kwargs = dict(file_cfg.get("loss", {}))

    if args.seed is not None:
        encoder_kwargs["seed"] = args.seed
        train_kwargs["seed"] = args.seed
    for flag, key in (
        ("epochs", "epochs"),
        ("batch_size", "batch_size"),
        ("learning_rate", "learning_rate"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            train_kwargs[key] = value
    if getattr(args, "attention_weight", None) is not None:
        loss_kwargs["attention_weight"] = args.attention_weight

    encoder_kwargs.setdefault("vocab_size", 0)
    encoder_kwargs["vocab_size"] = max(encoder_kwargs["vocab_size"], vocab_floor)

    margins = QuadrupletConfig(
        m1=loss_kwargs.pop("m1", 1.0), m2=loss_kwargs.pop("m2", 0.5)
    )
    loss_cfg = LossConfig(quadruplet=margins, **loss_kwargs)
    return EncoderConfig(**encoder_kwargs), TrainConfig(**train_kwargs), loss_cfg


def _cmd_gen_data(args) -> int:
    dataset = generate_synthetic(
        seed=args.seed if args.seed is not None else 0,
        count=args.count,
        image_size=args.image_size,
        grid_shape=(args.grid, args.grid),
    )
    manifest = write_dataset(dataset, args.out)
    print(f"wrote {len(dataset)} records to {manifest}")
    return 0


def _cmd_train(args) -> int:
    dataset = load_dataset(args.data)
    vocab = Vocab.build(dataset.texts())
    encoder_cfg, train_cfg, loss_cfg = _build_configs(
        args, _load_config_file(args.config), len(vocab)
    )
    model = init_model(encoder_cfg)
    train_records, val_records = split_records(
        dataset, args.val_fraction, train_cfg.seed
    )
    result = train(
        dataset, train_records, val_records, model, vocab,
        train_cfg, loss_cfg, args.out,
    )
    print(f"metrics: {result.metrics_path}")
    print(f"best checkpoint (epoch {result.best_epoch}, "
          f"composite {result.best_composite:.4f}): {result.best_checkpoint}")
    print(f"last checkpoint: {result.last_checkpoint}")
    return 0


def _resolve_records(dataset, split: str, val_fraction: float, seed: int):
    if split == "all":
        return dataset.records
    train_records, val_records = split_records(dataset, val_fraction, seed)
    return train_records if split == "train" else val_records


def _cmd_eval(args) -> int:
    dataset = load_dataset(args.data)
    model, vocab, extra = load_checkpoint(args.checkpoint)
    seed = args.seed
    if seed is None:
        seed = extra.get("train_config", {}).get("seed", 0)
    records = _resolve_records(dataset, args.split, args.val_fraction, seed)
    report = evaluate(model, vocab, dataset, records)
    print(report.table())
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w") as fh:
            fh.write(json.dumps(report.to_dict(), sort_keys=True) + "\n")
        print(f"report: {out}")
    return 0


def _cmd_attend(args) -> int:
    dataset = load_dataset(args.data)
    model, vocab, _ = load_checkpoint(args.checkpoint)
    by_id = {r.record_id: r for r in dataset.records}
    if args.record not in by_id:
        raise SystemExit(f"attend: unknown record id {args.record!r}")
    record = by_id[args.record]
    toks = tokenize(record.modifier_text, vocab, model.config.max_text_len)
    out_dir = Path(args.out)

    sides = {
        "target": (record.reference_id, record.target_id),
        "reference": (record.target_id, record.reference_id),
    }
    for side, (other_id, shown_id) in sides.items():
        with Tape():
            other = encode_joint(
                model, encode_image(model, dataset.images[other_id]), toks
            )
            shown = encode_joint(
                model, encode_image(model, dataset.images[shown_id]), toks
            )
            score = similarity_score(other, shown)
            weights = channel_weights(score, shown)
            attn = attention_map(weights, shown).data
        gray, overlay = export_attention(
            attn, dataset.images[shown_id],
            out_dir / f"{record.record_id}_{side}.pgm",
        )
        print(f"{side}: {gray} {overlay}")
    return 0


def _cmd_ablate(args) -> int:
    dataset = load_dataset(args.data)
    vocab = Vocab.build(dataset.texts())
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if not seeds:
        raise SystemExit("ablate: need at least one seed")
    runs = []
    for seed in seeds:
        encoder_cfg, train_cfg, loss_cfg = _build_configs(
            args, _load_config_file(args.config), len(vocab)
        )
        encoder_cfg = replace(encoder_cfg, seed=seed)
        train_cfg = replace(train_cfg, seed=seed)
        runs.append(
            run_ablation(
                dataset, encoder_cfg, train_cfg, loss_cfg,
                args.out, val_fraction=args.val_fraction,
            )
        )
    table = render_comparison(runs)
    print(table)
    summary = Path(args.out) / "ablation_summary.json"
    with open(summary, "w") as fh:
        json.dump([r.to_dict() for r in runs], fh, sort_keys=True, indent=2)
    print(f"summary: {summary}")
    return 0


def _add_common_train_flags(sub):
    sub.add_argument("--config", help="JSON config file")
    sub.add_argument("--epochs", type=int)
    sub.add_argument("--batch-size", dest="batch_size", type=int)
    sub.add_argument("--lr", dest="learning_rate", type=float)
    sub.add_argument("--attention-weight", dest="attention_weight", type=float,
                     help="mixing weight of the attention loss (0 disables)")
    sub.add_argument("--val-fraction", dest="val_fraction", type=float,
                     default=0.2)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmgrad",
        description="composed image retrieval with gradient attention",
    )
    parser.add_argument("--quiet", action="store_true",
                        help="suppress progress logging")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate a synthetic corpus")
    gen.add_argument("--out", required=True)
    gen.add_argument("--count", type=int, default=600)
    gen.add_argument("--image-size", dest="image_size", type=int, default=32)
    gen.add_argument("--grid", type=int, default=4)
    gen.add_argument("--seed", type=int, default=0)
    gen.set_defaults(func=_cmd_gen_data)

    tr = sub.add_parser("train", help="train on a dataset directory")
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--seed", type=int)
    _add_common_train_flags(tr)
    tr.set_defaults(func=_cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--data", required=True)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--split", choices=("train", "val", "all"), default="val")
    ev.add_argument("--val-fraction", dest="val_fraction", type=float,
                    default=0.2)
    ev.add_argument("--seed", type=int,
                    help="split seed; defaults to the checkpoint's")
    ev.add_argument("--out", help="write the report as a JSON line")
    ev.set_defaults(func=_cmd_eval)

    at = sub.add_parser("attend", help="export attention rasters for a record")
    at.add_argument("--data", required=True)
    at.add_argument("--checkpoint", required=True)
    at.add_argument("--record", required=True)
    at.add_argument("--out", required=True)
    at.add_argument("--seed", type=int)
    at.set_defaults(func=_cmd_attend)

    ab = sub.add_parser("ablate", help="paired runs with/without attention loss")
    ab.add_argument("--data", required=True)
    ab.add_argument("--out", required=True)
    ab.add_argument("--seeds", default="1,2,3",
                    help="comma-separated training seeds")
    ab.add_argument("--seed", type=int, help=argparse.SUPPRESS)
    _add_common_train_flags(ab)
    ab.set_defaults(func=_cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
