"""Siamese training loop: quadruplet sampling, the combined objective, and
per-epoch validation probes with a deterministic metrics log.

One optimizer step runs the whole minibatch as a single taped graph: the
four branches of every record (anchor, positive, and two negatives, all
composed with the record's modifier text) are stacked into one batch, so
the per-record attention gradients come out of a single retained backward
pass.  The tape is rebuilt from scratch each step.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention import (
    attention_loss,
    attention_map,
    batch_attention_loss,
    batch_attention_maps,
    batch_channel_weights,
    batch_similarity,
    channel_weights,
    similarity_score,
)
from .autodiff import (
    Tape,
    Tensor,
    backward,
    clip_min,
    div,
    l2_norm,
    mean,
    narrow,
    sub,
    tensor_sum,
)
from .checkpoint import save_checkpoint
from .data import Dataset, DatasetRecord, record_saliency
from .evaluation import (
    attention_iou,
    attention_maps_for_records,
    composite_metric,
    rank_gallery,
    recall_at_k,
    recall_subset_at_k,
)
from .losses import LossConfig, combine_losses, quadruplet_loss
from .model import (
    JointEmbedding,
    Model,
    Vocab,
    encode_image,
    encode_images,
    encode_joint,
    encode_joint_batch,
    tokenize,
)
from .optim import adamw_step, init_state

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    batch_size: int = 8
    epochs: int = 30
    negative_pool_size: int = 32
    seed: int = 0
    probe_queries: int = 24
    saliency_threshold: float = 0.5

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("TrainConfig: learning rate must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("TrainConfig: batch size and epochs must be >= 1")
        if self.negative_pool_size < 2:
            raise ValueError("TrainConfig: negative pool must hold >= 2 images")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "negative_pool_size": self.negative_pool_size,
            "seed": self.seed,
            "probe_queries": self.probe_queries,
            "saliency_threshold": self.saliency_threshold,
        }


@dataclass
class Quadruplet:
    """Composed embeddings of one record's four branches."""

    anchor: JointEmbedding
    positive: JointEmbedding
    negative_a: JointEmbedding
    negative_b: JointEmbedding
    negative_ids: tuple[str, str]


def sample_negative_ids(record: DatasetRecord, dataset: Dataset, rng,
                        pool_size: int) -> tuple[str, str]:
    """Two distinct non-target images, uniform over a sampled pool."""
    eligible = sorted({r.target_id for r in dataset.records} - {record.target_id})
    if len(eligible) < 2:
        raise ValueError(
            f"sample_negative_ids: pool exhausted for record {record.record_id}"
        )
    pool_size = min(pool_size, len(eligible))
    pool = rng.choice(len(eligible), size=pool_size, replace=False)
    a, b = rng.choice(pool_size, size=2, replace=False)
    return eligible[int(pool[a])], eligible[int(pool[b])]


def sample_quadruplet(model: Model, vocab: Vocab, record: DatasetRecord,
                      dataset: Dataset, rng,
                      pool_size: int = 32) -> Quadruplet:
    """Compose the record's four branches with its modifier text."""
    neg_a, neg_b = sample_negative_ids(record, dataset, rng, pool_size)
    toks = tokenize(record.modifier_text, vocab, model.config.max_text_len)

    def compose(image_id):
        feats = encode_image(model, dataset.images[image_id])
        return encode_joint(model, feats, toks)

    return Quadruplet(
        anchor=compose(record.reference_id),
        positive=compose(record.target_id),
        negative_a=compose(neg_a),
        negative_b=compose(neg_b),
        negative_ids=(neg_a, neg_b),
    )


@dataclass
class LossParts:
    total: float
    attention: float
    quadruplet: float


def _unit_rows(pooled: Tensor) -> Tensor:
    """Rows scaled to unit norm; pooled may be (d,) or (B, d)."""
    axis = pooled.ndim - 1
    norms = l2_norm(pooled, axes=axis, keepdims=True)
    return div(pooled, clip_min(norms, 1e-12))


def total_loss(model: Model, quad: Quadruplet, saliency: np.ndarray,
               cfg: LossConfig) -> tuple[Tensor, LossParts]:
    """Combined objective for one sample, with components for logging.

    The attention branch keeps its gradient graph only when the attention
    weight is positive and channel weights are not explicitly detached; it
    is always evaluated so ablation runs still log it.
    """
    score = similarity_score(quad.anchor, quad.positive)
    retain = cfg.attention_weight > 0 and not cfg.detach_channel_weights
    weights = channel_weights(score, quad.positive, retain_graph=retain)
    attn = attention_loss(attention_map(weights, quad.positive), saliency)

    embeddings = [
        quad.anchor.pooled, quad.positive.pooled,
        quad.negative_a.pooled, quad.negative_b.pooled,
    ]
    if cfg.normalize_embeddings:
        embeddings = [_unit_rows(e) for e in embeddings]
    a, p, na, nb = embeddings
    d1 = l2_norm(sub(a, p))
    d2 = l2_norm(sub(a, na))
    d3 = l2_norm(sub(na, nb))
    quad_term = quadruplet_loss(d1, d2, d3, cfg.quadruplet)

    total = combine_losses(attn, quad_term, cfg)
    return total, LossParts(total.item(), attn.item(), quad_term.item())


def _batch_arrays(model: Model, vocab: Vocab, records, dataset: Dataset, rng,
                  cfg: TrainConfig):
    """Stack the four branches of each record into one (4B, ...) batch."""
    images, ids, masks, saliencies = [], [], [], []
    grid = (model.config.grid_h, model.config.grid_w)
    order = []
    for r in records:
        neg_a, neg_b = sample_negative_ids(r, dataset, rng, cfg.negative_pool_size)
        order.append((r.reference_id, r.target_id, neg_a, neg_b))
        toks = tokenize(r.modifier_text, vocab, model.config.max_text_len)
        ids.append(toks.ids)
        masks.append(toks.mask)
        saliencies.append(
            record_saliency(dataset, r, grid, cfg.saliency_threshold)
        )
    for branch in range(4):
        for row in order:
            images.append(dataset.images[row[branch]])
    ids = np.tile(np.stack(ids), (4, 1))
    masks = np.tile(np.stack(masks), (4, 1))
    return np.stack(images), ids, masks, np.stack(saliencies)


def train_step(model: Model, vocab: Vocab, records, dataset: Dataset, rng,
               train_cfg: TrainConfig, loss_cfg: LossConfig):
    """Gradients and loss components for one minibatch (one taped graph)."""
    images, ids, masks, saliencies = _batch_arrays(
        model, vocab, records, dataset, rng, train_cfg
    )
    b = len(records)
    mn = model.config.grid_tokens
    names = sorted(model.params)
    with Tape():
        feats = encode_images(model, images)
        batch = encode_joint_batch(model, feats, ids, masks)
        anchor = narrow(batch.pooled, 0, 0, b)
        positive = narrow(batch.pooled, 0, b, b)
        neg_a = narrow(batch.pooled, 0, 2 * b, b)
        neg_b = narrow(batch.pooled, 0, 3 * b, b)

        scores = batch_similarity(anchor, positive)
        if loss_cfg.normalize_embeddings:
            anchor, positive, neg_a, neg_b = (
                _unit_rows(t) for t in (anchor, positive, neg_a, neg_b)
            )
        retain = loss_cfg.attention_weight > 0 and not loss_cfg.detach_channel_weights
        g_all = batch_channel_weights(
            tensor_sum(scores), batch.activations, mn, retain_graph=retain
        )
        maps = batch_attention_maps(
            narrow(g_all, 0, b, b), narrow(batch.grid, 0, b, b)
        )
        attn = mean(batch_attention_loss(maps, saliencies))

        d1 = l2_norm(sub(anchor, positive), axes=1)
        d2 = l2_norm(sub(anchor, neg_a), axes=1)
        d3 = l2_norm(sub(neg_a, neg_b), axes=1)
        quad = mean(quadruplet_loss(d1, d2, d3, loss_cfg.quadruplet))

        total = combine_losses(attn, quad, loss_cfg)
        if not np.isfinite(total.data):
            raise RuntimeError(
                "train_step: non-finite loss on records "
                f"{[r.record_id for r in records]}"
            )
        grads = backward(total, [model.params[n] for n in names])
    parts = LossParts(total.item(), attn.item(), quad.item())
    return dict(zip(names, (g.data for g in grads))), parts


@dataclass
class TrainResult:
    metrics: list[dict] = field(default_factory=list)
    optimizer_steps: int = 0
    best_composite: float = -1.0
    best_epoch: int = -1
    best_checkpoint: Path | None = None
    last_checkpoint: Path | None = None
    metrics_path: Path | None = None


def _probe_metrics(model: Model, vocab: Vocab, dataset: Dataset,
                   probes: list[DatasetRecord],
                   threshold: float) -> dict:
    """Validation probe: recalls over the probes' own subset universe plus
    attention IoU, cheap enough to run every epoch."""
    gallery = dataset.gallery_ids(probes)
    results = [
        rank_gallery(model, vocab, r, dataset.images, gallery) for r in probes
    ]
    grid = (model.config.grid_h, model.config.grid_w)
    maps = attention_maps_for_records(model, vocab, dataset, probes)
    ious = [
        attention_iou(m, record_saliency(dataset, r, grid, threshold))
        for m, r in zip(maps, probes)
    ]
    r1 = recall_at_k(results, 1)
    r5 = recall_at_k(results, 5)
    rs1 = recall_subset_at_k(results, 1)
    return {
        "attention_iou": float(np.mean(ious)),
        "recall_at_1": r1,
        "recall_at_5": r5,
        "recall_subset_at_1": rs1,
        "composite": composite_metric(r5, rs1),
    }


def train(dataset: Dataset, train_records: list[DatasetRecord],
          val_records: list[DatasetRecord], model: Model, vocab: Vocab,
          train_cfg: TrainConfig, loss_cfg: LossConfig,
          out_dir) -> TrainResult:
    """Full training run; writes metrics.jsonl, best.ckpt and last.ckpt.

    Fully deterministic for a fixed seed and configuration: shuffling,
    negative sampling, and probe selection all derive from the seed, and
    the metrics log carries no timestamps.
    """
    if not train_records or not val_records:
        raise ValueError("train: need non-empty train and validation sets")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl"

    rng = np.random.default_rng(train_cfg.seed)
    probe_rng = np.random.default_rng(train_cfg.seed + 1)
    n_probes = min(train_cfg.probe_queries, len(val_records))
    probe_idx = probe_rng.choice(len(val_records), size=n_probes, replace=False)
    probes = [val_records[i] for i in sorted(int(i) for i in probe_idx)]

    state = init_state(model.params)
    result = TrainResult(metrics_path=metrics_path)
    ckpt_extra = {"train_config": train_cfg.to_dict(),
                  "attention_weight": loss_cfg.attention_weight}

    with open(metrics_path, "w") as log:
        for epoch in range(1, train_cfg.epochs + 1):
            order = rng.permutation(len(train_records))
            sums = np.zeros(3)
            steps = 0
            for start in range(0, len(order), train_cfg.batch_size):
                chunk = [train_records[int(i)]
                         for i in order[start : start + train_cfg.batch_size]]
                grads, parts = train_step(
                    model, vocab, chunk, dataset, rng, train_cfg, loss_cfg
                )
                adamw_step(
                    model.params, grads, state,
                    lr=train_cfg.learning_rate,
                    weight_decay=train_cfg.weight_decay,
                )
                sums += (parts.total, parts.attention, parts.quadruplet)
                steps += 1
                result.optimizer_steps += 1

            probe = _probe_metrics(
                model, vocab, dataset, probes, train_cfg.saliency_threshold
            )
            record = {
                "epoch": epoch,
                "loss_total": float(sums[0] / steps),
                "loss_attention": float(sums[1] / steps),
                "loss_quadruplet": float(sums[2] / steps),
                **probe,
            }
            log.write(json.dumps(record, sort_keys=True) + "\n")
            log.flush()
            result.metrics.append(record)
            logger.info(
                "epoch %d: loss %.4f (attn %.4f quad %.4f) iou %.3f composite %.3f",
                epoch, record["loss_total"], record["loss_attention"],
                record["loss_quadruplet"], record["attention_iou"],
                record["composite"],
            )

            if record["composite"] >= result.best_composite:
                result.best_composite = record["composite"]
                result.best_epoch = epoch
                result.best_checkpoint = out / "best.ckpt"
                save_checkpoint(
                    result.best_checkpoint, model, vocab,
                    extra={**ckpt_extra, "epoch": epoch,
                           "composite": record["composite"]},
                )

    result.last_checkpoint = out / "last.ckpt"
    save_checkpoint(
        result.last_checkpoint, model, vocab,
        extra={**ckpt_extra, "epoch": train_cfg.epochs},
    )
    return result


def split_records(dataset: Dataset, val_fraction: float,
                  seed: int) -> tuple[list[DatasetRecord], list[DatasetRecord]]:
    """Deterministic train/validation split of a dataset's records."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("split_records: val fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dataset.records))
    n_val = max(1, int(round(val_fraction * len(dataset.records))))
    val_idx = set(int(i) for i in order[:n_val])
    train = [r for i, r in enumerate(dataset.records) if i not in val_idx]
    val = [r for i, r in enumerate(dataset.records) if i in val_idx]
    return train, val
