"""Retrieval evaluation, attention quality metrics, and raster export.

The ranking protocol composes every gallery candidate with the query's
modifier text (the Siamese protocol), scores by cosine similarity of pooled
joint embeddings, and breaks score ties by gallery id.  Subset recall
re-ranks only the five non-reference subset candidates.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention import attention_loss, attention_map, channel_weights, \
    similarity_score
from .autodiff import Tape, Tensor
from .data import Dataset, DatasetRecord, record_saliency
from .model import Model, Vocab, encode_image, encode_images, encode_joint, \
    encode_joint_batch, tokenize
from .pnm import image_to_u8, write_pgm, write_ppm

_CHUNK = 64


@dataclass
class RankedResult:
    query_id: str
    ranking: list[tuple[str, float]]  # (gallery id, score), scores non-increasing
    target_id: str
    subset_ids: list[str]
    reference_id: str


@dataclass
class MetricsReport:
    recall_at: dict[int, float]
    recall_subset_at: dict[int, float]
    composite: float
    mean_attention_iou: float
    mean_attention_loss: float

    def to_dict(self) -> dict:
        out = {f"recall_at_{k}": v for k, v in sorted(self.recall_at.items())}
        out.update(
            {f"recall_subset_at_{k}": v
             for k, v in sorted(self.recall_subset_at.items())}
        )
        out["composite"] = self.composite
        out["mean_attention_iou"] = self.mean_attention_iou
        out["mean_attention_loss"] = self.mean_attention_loss
        return out

    def table(self) -> str:
        rows = [f"{'metric':<22}{'value':>10}"]
        for name, value in self.to_dict().items():
            rows.append(f"{name:<22}{value:>10.4f}")
        return "\n".join(rows)


def composite_metric(recall_5: float, recall_subset_1: float) -> float:
    """Arithmetic mean of full-gallery R@5 and subset R@1."""
    return (recall_5 + recall_subset_1) / 2.0


def _pooled_embeddings(model: Model, images: np.ndarray, ids: np.ndarray,
                       mask: np.ndarray) -> np.ndarray:
    """(B, dim) pooled joint embeddings, constants (no tape)."""
    feats = encode_images(model, images)
    return encode_joint_batch(model, feats, ids, mask).pooled.data


def rank_gallery(model: Model, vocab: Vocab, record: DatasetRecord,
                 images: dict[str, np.ndarray],
                 gallery_ids: list[str]) -> RankedResult:
    """Scores of every gallery image composed with the query's text."""
    if not gallery_ids:
        raise ValueError("rank_gallery: empty gallery")
    cfg = model.config
    toks = tokenize(record.modifier_text, vocab, cfg.max_text_len)
    query = _pooled_embeddings(
        model, images[record.reference_id][None], toks.ids[None], toks.mask[None]
    )[0]
    qnorm = max(float(np.linalg.norm(query)), 1e-12)

    scores: dict[str, float] = {}
    for start in range(0, len(gallery_ids), _CHUNK):
        chunk = gallery_ids[start : start + _CHUNK]
        batch = np.stack([images[g] for g in chunk])
        ids = np.repeat(toks.ids[None], len(chunk), axis=0)
        mask = np.repeat(toks.mask[None], len(chunk), axis=0)
        pooled = _pooled_embeddings(model, batch, ids, mask)
        norms = np.maximum(np.linalg.norm(pooled, axis=1), 1e-12)
        sims = pooled @ query / (norms * qnorm)
        for gid, s in zip(chunk, sims):
            scores[gid] = float(s)

    order = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    return RankedResult(
        query_id=record.record_id,
        ranking=order,
        target_id=record.target_id,
        subset_ids=list(record.subset),
        reference_id=record.reference_id,
    )


def recall_at_k(results: list[RankedResult], k: int) -> float:
    """Fraction of queries whose target ranks in the top k of the gallery."""
    if k < 1:
        raise ValueError(f"recall_at_k: k must be >= 1, got {k}")
    if not results:
        raise ValueError("recall_at_k: no results")
    hits = 0
    for r in results:
        size = len(r.ranking)
        kk = k
        if kk > size:
            warnings.warn(
                f"recall_at_k: k={k} exceeds gallery size {size}; clamping",
                stacklevel=2,
            )
            kk = size
        top = [gid for gid, _ in r.ranking[:kk]]
        hits += r.target_id in top
    return hits / len(results)


def recall_subset_at_k(results: list[RankedResult], k: int) -> float:
    """Recall over each query's five non-reference subset candidates."""
    if k < 1:
        raise ValueError(f"recall_subset_at_k: k must be >= 1, got {k}")
    if not results:
        raise ValueError("recall_subset_at_k: no results")
    hits = 0
    for r in results:
        candidates = [gid for gid in r.subset_ids if gid != r.reference_id]
        if len(r.subset_ids) != 6 or len(candidates) != 5 or (
            r.target_id not in candidates
        ):
            raise ValueError(
                f"recall_subset_at_k: malformed subset for query {r.query_id}"
            )
        scores = dict(r.ranking)
        missing = [gid for gid in candidates if gid not in scores]
        if missing:
            raise ValueError(
                f"recall_subset_at_k: subset members {missing} missing from "
                f"ranking of query {r.query_id}"
            )
        order = sorted(candidates, key=lambda gid: (-scores[gid], gid))
        hits += r.target_id in order[: min(k, len(order))]
    return hits / len(results)


def attention_iou(attn: np.ndarray, saliency: np.ndarray,
                  bin_threshold: float = 0.5) -> float:
    """IoU of the map binarized at bin_threshold * max(map) against saliency.

    Both sides empty gives 1.0; exactly one empty gives 0.0.
    """
    attn = np.asarray(attn, dtype=np.float64)
    saliency = np.asarray(saliency, dtype=np.float64)
    if attn.shape != saliency.shape:
        raise ValueError(
            f"attention_iou: shapes {attn.shape} and {saliency.shape} differ"
        )
    peak = attn.max()
    hot = (attn >= bin_threshold * peak) if peak > 0 else np.zeros_like(attn, bool)
    truth = saliency > 0.5
    union = (hot | truth).sum()
    if union == 0:
        return 1.0
    return float((hot & truth).sum() / union)


def attention_maps_for_records(model: Model, vocab: Vocab, dataset: Dataset,
                               records: list[DatasetRecord]) -> list[np.ndarray]:
    """Target-side attention maps, one per record (detached arrays)."""
    cfg = model.config
    maps = []
    for record in records:
        toks = tokenize(record.modifier_text, vocab, cfg.max_text_len)
        with Tape():
            ref = encode_joint(
                model, encode_image(model, dataset.images[record.reference_id]), toks
            )
            tgt = encode_joint(
                model, encode_image(model, dataset.images[record.target_id]), toks
            )
            score = similarity_score(ref, tgt)
            weights = channel_weights(score, tgt, retain_graph=False)
            maps.append(attention_map(weights, tgt).data.copy())
    return maps


def bilinear_upsample(small: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Edge-clamped bilinear resampling of a 2-d map."""
    small = np.asarray(small, dtype=np.float64)
    in_h, in_w = small.shape
    ys = (np.arange(out_h) + 0.5) * in_h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * in_w / out_w - 0.5
    y0f, x0f = np.floor(ys), np.floor(xs)
    ty, tx = ys - y0f, xs - x0f
    y0 = np.clip(y0f.astype(int), 0, in_h - 1)
    y1 = np.clip(y0f.astype(int) + 1, 0, in_h - 1)
    x0 = np.clip(x0f.astype(int), 0, in_w - 1)
    x1 = np.clip(x0f.astype(int) + 1, 0, in_w - 1)
    top = small[y0][:, x0] * (1 - tx) + small[y0][:, x1] * tx
    bottom = small[y1][:, x0] * (1 - tx) + small[y1][:, x1] * tx
    return top * (1 - ty)[:, None] + bottom * ty[:, None]


def export_attention(attn: np.ndarray, image: np.ndarray, path) -> tuple:
    """Write the normalized, upsampled map as grayscale plus a color overlay.

    Returns (grayscale path, overlay path); the overlay blends the base
    image and a blue-to-red heat ramp half and half.
    """
    attn = np.asarray(attn, dtype=np.float64)
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    spread = attn.max() - attn.min()
    if spread > 0:
        normed = (attn - attn.min()) / spread
    else:
        normed = np.full(attn.shape, 0.5)
    big = bilinear_upsample(normed, h, w)

    gray_path = Path(path)
    try:
        write_pgm(gray_path, image_to_u8(big))
        heat = np.stack([big, np.zeros_like(big), 1.0 - big], axis=2)
        overlay = 0.5 * image + 0.5 * heat
        overlay_path = gray_path.with_name(gray_path.stem + "_overlay.ppm")
        write_ppm(overlay_path, image_to_u8(overlay))
    except OSError as exc:
        raise OSError(f"export_attention: cannot write {path}: {exc}") from exc
    return gray_path, overlay_path


def evaluate(model: Model, vocab: Vocab, dataset: Dataset,
             records: list[DatasetRecord],
             gallery_ids: list[str] | None = None,
             recall_ks=(1, 5, 10, 50),
             subset_ks=(1, 2, 3),
             saliency_threshold: float = 0.5) -> MetricsReport:
    """Full retrieval protocol plus attention quality over the records."""
    if gallery_ids is None:
        gallery_ids = dataset.gallery_ids(records)
    results = [
        rank_gallery(model, vocab, r, dataset.images, gallery_ids)
        for r in records
    ]
    cfg = model.config
    grid = (cfg.grid_h, cfg.grid_w)
    maps = attention_maps_for_records(model, vocab, dataset, records)
    ious, losses = [], []
    for record, attn in zip(records, maps):
        truth = record_saliency(dataset, record, grid, saliency_threshold)
        ious.append(attention_iou(attn, truth))
        losses.append(attention_loss(Tensor(attn), truth).item())

    recall = {k: recall_at_k(results, k) for k in recall_ks}
    subset = {k: recall_subset_at_k(results, k) for k in subset_ks}
    return MetricsReport(
        recall_at=recall,
        recall_subset_at=subset,
        composite=composite_metric(recall.get(5, 0.0), subset.get(1, 0.0)),
        mean_attention_iou=float(np.mean(ious)),
        mean_attention_loss=float(np.mean(losses)),
    )
