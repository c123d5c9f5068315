"""Text-conditioned gradient attention and its saliency alignment loss.

The retrieval score is the cosine similarity between the pooled joint
embeddings of the reference and target branches.  Channel weights are the
gradients of that score taken against the target branch's final dense-layer
activations, aggregated over the spatial grid; the attention map is the
ReLU of the channel-weighted sum over grid slices.  Keeping the gradient on
the tape (``retain_graph=True``) makes the alignment loss trainable end to
end, which requires a second backward pass through the gradient itself.

Conventions:

* channel weights aggregate spatially by summation; the downstream loss and
  IoU are invariant to positive rescaling of the map, so only the tabulated
  unit behavior depends on this choice;
* a map or saliency with (near-)zero norm makes the alignment loss exactly 1
  with zero gradient, signaling "no attention anywhere is maximally wrong".
"""

from __future__ import annotations

import numpy as np

from .autodiff import (
    Tensor,
    add,
    backward,
    clip_min,
    cosine_similarity,
    div,
    is_reachable,
    l2_norm,
    mul,
    narrow,
    relu,
    reshape,
    sub,
    tensor_sum,
)
from .model import JointEmbedding

EPS = 1e-12


def similarity_score(ref: JointEmbedding, tgt: JointEmbedding) -> Tensor:
    """Cosine similarity of the two pooled joint embeddings, on the tape."""
    if ref.pooled.shape != tgt.pooled.shape:
        raise ValueError(
            f"similarity_score: pooled dims {ref.pooled.shape} vs "
            f"{tgt.pooled.shape} do not match"
        )
    return cosine_similarity(ref.pooled, tgt.pooled, EPS)


def channel_weights(score: Tensor, tgt: JointEmbedding,
                    retain_graph: bool = False) -> Tensor:
    """Per-channel weights: d(score)/d(activations), summed over the grid.

    With ``retain_graph=True`` the result stays differentiable, so a loss on
    the attention map reaches the model parameters through the gradient
    computation itself.  With ``False`` the weights are detached constants
    (the ablation variant).
    """
    acts = tgt.last_layer_activations
    if not is_reachable(score, acts):
        raise ValueError(
            "channel_weights: score is not reachable from the target's "
            "last-layer activations"
        )
    (d_acts,) = backward(score, [acts], retain_graph=retain_graph)
    grid_tokens = tgt.grid.shape[1] * tgt.grid.shape[2]
    return tensor_sum(narrow(d_acts, 0, 0, grid_tokens), axes=0)


def attention_map(weights: Tensor, tgt: JointEmbedding) -> Tensor:
    """ReLU of the channel-weighted sum of grid slices; shape (m, n)."""
    d = tgt.grid.shape[0]
    if weights.shape != (d,):
        raise ValueError(
            f"attention_map: weights shape {weights.shape} does not match "
            f"grid channels {d}"
        )
    weighted = mul(reshape(weights, (d, 1, 1)), tgt.grid)
    return relu(tensor_sum(weighted, axes=0))


def attention_loss(attn: Tensor, saliency: np.ndarray) -> Tensor:
    """One minus the cosine between the flattened map and saliency.

    Defined as exactly 1 (a constant, with zero gradient) when either side
    has norm below ``EPS``.
    """
    saliency = np.asarray(saliency, dtype=np.float64)
    if attn.shape != saliency.shape:
        raise ValueError(
            f"attention_loss: map shape {attn.shape} does not match "
            f"saliency shape {saliency.shape}"
        )
    if (np.linalg.norm(attn.data) < EPS) or (np.linalg.norm(saliency) < EPS):
        # exactly 1, but still on the tape so backward yields plain zeros
        return add(mul(tensor_sum(attn), 0.0), 1.0)
    s = Tensor(saliency)
    num = tensor_sum(mul(attn, s))
    den = clip_min(mul(l2_norm(attn), l2_norm(s)), EPS)
    return sub(1.0, div(num, den))


# ---------------------------------------------------------------------------
# batched variants used by the training loop; semantics match the
# single-sample operations record by record.


def batch_similarity(a_pooled: Tensor, b_pooled: Tensor) -> Tensor:
    """Row-wise cosine similarity for (B, d) pooled embeddings."""
    num = tensor_sum(mul(a_pooled, b_pooled), axes=1)
    den = clip_min(
        mul(l2_norm(a_pooled, axes=1), l2_norm(b_pooled, axes=1)), EPS
    )
    return div(num, den)


def batch_channel_weights(score_sum: Tensor, activations: Tensor,
                          grid_tokens: int,
                          retain_graph: bool = False) -> Tensor:
    """(B, d) channel weights from the summed per-record scores.

    ``activations`` must be the (B, tokens, d) tensor the scores were built
    from; record b's score depends only on record b's rows, so one backward
    pass through the sum recovers every per-record gradient at once.  Rows
    belonging to branches a score does not touch come back as zeros; callers
    slice out the target-branch block.
    """
    (d_acts,) = backward(score_sum, [activations], retain_graph=retain_graph)
    return tensor_sum(narrow(d_acts, 1, 0, grid_tokens), axes=1)


def batch_attention_maps(weights: Tensor, grid: Tensor) -> Tensor:
    """(B, m, n) attention maps from (B, d) weights and a (B, d, m, n) grid."""
    bsz, d = weights.shape
    weighted = mul(reshape(weights, (bsz, d, 1, 1)), grid)
    return relu(tensor_sum(weighted, axes=1))


def batch_attention_loss(maps: Tensor, saliency: np.ndarray) -> Tensor:
    """(B,) per-record alignment losses with the degenerate-norm rule."""
    saliency = np.asarray(saliency, dtype=np.float64)
    if maps.shape != saliency.shape:
        raise ValueError(
            f"batch_attention_loss: maps {maps.shape} vs saliency "
            f"{saliency.shape}"
        )
    m_norms = np.linalg.norm(maps.data.reshape(maps.shape[0], -1), axis=1)
    s_norms = np.linalg.norm(saliency.reshape(saliency.shape[0], -1), axis=1)
    degenerate = (m_norms < EPS) | (s_norms < EPS)

    s = Tensor(saliency)
    num = tensor_sum(mul(maps, s), axes=(1, 2))
    den = clip_min(mul(l2_norm(maps, axes=(1, 2)), l2_norm(s, axes=(1, 2))), EPS)
    losses = sub(1.0, div(num, den))
    if not degenerate.any():
        return losses
    # pin degenerate records to the constant 1 and cut their gradient
    keep = Tensor((~degenerate).astype(np.float64))
    return add(mul(losses, keep), Tensor(degenerate.astype(np.float64)))
