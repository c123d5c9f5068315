"""Composed image retrieval with text-conditioned gradient attention,
trained end to end on a from-scratch double-backward autodiff engine."""

from .attention import (
    attention_loss,
    attention_map,
    channel_weights,
    similarity_score,
)
from .autodiff import Tape, Tensor, backward, cosine_similarity, no_grad
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    Dataset,
    DatasetRecord,
    aggregate_saliency,
    generate_synthetic,
    load_dataset,
    record_saliency,
    write_dataset,
)
from .evaluation import (
    MetricsReport,
    RankedResult,
    attention_iou,
    composite_metric,
    evaluate,
    export_attention,
    rank_gallery,
    recall_at_k,
    recall_subset_at_k,
)
from .keyphrases import extract_key_phrases
from .losses import LossConfig, QuadrupletConfig, quadruplet_loss
from .model import (
    EncoderConfig,
    JointEmbedding,
    Model,
    Vocab,
    encode_image,
    encode_joint,
    init_model,
    tokenize,
)
from .optim import AdamWState, adamw_step, init_state
from .training import TrainConfig, sample_quadruplet, total_loss, train

__version__ = "0.1.0"
