"""Toy Siamese encoder stack: a patch-based image encoder feeding a joint
image-text transformer, with one parameter set shared by the reference and
target branches.

Scale defaults keep a full training run in CPU minutes while preserving the
mechanisms: patch embedding, learned positions, multi-head self-attention,
padding masks, and a final dense layer whose activations carry the spatial
token grid used for gradient attention.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Tensor,
    add,
    bmm,
    broadcast_to,
    concat,
    div,
    embed,
    layer_norm,
    matmul,
    mul,
    narrow,
    permute,
    relu,
    reshape,
    softmax,
    tensor_sum,
)

PAD_ID = 0
UNK_ID = 1

_WORD_RE = re.compile(r"[a-z0-9]+")

# additive attention bias that effectively removes padded keys
_MASKED_OUT = -1e9


@dataclass(frozen=True)
class EncoderConfig:
    """Dimensions and seed for both encoders.

    ``grid_h`` x ``grid_w`` is the spatial token grid of the image branch;
    image tokens plus text tokens must fit in ``token_budget``.
    """

    image_height: int = 32
    image_width: int = 32
    patch_size: int = 8
    dim: int = 16
    heads: int = 2
    layers: int = 2
    vocab_size: int = 64
    max_text_len: int = 12
    token_budget: int = 64
    init_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if min(self.image_height, self.image_width, self.patch_size, self.dim,
               self.heads, self.layers, self.vocab_size, self.max_text_len) < 1:
            raise ValueError("EncoderConfig: all dimensions must be positive")
        if self.init_std <= 0:
            raise ValueError("EncoderConfig: init std must be positive")
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ValueError(
                f"EncoderConfig: image {self.image_height}x{self.image_width} is "
                f"not a multiple of patch size {self.patch_size}"
            )
        if self.dim % self.heads:
            raise ValueError(
                f"EncoderConfig: dim {self.dim} not divisible by heads {self.heads}"
            )
        if self.grid_tokens + self.max_text_len > self.token_budget:
            raise ValueError(
                f"EncoderConfig: {self.grid_tokens} image tokens + "
                f"{self.max_text_len} text tokens exceed budget {self.token_budget}"
            )
        if self.vocab_size <= UNK_ID:
            raise ValueError("EncoderConfig: vocab must hold pad and unk ids")

    @property
    def grid_h(self) -> int:
        return self.image_height // self.patch_size

    @property
    def grid_w(self) -> int:
        return self.image_width // self.patch_size

    @property
    def grid_tokens(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def joint_tokens(self) -> int:
        return self.grid_tokens + self.max_text_len

    @property
    def mlp_dim(self) -> int:
        return 2 * self.dim

    def to_dict(self) -> dict:
        return {
            "image_height": self.image_height,
            "image_width": self.image_width,
            "patch_size": self.patch_size,
            "dim": self.dim,
            "heads": self.heads,
            "layers": self.layers,
            "vocab_size": self.vocab_size,
            "max_text_len": self.max_text_len,
            "token_budget": self.token_budget,
            "init_std": self.init_std,
            "seed": self.seed,
        }


@dataclass
class Vocab:
    """Word-to-id map with fixed pad/unk slots."""

    word_to_id: dict[str, int]

    @classmethod
    def build(cls, texts) -> "Vocab":
        words = sorted({w for t in texts for w in _WORD_RE.findall(t.lower())})
        return cls({w: i + 2 for i, w in enumerate(words)})

    def __len__(self):
        return len(self.word_to_id) + 2

    def lookup(self, word: str) -> int:
        return self.word_to_id.get(word, UNK_ID)


@dataclass
class TokenSequence:
    """Fixed-length id sequence; mask is 0 on padding positions."""

    ids: np.ndarray
    mask: np.ndarray

    @property
    def length(self) -> int:
        return int(self.mask.sum())


def tokenize(text: str, vocab: Vocab, max_len: int) -> TokenSequence:
    """Lowercase, split on whitespace/punctuation, map through the vocab.

    Unknown words map to the unk id; empty text yields a single unk token.
    The result is truncated or padded to ``max_len``.
    """
    words = _WORD_RE.findall(text.lower())
    ids = [vocab.lookup(w) for w in words] or [UNK_ID]
    ids = ids[:max_len]
    n = len(ids)
    out = np.full(max_len, PAD_ID, dtype=np.intp)
    out[:n] = ids
    mask = np.zeros(max_len)
    mask[:n] = 1.0
    return TokenSequence(out, mask)


@dataclass
class JointEmbedding:
    """Output of the joint encoder for one (image, text) pair.

    ``pooled`` is the mean over non-padding output tokens of the final dense
    layer; ``grid`` is that layer's image-token block reshaped to
    (dim, grid_h, grid_w); ``last_layer_activations`` keeps the raw
    (tokens, dim) output on the tape so gradients can be taken against it.
    """

    pooled: Tensor
    grid: Tensor
    last_layer_activations: Tensor


@dataclass
class Model:
    config: EncoderConfig
    params: dict[str, Tensor] = field(repr=False)


def _layer_param_names(prefix: str, i: int):
    # the key projection carries no bias: a per-query constant shift of the
    # attention scores cancels in the softmax, so it would be a dead weight
    base = f"{prefix}{i}_"
    return [
        base + n
        for n in (
            "ln1_g", "ln1_b", "wq", "bq", "wk", "wv", "bv", "wo", "bo",
            "ln2_g", "ln2_b", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2",
        )
    ]


def init_model(config: EncoderConfig) -> Model:
    """Seeded-Gaussian weights at ``config.init_std``; norm gains start at 1,
    biases at 0.  The 0.02 default matches large-model convention; at toy
    widths a width-aware value around 1/sqrt(dim) trains far faster."""
    rng = np.random.default_rng(config.seed)
    d, ff = config.dim, config.mlp_dim
    params: dict[str, Tensor] = {}

    def gauss(name, shape):
        params[name] = Tensor(
            rng.normal(0.0, config.init_std, shape), requires_grad=True
        )

    def fixed(name, value):
        params[name] = Tensor(value, requires_grad=True)

    gauss("img_patch_w", (config.patch_size**2 * 3, d))
    fixed("img_patch_b", np.zeros(d))
    gauss("img_pos", (config.grid_tokens, d))
    gauss("tok_embed", (config.vocab_size, d))
    gauss("txt_pos", (config.max_text_len, d))
    gauss("type_embed", (2, d))
    for prefix in ("img", "joint"):
        for i in range(config.layers):
            names = _layer_param_names(prefix, i)
            for name in names:
                leaf = name.rsplit("_", 1)[-1]
                if name.endswith(("ln1_g", "ln2_g")):
                    fixed(name, np.ones(d))
                elif name.endswith(("ln1_b", "ln2_b")) or leaf.startswith("b"):
                    width = ff if name.endswith("mlp_b1") else d
                    fixed(name, np.zeros(width))
                elif name.endswith("mlp_w1"):
                    gauss(name, (d, ff))
                elif name.endswith("mlp_w2"):
                    gauss(name, (ff, d))
                else:
                    gauss(name, (d, d))
    gauss("out_w", (d, d))
    fixed("out_b", np.zeros(d))
    return Model(config, params)


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """(B, T, d_in) @ (d_in, d_out) + bias, via a flattened 2-d matmul."""
    bsz, t, din = x.shape
    flat = matmul(reshape(x, (bsz * t, din)), w)
    return add(reshape(flat, (bsz, t, w.shape[1])), b)


def _attention(x: Tensor, mask_bias: np.ndarray, p: dict[str, Tensor],
               names: list[str], heads: int) -> Tensor:
    (ln1_g, ln1_b, wq, bq, wk, wv, bv, wo, bo) = (p[n] for n in names[:9])
    bsz, t, d = x.shape
    dh = d // heads
    h = layer_norm(x, ln1_g, ln1_b)
    q = _linear(h, wq, bq)
    k = reshape(matmul(reshape(h, (bsz * t, d)), wk), (bsz, t, d))
    v = _linear(h, wv, bv)

    def split_heads(z):
        z = reshape(z, (bsz, t, heads, dh))
        return reshape(permute(z, (0, 2, 1, 3)), (bsz * heads, t, dh))

    q, k, v = split_heads(q), split_heads(k), split_heads(v)
    scores = mul(bmm(q, permute(k, (0, 2, 1))), 1.0 / np.sqrt(dh))
    scores = add(scores, Tensor(mask_bias))
    attn = softmax(scores, axis=2)
    ctx = bmm(attn, v)
    ctx = reshape(permute(reshape(ctx, (bsz, heads, t, dh)), (0, 2, 1, 3)), (bsz, t, d))
    return _linear(ctx, wo, bo)


def _block(x: Tensor, mask_bias: np.ndarray, p: dict[str, Tensor],
           prefix: str, i: int, heads: int) -> Tensor:
    names = _layer_param_names(prefix, i)
    x = add(x, _attention(x, mask_bias, p, names, heads))
    (ln2_g, ln2_b, w1, b1, w2, b2) = (p[n] for n in names[9:])
    h = layer_norm(x, ln2_g, ln2_b)
    h = _linear(relu(_linear(h, w1, b1)), w2, b2)
    return add(x, h)


def _mask_bias(mask: np.ndarray, heads: int) -> np.ndarray:
    """(B, T) key mask -> (B*heads, 1, T) additive attention bias."""
    bias = np.where(mask > 0, 0.0, _MASKED_OUT)[:, None, :]
    return np.repeat(bias, heads, axis=0)


def patch_tokens(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, 3) -> (B, H/p * W/p, p*p*3) row-major patch matrix."""
    b, hgt, wid, c = images.shape
    m, n = hgt // patch, wid // patch
    x = images.reshape(b, m, patch, n, patch, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, m * n, patch * patch * c)


def _validate_image(config: EncoderConfig, img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.shape != (config.image_height, config.image_width, 3):
        raise ValueError(
            f"image shape {img.shape} does not match configured "
            f"({config.image_height}, {config.image_width}, 3)"
        )
    if np.min(img) < 0.0 or np.max(img) > 1.0:
        raise ValueError("image intensities must lie in [0, 1]")
    return img


def encode_images(model: Model, images: np.ndarray) -> Tensor:
    """Batched image encoder: (B, H, W, 3) -> (B, grid_tokens, dim)."""
    cfg, p = model.config, model.params
    tokens = Tensor(patch_tokens(images, cfg.patch_size))
    x = add(_linear(tokens, p["img_patch_w"], p["img_patch_b"]), p["img_pos"])
    bias = _mask_bias(np.ones((images.shape[0], cfg.grid_tokens)), cfg.heads)
    for i in range(cfg.layers):
        x = _block(x, bias, p, "img", i, cfg.heads)
    return x


def encode_image(model: Model, img: np.ndarray) -> Tensor:
    """Single-image features: (H, W, 3) -> (grid_tokens, dim)."""
    img = _validate_image(model.config, img)
    feats = encode_images(model, img[None])
    return reshape(feats, feats.shape[1:])


@dataclass
class JointBatch:
    """Joint-encoder outputs for a batch, all still on the tape."""

    activations: Tensor  # (B, joint_tokens, dim)
    pooled: Tensor       # (B, dim)
    grid: Tensor         # (B, dim, grid_h, grid_w)


def _joint_activations(model: Model, feats: Tensor, ids: np.ndarray,
                       mask: np.ndarray) -> tuple[Tensor, np.ndarray]:
    cfg, p = model.config, model.params
    bsz = feats.shape[0]
    mn, t_txt = cfg.grid_tokens, cfg.max_text_len
    if ids.shape != (bsz, t_txt) or mask.shape != (bsz, t_txt):
        raise ValueError(
            f"token batch shape {ids.shape} does not match ({bsz}, {t_txt})"
        )
    if mn + t_txt > cfg.token_budget:
        raise ValueError("token budget exceeded")

    txt = add(add(embed(p["tok_embed"], ids), p["txt_pos"]),
              reshape(narrow(p["type_embed"], 0, 1, 1), (cfg.dim,)))
    img = add(feats, reshape(narrow(p["type_embed"], 0, 0, 1), (cfg.dim,)))
    x = concat([img, txt], axis=1)

    full_mask = np.concatenate([np.ones((bsz, mn)), mask], axis=1)
    bias = _mask_bias(full_mask, cfg.heads)
    for i in range(cfg.layers):
        x = _block(x, bias, p, "joint", i, cfg.heads)
    return _linear(x, p["out_w"], p["out_b"]), full_mask


def _pool_and_grid(cfg: EncoderConfig, acts: Tensor,
                   full_mask: np.ndarray) -> tuple[Tensor, Tensor]:
    keep = Tensor(full_mask[:, :, None])
    counts = Tensor(full_mask.sum(axis=1, keepdims=True))
    pooled = div(tensor_sum(mul(acts, keep), axes=1), counts)
    grid = permute(narrow(acts, 1, 0, cfg.grid_tokens), (0, 2, 1))
    grid = reshape(grid, (acts.shape[0], cfg.dim, cfg.grid_h, cfg.grid_w))
    return pooled, grid


def encode_joint_batch(model: Model, feats: Tensor, ids: np.ndarray,
                       mask: np.ndarray) -> JointBatch:
    """Joint encoder over a batch of (image features, token sequence) pairs.

    ``feats`` is (B, grid_tokens, dim); ``ids``/``mask`` are (B, max_text_len).
    """
    acts, full_mask = _joint_activations(model, feats, ids, mask)
    pooled, grid = _pool_and_grid(model.config, acts, full_mask)
    return JointBatch(acts, pooled, grid)


def encode_joint(model: Model, feats: Tensor, toks: TokenSequence) -> JointEmbedding:
    """Single-sample joint embedding (see :class:`JointEmbedding`).

    The pooled vector and spatial grid are derived from the returned
    activations tensor, so a score built on ``pooled`` stays differentiable
    against ``last_layer_activations``.
    """
    cfg = model.config
    if feats.shape != (cfg.grid_tokens, cfg.dim):
        raise ValueError(
            f"image features shape {feats.shape} does not match "
            f"({cfg.grid_tokens}, {cfg.dim})"
        )
    batch_acts, full_mask = _joint_activations(
        model, reshape(feats, (1,) + feats.shape), toks.ids[None], toks.mask[None]
    )
    acts = reshape(batch_acts, batch_acts.shape[1:])
    pooled, grid = _pool_and_grid(cfg, reshape(acts, (1,) + acts.shape), full_mask)
    return JointEmbedding(
        pooled=reshape(pooled, (cfg.dim,)),
        grid=reshape(grid, grid.shape[1:]),
        last_layer_activations=acts,
    )
