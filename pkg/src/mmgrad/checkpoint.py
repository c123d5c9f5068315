"""Versioned binary checkpoints for model parameters.

Layout: a magic line, a length-prefixed JSON metadata block (format version,
encoder config, vocabulary, optional extras), then each parameter in sorted
name order as ``name-length, name, ndim, dims, float64 little-endian data``.
Writing the same model twice produces byte-identical files, and a round-trip
restores every array bit-exactly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .model import EncoderConfig, Model, Vocab

MAGIC = b"MMGRAD-CKPT\n"
FORMAT_VERSION = 1


def save_checkpoint(path, model: Model, vocab: Vocab, extra: dict | None = None):
    meta = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "vocab": vocab.word_to_id,
        "extra": extra or {},
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(meta_bytes)))
        fh.write(meta_bytes)
        for name in sorted(model.params):
            arr = np.ascontiguousarray(model.params[name].data, dtype="<f8")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> tuple[Model, Vocab, dict]:
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (meta_len,) = struct.unpack("<Q", fh.read(8))
        meta = json.loads(fh.read(meta_len).decode("utf-8"))
        if meta.get("format_version") != FORMAT_VERSION:
            raise ValueError(
                f"{path}: unsupported checkpoint version {meta.get('format_version')}"
            )
        params: dict[str, Tensor] = {}
        while True:
            head = fh.read(2)
            if not head:
                break
            (name_len,) = struct.unpack("<H", head)
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape)
            params[name] = Tensor(data.copy(), requires_grad=True)
    config = EncoderConfig(**meta["config"])
    vocab = Vocab(dict(meta["vocab"]))
    return Model(config, params), vocab, meta.get("extra", {})
