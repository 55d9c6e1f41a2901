"""Token corpus files: tokens.u32 (little-endian uint32 ids) + corpus.json."""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import InputError, UnknownFormatError, ValidationError

TOKENS_NAME = "tokens.u32"
META_NAME = "corpus.json"

_LE_U32 = np.dtype("<u4")


def save_corpus(tokens: np.ndarray, vocab_size: int, path: str) -> None:
    ids = np.asarray(tokens)
    if ids.ndim != 1:
        raise InputError(f"corpus tokens must be 1-D, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise InputError("corpus contains token ids outside the vocabulary")
    os.makedirs(path, exist_ok=True)
    ids.astype(_LE_U32).tofile(os.path.join(path, TOKENS_NAME))
    meta = {"vocab_size": int(vocab_size), "count": int(ids.size)}
    with open(os.path.join(path, META_NAME), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")


def load_corpus(path: str) -> tuple[np.ndarray, int]:
    meta_path = os.path.join(path, META_NAME)
    tok_path = os.path.join(path, TOKENS_NAME)
    if not os.path.exists(meta_path) or not os.path.exists(tok_path):
        raise InputError(f"{path} is not a corpus directory ({META_NAME} + {TOKENS_NAME})")
    try:
        with open(meta_path, encoding="utf-8") as fh:
            meta = json.load(fh)
    except json.JSONDecodeError as exc:
        raise UnknownFormatError(f"corpus metadata is not valid JSON: {exc}") from exc
    vocab_size = int(meta["vocab_size"])
    count = int(meta["count"])
    ids = np.fromfile(tok_path, dtype=_LE_U32)
    if ids.size != count:
        raise ValidationError(
            f"corpus metadata says {count} tokens but {TOKENS_NAME} holds {ids.size}")
    if ids.size and int(ids.max()) >= vocab_size:
        raise ValidationError(
            f"corpus contains id {int(ids.max())} >= vocab_size {vocab_size}")
    return ids.astype(np.uint32), vocab_size
