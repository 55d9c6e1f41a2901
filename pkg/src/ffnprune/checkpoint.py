"""Checkpoint directory format: manifest.json + weights.bin.

manifest.json holds format_version, the model config, and a tensor table of
{name, dtype:"f32", shape, byte_offset, byte_len}; weights.bin is the
little-endian float32 payload with tensors contiguous in manifest order.
Round trips are bit-exact. The same writer backs adapter checkpoints, which
reuse the container with their own tensor names and metadata.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np

from .errors import (
    MissingTensorError,
    ShapeMismatchError,
    TruncatedBlobError,
    UnknownFormatError,
    ValidationError,
)
from .model import ModelCheckpoint, ModelConfig, TransformerBlock

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
WEIGHTS_NAME = "weights.bin"

_LE_F32 = np.dtype("<f4")


def tensor_specs(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical tensor order for a model checkpoint."""
    d, v = cfg.d_model, cfg.vocab_size
    specs: list[tuple[str, tuple[int, ...]]] = [("embedding", (v, d))]
    for i, f in enumerate(cfg.d_ff_per_block):
        f = int(f)
        specs += [
            (f"block{i}.attn_norm", (d,)),
            (f"block{i}.attn_q", (d, d)),
            (f"block{i}.attn_k", (d, d)),
            (f"block{i}.attn_v", (d, d)),
            (f"block{i}.attn_o", (d, d)),
            (f"block{i}.ffn_norm", (d,)),
            (f"block{i}.ffn_gate", (f, d)),
            (f"block{i}.ffn_up", (f, d)),
            (f"block{i}.ffn_down", (f, d)),
        ]
    specs.append(("final_norm", (d,)))
    if not cfg.tied_head:
        specs.append(("lm_head", (d, v)))
    return specs


def _model_tensors(model: ModelCheckpoint) -> dict[str, np.ndarray]:
    out = {"embedding": model.embedding, "final_norm": model.final_norm_gain}
    for i, blk in enumerate(model.blocks):
        out[f"block{i}.attn_norm"] = blk.attn_norm_gain
        out[f"block{i}.attn_q"] = blk.attn_q
        out[f"block{i}.attn_k"] = blk.attn_k
        out[f"block{i}.attn_v"] = blk.attn_v
        out[f"block{i}.attn_o"] = blk.attn_o
        out[f"block{i}.ffn_norm"] = blk.ffn_norm_gain
        out[f"block{i}.ffn_gate"] = blk.ffn_gate
        out[f"block{i}.ffn_up"] = blk.ffn_up
        out[f"block{i}.ffn_down"] = blk.ffn_down
    if not model.config.tied_head:
        out["lm_head"] = model.lm_head
    return out


def write_tensor_dir(path: str, named: list[tuple[str, np.ndarray]], extra: dict) -> None:
    """Write a manifest+blob container with the given tensors and extra manifest keys."""
    os.makedirs(path, exist_ok=True)
    table = []
    offset = 0
    blobs = []
    for name, arr in named:
        buf = np.ascontiguousarray(arr, dtype=_LE_F32).tobytes()
        table.append({
            "name": name,
            "dtype": "f32",
            "shape": [int(s) for s in arr.shape],
            "byte_offset": offset,
            "byte_len": len(buf),
        })
        blobs.append(buf)
        offset += len(buf)
    manifest = {"format_version": FORMAT_VERSION, **extra, "tensors": table}
    with open(os.path.join(path, WEIGHTS_NAME), "wb") as fh:
        for buf in blobs:
            fh.write(buf)
    with open(os.path.join(path, MANIFEST_NAME), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=False)
        fh.write("\n")


def read_manifest(path: str) -> dict:
    mpath = os.path.join(path, MANIFEST_NAME)
    if not os.path.exists(mpath):
        raise MissingTensorError(f"no {MANIFEST_NAME} in {path}")
    try:
        with open(mpath, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise UnknownFormatError(f"manifest is not valid JSON: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise UnknownFormatError(f"unknown checkpoint format_version {version!r}")
    return manifest


def read_tensor_dir(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    """Read any manifest+blob container; validates offsets, sizes, finiteness."""
    manifest = read_manifest(path)
    wpath = os.path.join(path, WEIGHTS_NAME)
    if not os.path.exists(wpath):
        raise TruncatedBlobError(f"no {WEIGHTS_NAME} in {path}")
    blob = np.fromfile(wpath, dtype=np.uint8)
    total = blob.shape[0]
    tensors: dict[str, np.ndarray] = {}
    expect_offset = 0
    for entry in manifest.get("tensors", []):
        name = entry["name"]
        if entry.get("dtype") != "f32":
            raise UnknownFormatError(f"tensor {name} has unsupported dtype {entry.get('dtype')!r}")
        shape = tuple(int(s) for s in entry["shape"])
        offset, length = int(entry["byte_offset"]), int(entry["byte_len"])
        n_elem = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if length != 4 * n_elem:
            raise ShapeMismatchError(
                f"tensor {name}: byte_len {length} inconsistent with shape {shape}")
        if offset != expect_offset:
            raise ValidationError(
                f"tensor {name}: byte_offset {offset} not contiguous (expected {expect_offset})")
        if offset + length > total:
            raise TruncatedBlobError(
                f"weights blob truncated inside tensor {name}: "
                f"needs bytes [{offset}, {offset + length}) of {total}")
        arr = blob[offset:offset + length].view(_LE_F32).reshape(shape)
        tensors[name] = np.ascontiguousarray(arr, dtype=np.float32)
        if not np.all(np.isfinite(tensors[name])):
            raise ValidationError(f"tensor {name} contains non-finite values")
        expect_offset = offset + length
    if expect_offset != total:
        raise ValidationError(
            f"weights blob has {total - expect_offset} trailing bytes beyond the manifest")
    return manifest, tensors


def save_checkpoint(model: ModelCheckpoint, path: str) -> None:
    if model.dtype != np.float32:
        raise ValidationError(f"checkpoints are stored f32; model is {model.dtype}")
    model.validate_shapes()
    have = _model_tensors(model)
    named = [(name, have[name]) for name, _ in tensor_specs(model.config)]
    write_tensor_dir(path, named, {"config": model.config.to_dict()})


def load_config(path: str) -> ModelConfig:
    """Config-only load; works on shape manifests with no weights present."""
    manifest = read_manifest(path)
    if "config" not in manifest:
        raise UnknownFormatError("manifest carries no config section")
    return ModelConfig.from_dict(manifest["config"])


def load_checkpoint(path: str) -> ModelCheckpoint:
    manifest, tensors = read_tensor_dir(path)
    if "config" not in manifest:
        raise UnknownFormatError("manifest carries no config section")
    cfg = ModelConfig.from_dict(manifest["config"])
    expected = tensor_specs(cfg)
    for name, shape in expected:
        if name not in tensors:
            raise MissingTensorError(f"tensor {name} missing from checkpoint")
        if tensors[name].shape != shape:
            raise ShapeMismatchError(
                f"tensor {name} has shape {tensors[name].shape}, config expects {shape}")
    extra = set(tensors) - {name for name, _ in expected}
    if extra:
        raise ValidationError(f"checkpoint carries unexpected tensors: {sorted(extra)}")

    blocks = []
    for i in range(cfg.n_blocks):
        blocks.append(TransformerBlock(
            attn_q=tensors[f"block{i}.attn_q"],
            attn_k=tensors[f"block{i}.attn_k"],
            attn_v=tensors[f"block{i}.attn_v"],
            attn_o=tensors[f"block{i}.attn_o"],
            ffn_gate=tensors[f"block{i}.ffn_gate"],
            ffn_up=tensors[f"block{i}.ffn_up"],
            ffn_down=tensors[f"block{i}.ffn_down"],
            attn_norm_gain=tensors[f"block{i}.attn_norm"],
            ffn_norm_gain=tensors[f"block{i}.ffn_norm"],
        ))
    model = ModelCheckpoint(
        config=cfg,
        embedding=tensors["embedding"],
        blocks=blocks,
        final_norm_gain=tensors["final_norm"],
        lm_head=None if cfg.tied_head else tensors["lm_head"],
    )
    model.validate_shapes()
    return model


def checkpoint_bytes(path: str) -> int:
    """On-disk size of a checkpoint directory (manifest + weights)."""
    return sum(
        os.path.getsize(os.path.join(path, n))
        for n in (MANIFEST_NAME, WEIGHTS_NAME) if os.path.exists(os.path.join(path, n)))


def dir_digest(path: str) -> str:
    """sha256 over manifest and blob, for provenance fields."""
    h = hashlib.sha256()
    for n in (MANIFEST_NAME, WEIGHTS_NAME):
        p = os.path.join(path, n)
        if os.path.exists(p):
            with open(p, "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()
