"""Convert a LLaMA-family decoder checkpoint into the engine's file formats.

The engine stores one fixed layout (row-major float32 little-endian,
intermediate-major FFN matrices, lm_head as d_model x vocab); this side owns
every transposition. Supported sources are pre-norm decoders with a gated
SiLU FFN, plain rotary positions, full multi-head attention (no grouped k/v),
no projection biases, and a tied or untied head. Anything else fails loudly
with the offending tensors listed.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np


class ExportError(RuntimeError):
    pass


class UnsupportedArchitectureError(ExportError):
    pass


@dataclass
class MappingRule:
    source: str
    target: str
    transpose: bool


def _llama_mapping(n_layers: int, tied_head: bool) -> list[MappingRule]:
    rules = [MappingRule("model.embed_tokens.weight", "embedding", False)]
    for i in range(n_layers):
        src = f"model.layers.{i}"
        rules += [
            MappingRule(f"{src}.input_layernorm.weight", f"block{i}.attn_norm", False),
            MappingRule(f"{src}.self_attn.q_proj.weight", f"block{i}.attn_q", False),
            MappingRule(f"{src}.self_attn.k_proj.weight", f"block{i}.attn_k", False),
            MappingRule(f"{src}.self_attn.v_proj.weight", f"block{i}.attn_v", False),
            MappingRule(f"{src}.self_attn.o_proj.weight", f"block{i}.attn_o", False),
            MappingRule(f"{src}.post_attention_layernorm.weight", f"block{i}.ffn_norm", False),
            MappingRule(f"{src}.mlp.gate_proj.weight", f"block{i}.ffn_gate", False),
            MappingRule(f"{src}.mlp.up_proj.weight", f"block{i}.ffn_up", False),
            # stored (out, in) = (d_model, d_ff) at the source; the engine wants
            # intermediate-major (d_ff, d_model)
            MappingRule(f"{src}.mlp.down_proj.weight", f"block{i}.ffn_down", True),
        ]
    rules.append(MappingRule("model.norm.weight", "final_norm", False))
    if not tied_head:
        # source head is (vocab, d_model); the engine applies x @ head directly
        rules.append(MappingRule("lm_head.weight", "lm_head", True))
    return rules


def validate_source(model) -> None:
    cfg = model.config
    problems = []
    if cfg.model_type != "llama":
        problems.append(f"model_type {cfg.model_type!r} (expected a llama-family decoder)")
    n_kv = getattr(cfg, "num_key_value_heads", cfg.num_attention_heads)
    if n_kv != cfg.num_attention_heads:
        problems.append(
            f"grouped k/v heads ({n_kv} of {cfg.num_attention_heads}): "
            + ", ".join(f"model.layers.{i}.self_attn.{p}_proj.weight"
                        for i in range(cfg.num_hidden_layers) for p in ("k", "v")))
    if getattr(cfg, "hidden_act", "silu") not in ("silu", "swish"):
        problems.append(f"hidden_act {cfg.hidden_act!r} (engine implements silu gating)")
    if getattr(cfg, "attention_bias", False) or getattr(cfg, "mlp_bias", False):
        problems.append("projection biases present (engine projections are bias-free)")
    scaling = getattr(cfg, "rope_scaling", None)
    if scaling not in (None, {}) and getattr(scaling, "get", lambda *_: None)("rope_type",
                                                                              "default") != "default":
        problems.append(f"rope_scaling {scaling!r} (engine implements plain rotary only)")
    if problems:
        raise UnsupportedArchitectureError(
            "source model is not exportable: " + "; ".join(problems))


def engine_config(cfg, tied_head: bool) -> dict:
    return {
        "vocab_size": int(cfg.vocab_size),
        "d_model": int(cfg.hidden_size),
        "n_heads": int(cfg.num_attention_heads),
        "n_kv_heads": int(cfg.num_attention_heads),
        "n_blocks": int(cfg.num_hidden_layers),
        "d_ff_per_block": [int(cfg.intermediate_size)] * int(cfg.num_hidden_layers),
        "norm_eps": float(cfg.rms_norm_eps),
        "max_seq_len": int(cfg.max_position_embeddings),
        "pos_scheme": "rope",
        "rope_theta": float(getattr(cfg, "rope_theta", 10000.0)),
        "tied_head": bool(tied_head),
    }


def _write_tensor_dir(path: str, named, extra: dict) -> None:
    """Engine manifest+blob container (little-endian float32, contiguous)."""
    os.makedirs(path, exist_ok=True)
    table, blobs, offset = [], [], 0
    for name, arr in named:
        buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        table.append({"name": name, "dtype": "f32",
                      "shape": [int(s) for s in arr.shape],
                      "byte_offset": offset, "byte_len": len(buf)})
        blobs.append(buf)
        offset += len(buf)
    with open(os.path.join(path, "weights.bin"), "wb") as fh:
        for buf in blobs:
            fh.write(buf)
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump({"format_version": 1, **extra, "tensors": table}, fh, indent=2)
        fh.write("\n")


def export_model(source, out_dir: str, reference_seqs: int = 8,
                 reference_len: int = 16, seed: int = 0,
                 source_id: str = "") -> dict:
    """Write an engine checkpoint plus reference logits from the source model.

    source: a transformers CausalLM (already loaded; caller controls download
    or local paths). Returns the export manifest dictionary.
    """
    import torch

    model = source.eval()
    validate_source(model)
    cfg = model.config
    tied = bool(getattr(cfg, "tie_word_embeddings", False))
    rules = _llama_mapping(cfg.num_hidden_layers, tied)

    state = {name: param for name, param in model.state_dict().items()}
    missing = [r.source for r in rules if r.source not in state]
    if missing:
        raise UnsupportedArchitectureError(
            "source tensors not found: " + ", ".join(missing))

    named = []
    for rule in rules:
        tensor = state[rule.source].detach().to(torch.float32).cpu().numpy()
        named.append((rule.target, tensor.T if rule.transpose else tensor))
    _write_tensor_dir(out_dir, named, {"config": engine_config(cfg, tied)})

    # reference sequences + full source logits for the parity check
    rng = np.random.default_rng(seed)
    seqs = [rng.integers(0, cfg.vocab_size, size=reference_len).tolist()
            for _ in range(reference_seqs)]
    logit_blobs = []
    with torch.no_grad():
        for seq in seqs:
            ids = torch.tensor([seq], dtype=torch.long)
            logits = model(input_ids=ids).logits[0].to(torch.float32).cpu().numpy()
            logit_blobs.append(np.ascontiguousarray(logits, dtype="<f4"))
    ref_dir = os.path.join(out_dir, "reference")
    os.makedirs(ref_dir, exist_ok=True)
    with open(os.path.join(ref_dir, "reference_logits.bin"), "wb") as fh:
        for blob in logit_blobs:
            fh.write(blob.tobytes())
    manifest = {
        "source_model": source_id or getattr(cfg, "name_or_path", ""),
        "dtype_note": "all tensors converted to little-endian float32",
        "mapping": [{"source": r.source, "target": r.target, "transpose": r.transpose}
                    for r in rules],
        "reference": {
            "sequences": seqs,
            "logits_file": "reference/reference_logits.bin",
            "logits_shape": [reference_seqs, reference_len, int(cfg.vocab_size)],
            "seed": seed,
        },
    }
    with open(os.path.join(out_dir, "export_manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return manifest


def load_reference(out_dir: str):
    """Reference sequences and source logits written by export_model."""
    with open(os.path.join(out_dir, "export_manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    ref = manifest["reference"]
    n, t, v = ref["logits_shape"]
    blob = np.fromfile(os.path.join(out_dir, ref["logits_file"]), dtype="<f4")
    if blob.size != n * t * v:
        raise ExportError("reference logits file does not match its declared shape")
    return ref["sequences"], blob.reshape(n, t, v).astype(np.float32)


def export_corpus(text_paths: list[str], tokenizer, out_dir: str,
                  expected_vocab: int | None = None) -> int:
    """Tokenize text files into tokens.u32 + corpus.json; returns token count."""
    vocab = int(tokenizer.vocab_size)
    if expected_vocab is not None and vocab != expected_vocab:
        raise ExportError(
            f"tokenizer vocab {vocab} does not match the exported model's "
            f"{expected_vocab}")
    pieces = []
    for path in text_paths:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
        if text:
            pieces.extend(tokenizer.encode(text, add_special_tokens=False))
    ids = np.asarray(pieces, dtype="<u4")
    if ids.size and int(ids.max()) >= vocab:
        raise ExportError("tokenizer produced ids outside its declared vocab")
    os.makedirs(out_dir, exist_ok=True)
    ids.tofile(os.path.join(out_dir, "tokens.u32"))
    with open(os.path.join(out_dir, "corpus.json"), "w", encoding="utf-8") as fh:
        json.dump({"vocab_size": vocab, "count": int(ids.size)}, fh, indent=2)
        fh.write("\n")
    return int(ids.size)
