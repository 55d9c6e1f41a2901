"""Desk-scale model and corpus builders used by tests, demos, and docs.

The toy shape (d_model 64, 4 heads, 4 blocks, d_ff 256, vocab 512) gives a
sub-second forward pass while exercising every code path.
"""

from __future__ import annotations

import numpy as np

from .model import ModelCheckpoint, ModelConfig, TransformerBlock


def toy_config(
    vocab_size: int = 512,
    d_model: int = 64,
    n_heads: int = 4,
    n_blocks: int = 4,
    d_ff: int = 256,
    max_seq_len: int = 256,
) -> ModelConfig:
    cfg = ModelConfig(
        vocab_size=vocab_size, d_model=d_model, n_heads=n_heads,
        n_blocks=n_blocks, d_ff_per_block=[d_ff] * n_blocks,
        max_seq_len=max_seq_len)
    cfg.validate()
    return cfg


def random_checkpoint(cfg: ModelConfig | None = None, seed: int = 0,
                      weight_std: float = 0.05,
                      embed_std: float | None = None) -> ModelCheckpoint:
    """Seeded Gaussian weights, near-one norm gains.

    embed_std defaults to weight_std; the recovery demos use a larger value
    (with a tied head) so the token signal is not drowned by the position
    encoding and next-token training has something to bite on.
    """
    cfg = cfg or toy_config()
    cfg.validate()
    rng = np.random.default_rng(seed)
    d, v = cfg.d_model, cfg.vocab_size
    embed_std = weight_std if embed_std is None else embed_std

    def mat(*shape):
        return rng.normal(0.0, weight_std, size=shape).astype(np.float32)

    def gain():
        return (1.0 + rng.normal(0.0, 0.02, size=d)).astype(np.float32)

    blocks = []
    for f in cfg.d_ff_per_block:
        f = int(f)
        blocks.append(TransformerBlock(
            attn_q=mat(d, d), attn_k=mat(d, d), attn_v=mat(d, d), attn_o=mat(d, d),
            ffn_gate=mat(f, d), ffn_up=mat(f, d), ffn_down=mat(f, d),
            attn_norm_gain=gain(), ffn_norm_gain=gain()))
    model = ModelCheckpoint(
        config=cfg,
        embedding=rng.normal(0.0, embed_std, size=(v, d)).astype(np.float32),
        blocks=blocks,
        final_norm_gain=gain(),
        lm_head=None if cfg.tied_head else mat(d, v))
    model.validate_shapes()
    return model


def recovery_demo_checkpoint(seed: int = 7) -> ModelCheckpoint:
    """Tied-head toy whose copy-task loss responds strongly to recovery."""
    cfg = toy_config()
    cfg.tied_head = True
    return random_checkpoint(cfg, seed=seed, embed_std=1.0)


def copy_task_corpus(n_tokens: int, vocab_size: int = 512, seed: int = 0,
                     run_min: int = 4, run_max: int = 16) -> np.ndarray:
    """Runs of repeated tokens; next-token prediction is highly learnable."""
    rng = np.random.default_rng(seed)
    chunks = []
    total = 0
    while total < n_tokens:
        tok = int(rng.integers(0, vocab_size))
        run = int(rng.integers(run_min, run_max + 1))
        chunks.append(np.full(run, tok, dtype=np.uint32))
        total += run
    return np.concatenate(chunks)[:n_tokens]


def random_corpus(n_tokens: int, vocab_size: int = 512, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(0, vocab_size, size=n_tokens, dtype=np.uint32)
