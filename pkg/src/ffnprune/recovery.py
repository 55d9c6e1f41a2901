"""Importance-guided low-rank recovery.

Each block gets an adapter rank proportional to its normalized coarse
importance, integerized by largest remainder so the total equals
round(r_bar * n) exactly, with a floor of one rank per block (the deficit
comes out of the largest ranks). Adapters attach to the attention q/v
projections and all three FFN projections by default; base weights stay
frozen and only adapter pairs train, with AdamW on a next-token loss.
down is seeded Gaussian, up starts at zero, so recovery starts exactly at
the pruned model.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np

from . import tensor
from .autodiff import Node, Tape
from .errors import CapacityError, ConfigError, InputError, TrainingDivergedError, ValidationError
from .model import ModelCheckpoint, ModelConfig, rope_tables, sinusoidal_positions
from .tensor import F64

DEFAULT_TARGETS = ("attn_q", "attn_v", "ffn_gate", "ffn_up", "ffn_down")

# target name -> (in_features, out_features) as the operator is applied
def _target_dims(cfg: ModelConfig, block_idx: int, target: str) -> tuple[int, int]:
    d = cfg.d_model
    f = int(cfg.d_ff_per_block[block_idx])
    dims = {
        "attn_q": (d, d),
        "attn_v": (d, d),
        "ffn_gate": (d, f),
        "ffn_up": (d, f),
        "ffn_down": (f, d),
    }
    if target not in dims:
        raise ConfigError(f"unknown adapter target {target!r}; known: {sorted(dims)}")
    return dims[target]


@dataclass
class RankAllocation:
    ranks: list[int]
    r_bar: float
    scores_digest: str


def allocate_ranks(normalized: np.ndarray, r_bar: float) -> RankAllocation:
    """Largest-remainder integerization of score-proportional ranks."""
    if r_bar < 1:
        raise ConfigError(f"r_bar must be >= 1, got {r_bar}")
    norm = np.asarray(normalized, dtype=F64)
    if norm.ndim != 1 or norm.size < 1:
        raise InputError("normalized scores must be a non-empty vector")
    n = norm.size
    total = int(round(r_bar * n))
    raw = norm * r_bar * n / norm.sum()
    floors = np.floor(raw).astype(np.int64)
    remainders = raw - floors
    deficit = total - int(floors.sum())
    order = sorted(range(n), key=lambda i: (-remainders[i], i))
    ranks = floors.copy()
    for i in order[:deficit]:
        ranks[i] += 1
    # Floor at one rank per block; take the surplus from the largest ranks,
    # preferring (among tied maxima) the block with the smallest score.
    while np.any(ranks < 1):
        zero = int(np.argmin(ranks))
        need = 1 - int(ranks[zero])
        ranks[zero] = 1
        while need > 0:
            maxima = np.flatnonzero(ranks == ranks.max())
            donor = int(maxima[np.lexsort((-maxima, norm[maxima]))[0]])
            if ranks[donor] <= 1:
                raise ConfigError("rank budget too small to give every block rank 1")
            take = min(need, int(ranks[donor]) - 1)
            ranks[donor] -= take
            need -= take
    digest = hashlib.sha256(norm.tobytes()).hexdigest()
    return RankAllocation(ranks=[int(r) for r in ranks], r_bar=float(r_bar),
                          scores_digest=digest)


@dataclass
class LoRAAdapter:
    down: np.ndarray  # (rank, in_features)
    up: np.ndarray    # (out_features, rank)
    scale: float

    @property
    def rank(self) -> int:
        return self.down.shape[0]

    def param_count(self) -> int:
        return self.down.size + self.up.size


@dataclass
class AdaptedModel:
    base: ModelCheckpoint
    ranks: list[int]
    targets: tuple[str, ...]
    adapters: dict[tuple[int, str], LoRAAdapter]
    merged: bool = False

    def trainable_params(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for (bi, tgt), ad in sorted(self.adapters.items()):
            out.append((f"block{bi}.{tgt}.lora_down", ad.down))
            out.append((f"block{bi}.{tgt}.lora_up", ad.up))
        return out

    def trainable_param_count(self) -> int:
        return sum(ad.param_count() for ad in self.adapters.values())


def attach_adapters(model: ModelCheckpoint, ranks, targets=DEFAULT_TARGETS,
                    seed: int = 0, init_std: float = 0.02) -> AdaptedModel:
    """Freeze the base model and bolt a zero-initialized adapter pair onto
    every target matrix; rank 0 attaches nothing for that block."""
    cfg = model.config
    ranks = [int(r) for r in ranks]
    if len(ranks) != cfg.n_blocks:
        raise InputError(f"{len(ranks)} ranks for {cfg.n_blocks} blocks")
    rng = np.random.default_rng(seed)
    dt = model.dtype
    adapters: dict[tuple[int, str], LoRAAdapter] = {}
    for bi, r in enumerate(ranks):
        if r == 0:
            continue
        for tgt in targets:
            d_in, d_out = _target_dims(cfg, bi, tgt)
            down = rng.normal(0.0, init_std, size=(r, d_in)).astype(dt)
            up = np.zeros((d_out, r), dtype=dt)
            adapters[(bi, tgt)] = LoRAAdapter(down=down, up=up, scale=1.0 / r)
    return AdaptedModel(base=model, ranks=ranks, targets=tuple(targets),
                        adapters=adapters)


def _adapted_projection(tape: Tape, x: Node, weight: np.ndarray,
                        adapter: LoRAAdapter | None, leaves, key,
                        transpose_weight: bool) -> Node:
    """x @ W.T (or x @ W) plus the scaled low-rank path when an adapter exists."""
    w = tape.leaf(weight)
    base = tape.matmul_nt(x, w) if transpose_weight else tape.matmul(x, w)
    if adapter is None:
        return base
    if (key, "down") not in leaves:
        leaves[(key, "down")] = tape.leaf(adapter.down, requires_grad=True)
        leaves[(key, "up")] = tape.leaf(adapter.up, requires_grad=True)
    down, up = leaves[(key, "down")], leaves[(key, "up")]
    lo = tape.matmul_nt(tape.matmul_nt(x, down), up)
    return tape.add(base, tape.scale(lo, adapter.scale))


def adapted_forward(adapted: AdaptedModel, tokens, tape: Tape | None = None,
                    leaves: dict | None = None) -> tuple[Node, Tape, dict]:
    """Tape forward mirroring model.forward; returns the logits node.

    leaves maps (block, target, down|up) keys to parameter leaf nodes so the
    training loop can read gradients back after tape.backward.
    """
    model = adapted.base
    cfg = model.config
    tape = tape or Tape()
    leaves = leaves if leaves is not None else {}
    ids = np.asarray(tokens)
    if ids.ndim != 1 or ids.shape[0] < 1:
        raise InputError("tokens must be a non-empty 1-D sequence")
    if np.any(ids < 0) or np.any(ids >= cfg.vocab_size):
        raise InputError(f"token id out of range for vocab {cfg.vocab_size}")
    t = ids.shape[0]
    dt = model.dtype
    d, hn, dh = cfg.d_model, cfg.n_heads, cfg.d_head
    att_scale = 1.0 / float(np.sqrt(float(dh)))

    x0 = model.embedding[ids].copy()
    if cfg.pos_scheme == "sinusoidal":
        x0 = x0 + sinusoidal_positions(t, d, dt)
        cos = sin = None
    else:
        cos, sin = rope_tables(t, dh, cfg.rope_theta, dt)

    x = tape.leaf(x0)
    for bi, blk in enumerate(model.blocks):
        def ad(tgt):
            return adapted.adapters.get((bi, tgt))

        h = tape.rms_norm(x, blk.attn_norm_gain, cfg.norm_eps)
        q = _adapted_projection(tape, h, blk.attn_q, ad("attn_q"), leaves,
                                (bi, "attn_q"), transpose_weight=True)
        k = tape.matmul_nt(h, tape.leaf(blk.attn_k))
        v = _adapted_projection(tape, h, blk.attn_v, ad("attn_v"), leaves,
                                (bi, "attn_v"), transpose_weight=True)
        heads = []
        for hd in range(hn):
            s0, s1 = hd * dh, (hd + 1) * dh
            qh = tape.slice_cols(q, s0, s1)
            kh = tape.slice_cols(k, s0, s1)
            vh = tape.slice_cols(v, s0, s1)
            if cos is not None:
                qh = tape.rope(qh, cos, sin)
                kh = tape.rope(kh, cos, sin)
            scores = tape.scale(tape.matmul_nt(qh, kh), att_scale)
            probs = tape.causal_softmax(scores)
            heads.append(tape.matmul(probs, vh))
        ctx = tape.concat_cols(heads)
        attn_out = tape.matmul_nt(ctx, tape.leaf(blk.attn_o))
        x = tape.add(x, attn_out)

        h2 = tape.rms_norm(x, blk.ffn_norm_gain, cfg.norm_eps)
        gate = _adapted_projection(tape, h2, blk.ffn_gate, ad("ffn_gate"), leaves,
                                   (bi, "ffn_gate"), transpose_weight=True)
        up = _adapted_projection(tape, h2, blk.ffn_up, ad("ffn_up"), leaves,
                                 (bi, "ffn_up"), transpose_weight=True)
        inter = tape.mul(tape.silu(gate), up)
        ffn_out = _adapted_projection(tape, inter, blk.ffn_down, ad("ffn_down"),
                                      leaves, (bi, "ffn_down"), transpose_weight=False)
        x = tape.add(x, ffn_out)

    final = tape.rms_norm(x, model.final_norm_gain, cfg.norm_eps)
    logits = tape.matmul(final, tape.leaf(model.head_matrix()))
    return logits, tape, leaves


def sequence_loss(adapted: AdaptedModel, tokens) -> tuple[Node, Tape, dict]:
    logits, tape, leaves = adapted_forward(adapted, tokens)
    loss = tape.cross_entropy_next_token(logits, np.asarray(tokens))
    return loss, tape, leaves


@dataclass
class TrainConfig:
    # Desk-scale defaults; full-scale values live in FULL_SCALE_PROFILE.
    steps: int = 200
    batch_size: int = 8
    seq_len: int = 64
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0
    r_bar: float = 8.0
    targets: tuple[str, ...] = DEFAULT_TARGETS
    with_replacement: bool = True

    def validate(self) -> None:
        if self.steps < 1 or self.batch_size < 1 or self.seq_len < 2:
            raise ConfigError("steps and batch_size must be >= 1, seq_len >= 2")
        if not (self.learning_rate > 0):
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.r_bar < 1:
            raise ConfigError(f"r_bar must be >= 1, got {self.r_bar}")


# Full-scale training profile; desk scale uses the TrainConfig defaults.
FULL_SCALE_PROFILE = dict(batch_size=128, learning_rate=2e-4)


@dataclass
class TrainResult:
    losses: list[float]
    steps: int


def train(adapted: AdaptedModel, corpus_tokens: np.ndarray, cfg: TrainConfig) -> TrainResult:
    """AdamW on adapter parameters only; per-step mean batch loss returned.

    Deterministic for a fixed seed: batch windows come from one seeded
    generator and per-sequence gradients are summed in batch order.
    """
    cfg.validate()
    if adapted.merged:
        raise ValidationError("adapters were already merged; attach fresh ones to train")
    n_windows = corpus_tokens.shape[0] // cfg.seq_len
    if n_windows < 1:
        raise CapacityError(f"corpus too small for even one window of {cfg.seq_len}")
    if not cfg.with_replacement and n_windows < cfg.steps * cfg.batch_size:
        raise CapacityError(
            f"corpus has {n_windows} windows; {cfg.steps * cfg.batch_size} needed "
            "without replacement")
    rng = np.random.default_rng(cfg.seed)
    if not cfg.with_replacement:
        window_order = rng.permutation(n_windows)

    params = adapted.trainable_params()
    moments = {name: (np.zeros_like(p), np.zeros_like(p)) for name, p in params}
    losses: list[float] = []

    for step in range(cfg.steps):
        if cfg.with_replacement:
            picks = rng.integers(0, n_windows, size=cfg.batch_size)
        else:
            picks = window_order[step * cfg.batch_size:(step + 1) * cfg.batch_size]
        grad_sum: dict[str, np.ndarray] = {}
        loss_sum = 0.0
        for w in picks:
            seq = corpus_tokens[int(w) * cfg.seq_len:(int(w) + 1) * cfg.seq_len]
            loss, tape, leaves = sequence_loss(adapted, seq)
            loss_sum += float(loss.value)
            tape.backward(loss)
            for (key, part), node in leaves.items():
                name = f"block{key[0]}.{key[1]}.lora_{part}"
                if node.grad is None:
                    continue
                grad_sum[name] = node.grad if name not in grad_sum \
                    else grad_sum[name] + node.grad
        mean_loss = loss_sum / cfg.batch_size
        if not np.isfinite(mean_loss):
            raise TrainingDivergedError(f"non-finite loss at step {step}")
        losses.append(mean_loss)

        t = step + 1
        for name, p in params:
            g = grad_sum.get(name)
            if g is None:
                continue
            g = g / cfg.batch_size
            m, v = moments[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * (g * g)
            m_hat = m / (1.0 - cfg.beta1 ** t)
            v_hat = v / (1.0 - cfg.beta2 ** t)
            p -= (cfg.learning_rate
                  * (m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
                     + cfg.weight_decay * p)).astype(p.dtype, copy=False)
    return TrainResult(losses=losses, steps=cfg.steps)


def merge_adapters(adapted: AdaptedModel) -> ModelCheckpoint:
    """Fold scale * up @ down into each target weight; consumes the adapters."""
    if adapted.merged:
        raise ValidationError("adapters already merged into a checkpoint")
    model = adapted.base
    new_blocks = []
    for bi, blk in enumerate(model.blocks):
        updates = {}
        for tgt in adapted.targets:
            ad = adapted.adapters.get((bi, tgt))
            w = getattr(blk, tgt)
            if ad is None or not np.any(ad.up):
                updates[tgt] = w.copy()
                continue
            delta = tensor.matmul(ad.up, ad.down) * ad.scale
            # ffn_down is applied inter @ W, so its delta lands transposed.
            if tgt == "ffn_down":
                delta = delta.T
            updates[tgt] = (w.astype(F64) + delta.astype(F64)).astype(w.dtype)
        new_blocks.append(type(blk)(
            attn_q=updates.get("attn_q", blk.attn_q.copy()),
            attn_k=blk.attn_k.copy(),
            attn_v=updates.get("attn_v", blk.attn_v.copy()),
            attn_o=blk.attn_o.copy(),
            ffn_gate=updates.get("ffn_gate", blk.ffn_gate.copy()),
            ffn_up=updates.get("ffn_up", blk.ffn_up.copy()),
            ffn_down=updates.get("ffn_down", blk.ffn_down.copy()),
            attn_norm_gain=blk.attn_norm_gain.copy(),
            ffn_norm_gain=blk.ffn_norm_gain.copy()))
    adapted.merged = True
    merged = ModelCheckpoint(
        config=replace(model.config, d_ff_per_block=list(model.config.d_ff_per_block)),
        embedding=model.embedding.copy(), blocks=new_blocks,
        final_norm_gain=model.final_norm_gain.copy(),
        lm_head=None if model.config.tied_head else model.lm_head.copy())
    merged.validate_shapes()
    return merged


def adapter_tensors(adapted: AdaptedModel) -> list[tuple[str, np.ndarray]]:
    return adapted.trainable_params()


def adapter_metadata(adapted: AdaptedModel) -> dict:
    return {
        "ranks": adapted.ranks,
        "targets": list(adapted.targets),
        "scales": {f"block{bi}.{tgt}": ad.scale
                   for (bi, tgt), ad in sorted(adapted.adapters.items())},
    }
