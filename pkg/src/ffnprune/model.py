"""Decoder-transformer definition, forward pass, and parameter/MAC accounting.

The architecture is a standard pre-norm decoder: multi-head causal attention
and a gated FFN, both wrapped in residual connections, RMS normalization, and
a final norm before the LM head. All three FFN matrices are stored
intermediate-major: intermediate channel i is row i of ffn_up, ffn_gate and
ffn_down alike, so removing a channel is one row-slice in all three.

Two fixed position schemes exist: additive sinusoidal (toy default) and
rotary in the HF-Llama convention (needed to run converted ecosystem models).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor
from .errors import ConfigError, InputError, ShapeMismatchError
from .tensor import F32, F64, Matrix

POSITION_SCHEMES = ("sinusoidal", "rope")


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int
    n_heads: int
    n_blocks: int
    d_ff_per_block: list[int]
    norm_eps: float = 1e-5
    n_kv_heads: int | None = None  # accounting only; forward requires == n_heads
    max_seq_len: int = 2048
    pos_scheme: str = "sinusoidal"
    rope_theta: float = 10000.0
    tied_head: bool = False

    def __post_init__(self) -> None:
        if self.n_kv_heads is None:
            self.n_kv_heads = self.n_heads

    def validate(self) -> None:
        counts = {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "n_blocks": self.n_blocks,
            "n_kv_heads": self.n_kv_heads,
            "max_seq_len": self.max_seq_len,
        }
        for name, value in counts.items():
            if int(value) < 1:
                raise ConfigError(f"{name} must be >= 1, got {value}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.n_heads % self.n_kv_heads != 0:
            raise ConfigError(
                f"n_heads {self.n_heads} not divisible by n_kv_heads {self.n_kv_heads}")
        if len(self.d_ff_per_block) != self.n_blocks:
            raise ConfigError(
                f"d_ff_per_block has {len(self.d_ff_per_block)} entries "
                f"for {self.n_blocks} blocks")
        if any(int(f) < 1 for f in self.d_ff_per_block):
            raise ConfigError("every d_ff entry must be >= 1")
        if not (self.norm_eps > 0):
            raise ConfigError(f"norm_eps must be positive, got {self.norm_eps}")
        if self.pos_scheme not in POSITION_SCHEMES:
            raise ConfigError(f"unknown position scheme {self.pos_scheme!r}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_kv(self) -> int:
        return self.d_head * self.n_kv_heads

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "n_kv_heads": self.n_kv_heads,
            "n_blocks": self.n_blocks,
            "d_ff_per_block": [int(f) for f in self.d_ff_per_block],
            "norm_eps": self.norm_eps,
            "max_seq_len": self.max_seq_len,
            "pos_scheme": self.pos_scheme,
            "rope_theta": self.rope_theta,
            "tied_head": self.tied_head,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        cfg = cls(
            vocab_size=int(d["vocab_size"]),
            d_model=int(d["d_model"]),
            n_heads=int(d["n_heads"]),
            n_blocks=int(d["n_blocks"]),
            d_ff_per_block=[int(f) for f in d["d_ff_per_block"]],
            norm_eps=float(d.get("norm_eps", 1e-5)),
            n_kv_heads=int(d["n_kv_heads"]) if "n_kv_heads" in d else None,
            max_seq_len=int(d.get("max_seq_len", 2048)),
            pos_scheme=str(d.get("pos_scheme", "sinusoidal")),
            rope_theta=float(d.get("rope_theta", 10000.0)),
            tied_head=bool(d.get("tied_head", False)),
        )
        cfg.validate()
        return cfg


@dataclass
class TransformerBlock:
    # Attention projections, stored (out_features, in_features), applied x @ W.T.
    attn_q: Matrix
    attn_k: Matrix
    attn_v: Matrix
    attn_o: Matrix
    # FFN, intermediate-major: channel i is row i of all three.
    ffn_gate: Matrix  # (d_ff, d_model), applied x @ W.T
    ffn_up: Matrix    # (d_ff, d_model), applied x @ W.T
    ffn_down: Matrix  # (d_ff, d_model), applied inter @ W
    attn_norm_gain: np.ndarray
    ffn_norm_gain: np.ndarray

    @property
    def d_ff(self) -> int:
        return self.ffn_up.shape[0]


@dataclass
class ModelCheckpoint:
    config: ModelConfig
    embedding: Matrix  # (vocab, d_model)
    blocks: list[TransformerBlock]
    final_norm_gain: np.ndarray
    lm_head: Matrix | None  # (d_model, vocab); None when tied_head

    @property
    def dtype(self) -> np.dtype:
        return self.embedding.dtype

    def astype(self, dtype) -> "ModelCheckpoint":
        """Same model with every buffer converted to dtype (f64 gradient mode)."""
        def cv(a):
            return None if a is None else a.astype(dtype)

        blocks = [TransformerBlock(
            attn_q=cv(b.attn_q), attn_k=cv(b.attn_k), attn_v=cv(b.attn_v),
            attn_o=cv(b.attn_o), ffn_gate=cv(b.ffn_gate), ffn_up=cv(b.ffn_up),
            ffn_down=cv(b.ffn_down), attn_norm_gain=cv(b.attn_norm_gain),
            ffn_norm_gain=cv(b.ffn_norm_gain)) for b in self.blocks]
        return ModelCheckpoint(
            config=replace(self.config, d_ff_per_block=list(self.config.d_ff_per_block)),
            embedding=cv(self.embedding), blocks=blocks,
            final_norm_gain=cv(self.final_norm_gain), lm_head=cv(self.lm_head))

    def head_matrix(self) -> Matrix:
        return self.embedding.T if self.config.tied_head else self.lm_head

    def validate_shapes(self) -> None:
        cfg = self.config
        cfg.validate()
        if cfg.n_kv_heads != cfg.n_heads:
            raise ConfigError(
                "runtime checkpoints require n_kv_heads == n_heads "
                f"(got {cfg.n_kv_heads} vs {cfg.n_heads}); grouped k/v shapes are "
                "accounting-only")
        d, v = cfg.d_model, cfg.vocab_size

        def expect(name, arr, shape):
            if arr.shape != shape:
                raise ShapeMismatchError(f"{name} has shape {arr.shape}, expected {shape}")

        expect("embedding", self.embedding, (v, d))
        expect("final_norm", self.final_norm_gain, (d,))
        if cfg.tied_head:
            if self.lm_head is not None:
                raise ShapeMismatchError("tied_head checkpoint must not carry lm_head")
        else:
            expect("lm_head", self.lm_head, (d, v))
        if len(self.blocks) != cfg.n_blocks:
            raise ShapeMismatchError(
                f"{len(self.blocks)} blocks for n_blocks={cfg.n_blocks}")
        for i, (blk, f) in enumerate(zip(self.blocks, cfg.d_ff_per_block)):
            for nm in ("attn_q", "attn_k", "attn_v", "attn_o"):
                expect(f"block{i}.{nm}", getattr(blk, nm), (d, d))
            for nm in ("ffn_gate", "ffn_up", "ffn_down"):
                expect(f"block{i}.{nm}", getattr(blk, nm), (int(f), d))
            expect(f"block{i}.attn_norm", blk.attn_norm_gain, (d,))
            expect(f"block{i}.ffn_norm", blk.ffn_norm_gain, (d,))


@dataclass
class CaptureFlags:
    block_io: bool = False   # residual-stream value at every block boundary
    ffn_inter: bool = False  # per-block FFN intermediate activation


@dataclass
class ActivationTrace:
    # hidden[l] is the residual stream entering block l; hidden[l+1] is the same
    # buffer object that leaves block l, so chaining is exact by construction.
    hidden: list[Matrix] | None
    ffn_inter: list[Matrix] | None
    logits: Matrix | None = None


def sinusoidal_positions(t: int, d: int, dtype=F32) -> Matrix:
    """Classic absolute sin/cos position table, computed in float64."""
    pos = np.arange(t, dtype=F64)[:, None]
    idx = np.arange(d, dtype=F64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(idx / 2.0) / d)
    table = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(dtype)


def rope_tables(t: int, d_head: int, theta: float, dtype=F32):
    """cos/sin tables (t, d_head) in the duplicated-halves HF convention."""
    inv_freq = 1.0 / np.power(theta, np.arange(0, d_head, 2, dtype=F64) / d_head)
    angles = np.arange(t, dtype=F64)[:, None] * inv_freq[None, :]
    cos = np.concatenate([np.cos(angles), np.cos(angles)], axis=1)
    sin = np.concatenate([np.sin(angles), np.sin(angles)], axis=1)
    return cos.astype(dtype), sin.astype(dtype)


def rotate_half(x: Matrix) -> Matrix:
    h = x.shape[1] // 2
    return np.concatenate([-x[:, h:], x[:, :h]], axis=1)


def apply_rope(x: Matrix, cos: Matrix, sin: Matrix) -> Matrix:
    return x * cos + rotate_half(x) * sin


@dataclass
class ForwardOutput:
    logits: Matrix
    trace: ActivationTrace | None = None


def forward(
    model: ModelCheckpoint,
    tokens,
    capture: CaptureFlags | None = None,
    observer=None,
    channel_masks: list[np.ndarray] | None = None,
) -> ForwardOutput:
    """Run the decoder on one token sequence.

    tokens: 1-D int sequence, all ids < vocab_size, length in [1, max_seq_len].
    capture: optional trace flags; captured buffers are never mutated later.
    observer: optional callable(block_idx, x_in, x_out, ffn_in, ffn_inter)
        invoked per block while the buffers are live; lets calibration stream
        statistics without retaining any trace.
    channel_masks: optional per-block boolean keep-masks over intermediate
        channels; masked channels are zeroed before the down-projection
        (the pruning-equivalence oracle).
    """
    cfg = model.config
    ids = np.asarray(tokens)
    if ids.ndim != 1 or ids.shape[0] < 1:
        raise InputError(f"tokens must be a non-empty 1-D sequence, got shape {ids.shape}")
    if ids.shape[0] > cfg.max_seq_len:
        raise InputError(f"sequence length {ids.shape[0]} exceeds context {cfg.max_seq_len}")
    if np.any(ids < 0) or np.any(ids >= cfg.vocab_size):
        bad = ids[(ids < 0) | (ids >= cfg.vocab_size)][0]
        raise InputError(f"token id {int(bad)} out of range for vocab {cfg.vocab_size}")
    if cfg.n_kv_heads != cfg.n_heads:
        raise ConfigError("forward supports n_kv_heads == n_heads only")
    if channel_masks is not None and len(channel_masks) != cfg.n_blocks:
        raise InputError("channel_masks must have one entry per block")

    t = ids.shape[0]
    dt = model.dtype
    d, hn, dh = cfg.d_model, cfg.n_heads, cfg.d_head
    # Python float so the scale stays weakly typed and f32 inputs stay f32.
    scale = 1.0 / float(np.sqrt(float(dh)))

    x = model.embedding[ids].copy()
    if cfg.pos_scheme == "sinusoidal":
        x = x + sinusoidal_positions(t, d, dt)
        cos = sin = None
    else:
        cos, sin = rope_tables(t, dh, cfg.rope_theta, dt)

    want_io = capture is not None and capture.block_io
    want_inter = capture is not None and capture.ffn_inter
    hidden = [x] if want_io else None
    inters = [] if want_inter else None

    for li, blk in enumerate(model.blocks):
        x_in = x
        h = tensor.rms_norm(x_in, blk.attn_norm_gain, cfg.norm_eps)
        q = tensor.matmul(h, blk.attn_q.T)
        k = tensor.matmul(h, blk.attn_k.T)
        v = tensor.matmul(h, blk.attn_v.T)
        ctx = np.empty_like(q)
        for hd in range(hn):
            sl = slice(hd * dh, (hd + 1) * dh)
            qh, kh, vh = q[:, sl], k[:, sl], v[:, sl]
            if cos is not None:
                qh = apply_rope(qh, cos, sin)
                kh = apply_rope(kh, cos, sin)
            scores = tensor.matmul(qh, kh.T) * scale
            probs = tensor.causal_softmax_rows(scores)
            ctx[:, sl] = tensor.matmul(probs, vh)
        x = x_in + tensor.matmul(ctx, blk.attn_o.T)

        h2 = tensor.rms_norm(x, blk.ffn_norm_gain, cfg.norm_eps)
        gate = tensor.matmul(h2, blk.ffn_gate.T)
        up = tensor.matmul(h2, blk.ffn_up.T)
        inter = tensor.silu(gate) * up
        if channel_masks is not None and channel_masks[li] is not None:
            inter = np.where(channel_masks[li][None, :], inter, 0.0).astype(inter.dtype, copy=False)
        x_out = x + tensor.matmul(inter, blk.ffn_down)

        if observer is not None:
            observer(li, x_in, x_out, h2, inter)
        if want_io:
            hidden.append(x_out)
        if want_inter:
            inters.append(inter)
        x = x_out

    final = tensor.rms_norm(x, model.final_norm_gain, cfg.norm_eps)
    logits = tensor.matmul(final, model.head_matrix())

    trace = None
    if capture is not None:
        trace = ActivationTrace(hidden=hidden, ffn_inter=inters, logits=logits)
    return ForwardOutput(logits=logits, trace=trace)


def count_params(model_or_config) -> dict:
    """Exact per-component parameter counts.

    Components: embedding, lm_head (0 when tied), mha (q,k,v,o with grouped
    k/v sizing when n_kv_heads < n_heads), ffn (3 * d_ff * d_model per block),
    norms (two gains per block plus the final gain).
    """
    cfg = model_or_config.config if isinstance(model_or_config, ModelCheckpoint) \
        else model_or_config
    cfg.validate()
    d, v = cfg.d_model, cfg.vocab_size
    mha = cfg.n_blocks * (2 * d * d + 2 * d * cfg.d_kv)
    ffn = sum(3 * int(f) * d for f in cfg.d_ff_per_block)
    out = {
        "embedding": v * d,
        "lm_head": 0 if cfg.tied_head else d * v,
        "mha": mha,
        "ffn": ffn,
        "norms": cfg.n_blocks * 2 * d + d,
    }
    out["total"] = sum(out.values())
    return out


def count_macs(model_or_config, seq_len: int) -> dict:
    """Exact multiply-accumulate counts for one forward pass of seq_len tokens.

    Every linear layer contributes in*out*seq_len; the attention score and
    value products contribute 2*seq_len^2*d_model per block (full square, as
    computed). Matches the instrumented kernel counter exactly for runtime
    checkpoints.
    """
    cfg = model_or_config.config if isinstance(model_or_config, ModelCheckpoint) \
        else model_or_config
    cfg.validate()
    if seq_len < 1:
        raise InputError(f"seq_len must be >= 1, got {seq_len}")
    s, d = int(seq_len), cfg.d_model
    out = {
        "mha_linear": cfg.n_blocks * (2 * d * d + 2 * d * cfg.d_kv) * s,
        "mha_attention": cfg.n_blocks * 2 * s * s * d,
        "ffn": sum(3 * d * int(f) for f in cfg.d_ff_per_block) * s,
        "lm_head": s * d * cfg.vocab_size,
    }
    out["total"] = sum(out.values())
    return out
