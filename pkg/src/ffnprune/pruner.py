"""Sparsity plans: build from scores, physically slice the model, prove parity.

A plan stores, per block, the sorted list of kept intermediate-channel
indices. apply_plan removes rows of ffn_up, ffn_gate and ffn_down outside the
kept set (one row-slice in the intermediate-major layout) and updates the
config widths. masked_forward runs the dense model while zeroing the masked
intermediate channels before the down-projection, which is mathematically the
same computation; verify_equivalence compares the two over test sequences.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace

import numpy as np

from .errors import PlanError
from .importance import FineScores
from .model import ModelCheckpoint, forward

PLAN_NAME = "plan.json"
PLAN_FORMAT_VERSION = 1


@dataclass
class BlockPlan:
    kept_channels: list[int]  # sorted ascending, unique, < dim_o
    dim_f: int


@dataclass
class SparsityPlan:
    blocks: list[BlockPlan]
    provenance: dict

    def keep_masks(self, dim_o: list[int]) -> list[np.ndarray]:
        masks = []
        for bp, f in zip(self.blocks, dim_o):
            m = np.zeros(int(f), dtype=bool)
            m[bp.kept_channels] = True
            masks.append(m)
        return masks

    def validate_against(self, model: ModelCheckpoint) -> None:
        cfg = model.config
        if len(self.blocks) != cfg.n_blocks:
            raise PlanError(f"plan covers {len(self.blocks)} blocks, model has {cfg.n_blocks}")
        for i, (bp, f) in enumerate(zip(self.blocks, cfg.d_ff_per_block)):
            kept = bp.kept_channels
            if len(kept) != bp.dim_f:
                raise PlanError(f"block {i}: dim_f {bp.dim_f} != {len(kept)} kept channels")
            if len(set(kept)) != len(kept):
                raise PlanError(f"block {i}: duplicate kept channels")
            if sorted(kept) != list(kept):
                raise PlanError(f"block {i}: kept channels not ascending")
            if kept and (kept[0] < 0 or kept[-1] >= int(f)):
                raise PlanError(f"block {i}: kept channel out of range for d_ff {f}")
            if bp.dim_f < 1:
                raise PlanError(f"block {i}: dim_f must be >= 1")


def top_k_channels(scores: np.ndarray, k: int) -> list[int]:
    """Indices of the k largest scores; ties keep the lowest index; sorted output."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    return sorted(int(i) for i in order[:k])


def build_plan(fine: list[FineScores | np.ndarray], dim_f, provenance: dict | None = None) -> SparsityPlan:
    """Keep, per block, the dim_f highest-scoring channels."""
    dims = [int(x) for x in np.asarray(dim_f).ravel()]
    if len(dims) != len(fine):
        raise PlanError(f"{len(dims)} target widths for {len(fine)} score vectors")
    blocks = []
    for i, (fs, k) in enumerate(zip(fine, dims)):
        scores = fs.scores if isinstance(fs, FineScores) else np.asarray(fs)
        if k > scores.shape[0]:
            raise PlanError(f"block {i}: dim_f {k} exceeds d_ff {scores.shape[0]}")
        if k < 1:
            raise PlanError(f"block {i}: dim_f must be >= 1")
        blocks.append(BlockPlan(kept_channels=top_k_channels(scores, k), dim_f=k))
    return SparsityPlan(blocks=blocks, provenance=dict(provenance or {}))


def apply_plan(model: ModelCheckpoint, plan: SparsityPlan) -> ModelCheckpoint:
    """Physically remove non-kept rows of the three FFN matrices per block."""
    plan.validate_against(model)
    new_blocks = []
    for blk, bp in zip(model.blocks, plan.blocks):
        idx = np.asarray(bp.kept_channels, dtype=np.int64)
        new_blocks.append(replace(
            blk,
            ffn_gate=np.ascontiguousarray(blk.ffn_gate[idx]),
            ffn_up=np.ascontiguousarray(blk.ffn_up[idx]),
            ffn_down=np.ascontiguousarray(blk.ffn_down[idx])))
    cfg = replace(model.config, d_ff_per_block=[bp.dim_f for bp in plan.blocks])
    pruned = ModelCheckpoint(config=cfg, embedding=model.embedding,
                             blocks=new_blocks, final_norm_gain=model.final_norm_gain,
                             lm_head=model.lm_head)
    pruned.validate_shapes()
    return pruned


def masked_forward(model: ModelCheckpoint, plan: SparsityPlan, tokens) -> np.ndarray:
    """Dense forward with non-kept intermediate channels zeroed before ffn_down."""
    plan.validate_against(model)
    masks = plan.keep_masks(model.config.d_ff_per_block)
    return forward(model, tokens, channel_masks=masks).logits


@dataclass
class EquivalenceReport:
    max_abs_diff: float
    tol: float
    passed: bool
    n_sequences: int


def verify_equivalence(dense: ModelCheckpoint, plan: SparsityPlan,
                       pruned: ModelCheckpoint, test_sequences, tol: float) -> EquivalenceReport:
    """Compare masked-dense logits with pruned-model logits; report, never raise."""
    worst = 0.0
    for seq in test_sequences:
        ref = masked_forward(dense, plan, seq)
        got = forward(pruned, seq).logits
        worst = max(worst, float(np.max(np.abs(ref.astype(np.float64)
                                               - got.astype(np.float64)))))
    return EquivalenceReport(max_abs_diff=worst, tol=float(tol),
                             passed=worst <= tol, n_sequences=len(test_sequences))


def restrict_plan(outer: SparsityPlan, inner: SparsityPlan) -> SparsityPlan:
    """Re-express inner (original-model indices, subset of outer) in the
    index space of the model produced by applying outer."""
    blocks = []
    for i, (bo, bi) in enumerate(zip(outer.blocks, inner.blocks)):
        pos = {ch: p for p, ch in enumerate(bo.kept_channels)}
        try:
            remapped = sorted(pos[ch] for ch in bi.kept_channels)
        except KeyError as exc:
            raise PlanError(
                f"block {i}: channel {exc.args[0]} not kept by the outer plan") from exc
        blocks.append(BlockPlan(kept_channels=remapped, dim_f=bi.dim_f))
    return SparsityPlan(blocks=blocks, provenance=dict(inner.provenance))


def save_plan(plan: SparsityPlan, path: str) -> None:
    payload = {
        "format_version": PLAN_FORMAT_VERSION,
        "blocks": [{"kept_channels": [int(c) for c in bp.kept_channels],
                    "dim_f": int(bp.dim_f)} for bp in plan.blocks],
        "provenance": plan.provenance,
    }
    if os.path.dirname(path):
        os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def load_plan(path: str) -> SparsityPlan:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format_version") != PLAN_FORMAT_VERSION:
        raise PlanError(f"unknown plan format_version {payload.get('format_version')!r}")
    blocks = [BlockPlan(kept_channels=[int(c) for c in b["kept_channels"]],
                        dim_f=int(b["dim_f"])) for b in payload["blocks"]]
    return SparsityPlan(blocks=blocks, provenance=payload.get("provenance", {}))


def plan_summary_text(plan: SparsityPlan, dim_o: list[int], gamma: float | None = None) -> str:
    """Human-readable per-block keep table with deviation from the global budget."""
    lines = ["block  dim_o  dim_f  keep_frac" + ("  dev_from_gamma" if gamma else "")]
    for i, (bp, f) in enumerate(zip(plan.blocks, dim_o)):
        frac = bp.dim_f / int(f)
        row = f"{i:>5}  {int(f):>5}  {bp.dim_f:>5}  {frac:>9.4f}"
        if gamma:
            row += f"  {frac - gamma:>+14.4f}"
        lines.append(row)
    total_o = sum(int(f) for f in dim_o)
    total_f = sum(bp.dim_f for bp in plan.blocks)
    lines.append(f"total  {total_o:>5}  {total_f:>5}  {total_f / total_o:>9.4f}")
    return "\n".join(lines)
