"""Importance scoring and budget allocation.

Coarse path: per-block transformation saliency (mean per-token angular
distance between the residual stream entering and leaving a block), squashed
through a mean-centered sigmoid, then turned into per-block retention
fractions that sum to gamma * n before clamping. gamma is the global
retention fraction: a 50%-sparsity run uses gamma = 0.5.

Fine path: per intermediate channel i, three relative-magnitude terms, each
summed over hidden index j and normalized across the channels k sharing j:

    T_d(i) = sum_j |W_d[i][j]| * a[i] / sum_k |W_d[k][j]| * a[k]
    T_u(i) = sum_j |W_u[i][j]|        / sum_k |W_u[k][j]|
    T_g(i) = sum_j |W_g[i][j]|        / sum_k |W_g[k][j]|
    score(i) = (T_d + T_u + T_g)(i) * a[i]

with a[i] the channel's calibration activation norm and columns whose
denominator is exactly zero contributing nothing. Baseline scorers
(magnitude, weight-times-activation) and a global top-k allocator round out
the ablation surface.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError
from .model import TransformerBlock
from .tensor import F64

COARSE_METRICS = ("angular", "cosine", "euclidean", "uniform")


@dataclass
class CoarseScores:
    raw: np.ndarray         # (n,) float64
    normalized: np.ndarray  # (n,) in (0,1)
    alpha: float
    mean: float


@dataclass
class RetentionBudget:
    keep_fraction: np.ndarray   # (n,) post-clamp
    pre_clamp: np.ndarray       # (n,) exact Eq-style allocation
    gamma: float
    clamped: np.ndarray         # (n,) bool
    min_keep: float


@dataclass
class FineScores:
    scores: np.ndarray  # (d_ff,)
    t_down: np.ndarray
    t_up: np.ndarray
    t_gate: np.ndarray


def angular_distance(u: np.ndarray, v: np.ndarray) -> float:
    """Angle between u and v as a fraction of pi, in [0, 1].

    Computed as 2*atan2(|u/|u| - v/|v||, |u/|u| + v/|v||) / pi, which equals
    arccos of the cosine similarity over pi but stays exact at the boundary
    cases (identical, opposite, orthogonal) where arccos loses precision.
    """
    a = np.asarray(u, dtype=F64).ravel()
    b = np.asarray(v, dtype=F64).ravel()
    a = a / np.sqrt(a @ a)
    b = b / np.sqrt(b @ b)
    diff = np.sqrt(np.sum((a - b) ** 2))
    summ = np.sqrt(np.sum((a + b) ** 2))
    return float(2.0 * np.arctan2(diff, summ) / np.pi)


def coarse_scores(summaries, metric: str) -> np.ndarray:
    """Per-block raw saliency under the chosen distance metric."""
    if metric not in COARSE_METRICS:
        raise ConfigError(f"unknown coarse metric {metric!r}; pick from {COARSE_METRICS}")
    n = len(summaries)
    if metric == "uniform":
        return np.ones(n, dtype=F64)
    out = np.empty(n, dtype=F64)
    for i, s in enumerate(summaries):
        if s.token_count < 1:
            raise InputError(f"block {i} summary has no tokens")
        total = {"angular": s.angular_sum, "cosine": s.cosine_sum,
                 "euclidean": s.euclidean_sum}[metric]
        out[i] = total / s.token_count
    return out


def normalize_scores(raw: np.ndarray, alpha: float) -> np.ndarray:
    """Mean-centered sigmoid with steepness alpha; preserves the raw ranking."""
    if not alpha > 0:
        raise ConfigError(f"alpha must be positive, got {alpha}")
    r = np.asarray(raw, dtype=F64)
    if r.ndim != 1 or r.size < 1:
        raise InputError("raw scores must be a non-empty vector")
    z = -alpha * (r - r.mean())
    return 1.0 / (1.0 + np.exp(z))


def score_blocks(summaries, metric: str, alpha: float) -> CoarseScores:
    raw = coarse_scores(summaries, metric)
    return CoarseScores(raw=raw, normalized=normalize_scores(raw, alpha),
                        alpha=float(alpha), mean=float(raw.mean()))


def allocate_retention(normalized: np.ndarray, gamma: float,
                       min_keep: float = 0.05) -> RetentionBudget:
    """Per-block keep fractions proportional to normalized scores.

    Pre-clamp fractions sum to gamma * n exactly; clamping into
    [min_keep, 1.0] is a pure per-block map and does not redistribute the
    lost or gained budget (deviations surface in the prune summary).
    """
    if not (0.0 < gamma <= 1.0):
        raise ConfigError(f"gamma must be in (0, 1], got {gamma}")
    norm = np.asarray(normalized, dtype=F64)
    if norm.ndim != 1 or norm.size < 1:
        raise InputError("normalized scores must be a non-empty vector")
    if np.any(norm <= 0.0) or np.any(norm >= 1.0):
        raise InputError("normalized scores must lie strictly inside (0, 1)")
    n = norm.size
    pre = norm * gamma * n / norm.sum()
    keep = np.clip(pre, min_keep, 1.0)
    return RetentionBudget(keep_fraction=keep, pre_clamp=pre, gamma=float(gamma),
                           clamped=keep != pre, min_keep=float(min_keep))


def adjust_dimensions(keep: np.ndarray, dim_o: np.ndarray, multiple: int) -> np.ndarray:
    """Round each block's retained width to a hardware-friendly multiple.

    dim_f = floor((dim_o * keep + multiple/2) / multiple) * multiple, clamped
    into [multiple, largest multiple <= dim_o].
    """
    if multiple < 1:
        raise ConfigError(f"multiple must be >= 1, got {multiple}")
    keep = np.asarray(keep, dtype=F64)
    dims = np.asarray(dim_o, dtype=np.int64)
    if np.any(dims < multiple):
        raise ConfigError(f"every dim_o must be >= multiple ({multiple})")
    raw = np.floor((dims * keep + multiple / 2.0) / multiple).astype(np.int64) * multiple
    upper = (dims // multiple) * multiple
    return np.minimum(np.maximum(raw, multiple), upper)


def fine_scores(block: TransformerBlock, channel_norms: np.ndarray) -> FineScores:
    """Relative-magnitude channel scores weighted by activation norms."""
    a = np.asarray(channel_norms, dtype=F64)
    if a.ndim != 1 or a.shape[0] != block.d_ff:
        raise InputError(f"channel norms shape {a.shape} does not match d_ff {block.d_ff}")
    if np.any(a < 0):
        raise InputError("channel norms must be non-negative")

    def ratio_sum(weighted: np.ndarray) -> np.ndarray:
        denom = weighted.sum(axis=0, keepdims=True)  # per hidden index j
        frac = np.divide(weighted, denom, out=np.zeros_like(weighted),
                         where=denom > 0.0)
        return frac.sum(axis=1)

    t_down = ratio_sum(np.abs(block.ffn_down.astype(F64, copy=False)) * a[:, None])
    t_up = ratio_sum(np.abs(block.ffn_up.astype(F64, copy=False)))
    t_gate = ratio_sum(np.abs(block.ffn_gate.astype(F64, copy=False)))
    f = t_down + t_up + t_gate
    return FineScores(scores=f * a, t_down=t_down, t_up=t_up, t_gate=t_gate)


def magnitude_scores(block: TransformerBlock) -> np.ndarray:
    """Summed absolute weights of a channel across all three FFN matrices."""
    return (np.abs(block.ffn_up.astype(F64, copy=False)).sum(axis=1)
            + np.abs(block.ffn_gate.astype(F64, copy=False)).sum(axis=1)
            + np.abs(block.ffn_down.astype(F64, copy=False)).sum(axis=1))


def wanda_scores(block: TransformerBlock, channel_norms: np.ndarray,
                 input_norms: np.ndarray) -> np.ndarray:
    """Weight-times-input-norm criterion summed over each channel group."""
    a = np.asarray(channel_norms, dtype=F64)
    h = np.asarray(input_norms, dtype=F64)
    if a.shape != (block.d_ff,):
        raise InputError(f"channel norms shape {a.shape} does not match d_ff {block.d_ff}")
    if h.shape != (block.ffn_up.shape[1],):
        raise InputError(f"input norms shape {h.shape} does not match d_model "
                         f"{block.ffn_up.shape[1]}")
    up = np.abs(block.ffn_up.astype(F64, copy=False)) @ h
    gate = np.abs(block.ffn_gate.astype(F64, copy=False)) @ h
    down = np.abs(block.ffn_down.astype(F64, copy=False)).sum(axis=1) * a
    return up + gate + down


def global_sort_allocation(per_block_scores: list[np.ndarray], total_keep: int) -> list[int]:
    """Keep the total_keep highest-scoring channels across all blocks.

    Ties break by ascending (block, channel) index; some blocks may keep 0.
    """
    sizes = [int(np.asarray(s).shape[0]) for s in per_block_scores]
    if total_keep < 0 or total_keep > sum(sizes):
        raise ConfigError(f"total_keep {total_keep} outside [0, {sum(sizes)}]")
    tagged = [(-float(s[c]), b, c)
              for b, s in enumerate(per_block_scores)
              for c in range(sizes[b])]
    tagged.sort()
    counts = [0] * len(per_block_scores)
    for _, b, _ in tagged[:total_keep]:
        counts[b] += 1
    return counts
