"""Anatomy of the two scoring stages.

Coarse: each block's saliency is the mean angle (as a fraction of pi) between
the residual stream entering and leaving it. A mean-centered sigmoid fans the
scores out, and retention budgets are proportional shares of gamma * n.

Fine: inside a block, a channel's score combines its relative weight mass in
all three FFN matrices with its calibration activation norm. This script
prints every intermediate quantity for a small worked case.
"""

import numpy as np

from ffnprune import calibration, importance, toy
from ffnprune.model import TransformerBlock

# --- coarse path on the toy model --------------------------------------------
model = toy.random_checkpoint(seed=7)
corpus = toy.random_corpus(20_000, 512, seed=3)
calib = calibration.sample_calibration(corpus, 8, 64, seed=1)
summaries = calibration.collect_summaries(model, calib)

for metric in ("angular", "cosine", "euclidean", "uniform"):
    raw = importance.coarse_scores(summaries, metric)
    print(f"{metric:>9} raw scores: {np.round(raw, 4)}")

raw = importance.coarse_scores(summaries, "angular")
for alpha in (1.0, 3.0):
    norm = importance.normalize_scores(raw, alpha)
    budget = importance.allocate_retention(norm, gamma=0.5)
    print(f"alpha={alpha}: normalized {np.round(norm, 4)} "
          f"-> keep fractions {np.round(budget.keep_fraction, 4)} "
          f"(sum = {budget.pre_clamp.sum():.6f} = gamma*n)")

dims = importance.adjust_dimensions(budget.keep_fraction,
                                    model.config.d_ff_per_block, multiple=8)
print("widths rounded to multiples of 8:", dims.tolist())

# --- fine path on a 2-channel block -------------------------------------------
d = 1
blk = TransformerBlock(
    attn_q=np.zeros((d, d)), attn_k=np.zeros((d, d)),
    attn_v=np.zeros((d, d)), attn_o=np.zeros((d, d)),
    ffn_up=np.array([[1.0], [1.0]]), ffn_gate=np.array([[2.0], [2.0]]),
    ffn_down=np.array([[3.0], [1.0]]),
    attn_norm_gain=np.ones(d), ffn_norm_gain=np.ones(d))
a = np.array([1.0, 2.0])  # calibration activation norms per channel
fs = importance.fine_scores(blk, a)
print("\nworked fine-score example (2 channels, hidden width 1):")
print("  activation norms a =", a.tolist())
print("  T_down =", fs.t_down.tolist(), " (activation-weighted share of ffn_down)")
print("  T_up   =", fs.t_up.tolist())
print("  T_gate =", fs.t_gate.tolist())
print("  score  = (T_down+T_up+T_gate) * a =", fs.scores.tolist())

# baselines on the same block
print("  magnitude baseline:", importance.magnitude_scores(blk).tolist())
print("  weight*activation baseline:",
      importance.wanda_scores(blk, a, np.ones(1)).tolist())

# global top-k allocation across two score vectors
counts = importance.global_sort_allocation(
    [np.array([5.0, 1.0]), np.array([4.0, 3.0])], total_keep=2)
print("  global top-2 across blocks [5,1] and [4,3] keeps per block:", counts)
