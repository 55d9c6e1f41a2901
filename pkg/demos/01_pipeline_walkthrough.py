"""End-to-end pruning walkthrough on a desk-scale model.

Builds a random toy decoder (4 blocks, d_model 64, d_ff 256, vocab 512),
runs one calibration pass over a synthetic corpus, turns the statistics into
per-block retention budgets and per-channel scores, slices the model, and
proves the pruned checkpoint is numerically equivalent to masking the same
channels in the dense model.
"""

import numpy as np

from ffnprune import calibration, evaluation, importance, pruner, toy

model = toy.random_checkpoint(seed=7)
corpus = toy.copy_task_corpus(30_000, 512, seed=9)
print(f"toy model: {model.config.n_blocks} blocks, d_ff {model.config.d_ff_per_block}")

# --- one forward pass of statistics -----------------------------------------
calib = calibration.sample_calibration(corpus, n_samples=16, seq_len=64, seed=1)
summaries = calibration.collect_summaries(model, calib)
print(f"calibrated on {len(calib.sequences)} sequences "
      f"({summaries[0].token_count} tokens per block)")
print("mean angular distance per block:",
      np.round([s.mean_angular for s in summaries], 4))

# --- coarse budgets, width rounding, fine scores -----------------------------
gamma = 0.5   # keep half of every FFN, distributed by block importance
scores = importance.score_blocks(summaries, metric="angular", alpha=1.0)
budget = importance.allocate_retention(scores.normalized, gamma)
dim_f = importance.adjust_dimensions(budget.keep_fraction,
                                     model.config.d_ff_per_block, multiple=8)
fine = [importance.fine_scores(blk, s.channel_norms())
        for blk, s in zip(model.blocks, summaries)]
plan = pruner.build_plan(fine, dim_f,
                         provenance={"gamma": gamma, "metric": "angular"})
print(pruner.plan_summary_text(plan, model.config.d_ff_per_block, gamma=gamma))

# --- slice and verify ---------------------------------------------------------
pruned = pruner.apply_plan(model, plan)
rng = np.random.default_rng(0)
test_seqs = [rng.integers(0, 512, size=32, dtype=np.uint32) for _ in range(4)]
rep = pruner.verify_equivalence(model, plan, pruned, test_seqs, tol=1e-4)
print(f"masked-dense vs pruned: max |diff| = {rep.max_abs_diff:.2e} "
      f"-> {'PASS' if rep.passed else 'FAIL'}")

ppl_dense = evaluation.perplexity(model, corpus[-4096:], 64)
ppl_pruned = evaluation.perplexity(pruned, corpus[-4096:], 64)
print(f"held-out perplexity: dense {ppl_dense:.2f}, pruned {ppl_pruned:.2f}")
