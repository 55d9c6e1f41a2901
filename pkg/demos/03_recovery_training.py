"""Importance-guided low-rank recovery after pruning.

Prunes half of every FFN from a tied-head toy model, then attaches adapter
pairs whose ranks are proportional to the normalized block importance
(average budget 8) and trains them with AdamW on a next-token copy task.
Base weights stay frozen; only the adapters move. The script reports the
rank allocation, the training curve, and held-out perplexity before and
after recovery, then folds the adapters back into plain weights.
"""

import numpy as np

from ffnprune import calibration, evaluation, importance, pruner, recovery, toy

model = toy.recovery_demo_checkpoint(seed=7)
tokens = toy.copy_task_corpus(60_000, 512, seed=9)
train_tokens, held_out = tokens[:50_000], tokens[50_000:]

calib = calibration.sample_calibration(train_tokens, 16, 64, seed=1)
summaries = calibration.collect_summaries(model, calib)
scores = importance.score_blocks(summaries, "angular", alpha=1.0)
budget = importance.allocate_retention(scores.normalized, gamma=0.5)
dim_f = importance.adjust_dimensions(budget.keep_fraction,
                                     model.config.d_ff_per_block, multiple=8)
fine = [importance.fine_scores(b, s.channel_norms()).scores
        for b, s in zip(model.blocks, summaries)]
pruned = pruner.apply_plan(model, pruner.build_plan(fine, dim_f))
print("pruned widths:", pruned.config.d_ff_per_block)

alloc = recovery.allocate_ranks(scores.normalized, r_bar=8.0)
print("adapter ranks per block (avg budget 8):", alloc.ranks)

adapted = recovery.attach_adapters(pruned, alloc.ranks, seed=3)
print(f"trainable adapter parameters: {adapted.trainable_param_count():,} "
      f"(base model frozen)")

cfg = recovery.TrainConfig(steps=200, batch_size=8, seq_len=64,
                           learning_rate=1e-2, seed=4, r_bar=8.0)
result = recovery.train(adapted, train_tokens, cfg)
for step in (0, 50, 100, 150, len(result.losses) - 1):
    print(f"  step {step:>3}: loss {result.losses[step]:.4f}")
print(f"loss ratio final/initial: {result.losses[-1] / result.losses[0]:.3f}")

merged = recovery.merge_adapters(adapted)
ppl_pruned = evaluation.perplexity(pruned, held_out, 64)
ppl_rec = evaluation.perplexity(merged, held_out, 64)
print(f"held-out perplexity: pruned {ppl_pruned:.2f} -> recovered {ppl_rec:.2f}")
