"""Coarse-metric x fine-method ablation grid on the toy model.

Runs every combination of the four block-saliency metrics (angular, cosine,
euclidean, uniform) with the three channel scorers (activation-ratio,
weight-times-activation, magnitude) at 50% retention, verifies each pruned
model against the masked-dense oracle, and prints a comparison table.
Desk-scale perplexities say nothing about how the variants rank at real
scale; the point here is that every path runs and verifies.
"""

from ffnprune import calibration, evaluation, toy

model = toy.random_checkpoint(seed=7)
corpus = toy.random_corpus(8_192, 512, seed=3)

seqs = [corpus[i * 64:(i + 1) * 64] for i in range(16)]
summaries = calibration.collect_summaries(
    model, calibration.CalibrationSet(seqs, seed=0, seq_len=64))

table = evaluation.ablation_run(
    model, summaries, evaluation.all_variants(), gamma=0.5,
    corpus_tokens=corpus, seq_len=64, alpha=1.0, multiple=8)
print(table.to_text())
