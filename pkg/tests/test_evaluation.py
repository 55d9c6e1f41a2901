import numpy as np
import pytest

from ffnprune import evaluation, toy
from ffnprune.calibration import CalibrationSet, collect_summaries
from ffnprune.errors import ConfigError, InputError
from ffnprune.evaluation import (
    ablation_run,
    all_variants,
    benchmark_latency,
    efficiency_report,
    perplexity,
)
from ffnprune.model import count_macs


def uniform_logit_model(cfg):
    m = toy.random_checkpoint(cfg, seed=0)
    m.embedding[:] = 0.0
    for blk in m.blocks:
        blk.attn_o[:] = 0.0
        blk.ffn_down[:] = 0.0
    if m.lm_head is not None:
        m.lm_head[:] = 0.0
    return m


class TestPerplexity:
    def test_uniform_logits_give_vocab_size(self, tiny_config):
        m = uniform_logit_model(tiny_config)
        corpus = np.arange(64, dtype=np.uint32) % tiny_config.vocab_size
        ppl = perplexity(m, corpus, 16)
        assert ppl == pytest.approx(tiny_config.vocab_size, abs=1e-3)

    def test_confident_correct_model_approaches_one(self, tiny_config):
        # tied head + one-hot embeddings + huge gain make the model repeat
        # its input with a large margin; copy corpus makes that correct.
        cfg = toy.toy_config(vocab_size=8, d_model=8, n_heads=2, n_blocks=1,
                             d_ff=8, max_seq_len=64)
        cfg.tied_head = True
        m = toy.random_checkpoint(cfg, seed=0)
        m.embedding[:] = np.eye(8, dtype=np.float32) * 50.0
        for blk in m.blocks:
            blk.attn_o[:] = 0.0
            blk.ffn_down[:] = 0.0
        corpus = np.full(64, 3, dtype=np.uint32)
        ppl = perplexity(m, corpus, 16)
        assert ppl < 1.35
        assert ppl >= 1.0

    def test_empty_corpus_rejected(self, tiny_model):
        with pytest.raises(InputError):
            perplexity(tiny_model, np.zeros(3, dtype=np.uint32), 16)

    def test_perplexity_at_least_one(self, toy_model):
        corpus = toy.random_corpus(512, 512, seed=4)
        assert perplexity(toy_model, corpus, 32) >= 1.0

    def test_deterministic(self, toy_model):
        corpus = toy.random_corpus(512, 512, seed=4)
        assert perplexity(toy_model, corpus, 32) == perplexity(toy_model, corpus, 32)


class TestLatency:
    def test_reports_order_statistics(self, tiny_model):
        stats = benchmark_latency(tiny_model, seq_len=8, reps=5, warmup=1)
        assert stats.p10_ms <= stats.median_ms <= stats.p90_ms
        assert stats.reps == 5

    def test_reps_floor(self, tiny_model):
        with pytest.raises(ConfigError):
            benchmark_latency(tiny_model, seq_len=8, reps=2)


class TestEfficiencyReport:
    def test_dense_vs_dense_unit_ratios(self, tiny_model):
        report = efficiency_report(
            [("dense", tiny_model, 1000), ("again", tiny_model, 1000)],
            None, seq_len=8, reps=3, warmup=1)
        assert report.rows[0].speedup == 1.0
        assert report.rows[0].params == report.rows[1].params
        assert report.rows[0].macs == report.rows[1].macs

    def test_mac_ratio_matches_accounting(self, toy_model, rng):
        from ffnprune import pruner
        from test_pruner import random_plan
        plan = random_plan(toy_model, rng)
        pruned = pruner.apply_plan(toy_model, plan)
        report = efficiency_report(
            [("dense", toy_model, 0), ("pruned", pruned, 0)], None, seq_len=16, reps=0)
        assert report.rows[0].macs == count_macs(toy_model, 16)["total"]
        assert report.rows[1].macs == count_macs(pruned, 16)["total"]

    def test_csv_and_text_agree_on_rows(self, tiny_model):
        report = efficiency_report([("dense", tiny_model, 12)], None, seq_len=8, reps=0)
        assert len(report.to_csv().strip().splitlines()) == 2
        assert "dense" in report.to_text()

    def test_reps_zero_is_fully_deterministic(self, tiny_model):
        corpus = toy.random_corpus(256, tiny_model.config.vocab_size, seed=1)
        a = efficiency_report([("m", tiny_model, 5)], corpus, seq_len=16, reps=0)
        b = efficiency_report([("m", tiny_model, 5)], corpus, seq_len=16, reps=0)
        assert a.to_csv() == b.to_csv()


@pytest.fixture(scope="module")
def harness():
    model = toy.random_checkpoint(seed=7)
    corpus = toy.random_corpus(4096, 512, seed=3)
    seqs = [corpus[i * 32:(i + 1) * 32] for i in range(8)]
    summaries = collect_summaries(model, CalibrationSet(seqs, 0, 32))
    return model, corpus, summaries


class TestAblation:
    def test_full_grid_runs_and_verifies(self, harness):
        model, corpus, summaries = harness
        table = ablation_run(model, summaries, all_variants(), gamma=0.5,
                             corpus_tokens=corpus, seq_len=32, multiple=8)
        assert len(table.rows) == 12
        assert all(r.verify_passed for r in table.rows)
        assert all(np.isfinite(r.ppl) and r.ppl >= 1.0 for r in table.rows)

    def test_ours_label_present(self, harness):
        model, corpus, summaries = harness
        table = ablation_run(model, summaries, [("angular", "cfsp")], gamma=0.5,
                             corpus_tokens=corpus, seq_len=32, multiple=8)
        assert table.rows[0].label == "angular+cfsp (ours)"

    def test_uniform_variant_equal_widths(self, harness):
        model, corpus, summaries = harness
        table = ablation_run(model, summaries, [("uniform", "magnitude")], gamma=0.5,
                             corpus_tokens=corpus, seq_len=32, multiple=8)
        # equal-width blocks under the uniform metric keep identical dim_f
        assert table.rows[0].total_kept % model.config.n_blocks == 0

    def test_csv_shape(self, harness):
        model, corpus, summaries = harness
        table = ablation_run(model, summaries, [("cosine", "wanda")], gamma=0.5,
                             corpus_tokens=corpus, seq_len=32, multiple=8)
        lines = table.to_csv().strip().splitlines()
        assert lines[0].startswith("coarse,fine,label")
        assert len(lines) == 2
