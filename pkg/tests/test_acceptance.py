"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines. Every tolerance is pinned here, not configurable.
"""

import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from ffnprune import (
    calibration,
    checkpoint,
    corpus,
    evaluation,
    importance,
    pruner,
    recovery,
    tensor,
    toy,
)
from ffnprune.cli import main as cli_main
from ffnprune.model import count_macs, count_params, forward

from oracles import fine_scores_reference

REPO = Path(__file__).resolve().parent.parent


def report(name: str, passed: bool, detail: str = ""):
    line = f"ACCEPTANCE {name}: {'PASS' if passed else 'FAIL'}"
    if detail:
        line += f" ({detail})"
    print(line)
    assert passed, line


def random_plan(model, rng):
    blocks = []
    for f in model.config.d_ff_per_block:
        k = int(rng.integers(1, int(f) + 1))
        kept = sorted(int(c) for c in rng.choice(int(f), size=k, replace=False))
        blocks.append(pruner.BlockPlan(kept_channels=kept, dim_f=k))
    return pruner.SparsityPlan(blocks=blocks, provenance={})


def test_pruned_vs_masked_equivalence():
    """50 random toy models x random plans; <=1e-4 f32 and <=1e-10 f64."""
    t0 = time.time()
    rng = np.random.default_rng(2024)
    worst32 = worst64 = 0.0
    for trial in range(50):
        model = toy.random_checkpoint(seed=1000 + trial)
        plan = random_plan(model, rng)
        pruned = pruner.apply_plan(model, plan)
        seqs = [rng.integers(0, 512, size=24, dtype=np.uint32) for _ in range(2)]
        rep32 = pruner.verify_equivalence(model, plan, pruned, seqs, tol=1e-4)
        worst32 = max(worst32, rep32.max_abs_diff)
        m64, p64 = model.astype(np.float64), pruned.astype(np.float64)
        rep64 = pruner.verify_equivalence(m64, plan, p64, seqs[:1], tol=1e-10)
        worst64 = max(worst64, rep64.max_abs_diff)
        assert rep32.passed and rep64.passed, trial
    elapsed = time.time() - t0
    report("pruned-vs-masked-equivalence",
           worst32 <= 1e-4 and worst64 <= 1e-10 and elapsed < 120,
           f"max f32 {worst32:.2e}, max f64 {worst64:.2e}, {elapsed:.0f}s")


def test_fine_score_oracle():
    """Streaming scores vs direct brute force on 100 small instances."""
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        f = int(rng.integers(1, 17))
        d = int(rng.integers(1, 9))
        w_up, w_gate, w_down = (rng.normal(size=(f, d)) for _ in range(3))
        a = rng.uniform(0, 2, size=f)
        blk = _block(w_up, w_gate, w_down)
        got = importance.fine_scores(blk, a).scores
        ref = fine_scores_reference(w_up, w_gate, w_down, a)
        rel = np.max(np.abs(got - ref) / np.maximum(np.abs(ref), 1e-12))
        worst = max(worst, float(rel))
    blk = _block([[1.0], [1.0]], [[2.0], [2.0]], [[3.0], [1.0]])
    worked = importance.fine_scores(blk, np.array([1.0, 2.0])).scores
    report("fine-score-oracle",
           worst <= 1e-6 and np.allclose(worked, [1.6, 2.8], atol=1e-12),
           f"worst rel {worst:.2e}, worked example {np.round(worked, 6).tolist()}")


def _block(w_up, w_gate, w_down):
    from ffnprune.model import TransformerBlock
    w_up = np.asarray(w_up, dtype=np.float64)
    d = w_up.shape[1]
    z = np.zeros((d, d))
    return TransformerBlock(
        attn_q=z, attn_k=z, attn_v=z, attn_o=z,
        ffn_gate=np.asarray(w_gate, dtype=np.float64), ffn_up=w_up,
        ffn_down=np.asarray(w_down, dtype=np.float64),
        attn_norm_gain=np.ones(d), ffn_norm_gain=np.ones(d))


def test_budget_identities():
    """Pre-clamp keep sum = gamma*n (1e-9) and rank sum = round(rbar*n), 1000 draws."""
    rng = np.random.default_rng(11)
    worst_keep = 0.0
    ranks_ok = True
    for _ in range(1000):
        n = int(rng.integers(1, 12))
        norm = rng.uniform(0.01, 0.99, size=n)
        gamma = float(rng.uniform(0.05, 1.0))
        rbar = float(rng.uniform(1.0, 16.0))
        budget = importance.allocate_retention(norm, gamma)
        worst_keep = max(worst_keep, abs(float(budget.pre_clamp.sum()) - gamma * n))
        alloc = recovery.allocate_ranks(norm, rbar)
        ranks_ok &= sum(alloc.ranks) == round(rbar * n)
    # equal raw scores normalize to exactly 0.5, and with n a power of two the
    # proportional shares come out exactly gamma and rbar
    eq_norm = importance.normalize_scores(np.full(4, 0.3), alpha=1.0)
    exact_keep = importance.allocate_retention(eq_norm, 0.37).keep_fraction
    exact_ranks = recovery.allocate_ranks(eq_norm, 8.0).ranks
    equal_ok = (np.all(eq_norm == 0.5) and np.all(exact_keep == 0.37)
                and exact_ranks == [8, 8, 8, 8])
    report("budget-identities", worst_keep <= 1e-9 and ranks_ok and equal_ok,
           f"worst keep-sum err {worst_keep:.2e}")


def test_dimension_adjustment():
    """Published rounding cases plus 1e4 fuzzed invariants."""
    cases_ok = (int(importance.adjust_dimensions([0.5], [14336], 128)[0]) == 7168
                and int(importance.adjust_dimensions([0.3], [11008], 128)[0]) == 3328)
    rng = np.random.default_rng(5)
    fuzz_ok = True
    for _ in range(10_000):
        multiple = int(rng.choice([1, 2, 8, 64, 128, 256]))
        dim_o = int(rng.integers(multiple, 20_000))
        keep = float(rng.uniform(0.0, 1.0))
        out = int(importance.adjust_dimensions([keep], [dim_o], multiple)[0])
        fuzz_ok &= out >= multiple and out <= dim_o and out % multiple == 0
    report("dimension-adjustment", cases_ok and fuzz_ok,
           "14336*0.5->7168, 11008*0.3->3328 at multiple 128")


def test_angular_and_normalization_suite():
    x = np.array([0.3, -1.2, 2.2, 0.7])
    d_same = importance.angular_distance(x, x)
    d_opp = importance.angular_distance(x, -x)
    d_orth = importance.angular_distance([1.0, 0.0], [0.0, 1.0])
    rng = np.random.default_rng(9)
    in_range = all(0.0 <= importance.angular_distance(rng.normal(size=6),
                                                      rng.normal(size=6)) <= 1.0
                   for _ in range(500))
    sig_half = np.all(importance.normalize_scores(np.full(5, 0.42), 1.0) == 0.5)
    raw = rng.uniform(0, 1, size=7)
    shift_ok = np.allclose(importance.normalize_scores(raw, 1.7),
                           importance.normalize_scores(raw + 5.0, 1.7), atol=1e-12)
    rank_ok = all(
        np.array_equal(np.argsort(r, kind="stable"),
                       np.argsort(importance.normalize_scores(r, a), kind="stable"))
        for r in (rng.uniform(0, 1, size=6) for _ in range(200)) for a in (0.5, 1, 3))
    ok = (abs(d_same) <= 1e-9 and abs(d_opp - 1.0) <= 1e-9
          and abs(d_orth - 0.5) <= 1e-9 and in_range and sig_half and shift_ok and rank_ok)
    report("angular-and-normalization",
           ok, f"D(x,x)={d_same:.1e}, D(x,-x)-1={d_opp - 1:.1e}, D(e1,e2)={d_orth}")


def test_gradient_check():
    """Reverse mode vs central differences on every adapter parameter (f64)."""
    t0 = time.time()
    cfg = toy.toy_config(vocab_size=32, d_model=8, n_heads=2, n_blocks=2,
                         d_ff=16, max_seq_len=32)
    m64 = toy.random_checkpoint(cfg, seed=3, weight_std=0.2).astype(np.float64)
    toks = np.array([1, 5, 9, 2, 7, 3, 8, 4])
    adapted = recovery.attach_adapters(m64, [2, 3], seed=5)
    rng = np.random.default_rng(11)
    for ad in adapted.adapters.values():
        ad.up[:] = rng.normal(0, 0.3, ad.up.shape)
        ad.down[:] = rng.normal(0, 0.3, ad.down.shape)
    loss, tape, leaves = recovery.sequence_loss(adapted, toks)
    tape.backward(loss)

    def loss_value():
        l, _, _ = recovery.sequence_loss(adapted, toks)
        return float(l.value)

    h = 1e-5
    checked = 0
    worst_rel = 0.0
    ok = True
    for (key, part), node in leaves.items():
        arr = adapted.adapters[key].down if part == "down" else adapted.adapters[key].up
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            fp = loss_value()
            arr[idx] = orig - h
            fm = loss_value()
            arr[idx] = orig
            fd = (fp - fm) / (2 * h)
            ad_g = float(node.grad[idx])
            # 1e-9 absolute floor = central-difference noise at f64
            ok &= abs(fd - ad_g) <= 1e-9 + 1e-6 * max(abs(fd), abs(ad_g))
            if max(abs(fd), abs(ad_g)) > 1e-9:
                worst_rel = max(worst_rel, abs(fd - ad_g) / max(abs(fd), abs(ad_g)))
            checked += 1
    elapsed = time.time() - t0
    report("gradient-check", ok and elapsed < 60,
           f"{checked} params, worst rel {worst_rel:.1e}, {elapsed:.0f}s")


def test_recovery_efficacy():
    """Copy task: 200 AdamW steps cut the loss to <=70% and help held-out ppl."""
    t0 = time.time()
    model = toy.recovery_demo_checkpoint(seed=7)
    tokens = toy.copy_task_corpus(60_000, 512, seed=9)
    train_tokens, held_out = tokens[:50_000], tokens[50_000:]

    calib = calibration.sample_calibration(train_tokens, 16, 64, seed=1)
    summaries = calibration.collect_summaries(model, calib)
    scores = importance.score_blocks(summaries, "angular", 1.0)
    budget = importance.allocate_retention(scores.normalized, 0.5)
    dim_f = importance.adjust_dimensions(budget.keep_fraction,
                                         model.config.d_ff_per_block, 8)
    fine = [importance.fine_scores(b, s.channel_norms()).scores
            for b, s in zip(model.blocks, summaries)]
    pruned = pruner.apply_plan(model, pruner.build_plan(fine, dim_f))

    alloc = recovery.allocate_ranks(scores.normalized, 8.0)
    adapted = recovery.attach_adapters(pruned, alloc.ranks, seed=3)
    train_cfg = recovery.TrainConfig(steps=200, batch_size=8, seq_len=64,
                                     learning_rate=1e-2, seed=4, r_bar=8.0)
    result = recovery.train(adapted, train_tokens, train_cfg)
    merged = recovery.merge_adapters(adapted)

    ratio = result.losses[-1] / result.losses[0]
    ppl_pruned = evaluation.perplexity(pruned, held_out, 64)
    ppl_rec = evaluation.perplexity(merged, held_out, 64)
    elapsed = time.time() - t0
    report("recovery-efficacy",
           ratio <= 0.70 and ppl_rec <= ppl_pruned and elapsed < 300,
           f"loss {result.losses[0]:.3f}->{result.losses[-1]:.3f} (x{ratio:.2f}), "
           f"ppl {ppl_pruned:.1f}->{ppl_rec:.1f}, {elapsed:.0f}s")


def test_accounting_fidelity():
    """Published footprint figures for reference shapes; exact toy counters."""
    dense = checkpoint.load_config(str(REPO / "demos/shapes/llama3_8b"))
    pruned = checkpoint.load_config(str(REPO / "demos/shapes/llama3_8b_pruned50"))
    seven_b = checkpoint.load_config(str(REPO / "demos/shapes/llama2_7b"))

    def blocks_macs(cfg):
        # reference MAC figures count block compute only (no lm_head) at seq 512
        m = count_macs(cfg, 512)
        return m["mha_linear"] + m["mha_attention"] + m["ffn"]

    checks = [
        (count_params(dense)["total"], 8.03e9),
        (count_params(pruned)["total"], 5.21e9),
        (blocks_macs(dense), 3.64e12),
        (blocks_macs(pruned), 2.19e12),
        (count_params(seven_b)["total"], 6.73e9),
        (blocks_macs(seven_b), 3.38e12),
    ]
    worst = max(abs(got / expect - 1.0) for got, expect in checks)

    model = toy.random_checkpoint(seed=4)
    exact = True
    for s in (1, 9, 40):
        with tensor.mac_counter() as c:
            forward(model, np.arange(s) % 512)
        exact &= c.macs == count_macs(model, s)["total"]
    report("accounting-fidelity", worst <= 0.015 and exact,
           f"worst shape deviation {worst * 100:.2f}%, toy counters exact={exact}")


def test_latency_ordering():
    """Median forward latency of the 50%-FFN toy strictly below dense."""
    model = toy.random_checkpoint(seed=7)
    plan = pruner.build_plan(
        [np.arange(f, dtype=np.float64) for f in model.config.d_ff_per_block],
        [int(f) // 2 for f in model.config.d_ff_per_block])
    pruned = pruner.apply_plan(model, plan)
    dense_ms = evaluation.benchmark_latency(model, seq_len=128, reps=20, warmup=3)
    pruned_ms = evaluation.benchmark_latency(pruned, seq_len=128, reps=20, warmup=3)
    report("latency-ordering", pruned_ms.median_ms < dense_ms.median_ms,
           f"dense {dense_ms.median_ms:.3f}ms vs pruned {pruned_ms.median_ms:.3f}ms")


def test_ablation_harness():
    """All 4 coarse x 3 fine variants end-to-end, each passing verification."""
    model = toy.random_checkpoint(seed=7)
    tokens = toy.random_corpus(4096, 512, seed=3)
    seqs = [tokens[i * 64:(i + 1) * 64] for i in range(8)]
    summaries = calibration.collect_summaries(
        model, calibration.CalibrationSet(seqs, 0, 64))
    table = evaluation.ablation_run(model, summaries, evaluation.all_variants(),
                                    gamma=0.5, corpus_tokens=tokens, seq_len=64,
                                    multiple=8)
    ok = (len(table.rows) == 12
          and all(r.verify_passed for r in table.rows)
          and any(r.label == "angular+cfsp (ours)" for r in table.rows)
          and all(np.isfinite(r.ppl) for r in table.rows))
    report("ablation-harness", ok, f"{len(table.rows)} variants, all verified")


def test_end_to_end_determinism(tmp_path):
    """calibrate -> prune -> verify -> recover -> eval twice, byte-identical."""
    model = toy.recovery_demo_checkpoint(seed=7)
    model_dir = tmp_path / "model"
    checkpoint.save_checkpoint(model, str(model_dir))
    corpus.save_corpus(toy.copy_task_corpus(30_000, 512, seed=9), 512,
                       str(tmp_path / "corpus"))

    def pipeline(root: Path):
        args = ["--model", str(model_dir), "--corpus", str(tmp_path / "corpus"),
                "--seed", "3", "--threads", "1"]
        assert cli_main(["calibrate", *args, "--out", str(root / "summ"),
                         "--samples", "8", "--calib-seq-len", "64"]) == 0
        assert cli_main(["prune", "--model", str(model_dir),
                         "--summary", str(root / "summ"), "--out", str(root / "pruned"),
                         "--gamma", "0.5", "--multiple", "8", "--seed", "3",
                         "--threads", "1"]) == 0
        assert cli_main(["verify", "--model", str(model_dir),
                         "--pruned", str(root / "pruned" / "model"),
                         "--plan", str(root / "pruned" / "plan.json"),
                         "--seed", "3"]) == 0
        assert cli_main(["recover", "--model", str(root / "pruned" / "model"),
                         "--corpus", str(tmp_path / "corpus"),
                         "--plan", str(root / "pruned" / "plan.json"),
                         "--out", str(root / "rec"), "--steps", "5", "--batch", "2",
                         "--train-seq-len", "32", "--seed", "3"]) == 0
        assert cli_main(["eval", "--model", str(model_dir),
                         "--pruned", str(root / "pruned" / "model"),
                         "--pruned", str(root / "rec" / "model"),
                         "--corpus", str(tmp_path / "corpus"), "--seq-len", "64",
                         "--reps", "0", "--seed", "3",
                         "--out", str(root / "report.csv")]) == 0

    run_a, run_b = tmp_path / "a", tmp_path / "b"
    pipeline(run_a)
    pipeline(run_b)
    artifacts = [
        "summ/summary.json", "summ/summary.bin",
        "pruned/model/manifest.json", "pruned/model/weights.bin",
        "pruned/plan.json", "pruned/prune_summary.txt",
        "rec/adapters/manifest.json", "rec/adapters/weights.bin",
        "rec/loss.csv", "rec/model/weights.bin", "rec/model/manifest.json",
        "report.csv",
    ]
    diff = [rel for rel in artifacts
            if (run_a / rel).read_bytes() != (run_b / rel).read_bytes()]
    report("end-to-end-determinism", not diff,
           "all artifacts byte-identical" if not diff else f"differ: {diff}")
