"""Command-line pipeline: calibrate, prune, verify, recover, eval, bench, ablate.

Every subcommand validates its inputs before touching any output path, reads
and writes only the documented artifacts (checkpoint dirs, corpus dirs,
summary dirs, plan.json, CSV reports), and is deterministic for fixed seeds
with --threads 1 (latency measurements aside). Failures print one
machine-parseable line: error[CODE] message.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import calibration, checkpoint, corpus, evaluation, importance, pruner, recovery
from .errors import ConfigError, FFNPruneError, InputError, ValidationError

DEFAULTS = {
    "gamma": 0.5,
    "alpha": 1.0,
    "metric": "angular",
    "fine": "cfsp",
    "alloc": "cfsp",
    "multiple": 128,
    "min_keep": 0.05,
    "threads": 1,
    "seed": 0,
    "calibration": {"n_samples": 128, "seq_len": 1024},
    "recovery": {"rbar": 8.0, "steps": 200, "lr": 2e-4, "batch": 8, "seq_len": 64},
    "eval": {"seq_len": 64, "reps": 5, "warmup": 2},
    "verify": {"tol": 1e-4, "sequences": 4, "seq_len": 32},
}

ALLOC_MODES = ("cfsp", "uniform", "global-sort")


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    if not os.path.exists(path):
        raise InputError(f"config file {path} does not exist")
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a JSON object")
    return cfg


class Options:
    """Layered option lookup: explicit flag > config file > built-in default."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.file = _load_config_file(getattr(args, "config", None))

    def get(self, flag: str, *path, default=None):
        value = getattr(self.args, flag, None)
        if value is not None:
            return value
        node = self.file
        for key in path[:-1]:
            node = node.get(key, {}) if isinstance(node, dict) else {}
        if isinstance(node, dict) and path and path[-1] in node:
            return node[path[-1]]
        node = DEFAULTS
        for key in path[:-1]:
            node = node.get(key, {})
        if path and path[-1] in node:
            return node[path[-1]]
        return default


def _require(args, *names):
    for name in names:
        if getattr(args, name, None) is None:
            raise ConfigError(f"--{name.replace('_', '-')} is required")


def _resolve_gamma(opts: Options) -> float:
    gamma = getattr(opts.args, "gamma", None)
    sparsity = getattr(opts.args, "sparsity", None)
    if gamma is not None and sparsity is not None:
        raise ConfigError("pass either --gamma or --sparsity, not both")
    if sparsity is not None:
        gamma = 1.0 - float(sparsity)
        print(f"note: interpreting --sparsity {sparsity} as retention fraction "
              f"gamma={gamma}", file=sys.stderr)
        return gamma
    return float(opts.get("gamma", "gamma"))


def _summaries_for(opts: Options, model) -> tuple[list, dict]:
    """Load a summary directory, or calibrate inline from --corpus."""
    args = opts.args
    if getattr(args, "summary", None):
        summaries = calibration.load_summary(args.summary)
        return summaries, {"calibration_digest": calibration.summary_digest(args.summary)}
    _require(args, "corpus")
    tokens, vocab = corpus.load_corpus(args.corpus)
    if vocab != model.config.vocab_size:
        raise InputError(f"corpus vocab {vocab} != model vocab {model.config.vocab_size}")
    n = int(opts.get("samples", "calibration", "n_samples"))
    seq_len = int(opts.get("calib_seq_len", "calibration", "seq_len"))
    seed = int(opts.get("seed", "seed"))
    threads = int(opts.get("threads", "threads"))
    calib = calibration.sample_calibration(tokens, n, seq_len, seed)
    summaries = calibration.collect_summaries(model, calib, threads=threads)
    prov = {"calibration_digest": None, "n_samples": n, "calib_seq_len": seq_len,
            "seed": seed}
    return summaries, prov


def cmd_calibrate(opts: Options) -> int:
    args = opts.args
    _require(args, "model", "corpus", "out")
    model = checkpoint.load_checkpoint(args.model)
    tokens, vocab = corpus.load_corpus(args.corpus)
    if vocab != model.config.vocab_size:
        raise InputError(f"corpus vocab {vocab} != model vocab {model.config.vocab_size}")
    n = int(opts.get("samples", "calibration", "n_samples"))
    seq_len = int(opts.get("calib_seq_len", "calibration", "seq_len"))
    seed = int(opts.get("seed", "seed"))
    threads = int(opts.get("threads", "threads"))
    calib = calibration.sample_calibration(tokens, n, seq_len, seed)
    summaries = calibration.collect_summaries(model, calib, threads=threads)
    calibration.save_summary(summaries, args.out, provenance={
        "model_digest": checkpoint.dir_digest(args.model),
        "n_samples": n, "seq_len": seq_len, "seed": seed})
    print(f"calibrate: {n} sequences x {seq_len} tokens -> {args.out}")
    return 0


def _plan_from_scores(opts: Options, model, summaries, prov) -> pruner.SparsityPlan:
    gamma = _resolve_gamma(opts)
    alpha = float(opts.get("alpha", "alpha"))
    metric = str(opts.get("metric", "metric"))
    fine_method = str(opts.get("fine", "fine"))
    alloc = str(opts.get("alloc", "alloc"))
    multiple = int(opts.get("multiple", "multiple"))
    min_keep = float(opts.get("min_keep", "min_keep"))
    if alloc not in ALLOC_MODES:
        raise ConfigError(f"unknown alloc mode {alloc!r}; pick from {ALLOC_MODES}")

    dims_o = [int(f) for f in model.config.d_ff_per_block]
    scores = importance.score_blocks(summaries, metric, alpha)
    fine = evaluation.fine_scores_for(fine_method, model, summaries)
    if alloc == "cfsp":
        budget = importance.allocate_retention(scores.normalized, gamma, min_keep)
        keep = budget.keep_fraction
    elif alloc == "uniform":
        keep = np.full(len(dims_o), gamma)
    else:  # global-sort
        total_keep = int(round(gamma * sum(dims_o)))
        counts = importance.global_sort_allocation(fine, total_keep)
        keep = np.asarray(counts, dtype=np.float64) / np.asarray(dims_o, dtype=np.float64)
    dim_f = importance.adjust_dimensions(keep, dims_o, multiple)
    provenance = {
        "method": fine_method, "alloc": alloc, "gamma": gamma, "alpha": alpha,
        "metric": metric, "multiple": multiple, "min_keep": min_keep,
        "normalized_scores": [float(s) for s in scores.normalized],
        "raw_scores": [float(s) for s in scores.raw],
        **prov,
    }
    return pruner.build_plan(fine, dim_f, provenance=provenance)


def cmd_prune(opts: Options) -> int:
    args = opts.args
    _require(args, "model", "out")
    model = checkpoint.load_checkpoint(args.model)
    summaries, prov = _summaries_for(opts, model)
    plan = _plan_from_scores(opts, model, summaries, prov)
    pruned = pruner.apply_plan(model, plan)

    os.makedirs(args.out, exist_ok=True)
    checkpoint.save_checkpoint(pruned, os.path.join(args.out, "model"))
    pruner.save_plan(plan, os.path.join(args.out, "plan.json"))
    text = pruner.plan_summary_text(plan, model.config.d_ff_per_block,
                                    gamma=plan.provenance["gamma"])
    with open(os.path.join(args.out, "prune_summary.txt"), "w", encoding="utf-8") as fh:
        fh.write(text + "\n")
    print(text)
    print(f"prune: wrote {os.path.join(args.out, 'model')} and plan.json")
    return 0


def cmd_verify(opts: Options) -> int:
    args = opts.args
    _require(args, "model", "pruned", "plan")
    dense = checkpoint.load_checkpoint(args.model)
    pruned = checkpoint.load_checkpoint(args.pruned)
    plan = pruner.load_plan(args.plan)
    tol = float(opts.get("tol", "verify", "tol"))
    n_seq = int(opts.get("sequences", "verify", "sequences"))
    seq_len = int(opts.get("seq_len", "verify", "seq_len"))
    seed = int(opts.get("seed", "seed"))
    rng = np.random.default_rng(seed)
    seqs = [rng.integers(0, dense.config.vocab_size, size=seq_len, dtype=np.uint32)
            for _ in range(n_seq)]
    report = pruner.verify_equivalence(dense, plan, pruned, seqs, tol)
    status = "PASS" if report.passed else "FAIL"
    print(f"verify: max_abs_diff={report.max_abs_diff:.3e} tol={tol:.1e} "
          f"sequences={n_seq} {status}")
    if not report.passed:
        print(f"error[E_VALIDATION] pruned model diverges from masked dense model "
              f"({report.max_abs_diff:.3e} > {tol:.1e})", file=sys.stderr)
        return 4
    return 0


def cmd_recover(opts: Options) -> int:
    args = opts.args
    _require(args, "model", "corpus", "out")
    model = checkpoint.load_checkpoint(args.model)
    tokens, vocab = corpus.load_corpus(args.corpus)
    if vocab != model.config.vocab_size:
        raise InputError(f"corpus vocab {vocab} != model vocab {model.config.vocab_size}")

    if getattr(args, "plan", None):
        plan = pruner.load_plan(args.plan)
        norm = plan.provenance.get("normalized_scores")
        if not norm:
            raise ConfigError("plan.json carries no normalized_scores; pass --summary instead")
        normalized = np.asarray(norm, dtype=np.float64)
    else:
        summaries, _ = _summaries_for(opts, model)
        alpha = float(opts.get("alpha", "alpha"))
        metric = str(opts.get("metric", "metric"))
        normalized = importance.score_blocks(summaries, metric, alpha).normalized

    rbar = float(opts.get("rbar", "recovery", "rbar"))
    steps = int(opts.get("steps", "recovery", "steps"))
    lr = float(opts.get("lr", "recovery", "lr"))
    batch = int(opts.get("batch", "recovery", "batch"))
    seq_len = int(opts.get("train_seq_len", "recovery", "seq_len"))
    seed = int(opts.get("seed", "seed"))

    alloc = recovery.allocate_ranks(normalized, rbar)
    adapted = recovery.attach_adapters(model, alloc.ranks, seed=seed)
    train_cfg = recovery.TrainConfig(steps=steps, batch_size=batch, seq_len=seq_len,
                                     learning_rate=lr, seed=seed, r_bar=rbar)
    result = recovery.train(adapted, tokens, train_cfg)

    os.makedirs(args.out, exist_ok=True)
    checkpoint.write_tensor_dir(
        os.path.join(args.out, "adapters"), recovery.adapter_tensors(adapted),
        {"adapter_meta": recovery.adapter_metadata(adapted),
         "scores_digest": alloc.scores_digest})
    with open(os.path.join(args.out, "loss.csv"), "w", encoding="utf-8") as fh:
        fh.write("step,loss\n")
        for i, loss in enumerate(result.losses):
            fh.write(f"{i},{repr(loss)}\n")
    merged = recovery.merge_adapters(adapted)
    checkpoint.save_checkpoint(merged, os.path.join(args.out, "model"))
    print(f"recover: ranks={alloc.ranks} loss {result.losses[0]:.4f} -> "
          f"{result.losses[-1]:.4f} over {steps} steps")
    return 0


def cmd_eval(opts: Options) -> int:
    args = opts.args
    _require(args, "model")
    entries = [("dense", args.model)]
    for i, path in enumerate(args.pruned or []):
        entries.append((f"pruned{i}" if len(args.pruned) > 1 else "pruned", path))
    models = []
    for label, path in entries:
        m = checkpoint.load_checkpoint(path)
        models.append((label, m, checkpoint.checkpoint_bytes(path)))
    tokens = None
    if getattr(args, "corpus", None):
        tokens, vocab = corpus.load_corpus(args.corpus)
        if vocab != models[0][1].config.vocab_size:
            raise InputError(f"corpus vocab {vocab} != model vocab "
                             f"{models[0][1].config.vocab_size}")
    seq_len = int(opts.get("seq_len", "eval", "seq_len"))
    reps = int(opts.get("reps", "eval", "reps"))
    warmup = int(opts.get("warmup", "eval", "warmup"))
    seed = int(opts.get("seed", "seed"))
    report = evaluation.efficiency_report(models, tokens, seq_len, reps=reps,
                                          warmup=warmup, seed=seed)
    print(report.to_text())
    if getattr(args, "out", None):
        if os.path.dirname(args.out):
            os.makedirs(os.path.dirname(args.out), exist_ok=True)
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(report.to_csv())
    return 0


def cmd_bench(opts: Options) -> int:
    args = opts.args
    _require(args, "model")
    model = checkpoint.load_checkpoint(args.model)
    seq_len = int(opts.get("seq_len", "eval", "seq_len"))
    reps = int(opts.get("reps", "eval", "reps"))
    warmup = int(opts.get("warmup", "eval", "warmup"))
    seed = int(opts.get("seed", "seed"))
    stats = evaluation.benchmark_latency(model, seq_len, reps=max(3, reps),
                                         warmup=warmup, seed=seed)
    print(f"bench: seq_len={seq_len} reps={stats.reps} median={stats.median_ms:.3f}ms "
          f"p10={stats.p10_ms:.3f}ms p90={stats.p90_ms:.3f}ms")
    return 0


def _parse_variants(expr: str) -> list[tuple[str, str]]:
    if expr == "all":
        return evaluation.all_variants()
    out = []
    for item in expr.split(","):
        item = item.strip()
        if "+" not in item:
            raise ConfigError(f"variant {item!r} must look like coarse+fine")
        coarse, fine = item.split("+", 1)
        if coarse not in evaluation.COARSE_VARIANTS:
            raise ConfigError(f"unknown coarse metric {coarse!r}")
        if fine not in evaluation.FINE_VARIANTS:
            raise ConfigError(f"unknown fine method {fine!r}")
        out.append((coarse, fine))
    return out


def cmd_ablate(opts: Options) -> int:
    args = opts.args
    _require(args, "model", "corpus")
    model = checkpoint.load_checkpoint(args.model)
    summaries, _ = _summaries_for(opts, model)
    tokens, vocab = corpus.load_corpus(args.corpus)
    if vocab != model.config.vocab_size:
        raise InputError(f"corpus vocab {vocab} != model vocab {model.config.vocab_size}")
    gamma = _resolve_gamma(opts)
    alpha = float(opts.get("alpha", "alpha"))
    multiple = int(opts.get("multiple", "multiple"))
    min_keep = float(opts.get("min_keep", "min_keep"))
    seq_len = int(opts.get("seq_len", "eval", "seq_len"))
    seed = int(opts.get("seed", "seed"))
    variants = _parse_variants(str(opts.get("variants", default="all") or "all"))
    table = evaluation.ablation_run(model, summaries, variants, gamma, tokens, seq_len,
                                    alpha=alpha, multiple=multiple, min_keep=min_keep,
                                    verify_seed=seed)
    print(table.to_text())
    if getattr(args, "out", None):
        if os.path.dirname(args.out):
            os.makedirs(os.path.dirname(args.out), exist_ok=True)
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(table.to_csv())
    if getattr(args, "plot_out", None):
        with open(args.plot_out, "w", encoding="utf-8") as fh:
            fh.write(table.to_plot_csv())
    if not all(r.verify_passed for r in table.rows):
        print("error[E_VALIDATION] one or more variants failed equivalence verification",
              file=sys.stderr)
        return 4
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ffnprune",
        description="Structured FFN-channel pruning with activation-guided "
                    "budgets and low-rank recovery")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--model", help="model checkpoint directory")
        p.add_argument("--corpus", help="token corpus directory")
        p.add_argument("--out", help="output path")
        p.add_argument("--config", help="JSON config file; flags override it")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)

    p = sub.add_parser("calibrate", help="one-pass activation statistics")
    common(p)
    p.add_argument("--samples", type=int, help="number of calibration sequences")
    p.add_argument("--calib-seq-len", type=int, help="tokens per calibration sequence")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("prune", help="plan and slice a pruned checkpoint")
    common(p)
    p.add_argument("--summary", help="summary directory from `calibrate`")
    p.add_argument("--gamma", type=float, help="global retention fraction in (0,1]")
    p.add_argument("--sparsity", type=float,
                   help="sugar for --gamma: retention = 1 - sparsity")
    p.add_argument("--alpha", type=float, help="sigmoid steepness (default 1)")
    p.add_argument("--metric", choices=list(importance.COARSE_METRICS))
    p.add_argument("--fine", choices=list(evaluation.FINE_VARIANTS))
    p.add_argument("--alloc", choices=list(ALLOC_MODES))
    p.add_argument("--multiple", type=int, help="round widths to this multiple (default 128)")
    p.add_argument("--min-keep", dest="min_keep", type=float)
    p.add_argument("--samples", type=int)
    p.add_argument("--calib-seq-len", type=int)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("verify", help="masked-dense vs pruned logit parity")
    common(p)
    p.add_argument("--pruned", help="pruned checkpoint directory")
    p.add_argument("--plan", help="plan.json path")
    p.add_argument("--tol", type=float)
    p.add_argument("--sequences", type=int)
    p.add_argument("--seq-len", dest="seq_len", type=int)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("recover", help="importance-guided low-rank fine-tuning")
    common(p)
    p.add_argument("--plan", help="plan.json carrying normalized scores")
    p.add_argument("--summary", help="summary directory (alternative to --plan)")
    p.add_argument("--metric", choices=list(importance.COARSE_METRICS))
    p.add_argument("--alpha", type=float)
    p.add_argument("--rbar", type=float, help="average adapter rank budget (default 8)")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float, help="learning rate (default 2e-4)")
    p.add_argument("--batch", type=int)
    p.add_argument("--train-seq-len", dest="train_seq_len", type=int)
    p.set_defaults(func=cmd_recover)

    p = sub.add_parser("eval", help="efficiency and perplexity report")
    common(p)
    p.add_argument("--pruned", action="append", help="pruned/recovered checkpoint (repeatable)")
    p.add_argument("--seq-len", dest="seq_len", type=int)
    p.add_argument("--reps", type=int, help="latency repetitions; 0 skips latency")
    p.add_argument("--warmup", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="forward-pass latency of one model")
    common(p)
    p.add_argument("--seq-len", dest="seq_len", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--warmup", type=int)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="coarse x fine variant comparison table")
    common(p)
    p.add_argument("--summary", help="summary directory from `calibrate`")
    p.add_argument("--gamma", type=float)
    p.add_argument("--sparsity", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--multiple", type=int)
    p.add_argument("--min-keep", dest="min_keep", type=float)
    p.add_argument("--variants", help="'all' or comma list like angular+cfsp,uniform+wanda")
    p.add_argument("--plot-out", dest="plot_out",
                   help="optional two-column variant,ppl CSV for plotting")
    p.add_argument("--samples", type=int)
    p.add_argument("--calib-seq-len", type=int)
    p.add_argument("--seq-len", dest="seq_len", type=int)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(Options(args)) or 0
    except ConfigError as exc:
        print(f"error[{exc.code}] {exc}", file=sys.stderr)
        return 2
    except InputError as exc:
        print(f"error[{exc.code}] {exc}", file=sys.stderr)
        return 3
    except ValidationError as exc:
        print(f"error[{exc.code}] {exc}", file=sys.stderr)
        return 4
    except FFNPruneError as exc:
        print(f"error[{exc.code}] {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
