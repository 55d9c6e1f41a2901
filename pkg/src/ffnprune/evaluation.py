"""Perplexity, latency benchmarking, efficiency accounting, and the ablation harness."""

from __future__ import annotations

import platform
import time
from dataclasses import dataclass, field

import numpy as np

from . import importance, pruner
from .calibration import ActivationSummary
from .errors import ConfigError, InputError
from .model import ModelCheckpoint, count_macs, count_params, forward
from .tensor import F64

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover - optional, only narrows benchmark noise
    import contextlib

    def threadpool_limits(limits=None):
        return contextlib.nullcontext()


def _window_cross_entropy(model: ModelCheckpoint, window: np.ndarray) -> tuple[float, int]:
    logits = forward(model, window).logits.astype(F64, copy=False)
    z = logits[:-1]
    targets = np.asarray(window[1:], dtype=np.int64)
    zmax = np.max(z, axis=1, keepdims=True)
    lse = (zmax + np.log(np.sum(np.exp(z - zmax), axis=1, keepdims=True))).ravel()
    picked = z[np.arange(z.shape[0]), targets]
    return float(np.sum(lse - picked)), z.shape[0]


def perplexity(model: ModelCheckpoint, corpus_tokens: np.ndarray, seq_len: int) -> float:
    """exp(mean next-token cross-entropy in nats) over non-overlapping windows."""
    if seq_len < 2:
        raise ConfigError(f"seq_len must be >= 2 for a next-token loss, got {seq_len}")
    n_windows = corpus_tokens.shape[0] // seq_len
    if n_windows < 1:
        raise InputError(
            f"corpus has {corpus_tokens.shape[0]} tokens, fewer than one window of {seq_len}")
    total_nll = 0.0
    total_tok = 0
    for w in range(n_windows):
        nll, n = _window_cross_entropy(model, corpus_tokens[w * seq_len:(w + 1) * seq_len])
        total_nll += nll
        total_tok += n
    return float(np.exp(total_nll / total_tok))


@dataclass
class LatencyStats:
    median_ms: float
    p10_ms: float
    p90_ms: float
    reps: int


def benchmark_latency(model: ModelCheckpoint, seq_len: int, reps: int = 20,
                      warmup: int = 3, seed: int = 0) -> LatencyStats:
    """Wall-clock single-sequence forward latency; order statistics, never a mean."""
    if reps < 3:
        raise ConfigError(f"reps must be >= 3, got {reps}")
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, model.config.vocab_size, size=seq_len, dtype=np.uint32)
    samples = []
    with threadpool_limits(limits=1):
        for _ in range(warmup):
            forward(model, tokens)
        for _ in range(reps):
            t0 = time.perf_counter()
            forward(model, tokens)
            samples.append((time.perf_counter() - t0) * 1e3)
    arr = np.sort(np.asarray(samples))
    return LatencyStats(
        median_ms=float(np.median(arr)),
        p10_ms=float(np.quantile(arr, 0.10)),
        p90_ms=float(np.quantile(arr, 0.90)),
        reps=reps)


@dataclass
class EvalRow:
    label: str
    params: int
    checkpoint_bytes: int
    macs: int
    median_ms: float | None
    speedup: float | None
    ppl: float | None


@dataclass
class EvalReport:
    rows: list[EvalRow]
    seq_len: int
    reps: int
    seed: int
    host: str = field(default_factory=platform.machine)

    COLUMNS = ("model", "params", "ckpt_bytes", "macs", "median_ms", "speedup", "ppl")

    def to_csv(self) -> str:
        lines = [",".join(self.COLUMNS)]
        for r in self.rows:
            lines.append(",".join([
                r.label, str(r.params), str(r.checkpoint_bytes), str(r.macs),
                "" if r.median_ms is None else repr(r.median_ms),
                "" if r.speedup is None else repr(r.speedup),
                "" if r.ppl is None else repr(r.ppl),
            ]))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        rows = [[r.label, f"{r.params:,}", f"{r.checkpoint_bytes:,}", f"{r.macs:,}",
                 "-" if r.median_ms is None else f"{r.median_ms:.3f}",
                 "-" if r.speedup is None else f"{r.speedup:.2f}x",
                 "-" if r.ppl is None else f"{r.ppl:.4f}"] for r in self.rows]
        table = [list(self.COLUMNS)] + rows
        widths = [max(len(row[c]) for row in table) for c in range(len(self.COLUMNS))]
        lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
                 for row in table]
        meta = f"(seq_len={self.seq_len} reps={self.reps} seed={self.seed} host={self.host})"
        return "\n".join(lines + [meta])


def efficiency_report(models: list[tuple[str, ModelCheckpoint, int]],
                      corpus_tokens: np.ndarray | None, seq_len: int,
                      reps: int = 5, warmup: int = 2, seed: int = 0) -> EvalReport:
    """One row per (label, model, checkpoint_bytes); the first row is the
    dense baseline the speed-up column is measured against. reps=0 skips
    latency so the report is fully deterministic."""
    if not models:
        raise InputError("need at least one model to report on")
    rows = []
    base_ms = None
    for label, model, ckpt_bytes in models:
        stats = None
        if reps:
            stats = benchmark_latency(model, seq_len, reps=reps, warmup=warmup, seed=seed)
        ppl = None
        if corpus_tokens is not None:
            ppl = perplexity(model, corpus_tokens, seq_len)
        median = stats.median_ms if stats else None
        if base_ms is None and median is not None:
            base_ms = median
        rows.append(EvalRow(
            label=label,
            params=count_params(model)["total"],
            checkpoint_bytes=ckpt_bytes,
            macs=count_macs(model, seq_len)["total"],
            median_ms=median,
            speedup=None if median is None else base_ms / median,
            ppl=ppl))
    return EvalReport(rows=rows, seq_len=seq_len, reps=reps, seed=seed)


COARSE_VARIANTS = ("uniform", "euclidean", "cosine", "angular")
FINE_VARIANTS = ("cfsp", "wanda", "magnitude")


def fine_scores_for(method: str, model: ModelCheckpoint,
                    summaries: list[ActivationSummary]) -> list[np.ndarray]:
    """Per-block channel scores under the chosen fine-grained criterion."""
    if method not in FINE_VARIANTS:
        raise ConfigError(f"unknown fine method {method!r}; pick from {FINE_VARIANTS}")
    out = []
    for blk, summ in zip(model.blocks, summaries):
        if method == "cfsp":
            out.append(importance.fine_scores(blk, summ.channel_norms()).scores)
        elif method == "wanda":
            out.append(importance.wanda_scores(blk, summ.channel_norms(),
                                               summ.ffn_input_norms()))
        else:
            out.append(importance.magnitude_scores(blk))
    return out


@dataclass
class AblationRow:
    coarse: str
    fine: str
    label: str
    ppl: float
    verify_max_diff: float
    verify_passed: bool
    total_kept: int


@dataclass
class AblationTable:
    rows: list[AblationRow]

    def to_csv(self) -> str:
        lines = ["coarse,fine,label,ppl,verify_max_diff,verify_passed,total_kept"]
        for r in self.rows:
            lines.append(f"{r.coarse},{r.fine},{r.label},{repr(r.ppl)},"
                         f"{repr(r.verify_max_diff)},{int(r.verify_passed)},{r.total_kept}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        head = ["coarse", "fine", "label", "ppl", "max_diff", "verified", "kept"]
        rows = [[r.coarse, r.fine, r.label, f"{r.ppl:.4f}", f"{r.verify_max_diff:.2e}",
                 "yes" if r.verify_passed else "NO", str(r.total_kept)] for r in self.rows]
        table = [head] + rows
        widths = [max(len(row[c]) for row in table) for c in range(len(head))]
        return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
                         for row in table)

    def to_plot_csv(self) -> str:
        """Two-column variant/ppl data for external plotting."""
        lines = ["variant,ppl"]
        for r in self.rows:
            lines.append(f"{r.coarse}+{r.fine},{repr(r.ppl)}")
        return "\n".join(lines) + "\n"


def ablation_run(model: ModelCheckpoint, summaries: list[ActivationSummary],
                 variants: list[tuple[str, str]], gamma: float,
                 corpus_tokens: np.ndarray, seq_len: int, alpha: float = 1.0,
                 multiple: int = 8, min_keep: float = 0.05, verify_tol: float = 1e-4,
                 verify_seed: int = 0, n_verify: int = 4) -> AblationTable:
    """Prune under every requested (coarse, fine) pair and evaluate perplexity.

    Every variant's pruned model must pass the masked-equivalence check before
    it is evaluated. No ordering among variants is asserted anywhere.
    """
    dims_o = [int(f) for f in model.config.d_ff_per_block]
    rng = np.random.default_rng(verify_seed)
    test_seqs = [rng.integers(0, model.config.vocab_size, size=min(32, model.config.max_seq_len),
                              dtype=np.uint32) for _ in range(n_verify)]
    rows = []
    for coarse, fine_m in variants:
        scores = importance.score_blocks(summaries, coarse, alpha)
        budget = importance.allocate_retention(scores.normalized, gamma, min_keep)
        dim_f = importance.adjust_dimensions(budget.keep_fraction, dims_o, multiple)
        fine = fine_scores_for(fine_m, model, summaries)
        plan = pruner.build_plan(fine, dim_f, provenance={
            "method": fine_m, "metric": coarse, "gamma": gamma, "alpha": alpha,
            "multiple": multiple})
        pruned = pruner.apply_plan(model, plan)
        report = pruner.verify_equivalence(model, plan, pruned, test_seqs, verify_tol)
        label = "angular+cfsp (ours)" if (coarse, fine_m) == ("angular", "cfsp") \
            else f"{coarse}+{fine_m}"
        rows.append(AblationRow(
            coarse=coarse, fine=fine_m, label=label,
            ppl=perplexity(pruned, corpus_tokens, seq_len),
            verify_max_diff=report.max_abs_diff, verify_passed=report.passed,
            total_kept=sum(bp.dim_f for bp in plan.blocks)))
    return AblationTable(rows=rows)


def all_variants() -> list[tuple[str, str]]:
    return [(c, f) for c in COARSE_VARIANTS for f in FINE_VARIANTS]
