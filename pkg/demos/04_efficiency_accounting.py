"""Parameter and MAC accounting for reference shapes, plus measured latency.

The shape manifests under demos/shapes/ carry configs only (no weights), so
the accounting path can reproduce the footprint of real model families:
an 8B-class decoder with grouped k/v shapes comes out at 8.03B parameters
dense and 5.21B at half FFN width, with block compute of 3.64T vs 2.19T
MACs at a 512-token window. At desk scale the same arithmetic is checked
against an instrumented kernel counter, and wall-clock latency shows the
pruned toy strictly faster than the dense one.
"""

from pathlib import Path

import numpy as np

from ffnprune import checkpoint, evaluation, pruner, tensor, toy
from ffnprune.model import count_macs, count_params, forward

SHAPES = Path(__file__).resolve().parent / "shapes"


def describe(name):
    cfg = checkpoint.load_config(str(SHAPES / name))
    p = count_params(cfg)
    m = count_macs(cfg, 512)
    blocks = m["mha_linear"] + m["mha_attention"] + m["ffn"]
    print(f"{name:>22}: params {p['total'] / 1e9:6.2f}B  "
          f"(mha {p['mha'] / 1e9:.2f}B, ffn {p['ffn'] / 1e9:.2f}B)  "
          f"block MACs@512 {blocks / 1e12:.2f}T")


for shape in ("llama3_8b", "llama3_8b_pruned50", "llama2_7b"):
    describe(shape)

# --- desk scale: analytic counts equal the instrumented kernel counter --------
model = toy.random_checkpoint(seed=7)
with tensor.mac_counter() as c:
    forward(model, np.arange(40) % 512)
print(f"\ntoy count_macs(seq=40) = {count_macs(model, 40)['total']:,}; "
      f"instrumented counter = {c.macs:,}")

# --- latency: halving every FFN width beats the dense model -------------------
plan = pruner.build_plan(
    [np.arange(f, dtype=np.float64) for f in model.config.d_ff_per_block],
    [f // 2 for f in model.config.d_ff_per_block])
pruned = pruner.apply_plan(model, plan)
report = evaluation.efficiency_report(
    [("dense", model, 0), ("pruned-50", pruned, 0)],
    corpus_tokens=None, seq_len=128, reps=15, warmup=3)
print()
print(report.to_text())
