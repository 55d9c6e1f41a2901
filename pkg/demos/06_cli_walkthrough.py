"""The same pipeline as demo 01, driven entirely through the CLI.

Generates a toy checkpoint and corpus, then shells out to the `ffnprune`
console script: calibrate -> prune -> verify -> recover -> eval -> ablate.
Every artifact lands under ./cli_demo_out (safe to delete).
"""

import shutil
import subprocess
import sys
from pathlib import Path

from ffnprune import checkpoint, corpus, toy

OUT = Path("cli_demo_out")
if OUT.exists():
    shutil.rmtree(OUT)
OUT.mkdir()

checkpoint.save_checkpoint(toy.recovery_demo_checkpoint(seed=7), str(OUT / "model"))
corpus.save_corpus(toy.copy_task_corpus(30_000, 512, seed=9), 512, str(OUT / "corpus"))


def run(*args):
    cmd = [sys.executable, "-m", "ffnprune.cli", *map(str, args)]
    print("\n$ ffnprune " + " ".join(map(str, args)))
    subprocess.run(cmd, check=True)


common = ["--model", OUT / "model", "--corpus", OUT / "corpus", "--seed", "3"]
run("calibrate", *common, "--out", OUT / "summary",
    "--samples", "16", "--calib-seq-len", "64")
run("prune", "--model", OUT / "model", "--summary", OUT / "summary",
    "--out", OUT / "pruned", "--gamma", "0.5", "--multiple", "8", "--seed", "3")
run("verify", "--model", OUT / "model", "--pruned", OUT / "pruned" / "model",
    "--plan", OUT / "pruned" / "plan.json", "--seed", "3")
run("recover", "--model", OUT / "pruned" / "model", "--corpus", OUT / "corpus",
    "--plan", OUT / "pruned" / "plan.json", "--out", OUT / "recovered",
    "--steps", "60", "--batch", "8", "--train-seq-len", "64", "--lr", "1e-2",
    "--seed", "3")
run("eval", "--model", OUT / "model", "--pruned", OUT / "pruned" / "model",
    "--pruned", OUT / "recovered" / "model", "--corpus", OUT / "corpus",
    "--seq-len", "64", "--reps", "5", "--out", OUT / "report.csv")
run("ablate", "--model", OUT / "model", "--summary", OUT / "summary",
    "--corpus", OUT / "corpus", "--gamma", "0.5", "--multiple", "8",
    "--variants", "all", "--seq-len", "64", "--out", OUT / "ablation.csv")

print(f"\nartifacts in {OUT}/")
