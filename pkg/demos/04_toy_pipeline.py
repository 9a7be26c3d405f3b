"""
The toy pipeline end to end
===========================

Train a mapper on the toy corpus, calibrate thresholds, evaluate against a
truncation baseline and compare exit strategies. Everything goes through the
command-line entry point, so each step can be repeated by hand with
``adept <command> --config ...``. Needs ``demos/01_toy_data.py`` to have run.
Takes a few minutes on a laptop CPU.

Run from the repository root: ``python3 demos/04_toy_pipeline.py``.
"""

import json
from pathlib import Path

import yaml

from adept.cli import main

ROOT = Path(__file__).resolve().parents[1]
RUNS = ROOT / "runs" / "demo"
toy = ROOT / "configs" / "toy.yaml"

# %%
# Training freezes the base and fits only the mapper, on exits collected at a
# threshold chosen so that about a fifth of the compute would be skipped.
assert main(["train", "--config", str(toy), "--out", str(RUNS / "train")]) == 0
rep = json.loads((RUNS / "train" / "report.json").read_text())
m = rep["metrics"]
print(f"training threshold {m['delta_train']:.4f}, loss {m['history'][0]['train_loss']:.3f} "
      f"-> {m['history'][-1]['train_loss']:.3f}")

# %%
# Later steps read the trained mapper from a config that points at it.
cfg = yaml.safe_load(toy.read_text())
for split in ("train", "val", "test"):
    cfg["corpus"][split] = str((toy.parent / cfg["corpus"][split]).resolve())
cfg["hsm"] = {"checkpoint": str(RUNS / "train" / "hsm.adpt")}
eval_cfg = RUNS / "eval.yaml"
eval_cfg.write_text(yaml.safe_dump(cfg))

assert main(["calibrate", "--config", str(eval_cfg), "--out", str(RUNS / "calibrate")]) == 0
cal = json.loads((RUNS / "calibrate" / "report.json").read_text())["metrics"]
for row in cal["rows"]:
    print(f"target {row['target']:.0%}: delta {row['delta']:.5f}, got {row['achieved']:.2%} ({row['status']})")

# %%
# At a matched 10% reduction: mapped exits against raw truncation.
assert main(["eval", "--config", str(eval_cfg), "--out", str(RUNS / "eval")]) == 0
ev = json.loads((RUNS / "eval" / "report.json").read_text())["metrics"]
print(f"full model perplexity    {ev['vanilla']['perplexity']:.3f}")
print(f"mapped exits             {ev['run']['perplexity']:.3f} at {ev['run']['reduction']:.2%}")
print(f"truncation               {ev['truncation']['perplexity']:.3f} at {ev['truncation']['reduction']:.2%}")
print("delta sweep:")
for row in ev["sweep"]:
    print(f"  {row['delta']:.4f}  reduction {row['reduction']:7.2%}  perplexity {row['perplexity']:.3f}")

# %%
# Exit strategies at the same target. All-at-once waits for the last prompt
# token; the token-level policies let each position leave on its own.
assert main(["ablate", "--config", str(eval_cfg), "--out", str(RUNS / "ablate")]) == 0
print((RUNS / "ablate" / "ablation.csv").read_text())
