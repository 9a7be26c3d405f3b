"""
Following tokens through the stack
==================================

A small random model, one prompt, and the inertia policy at a few thresholds.
We look at where each token leaves, what the score looked like when it did,
and what the key/value cache holds afterwards: real rows for layers a token
actually ran, synthesized rows for the ones it skipped.

Run from the repository root: ``python3 demos/02_exit_walkthrough.py``.
"""

import numpy as np

from adept.exit_policy import ExitPolicyConfig, PolicyKind
from adept.hsm import init_hsm
from adept.model import ModelConfig, Provenance, init_model, tokenize, vanilla_prefill
from adept.runtime import prefill

cfg = ModelConfig(n_layers=6, d_hidden=32, d_qkv=32, n_heads=4, max_seq=64)
model = init_model(cfg, seed=0)
hsm = init_hsm(cfg.d_hidden, seed=1)
ids = tokenize("the cat sat on the mat and looked out")
print(f"{len(ids)} tokens, {cfg.n_layers} layers")

# %%
# Random weights put consecutive layer states close together, so the
# interesting thresholds sit just under 1.
for delta in (0.999, 0.995, 0.99):
    policy = ExitPolicyConfig(PolicyKind.INERTIA_GLOBAL, delta=delta)
    run = prefill(model, hsm, policy, ids)
    print(f"delta={delta}: histogram {run.histogram(cfg.n_layers)}")

# %%
# Per-token detail at one threshold. Tokens that reach the last layer carry
# no score: nothing is evaluated there because exiting would skip nothing.
policy = ExitPolicyConfig(PolicyKind.INERTIA_GLOBAL, delta=0.99)
run = prefill(model, hsm, policy, ids)
for rec, tok in zip(run.records, ids):
    score = "   -   " if rec.exit_score is None else f"{rec.exit_score:.5f}"
    print(f"  {chr(tok)!r:5s} pos {rec.token_index:2d}  layer {rec.exit_layer}  score {score}")

# %%
# Cache provenance, one row per layer. R = computed, S = synthesized from the
# mapped state. Every slot up to the prompt length is filled.
marks = {Provenance.REAL: "R", Provenance.SYNTHESIZED: "S", Provenance.EMPTY: "."}
for li in range(cfg.n_layers):
    row = "".join(marks[Provenance(p)] for p in run.cache.provenance[li, : len(ids)])
    print(f"  layer {li + 1}: {row}")
print(f"real {run.cache.count(Provenance.REAL)}, synthesized {run.cache.count(Provenance.SYNTHESIZED)}")

# %%
# Where did the compute go, and how far are the early-exit logits from a full pass?
base = vanilla_prefill(model, ids)
saved = 1 - run.ledger.total_excluding(["hsm"]) / base.ledger.total
print(f"FLOPs saved (mapper excluded): {saved:.1%}; mapper overhead {run.ledger.hsm} FLOPs")
agree = np.mean(np.argmax(run.logits, -1) == np.argmax(base.logits, -1))
print(f"greedy next-byte agreement with the full pass: {agree:.0%}")
