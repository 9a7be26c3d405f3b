"""
Where the FLOPs go
==================

Closed-form FLOP counts at GPT2-scale dimensions, without running anything.
A multiply-accumulate counts as two FLOPs and elementwise work is free. The
reduction rate leaves the mapper out; its cost is printed beside it.

Run from the repository root: ``python3 demos/03_cost_accounting.py``.
"""

from adept.cost_model import (
    ParamKind,
    count_parameters,
    forced_exit_ledger,
    hsm_flops,
    kv_synth_flops,
    late_exit_scenario,
    layer_flops,
    reduction_rate,
    vanilla_prefill_ledger,
)
from adept.model import ModelConfig

xl = ModelConfig(n_layers=48, d_hidden=1600, d_qkv=1600, n_heads=25, vocab_size=50257, max_seq=1024)
T = 1024

# %%
# One layer at the first and last position. Only attention grows with the
# position; the projections and the feed-forward block are flat.
for p in (0, T - 1):
    parts = layer_flops(xl, T, p)
    print(f"position {p:4d}: " + ", ".join(f"{k} {v / 1e6:.1f}M" for k, v in parts.items()))

van = vanilla_prefill_ledger(xl, T)
print(f"\nfull prefill of {T} tokens: {van.total / 1e12:.2f} TFLOPs")
for k, v in van.to_dict().items():
    if v:
        print(f"  {k:12s} {v / van.total:6.1%}")

# %%
# Every token leaving at layer 38 of 48. Synthesizing keys and values for the
# ten skipped layers is what keeps later tokens' attention intact, and it is
# not free.
s = late_exit_scenario(xl, T, exit_layer=38)
print(f"\nexit at 38/48: {s['reduction_with_kv']:.2%} saved with KV synthesis, "
      f"{s['reduction_without_kv']:.2%} without (gap {s['gap'] * 100:.2f} points)")
print(f"KV projection per skipped layer: {kv_synth_flops(xl) / 1e6:.2f}M "
      f"= {s['kv_share_of_layer']:.1%} of a mean layer")
print(f"mapper per exiting token: {hsm_flops(xl.d_hidden) / 1e6:.0f}M; "
      f"counting it, the saving drops to {s['reduction_with_kv_and_hsm']:.2%}")

# %%
# The same sweep over exit layers. Below some depth the saving stops paying
# for the mapper.
print("\nexit layer   saved   saved incl. mapper")
for e in (8, 16, 24, 32, 40, 46):
    led = forced_exit_ledger(xl, T, e)
    print(f"  {e:9d}   {reduction_rate(led, van):6.1%}   {reduction_rate(led, van, include_hsm=True):6.1%}")

# %%
# Parameter budgets: one shared mapper against a separate head per layer.
print()
for d in (768, 1600):
    cfg = ModelConfig(n_layers=48, d_hidden=d, d_qkv=d, n_heads=16 if d == 768 else 25, vocab_size=50257)
    m = count_parameters(ParamKind.HSM, cfg)
    h = count_parameters(ParamKind.PER_LAYER_HEADS, cfg)
    print(f"D={d:4d}: mapper {m / 1e6:6.1f}M params, per-layer heads {h / 1e6:7.1f}M")
