"""Key/value entries for the layers an exited token skips.

Each skipped layer ``r`` gets its keys and values straight from the mapped
state through that layer's own KV projection, so no entry depends on any
other skipped layer. Like the real path, the target layer's input RMS norm
and its k/v biases are applied.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cost_model import CostLedger, kv_synth_flops
from .errors import ShapeError
from .model import KVCache, Model, Provenance, rms_norm


@dataclass(frozen=True)
class SynthesizedKV:
    token_index: int
    layer: int  # 1-based
    key: np.ndarray
    value: np.ndarray
    source: str = "hsm"


def synthesize_kv(
    s_mapped: np.ndarray, w_kv: np.ndarray, b_kv: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """``(key || value) = s_mapped @ w_kv (+ b_kv)``, split into two halves."""
    s_mapped = np.asarray(s_mapped, dtype=np.float64)
    if w_kv.ndim != 2 or w_kv.shape[1] % 2 or s_mapped.shape[-1] != w_kv.shape[0]:
        raise ShapeError(f"cannot project width {s_mapped.shape[-1]} through {w_kv.shape}")
    kv = s_mapped @ w_kv
    if b_kv is not None:
        kv = kv + b_kv
    half = w_kv.shape[1] // 2
    return kv[..., :half], kv[..., half:]


def synthesize_all(
    s_mapped: np.ndarray,
    exit_layer: int,
    model: Model,
    token_index: int = 0,
    *,
    reverse: bool = False,
    source: str = "hsm",
) -> list[SynthesizedKV]:
    """Entries for layers ``exit_layer + 1 .. N`` (1-based). Empty when nothing is skipped."""
    n = model.config.n_layers
    if not 1 <= exit_layer <= n:
        raise ValueError(f"exit layer {exit_layer} outside 1..{n}")
    order = range(n, exit_layer, -1) if reverse else range(exit_layer + 1, n + 1)
    out = []
    for r in order:
        layer = model.layers[r - 1]
        k, v = synthesize_kv(rms_norm(s_mapped, layer.ln1_g), layer.w_kv, layer.b_kv)
        out.append(SynthesizedKV(token_index, r, k, v, source))
    out.sort(key=lambda e: e.layer)
    return out


def insert(cache: KVCache, entries: Sequence[SynthesizedKV], ledger: CostLedger | None = None, config=None) -> None:
    for e in entries:
        cache.write(e.layer - 1, e.token_index, e.key, e.value, Provenance.SYNTHESIZED)
    if ledger is not None and entries:
        ledger.add("kv_synth", kv_synth_flops(config) * len(entries))


def synthesize_rows(
    model: Model,
    s_mapped: np.ndarray,
    positions: np.ndarray,
    exit_layer: int,
    cache: KVCache,
    ledger: CostLedger | None = None,
) -> int:
    """Batched form used by the scheduler: write SYNTHESIZED rows for every skipped layer.

    Returns the number of (layer, token) entries written.
    """
    n = model.config.n_layers
    positions = np.asarray(positions, dtype=np.int64)
    written = 0
    for r in range(exit_layer + 1, n + 1):
        layer = model.layers[r - 1]
        x = rms_norm(s_mapped, layer.ln1_g)
        k, v = x @ layer.w_k + layer.b_k, x @ layer.w_v + layer.b_v
        cache.write(r - 1, positions, k, v, Provenance.SYNTHESIZED)
        written += len(positions)
    if ledger is not None and written:
        ledger.add("kv_synth", kv_synth_flops(model.config) * written)
    return written
