"""FLOP and parameter accounting.

FLOP convention (all counts are exact integers):

* one multiply-accumulate = 2 FLOPs;
* norms, softmax, activations, bias adds and residual adds are charged 0
  (per-element constant of zero), embedding lookups are free;
* the exit metric (one normalization plus one dot product) is charged
  ``5 * d_hidden`` per active token per evaluation;
* logit-based baseline metrics (patience, entropy) are charged one head
  projection per evaluation.

The instrumented :class:`CostLedger` filled by the runtime and the closed
forms in this module follow the same convention, so vanilla runs must agree
with zero tolerance.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Iterable, Sequence

from .errors import DivByZero

if TYPE_CHECKING:
    from .exit_policy import ExitRecord
    from .model import ModelConfig

CATEGORIES = (
    "qkv_proj",
    "attn_scores",
    "attn_values",
    "out_proj",
    "ffn",
    "kv_synth",
    "hsm",
    "exit_metric",
    "head",
    "embed",
)
DECODER_CATEGORIES = ("qkv_proj", "attn_scores", "attn_values", "out_proj", "ffn")
OVERHEAD_CATEGORIES = ("kv_synth", "hsm", "exit_metric")

EXIT_METRIC_FLOPS_PER_DIM = 5


@dataclass
class CostLedger:
    """Per-run FLOP counters, one integer per category."""

    qkv_proj: int = 0
    attn_scores: int = 0
    attn_values: int = 0
    out_proj: int = 0
    ffn: int = 0
    kv_synth: int = 0
    hsm: int = 0
    exit_metric: int = 0
    head: int = 0
    embed: int = 0

    def add(self, category: str, flops: int) -> None:
        flops = int(flops)
        if flops < 0:
            raise ValueError("ledger counters never decrease")
        setattr(self, category, getattr(self, category) + flops)

    def add_counts(self, counts: dict[str, int], times: int = 1) -> None:
        for k, v in counts.items():
            self.add(k, v * times)

    @property
    def total(self) -> int:
        return sum(getattr(self, c) for c in CATEGORIES)

    def total_excluding(self, categories: Iterable[str]) -> int:
        skip = set(categories)
        return sum(getattr(self, c) for c in CATEGORIES if c not in skip)

    def decoder_counts(self) -> dict[str, int]:
        return {c: getattr(self, c) for c in DECODER_CATEGORIES}

    def to_dict(self) -> dict[str, int]:
        return {c: int(getattr(self, c)) for c in CATEGORIES}

    def __add__(self, other: "CostLedger") -> "CostLedger":
        return CostLedger(**{c: getattr(self, c) + getattr(other, c) for c in CATEGORIES})

    def copy(self) -> "CostLedger":
        return dataclasses.replace(self)


def merge(ledgers: Iterable[CostLedger]) -> CostLedger:
    out = CostLedger()
    for led in ledgers:
        out = out + led
    return out


# --------------------------------------------------------------------------
# closed forms
# --------------------------------------------------------------------------


def layer_flops(config: "ModelConfig", seq_len: int, position: int) -> dict[str, int]:
    """Decoder FLOPs for one token at one layer, attending over ``position + 1`` slots."""
    if not 0 <= position < seq_len:
        raise ValueError("position must lie in [0, seq_len)")
    d, dq = config.d_hidden, config.d_qkv
    n_slots = position + 1
    return {
        "qkv_proj": 2 * 3 * d * dq,
        "attn_scores": 2 * n_slots * dq,
        "attn_values": 2 * n_slots * dq,
        "out_proj": 2 * dq * d,
        "ffn": 2 * 2 * config.ffn_mult * d * d,
    }


def attention_flops(config: "ModelConfig", n_slots: int) -> dict[str, int]:
    return {"attn_scores": 2 * n_slots * config.d_qkv, "attn_values": 2 * n_slots * config.d_qkv}


def projection_flops(config: "ModelConfig") -> dict[str, int]:
    """Position-independent part of :func:`layer_flops`."""
    d, dq = config.d_hidden, config.d_qkv
    return {
        "qkv_proj": 6 * d * dq,
        "out_proj": 2 * dq * d,
        "ffn": 4 * config.ffn_mult * d * d,
    }


def kv_synth_flops(config: "ModelConfig") -> int:
    """Key/value projection of one mapped state for one skipped layer."""
    return 2 * config.d_hidden * 2 * config.d_qkv


def head_flops(config: "ModelConfig") -> int:
    return 2 * config.d_hidden * config.vocab_size


def exit_metric_flops(d_hidden: int) -> int:
    return EXIT_METRIC_FLOPS_PER_DIM * d_hidden


def hsm_flops(d_hidden: int, variant: str = "conv") -> int:
    """FLOPs of one mapper forward pass (see :mod:`adept.hsm`)."""
    d = d_hidden
    fc1_in = 3 * d if variant == "reshape" else d
    linear = 2 * (fc1_in * 4 * d + 4 * d * 8 * d + 8 * d * 4 * d + 4 * d * d)
    conv = 2 * 9 * d if variant == "conv" else 0
    return linear + conv


def vanilla_prefill_ledger(config: "ModelConfig", seq_len: int, with_head: bool = True) -> CostLedger:
    """Closed-form ledger of a full-depth prefill over ``seq_len`` tokens."""
    led = CostLedger()
    for p in range(seq_len):
        led.add_counts(layer_flops(config, seq_len, p), times=config.n_layers)
    if with_head:
        led.add("head", head_flops(config) * seq_len)
    return led


def forced_exit_ledger(
    config: "ModelConfig",
    seq_len: int,
    exit_layer: int,
    *,
    with_kv: bool = True,
    with_hsm: bool = True,
    metric_evaluations: int | None = None,
    d_hsm_variant: str = "conv",
) -> CostLedger:
    """Closed-form ledger when every token leaves after ``exit_layer`` (1-based).

    ``metric_evaluations`` is the number of inertia evaluations per token; by
    default one evaluation at the exit layer (the forced-exit case where the
    first evaluated layer fires).
    """
    n = config.n_layers
    if not 1 <= exit_layer <= n:
        raise ValueError("exit_layer out of range")
    led = CostLedger()
    for p in range(seq_len):
        led.add_counts(layer_flops(config, seq_len, p), times=exit_layer)
    led.add("head", head_flops(config) * seq_len)
    skipped = n - exit_layer
    if skipped and with_kv:
        led.add("kv_synth", kv_synth_flops(config) * skipped * seq_len)
    if skipped and with_hsm:
        led.add("hsm", hsm_flops(config.d_hidden, d_hsm_variant) * seq_len)
    evals = 1 if metric_evaluations is None else metric_evaluations
    led.add("exit_metric", exit_metric_flops(config.d_hidden) * evals * seq_len)
    return led


def reduction_rate(
    ledger_adept: CostLedger, ledger_vanilla: CostLedger, *, include_hsm: bool = False
) -> float:
    """``1 - total(adept) / total(vanilla)``.

    The mapper's own FLOPs are excluded unless ``include_hsm`` is set; they
    are reported separately as overhead.
    """
    skip = () if include_hsm else ("hsm",)
    base = ledger_vanilla.total_excluding(skip)
    if base == 0:
        raise DivByZero("vanilla ledger total is zero")
    return 1.0 - ledger_adept.total_excluding(skip) / base


class ParamKind(str, Enum):
    BASE = "base"
    HSM = "hsm"
    PER_LAYER_HEADS = "per_layer_heads"


def count_parameters(kind: ParamKind | str, config: "ModelConfig", *, hsm_variant: str = "conv") -> int:
    kind = ParamKind(kind)
    d, dq, v, m = config.d_hidden, config.d_qkv, config.vocab_size, config.max_seq
    if kind is ParamKind.BASE:
        f = config.ffn_mult * d
        per_layer = (
            3 * (d * dq + dq)  # q, k, v
            + dq * d + d  # out projection
            + d * f + f  # ffn in
            + f * d + d  # ffn out
            + 2 * d  # two norm gains
        )
        return v * d + m * d + config.n_layers * per_layer + d + d * v + v
    if kind is ParamKind.HSM:
        from .hsm import count_hsm_parameters

        return count_hsm_parameters(d, hsm_variant)
    # one extra head per non-final layer, as in per-layer exit classifiers
    return (config.n_layers - 1) * (d * v + v)


def exit_histogram(records: Sequence["ExitRecord"], n_layers: int) -> list[int]:
    """Counts of exits per layer; index 0 is layer 1."""
    hist = [0] * n_layers
    for rec in records:
        hist[rec.exit_layer - 1] += 1
    return hist


def late_exit_scenario(
    config: "ModelConfig", seq_len: int, exit_layer: int
) -> dict[str, float]:
    """Every token exits at ``exit_layer``: reduction with and without KV synthesis.

    Mapper FLOPs are left out of both numbers (reported separately), matching
    how the reduction rate is defined elsewhere in this package.
    """
    vanilla = vanilla_prefill_ledger(config, seq_len)
    with_kv = forced_exit_ledger(config, seq_len, exit_layer, with_kv=True, with_hsm=True)
    without_kv = forced_exit_ledger(config, seq_len, exit_layer, with_kv=False, with_hsm=True)
    r_with = reduction_rate(with_kv, vanilla)
    r_without = reduction_rate(without_kv, vanilla)
    mean_layer = sum(
        sum(layer_flops(config, seq_len, p).values()) for p in range(seq_len)
    ) / seq_len
    return {
        "reduction_with_kv": r_with,
        "reduction_without_kv": r_without,
        "gap": r_without - r_with,
        "reduction_with_kv_and_hsm": reduction_rate(with_kv, vanilla, include_hsm=True),
        "kv_share_of_layer": kv_synth_flops(config) / mean_layer,
        "hsm_flops_per_token": float(hsm_flops(config.d_hidden)),
        "mean_layer_flops_per_token": mean_layer,
    }
