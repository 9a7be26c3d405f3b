"""Prefill and generation with token-level early exit.

The scheduler keeps an ordered active set of positions. At every layer only
the active rows go through the decoder block; afterwards the exit policy is
evaluated on their outputs, newly exited tokens are mapped through the HSM
(or passed through unchanged for the truncation baseline) and, in LM mode,
their keys/values for all deeper layers are synthesized before the next layer
reads the cache.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .cost_model import (
    CostLedger,
    exit_histogram,
    exit_metric_flops,
    head_flops,
    reduction_rate,
    vanilla_prefill_ledger,
)
from .errors import ContextOverflow, EmptyInput, ShapeError, ZeroState
from .exit_policy import ExitPolicyConfig, ExitRecord, PolicyKind
from .hsm import HSMTape, HSMWeights, hsm_forward
from .kv_synth import synthesize_rows
from .model import (
    KVCache,
    Model,
    decoder_layer_batch,
    embed,
    final_logits,
    lm_head,
    log_softmax,
    rms_norm,
    softmax,
    vanilla_prefill,
)


class Mode(str, Enum):
    LM = "lm"
    CLASSIFY = "classify"


@dataclass
class HSMCall:
    """One batched mapper invocation: the tokens that left at ``layer``."""

    layer: int
    positions: np.ndarray
    h_i: np.ndarray
    h_prev: np.ndarray
    inertia: np.ndarray
    out: np.ndarray
    tape: HSMTape | None


@dataclass
class RunResult:
    final_states: np.ndarray  # (T, D): real s_N or the mapped state
    records: list[ExitRecord]
    cache: KVCache
    logits: np.ndarray | None  # (T, V) in LM mode
    ledger: CostLedger
    mode: Mode = Mode.LM
    start: int = 0
    active_sets: list[np.ndarray] = field(default_factory=list)
    hsm_calls: list[HSMCall] = field(default_factory=list)

    @property
    def exit_layers(self) -> np.ndarray:
        return np.array([r.exit_layer for r in self.records], dtype=np.int64)

    def histogram(self, n_layers: int) -> list[int]:
        return exit_histogram(self.records, n_layers)


# --------------------------------------------------------------------------
# per-token policy state, tracked for a whole batch of positions
# --------------------------------------------------------------------------


def _unit_rows(x: np.ndarray, what: str) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(n == 0.0):
        raise ZeroState(f"{what} has zero norm")
    return x / n


class _Tracker:
    """Inertia sums, previous states and patience runs, indexed by local row."""

    def __init__(self, model: Model, policy: ExitPolicyConfig, h0: np.ndarray):
        self.model = model
        self.policy = policy
        t, d = h0.shape
        self.inertia = np.zeros((t, d))
        self.prev = h0.copy()
        self.run = np.zeros(t, dtype=np.int64)
        self.pred = np.full(t, -1, dtype=np.int64)

    def _intermediate_logits(self, h: np.ndarray) -> np.ndarray:
        return lm_head(self.model, rms_norm(h, self.model.lnf_g))

    def step(
        self, layer: int, rows: np.ndarray, h: np.ndarray, ledger: CostLedger | None, evaluate: np.ndarray | None = None
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Score the layer-``layer`` outputs ``h`` of ``rows``.

        Returns ``(scores, fire, h_prev, inertia_before)``; the two state
        arrays are what the mapper needs for a token that leaves here.
        ``evaluate`` restricts which rows are scored (all by default).
        """
        pol = self.policy
        kind = pol.kind
        n = len(rows)
        d = h.shape[1]
        inertia_before = self.inertia[rows].copy()
        h_prev = self.prev[rows].copy()
        scores = np.full(n, np.nan)
        fire = np.zeros(n, dtype=bool)
        can_exit = (
            kind is not PolicyKind.NONE
            and pol.min_exit_layer <= layer < self.model.config.n_layers
        )
        ev = np.ones(n, dtype=bool) if evaluate is None else evaluate
        n_eval = int(ev.sum()) if can_exit else 0

        if kind is PolicyKind.PATIENCE and layer < self.model.config.n_layers:
            # predictions are needed from layer 1 on to build the run length
            preds = np.argmax(self._intermediate_logits(h), axis=-1)
            same = preds == self.pred[rows]
            self.run[rows] = np.where(same, self.run[rows] + 1, 1)
            self.pred[rows] = preds
            if ledger is not None:
                ledger.add("exit_metric", head_flops(self.model.config) * n)
            if can_exit:
                scores = self.run[rows].astype(np.float64)
                fire = scores >= pol.patience_t
        elif can_exit and kind is PolicyKind.ENTROPY:
            logp = log_softmax(self._intermediate_logits(h))
            scores = -(np.exp(logp) * logp).sum(axis=-1)
            fire = scores <= pol.entropy_threshold
            if ledger is not None:
                ledger.add("exit_metric", head_flops(self.model.config) * n_eval)
        elif can_exit:
            hu = _unit_rows(h, "hidden state")
            g = l = None
            if kind is not PolicyKind.INERTIA_LOCAL:
                g = np.sum(hu * _unit_rows(inertia_before, "inertia"), axis=-1)
            if kind in (PolicyKind.INERTIA_LOCAL, PolicyKind.INERTIA_BOTH):
                l = np.sum(hu * _unit_rows(h_prev, "previous hidden state"), axis=-1)
            if kind is PolicyKind.INERTIA_LOCAL:
                scores = l
            elif kind is PolicyKind.INERTIA_BOTH:
                scores = np.minimum(g, l)
            else:
                scores = g
            fire = scores >= pol.delta
            per = exit_metric_flops(d) * (2 if kind is PolicyKind.INERTIA_BOTH else 1)
            if ledger is not None:
                ledger.add("exit_metric", per * n_eval)

        fire = fire & ev
        if kind is not PolicyKind.NONE:
            self.inertia[rows] += _unit_rows(h, "hidden state")
        self.prev[rows] = h
        return scores, fire, h_prev, inertia_before


# --------------------------------------------------------------------------
# core scheduler
# --------------------------------------------------------------------------


def _map_exits(
    hsm: HSMWeights | None,
    h_i: np.ndarray,
    h_prev: np.ndarray,
    inertia: np.ndarray,
    ledger: CostLedger | None,
) -> tuple[np.ndarray, HSMTape | None]:
    if hsm is None:
        # truncation baseline: the raw intermediate state stands in for s_N
        return h_i.copy(), None
    return hsm_forward(h_i, h_prev, inertia, hsm, ledger)


def _run(
    model: Model,
    hsm: HSMWeights | None,
    policy: ExitPolicyConfig,
    token_ids: Sequence[int],
    *,
    start: int = 0,
    cache: KVCache | None = None,
    ledger: CostLedger | None = None,
    mode: Mode = Mode.LM,
    all_at_once: bool = False,
    keep_tapes: bool = False,
    trace: bool = False,
) -> RunResult:
    cfg = model.config
    n_layers = cfg.n_layers
    mode = Mode(mode)
    ledger = CostLedger() if ledger is None else ledger
    cache = KVCache.for_model(cfg, trace=trace) if cache is None else cache
    h_all = embed(model, token_ids, start)
    t = h_all.shape[0]
    positions = start + np.arange(t)
    tracker = _Tracker(model, policy, h_all)
    final = np.zeros_like(h_all)
    exit_layer = np.full(t, n_layers, dtype=np.int64)
    exit_score: list[float | None] = [None] * t
    result = RunResult(final, [], cache, None, ledger, mode, start)
    active = np.arange(t)  # local rows
    allow_gaps = mode is Mode.CLASSIFY
    last_only = np.zeros(t, dtype=bool)
    last_only[-1] = True

    for li in range(n_layers):
        layer = li + 1
        h = decoder_layer_batch(model, li, h_all[active], positions[active], cache, ledger, allow_gaps)
        h_all[active] = h
        if layer == n_layers:
            break
        if all_at_once:
            scores, fire, h_prev, inertia = tracker.step(layer, active, h, ledger, evaluate=last_only[active])
            if fire.any():
                fire = np.ones_like(fire)
                scores = np.full(len(active), scores[-1])
        else:
            scores, fire, h_prev, inertia = tracker.step(layer, active, h, ledger)
        if fire.any():
            rows = active[fire]
            mapped, tape = _map_exits(hsm, h[fire], h_prev[fire], inertia[fire], ledger)
            final[rows] = mapped
            exit_layer[rows] = layer
            for r, s in zip(rows.tolist(), scores[fire].tolist()):
                exit_score[r] = float(s)
            if mode is Mode.LM:
                synthesize_rows(model, mapped, positions[rows], layer, cache, ledger)
            result.hsm_calls.append(
                HSMCall(layer, positions[rows], h[fire], h_prev[fire], inertia[fire], mapped,
                        tape if keep_tapes else None)
            )
            active = active[~fire]
        result.active_sets.append(positions[active])
        if active.size == 0:
            break

    final[active] = h_all[active]
    result.records = [
        ExitRecord(int(positions[r]), int(exit_layer[r]), exit_score[r], policy.kind) for r in range(t)
    ]
    if mode is Mode.LM:
        result.logits = final_logits(model, final, ledger)
    return result


# --------------------------------------------------------------------------
# public entry points
# --------------------------------------------------------------------------


def prefill(
    model: Model,
    hsm: HSMWeights | None,
    policy: ExitPolicyConfig,
    token_ids: Sequence[int],
    mode: Mode | str = Mode.LM,
    *,
    keep_tapes: bool = False,
    trace: bool = False,
) -> RunResult:
    """Token-level early-exit prefill. ``hsm=None`` gives the truncation baseline."""
    if len(token_ids) == 0:
        raise EmptyInput("empty prompt")
    return _run(
        model, hsm, policy, token_ids, mode=Mode(mode),
        all_at_once=policy.kind is PolicyKind.ALL_AT_ONCE, keep_tapes=keep_tapes, trace=trace,
    )


def prefill_all_at_once(
    model: Model,
    hsm: HSMWeights | None,
    policy: ExitPolicyConfig,
    token_ids: Sequence[int],
    *,
    keep_tapes: bool = False,
) -> RunResult:
    """Only the last prompt token is scored; when it fires, every token leaves together.

    Any inertia-style ``policy.kind`` is accepted; ALL_AT_ONCE scores with the
    global inertia metric.
    """
    if len(token_ids) == 0:
        raise EmptyInput("empty prompt")
    return _run(model, hsm, policy, token_ids, all_at_once=True, keep_tapes=keep_tapes)


@dataclass
class GenerationResult:
    tokens: list[int]
    prefill: RunResult
    steps: list[RunResult]
    ledger: CostLedger
    cache: KVCache

    @property
    def records(self) -> list[ExitRecord]:
        return [r for s in self.steps for r in s.records]


def generate(
    model: Model,
    hsm: HSMWeights | None,
    policy: ExitPolicyConfig,
    prompt_ids: Sequence[int],
    max_new: int,
) -> GenerationResult:
    """Greedy decoding; every generated token is itself subject to early exit."""
    cfg = model.config
    if max_new < 1:
        raise ValueError("max_new must be >= 1")
    if len(prompt_ids) + max_new > cfg.max_seq:
        raise ContextOverflow(f"{len(prompt_ids)} + {max_new} tokens exceed max_seq={cfg.max_seq}")
    step_policy = policy
    if policy.kind is PolicyKind.ALL_AT_ONCE:
        # a single new token is its own "last token"
        step_policy = ExitPolicyConfig(PolicyKind.INERTIA_GLOBAL, policy.delta, policy.min_exit_layer)
    pre = prefill(model, hsm, policy, prompt_ids)
    ledger = pre.ledger.copy()
    cache = pre.cache
    tokens: list[int] = []
    steps: list[RunResult] = []
    nxt = int(np.argmax(pre.logits[-1]))
    for k in range(max_new):
        tokens.append(nxt)
        if k == max_new - 1:
            break
        step = _run(model, hsm, step_policy, [nxt], start=len(prompt_ids) + k, cache=cache, ledger=ledger)
        steps.append(step)
        nxt = int(np.argmax(step.logits[-1]))
    return GenerationResult(tokens, pre, steps, ledger, cache)


@dataclass
class ClassifierHead:
    w: np.ndarray  # (D, C)
    b: np.ndarray  # (C,)
    pooling: str = "last"

    def __post_init__(self) -> None:
        if self.pooling not in ("last", "mean"):
            raise ValueError("pooling must be 'last' or 'mean'")
        if self.w.ndim != 2 or self.b.shape != (self.w.shape[1],):
            raise ShapeError("classifier head shapes disagree")

    def pool(self, states: np.ndarray) -> np.ndarray:
        return states[-1] if self.pooling == "last" else states.mean(axis=0)

    def logits(self, pooled: np.ndarray) -> np.ndarray:
        return pooled @ self.w + self.b


def classify(
    model: Model,
    hsm: HSMWeights | None,
    policy: ExitPolicyConfig,
    token_ids: Sequence[int],
    head: ClassifierHead,
) -> tuple[np.ndarray, RunResult]:
    """CLASSIFY-mode prefill: exited tokens stop entirely (no key/value synthesis)."""
    if head.w.shape[0] != model.config.d_hidden:
        raise ShapeError("classifier head input width differs from d_hidden")
    res = prefill(model, hsm, policy, token_ids, Mode.CLASSIFY)
    pooled = head.pool(rms_norm(res.final_states, model.lnf_g))
    res.ledger.add("head", 2 * head.w.shape[0] * head.w.shape[1])
    return softmax(head.logits(pooled)), res


# --------------------------------------------------------------------------
# corpus-level measurements
# --------------------------------------------------------------------------


def mean_reduction(
    model: Model,
    hsm: HSMWeights | None,
    policy: ExitPolicyConfig,
    corpus: Sequence[Sequence[int]],
    *,
    include_hsm: bool = False,
    mode: Mode = Mode.LM,
) -> float:
    """Prefill reduction rate averaged over sequences.

    In CLASSIFY mode neither side pays for the LM head, so the rate covers
    the decoder stack, exit metrics and synthesis only.
    """
    lm = mode is Mode.LM
    rates = []
    for ids in corpus:
        res = prefill(model, hsm, policy, ids, mode)
        vanilla = vanilla_prefill_ledger(model.config, len(ids), with_head=lm)
        rates.append(reduction_rate(res.ledger, vanilla, include_hsm=include_hsm))
    return float(np.mean(rates))


def sequence_nll(logits: np.ndarray, token_ids: Sequence[int]) -> tuple[float, int]:
    """Summed next-token negative log-likelihood and the number of predictions."""
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.size < 2:
        return 0.0, 0
    logp = log_softmax(logits[:-1])
    return float(-logp[np.arange(ids.size - 1), ids[1:]].sum()), int(ids.size - 1)


@dataclass
class LMEvaluation:
    perplexity: float
    reduction: float
    reduction_with_hsm: float
    histogram: list[int]
    n_tokens: int
    ledger: CostLedger

    def as_dict(self) -> dict:
        return {
            "perplexity": self.perplexity,
            "reduction": self.reduction,
            "reduction_with_hsm": self.reduction_with_hsm,
            "exit_histogram": list(self.histogram),
            "n_tokens": self.n_tokens,
            "ledger": self.ledger.to_dict(),
        }


def evaluate_lm(
    model: Model,
    hsm: HSMWeights | None,
    policy: ExitPolicyConfig,
    corpus: Sequence[Sequence[int]],
) -> LMEvaluation:
    """Perplexity, mean prefill reduction and exit histogram over a corpus."""
    if not corpus:
        raise EmptyInput("evaluation corpus is empty")
    nll, count = 0.0, 0
    rates, rates_hsm = [], []
    hist = [0] * model.config.n_layers
    total = CostLedger()
    for ids in corpus:
        res = prefill(model, hsm, policy, ids)
        a, b = sequence_nll(res.logits, ids)
        nll += a
        count += b
        vanilla = vanilla_prefill_ledger(model.config, len(ids))
        rates.append(reduction_rate(res.ledger, vanilla))
        rates_hsm.append(reduction_rate(res.ledger, vanilla, include_hsm=True))
        for i, c in enumerate(res.histogram(model.config.n_layers)):
            hist[i] += c
        total = total + res.ledger
    ppl = math.exp(nll / count) if count else float("nan")
    return LMEvaluation(ppl, float(np.mean(rates)), float(np.mean(rates_hsm)), hist, count, total)


@dataclass
class ClassifierEvaluation:
    accuracy: float
    reduction: float
    reduction_with_hsm: float
    histogram: list[int]
    n_sequences: int
    ledger: CostLedger

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "reduction": self.reduction,
            "reduction_with_hsm": self.reduction_with_hsm,
            "exit_histogram": list(self.histogram),
            "n_sequences": self.n_sequences,
            "ledger": self.ledger.to_dict(),
        }


def evaluate_classifier(
    model: Model,
    hsm: HSMWeights | None,
    policy: ExitPolicyConfig,
    data: Sequence[tuple[Sequence[int], int]],
    head: ClassifierHead,
) -> ClassifierEvaluation:
    """Accuracy and decoder-side reduction over labelled sequences."""
    if not data:
        raise EmptyInput("evaluation set is empty")
    hits = 0
    rates, rates_hsm = [], []
    hist = [0] * model.config.n_layers
    total = CostLedger()
    head_cost = 2 * head.w.shape[0] * head.w.shape[1]
    for ids, label in data:
        probs, res = classify(model, hsm, policy, ids, head)
        hits += int(np.argmax(probs)) == int(label)
        vanilla = vanilla_prefill_ledger(model.config, len(ids), with_head=False)
        vanilla.add("head", head_cost)
        rates.append(reduction_rate(res.ledger, vanilla))
        rates_hsm.append(reduction_rate(res.ledger, vanilla, include_hsm=True))
        for i, c in enumerate(res.histogram(model.config.n_layers)):
            hist[i] += c
        total = total + res.ledger
    return ClassifierEvaluation(hits / len(data), float(np.mean(rates)), float(np.mean(rates_hsm)),
                                hist, len(data), total)


def state_alignment(
    model: Model,
    hsm: HSMWeights | None,
    policy: ExitPolicyConfig,
    corpus: Sequence[Sequence[int]],
) -> tuple[float, float, int]:
    """Mean cosine to the vanilla final state, for mapped and for raw exit states.

    Returns ``(mean cos(mapped, s_N), mean cos(raw s_i, s_N), n_exited)``
    over every token that left before the last layer.
    """
    mapped_cos, raw_cos = [], []
    for ids in corpus:
        truth = vanilla_prefill(model, ids).hidden
        res = prefill(model, hsm, policy, ids)
        for call in res.hsm_calls:
            ref = _unit_rows(truth[call.positions - res.start], "final state")
            mapped_cos.extend(np.sum(_unit_rows(call.out, "mapped state") * ref, axis=-1).tolist())
            raw_cos.extend(np.sum(_unit_rows(call.h_i, "exit state") * ref, axis=-1).tolist())
    if not mapped_cos:
        return float("nan"), float("nan"), 0
    return float(np.mean(mapped_cos)), float(np.mean(raw_cos)), len(mapped_cos)
