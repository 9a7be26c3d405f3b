"""Exit criteria: inertia convergence, local/both/all-at-once ablations, and the
patience and entropy baselines, plus the max-entropy preference utilities and
threshold calibration against a compute budget."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np

from .errors import InvalidPatience, Unreachable, ZeroState

if TYPE_CHECKING:
    from .hsm import HSMWeights
    from .model import Model


class PolicyKind(str, Enum):
    INERTIA_GLOBAL = "inertia_global"
    INERTIA_LOCAL = "inertia_local"
    INERTIA_BOTH = "inertia_both"
    ALL_AT_ONCE = "all_at_once"
    PATIENCE = "patience"
    ENTROPY = "entropy"
    NONE = "none"


SCORE_KINDS = (
    PolicyKind.INERTIA_GLOBAL,
    PolicyKind.INERTIA_LOCAL,
    PolicyKind.INERTIA_BOTH,
    PolicyKind.ALL_AT_ONCE,
)


@dataclass(frozen=True)
class ExitPolicyConfig:
    kind: PolicyKind = PolicyKind.INERTIA_GLOBAL
    delta: float = 0.9
    min_exit_layer: int = 2
    patience_t: int = 3
    entropy_threshold: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", PolicyKind(self.kind))
        if self.min_exit_layer < 2:
            raise ValueError("min_exit_layer must be >= 2 (inertia needs one prior layer)")
        if self.kind is PolicyKind.PATIENCE and self.patience_t < 2:
            raise InvalidPatience("patience_t must be >= 2")

    def with_delta(self, delta: float) -> "ExitPolicyConfig":
        return ExitPolicyConfig(self.kind, delta, self.min_exit_layer, self.patience_t, self.entropy_threshold)

    def as_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "delta": self.delta,
            "min_exit_layer": self.min_exit_layer,
            "patience_t": self.patience_t,
            "entropy_threshold": self.entropy_threshold,
        }


@dataclass(frozen=True)
class ExitRecord:
    token_index: int
    exit_layer: int
    exit_score: float | None
    policy_kind: PolicyKind

    def as_dict(self) -> dict:
        return {
            "token_index": self.token_index,
            "exit_layer": self.exit_layer,
            "exit_score": self.exit_score,
            "policy_kind": self.policy_kind.value,
        }


# --------------------------------------------------------------------------
# inertia metric
# --------------------------------------------------------------------------


@dataclass
class InertiaState:
    """Running sum of unit-normalized hidden states of one token."""

    sum: np.ndarray
    layers_accumulated: int = 0

    @classmethod
    def empty(cls, d_hidden: int) -> "InertiaState":
        return cls(np.zeros(d_hidden), 0)


def _unit(x: np.ndarray, what: str) -> np.ndarray:
    n = float(np.linalg.norm(x))
    if n == 0.0:
        raise ZeroState(f"{what} has zero norm")
    return x / n


def update_inertia(state: InertiaState, h: np.ndarray) -> InertiaState:
    return InertiaState(state.sum + _unit(np.asarray(h, dtype=np.float64), "hidden state"), state.layers_accumulated + 1)


def exit_score(h: np.ndarray, state: InertiaState) -> float:
    """Inner product of the unit current state with the unit inertia."""
    if state.layers_accumulated < 1:
        raise ZeroState("inertia is empty")
    return float(np.dot(_unit(h, "hidden state"), _unit(state.sum, "inertia")))


def local_exit_score(h_i: np.ndarray, h_prev: np.ndarray) -> float:
    """Cosine similarity between consecutive layer outputs."""
    return float(np.dot(_unit(h_i, "hidden state"), _unit(h_prev, "previous hidden state")))


def should_exit(policy: ExitPolicyConfig, layer: int, score: float) -> bool:
    """Threshold test for the score-based kinds (``>= delta``, inclusive).

    For ENTROPY the score is an entropy (exit when ``<= entropy_threshold``);
    for PATIENCE it is the current run length (exit when ``>= patience_t``).
    """
    if layer < 1:
        raise ValueError("layers are numbered from 1")
    kind = policy.kind
    if kind is PolicyKind.NONE or layer < policy.min_exit_layer:
        return False
    if kind is PolicyKind.ENTROPY:
        return score <= policy.entropy_threshold
    if kind is PolicyKind.PATIENCE:
        return score >= policy.patience_t
    return score >= policy.delta


# --------------------------------------------------------------------------
# baselines
# --------------------------------------------------------------------------


def patience_exit(predictions: Sequence[int], t: int) -> int | None:
    """First 1-based layer at which the last ``t`` layer predictions agree."""
    if t < 2:
        raise InvalidPatience("patience must be at least 2")
    run = 0
    for i, p in enumerate(predictions):
        run = run + 1 if i and p == predictions[i - 1] else 1
        if run >= t:
            return i + 1
    return None


def entropy(logits: np.ndarray) -> float:
    """Shannon entropy (nats) of ``softmax(logits)``."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max()
    logp = z - math.log(np.exp(z).sum())
    return float(-(np.exp(logp) * logp).sum())


def entropy_exit(logits: np.ndarray, threshold: float) -> bool:
    return entropy(logits) <= threshold


# --------------------------------------------------------------------------
# preference / reward
# --------------------------------------------------------------------------


class Action(str, Enum):
    CONTINUE = "continue"
    EXIT = "exit"


ACTIONS = (Action.CONTINUE, Action.EXIT)


@dataclass(frozen=True)
class PreferenceParams:
    lam: float
    beta: float
    task_score: Mapping[Action, float]
    cost: Mapping[Action, float]
    c_threshold: float = math.inf
    t_min: float = -math.inf

    def __post_init__(self) -> None:
        if not (self.lam > 0 and self.beta > 0):
            raise ValueError("lambda and beta must be strictly positive")

    def utility(self, a: Action) -> float:
        return self.lam * self.task_score[a] - self.beta * self.cost[a]


def preference_probability(p: PreferenceParams) -> dict[Action, float]:
    """Max-entropy action distribution ``P(a) ∝ exp(lam*T(a) - beta*C(a))``."""
    u = np.array([p.utility(a) for a in ACTIONS])
    e = np.exp(u - u.max())
    probs = e / e.sum()
    return dict(zip(ACTIONS, probs.tolist()))


def reward(p: PreferenceParams, a: Action) -> float:
    """Log preference probability of ``a``."""
    u = np.array([p.utility(b) for b in ACTIONS])
    m = u.max()
    lse = m + math.log(np.exp(u - m).sum())
    return float(p.utility(a) - lse)


def expected_task_and_cost(p: PreferenceParams) -> tuple[float, float]:
    probs = preference_probability(p)
    return (
        sum(probs[a] * p.task_score[a] for a in ACTIONS),
        sum(probs[a] * p.cost[a] for a in ACTIONS),
    )


def satisfies_constraints(p: PreferenceParams) -> bool:
    """Expected cost within budget and expected task score above the floor."""
    t, c = expected_task_and_cost(p)
    return c <= p.c_threshold and t >= p.t_min


# --------------------------------------------------------------------------
# calibration
# --------------------------------------------------------------------------


@dataclass
class CalibrationResult:
    target: float
    delta: float
    achieved: float
    within_tol: bool
    probes: list[tuple[float, float]] = field(default_factory=list)


def calibrate_threshold(
    model: "Model",
    hsm: "HSMWeights | None",
    corpus: Sequence[Sequence[int]],
    target_reduction: float,
    tol: float = 0.01,
    *,
    policy: ExitPolicyConfig | None = None,
    max_iter: int = 32,
    mode=None,
) -> CalibrationResult:
    """Bisect delta in [0, 1] so the mean prefill reduction lands within ``tol`` of target.

    Bisection tracks the crossing ``reduction(delta) = target``; the answer is
    the largest probed delta whose reduction is within ``tol`` of the target.
    Raises :class:`Unreachable` when even delta = 0 falls short. ``mode``
    (a runtime ``Mode``) selects LM or CLASSIFY prefill; LM by default.
    """
    from .runtime import Mode, mean_reduction

    mode = Mode.LM if mode is None else Mode(mode)

    if not corpus:
        raise ValueError("calibration corpus is empty")
    if not 0.0 <= target_reduction < 1.0:
        raise ValueError("target_reduction must lie in [0, 1)")
    base = policy or ExitPolicyConfig(PolicyKind.INERTIA_GLOBAL)
    probes: list[tuple[float, float]] = []

    def measure(delta: float) -> float:
        r = mean_reduction(model, hsm, base.with_delta(delta), corpus, mode=mode)
        probes.append((delta, r))
        return r

    def best() -> tuple[float, float] | None:
        ok = [p for p in probes if abs(p[1] - target_reduction) <= tol]
        return max(ok) if ok else None

    r_hi = measure(1.0)
    if r_hi >= target_reduction - tol:
        return CalibrationResult(target_reduction, 1.0, r_hi, abs(r_hi - target_reduction) <= tol, probes)
    r_lo = measure(0.0)
    if r_lo < target_reduction - tol:
        raise Unreachable(target_reduction, r_lo)
    lo, hi = 0.0, 1.0
    for _ in range(max_iter - 2):
        mid = 0.5 * (lo + hi)
        if measure(mid) >= target_reduction:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-6 and best() is not None:
            break
    hit = best()
    if hit is None:
        # reduction jumps across the tolerance band; report the nearest probe
        hit = min(probes, key=lambda p: (abs(p[1] - target_reduction), -p[0]))
    return CalibrationResult(target_reduction, hit[0], hit[1], abs(hit[1] - target_reduction) <= tol, probes)
