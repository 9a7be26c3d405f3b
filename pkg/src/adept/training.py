"""HSM training with the base model frozen.

Gradients reach the mapper only through the direct head path of each exited
token: the final norm and head (or classifier head) are differentiated, the
synthesized keys/values that later tokens read are treated as constants.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import NoTrainingSignal, NumericalError, ShapeError, TooShort, ZeroState
from .exit_policy import ExitPolicyConfig
from .hsm import HSMWeights, hsm_backward, hsm_forward
from .model import NORM_EPS, Model, log_softmax, rms_norm, vanilla_prefill
from .runtime import ClassifierHead, Mode, prefill


class LossKind(str, Enum):
    LM_CE = "lm_ce"
    SIM_BCE = "sim_bce"


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Summed CE of rows against integer targets, and its gradient."""
    logp = log_softmax(logits)
    rows = np.arange(len(targets))
    loss = float(-logp[rows, targets].sum())
    grad = np.exp(logp)
    grad[rows, targets] -= 1.0
    return loss, grad


def lm_loss(logits: np.ndarray, token_ids: Sequence[int]) -> tuple[float, np.ndarray]:
    """Mean next-token CE: position t predicts token t + 1. Last row gets zero gradient."""
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.size < 2:
        raise TooShort("need at least two tokens for a next-token loss")
    if logits.shape[0] != ids.size:
        raise ShapeError("one logit row per token expected")
    n = ids.size - 1
    loss, g = cross_entropy(logits[:-1], ids[1:])
    grad = np.zeros_like(logits)
    grad[:-1] = g / n
    return loss / n, grad


def cosine_and_grad(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise cosine similarity and its gradient w.r.t. ``a``."""
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise ZeroState("cosine of a zero vector")
    cos = np.sum(a * b, axis=-1, keepdims=True) / (na * nb)
    grad = b / (na * nb) - cos * a / (na * na)
    return cos[..., 0], grad


def bce_with_logits(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy over classes against a one-hot label.

    A single logit is read as the positive-class score with ``label`` in {0, 1}.
    """
    z = np.atleast_1d(np.asarray(logits, dtype=np.float64))
    if z.size == 1:
        y = np.array([float(label)])
    else:
        y = np.zeros_like(z)
        y[label] = 1.0
    # log(1 + exp(-|z|)) form for stability
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * z))
    return float(loss.mean()), ((sig - y) / z.size).reshape(np.shape(logits))


def sim_bce_loss(
    s_mapped: np.ndarray,
    s_true: np.ndarray,
    class_logits: np.ndarray,
    label: int,
    sim_loss_weight: float = 1.0,
) -> tuple[float, np.ndarray, np.ndarray]:
    """``weight * (1 - cos(s_mapped, s_true)) + BCE(class_logits, label)``.

    Returns the loss and gradients w.r.t. ``s_mapped`` and ``class_logits``.
    """
    s_mapped = np.asarray(s_mapped, dtype=np.float64)
    s_true = np.asarray(s_true, dtype=np.float64)
    if s_mapped.shape != s_true.shape:
        raise ShapeError("mapped and true states differ in shape")
    cos, dcos = cosine_and_grad(s_mapped, s_true)
    bce, dlogits = bce_with_logits(class_logits, label)
    return float(sim_loss_weight * (1.0 - cos) + bce), -sim_loss_weight * dcos, dlogits


def rms_norm_backward(x: np.ndarray, gain: np.ndarray, dy: np.ndarray, eps: float = NORM_EPS) -> np.ndarray:
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    gdy = gain * dy
    return inv * gdy - x * inv**3 * np.mean(gdy * x, axis=-1, keepdims=True)


# --------------------------------------------------------------------------
# optimizer and scheduler
# --------------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: HSMWeights
    v: HSMWeights
    step: int = 0
    lr: float = 1e-3
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    @classmethod
    def for_weights(cls, w: HSMWeights, lr: float = 1e-3, weight_decay: float = 0.01) -> "OptimizerState":
        return cls(w.zeros_like(), w.zeros_like(), 0, lr, weight_decay)


def adamw_step(weights: HSMWeights, grads: HSMWeights, state: OptimizerState) -> tuple[HSMWeights, OptimizerState]:
    """Decoupled weight decay, then a bias-corrected Adam step. Returns new objects."""
    names = weights.names()
    if grads.names() != names or state.m.names() != names:
        raise ShapeError("gradient/optimizer structure differs from the weights")
    b1, b2 = state.betas
    t = state.step + 1
    new_w, new_m, new_v = weights.copy(), state.m.copy(), state.v.copy()
    for n in names:
        g = getattr(grads, n)
        w = getattr(new_w, n)
        if g.shape != w.shape:
            raise ShapeError(f"{n}: gradient shape {g.shape} != weight shape {w.shape}")
        m = getattr(new_m, n)
        v = getattr(new_v, n)
        w *= 1.0 - state.lr * state.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        w -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_w, OptimizerState(new_m, new_v, t, state.lr, state.weight_decay, state.betas, state.eps)


@dataclass
class PlateauState:
    """Reduce-on-plateau bookkeeping for a metric that should go down."""

    lr: float
    factor: float = 0.5
    patience: int = 1
    threshold: float = 1e-2  # relative
    min_lr: float = 1e-9
    best: float = math.inf
    num_bad: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.factor < 1.0:
            raise ValueError("factor must lie in (0, 1)")
        if self.min_lr <= 0:
            raise ValueError("min_lr must be positive")


def plateau_scheduler_step(state: PlateauState, metric: float) -> PlateauState:
    if not math.isfinite(metric):
        raise NumericalError(f"scheduler metric is not finite: {metric}")
    s = PlateauState(**vars(state))
    if metric < s.best * (1.0 - s.threshold):
        s.best = metric
        s.num_bad = 0
    else:
        s.num_bad += 1
    if s.num_bad > s.patience:
        s.lr = max(s.lr * s.factor, s.min_lr)
        s.num_bad = 0
    return s


# --------------------------------------------------------------------------
# head-path objective
# --------------------------------------------------------------------------


@dataclass
class ExitBatch:
    """Mapper inputs of exited tokens plus what their outputs are scored against."""

    h_i: np.ndarray
    h_prev: np.ndarray
    inertia: np.ndarray
    targets: np.ndarray  # next-token ids
    s_true: np.ndarray | None = None  # vanilla final states, for the similarity term

    def __len__(self) -> int:
        return len(self.targets)


def collect_exits(
    model: Model,
    hsm: HSMWeights,
    policy: ExitPolicyConfig,
    corpus: Sequence[Sequence[int]],
    with_truth: bool = False,
    truths: Sequence[np.ndarray] | None = None,
) -> ExitBatch:
    """Prefill every sequence and gather the exited tokens that have a next token.

    ``truths`` may carry precomputed vanilla final states aligned with ``corpus``.
    """
    cols: dict[str, list[np.ndarray]] = {k: [] for k in ("h_i", "h_prev", "inertia", "targets", "s_true")}
    for k, ids in enumerate(corpus):
        ids = np.asarray(ids, dtype=np.int64)
        res = prefill(model, hsm, policy, ids)
        truth = None
        if with_truth:
            truth = truths[k] if truths is not None else vanilla_prefill(model, ids).hidden
        for call in res.hsm_calls:
            keep = call.positions < len(ids) - 1
            if not keep.any():
                continue
            cols["h_i"].append(call.h_i[keep])
            cols["h_prev"].append(call.h_prev[keep])
            cols["inertia"].append(call.inertia[keep])
            cols["targets"].append(ids[call.positions[keep] + 1])
            if truth is not None:
                cols["s_true"].append(truth[call.positions[keep]])
    d = model.config.d_hidden
    if not cols["targets"]:
        empty = np.zeros((0, d))
        return ExitBatch(empty, empty, empty, np.zeros(0, dtype=np.int64), empty if with_truth else None)
    cat = {k: np.concatenate(v) for k, v in cols.items() if v}
    return ExitBatch(cat["h_i"], cat["h_prev"], cat["inertia"], cat["targets"], cat.get("s_true"))


def head_path_loss(
    model: Model,
    hsm: HSMWeights,
    batch: ExitBatch,
    sim_loss_weight: float = 0.0,
    need_grad: bool = True,
) -> tuple[float, HSMWeights | None]:
    """Summed CE of the frozen head on mapped states (+ optional cosine term) and its HSM gradient."""
    out, tape = hsm_forward(batch.h_i, batch.h_prev, batch.inertia, hsm)
    normed = rms_norm(out, model.lnf_g)
    logits = normed @ model.w_head + model.b_head
    loss, dlogits = cross_entropy(logits, batch.targets)
    dout = None
    if need_grad:
        dout = rms_norm_backward(out, model.lnf_g, dlogits @ model.w_head.T)
    if sim_loss_weight:
        if batch.s_true is None:
            raise ValueError("similarity term needs the true final states")
        cos, dcos = cosine_and_grad(out, batch.s_true)
        loss += float(sim_loss_weight * (1.0 - cos).sum())
        if need_grad:
            dout = dout - sim_loss_weight * dcos
    if not math.isfinite(loss):
        raise NumericalError("training loss is not finite")
    if not need_grad:
        return loss, None
    grads, _ = hsm_backward(tape, dout, hsm)
    return loss, grads


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    delta_train: float | None = None  # overrides the policy threshold when set
    epochs: int = 3
    batch_size: int = 8
    lr_init: float = 1e-3
    weight_decay: float = 0.01
    factor: float = 0.5
    patience_epochs: int = 1
    threshold: float = 1e-2
    min_lr: float = 1e-9
    loss_kind: LossKind = LossKind.LM_CE
    sim_loss_weight: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "loss_kind", LossKind(self.loss_kind))
        if not 0.0 < self.factor < 1.0 or self.min_lr <= 0:
            raise ValueError("scheduler factor must lie in (0, 1) and min_lr be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class TrainResult:
    hsm: HSMWeights
    history: list[EpochStats] = field(default_factory=list)
    initial_loss: float = math.nan


def _mean_objective(model, hsm, batches, weight) -> float:
    total, n = 0.0, 0
    for b in batches:
        if len(b):
            total += head_path_loss(model, hsm, b, weight, need_grad=False)[0]
            n += len(b)
    return total / n if n else math.nan


def hsm_objective(
    model: Model,
    hsm: HSMWeights,
    corpus: Sequence[Sequence[int]],
    policy: ExitPolicyConfig,
    sim_loss_weight: float = 0.0,
) -> float:
    """Mean per-token training objective over a corpus (exits measured with ``hsm``)."""
    batch = collect_exits(model, hsm, policy, corpus, with_truth=sim_loss_weight > 0)
    if not len(batch):
        raise NoTrainingSignal("no token exits at this threshold")
    return head_path_loss(model, hsm, batch, sim_loss_weight, need_grad=False)[0] / len(batch)


def train_hsm(
    model: Model,
    hsm: HSMWeights,
    corpus: Sequence[Sequence[int]],
    policy: ExitPolicyConfig,
    config: TrainConfig,
    val_corpus: Sequence[Sequence[int]] | None = None,
) -> TrainResult:
    """Train the mapper on the LM objective. The input ``hsm`` is not modified.

    Each batch is prefilled with the current weights, so exit positions and
    synthesized keys/values track the mapper as it trains.
    """
    if config.loss_kind is not LossKind.LM_CE:
        raise ValueError("train_hsm handles LM_CE; use train_hsm_classifier for SIM_BCE")
    if not corpus:
        raise NoTrainingSignal("training corpus is empty")
    if config.delta_train is not None:
        policy = policy.with_delta(config.delta_train)
    weight = config.sim_loss_weight
    with_truth = weight > 0
    val = list(val_corpus) if val_corpus else list(corpus)
    # the base is frozen, so vanilla final states never change
    truth = [vanilla_prefill(model, ids).hidden for ids in corpus] if with_truth else None
    val_truth = [vanilla_prefill(model, ids).hidden for ids in val] if with_truth else None
    rng = np.random.default_rng(config.seed)
    w = hsm.copy()
    opt = OptimizerState.for_weights(w, config.lr_init, config.weight_decay)
    sched = PlateauState(config.lr_init, config.factor, config.patience_epochs, config.threshold, config.min_lr)
    result = TrainResult(w)

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(corpus))
        tot, cnt = 0.0, 0
        for s in range(0, len(order), config.batch_size):
            idx = order[s : s + config.batch_size]
            seqs = [corpus[i] for i in idx]
            batch = collect_exits(model, w, policy, seqs, with_truth, None if truth is None else [truth[i] for i in idx])
            if not len(batch):
                continue
            loss, grads = head_path_loss(model, w, batch, weight)
            if math.isnan(result.initial_loss) and epoch == 1 and s == 0:
                result.initial_loss = loss / len(batch)
            grads = grads.map(lambda g: g / len(batch))
            opt.lr = sched.lr
            w, opt = adamw_step(w, grads, opt)
            tot += loss
            cnt += len(batch)
        if cnt == 0:
            raise NoTrainingSignal(f"no token exits at delta={policy.delta}")
        val_batches = [collect_exits(model, w, policy, val, with_truth, val_truth)]
        val_loss = _mean_objective(model, w, val_batches, weight)
        if math.isnan(val_loss):
            val_loss = tot / cnt
        result.history.append(EpochStats(epoch, tot / cnt, val_loss, sched.lr))
        sched = plateau_scheduler_step(sched, val_loss)
    result.hsm = w
    return result


def write_history_csv(history: Sequence[EpochStats], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for h in history:
            wr.writerow([h.epoch, repr(h.train_loss), repr(h.val_loss), repr(h.lr)])


# --------------------------------------------------------------------------
# classification objective
# --------------------------------------------------------------------------


def fit_classifier_head(
    model: Model,
    data: Sequence[tuple[Sequence[int], int]],
    n_classes: int | None = None,
    pooling: str = "last",
    steps: int = 300,
    lr: float = 0.5,
    l2: float = 1e-3,
) -> ClassifierHead:
    """Softmax regression on pooled vanilla final states (full-batch gradient descent).

    Stands in for a task head fine-tuned with the base model: the base stays
    frozen and only this linear layer sees the labels.
    """
    if not data:
        raise NoTrainingSignal("no labelled sequences to fit a head on")
    labels = np.array([int(y) for _, y in data], dtype=np.int64)
    if labels.min() < 0:
        raise ValueError("labels must be non-negative")
    c = int(labels.max()) + 1 if n_classes is None else int(n_classes)
    probe = ClassifierHead(np.zeros((model.config.d_hidden, c)), np.zeros(c), pooling)
    feats = np.array([probe.pool(rms_norm(vanilla_prefill(model, ids).hidden, model.lnf_g)) for ids, _ in data])
    w, b = probe.w, probe.b
    n = len(labels)
    for _ in range(steps):
        _, g = cross_entropy(feats @ w + b, labels)
        w = w - lr * (feats.T @ g / n + l2 * w)
        b = b - lr * g.mean(axis=0)
    return ClassifierHead(w, b, pooling)


def classification_loss(
    model: Model,
    hsm: HSMWeights,
    policy: ExitPolicyConfig,
    token_ids: Sequence[int],
    label: int,
    head: ClassifierHead,
    sim_loss_weight: float = 1.0,
    need_grad: bool = True,
) -> tuple[float, HSMWeights | None]:
    """Similarity + BCE objective for one labelled sequence.

    The class logits come from the pooled final states of a CLASSIFY-mode
    prefill; the similarity term compares every mapped state with its
    vanilla final state (averaged over exited tokens).
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    res = prefill(model, hsm, policy, ids, Mode.CLASSIFY)
    truth = vanilla_prefill(model, ids).hidden
    final = res.final_states
    normed = rms_norm(final, model.lnf_g)
    pooled = head.pool(normed)
    bce, dlogits = bce_with_logits(head.logits(pooled), label)
    loss = bce
    n_exit = sum(len(c.positions) for c in res.hsm_calls)
    if not n_exit:
        return loss, (hsm.zeros_like() if need_grad else None)
    dpooled = dlogits @ head.w.T
    dnormed = np.zeros_like(final)
    if head.pooling == "last":
        dnormed[-1] = dpooled
    else:
        dnormed[:] = dpooled / len(ids)
    dfinal = rms_norm_backward(final, model.lnf_g, dnormed)
    grads = hsm.zeros_like() if need_grad else None
    for call in res.hsm_calls:
        pos = call.positions
        cos, dcos = cosine_and_grad(call.out, truth[pos])
        loss += float(sim_loss_weight * (1.0 - cos).sum()) / n_exit
        if need_grad:
            out, tape = hsm_forward(call.h_i, call.h_prev, call.inertia, hsm)
            g, _ = hsm_backward(tape, dfinal[pos] - sim_loss_weight * dcos / n_exit, hsm)
            for name, a in g.named_arrays():
                getattr(grads, name)[...] += a
    return loss, grads


def train_hsm_classifier(
    model: Model,
    hsm: HSMWeights,
    corpus: Sequence[tuple[Sequence[int], int]],
    policy: ExitPolicyConfig,
    head: ClassifierHead,
    config: TrainConfig,
) -> TrainResult:
    """SIM_BCE training on ``(token_ids, label)`` pairs; the classifier head stays frozen."""
    if not corpus:
        raise NoTrainingSignal("training corpus is empty")
    if config.delta_train is not None:
        policy = policy.with_delta(config.delta_train)
    rng = np.random.default_rng(config.seed)
    w = hsm.copy()
    opt = OptimizerState.for_weights(w, config.lr_init, config.weight_decay)
    sched = PlateauState(config.lr_init, config.factor, config.patience_epochs, config.threshold, config.min_lr)
    result = TrainResult(w)
    weight = config.sim_loss_weight or 1.0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(corpus))
        tot = 0.0
        for s in range(0, len(order), config.batch_size):
            idx = order[s : s + config.batch_size]
            acc = w.zeros_like()
            for i in idx:
                ids, label = corpus[i]
                loss, g = classification_loss(model, w, policy, ids, label, head, weight)
                tot += loss
                for name, a in g.named_arrays():
                    getattr(acc, name)[...] += a / len(idx)
            opt.lr = sched.lr
            w, opt = adamw_step(w, acc, opt)
        mean = tot / len(corpus)
        if epoch == 1:
            result.initial_loss = mean
        result.history.append(EpochStats(epoch, mean, mean, sched.lr))
        sched = plateau_scheduler_step(sched, mean)
    result.hsm = w
    return result
