import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from adept.errors import NoTrainingSignal, ShapeError, TooShort, ZeroState
from adept.exit_policy import ExitPolicyConfig
from adept.hsm import init_hsm
from adept.model import ModelConfig, init_model
from adept.runtime import ClassifierHead
from adept.training import (
    LossKind,
    OptimizerState,
    PlateauState,
    TrainConfig,
    adamw_step,
    classification_loss,
    collect_exits,
    hsm_objective,
    lm_loss,
    plateau_scheduler_step,
    sim_bce_loss,
    train_hsm,
    train_hsm_classifier,
    write_history_csv,
)
from hsm_check import head_path_gradcheck, layer_state_batch, rel_err

MIXED = ExitPolicyConfig(delta=0.995)


def _fd(f, x, step=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + step
        lp = f(x)
        x[i] = old - step
        lm = f(x)
        x[i] = old
        g[i] = (lp - lm) / (2 * step)
    return g


def test_lm_loss_examples(rng):
    loss, _ = lm_loss(np.zeros((3, 4)), [0, 1, 2])
    assert abs(loss - math.log(4)) < 1e-12
    big = np.full((3, 4), -50.0)
    big[0, 1] = big[1, 2] = 50.0
    assert lm_loss(big, [0, 1, 2])[0] < 1e-30
    logits = rng.normal(size=(3, 5))
    ids = [4, 0, 3]
    _, g = lm_loss(logits, ids)
    num = _fd(lambda x: lm_loss(x, ids)[0], logits.copy())
    assert np.max(np.abs(num - g)) < 1e-6
    assert np.all(g[-1] == 0)
    with pytest.raises(TooShort):
        lm_loss(np.zeros((1, 4)), [3])


def test_sim_bce(rng):
    s = rng.normal(size=6)
    z = rng.normal(size=2)
    assert abs(sim_bce_loss(s, s, z, 1, 3.0)[0] - sim_bce_loss(s, s, z, 1, 0.0)[0]) < 1e-12
    assert abs(sim_bce_loss(-s, s, z, 1, 3.0)[0] - sim_bce_loss(s, s, z, 1, 0.0)[0] - 6.0) < 1e-12
    t = rng.normal(size=6)
    _, ds, dz = sim_bce_loss(s, t, z, 0, 1.7)
    assert np.max(np.abs(_fd(lambda x: sim_bce_loss(x, t, z, 0, 1.7)[0], s.copy()) - ds)) < 1e-6
    assert np.max(np.abs(_fd(lambda x: sim_bce_loss(s, t, x, 0, 1.7)[0], z.copy()) - dz)) < 1e-6
    with pytest.raises(ZeroState):
        sim_bce_loss(np.zeros(6), t, z, 0)
    with pytest.raises(ShapeError):
        sim_bce_loss(s, t[:5], z, 0)


def test_adamw_examples():
    w = init_hsm(4, 0)
    z = w.zeros_like()
    w2, st2 = adamw_step(w, z, OptimizerState.for_weights(w, 1e-2, 0.0))
    assert np.array_equal(w2.flat(), w.flat()) and st2.step == 1
    # constant gradient: bias-corrected first step moves each entry by lr * sign(g)
    g = w.map(lambda a: np.full_like(a, -0.3))
    w3, _ = adamw_step(w, g, OptimizerState.for_weights(w, 1e-2, 0.0))
    assert np.allclose(w3.flat() - w.flat(), 1e-2, rtol=1e-6)
    w4, _ = adamw_step(w, z, OptimizerState.for_weights(w, 1e-2, 0.1))
    assert np.allclose(w4.flat(), w.flat() * (1 - 1e-3), rtol=0, atol=1e-15)
    # inputs are untouched
    assert np.array_equal(w.flat(), init_hsm(4, 0).flat())
    with pytest.raises(ShapeError):
        adamw_step(w, init_hsm(5, 0), OptimizerState.for_weights(w))


def _run_sched(metrics, lr=1e-3):
    s = PlateauState(lr)
    out = []
    for m in metrics:
        s = plateau_scheduler_step(s, m)
        out.append(s.lr)
    return out


def test_plateau_examples():
    assert _run_sched([5.0, 4.0, 3.0, 2.0]) == [1e-3] * 4
    # first epoch sets the reference; two flat epochs after it halve once
    assert _run_sched([1.0, 1.0, 1.0]) == [1e-3, 1e-3, 5e-4]
    assert _run_sched([1.0, 1.0, 1.0, 1.0]) == [1e-3, 1e-3, 5e-4, 5e-4]
    # a 0.5% drop is inside the 1e-2 relative threshold
    assert _run_sched([1.0, 0.995, 0.995])[-1] == 5e-4
    assert _run_sched([1.0, 1.0, 1.0], lr=1.5e-9)[-1] == 1e-9
    with pytest.raises(ValueError):
        PlateauState(1e-3, factor=1.0)


@given(st.lists(st.floats(0.0, 10.0), min_size=1, max_size=12))
def test_plateau_lr_never_increases(metrics):
    lrs = _run_sched(metrics)
    assert all(b <= a for a, b in zip([1e-3] + lrs, lrs))
    assert min(lrs) >= 1e-9


def _corpus(n, length, seed):
    rng = np.random.default_rng(seed)
    return [rng.integers(0, 256, size=length).tolist() for _ in range(n)]


def test_train_decreases_loss_and_freezes_base(tiny_model, tiny_hsm):
    corpus = _corpus(2, 32, 0)  # 64 tokens
    before = {n: a.copy() for n, a in tiny_model.named_arrays()}
    cfg = TrainConfig(epochs=1, batch_size=2, lr_init=1e-3)
    res = train_hsm(tiny_model, tiny_hsm, corpus, MIXED, cfg)
    assert hsm_objective(tiny_model, res.hsm, corpus, MIXED) < hsm_objective(tiny_model, tiny_hsm, corpus, MIXED)
    for n, a in tiny_model.named_arrays():
        assert a.tobytes() == before[n].tobytes()
    assert len(res.history) == 1 and res.history[0].lr == 1e-3
    assert not np.array_equal(res.hsm.flat(), tiny_hsm.flat())


def test_train_deterministic(tiny_model, tiny_hsm, tmp_path):
    corpus = _corpus(4, 20, 1)
    cfg = TrainConfig(epochs=2, batch_size=2, sim_loss_weight=1.0, seed=5)
    a = train_hsm(tiny_model, tiny_hsm, corpus, MIXED, cfg)
    b = train_hsm(tiny_model, tiny_hsm, corpus, MIXED, cfg)
    assert a.hsm.flat().tobytes() == b.hsm.flat().tobytes()
    assert a.history == b.history
    write_history_csv(a.history, tmp_path / "a.csv")
    write_history_csv(b.history, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "epoch,train_loss,val_loss,lr"


def test_no_training_signal(tiny_model, tiny_hsm):
    cfg = TrainConfig(delta_train=1.0 + 1e-9, epochs=1)
    with pytest.raises(NoTrainingSignal):
        train_hsm(tiny_model, tiny_hsm, _corpus(2, 10, 0), MIXED, cfg)
    with pytest.raises(NoTrainingSignal):
        train_hsm(tiny_model, tiny_hsm, [], MIXED, TrainConfig())
    with pytest.raises(ValueError):
        TrainConfig(min_lr=0.0)


def test_collect_exits_skips_last_position(tiny_model, tiny_hsm):
    ids = _corpus(1, 10, 3)[0]
    b = collect_exits(tiny_model, tiny_hsm, ExitPolicyConfig(delta=-1.0), [ids], with_truth=True)
    assert len(b) == 9 and np.array_equal(b.targets, ids[1:])


@pytest.mark.parametrize("sim_w", [0.0, 2.0])
def test_end_to_end_gradcheck_two_layer(sim_w):
    model = init_model(ModelConfig(2, 8, 8, 2, max_seq=16), 11)
    hsm = init_hsm(8, 12)
    batch = layer_state_batch(model, _corpus(1, 12, 4)[0], 2)
    assert head_path_gradcheck(model, hsm, batch, sim_w) < 1e-4


def test_end_to_end_gradcheck_run_derived(tiny_model, tiny_hsm):
    batch = collect_exits(tiny_model, tiny_hsm, MIXED, _corpus(2, 16, 6), with_truth=True)
    assert len(batch) > 0
    assert head_path_gradcheck(tiny_model, tiny_hsm, batch, 1.0) < 1e-4


def test_classification_training(tiny_model, tiny_hsm, rng):
    head = ClassifierHead(rng.normal(size=(16, 2)), np.zeros(2))
    ids = _corpus(1, 12, 8)[0]
    loss, g = classification_loss(tiny_model, tiny_hsm, MIXED, ids, 1, head)
    assert math.isfinite(loss) and g.flat().shape == tiny_hsm.flat().shape
    # one forced-exit token: no synthesized key/value feeds another token, so the
    # stop-gradient drops nothing and the directional derivative must match
    force = ExitPolicyConfig(delta=-1.0)
    ids = ids[:1]
    _, g = classification_loss(tiny_model, tiny_hsm, force, ids, 1, head)
    d = rng.normal(size=g.flat().size)
    w = tiny_hsm.copy()
    base = w.flat()

    def f(t):
        w.assign_flat(base + t * d)
        return classification_loss(tiny_model, w, force, ids, 1, head, need_grad=False)[0]

    h = 1e-7
    num = (4 * (f(h / 2) - f(-h / 2)) / h - (f(h) - f(-h)) / (2 * h)) / 3
    assert rel_err(np.array(num), np.array(g.flat() @ d)) < 1e-4
    data = [(c, i % 2) for i, c in enumerate(_corpus(4, 12, 9))]
    res = train_hsm_classifier(tiny_model, tiny_hsm, data, MIXED, head, TrainConfig(epochs=1, loss_kind=LossKind.SIM_BCE))
    assert len(res.history) == 1
