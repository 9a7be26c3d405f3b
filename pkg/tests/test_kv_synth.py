import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from adept.cost_model import CostLedger, kv_synth_flops
from adept.errors import ShapeError
from adept.kv_synth import insert, synthesize_all, synthesize_kv
from adept.model import KVCache, ModelConfig, Provenance, init_model, model_from_arrays, rms_norm


def test_synthesize_kv_examples(rng):
    w = rng.normal(size=(4, 6))
    k, v = synthesize_kv(np.zeros(4), w)
    assert np.array_equal(k, np.zeros(3)) and np.array_equal(v, np.zeros(3))
    w = np.hstack([np.eye(3), 2 * np.eye(3)])
    k, v = synthesize_kv(np.array([1.0, 0.0, 0.0]), w)
    assert np.array_equal(k, [1, 0, 0]) and np.array_equal(v, [2, 0, 0])
    s, w, b = rng.normal(size=6), rng.normal(size=(6, 8)), rng.normal(size=8)
    k, v = synthesize_kv(s, w, b)
    ref = np.array([sum(s[i] * w[i, j] for i in range(6)) + b[j] for j in range(8)])
    assert np.allclose(np.concatenate([k, v]), ref, atol=1e-13)
    with pytest.raises(ShapeError):
        synthesize_kv(np.ones(5), w)


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
def test_linearity(a, b, seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(5, 4))
    x, y = rng.normal(size=5), rng.normal(size=5)
    lhs = np.concatenate(synthesize_kv(a * x + b * y, w))
    rhs = a * np.concatenate(synthesize_kv(x, w)) + b * np.concatenate(synthesize_kv(y, w))
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_synthesize_all(tiny_model, rng):
    n = tiny_model.config.n_layers
    s = rng.normal(size=16)
    assert synthesize_all(s, n, tiny_model) == []
    one = synthesize_all(s, n - 1, tiny_model, token_index=3)
    assert len(one) == 1 and one[0].layer == n and one[0].token_index == 3
    last = tiny_model.layers[n - 1]
    k, v = synthesize_kv(rms_norm(s, last.ln1_g), last.w_kv, last.b_kv)
    assert np.array_equal(one[0].key, k) and np.array_equal(one[0].value, v)
    fwd = synthesize_all(s, 1, tiny_model)
    rev = synthesize_all(s, 1, tiny_model, reverse=True)
    assert [e.layer for e in fwd] == [2, 3, 4]
    for a, b in zip(fwd, rev):
        assert a.layer == b.layer and np.array_equal(a.key, b.key) and np.array_equal(a.value, b.value)


def test_decoupling(rng):
    cfg = ModelConfig(4, 6, 4, 2, vocab_size=8, max_seq=4)
    model = init_model(cfg, 0)
    s = rng.normal(size=6)
    base = synthesize_all(s, 1, model)
    arrays = dict(model.named_arrays())
    arrays = {k: np.array(v) for k, v in arrays.items()}
    arrays["layers.1.w_k"] += rng.normal(size=(6, 4))  # layer 2 (1-based)
    arrays["layers.1.b_v"] += 1.0
    pert = synthesize_all(s, 1, model_from_arrays(cfg, arrays))
    for a, b in zip(base, pert):
        same = np.array_equal(a.key, b.key) and np.array_equal(a.value, b.value)
        assert same == (a.layer != 2)


def test_insert_marks_provenance_and_cost(tiny_model, rng):
    cache = KVCache.for_model(tiny_model.config)
    led = CostLedger()
    insert(cache, synthesize_all(rng.normal(size=16), 2, tiny_model, 0), led, tiny_model.config)
    assert cache.provenance[2, 0] == Provenance.SYNTHESIZED and cache.provenance[3, 0] == Provenance.SYNTHESIZED
    assert cache.provenance[1, 0] == Provenance.EMPTY
    assert led.total == led.kv_synth == 2 * kv_synth_flops(tiny_model.config)
