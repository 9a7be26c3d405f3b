import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from adept.cost_model import DECODER_CATEGORIES
from adept.errors import ContextOverflow, EmptyInput, ShapeError
from adept.exit_policy import ExitPolicyConfig, PolicyKind
from adept.hsm import init_hsm
from adept.model import ModelConfig, Provenance, init_model, vanilla_generate, vanilla_prefill
from adept.runtime import (
    ClassifierHead,
    Mode,
    classify,
    evaluate_lm,
    generate,
    mean_reduction,
    prefill,
    prefill_all_at_once,
    state_alignment,
)
from reference import reference_generate, reference_prefill

NEVER = ExitPolicyConfig(delta=1.0 + 1e-9)
FORCE = ExitPolicyConfig(delta=-1.0)


def _ids(n, seed=0):
    return np.random.default_rng(seed).integers(0, 256, size=n).tolist()


def test_never_exit_is_vanilla(tiny_model, tiny_hsm):
    ids = _ids(20)
    v = vanilla_prefill(tiny_model, ids)
    for pol in (NEVER, ExitPolicyConfig(PolicyKind.NONE)):
        r = prefill(tiny_model, tiny_hsm, pol, ids)
        assert np.array_equal(r.logits, v.logits)
        assert np.array_equal(r.cache.keys, v.cache.keys) and np.array_equal(r.cache.values, v.cache.values)
        assert r.cache.count(Provenance.SYNTHESIZED) == 0
        assert r.ledger.decoder_counts() == v.ledger.decoder_counts()
    assert prefill(tiny_model, tiny_hsm, ExitPolicyConfig(PolicyKind.NONE), ids).ledger == v.ledger


def test_force_exit(tiny_model, tiny_hsm):
    ids = _ids(15)
    r = prefill(tiny_model, tiny_hsm, FORCE, ids)
    assert all(rec.exit_layer == 2 for rec in r.records)
    assert np.all(r.cache.provenance[2:, :15] == Provenance.SYNTHESIZED)
    assert np.all(r.cache.provenance[:2, :15] == Provenance.REAL)


def test_invariants_mixed(tiny_model, tiny_hsm):
    ids = _ids(30, 5)
    for delta in (0.3, 0.9, 0.995, 0.999):
        r = prefill(tiny_model, tiny_hsm, ExitPolicyConfig(delta=delta), ids)
        n = tiny_model.config.n_layers
        assert [rec.token_index for rec in r.records] == list(range(30))
        layers = r.exit_layers
        assert np.all((layers >= 2) & (layers <= n))
        assert np.all(r.cache.provenance[:, :30] != Provenance.EMPTY)
        assert r.cache.count(Provenance.SYNTHESIZED) == int(np.sum(n - layers))
        prev = np.arange(30)
        for act in r.active_sets:
            assert np.all(np.diff(act) > 0) and set(act) <= set(prev)
            prev = act
        assert sum(r.histogram(n)) == 30


def test_synthesized_read_only_by_later_positions(tiny_model, tiny_hsm):
    ids = _ids(25, 2)
    r = prefill(tiny_model, tiny_hsm, ExitPolicyConfig(delta=0.995), ids, trace=True)
    prov = r.cache.provenance
    for layer, reader, upto in r.cache.reads:
        assert upto <= reader
        if prov[layer, reader] == Provenance.SYNTHESIZED:
            pytest.fail("a synthesized slot's own position issued a read at that layer")


def _compare(model, hsm, pol, ids):
    got = prefill(model, hsm, pol, ids)
    finals, recs, logits, cache, ledger = reference_prefill(model, hsm, pol, ids)
    assert [(r.token_index, r.exit_layer) for r in got.records] == [(r.token_index, r.exit_layer) for r in recs]
    for a, b in zip(got.records, recs):
        assert (a.exit_score is None) == (b.exit_score is None)
        if a.exit_score is not None:
            assert abs(a.exit_score - b.exit_score) < 1e-10
    assert np.max(np.abs(got.logits - logits)) < 1e-10
    assert np.array_equal(got.cache.provenance, cache.provenance)
    assert got.ledger == ledger


POLICIES = [
    ExitPolicyConfig(delta=0.8),
    ExitPolicyConfig(delta=0.995),
    ExitPolicyConfig(PolicyKind.INERTIA_LOCAL, delta=0.99),
    ExitPolicyConfig(PolicyKind.INERTIA_BOTH, delta=0.995),
    ExitPolicyConfig(PolicyKind.ALL_AT_ONCE, delta=0.8),
    ExitPolicyConfig(PolicyKind.PATIENCE, patience_t=2),
    ExitPolicyConfig(PolicyKind.ENTROPY, entropy_threshold=5.0),
    ExitPolicyConfig(delta=0.7, min_exit_layer=3),
]


@pytest.mark.parametrize("pol", POLICIES, ids=lambda p: f"{p.kind.value}")
def test_scheduler_matches_reference(tiny_model, tiny_hsm, pol):
    _compare(tiny_model, tiny_hsm, pol, _ids(18, 7))
    _compare(tiny_model, None, pol, _ids(11, 8))


@given(st.integers(0, 10_000))
def test_scheduler_matches_reference_random(seed):
    rng = np.random.default_rng(seed)
    heads = int(rng.integers(1, 3))
    cfg = ModelConfig(int(rng.integers(2, 6)), int(rng.integers(3, 10)), 2 * heads, heads, max_seq=24)
    model = init_model(cfg, seed)
    hsm = init_hsm(cfg.d_hidden, seed) if rng.random() < 0.8 else None
    pol = ExitPolicyConfig(delta=float(1.0 - rng.uniform(0.0, 1.0) ** 3))
    _compare(model, hsm, pol, rng.integers(0, 256, size=int(rng.integers(1, 24))).tolist())


def test_generate_matches_vanilla_when_disabled(tiny_model, tiny_hsm):
    ids = _ids(8, 3)
    g = generate(tiny_model, tiny_hsm, ExitPolicyConfig(PolicyKind.NONE), ids, 10)
    assert g.tokens == vanilla_generate(tiny_model, ids, 10)[0]
    assert g.ledger.decoder_counts() == vanilla_generate(tiny_model, ids, 10)[1].decoder_counts()


def test_generate_force_exit_single(tiny_model, tiny_hsm):
    ids = _ids(5, 3)
    g = generate(tiny_model, tiny_hsm, FORCE, ids, 1)
    assert len(g.tokens) == 1 and g.steps == []
    # max_new=2: the first generated token runs through the stack
    g = generate(tiny_model, tiny_hsm, FORCE, ids, 2)
    (rec,) = g.records
    assert rec.exit_layer == 2 and rec.token_index == 5
    assert np.all(g.cache.provenance[2:, 5] == Provenance.SYNTHESIZED)


def test_generate_matches_reference(tiny_model, tiny_hsm):
    ids = _ids(6, 4)
    for pol in (ExitPolicyConfig(delta=0.995), ExitPolicyConfig(PolicyKind.ENTROPY, entropy_threshold=5.4)):
        g = generate(tiny_model, tiny_hsm, pol, ids, 20)
        toks, recs, cache, ledger = reference_generate(tiny_model, tiny_hsm, pol, ids, 20)
        assert g.tokens == toks
        assert [r.exit_layer for r in g.prefill.records + g.records] == [r.exit_layer for r in recs]
        assert g.ledger == ledger


def test_generate_overflow(tiny_model, tiny_hsm):
    with pytest.raises(ContextOverflow):
        generate(tiny_model, tiny_hsm, NEVER, _ids(30), 3)
    with pytest.raises(EmptyInput):
        prefill(tiny_model, tiny_hsm, NEVER, [])


def test_all_at_once(tiny_model, tiny_hsm):
    ids = _ids(16, 9)
    v = vanilla_prefill(tiny_model, ids)
    assert np.array_equal(prefill_all_at_once(tiny_model, tiny_hsm, NEVER, ids).logits, v.logits)
    r = prefill_all_at_once(tiny_model, tiny_hsm, FORCE, ids)
    assert set(r.exit_layers.tolist()) == {2}
    # point mass vs a spread-out token-level histogram on the same input
    pol = ExitPolicyConfig(delta=0.995)
    tok = prefill(tiny_model, tiny_hsm, pol, ids).histogram(4)
    aao = prefill_all_at_once(tiny_model, tiny_hsm, pol, ids).histogram(4)
    assert sum(c > 0 for c in aao) == 1
    assert sum(c > 0 for c in tok) > 1


def test_classify(tiny_model, tiny_hsm, rng):
    ids = _ids(12, 1)
    head = ClassifierHead(rng.normal(size=(16, 3)), rng.normal(size=3))
    probs, res = classify(tiny_model, tiny_hsm, ExitPolicyConfig(PolicyKind.NONE), ids, head)
    from adept.model import rms_norm, softmax

    v = vanilla_prefill(tiny_model, ids)
    want = softmax(head.logits(rms_norm(v.hidden, tiny_model.lnf_g)[-1]))
    assert np.array_equal(probs, want)
    zero = ClassifierHead(np.zeros((16, 2)), np.zeros(2))
    assert np.allclose(classify(tiny_model, tiny_hsm, FORCE, ids, zero)[0], [0.5, 0.5])
    probs, res = classify(tiny_model, tiny_hsm, FORCE, ids, head)
    assert res.cache.count(Provenance.SYNTHESIZED) == 0
    assert res.ledger.kv_synth == 0
    finals, recs, _, _, _ = reference_prefill(tiny_model, tiny_hsm, FORCE, ids, classify=True)
    want = softmax(head.logits(rms_norm(finals, tiny_model.lnf_g)[-1]))
    assert np.max(np.abs(probs - want)) < 1e-10
    mean_head = ClassifierHead(head.w, head.b, pooling="mean")
    p2, _ = classify(tiny_model, tiny_hsm, FORCE, ids, mean_head)
    assert abs(p2.sum() - 1) < 1e-12
    with pytest.raises(ShapeError):
        classify(tiny_model, tiny_hsm, FORCE, ids, ClassifierHead(np.zeros((5, 2)), np.zeros(2)))


def test_corpus_measurements(tiny_model, tiny_hsm):
    corpus = [_ids(20, s) for s in range(3)]
    never = evaluate_lm(tiny_model, tiny_hsm, NEVER, corpus)
    none = evaluate_lm(tiny_model, None, ExitPolicyConfig(PolicyKind.NONE), corpus)
    assert never.perplexity == none.perplexity
    assert none.reduction == 0.0
    assert mean_reduction(tiny_model, tiny_hsm, FORCE, corpus) > 0.3
    m, r, n = state_alignment(tiny_model, tiny_hsm, FORCE, corpus)
    assert n == 60 and -1 <= m <= 1 and -1 <= r <= 1
    assert np.isnan(state_alignment(tiny_model, tiny_hsm, NEVER, corpus)[0])


def test_classifier_evaluation(tiny_model, tiny_hsm, rng):
    from adept.runtime import evaluate_classifier

    head = ClassifierHead(rng.normal(size=(16, 2)), np.zeros(2), "mean")
    data = [(_ids(10, s), s % 2) for s in range(4)]
    none = evaluate_classifier(tiny_model, tiny_hsm, ExitPolicyConfig(PolicyKind.NONE), data, head)
    assert none.reduction == 0.0 and none.n_sequences == 4
    force = evaluate_classifier(tiny_model, tiny_hsm, FORCE, data, head)
    # no key/value synthesis in CLASSIFY mode, so skipping more layers saves more
    lm = mean_reduction(tiny_model, tiny_hsm, FORCE, [ids for ids, _ in data])
    cls = mean_reduction(tiny_model, tiny_hsm, FORCE, [ids for ids, _ in data], mode=Mode.CLASSIFY)
    assert cls > lm
    assert abs(force.reduction - cls) < 0.02
    assert sum(force.histogram) == 40
