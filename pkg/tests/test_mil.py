import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dermtriage import mil, nn, synth
from dermtriage.errors import DegenerateLabelsError, EmptyBagError, InvalidInputError, ShapeError
from dermtriage.mil import HIGH_VS_INT, HIGH_VS_REST, INT_VS_REST
from dermtriage.taxonomy import SpecimenClass

HEADS = mil.SUSPECT_SUB_HEADS


def model(in_dim=6, width=8, seed=0, heads=HEADS, rate=0.5):
    return mil.BagModel.init(in_dim, heads, width=width, seed=seed, dropout_rate=rate)


def bag(n=5, dim=6, seed=1):
    return np.random.default_rng(seed).normal(size=(n, dim))


def test_init_widths_and_attention_dim():
    m = model(in_dim=32, width=32)
    assert [l.weight.shape for l in m.encoder.layers] == [(32, 32), (32, 32), (16, 32), (16, 16)]
    assert [l.activation for l in m.encoder.layers] == ["none", "relu", "relu", "relu"]
    assert m.attention.V.shape == (8, 16)


def test_singleton_bag_gets_full_weight():
    h = np.random.default_rng(0).normal(size=(1, 4))
    att = mil.AttentionParams(np.ones((2, 4)), np.ones((2, 4)), np.ones(2))
    pooled, w = mil.attention_pool(h, att)
    np.testing.assert_array_equal(w, [1.0])
    np.testing.assert_array_equal(pooled, h[0])


def test_identical_tiles_share_weight():
    h = np.tile(np.random.default_rng(0).normal(size=(1, 4)), (2, 1))
    att = mil.AttentionParams(*np.random.default_rng(1).normal(size=(2, 3, 4)), np.ones(3))
    _, w = mil.attention_pool(h, att)
    np.testing.assert_allclose(w, [0.5, 0.5], atol=1e-15)


def test_empty_bag_rejected():
    att = mil.AttentionParams(np.ones((2, 4)), np.ones((2, 4)), np.ones(2))
    with pytest.raises(EmptyBagError):
        mil.attention_pool(np.zeros((0, 4)), att)
    with pytest.raises(EmptyBagError):
        mil.SpecimenBag("s", np.zeros((0, 4)))
    with pytest.raises(InvalidInputError):
        mil.SpecimenBag("s", np.array([[np.nan, 1.0]]))


def test_width_mismatch():
    with pytest.raises(ShapeError):
        mil.bag_forward(model(), bag(dim=5))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(0, 10_000))
def test_pooling_is_permutation_invariant(n, seed):
    m = model(seed=seed % 5)
    x = bag(n, seed=seed)
    perm = np.random.default_rng(seed + 1).permutation(n)
    a = mil.bag_forward(m, x)
    b = mil.bag_forward(m, x[perm])
    np.testing.assert_allclose(b.pooled, a.pooled, rtol=0, atol=1e-9)
    np.testing.assert_allclose(b.weights, a.weights[perm], rtol=0, atol=1e-12)
    assert abs(a.weights.sum() - 1.0) < 1e-12 and a.weights.min() >= 0


def test_zero_weight_heads_are_uniform():
    m = model()
    m = m.with_arrays(m.arrays()[:-6] + [np.zeros((2, 4)), np.zeros(2)] * 3)
    out = mil.bag_forward(m, bag())
    for p in out.probs.values():
        np.testing.assert_array_equal(p, [0.5, 0.5])


def test_forward_matches_manual_trace():
    m = model(in_dim=4, width=4, seed=3)
    x = bag(3, 4, seed=4)
    # scalar re-evaluation of the encoder, gated attention and heads
    h = [list(r) for r in x]
    for layer in m.encoder.layers:
        W, b = layer.weight, layer.bias
        nxt = []
        for r in h:
            z = [sum(W[i, j] * r[j] for j in range(len(r))) + b[i] for i in range(W.shape[0])]
            nxt.append([max(0.0, v) for v in z] if layer.activation == "relu" else z)
        h = nxt
    V, U, w = m.attention.V, m.attention.U, m.attention.w
    scores = []
    for r in h:
        s = 0.0
        for k in range(V.shape[0]):
            t = math.tanh(sum(V[k, j] * r[j] for j in range(len(r))))
            g = 1.0 / (1.0 + math.exp(-sum(U[k, j] * r[j] for j in range(len(r)))))
            s += w[k] * t * g
        scores.append(s)
    e = [math.exp(s - max(scores)) for s in scores]
    a = [v / sum(e) for v in e]
    pooled = [sum(a[i] * h[i][j] for i in range(3)) for j in range(len(h[0]))]
    out = mil.bag_forward(m, x)
    np.testing.assert_allclose(out.weights, a, atol=1e-12)
    np.testing.assert_allclose(out.pooled, pooled, atol=1e-12)
    for hd in m.heads:
        z = [sum(hd.weight[i, j] * pooled[j] for j in range(len(pooled))) + hd.bias[i] for i in range(2)]
        p0 = 1.0 / (1.0 + math.exp(z[1] - z[0]))
        np.testing.assert_allclose(out.probs[hd.name], [p0, 1 - p0], atol=1e-12)


def test_forward_is_deterministic():
    m, x = model(), bag()
    a, b = mil.bag_forward(m, x), mil.bag_forward(m, x)
    for k in a.probs:
        np.testing.assert_array_equal(a.probs[k], b.probs[k])
    c = mil.bag_forward(m, x, "mc_sample", seed=[4, 2])
    d = mil.bag_forward(m, x, "mc_sample", seed=[4, 2])
    np.testing.assert_array_equal(c.pooled, d.pooled)


@pytest.mark.parametrize("group,active", [
    ("high", {HIGH_VS_INT, HIGH_VS_REST}),
    ("int", {HIGH_VS_INT, INT_VS_REST}),
    ("rest", {HIGH_VS_REST, INT_VS_REST}),
])
def test_masked_loss_active_tasks(group, active):
    logits = {k: np.random.default_rng(0).normal(size=2) for k in HEADS}
    _, grads = mil.masked_loss(logits, group)
    for k, g in grads.items():
        if k in active:
            assert np.any(g != 0)
        else:
            assert np.all(g == 0.0) and not np.signbit(g).any()


def test_masked_loss_targets():
    # a logit pair strongly favouring the first class of every head
    logits = {k: np.array([10.0, -10.0]) for k in HEADS}
    loss_high, _ = mil.masked_loss(logits, "high")
    loss_int, _ = mil.masked_loss(logits, "int")
    loss_rest, _ = mil.masked_loss(logits, "rest")
    assert loss_high < 1e-8
    assert loss_int == pytest.approx(10.0, abs=1e-6)
    assert loss_rest == pytest.approx(20.0, abs=1e-6)


@pytest.mark.parametrize("group", ["high", "int", "rest"])
def test_masked_loss_uniform_is_ln2(group):
    loss, _ = mil.masked_loss({k: np.zeros(2) for k in HEADS}, group)
    assert loss == pytest.approx(math.log(2), abs=1e-15)


def test_masked_loss_unknown_group():
    with pytest.raises(InvalidInputError):
        mil.masked_loss({k: np.zeros(2) for k in HEADS}, "low")


@pytest.mark.parametrize("group", ["high", "int", "rest"])
def test_inactive_head_parameters_get_zero_gradient(group):
    m, x = model(), bag()
    out = mil.bag_forward(m, x)
    _, dlog = mil.masked_loss(out.logits, group)
    grads = mil.bag_backward(m, out, dlog)
    inactive = (set(HEADS) - set(mil.TASK_MASK[group])).pop()
    i = 2 * len(m.encoder.layers) + 3 + 2 * m.head_names.index(inactive)
    assert np.all(grads[i] == 0.0) and np.all(grads[i + 1] == 0.0)


def test_small_model_gradient_check():
    m, x = model(in_dim=5, width=8, seed=2), bag(7, 5, seed=3)

    def closure(arrays):
        q = m.with_arrays(arrays)
        out = mil.bag_forward(q, x)
        loss, dlog = mil.masked_loss(out.logits, "int")
        return loss, mil.bag_backward(q, out, dlog)
    rep = nn.grad_check(closure, m.arrays())
    assert rep.max_rel_error < 1e-4, rep


def test_mc_forward_matches_single_passes():
    m, x = model(), bag(9)
    probs = mil.mc_forward(m, x, 5, seed=[3, 1], max_elements=20)
    for t in range(5):
        out = mil.bag_forward(m, x, "mc_sample", seed=mil.mc_pass_seed([3, 1], t))
        for k in HEADS:
            np.testing.assert_allclose(probs[k][t], out.probs[k], atol=1e-12)


def test_mc_forward_without_dropout_repeats_deterministic_pass():
    m, x = model(rate=0.0), bag()
    probs = mil.mc_forward(m, x, 4, seed=0)
    det = mil.bag_forward(m, x).probs
    for k in HEADS:
        np.testing.assert_array_equal(probs[k], np.repeat(det[k][None], 4, axis=0))


# ---------------------------------------------------------------------------
# training


def _separable_bags(seed=0):
    protos = synth.PrototypeSet.make(32, delta=2.0, sigma=0.2, seed=seed)
    counts = {c: 0 for c in synth.CLASSES}
    rng = np.random.default_rng(seed)
    params = synth.BagParams((10, 30), (0.1, 0.4))
    bags = []
    for i in range(80):
        cls = SpecimenClass.BASALOID if i % 2 else SpecimenClass.SQUAMOUS
        split = "train" if i < 60 else "val"
        bags.append(synth.gen_specimen(cls, protos, params, rng, f"b{i}", split=split))
    return bags


BINARY = {"task": ("basaloid", "squamous")}
OBJ = mil.SingleHeadObjective("task", lambda b: 0 if b.label == SpecimenClass.BASALOID else 1)


@pytest.fixture(scope="module")
def trained():
    bags = _separable_bags()
    train = [b for b in bags if b.split == "train"]
    val = [b for b in bags if b.split == "val"]
    m = mil.BagModel.init(32, BINARY, width=32, seed=0, dropout_rate=0.0)
    cfg = mil.FitConfig(max_epochs=30, patience=10, lr=1e-3, seed=0)
    best, log = mil.fit(m, train, val, OBJ, cfg)
    return m, best, log, train, val, cfg


def test_fit_separates_synthetic_bags(trained):
    _, best, _, _, val, _ = trained
    correct = [np.argmax(mil.bag_forward(best, b).probs["task"]) == OBJ.target(b) for b in val]
    assert np.mean(correct) >= 0.95


def test_attention_learns_salience(trained):
    _, best, _, train, _, _ = trained
    mass, frac = [], []
    for b in train:
        w = mil.bag_forward(best, b).weights
        mass.append(w[b.diagnostic_idx].sum())
        frac.append(len(b.diagnostic_idx) / b.n_tiles)
    assert np.mean(mass) > np.mean(frac)


def test_fit_is_deterministic(trained):
    m, best, log, train, val, cfg = trained
    again, log2 = mil.fit(m, train, val, OBJ, cfg)
    for a, b in zip(best.arrays(), again.arrays()):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal([e["val_loss"] for e in log.epochs], [e["val_loss"] for e in log2.epochs])
    np.testing.assert_array_equal([e["train_loss"] for e in log.epochs], [e["train_loss"] for e in log2.epochs])


def test_fit_keeps_best_validation_epoch(trained):
    _, _, log, _, _, _ = trained
    best = min(e["val_loss"] for e in log.epochs)
    assert log.best_val_loss == best
    assert log.epochs[log.best_epoch]["val_loss"] == best


def test_fit_zero_epochs_returns_start(trained):
    m, _, _, train, val, _ = trained
    out, log = mil.fit(m, train, val, OBJ, mil.FitConfig(max_epochs=0))
    assert out is m and log.best_epoch == 0


def test_fit_errors():
    bags = _separable_bags()
    m = mil.BagModel.init(32, BINARY, width=8)
    only = [b for b in bags if b.label == SpecimenClass.BASALOID]
    with pytest.raises(DegenerateLabelsError):
        mil.fit(m, only, only, OBJ, mil.FitConfig(max_epochs=1))
    with pytest.raises(InvalidInputError):
        mil.fit(m, bags, [], OBJ, mil.FitConfig(max_epochs=1))


def test_gradient_accumulation_and_class_weights_run():
    bags = _separable_bags()[:20]
    m = mil.BagModel.init(32, BINARY, width=8, dropout_rate=0.5)
    out, log = mil.fit(m, bags[:14], bags[14:], OBJ,
                       mil.FitConfig(max_epochs=2, lr=1e-3, accumulate=4, class_weighted=True))
    assert len(log.epochs) == 3
