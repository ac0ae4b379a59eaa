import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcases import CASES, head_instance
from storycut.models import (
    BanModel,
    BanParams,
    LstmCellParams,
    LstmState,
    ProposalHead,
    ProposalHeadParams,
    ban_batch_proba,
    ban_window_forward,
    ff_lstm_forward,
    lstm_cell_forward,
    proposal_head_forward,
    stacked_lstm_forward,
)
from storycut.numerics import ShapeError, sigmoid


def test_zero_cell_outputs_zero():
    p = LstmCellParams.zeros(3, 5)
    st_, h = lstm_cell_forward(p, np.ones(3), LstmState.zeros(5))
    assert np.all(h == 0) and np.all(st_.c == 0)


def test_scalar_cell_by_hand():
    p = LstmCellParams(np.ones((4, 1)), np.zeros((4, 1)), np.zeros(4), np.zeros(1), np.zeros(1))
    st_, h = lstm_cell_forward(p, np.array([1.0]), LstmState.zeros(1))
    s1 = 1.0 / (1.0 + math.exp(-1.0))
    c = s1 * math.tanh(1.0)
    assert st_.c[0] == pytest.approx(c, rel=1e-14)
    assert h[0] == pytest.approx(math.tanh(c) * s1, rel=1e-14)
    assert st_.c[0] == pytest.approx(0.5567, abs=1e-4)
    # tanh(0.5567) * 0.7311 = 0.50553 * 0.7311
    assert h[0] == pytest.approx(0.3696, abs=1e-4)


def test_cell_rejects_bad_width():
    with pytest.raises(ShapeError):
        lstm_cell_forward(LstmCellParams.zeros(3, 2), np.ones(4), LstmState.zeros(2))


def _random_stack(rng, D, H, K, ff):
    layers, width = [], D
    for _ in range(K):
        layers.append(LstmCellParams.random(rng, width, H, 0.5))
        width = H + (4 * H if ff else 0)
    return layers


def _manual_stack(layers, xs, ff):
    states = [LstmState.zeros(c.hidden) for c in layers]
    out = []
    for x in xs:
        inp = x
        for k, cell in enumerate(layers):
            f = cell.W_f @ inp
            states[k], h = lstm_cell_forward(cell, inp, states[k])
            inp = np.concatenate([h, f]) if ff else h
        out.append(h)
    return np.array(out)


def test_single_layer_stack_is_cell_loop():
    rng = np.random.default_rng(0)
    layers = _random_stack(rng, 3, 4, 1, False)
    xs = rng.normal(size=(6, 3))
    ref = _manual_stack(layers, xs, False)
    np.testing.assert_allclose(stacked_lstm_forward(layers, xs), ref, rtol=0, atol=1e-13)
    np.testing.assert_allclose(ff_lstm_forward(layers, xs)[0], ref, rtol=0, atol=1e-13)


def test_zero_stack_outputs_zero():
    layers = [LstmCellParams.zeros(3, 4), LstmCellParams.zeros(4, 4)]
    assert np.all(stacked_lstm_forward(layers, np.ones((5, 3))) == 0)


@pytest.mark.parametrize("ff", [False, True])
def test_three_layer_stack_matches_composition(ff):
    rng = np.random.default_rng(1)
    layers = _random_stack(rng, 3, 4, 3, ff)
    xs = rng.normal(size=(5, 3))
    out = ff_lstm_forward(layers, xs)[0] if ff else stacked_lstm_forward(layers, xs)
    np.testing.assert_allclose(out, _manual_stack(layers, xs, ff), rtol=0, atol=1e-12)


def test_batched_stack_matches_single():
    rng = np.random.default_rng(2)
    layers = _random_stack(rng, 3, 4, 3, True)
    xs = rng.normal(size=(5, 4, 3))
    h, _ = ff_lstm_forward(layers, xs)
    for b in range(4):
        np.testing.assert_allclose(h[:, b], ff_lstm_forward(layers, xs[:, b])[0], rtol=0, atol=1e-13)


def test_stack_width_mismatch():
    rng = np.random.default_rng(0)
    layers = _random_stack(rng, 3, 4, 2, False)
    with pytest.raises(ShapeError):
        ff_lstm_forward(layers, np.ones((4, 3)))


def fast_forward_reduction_error(seed: int) -> float:
    """Max |ff - stacked| after zeroing the columns that read the fast-forward block."""
    rng = np.random.default_rng(seed)
    K = int(rng.integers(2, 6))
    D, H = int(rng.integers(1, 6)), int(rng.integers(1, 6))
    ff_layers = _random_stack(rng, D, H, K, True)
    plain = []
    for k, c in enumerate(ff_layers):
        if k > 0:
            c.W_f[:, H:] = 0.0
            plain.append(LstmCellParams(c.W_f[:, :H].copy(), c.W_h, c.b, c.w_g, c.w_o))
        else:
            plain.append(c)
    xs = rng.normal(size=(int(rng.integers(1, 12)), D))
    return float(np.max(np.abs(ff_lstm_forward(ff_layers, xs)[0] - stacked_lstm_forward(plain, xs))))


def test_fast_forward_reduces_to_stack():
    assert max(fast_forward_reduction_error(s) for s in range(20)) <= 1e-12


def test_ban_zero_params_uniform():
    p = BanParams(LstmCellParams.zeros(5, 3), np.zeros((4, 3)), np.zeros(4))
    np.testing.assert_array_equal(ban_window_forward(p, np.ones((7, 5))), [0.25] * 4)


def test_ban_requires_seven_rows():
    p = BanParams(LstmCellParams.zeros(5, 3), np.zeros((4, 3)), np.zeros(4))
    with pytest.raises(ShapeError):
        ban_window_forward(p, np.ones((6, 5)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ban_probabilities_normalized(seed):
    rng = np.random.default_rng(seed)
    m = BanModel(4, hidden=5, seed=seed % 1000)
    p = m.predict_proba(rng.normal(scale=3, size=(6, 7, 4)))
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_ban_output_permutation():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        m = BanModel(4, hidden=5, seed=seed)
        w = rng.normal(size=(3, 7, 4))
        params = m.params()
        perm = rng.permutation(4)
        permuted = BanParams(params.cell, params.out_W[perm], params.out_b[perm])
        a = ban_batch_proba(params, w)
        b = ban_batch_proba(permuted, w)
        np.testing.assert_allclose(b, a[:, perm], rtol=0, atol=1e-15)
        assert np.array_equal(perm[b.argmax(axis=1)], a.argmax(axis=1))


def _zero_head(D=3, H=4, K=2):
    layers = [LstmCellParams.zeros(D if k == 0 else 5 * H, H) for k in range(K)]
    return ProposalHeadParams(layers, np.zeros(H), np.zeros(1), np.zeros((2, H)), np.zeros(2))


def test_head_zero_params():
    assert proposal_head_forward(_zero_head(), np.ones((6, 3))) == (0.5, 0.0, 0.0)


def test_head_single_step_pool():
    m = ProposalHead(3, hidden=4, num_layers=2, seed=0)
    x = np.random.default_rng(0).normal(size=(1, 3))
    p = m.params()
    h, _ = ff_lstm_forward(p.layers, x)
    logit = h[0] @ p.cls_w + p.cls_b[0]
    assert proposal_head_forward(p, x)[0] == pytest.approx(float(sigmoid(logit)), abs=1e-15)


def test_head_batch_independent_of_companions():
    m, feats, *_ = head_instance(3)
    p, o = m.predict(feats)
    for j, f in enumerate(feats):
        p1, o1 = m.predict([f])
        assert p1[0] == pytest.approx(p[j], abs=1e-14)
        np.testing.assert_allclose(o1[0], o[j], rtol=0, atol=1e-14)


def test_head_rejects_empty_proposal():
    with pytest.raises(ShapeError):
        proposal_head_forward(_zero_head(), np.ones((0, 3)))


@pytest.mark.parametrize("case", sorted(CASES))
def test_gradients_match_finite_differences(case):
    assert max(CASES[case](seed) for seed in range(10)) <= 1e-4
