import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

from stap import numerics as nx
from stap import temporal as tp


def _gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))


def _ln(v, eps=nx.LN_EPS):
    return (v - v.mean()) / np.sqrt(v.var() + eps)


def naive_scan(x, delta, lam, B, C, D):
    """Step-by-step loop, one frame at a time; independent of the library's vectorised scan."""
    T = x.shape[0]
    h = np.zeros(lam.shape[0])
    out = []
    for t in range(T):
        h = np.exp(-delta[t] * lam) * h + delta[t] * (B @ x[t])
        out.append(C @ h + D * x[t])
    return np.array(out)


def naive_attention(x, Wq, Wk, Wv, Wo, win=None):
    T = x.shape[0]
    out = np.zeros((T, Wo.shape[0]))
    for t in range(T):
        q = Wq @ x[t]
        js = [j for j in range(T) if win is None or abs(j - t) <= win[t]]
        s = np.array([q @ (Wk @ x[j]) for j in js]) / math.sqrt(Wq.shape[0])
        p = np.exp(s - s.max())
        p /= p.sum()
        out[t] = Wo @ sum(pj * (Wv @ x[j]) for pj, j in zip(p, js))
    return out


def _scorer(rng, d=4, h=5):
    return (rng.standard_normal((h, d)), rng.standard_normal(h), rng.standard_normal((1, h)),
            rng.standard_normal(1))


# --- frame scoring ---------------------------------------------------------

def test_constant_sequence_equal_weights():
    rng = np.random.default_rng(0)
    x = np.tile(rng.standard_normal(4), (6, 1))
    out, _ = tp.score_frames(x, *_scorer(rng))
    assert np.ptp(out.w) == 0.0
    np.testing.assert_allclose(out.anchor, np.tanh(_ln(x[0])), atol=1e-12)


def test_single_frame():
    rng = np.random.default_rng(1)
    W1, b1, W2, b2 = _scorer(rng)
    x = rng.standard_normal((1, 4))
    out, _ = tp.score_frames(x, W1, b1, W2, b2)
    assert out.w[0] == pytest.approx(expit(W2[0] @ _gelu(b1) + b2[0]), abs=1e-14)
    np.testing.assert_allclose(out.anchor, np.tanh(_ln(x[0])), atol=1e-12)


def test_jump_gets_highest_score():
    d, T, j = 4, 20, 11
    rng = np.random.default_rng(2)
    steps = rng.standard_normal((T, d)) * 0.01
    steps[j] = 5.0 * np.ones(d) / 2.0
    x = np.cumsum(steps, axis=0)
    out, _ = tp.score_frames(x, np.eye(d), np.zeros(d), np.ones((1, d)), np.zeros(1))
    assert int(np.argmax(out.u)) == j


# --- step size -------------------------------------------------------------

def test_delta_score_endpoints():
    cfg = tp.SSMConfig(delta_base=0.1, alpha=1.0)
    x = np.zeros((2, 3))
    d, _ = tp.compute_delta(x, np.array([1.0, 0.0]), np.zeros(3), cfg)
    np.testing.assert_allclose(d, [0.1, 0.2], atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["score", "anchor"]))
def test_delta_within_clamp(seed, mode):
    rng = np.random.default_rng(seed)
    cfg = tp.SSMConfig(delta_base=0.5, alpha=3.0, rho=2.0, delta_min=0.2, delta_max=0.8, delta_mode=mode)
    d, _ = tp.compute_delta(rng.standard_normal((7, 3)), rng.uniform(0, 1, 7), rng.standard_normal(3), cfg)
    assert np.all((d >= 0.2) & (d <= 0.8))


def test_ssm_config_validation():
    with pytest.raises(ValueError):
        tp.SSMConfig(delta_mode="fast")
    with pytest.raises(ValueError):
        tp.SSMConfig(delta_min=0.5, delta_base=0.1)


# --- scan ------------------------------------------------------------------

def test_decay_free_integrator_is_cumsum():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((9, 3))
    y, _ = tp.ssm_scan(x, np.ones(9), np.full(3, -60.0), np.eye(3), np.eye(3), np.zeros(3))
    np.testing.assert_allclose(y, np.cumsum(x, axis=0), atol=1e-12)


def test_scan_matches_loop_oracle():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((8, 3))
    delta = rng.uniform(0.05, 0.9, 8)
    raw = rng.standard_normal(5)
    B, C, D = rng.standard_normal((5, 3)), rng.standard_normal((3, 5)), rng.standard_normal(3)
    y, _ = tp.ssm_scan(x, delta, raw, B, C, D)
    lam = np.log1p(np.exp(raw))
    np.testing.assert_allclose(y, naive_scan(x, delta, lam, B, C, D), atol=1e-12)
    yb, _ = tp.ssm_scan(x, delta, raw, B, C, D, direction="backward")
    np.testing.assert_allclose(yb, naive_scan(x[::-1], delta[::-1], lam, B, C, D)[::-1], atol=1e-12)


def test_palindrome_symmetry():
    rng = np.random.default_rng(5)
    half = rng.standard_normal((4, 3))
    x = np.concatenate([half, half[:3][::-1]])          # T = 7
    dh = rng.uniform(0.1, 0.6, 4)
    delta = np.concatenate([dh, dh[:3][::-1]])
    args = (rng.standard_normal(4), rng.standard_normal((4, 3)), rng.standard_normal((3, 4)), np.zeros(3))
    yf, _ = tp.ssm_scan(x, delta, *args, direction="forward")
    yb, _ = tp.ssm_scan(x, delta, *args, direction="backward")
    np.testing.assert_allclose(yf, yb[::-1], atol=1e-12)


def test_bidirectional_zero_input():
    rng = np.random.default_rng(6)
    y, _ = tp.bidirectional_ssm(np.zeros((5, 3)), np.full(5, 0.3), rng.standard_normal(4),
                                rng.standard_normal((4, 3)), rng.standard_normal((3, 4)), rng.standard_normal(3))
    assert np.all(y == 0.0)


def test_bidirectional_length_one():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((1, 3))
    B, C, D = rng.standard_normal((4, 3)), rng.standard_normal((3, 4)), rng.standard_normal(3)
    y, _ = tp.bidirectional_ssm(x, np.array([0.4]), rng.standard_normal(4), B, C, D)
    np.testing.assert_allclose(y[0], 2 * (C @ (0.4 * B @ x[0])) + 2 * D * x[0], atol=1e-13)


def test_bidirectional_is_sum_of_directions():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((2, 6, 3))
    args = (rng.uniform(0.1, 0.5, (2, 6)), rng.standard_normal(4), rng.standard_normal((4, 3)),
            rng.standard_normal((3, 4)), rng.standard_normal(3))
    y, _ = tp.bidirectional_ssm(x, *args)
    f, _ = tp.ssm_scan(x, *args, direction="forward")
    b, _ = tp.ssm_scan(x, *args, direction="backward")
    assert np.array_equal(y, f + b)


# --- attention -------------------------------------------------------------

def _attn_weights(rng, d=5, da=4):
    return (rng.standard_normal((da, d)), rng.standard_normal((da, d)), rng.standard_normal((da, d)),
            rng.standard_normal((d, da)))


def test_full_window_equals_dense_oracle():
    rng = np.random.default_rng(9)
    T = 16
    x = rng.standard_normal((T, 5))
    W = _attn_weights(rng)
    y, _ = tp.sparse_attention(x, *W, tp.SparseAttnConfig(d_a=4, w_base=T, beta=0.0))
    assert np.max(np.abs(y - naive_attention(x, *W))) < 1e-10


def test_adaptive_window_equals_masked_oracle():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((12, 5))
    W = _attn_weights(rng)
    cfg = tp.SparseAttnConfig(d_a=4, w_base=1.0, beta=0.6)
    y, _ = tp.sparse_attention(x, *W, cfg)
    win = tp.attention_windows(x, cfg.w_base, cfg.beta)
    assert np.max(np.abs(y - naive_attention(x, *W, win))) < 1e-10
    yd, _ = tp.dense_attention(x, *W, windows=win)
    assert np.max(np.abs(y - yd)) < 1e-10


def test_single_frame_attention_is_value_projection():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((1, 5))
    Wq, Wk, Wv, Wo = _attn_weights(rng)
    y, _ = tp.sparse_attention(x, Wq, Wk, Wv, Wo, tp.SparseAttnConfig(d_a=4))
    np.testing.assert_allclose(y[0], Wo @ Wv @ x[0], atol=1e-13)


def test_window_locality():
    rng = np.random.default_rng(12)
    x = rng.standard_normal((10, 3))
    flat = tp.attention_windows(x, 3.0, 0.0)
    assert np.all(flat == 3)
    base = tp.attention_windows(x, 1.0, 0.5)
    x2 = x.copy()
    x2[4] *= 10
    bumped = tp.attention_windows(x2, 1.0, 0.5)
    assert bumped[4] > base[4]
    assert np.array_equal(np.delete(bumped, 4), np.delete(base, 4))


def test_round_half_away_from_zero():
    np.testing.assert_array_equal(tp.round_half_away(np.array([0.5, 1.5, 2.5, -0.5, 2.49])),
                                  [1, 2, 3, -1, 2])


# --- fusion ----------------------------------------------------------------

def test_equal_gate_logits():
    rng = np.random.default_rng(13)
    d = 3
    out, _ = tp.gated_fusion(rng.standard_normal((4, d)), rng.standard_normal((4, d)),
                             rng.standard_normal((4, d)), rng.standard_normal(d),
                             np.zeros((3, 3 * d)), np.zeros(3), np.eye(d), np.zeros(d))
    np.testing.assert_allclose(out.gates, 1 / 3, atol=1e-15)


def test_zero_pathways_leave_residual():
    rng = np.random.default_rng(14)
    d = 3
    x = rng.standard_normal((5, d))
    Wres, bres = rng.standard_normal((d, d)), rng.standard_normal(d)
    z = np.zeros((5, d))
    out, _ = tp.gated_fusion(x, z, z, np.zeros(d), rng.standard_normal((3, 3 * d)),
                             rng.standard_normal(3), Wres, bres)
    np.testing.assert_allclose(out.V_seq, x @ Wres.T + bres, atol=1e-14)


def test_gates_on_simplex_sweep():
    rng = np.random.default_rng(15)
    d = 4
    for _ in range(100):
        out, _ = tp.gated_fusion(*(rng.standard_normal((2, 6, d)) * 3 for _ in range(3)),
                                 rng.standard_normal((2, d)), rng.standard_normal((3, 3 * d)) * 3,
                                 rng.standard_normal(3), rng.standard_normal((d, d)), rng.standard_normal(d))
        assert np.all(out.gates >= 0)
        np.testing.assert_allclose(out.gates.sum(axis=1), 1.0, atol=1e-9)


# --- encoder ---------------------------------------------------------------

def _encoder(d_v=6, seed=0, **kw):
    store = nx.ParameterStore()
    enc = tp.TemporalEncoder(store, d_v, np.random.default_rng(seed), tp.SSMConfig(d_h=4),
                             tp.SparseAttnConfig(d_a=3, w_base=1.0, beta=0.0), d_score=5, **kw)
    return store, enc


def test_encoder_shapes_and_determinism():
    _, enc = _encoder()
    x = np.random.default_rng(1).standard_normal((7, 6))
    a = tp.temporal_forward(x, enc)
    b = tp.temporal_forward(x, enc)
    assert a.V.shape == (6,) and a.V_seq.shape == (7, 6)
    assert np.array_equal(a.V_seq, b.V_seq)


@pytest.mark.parametrize("flags", [{}, {"use_scoring": False}, {"use_ssm": False},
                                   {"use_attention": False}])
def test_encoder_gradient(flags):
    store, enc = _encoder(**flags)
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 5, 6))
    names = store.names()
    proj_seq, proj_v = rng.standard_normal((2, 5, 6)), rng.standard_normal((2, 6))

    def kernel(xx, *params):
        for n, p in zip(names, params):
            store[n].value[...] = p
        store.zero_grad()
        out, vjp = enc.forward(xx)
        val = float(np.sum(out.V_seq * proj_seq) + np.sum(out.V * proj_v))

        def back(g):
            gx = vjp(proj_seq * g, proj_v * g)
            return (gx,) + tuple(store[n].grad.copy() for n in names)
        return val, back
    pt = [x] + [store[n].value.copy() for n in names]
    rep = nx.grad_check(kernel, pt, probes=60, tol=1e-4)
    assert rep.passed, rep
