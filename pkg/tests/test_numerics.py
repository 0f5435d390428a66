import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stap import numerics as nx

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


# --- softmax ---------------------------------------------------------------

def test_softmax_uniform_on_equal_logits():
    out, _ = nx.softmax_rows(np.zeros(3))
    np.testing.assert_allclose(out, [1 / 3] * 3, atol=1e-15)


def test_softmax_ln2():
    out, _ = nx.softmax_rows(np.array([math.log(2.0), 0.0]))
    np.testing.assert_allclose(out, [2 / 3, 1 / 3], atol=1e-15)


def test_softmax_large_logit_is_stable():
    with np.errstate(over="raise"):
        out, _ = nx.softmax_rows(np.array([1000.0, 0.0]))
    assert abs(out[0] - 1.0) < 1e-12 and out[1] < 1e-12


def test_softmax_temperature_sharpens():
    x = np.array([1.0, 0.0, -0.5])
    hot, _ = nx.softmax_rows(x, temperature=2.0)
    cold, _ = nx.softmax_rows(x, temperature=0.5)
    assert cold.max() > hot.max()


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, (4, 5), elements=finite), st.floats(0.05, 10.0))
def test_softmax_rows_normalised(x, tau):
    out, _ = nx.softmax_rows(x, temperature=tau)
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)


# --- layer norm ------------------------------------------------------------

def test_layer_norm_constant_row_is_zero():
    out, _ = nx.layer_norm(np.full((1, 4), 3.0), np.ones(4), np.zeros(4))
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, 0.0, atol=1e-12)


def test_layer_norm_already_normalised():
    out, _ = nx.layer_norm(np.array([1.0, -1.0]), np.ones(2), np.zeros(2))
    # eps shrinks the result by sqrt(1 / (1 + eps))
    np.testing.assert_allclose(out, [1.0, -1.0], atol=1e-5)


def test_layer_norm_zero_gain_returns_bias():
    rng = np.random.default_rng(0)
    out, _ = nx.layer_norm(rng.standard_normal((3, 5)), np.zeros(5), np.full(5, 5.0))
    np.testing.assert_allclose(out, 5.0)


# --- huber -----------------------------------------------------------------

@pytest.mark.parametrize("r,expected", [(0.0, 0.0), (0.5, 0.125), (2.0, 1.5), (-2.0, 1.5)])
def test_huber_branches(r, expected):
    val, _ = nx.huber_loss(np.array([r]), np.array([0.0]), 1.0)
    assert val == pytest.approx(expected, abs=1e-15)


def test_huber_linear_branch_gradient():
    kernel = lambda p, t: nx.huber_loss(p, t, 1.0)
    rep = nx.grad_check(kernel, [np.array([2.0]), np.array([0.0])], tol=1e-6)
    assert rep.passed, rep


# --- KL --------------------------------------------------------------------

def test_kl_identical_is_zero():
    p = np.array([0.2, 0.3, 0.5])
    assert nx.kl_divergence(p, p)[0].value == pytest.approx(0.0, abs=1e-15)


def test_kl_one_hot_vs_uniform():
    res, _ = nx.kl_divergence(np.array([1.0, 0.0]), np.array([0.5, 0.5]))
    assert res.value == pytest.approx(math.log(2.0), abs=1e-12)
    assert not res.clamped


def test_kl_zero_in_q_is_floored_and_flagged():
    res, _ = nx.kl_divergence(np.array([0.5, 0.5]), np.array([1.0, 0.0]))
    assert math.isfinite(res.value) and res.clamped
    expected = 0.5 * math.log(0.5) + 0.5 * (math.log(0.5) - math.log(nx.KL_EPS))
    assert res.value == pytest.approx(expected, rel=1e-12)


def test_kl_rejects_unnormalised_p():
    with pytest.raises(nx.DataError):
        nx.kl_divergence(np.array([0.6, 0.6]), np.array([0.5, 0.5]))


# --- grad_check ------------------------------------------------------------

def test_grad_check_matmul_random_point():
    rng = np.random.default_rng(3)
    rep = nx.grad_check(nx.matmul, [rng.standard_normal((4, 3)), rng.standard_normal((3, 2))])
    assert rep.passed and rep.max_rel_error < 1e-6


def test_grad_check_catches_scaled_backward():
    def broken(a, b):
        out, vjp = nx.matmul(a, b)
        return out, lambda g: tuple(1.01 * x for x in vjp(g))
    rng = np.random.default_rng(3)
    rep = nx.grad_check(broken, [rng.standard_normal((4, 3)), rng.standard_normal((3, 2))])
    assert not rep.passed
    assert rep.max_rel_error == pytest.approx(0.01 / 1.01, rel=1e-3)


def test_grad_check_step_bounds():
    with pytest.raises(ValueError):
        nx.grad_check(nx.tanh, [np.zeros(2)], step=1e-2)


def test_grad_check_nonfinite_forward():
    with pytest.raises(nx.EvaluationError), np.errstate(over="ignore"):
        nx.grad_check(nx.exp, [np.array([1e4])])


def test_grad_check_probes_every_coordinate_when_few():
    rep = nx.grad_check(nx.tanh, [np.array([0.1, -0.4, 0.9])], probes=20)
    assert rep.probes == 3


# --- parameters ------------------------------------------------------------

def test_store_flat_roundtrip():
    store = nx.ParameterStore()
    store.add("a", np.arange(6.0).reshape(2, 3))
    store.add("b", np.array([7.0]))
    flat = store.get_flat()
    np.testing.assert_array_equal(flat, np.r_[np.arange(6.0), 7.0])
    store.set_flat(flat * 2)
    np.testing.assert_array_equal(store["a"].value, np.arange(6.0).reshape(2, 3) * 2)
    assert store.size() == 7


def test_store_rejects_duplicates_and_bad_grads():
    store = nx.ParameterStore()
    store.add("w", np.zeros(3))
    with pytest.raises(KeyError):
        store.add("w", np.zeros(3))
    with pytest.raises(nx.ShapeError):
        store["w"].accumulate(np.zeros(4))


def test_uniform_init_bounds():
    w = nx.uniform_init(np.random.default_rng(0), (50, 16), 16)
    assert np.abs(w).max() <= 0.25


# --- closed forms --------------------------------------------------------

def test_gelu_tanh_form():
    x = np.linspace(-4, 4, 9)
    ref = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))
    np.testing.assert_allclose(nx.gelu(x)[0], ref, rtol=1e-14)


def test_softplus_matches_log1p_exp():
    x = np.linspace(-20, 20, 11)
    np.testing.assert_allclose(nx.softplus(x)[0], np.log1p(np.exp(x)), rtol=1e-12)


def test_cosine_similarity_parallel_vectors():
    a = np.array([[1.0, 2.0, 3.0]])
    assert nx.cosine_similarity(a, 2 * a)[0][0] == pytest.approx(1.0, abs=1e-15)
