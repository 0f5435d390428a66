import math

import numpy as np
import pytest

from stap import gradsuite
from stap import numerics as nx
from stap import predictor as pr
from stap import spatial_memory as sp
from stap.synthdata import SynthConfig, generate_corpus


def _ln(v, eps=nx.LN_EPS):
    mu = v.mean(axis=-1, keepdims=True)
    return (v - mu) / np.sqrt(v.var(axis=-1, keepdims=True) + eps)


def _layer(rng, d):
    lay = {}
    for side in ("t", "v"):
        for w in ("Wq", "Wk", "Wv"):
            lay[f"{side}.{w}"] = rng.standard_normal((d, d))
        lay[f"{side}.gamma"] = np.ones(d)
        lay[f"{side}.beta"] = np.zeros(d)
    return lay


# --- cross-attention -------------------------------------------------------

def test_single_text_token():
    rng = np.random.default_rng(0)
    d = 4
    lay = _layer(rng, d)
    T_seq = rng.standard_normal((2, 1, d))
    for _ in range(2):   # the query is irrelevant
        (_, t_star), _ = pr.cross_attention(rng.standard_normal((2, 5, d)), T_seq, [lay])
        tok = T_seq[:, 0]
        np.testing.assert_allclose(t_star, _ln(tok + tok @ lay["t.Wv"].T), atol=1e-12)


def test_identical_visual_tokens():
    rng = np.random.default_rng(1)
    d = 4
    lay = _layer(rng, d)
    v = rng.standard_normal((2, d))
    V_seq = np.repeat(v[:, None], 6, axis=1)
    (v_star, _), _ = pr.cross_attention(V_seq, rng.standard_normal((2, 3, d)), [lay])
    np.testing.assert_allclose(v_star, _ln(v + v @ lay["v.Wv"].T), atol=1e-12)


def test_default_layer_count():
    assert pr.ModelConfig().L_ca == 2


# --- features and head -----------------------------------------------------

def test_zero_retrieval_zeroes_product_blocks():
    rng = np.random.default_rng(2)
    v, t, u = (rng.standard_normal((3, 5)) for _ in range(3))
    H, _ = pr.assemble_features(v, t, u, np.zeros((3, 5)))
    assert H.shape == (3, 30)
    assert np.all(H[:, 15:] == 0.0)


def test_prediction_shape():
    model, batch = gradsuite.tiny_model()
    preds = model.predict(batch)
    assert preds.shape == (len(batch),) and np.all(np.isfinite(preds))


def test_no_memory_model_matches_zero_retrieval():
    cfg = pr.ModelConfig(d_v=4, d_t=3, d_u=2, d_common=5, d_hidden=4, d_score=3, use_memory=False)
    model = pr.PopularityModel(cfg, seed=0)
    assert "route.Wq" not in model.store
    _, batch = gradsuite.tiny_model()
    assert np.all(np.isfinite(model.predict(batch)))


# --- composite loss --------------------------------------------------------

def test_disabled_terms_leave_huber():
    y = np.array([0.0, 1.0, 2.0])
    p = np.array([0.5, 3.0, 2.0])
    lb, _ = pr.total_loss(p, y, pref=0.7, balance=0.4, lambda_pref=0.0, lambda_bal=0.0)
    expected = (0.125 + 1.5 + 0.0) / 3
    assert lb.total == pytest.approx(expected, abs=1e-15) and lb.reg == lb.total


def test_composed_trivial_cases():
    P, C = 2, 3
    pi = (sp.zipf_prior(P)[:, None] * np.full(C, 1 / C))[None].repeat(4, axis=0)
    balance, _ = sp.load_balance_loss(pi)
    pref, _ = sp.dppo_loss(pi[:2], pi[2:])
    y = np.array([1.0, 2.0, 3.0, 4.0])
    lb, _ = pr.total_loss(y, y, pref.value, balance, 0.10, 1.0)
    assert lb.total == pytest.approx(0.10 * math.log(2), abs=1e-14)


def test_published_defaults():
    cfg = pr.ModelConfig()
    assert (cfg.lambda_pref, cfg.gamma_pref) == (0.10, 0.5)
    assert (cfg.gamma_lb, cfg.beta_lb) == (0.01, 0.01)
    assert cfg.weight_decay == 1e-5 and cfg.tau_init == 1.0


def test_breakdown_is_additive():
    rng = np.random.default_rng(3)
    lb, _ = pr.total_loss(rng.standard_normal(5), rng.standard_normal(5), 0.3, 0.2, 0.1, 1.0)
    assert lb.total == lb.reg + lb.lambda_pref * lb.pref + lb.lambda_bal * lb.balance


# --- gradients -------------------------------------------------------------

@pytest.mark.parametrize("mode", ["score", "anchor"])
def test_end_to_end_gradient(mode):
    rep = gradsuite.model_report(mode, probes=60)
    assert rep.passed, rep


# --- training --------------------------------------------------------------

def _small_corpus(n=64, seed=0):
    return generate_corpus(SynthConfig(n=n, T=12, seed=seed))


def _model(corpus, seed=0, **kw):
    cfg = pr.ModelConfig(d_v=16, d_t=16, d_u=4, P=3, C=2, K=2, **kw)
    m = pr.PopularityModel(cfg, seed=seed)
    m.init_memory(corpus.batch(corpus.train_idx), seed=seed)
    return m


def test_training_is_deterministic():
    corpus = _small_corpus()
    runs = []
    for _ in range(2):
        m = _model(corpus)
        b = corpus.batch(corpus.train_idx[:16])
        runs.append([m.train_step(b).total for _ in range(10)])
    assert runs[0] == runs[1]


def test_fifty_steps_reduce_loss():
    corpus = _small_corpus()
    m = _model(corpus)
    batch = corpus.batch(np.arange(64))
    losses = [m.train_step(batch).total for _ in range(50)]
    assert losses[-1] < losses[0]


def test_tau_stays_in_bounds_during_training():
    corpus = _small_corpus()
    m = _model(corpus, tau_lr=50.0)
    batch = corpus.batch(np.arange(32))
    for _ in range(5):
        m.train_step(batch)
        assert 0.1 <= m.bank.temperature <= 5.0


def test_nonfinite_input_names_tensor():
    corpus = _small_corpus()
    m = _model(corpus)
    b = corpus.batch(np.arange(4))
    b.frames[0, 0, 0] = np.nan
    with pytest.raises(nx.EvaluationError, match="temporal"), np.errstate(invalid="ignore"):
        m.loss_and_backward(b)


def test_forward_requires_bank():
    corpus = _small_corpus()
    m = pr.PopularityModel(pr.ModelConfig(P=3, C=2, K=2), seed=0)
    with pytest.raises(RuntimeError):
        m.predict(corpus.batch(np.arange(3)))


def test_checkpoint_roundtrip(tmp_path):
    corpus = _small_corpus()
    m = _model(corpus)
    m.train_step(corpus.batch(np.arange(16)))
    m.save(tmp_path / "m.stap")
    fresh = pr.PopularityModel(m.cfg, seed=99)
    fresh.load(tmp_path / "m.stap")
    b = corpus.batch(np.arange(20))
    assert np.array_equal(fresh.predict(b), m.predict(b))
    assert fresh.to_bytes() == m.to_bytes()


def test_checkpoint_rejects_garbage():
    m = pr.PopularityModel(pr.ModelConfig(), seed=0)
    with pytest.raises(nx.DataError):
        m.load_bytes(b"junk" * 10)


def test_embedding_init_needs_matching_width():
    corpus = _small_corpus()
    cfg = pr.ModelConfig(P=3, C=2, K=2, init_space="embedding")
    with pytest.raises(nx.ShapeError):
        pr.PopularityModel(cfg).init_memory(corpus.batch(corpus.train_idx))
    ok = pr.ModelConfig(P=3, C=2, K=2, init_space="embedding", d_m=36)
    bank = pr.PopularityModel(ok).init_memory(corpus.batch(corpus.train_idx))
    assert bank.d_m == 36


def test_batch_validation():
    with pytest.raises(nx.ShapeError):
        pr.SampleBatch(np.zeros((2, 3, 4)), np.zeros((3, 1, 2)), np.zeros((2, 1)), np.zeros(2))


def test_config_validation():
    with pytest.raises(ValueError):
        pr.ModelConfig(P=2, C=2, K=5)
    with pytest.raises(ValueError):
        pr.ModelConfig(init_space="somewhere")
