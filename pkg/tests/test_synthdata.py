import numpy as np
import pytest

from stap.synthdata import SynthConfig, dump_corpus, generate_corpus, load_corpus


def test_noiseless_labels_are_topic_bases():
    cfg = SynthConfig(n=60, T=8, sigma=0.0, c1=0.0, c2=0.0, seed=3)
    c = generate_corpus(cfg)
    np.testing.assert_array_equal(c.labels, cfg.base_popularity()[c.topics])
    assert len(np.unique(c.labels)) == cfg.G


def test_same_seed_same_corpus():
    a = generate_corpus(SynthConfig(n=40, T=10, seed=11))
    b = generate_corpus(SynthConfig(n=40, T=10, seed=11))
    for name in ("frames", "text", "meta", "labels", "topics", "highlights", "train_idx"):
        assert np.array_equal(getattr(a, name), getattr(b, name)), name


def test_different_seed_differs():
    a = generate_corpus(SynthConfig(n=40, T=10, seed=1))
    b = generate_corpus(SynthConfig(n=40, T=10, seed=2))
    assert not np.array_equal(a.frames, b.frames)


def test_planted_jumps_stand_out():
    # magnitude 1.0 against a background step of 0.1
    cfg = SynthConfig(n=1000, T=32, H=3, step_scale=0.1, highlight_magnitude=1.0,
                      magnitude_jitter=0.0, seed=5)
    c = generate_corpus(cfg)
    deltas = np.linalg.norm(np.diff(c.frames, axis=1), axis=-1)   # index t-1 is the step into t
    hits = 0
    for i in range(cfg.n):
        is_hl = np.zeros(cfg.T - 1, dtype=bool)
        is_hl[c.highlights[i] - 1] = True
        if deltas[i, is_hl].min() > np.percentile(deltas[i, ~is_hl], 95):
            hits += 1
    assert hits / cfg.n >= 0.99


def test_split_proportions():
    c = generate_corpus(SynthConfig(n=600, T=4, seed=0))
    assert (len(c.train_idx), len(c.val_idx), len(c.test_idx)) == (420, 60, 120)
    everything = np.concatenate([c.train_idx, c.val_idx, c.test_idx])
    assert np.array_equal(np.sort(everything), np.arange(600))


def test_dump_load_roundtrip(tmp_path):
    c = generate_corpus(SynthConfig(n=24, T=6, seed=9))
    dump_corpus(c, tmp_path)
    assert (tmp_path / "samples.csv").read_text().startswith("# seed=9\n")
    back = load_corpus(tmp_path)
    for name in ("frames", "text", "meta", "labels", "topics", "highlights",
                 "train_idx", "val_idx", "test_idx"):
        assert np.array_equal(getattr(back, name), getattr(c, name)), name
    assert back.cfg == c.cfg


def test_ground_truth_stays_out_of_inputs():
    c = generate_corpus(SynthConfig(n=30, T=6, seed=2))
    b = c.batch(np.arange(5))
    assert not hasattr(b, "topics") and not hasattr(b, "highlights")
    assert b.meta.shape[1] == c.cfg.d_u


@pytest.mark.parametrize("kw", [dict(n=5), dict(H=8, T=8), dict(sigma=-1.0),
                                dict(split=(0.5, 0.5, 0.5)), dict(magnitude_jitter=1.0)])
def test_config_rejects(kw):
    with pytest.raises(ValueError):
        SynthConfig(**kw)
