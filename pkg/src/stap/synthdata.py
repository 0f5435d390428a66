"""Synthetic micro-video corpus with planted highlights and topic-driven labels.

Frames follow a small-step random walk; at ``H`` planted indices the step is
replaced by a jump toward the sample's topic centre. Labels are

    Y = b[topic] + c1 * mean jump norm + c2 * creator + N(0, sigma^2)

so both the topic (recoverable from text and frames) and the highlight
energy carry signal. Ground truth (topic id, highlight indices) is kept
beside the model inputs and never mixed into them.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .predictor import SampleBatch


@dataclass
class SynthConfig:
    n: int = 600
    T: int = 64
    d_v: int = 16
    d_t: int = 16
    d_u: int = 4
    L: int = 4
    G: int = 6
    H: int = 3
    step_scale: float = 0.1
    highlight_magnitude: float = 1.0
    magnitude_jitter: float = 0.5
    topic_pop: tuple | None = None
    c1: float = 1.0
    c2: float = 0.5
    sigma: float = 0.2
    text_noise: float = 0.3
    start_noise: float = 0.1
    split: tuple = (0.7, 0.1, 0.2)
    seed: int = 0

    def __post_init__(self):
        if self.n < 2 * self.G:
            raise ValueError(f"need n >= 2*G = {2 * self.G}, got n={self.n}")
        if not 0 <= self.H < self.T:
            raise ValueError(f"need 0 <= H < T, got H={self.H}, T={self.T}")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if min(self.T, self.d_v, self.d_t, self.d_u, self.L, self.G) < 1:
            raise ValueError("dimensions must be positive")
        if not 0 <= self.magnitude_jitter < 1:
            raise ValueError("magnitude_jitter must lie in [0, 1)")
        if len(self.split) != 3 or any(s < 0 for s in self.split) or abs(sum(self.split) - 1) > 1e-9:
            raise ValueError(f"split must be three non-negative fractions summing to 1, got {self.split}")
        if self.topic_pop is not None and len(self.topic_pop) != self.G:
            raise ValueError("topic_pop needs one entry per topic")

    def base_popularity(self) -> np.ndarray:
        if self.topic_pop is not None:
            return np.asarray(self.topic_pop, dtype=np.float64)
        return np.linspace(0.0, 5.0, self.G)


@dataclass
class SynthCorpus:
    cfg: SynthConfig
    frames: np.ndarray
    text: np.ndarray
    meta: np.ndarray
    labels: np.ndarray
    topics: np.ndarray
    highlights: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return self.labels.shape[0]

    def batch(self, idx) -> SampleBatch:
        idx = np.asarray(idx)
        return SampleBatch(self.frames[idx], self.text[idx], self.meta[idx], self.labels[idx])

    def split_of(self, i: int) -> str:
        if i in set(self.train_idx.tolist()):
            return "train"
        if i in set(self.val_idx.tolist()):
            return "val"
        return "test"


def _split(n: int, fractions, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return (np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_val]),
            np.sort(perm[n_train + n_val:]))


def generate_corpus(cfg: SynthConfig) -> SynthCorpus:
    """Draw a corpus; each sample uses its own child seed so generation order is irrelevant."""
    root = np.random.SeedSequence(cfg.seed)
    topic_seq, split_seq, sample_seq = root.spawn(3)
    trng = np.random.default_rng(topic_seq)
    vis_centers = trng.standard_normal((cfg.G, cfg.d_v))
    vis_centers /= np.linalg.norm(vis_centers, axis=1, keepdims=True)
    text_centers = trng.standard_normal((cfg.G, cfg.d_t))
    base = cfg.base_popularity()
    topic_of = trng.permutation(np.arange(cfg.n) % cfg.G)

    n, T, d_v = cfg.n, cfg.T, cfg.d_v
    frames = np.empty((n, T, d_v))
    text = np.empty((n, cfg.L, cfg.d_t))
    meta = np.empty((n, cfg.d_u))
    labels = np.empty(n)
    topics = np.empty(n, dtype=np.int64)
    highlights = np.empty((n, cfg.H), dtype=np.int64)
    step_sd = cfg.step_scale / np.sqrt(d_v)

    for i, seq in enumerate(sample_seq.spawn(n)):
        rng = np.random.default_rng(seq)
        g = int(topic_of[i])
        creator = rng.standard_normal()
        hl = np.sort(rng.choice(np.arange(1, T), size=cfg.H, replace=False))
        mag = cfg.highlight_magnitude * rng.uniform(1 - cfg.magnitude_jitter, 1 + cfg.magnitude_jitter)
        steps = rng.standard_normal((T, d_v)) * step_sd
        steps[0] = 0.5 * vis_centers[g] + cfg.start_noise * rng.standard_normal(d_v)
        for t in hl:
            direction = vis_centers[g] + 0.2 * rng.standard_normal(d_v)
            steps[t] = mag * direction / np.linalg.norm(direction)
        frames[i] = np.cumsum(steps, axis=0)
        text[i] = text_centers[g] + cfg.text_noise * rng.standard_normal((cfg.L, cfg.d_t))
        meta[i, 0] = creator
        meta[i, 1:] = rng.standard_normal(cfg.d_u - 1)
        energy = float(np.mean(np.linalg.norm(steps[hl], axis=1))) if cfg.H else 0.0
        labels[i] = base[g] + cfg.c1 * energy + cfg.c2 * creator + cfg.sigma * rng.standard_normal()
        topics[i] = g
        highlights[i] = hl

    train, val, test = _split(n, cfg.split, np.random.default_rng(split_seq))
    return SynthCorpus(cfg, frames, text, meta, labels, topics, highlights, train, val, test)


# ---------------------------------------------------------------------------
# CSV bundle
#
#   samples.csv        sample_id,split,label,u0..u{d_u-1}
#   frames.csv         sample_id,frame_index,f0..f{d_v-1}
#   text.csv           sample_id,token_index,t0..t{d_t-1}
#   ground_truth.jsonl {"sample_id", "topic", "highlights"} per line
#   config.json        the SynthConfig used

def _fmt(x) -> str:
    return repr(float(x))


def dump_corpus(corpus: SynthCorpus, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = corpus.cfg
    split = np.empty(len(corpus), dtype=object)
    split[corpus.train_idx] = "train"
    split[corpus.val_idx] = "val"
    split[corpus.test_idx] = "test"
    with open(out / "samples.csv", "w", newline="") as fh:
        fh.write(f"# seed={cfg.seed}\n")
        w = csv.writer(fh)
        w.writerow(["sample_id", "split", "label"] + [f"u{k}" for k in range(cfg.d_u)])
        for i in range(len(corpus)):
            w.writerow([i, split[i], _fmt(corpus.labels[i])] + [_fmt(v) for v in corpus.meta[i]])
    with open(out / "frames.csv", "w", newline="") as fh:
        fh.write(f"# seed={cfg.seed}\n")
        w = csv.writer(fh)
        w.writerow(["sample_id", "frame_index"] + [f"f{k}" for k in range(cfg.d_v)])
        for i in range(len(corpus)):
            for t in range(cfg.T):
                w.writerow([i, t] + [_fmt(v) for v in corpus.frames[i, t]])
    with open(out / "text.csv", "w", newline="") as fh:
        fh.write(f"# seed={cfg.seed}\n")
        w = csv.writer(fh)
        w.writerow(["sample_id", "token_index"] + [f"t{k}" for k in range(cfg.d_t)])
        for i in range(len(corpus)):
            for t in range(cfg.L):
                w.writerow([i, t] + [_fmt(v) for v in corpus.text[i, t]])
    with open(out / "ground_truth.jsonl", "w") as fh:
        for i in range(len(corpus)):
            fh.write(json.dumps({"sample_id": i, "topic": int(corpus.topics[i]),
                                 "highlights": corpus.highlights[i].tolist()}) + "\n")
    cfg_dict = asdict(cfg)
    (out / "config.json").write_text(json.dumps(cfg_dict, indent=2, sort_keys=True))
    return out


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(line for line in fh if not line.startswith("#")))[1:]


def load_corpus(in_dir) -> SynthCorpus:
    src = Path(in_dir)
    raw = json.loads((src / "config.json").read_text())
    for key in ("split", "topic_pop"):
        if raw.get(key) is not None:
            raw[key] = tuple(raw[key])
    cfg = SynthConfig(**raw)
    n = cfg.n
    meta = np.empty((n, cfg.d_u))
    labels = np.empty(n)
    split = {}
    for row in _rows(src / "samples.csv"):
        i = int(row[0])
        split[i] = row[1]
        labels[i] = float(row[2])
        meta[i] = [float(v) for v in row[3:]]
    frames = np.empty((n, cfg.T, cfg.d_v))
    for row in _rows(src / "frames.csv"):
        frames[int(row[0]), int(row[1])] = [float(v) for v in row[2:]]
    text = np.empty((n, cfg.L, cfg.d_t))
    for row in _rows(src / "text.csv"):
        text[int(row[0]), int(row[1])] = [float(v) for v in row[2:]]
    topics = np.empty(n, dtype=np.int64)
    highlights = np.empty((n, cfg.H), dtype=np.int64)
    with open(src / "ground_truth.jsonl") as fh:
        for line in fh:
            rec = json.loads(line)
            topics[rec["sample_id"]] = rec["topic"]
            highlights[rec["sample_id"]] = rec["highlights"]
    idx = {s: np.array(sorted(i for i, v in split.items() if v == s), dtype=np.int64)
           for s in ("train", "val", "test")}
    return SynthCorpus(cfg, frames, text, meta, labels, topics, highlights,
                       idx["train"], idx["val"], idx["test"])
