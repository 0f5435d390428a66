"""Metrics, training runs, ablations, grid search, scaling benchmarks and exports."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.stats import rankdata

from . import spatial_memory as sp
from .predictor import LossBreakdown, ModelConfig, PopularityModel
from .synthdata import SynthConfig, SynthCorpus, generate_corpus
from .temporal import SparseAttnConfig, dense_attention, sparse_attention, ssm_scan

log = logging.getLogger(__name__)

VARIANTS = ("full", "no_balance", "no_dppo", "top1", "no_frame_scoring", "no_ssm",
            "no_sparse_attn", "no_memory")
LOG_HEADER = ["step", "total", "reg", "pref", "balance", "entropy", "gini"]


# ---------------------------------------------------------------------------
# metrics

@dataclass
class MetricReport:
    nMSE: float
    MAE: float
    SRC: float
    n: int
    nmse_defined: bool = True


def spearman(a, b) -> float:
    ra = rankdata(a)
    rb = rankdata(b)
    ra = ra - ra.mean()
    rb = rb - rb.mean()
    den = math.sqrt(float(np.sum(ra * ra) * np.sum(rb * rb)))
    return float(np.sum(ra * rb) / den) if den > 0 else 0.0


def compute_metrics(preds, labels) -> MetricReport:
    """MAE, variance-normalised MSE and Spearman rank correlation."""
    p = np.asarray(preds, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if p.shape != y.shape or p.size == 0:
        raise ValueError("preds and labels must be aligned and nonempty")
    r = p - y
    var = float(np.var(y))
    defined = var > 0
    nmse = float(np.mean(r * r) / var) if defined else float("nan")
    return MetricReport(nmse, float(np.mean(np.abs(r))), spearman(p, y), p.size, defined)


def margin_pairs(labels, margin_frac: float = 0.25) -> tuple[np.ndarray, np.ndarray]:
    """All (hi, lo) index pairs whose label gap exceeds margin_frac * std(labels)."""
    y = np.asarray(labels, dtype=np.float64)
    m = margin_frac * float(np.std(y))
    hi, lo = np.nonzero(y[:, None] - y[None, :] > m)
    return hi, lo


def pairwise_accuracy(preds, labels, margin_frac: float = 0.25) -> float:
    hi, lo = margin_pairs(labels, margin_frac)
    if hi.size == 0:
        return float("nan")
    p = np.asarray(preds)
    return float(np.mean(p[hi] > p[lo]))


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    model: PopularityModel
    log_rows: list = field(default_factory=list)
    slot_history: list = field(default_factory=list)


def variant_config(variant: str, base: ModelConfig) -> ModelConfig:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {', '.join(VARIANTS)}")
    changes = {
        "full": {},
        "no_balance": {"use_balance": False},
        "no_dppo": {"use_dppo": False},
        "top1": {"K": 1},
        "no_frame_scoring": {"use_scoring": False},
        "no_ssm": {"use_ssm": False},
        "no_sparse_attn": {"use_attention": False},
        "no_memory": {"use_memory": False},
    }[variant]
    return replace(base, **changes)


def model_config_for(corpus_cfg: SynthConfig, **overrides) -> ModelConfig:
    cfg = ModelConfig(d_v=corpus_cfg.d_v, d_t=corpus_cfg.d_t, d_u=corpus_cfg.d_u)
    return replace(cfg, **overrides)


def train_model(corpus: SynthCorpus, cfg: ModelConfig, epochs: int = 10, batch_size: int = 32,
                seed: int = 0, on_step: Callable | None = None) -> TrainResult:
    """Initialise a model on the training split and run ``epochs`` of minibatch SGD.

    Every step appends a log row; every epoch appends the mean soft routing
    over that epoch's batches to ``slot_history``.
    """
    model = PopularityModel(cfg, seed=seed)
    train = corpus.train_idx
    model.init_memory(corpus.batch(train), seed=seed)
    rng = np.random.default_rng(seed + 7919)
    res = TrainResult(model)
    step = 0
    for _ in range(epochs):
        order = rng.permutation(train)
        epoch_pi = []
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            if len(idx) < 2:
                continue
            lb = model.train_step(corpus.batch(idx))
            step += 1
            ent = gin = float("nan")
            if cfg.use_memory:
                pi = model.last_routing.pi_soft
                epoch_pi.append(pi)
                st = sp.slot_statistics(pi)
                ent, gin = st.entropy, st.gini
            res.log_rows.append([step, lb.total, lb.reg, lb.pref, lb.balance, ent, gin])
            if on_step is not None:
                on_step(step, lb)
        if epoch_pi:
            res.slot_history.append(np.concatenate(epoch_pi, axis=0))
    return res


def write_log_csv(rows, path, seed: int) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# seed={seed}\n")
        w = csv.writer(fh)
        w.writerow(LOG_HEADER)
        for row in rows:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
    return path


def evaluate(model: PopularityModel, corpus: SynthCorpus, idx=None, batch_size: int = 128) -> tuple[np.ndarray, MetricReport]:
    idx = corpus.test_idx if idx is None else np.asarray(idx)
    preds = np.concatenate([model.predict(corpus.batch(idx[s:s + batch_size]))
                            for s in range(0, len(idx), batch_size)])
    return preds, compute_metrics(preds, corpus.labels[idx])


def routing_activations(model: PopularityModel, corpus: SynthCorpus, idx) -> np.ndarray:
    fc = model.forward(corpus.batch(np.asarray(idx)))
    return fc.routing.pi_soft


def frame_scores(model: PopularityModel, corpus: SynthCorpus, idx) -> np.ndarray:
    out, _ = model.temporal.forward(corpus.frames[np.asarray(idx)])
    return out.scores.w


def highlight_alignment(model: PopularityModel, corpus: SynthCorpus, idx) -> tuple[float, float]:
    """Mean frame weight at planted highlights and at all other frames."""
    idx = np.asarray(idx)
    w = frame_scores(model, corpus, idx)
    mask = np.zeros_like(w, dtype=bool)
    for row, i in enumerate(idx):
        mask[row, corpus.highlights[i]] = True
    return float(w[mask].mean()), float(w[~mask].mean())


def frame_score_table(model: PopularityModel, corpus: SynthCorpus, idx) -> list[tuple]:
    idx = np.asarray(idx)
    w = frame_scores(model, corpus, idx)
    rows = []
    for r, i in enumerate(idx):
        planted = set(corpus.highlights[i].tolist())
        rows.extend((int(i), t, float(w[r, t]), int(t in planted)) for t in range(w.shape[1]))
    return rows


def export_diagnostics(model: PopularityModel, corpus: SynthCorpus, out_dir, seed: int,
                       idx=None) -> dict[str, Path]:
    """Write ``frame_scores.csv`` and ``slot_heatmap.csv`` for the held-out samples."""
    out = Path(out_dir)
    idx = corpus.test_idx if idx is None else np.asarray(idx)
    try:
        out.mkdir(parents=True, exist_ok=True)
        fpath = out / "frame_scores.csv"
        with open(fpath, "w", newline="") as fh:
            fh.write(f"# seed={seed}\n")
            w = csv.writer(fh)
            w.writerow(["sample_id", "frame_index", "score", "is_planted_highlight"])
            for sid, t, s, hl in frame_score_table(model, corpus, idx):
                w.writerow([sid, t, repr(s), hl])
        paths = {"frame_scores": fpath}
        if model.cfg.use_memory:
            stats = sp.slot_statistics(routing_activations(model, corpus, idx))
            paths["slot_heatmap"] = sp.write_heatmap_csv(stats, out / "slot_heatmap.csv", seed)
    except OSError as exc:
        raise OSError(f"could not write diagnostics under {out}: {exc}") from exc
    return paths


# ---------------------------------------------------------------------------
# ablations

@dataclass
class AblationResult:
    variant: str
    seed: int
    metrics: MetricReport
    pair_accuracy: float
    slot_history: list            # SlotStats per epoch, empty without memory
    highlight_mean: float
    background_mean: float
    log_rows: list = field(default_factory=list)

    @property
    def final_slots(self) -> sp.SlotStats | None:
        return self.slot_history[-1] if self.slot_history else None


def run_ablation(variant: str, cfg: ModelConfig | None = None, seed: int = 0,
                 corpus_cfg: SynthConfig | None = None, epochs: int = 10,
                 batch_size: int = 32, corpus: SynthCorpus | None = None) -> AblationResult:
    """Train one variant on the seed's corpus and score it on the test split."""
    if corpus is None:
        corpus_cfg = replace(corpus_cfg or SynthConfig(), seed=seed)
        corpus = generate_corpus(corpus_cfg)
    base = cfg or model_config_for(corpus.cfg)
    vcfg = variant_config(variant, base)
    res = train_model(corpus, vcfg, epochs=epochs, batch_size=batch_size, seed=seed)
    preds, metrics = evaluate(res.model, corpus)
    pacc = pairwise_accuracy(preds, corpus.labels[corpus.test_idx], vcfg.margin_frac)
    hi, bg = highlight_alignment(res.model, corpus, corpus.test_idx)
    history = [sp.slot_statistics(h) for h in res.slot_history]
    log.info("%s seed=%d MAE=%.4f pacc=%.4f", variant, seed, metrics.MAE, pacc)
    return AblationResult(variant, seed, metrics, pacc, history, hi, bg, res.log_rows)


ABLATION_HEADER = ["variant", "seed", "MAE", "nMSE", "SRC", "pair_accuracy", "entropy", "gini",
                   "top_share", "highlight_score", "background_score"]


def ablation_row(r: AblationResult) -> list:
    st = r.final_slots
    ent, gin, top = (st.entropy, st.gini, st.top_share) if st else (float("nan"),) * 3
    vals = [r.metrics.MAE, r.metrics.nMSE, r.metrics.SRC, r.pair_accuracy, ent, gin, top,
            r.highlight_mean, r.background_mean]
    return [r.variant, r.seed] + [repr(float(v)) for v in vals]


def write_ablation_csv(results, path, seed: int) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# seed={seed}\n")
        w = csv.writer(fh)
        w.writerow(ABLATION_HEADER)
        for r in results:
            w.writerow(ablation_row(r))
    return path


@dataclass
class DirectionalCheck:
    name: str
    wins: int
    trials: int
    required: int
    detail: list

    @property
    def passed(self) -> bool:
        return self.wins >= self.required

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.wins}/{self.trials} seeds (need {self.required})"


def _needed(n: int, required: int | None) -> int:
    # four of five by default, scaled for other seed counts
    return required if required is not None else max(1, math.ceil(0.8 * n))


def check_balance(full: list[AblationResult], ablated: list[AblationResult], margin: float = 0.05,
                  required: int | None = None) -> DirectionalCheck:
    """Entropy higher and Gini lower for the full model, each by ``margin``."""
    detail, wins = [], 0
    for f, a in zip(full, ablated):
        de = f.final_slots.entropy - a.final_slots.entropy
        dg = a.final_slots.gini - f.final_slots.gini
        ok = de >= margin and dg >= margin
        wins += ok
        detail.append((f.seed, de, dg, ok))
    return DirectionalCheck("load_balance", wins, len(full), _needed(len(full), required), detail)


def check_dppo(full, ablated, required: int | None = None) -> DirectionalCheck:
    detail = [(f.seed, f.pair_accuracy - a.pair_accuracy, f.pair_accuracy > a.pair_accuracy)
              for f, a in zip(full, ablated)]
    return DirectionalCheck("dppo_pair_accuracy", sum(d[-1] for d in detail), len(full),
                            _needed(len(full), required), detail)


def check_retrieval(full, ablated, required: int | None = None) -> DirectionalCheck:
    detail = [(f.seed, a.metrics.MAE - f.metrics.MAE, f.metrics.MAE < a.metrics.MAE)
              for f, a in zip(full, ablated)]
    return DirectionalCheck("retrieval_mae", sum(d[-1] for d in detail), len(full),
                            _needed(len(full), required), detail)


def check_alignment(results) -> DirectionalCheck:
    detail = [(r.seed, r.highlight_mean - r.background_mean, r.highlight_mean > r.background_mean)
              for r in results]
    return DirectionalCheck("frame_alignment", sum(d[-1] for d in detail), len(results),
                            len(results), detail)


PAIRED_CHECKS = {"no_balance": check_balance, "no_dppo": check_dppo, "no_memory": check_retrieval}


def run_seeds(fn: Callable, seeds, threads: int = 1) -> list:
    """Map ``fn`` over seeds, in worker processes when ``threads`` > 1; order is preserved."""
    seeds = list(seeds)
    if threads <= 1 or len(seeds) < 2:
        return [fn(s) for s in seeds]
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, seeds))


# ---------------------------------------------------------------------------
# grid search

GRID_HEADER = ["P", "C", "slots", "MAE", "nMSE", "SRC", "status"]


def grid_search(P_values, C_values, corpus: SynthCorpus, cfg: ModelConfig | None = None,
                seed: int = 0, epochs: int = 5, path=None) -> list[list]:
    """One model per (P, C) under a fixed budget; infeasible grids are marked skipped."""
    base = cfg or model_config_for(corpus.cfg)
    n_train = len(corpus.train_idx)
    rows = []
    for P in P_values:
        for C in C_values:
            slots = P * C
            if slots > n_train:
                rows.append([P, C, slots, "", "", "", "skipped"])
                continue
            mcfg = replace(base, P=P, C=C, K=min(base.K, slots))
            res = train_model(corpus, mcfg, epochs=epochs, seed=seed)
            _, m = evaluate(res.model, corpus)
            rows.append([P, C, slots, repr(m.MAE), repr(m.nMSE), repr(m.SRC), "ok"])
    if path is not None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            fh.write(f"# seed={seed}\n")
            w = csv.writer(fh)
            w.writerow(GRID_HEADER)
            w.writerows(rows)
    return rows


def robustness_sweep(proportions, corpus: SynthCorpus, cfg: ModelConfig | None = None,
                     seed: int = 0, epochs: int = 5) -> list[list]:
    """Retrain on the first fraction of the training split; gain is reported as SRC change.

    The reference for ``dSRC`` is the largest proportion in the sweep.
    """
    base = cfg or model_config_for(corpus.cfg)
    out = []
    for frac in sorted(proportions):
        n = max(base.P * base.C, int(round(frac * len(corpus.train_idx))))
        sub = replace(corpus, train_idx=corpus.train_idx[:n])
        res = train_model(sub, base, epochs=epochs, seed=seed)
        _, m = evaluate(res.model, sub)
        out.append([frac, n, m.MAE, m.nMSE, m.SRC])
    ref = out[-1][4]
    return [row + [row[4] - ref] for row in out]


# ---------------------------------------------------------------------------
# scaling benchmarks

BENCH_KERNELS = ("ssm_scan", "sparse_attention", "dense_attention", "route", "flat_retrieval")
DEFAULT_SIZES = {
    "ssm_scan": (256, 512, 1024, 2048),
    "sparse_attention": (256, 512, 1024, 2048),
    "dense_attention": (256, 512, 1024, 2048),
    "route": (1_000, 10_000, 100_000),
    "flat_retrieval": (1_000, 10_000, 100_000),
}


@dataclass
class ScalingReport:
    kernel: str
    sizes: list
    medians: list                 # seconds per call
    slope: float
    ci_half_width: float
    trials: int
    unstable: bool = False
    retried: bool = False
    output_digest: str = ""       # sha256 over kernel outputs; timing-free

    @property
    def ratio(self) -> float:
        return max(self.medians) / min(self.medians)


def fit_loglog(sizes, times) -> tuple[float, float]:
    """Least-squares slope of log(time) on log(size) with a 95% t half-width."""
    from scipy import stats
    x = np.log(np.asarray(sizes, dtype=np.float64))
    y = np.log(np.asarray(times, dtype=np.float64))
    fit = stats.linregress(x, y)
    dof = len(x) - 2
    half = float(stats.t.ppf(0.975, dof) * fit.stderr) if dof > 0 else float("inf")
    return float(fit.slope), half


def _bench_case(kernel: str, n: int, rng: np.random.Generator, d: int = 16, window: int = 8,
                bank_shape=(6, 4), K: int = 3):
    """Build inputs for one size and return a zero-argument callable."""
    if kernel == "ssm_scan":
        x = rng.standard_normal((n, d))
        delta = rng.uniform(0.05, 0.5, n)
        lam, Bm, C, D = rng.standard_normal(d), rng.standard_normal((d, d)) * 0.25, \
            rng.standard_normal((d, d)) * 0.25, rng.standard_normal(d)
        return lambda: ssm_scan(x, delta, lam, Bm, C, D)[0]
    if kernel in ("sparse_attention", "dense_attention"):
        x = rng.standard_normal((n, d))
        Ws = [rng.standard_normal((d, d)) / math.sqrt(d) for _ in range(4)]
        if kernel == "dense_attention":
            return lambda: dense_attention(x, *Ws)[0]
        cfg = SparseAttnConfig(d_a=d, w_base=float(window), beta=0.0)
        return lambda: sparse_attention(x, *Ws, cfg)[0]
    if kernel in ("route", "flat_retrieval"):
        P, C = bank_shape
        store = rng.standard_normal((n, d))
        labels = rng.standard_normal(n)
        queries = rng.standard_normal((32, d))
        if kernel == "flat_retrieval":
            return lambda: flat_retrieval(queries, store, labels, K)
        bank = sp.init_bank(store, labels, P, C, seed=int(rng.integers(2**31)))
        Wq = rng.standard_normal((d, d)) / math.sqrt(d)
        return lambda: sp.route(queries, bank, Wq, K)[0].c_pop
    raise ValueError(f"unknown kernel {kernel!r}; expected one of {', '.join(BENCH_KERNELS)}")


def flat_retrieval(queries: Tensor, store: Tensor, labels: Tensor, K: int) -> Tensor:
    """Reference retrieval that scores every stored vector: O(N d) per query."""
    s = queries @ store.T / math.sqrt(store.shape[1])
    top = np.argpartition(-s, K - 1, axis=1)[:, :K]
    w = np.take_along_axis(s, top, axis=1)
    w = np.exp(w - w.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    return np.sum(w * labels[top], axis=1)


def _time_call(fn, reps: int) -> float:
    t0 = time.perf_counter()
    for _ in range(reps):
        fn()
    return (time.perf_counter() - t0) / reps


def _measure(fns, trials: int, min_time: float) -> tuple[list, bool]:
    # sizes are interleaved trial by trial so slow drift in the machine's
    # speed lands on every size alike instead of biasing one end of the fit
    reps = []
    for fn in fns:
        fn()  # warm
        one = _time_call(fn, 1)
        reps.append(max(1, int(math.ceil(min_time / max(one, 1e-9)))))
    samples = np.empty((trials, len(fns)))
    for t in range(trials):
        for j, fn in enumerate(fns):
            samples[t, j] = _time_call(fn, reps[j])
    med = np.median(samples, axis=0)
    unstable = bool(np.any(samples.std(axis=0) > 0.5 * med))
    return med.tolist(), unstable


def bench_scaling(kernel: str, sizes=None, trials: int = 5, seed: int = 0,
                  min_time: float = 0.2) -> ScalingReport:
    """Median warm wall time per size, then a log-log slope.

    Each trial repeats the call until it spans at least ``min_time`` seconds
    so fast kernels are not dominated by clock resolution. A run whose trial
    spread exceeds half its median is repeated once and flagged if still noisy.
    """
    import hashlib
    if kernel not in BENCH_KERNELS:
        raise ValueError(f"unknown kernel {kernel!r}; expected one of {', '.join(BENCH_KERNELS)}")
    sizes = list(DEFAULT_SIZES[kernel] if sizes is None else sizes)
    if trials < 5:
        raise ValueError("at least 5 trials per size are required")
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError("sizes must be strictly increasing")
    min_points = 3 if kernel in ("route", "flat_retrieval") else 4
    if len(sizes) < min_points:
        raise ValueError(f"{kernel} needs at least {min_points} sizes")
    fns = []
    digest = hashlib.sha256()
    for i, n in enumerate(sizes):
        fn = _bench_case(kernel, int(n), np.random.default_rng([seed, i]))
        digest.update(np.ascontiguousarray(fn()).tobytes())
        fns.append(fn)
    medians, unstable = _measure(fns, trials, min_time)
    retried = False
    if unstable:
        log.warning("%s timings unstable, retrying once", kernel)
        medians, unstable = _measure(fns, trials, min_time)
        retried = True
    slope, half = fit_loglog(sizes, medians)
    return ScalingReport(kernel, sizes, medians, slope, half, trials, unstable, retried,
                         digest.hexdigest())


def bench_isolated(kernel: str, sizes=None, trials: int = 5, seed: int = 0,
                   min_time: float = 0.2) -> ScalingReport:
    """Run :func:`bench_scaling` in a freshly spawned interpreter.

    Large T x T buffers from one kernel leave the allocator in a state that
    skews later timings in the same process (small sizes slow down, large
    ones speed up), so each kernel gets a clean heap.
    """
    import multiprocessing as mp
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(max_workers=1, mp_context=mp.get_context("spawn")) as ex:
        return ex.submit(bench_scaling, kernel, sizes, trials, seed, min_time).result()


SCALING_BOUNDS = {
    "dense_attention": ("slope", 1.7, 2.3),
    "sparse_attention": ("slope", 0.75, 1.25),
    "ssm_scan": ("slope", 0.75, 1.25),
    "route": ("ratio", 0.0, 1.2),
}


def scaling_check(rep: ScalingReport) -> tuple[bool | None, str]:
    """Pass/fail against the expected cost growth; ``None`` for kernels with no bound."""
    if rep.kernel not in SCALING_BOUNDS:
        return None, f"INFO {rep.kernel}: slope {rep.slope:.3f} +/- {rep.ci_half_width:.3f}"
    what, lo, hi = SCALING_BOUNDS[rep.kernel]
    val = rep.slope if what == "slope" else rep.ratio
    ok = lo <= val <= hi if what == "slope" else val < hi
    rng_txt = f"[{lo}, {hi}]" if what == "slope" else f"< {hi}"
    return ok, f"{'PASS' if ok else 'FAIL'} {rep.kernel}: {what} {val:.3f} (want {rng_txt})"


SCALING_HEADER = ["kernel", "size", "median_seconds", "slope", "ci_half_width", "unstable"]


def write_scaling_csv(reports, path, seed: int) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# seed={seed}\n")
        w = csv.writer(fh)
        w.writerow(SCALING_HEADER)
        for r in reports:
            for n, t in zip(r.sizes, r.medians):
                w.writerow([r.kernel, n, repr(t), repr(r.slope), repr(r.ci_half_width), int(r.unstable)])
    return path


def write_scaling_outputs_csv(reports, path, seed: int) -> Path:
    """Timing-free companion of the scaling table: sizes plus output digests."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write(f"# seed={seed}\n")
        w = csv.writer(fh)
        w.writerow(["kernel", "sizes", "trials", "output_sha256"])
        for r in reports:
            w.writerow([r.kernel, " ".join(map(str, r.sizes)), r.trials, r.output_digest])
    return path
