"""Popularity-partitioned prototype memory: initialisation, top-K routing, regularisers, refresh.

The bank is a P x C grid of d_m-wide slots. Partition p holds samples from
the p-th label quantile (ascending), cluster c a k-means centre inside it.
"""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit, log_expit

from . import numerics as nx
from .numerics import DataError, Param, ShapeError, Tensor

BANK_MAGIC = b"STAPMB1"


@dataclass
class MemoryBank:
    M: Param
    mu: Tensor
    tau: Param
    tau_min: float = 0.1
    tau_max: float = 5.0

    @property
    def P(self) -> int:
        return self.M.value.shape[0]

    @property
    def C(self) -> int:
        return self.M.value.shape[1]

    @property
    def d_m(self) -> int:
        return self.M.value.shape[2]

    @property
    def n_slots(self) -> int:
        return self.P * self.C

    @property
    def temperature(self) -> float:
        return float(self.tau.value)


@dataclass
class RoutingResult:
    """Routing for a batch of queries (leading axis B), or a single query when unbatched."""
    S: Tensor
    pi_soft: Tensor
    pi_K: Tensor
    selected: np.ndarray
    z_aug: Tensor
    c_pop: Tensor
    q_proj: Tensor
    mask: np.ndarray


@dataclass
class SlotStats:
    mass: Tensor
    entropy: float
    gini: float
    top_share: float
    top_k: int


@dataclass
class DPPOResult:
    value: float
    n_pairs: int

    @property
    def no_pairs(self) -> bool:
        return self.n_pairs == 0


# ---------------------------------------------------------------------------
# initialisation

def quantile_partitions(labels: Tensor, P: int) -> list[np.ndarray]:
    """Split sample indices into P label-ordered groups whose sizes differ by at most one."""
    order = np.argsort(labels, kind="stable")
    return np.array_split(order, P)


def kmeans(X: Tensor, k: int, rng: np.random.Generator, max_iter: int = 100,
           tol: float = 1e-6) -> tuple[Tensor, np.ndarray]:
    """Lloyd's algorithm with k-means++ seeding.

    An empty cluster is re-seeded at the point farthest from its current
    centre. Stops when no centre moves more than ``tol``.
    """
    n = X.shape[0]
    if n < k:
        raise ValueError(f"need at least {k} points, got {n}")
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers[j] = X[idx]
        d2 = np.minimum(d2, np.sum((X - centers[j]) ** 2, axis=1))

    assign = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        dist = np.sum((X[:, None, :] - centers[None]) ** 2, axis=2)
        assign = dist.argmin(axis=1)
        new = centers.copy()
        counts = np.bincount(assign, minlength=k)
        for j in range(k):
            if counts[j]:
                new[j] = X[assign == j].mean(axis=0)
        for j in np.flatnonzero(counts == 0):
            far = int(np.argmax(dist[np.arange(n), assign]))
            new[j] = X[far]
            assign[far] = j
            dist[far] = 0.0
        shift = np.max(np.sqrt(np.sum((new - centers) ** 2, axis=1)))
        centers = new
        if shift <= tol:
            break
    dist = np.sum((X[:, None, :] - centers[None]) ** 2, axis=2)
    return centers, dist.argmin(axis=1)


def init_bank(embeddings: Tensor, labels: Tensor, P: int, C: int, seed: int = 0,
              tau: float = 1.0, tau_min: float = 0.1, tau_max: float = 5.0) -> MemoryBank:
    """Build a bank from labelled embeddings: label quantiles, then k-means per quantile."""
    X = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64).ravel()
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ShapeError(f"embeddings {X.shape} and labels {y.shape} disagree")
    if not np.all(np.isfinite(y)):
        raise DataError("labels contain non-finite values")
    if X.shape[0] < P * C:
        raise ValueError(f"need N >= P*C = {P * C} samples, got {X.shape[0]}")
    if not tau_min <= tau <= tau_max:
        raise ValueError("initial tau outside [tau_min, tau_max]")
    rng = np.random.default_rng(seed)
    M = np.empty((P, C, X.shape[1]))
    mu = np.empty((P, C))
    for p, idx in enumerate(quantile_partitions(y, P)):
        centers, assign = kmeans(X[idx], C, rng)
        M[p] = centers
        for c in range(C):
            hit = assign == c
            mu[p, c] = y[idx][hit].mean() if hit.any() else y[idx].mean()
    return MemoryBank(Param("memory.M", M), mu, Param("memory.tau", np.array(tau)), tau_min, tau_max)


# ---------------------------------------------------------------------------
# routing

def top_k_mask(pi: Tensor, K: int) -> np.ndarray:
    """Boolean mask of the K largest entries per row; ties go to the lower flat index."""
    order = np.argsort(-pi, axis=-1, kind="stable")[..., :K]
    mask = np.zeros(pi.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def route_arrays(q: Tensor, M: Tensor, mu: Tensor, tau: float, Wq: Tensor, K: int,
                 renormalize: bool = False):
    """Score a batch of queries against every slot and aggregate the top K.

    Returns ``(RoutingResult, vjp)``. ``vjp(g_z, g_c, g_pi_soft=None)``
    returns gradients for ``(q, M, tau, Wq)``. The top-K mask is held fixed
    in the backward pass (straight-through on the hard selection).
    """
    qb = np.atleast_2d(np.asarray(q, dtype=np.float64))
    single = np.ndim(q) == 1
    P, C, d_m = M.shape
    PC = P * C
    if not 1 <= K <= PC:
        raise ValueError(f"K must lie in [1, {PC}], got {K}")
    if Wq.shape != (d_m, qb.shape[1]):
        raise ShapeError(f"query projection must be ({d_m}, {qb.shape[1]}), got {Wq.shape}")
    B = qb.shape[0]
    proj, lin_vjp = nx.linear(qb, Wq)
    ln, ln_vjp = nx.layer_norm(proj, np.ones(d_m), np.zeros(d_m))
    qp = np.tanh(ln)
    Mf = M.reshape(PC, d_m)
    scale = 1.0 / math.sqrt(d_m)
    S = (qp @ Mf.T) * scale
    pi, sm_vjp = nx.softmax_rows(S, axis=-1, temperature=tau)
    mask = top_k_mask(pi, K)
    masked = pi * mask
    if renormalize:
        norm = masked.sum(axis=1, keepdims=True)
        piK = masked / norm
    else:
        piK = masked
    z = piK @ Mf
    mu_f = mu.reshape(PC)
    c_pop = piK @ mu_f
    selected = np.argsort(-pi, axis=-1, kind="stable")[:, :K]
    selected = np.stack([selected // C, selected % C], axis=-1)

    def vjp(g_z, g_c, g_pi_soft=None):
        g_z = np.zeros((B, d_m)) if g_z is None else np.asarray(g_z).reshape(B, d_m)
        g_c = np.zeros(B) if g_c is None else np.asarray(g_c).reshape(B)
        g_piK = g_z @ Mf.T + g_c[:, None] * mu_f[None, :]
        gMf = piK.T @ g_z
        if renormalize:
            g_masked = (g_piK - np.sum(g_piK * piK, axis=1, keepdims=True)) / norm
        else:
            g_masked = g_piK
        g_pi = g_masked * mask
        if g_pi_soft is not None:
            g_pi = g_pi + np.asarray(g_pi_soft).reshape(B, PC)
        g_S, g_tau = sm_vjp(g_pi)
        g_S = g_S * scale
        gMf = gMf + g_S.T @ qp
        g_qp = g_S @ Mf
        g_ln = g_qp * (1.0 - qp * qp)
        g_proj, _, _ = ln_vjp(g_ln)
        g_q, gWq, _ = lin_vjp(g_proj)
        return (g_q[0] if single else g_q), gMf.reshape(P, C, d_m), float(g_tau), gWq

    def shape(a):
        a = a.reshape((B, P, C) + a.shape[2:]) if a.ndim >= 2 and a.shape[1] == PC else a
        return a[0] if single else a

    res = RoutingResult(shape(S), shape(pi), shape(piK), selected[0] if single else selected,
                        z[0] if single else z, c_pop[0] if single else c_pop,
                        qp[0] if single else qp, shape(mask))
    return res, vjp


def route(query: Tensor, bank: MemoryBank, Wq: Tensor, K: int, renormalize: bool = False):
    """Route one query (d_q,) or a batch (B, d_q) through ``bank``; see :func:`route_arrays`."""
    return route_arrays(query, bank.M.value, bank.mu, bank.temperature, Wq, K, renormalize)


# ---------------------------------------------------------------------------
# regularisers

def zipf_prior(P: int, s: float = 1.0) -> Tensor:
    """Power-law prior over partitions; the most popular (last) partition has rank 1."""
    ranks = np.arange(P, 0, -1, dtype=np.float64)
    w = ranks ** -s
    return w / w.sum()


def _check_rows(pi: Tensor):
    sums = pi.reshape(pi.shape[0], -1).sum(axis=1)
    if np.any(pi < 0) or np.any(np.abs(sums - 1.0) > 1e-6):
        raise DataError("routing rows must be probability distributions")


def load_balance_loss(pi_soft: Tensor, s: float = 1.0, gamma_lb: float = 0.01, beta_lb: float = 0.01):
    """KL of the batch partition marginal to a power-law prior plus KL of the
    cluster marginal to uniform, weighted by ``gamma_lb`` and ``beta_lb``.

    ``pi_soft`` is (B, P, C). Returns ``(value, vjp)`` with ``vjp(g) -> g_pi``.
    """
    pi = np.asarray(pi_soft, dtype=np.float64)
    if pi.ndim != 3:
        raise ShapeError(f"expected (B, P, C), got {pi.shape}")
    _check_rows(pi)
    B, P, C = pi.shape
    ph = pi.sum(axis=2).mean(axis=0)
    pt = pi.sum(axis=1).mean(axis=0)
    ph = ph / ph.sum()
    pt = pt / pt.sum()
    kh, kh_vjp = nx.kl_divergence(ph, zipf_prior(P, s))
    kt, kt_vjp = nx.kl_divergence(pt, np.full(C, 1.0 / C))
    value = gamma_lb * kh.value + beta_lb * kt.value

    def vjp(g=1.0):
        gph, _ = kh_vjp(gamma_lb * g)
        gpt, _ = kt_vjp(beta_lb * g)
        # renormalisation above is the identity on valid rows; its Jacobian
        # projects out the all-ones direction
        gph = gph - np.dot(gph, ph)
        gpt = gpt - np.dot(gpt, pt)
        return (np.broadcast_to(gph[None, :, None] + gpt[None, None, :], (B, P, C)) / B).copy()
    return value, vjp


def dppo_loss(pi_pos: Tensor, pi_neg: Tensor, gamma_pref: float = 0.5, eps: float = nx.KL_EPS):
    """Mean of -log sigmoid(gamma * sum(log pi+ - log pi-)) over preference pairs.

    Inputs are (n_pairs, ...) soft routing distributions; the log uses an
    eps floor. Returns ``(DPPOResult, vjp)`` with ``vjp(g) -> (g_pos, g_neg)``.
    """
    pp = np.asarray(pi_pos, dtype=np.float64)
    pn = np.asarray(pi_neg, dtype=np.float64)
    if pp.shape != pn.shape:
        raise ShapeError(f"pair shapes differ: {pp.shape} vs {pn.shape}")
    n = pp.shape[0] if pp.ndim else 0
    if n == 0:
        return DPPOResult(0.0, 0), lambda g=1.0: (np.zeros_like(pp), np.zeros_like(pn))
    axes = tuple(range(1, pp.ndim))
    fp = np.maximum(pp, eps)
    fn = np.maximum(pn, eps)
    gap = np.sum(np.log(fp), axis=axes) - np.sum(np.log(fn), axis=axes)
    z = gamma_pref * gap
    value = float(np.mean(-log_expit(z)))

    def vjp(g=1.0):
        d_gap = -gamma_pref * expit(-z) * g / n
        shp = (n,) + (1,) * (pp.ndim - 1)
        d = d_gap.reshape(shp)
        return np.where(pp >= eps, d / fp, 0.0), np.where(pn >= eps, -d / fn, 0.0)
    return DPPOResult(value, n), vjp


def preference_pairs(labels: Tensor, margin_frac: float = 0.25, max_uses: int = 2,
                     rng: np.random.Generator | None = None) -> list[tuple[int, int]]:
    """Greedy (more popular, less popular) pairs with label gap above the margin.

    The margin is ``margin_frac`` times the label standard deviation. Each
    item joins at most ``max_uses`` pairs. Items are visited in index order
    (or in a permutation drawn from ``rng``); each takes the first eligible
    partner in the same order.
    """
    y = np.asarray(labels, dtype=np.float64).ravel()
    n = y.size
    if n < 2:
        return []
    m = margin_frac * float(np.std(y))
    order = np.arange(n) if rng is None else rng.permutation(n)
    uses = np.zeros(n, dtype=np.int64)
    taken: set[tuple[int, int]] = set()
    pairs = []
    for i in order:
        if uses[i] >= max_uses:
            continue
        for j in order:
            if uses[i] >= max_uses:
                break
            if i == j or uses[j] >= max_uses or abs(y[i] - y[j]) <= m:
                continue
            hi, lo = (i, j) if y[i] > y[j] else (j, i)
            if (hi, lo) in taken:
                continue
            taken.add((hi, lo))
            pairs.append((int(hi), int(lo)))
            uses[i] += 1
            uses[j] += 1
    return pairs


# ---------------------------------------------------------------------------
# online refresh

def update_bank(bank: MemoryBank, routing: RoutingResult, labels: Tensor, eta: float = 0.05,
                tau_lr: float = 0.0, tau_grad: float | None = None) -> MemoryBank:
    """EMA-refresh routed slots toward their gate-weighted queries, then step and clamp tau.

    Every slot selected by at least one batch item moves to
    ``(1 - eta) * slot + eta * q_agg`` where ``q_agg`` is the gate-weighted
    mean of the (detached) projected queries routed to it; its popularity
    centroid moves the same way toward the gate-weighted mean label. Tau
    takes a gradient step with ``tau_grad`` (defaults to the accumulated
    ``bank.tau.grad``) and is clamped to ``[tau_min, tau_max]``.
    """
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    P, C, d_m = bank.M.value.shape
    PC = P * C
    w = np.asarray(routing.pi_K, dtype=np.float64).reshape(-1, PC)
    mask = np.asarray(routing.mask, dtype=bool).reshape(-1, PC)
    q = np.asarray(routing.q_proj, dtype=np.float64).reshape(-1, d_m)
    y = np.asarray(labels, dtype=np.float64).ravel()
    w = w * mask
    mass = w.sum(axis=0)
    hit = mask.any(axis=0) & (mass > 0)
    if eta > 0 and hit.any():
        q_agg = (w.T @ q)[hit] / mass[hit, None]
        y_agg = (w.T @ y)[hit] / mass[hit]
        Mf = bank.M.value.reshape(PC, d_m)
        muf = bank.mu.reshape(PC)
        Mf[hit] = (1.0 - eta) * Mf[hit] + eta * q_agg
        muf[hit] = (1.0 - eta) * muf[hit] + eta * y_agg
    g = float(bank.tau.grad) if tau_grad is None else float(tau_grad)
    new_tau = float(bank.tau.value) - tau_lr * g
    bank.tau.value[...] = min(max(new_tau, bank.tau_min), bank.tau_max)
    return bank


# ---------------------------------------------------------------------------
# slot health

def gini(x: Tensor) -> float:
    v = np.sort(np.asarray(x, dtype=np.float64).ravel())
    n = v.size
    total = v.sum()
    if n == 0 or total <= 0:
        return 0.0
    i = np.arange(1, n + 1)
    return float(np.sum((2 * i - n - 1) * v) / (n * total))


def slot_statistics(history, top_k: int = 5) -> SlotStats:
    """Entropy, Gini and top-k share of the mean soft activation over ``history``.

    ``history`` is one (…, P, C) array or a sequence of them; every leading
    row counts equally.
    """
    arrays = [np.asarray(h, dtype=np.float64) for h in
              (history if isinstance(history, (list, tuple)) else [history])]
    if not arrays or any(a.size == 0 for a in arrays):
        raise ValueError("empty activation history")
    P, C = arrays[0].shape[-2:]
    rows = np.concatenate([a.reshape(-1, P, C) for a in arrays], axis=0)
    mass = rows.mean(axis=0)
    mass = mass / mass.sum()
    flat = mass.ravel()
    nz = flat[flat > 0]
    n = flat.size
    ent = float(-np.sum(nz * np.log(nz)) / math.log(n)) if n > 1 else 0.0
    k = min(top_k, n)
    top = float(np.sort(flat)[::-1][:k].sum())
    return SlotStats(mass, ent, gini(flat), top, k)


# ---------------------------------------------------------------------------
# persistence

def write_heatmap_csv(stats: SlotStats, path, seed: int | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if seed is not None:
            fh.write(f"# seed={seed}\n")
        w = csv.writer(fh)
        w.writerow(["partition", "cluster", "mean_activation"])
        P, C = stats.mass.shape
        for p in range(P):
            for c in range(C):
                w.writerow([p, c, repr(float(stats.mass[p, c]))])
    return path


def bank_to_bytes(bank: MemoryBank) -> bytes:
    P, C, d_m = bank.M.value.shape
    head = BANK_MAGIC + struct.pack("<III", P, C, d_m)
    tail = struct.pack("<ddd", float(bank.tau.value), bank.tau_min, bank.tau_max)
    return (head + bank.M.value.astype("<f8").tobytes() + bank.mu.astype("<f8").tobytes() + tail)


def bank_from_bytes(buf: bytes, offset: int = 0) -> tuple[MemoryBank, int]:
    if buf[offset:offset + len(BANK_MAGIC)] != BANK_MAGIC:
        raise DataError("not a memory bank dump (bad magic)")
    offset += len(BANK_MAGIC)
    P, C, d_m = struct.unpack_from("<III", buf, offset)
    offset += 12
    n = P * C * d_m
    M = np.frombuffer(buf, dtype="<f8", count=n, offset=offset).reshape(P, C, d_m).astype(np.float64)
    offset += 8 * n
    mu = np.frombuffer(buf, dtype="<f8", count=P * C, offset=offset).reshape(P, C).astype(np.float64)
    offset += 8 * P * C
    tau, tmin, tmax = struct.unpack_from("<ddd", buf, offset)
    offset += 24
    return MemoryBank(Param("memory.M", M), mu, Param("memory.tau", np.array(tau)), tmin, tmax), offset


def save_bank(bank: MemoryBank, path) -> None:
    Path(path).write_bytes(bank_to_bytes(bank))


def load_bank(path) -> MemoryBank:
    bank, _ = bank_from_bytes(Path(path).read_bytes())
    return bank
