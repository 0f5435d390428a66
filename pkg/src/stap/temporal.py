"""Temporal encoder: frame scoring, selective scan, windowed attention, gated fusion.

All kernels accept a single sequence ``(T, d)`` or a batch ``(B, T, d)`` of
equal-length sequences and return arrays with the same leading layout.
Each returns ``(out, vjp)`` in the style of :mod:`stap.numerics`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import numerics as nx
from .numerics import ParameterStore, ShapeError, Tensor, uniform_init


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return x[None], True
    if x.ndim == 3:
        return x, False
    raise ShapeError(f"expected (T, d) or (B, T, d), got {x.shape}")


def _unbatch(a, single: bool):
    return a[0] if single else a


# ---------------------------------------------------------------------------
# configs

@dataclass
class SSMConfig:
    d_h: int = 16
    delta_base: float = 0.1
    alpha: float = 1.0
    rho: float = 0.5
    delta_min: float = 0.01
    delta_max: float = 1.0
    delta_mode: str = "score"

    def __post_init__(self):
        if self.delta_mode not in ("score", "anchor"):
            raise ValueError(f"delta_mode must be 'score' or 'anchor', got {self.delta_mode!r}")
        if not 0 < self.delta_min <= self.delta_base <= self.delta_max:
            raise ValueError("need 0 < delta_min <= delta_base <= delta_max, got "
                             f"{self.delta_min}, {self.delta_base}, {self.delta_max}")
        if self.d_h < 1:
            raise ValueError("d_h must be >= 1")


@dataclass
class SparseAttnConfig:
    d_a: int = 16
    w_base: float = 8.0
    beta: float = 1.0

    def __post_init__(self):
        if self.d_a < 1:
            raise ValueError("d_a must be >= 1")
        if self.w_base < 0 or self.beta < 0:
            raise ValueError("w_base and beta must be non-negative")


@dataclass
class FrameScoreOutput:
    u: Tensor
    w: Tensor
    anchor: Tensor


@dataclass
class TemporalOutput:
    V_seq: Tensor
    V: Tensor
    gates: Tensor
    Y_ssm: Tensor
    Y_attn: Tensor
    scores: FrameScoreOutput


# ---------------------------------------------------------------------------
# frame scoring

def frame_deltas(x: Tensor) -> Tensor:
    dx = np.zeros_like(x)
    dx[:, 1:] = x[:, 1:] - x[:, :-1]
    return dx


def score_frames(x: Tensor, W1: Tensor, b1: Tensor, W2: Tensor, b2: Tensor,
                 gamma: Tensor | None = None, beta: Tensor | None = None,
                 eps: float = nx.DIV_EPS):
    """Per-frame importance from inter-frame deltas, plus the global anchor.

    The VJP takes ``(g_w, g_anchor)`` and returns gradients for
    ``(x, W1, b1, W2, b2, gamma, beta)``.
    """
    xb, single = _batched(np.asarray(x, dtype=np.float64))
    B, T, d = xb.shape
    if W1.shape[1] != d:
        raise ShapeError(f"W1 has {W1.shape[1]} columns, frames have width {d}")
    if W2.shape[0] != 1:
        raise ShapeError(f"W2 must have one output row, got {W2.shape}")
    gamma = np.ones(d) if gamma is None else gamma
    beta = np.zeros(d) if beta is None else beta

    dx = frame_deltas(xb)
    pre, lin1_vjp = nx.linear(dx, W1, b1)
    hid, gelu_vjp = nx.gelu(pre)
    u3, lin2_vjp = nx.linear(hid, W2, b2)
    u = u3[..., 0]
    w = expit(u)

    num = np.einsum("bt,btd->bd", w, xb)
    den = w.sum(axis=1) + eps
    pooled = num / den[:, None]
    ln, ln_vjp = nx.layer_norm(pooled, gamma, beta)
    anchor = np.tanh(ln)

    def vjp(g_w, g_anchor):
        g_w = np.zeros((B, T)) if g_w is None else np.asarray(g_w).reshape(B, T)
        g_anchor = np.zeros((B, d)) if g_anchor is None else np.asarray(g_anchor).reshape(B, d)
        g_ln = g_anchor * (1.0 - anchor * anchor)
        g_pooled, g_gamma, g_beta = ln_vjp(g_ln)
        g_num = g_pooled / den[:, None]
        g_den = -np.sum(g_pooled * num, axis=1) / den ** 2
        g_w_tot = g_w + np.einsum("bd,btd->bt", g_num, xb) + g_den[:, None]
        gx = w[..., None] * g_num[:, None, :]
        g_u = g_w_tot * w * (1.0 - w)
        g_hid, gW2, gb2 = lin2_vjp(g_u[..., None])
        (g_pre,) = gelu_vjp(g_hid)
        g_dx, gW1, gb1 = lin1_vjp(g_pre)
        gx[:, 1:] += g_dx[:, 1:]
        gx[:, :-1] -= g_dx[:, 1:]
        return _unbatch(gx, single), gW1, gb1, gW2, gb2, g_gamma, g_beta

    out = FrameScoreOutput(_unbatch(u, single), _unbatch(w, single), _unbatch(anchor, single))
    return out, vjp


# ---------------------------------------------------------------------------
# selective scan

def compute_delta(x: Tensor, w: Tensor, anchor: Tensor, cfg: SSMConfig):
    """Per-frame step size, clamped to [delta_min, delta_max].

    Score mode lowers the step on salient frames: delta = base * (1 + alpha * (1 - w)).
    Anchor mode uses base + alpha * cos(anchor, x_t) + rho * w.
    VJP maps ``g_delta`` to ``(g_x, g_w, g_anchor)``.
    """
    xb, single = _batched(np.asarray(x, dtype=np.float64))
    wb = np.asarray(w, dtype=np.float64).reshape(xb.shape[:2])
    gb = np.asarray(anchor, dtype=np.float64).reshape(xb.shape[0], xb.shape[2])
    if cfg.delta_mode == "score":
        raw = cfg.delta_base * (1.0 + cfg.alpha * (1.0 - wb))
        cos_vjp = None
    else:
        cos, cos_vjp = nx.cosine_similarity(np.broadcast_to(gb[:, None, :], xb.shape), xb)
        raw = cfg.delta_base + cfg.alpha * cos + cfg.rho * wb
    delta = np.clip(raw, cfg.delta_min, cfg.delta_max)
    live = (raw > cfg.delta_min) & (raw < cfg.delta_max)

    def vjp(g_delta):
        g_raw = np.asarray(g_delta).reshape(raw.shape) * live
        if cfg.delta_mode == "score":
            return (_unbatch(np.zeros_like(xb), single),
                    _unbatch(-cfg.delta_base * cfg.alpha * g_raw, single),
                    _unbatch(np.zeros_like(gb), single))
        g_anchor_b, g_x = cos_vjp(cfg.alpha * g_raw)
        return (_unbatch(g_x, single), _unbatch(cfg.rho * g_raw, single),
                _unbatch(g_anchor_b.sum(axis=1), single))
    return _unbatch(delta, single), vjp


def _scan_forward(xb, delta, lam, Bm, C, D):
    bx = xb @ Bm.T
    a = np.exp(-delta[..., None] * lam)
    Bsz, T, _ = xb.shape
    H = np.empty((Bsz, T, lam.shape[0]))
    h = np.zeros((Bsz, lam.shape[0]))
    for t in range(T):
        h = a[:, t] * h + delta[:, t, None] * bx[:, t]
        H[:, t] = h
    y = H @ C.T + D * xb
    return y, (bx, a, H)


def _scan_backward(gy, xb, delta, lam, Bm, C, D, cache):
    bx, a, H = cache
    gC = np.einsum("btv,bth->vh", gy, H)
    gD = np.einsum("btv,btv->v", gy, xb)
    gH = gy @ C
    T = xb.shape[1]
    gh_all = np.empty_like(gH)
    carry = np.zeros_like(gH[:, 0])
    for t in range(T - 1, -1, -1):
        gh = gH[:, t] + carry
        gh_all[:, t] = gh
        carry = gh * a[:, t]
    H_prev = np.zeros_like(H)
    H_prev[:, 1:] = H[:, :-1]
    ga = gh_all * H_prev
    g_delta = np.einsum("bth,bth->bt", gh_all, bx) - np.einsum("bth,bth,h->bt", ga, a, lam)
    g_lam = -np.einsum("bth,bth,bt->h", ga, a, delta)
    g_bx = gh_all * delta[..., None]
    gBm = np.einsum("bth,btv->hv", g_bx, xb)
    gx = g_bx @ Bm + D * gy
    return gx, g_delta, g_lam, gBm, gC, gD


def ssm_scan(x: Tensor, delta: Tensor, lam_raw: Tensor, Bm: Tensor, C: Tensor, D: Tensor,
             direction: str = "forward"):
    """Linear recurrence h_t = exp(-delta_t * lam) * h_{t-1} + delta_t * B x_t, y_t = C h_t + D * x_t.

    ``lam = softplus(lam_raw)`` keeps the decay in (0, 1). The backward
    direction runs the same recurrence over the reversed sequence and
    reverses the result. VJP returns gradients for
    ``(x, delta, lam_raw, B, C, D)``.
    """
    if direction not in ("forward", "backward"):
        raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")
    xb, single = _batched(np.asarray(x, dtype=np.float64))
    db = np.asarray(delta, dtype=np.float64).reshape(xb.shape[:2])
    d_h = lam_raw.shape[0]
    d_v = xb.shape[2]
    if Bm.shape != (d_h, d_v) or C.shape != (d_v, d_h) or D.shape != (d_v,):
        raise ShapeError(f"scan params B {Bm.shape}, C {C.shape}, D {D.shape} for d_h={d_h}, d_v={d_v}")
    lam, lam_vjp = nx.softplus(lam_raw)
    rev = direction == "backward"
    xs = xb[:, ::-1] if rev else xb
    ds = db[:, ::-1] if rev else db
    y, cache = _scan_forward(xs, ds, lam, Bm, C, D)
    if rev:
        y = y[:, ::-1]

    def vjp(gy):
        gy = np.asarray(gy).reshape(xb.shape)
        gys = gy[:, ::-1] if rev else gy
        gx, g_delta, g_lam, gBm, gC, gD = _scan_backward(gys, xs, ds, lam, Bm, C, D, cache)
        if rev:
            gx, g_delta = gx[:, ::-1], g_delta[:, ::-1]
        (g_raw,) = lam_vjp(g_lam)
        return (_unbatch(np.ascontiguousarray(gx), single), _unbatch(np.ascontiguousarray(g_delta), single),
                g_raw, gBm, gC, gD)
    return _unbatch(np.ascontiguousarray(y), single), vjp


def bidirectional_ssm(x, delta, lam_raw, Bm, C, D):
    """Sum of the forward and backward scans."""
    yf, vf = ssm_scan(x, delta, lam_raw, Bm, C, D, "forward")
    yb, vb = ssm_scan(x, delta, lam_raw, Bm, C, D, "backward")

    def vjp(gy):
        return tuple(a + b for a, b in zip(vf(gy), vb(gy)))
    return yf + yb, vjp


# ---------------------------------------------------------------------------
# attention

def round_half_away(v: Tensor) -> Tensor:
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def attention_windows(x: Tensor, w_base: float, beta: float) -> np.ndarray:
    """Half-window per frame: clamp(round(w_base + beta * ||x_t||), 1, T)."""
    xb, single = _batched(np.asarray(x, dtype=np.float64))
    T = xb.shape[1]
    raw = w_base + beta * np.sqrt(np.sum(xb * xb, axis=-1))
    # non-finite frames get the widest window; their NaN surfaces downstream
    raw = np.where(np.isfinite(raw), raw, T)
    win = np.clip(round_half_away(raw), 1, T).astype(np.int64)
    return _unbatch(win, single)


def _qkv(xb, Wq, Wk, Wv):
    return xb @ Wq.T, xb @ Wk.T, xb @ Wv.T


def _qkv_backward(xb, Wq, Wk, Wv, gq, gk, gv):
    gx = gq @ Wq + gk @ Wk + gv @ Wv
    flat = xb.reshape(-1, xb.shape[-1])
    gWq = gq.reshape(-1, Wq.shape[0]).T @ flat
    gWk = gk.reshape(-1, Wk.shape[0]).T @ flat
    gWv = gv.reshape(-1, Wv.shape[0]).T @ flat
    return gx, gWq, gWk, gWv


def sparse_attention(x: Tensor, Wq: Tensor, Wk: Tensor, Wv: Tensor, Wo: Tensor, cfg: SparseAttnConfig):
    """Single-head attention restricted to |j - t| <= win_t, projected back to d_v.

    Work is O(T * (2W + 1) * d_a) with W the largest half-window in the
    batch. Windows are a discrete function of x and carry no gradient.
    VJP returns gradients for ``(x, Wq, Wk, Wv, Wo)``.
    """
    xb, single = _batched(np.asarray(x, dtype=np.float64))
    B, T, _ = xb.shape
    d_a = Wq.shape[0]
    if Wo.shape != (xb.shape[2], d_a):
        raise ShapeError(f"Wo must be ({xb.shape[2]}, {d_a}), got {Wo.shape}")
    win = attention_windows(xb, cfg.w_base, cfg.beta)
    W = int(win.max())
    offsets = np.arange(-W, W + 1)
    q, k, v = _qkv(xb, Wq, Wk, Wv)
    pad = ((0, 0), (W, W), (0, 0))
    kw = np.lib.stride_tricks.sliding_window_view(np.pad(k, pad), 2 * W + 1, axis=1)
    vw = np.lib.stride_tricks.sliding_window_view(np.pad(v, pad), 2 * W + 1, axis=1)
    pos = np.arange(T)[:, None] + offsets[None, :]
    valid = (pos >= 0) & (pos < T)
    valid = valid[None] & (np.abs(offsets)[None, None, :] <= win[..., None])
    scale = 1.0 / math.sqrt(d_a)
    s = np.einsum("btd,btdo->bto", q, kw) * scale
    s = np.where(valid, s, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.where(valid, np.exp(s), 0.0)
    p = e / e.sum(axis=-1, keepdims=True)
    ctx = np.einsum("bto,btdo->btd", p, vw)
    y = ctx @ Wo.T

    def vjp(gy):
        gy = np.asarray(gy).reshape(y.shape)
        gWo = gy.reshape(-1, gy.shape[-1]).T @ ctx.reshape(-1, d_a)
        gctx = gy @ Wo
        gp = np.einsum("btd,btdo->bto", gctx, vw)
        gs = p * (gp - np.sum(p * gp, axis=-1, keepdims=True)) * scale
        gq = np.einsum("bto,btdo->btd", gs, kw)
        gk_pad = np.zeros((B, T + 2 * W, d_a))
        gv_pad = np.zeros((B, T + 2 * W, d_a))
        for i in range(2 * W + 1):
            gk_pad[:, i:i + T] += gs[:, :, i, None] * q
            gv_pad[:, i:i + T] += p[:, :, i, None] * gctx
        gx, gWq, gWk, gWv = _qkv_backward(xb, Wq, Wk, Wv, gq, gk_pad[:, W:W + T], gv_pad[:, W:W + T])
        return _unbatch(gx, single), gWq, gWk, gWv, gWo
    return _unbatch(y, single), vjp


def dense_attention(x: Tensor, Wq: Tensor, Wk: Tensor, Wv: Tensor, Wo: Tensor,
                    windows: np.ndarray | None = None):
    """Brute-force O(T^2) attention; with ``windows`` the same neighbourhood mask is applied."""
    xb, single = _batched(np.asarray(x, dtype=np.float64))
    B, T, _ = xb.shape
    d_a = Wq.shape[0]
    q, k, v = _qkv(xb, Wq, Wk, Wv)
    scale = 1.0 / math.sqrt(d_a)
    s = (q @ np.swapaxes(k, 1, 2)) * scale
    if windows is not None:
        wb = np.asarray(windows).reshape(B, T)
        dist = np.abs(np.arange(T)[:, None] - np.arange(T)[None, :])
        mask = dist[None] <= wb[..., None]
        s = np.where(mask, s, -np.inf)
    else:
        mask = None
    # in place: at long T the T x T temporaries dominate memory traffic
    s -= s.max(axis=-1, keepdims=True)
    p = np.exp(s, out=s)
    p /= p.sum(axis=-1, keepdims=True)
    ctx = p @ v
    y = ctx @ Wo.T

    def vjp(gy):
        gy = np.asarray(gy).reshape(y.shape)
        gWo = gy.reshape(-1, gy.shape[-1]).T @ ctx.reshape(-1, d_a)
        gctx = gy @ Wo
        gp = gctx @ np.swapaxes(v, 1, 2)
        gs = p * (gp - np.sum(p * gp, axis=-1, keepdims=True)) * scale
        gq = gs @ k
        gk = np.swapaxes(gs, 1, 2) @ q
        gv = np.swapaxes(p, 1, 2) @ gctx
        gx, gWq, gWk, gWv = _qkv_backward(xb, Wq, Wk, Wv, gq, gk, gv)
        return _unbatch(gx, single), gWq, gWk, gWv, gWo
    return _unbatch(y, single), vjp


# ---------------------------------------------------------------------------
# gated fusion

def gated_fusion(x: Tensor, y_ssm: Tensor, y_attn: Tensor, anchor: Tensor,
                 Wg: Tensor, bg: Tensor, Wres: Tensor, bres: Tensor):
    """Softmax-gated mix of both pathways and the anchor plus a residual projection.

    VJP takes ``(g_V_seq, g_V)`` and returns gradients for
    ``(x, y_ssm, y_attn, anchor, Wg, bg, Wres, bres)``.
    """
    xb, single = _batched(np.asarray(x, dtype=np.float64))
    B, T, d = xb.shape
    ys = np.asarray(y_ssm).reshape(B, T, d)
    ya = np.asarray(y_attn).reshape(B, T, d)
    g = np.asarray(anchor).reshape(B, d)
    if Wg.shape != (3, 3 * d) or bg.shape != (3,):
        raise ShapeError(f"gate weights must be (3, {3 * d}) and (3,), got {Wg.shape}, {bg.shape}")
    feat = np.concatenate([ys.mean(axis=1), ya.mean(axis=1), g], axis=1)
    logits, gate_lin_vjp = nx.linear(feat, Wg, bg)
    gates, gate_sm_vjp = nx.softmax_rows(logits, axis=-1)
    res, res_vjp = nx.linear(xb, Wres, bres)
    V_seq = (gates[:, 0, None, None] * ys + gates[:, 1, None, None] * ya
             + gates[:, 2, None, None] * g[:, None, :] + res)
    V = V_seq.mean(axis=1)

    def vjp(g_vseq, g_v):
        gt = np.zeros((B, T, d)) if g_vseq is None else np.asarray(g_vseq).reshape(B, T, d).copy()
        if g_v is not None:
            gt += np.asarray(g_v).reshape(B, d)[:, None, :] / T
        g_gates = np.stack([np.einsum("btd,btd->b", gt, ys),
                            np.einsum("btd,btd->b", gt, ya),
                            np.einsum("btd,bd->b", gt, g)], axis=1)
        g_logits, _ = gate_sm_vjp(g_gates)
        g_feat, gWg, gbg = gate_lin_vjp(g_logits)
        gys = gates[:, 0, None, None] * gt + g_feat[:, None, :d] / T
        gya = gates[:, 1, None, None] * gt + g_feat[:, None, d:2 * d] / T
        gg = gates[:, 2, None] * gt.sum(axis=1) + g_feat[:, 2 * d:]
        gx, gWres, gbres = res_vjp(gt)
        return (_unbatch(gx, single), _unbatch(gys, single), _unbatch(gya, single),
                _unbatch(gg, single), gWg, gbg, gWres, gbres)

    out = TemporalOutput(_unbatch(V_seq, single), _unbatch(V, single), _unbatch(gates, single),
                         _unbatch(ys, single), _unbatch(ya, single), None)
    return out, vjp


# ---------------------------------------------------------------------------
# composed encoder

class TemporalEncoder:
    """Owns the temporal parameters and composes the four stages.

    ``use_scoring``, ``use_ssm`` and ``use_attention`` switch stages off for
    ablations: without scoring every frame weight is fixed at 0.5; a disabled
    pathway contributes zeros to the fusion.
    """

    PREFIX = "temporal."

    def __init__(self, store: ParameterStore, d_v: int, rng: np.random.Generator,
                 ssm: SSMConfig | None = None, attn: SparseAttnConfig | None = None,
                 d_score: int = 16, use_scoring: bool = True, use_ssm: bool = True,
                 use_attention: bool = True):
        self.store = store
        self.d_v = d_v
        self.ssm = ssm or SSMConfig()
        self.attn = attn or SparseAttnConfig()
        self.use_scoring = use_scoring
        self.use_ssm = use_ssm
        self.use_attention = use_attention
        d_h, d_a = self.ssm.d_h, self.attn.d_a
        p = self.PREFIX
        add = store.add
        add(p + "score.W1", uniform_init(rng, (d_score, d_v), d_v))
        add(p + "score.b1", uniform_init(rng, (d_score,), d_v))
        add(p + "score.W2", uniform_init(rng, (1, d_score), d_score))
        add(p + "score.b2", np.zeros(1))
        add(p + "anchor.gamma", np.ones(d_v))
        add(p + "anchor.beta", np.zeros(d_v))
        # softplus(raw) uniform in [0.5, 1.5]
        add(p + "ssm.lam_raw", np.log(np.expm1(rng.uniform(0.5, 1.5, size=d_h))))
        add(p + "ssm.B", uniform_init(rng, (d_h, d_v), d_v))
        add(p + "ssm.C", uniform_init(rng, (d_v, d_h), d_h))
        add(p + "ssm.D", np.ones(d_v))
        add(p + "attn.Wq", uniform_init(rng, (d_a, d_v), d_v))
        add(p + "attn.Wk", uniform_init(rng, (d_a, d_v), d_v))
        add(p + "attn.Wv", uniform_init(rng, (d_a, d_v), d_v))
        add(p + "attn.Wo", uniform_init(rng, (d_v, d_a), d_a))
        add(p + "gate.W", uniform_init(rng, (3, 3 * d_v), 3 * d_v))
        add(p + "gate.b", np.zeros(3))
        add(p + "res.W", uniform_init(rng, (d_v, d_v), d_v))
        add(p + "res.b", np.zeros(d_v))

    def _p(self, name):
        return self.store[self.PREFIX + name]

    def forward(self, x: Tensor):
        """Run the full temporal stack on (B, T, d_v) frames.

        Returns ``(TemporalOutput, vjp)``; ``vjp(g_V_seq, g_V)`` accumulates
        parameter gradients into the store and returns the frame gradient.
        """
        xb, single = _batched(np.asarray(x, dtype=np.float64))
        B, T, d = xb.shape
        if d != self.d_v:
            raise ShapeError(f"frames have width {d}, encoder expects {self.d_v}")
        P = self._p
        if self.use_scoring:
            scores, score_vjp = score_frames(xb, P("score.W1").value, P("score.b1").value,
                                             P("score.W2").value, P("score.b2").value,
                                             P("anchor.gamma").value, P("anchor.beta").value)
        else:
            scores, score_vjp = self._flat_scores(xb)
        zeros = np.zeros_like(xb)
        if self.use_ssm:
            delta, delta_vjp = compute_delta(xb, scores.w, scores.anchor, self.ssm)
            y_ssm, ssm_vjp = bidirectional_ssm(xb, delta, P("ssm.lam_raw").value, P("ssm.B").value,
                                               P("ssm.C").value, P("ssm.D").value)
        else:
            y_ssm = zeros
        if self.use_attention:
            y_attn, attn_vjp = sparse_attention(xb, P("attn.Wq").value, P("attn.Wk").value,
                                                P("attn.Wv").value, P("attn.Wo").value, self.attn)
        else:
            y_attn = zeros
        fused, fuse_vjp = gated_fusion(xb, y_ssm, y_attn, scores.anchor, P("gate.W").value,
                                       P("gate.b").value, P("res.W").value, P("res.b").value)
        fused.scores = scores

        def vjp(g_vseq, g_v):
            gx, gys, gya, gg, gWg, gbg, gWres, gbres = fuse_vjp(g_vseq, g_v)
            P("gate.W").accumulate(gWg)
            P("gate.b").accumulate(gbg)
            P("res.W").accumulate(gWres)
            P("res.b").accumulate(gbres)
            gw = np.zeros((B, T))
            if self.use_attention:
                gxa, gWq, gWk, gWv, gWo = attn_vjp(gya)
                gx = gx + gxa
                for n, gv in zip(("Wq", "Wk", "Wv", "Wo"), (gWq, gWk, gWv, gWo)):
                    P("attn." + n).accumulate(gv)
            if self.use_ssm:
                gxs, g_delta, g_lam, gB, gC, gD = ssm_vjp(gys)
                gx = gx + gxs
                P("ssm.lam_raw").accumulate(g_lam)
                P("ssm.B").accumulate(gB)
                P("ssm.C").accumulate(gC)
                P("ssm.D").accumulate(gD)
                gxd, gwd, gad = delta_vjp(g_delta)
                gx = gx + gxd
                gw = gw + gwd
                gg = gg + gad
            gxs2, gW1, gb1, gW2, gb2, ggam, gbet = score_vjp(gw, gg)
            gx = gx + gxs2
            if self.use_scoring:
                for n, gv in zip(("score.W1", "score.b1", "score.W2", "score.b2",
                                  "anchor.gamma", "anchor.beta"),
                                 (gW1, gb1, gW2, gb2, ggam, gbet)):
                    P(n).accumulate(gv)
            return _unbatch(gx, single)

        if single:
            fused = TemporalOutput(fused.V_seq[0], fused.V[0], fused.gates[0], fused.Y_ssm[0],
                                   fused.Y_attn[0], FrameScoreOutput(scores.u[0], scores.w[0],
                                                                     scores.anchor[0]))
        return fused, vjp

    def _flat_scores(self, xb):
        B, T, d = xb.shape
        w = np.full((B, T), 0.5)
        P = self._p
        pooled = xb.mean(axis=1)
        ln, ln_vjp = nx.layer_norm(pooled, P("anchor.gamma").value, P("anchor.beta").value)
        anchor = np.tanh(ln)

        def vjp(g_w, g_anchor):
            g_ln = g_anchor * (1.0 - anchor * anchor)
            g_pooled, ggam, gbet = ln_vjp(g_ln)
            P("anchor.gamma").accumulate(ggam)
            P("anchor.beta").accumulate(gbet)
            gx = np.repeat(g_pooled[:, None, :], T, axis=1) / T
            return gx, None, None, None, None, None, None
        return FrameScoreOutput(np.zeros((B, T)), w, anchor), vjp


def temporal_forward(x: Tensor, encoder: TemporalEncoder) -> TemporalOutput:
    """Forward-only convenience wrapper around :meth:`TemporalEncoder.forward`."""
    out, _ = encoder.forward(x)
    return out
