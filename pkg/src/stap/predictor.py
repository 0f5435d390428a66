"""Prediction head, composite loss, end-to-end training step and checkpoints."""
from __future__ import annotations

import io
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from . import spatial_memory as sp
from .numerics import EvaluationError, ParameterStore, ShapeError, Tensor, uniform_init
from .temporal import SparseAttnConfig, SSMConfig, TemporalEncoder

CHECKPOINT_MAGIC = b"STAPCK1"
CHECKPOINT_VERSION = 1


@dataclass
class SampleBatch:
    frames: Tensor   # (B, T, d_v)
    text: Tensor     # (B, L, d_t)
    meta: Tensor     # (B, d_u)
    labels: Tensor   # (B,)

    def __post_init__(self):
        B = self.frames.shape[0]
        if self.frames.ndim != 3 or self.text.ndim != 3 or self.meta.ndim != 2:
            raise ShapeError("batch needs frames (B,T,d_v), text (B,L,d_t), meta (B,d_u)")
        if self.text.shape[0] != B or self.meta.shape[0] != B or np.shape(self.labels) != (B,):
            raise ShapeError("batch members disagree on batch size")
        if self.text.shape[1] < 1:
            raise ShapeError("need at least one text token")

    def __len__(self):
        return self.frames.shape[0]

    def subset(self, idx) -> "SampleBatch":
        return SampleBatch(self.frames[idx], self.text[idx], self.meta[idx], self.labels[idx])


@dataclass
class LossBreakdown:
    total: float
    reg: float
    pref: float
    balance: float
    lambda_pref: float
    lambda_bal: float
    n_pairs: int = 0


@dataclass
class ModelConfig:
    d_v: int = 16
    d_t: int = 16
    d_u: int = 4
    d_m: int = 16
    d_common: int = 32
    d_hidden: int = 32
    d_score: int = 16
    ssm: SSMConfig = field(default_factory=SSMConfig)
    attn: SparseAttnConfig = field(default_factory=SparseAttnConfig)
    P: int = 6
    C: int = 4
    K: int = 3
    L_ca: int = 2
    tau_init: float = 1.0
    tau_min: float = 0.1
    tau_max: float = 5.0
    eta: float = 0.05
    lr: float = 1e-2
    tau_lr: float = 1e-2
    weight_decay: float = 1e-5
    huber_delta: float = 1.0
    lambda_pref: float = 0.10
    lambda_bal: float = 1.0
    gamma_pref: float = 0.5
    gamma_lb: float = 0.01
    beta_lb: float = 0.01
    zipf_s: float = 1.0
    margin_frac: float = 0.25
    renormalize_topk: bool = False
    use_memory: bool = True
    use_balance: bool = True
    use_dppo: bool = True
    use_scoring: bool = True
    use_ssm: bool = True
    use_attention: bool = True
    init_space: str = "projected"

    def __post_init__(self):
        if self.init_space not in ("embedding", "projected"):
            raise ValueError(f"init_space must be 'embedding' or 'projected', got {self.init_space!r}")
        if not 1 <= self.K <= self.P * self.C:
            raise ValueError(f"K={self.K} outside [1, P*C={self.P * self.C}]")
        if self.L_ca < 1:
            raise ValueError("L_ca must be >= 1")


# ---------------------------------------------------------------------------
# cross-attention

def pooled_attention(query: Tensor, seq: Tensor, Wq: Tensor, Wk: Tensor, Wv: Tensor):
    """One pooled query vector per item attending over a token sequence.

    query (B, d), seq (B, N, d). VJP returns ``(g_query, g_seq, gWq, gWk, gWv)``.
    """
    d = Wq.shape[0]
    q, q_vjp = nx.linear(query, Wq)
    k, k_vjp = nx.linear(seq, Wk)
    v, v_vjp = nx.linear(seq, Wv)
    scale = 1.0 / math.sqrt(d)
    s = np.einsum("bnd,bd->bn", k, q) * scale
    p, sm_vjp = nx.softmax_rows(s, axis=-1)
    out = np.einsum("bn,bnd->bd", p, v)

    def vjp(g):
        gp = np.einsum("bd,bnd->bn", g, v)
        gv = p[..., None] * g[:, None, :]
        gs, _ = sm_vjp(gp)
        gs = gs * scale
        gq = np.einsum("bn,bnd->bd", gs, k)
        gk = gs[..., None] * q[:, None, :]
        g_query, gWq, _ = q_vjp(gq)
        g_seq_k, gWk, _ = k_vjp(gk)
        g_seq_v, gWv, _ = v_vjp(gv)
        return g_query, g_seq_k + g_seq_v, gWq, gWk, gWv
    return out, vjp


def cross_attention(V_seq: Tensor, T_seq: Tensor, layers: list[dict]):
    """Bi-directional cross-attention with pooled queries.

    Each layer updates a text state by attending from the visual state over
    the text tokens, and a visual state by attending from the text state over
    the frames, each followed by residual + layer norm. States start as the
    mean-pooled sequences. ``layers`` holds arrays keyed ``t.Wq``, ``t.Wk``,
    ``t.Wv``, ``t.gamma``, ``t.beta`` and the same under ``v.``.
    VJP maps ``(g_vstar, g_tstar)`` to ``(g_V_seq, g_T_seq, [layer grads])``.
    """
    if V_seq.ndim != 3 or T_seq.ndim != 3 or V_seq.shape[2] != T_seq.shape[2]:
        raise ShapeError(f"cross_attention needs (B,T,d) and (B,L,d), got {V_seq.shape}, {T_seq.shape}")
    v_state = V_seq.mean(axis=1)
    t_state = T_seq.mean(axis=1)
    tape = []
    for lp in layers:
        a_t, at_vjp = pooled_attention(v_state, T_seq, lp["t.Wq"], lp["t.Wk"], lp["t.Wv"])
        a_v, av_vjp = pooled_attention(t_state, V_seq, lp["v.Wq"], lp["v.Wk"], lp["v.Wv"])
        t_new, lt_vjp = nx.layer_norm(t_state + a_t, lp["t.gamma"], lp["t.beta"])
        v_new, lv_vjp = nx.layer_norm(v_state + a_v, lp["v.gamma"], lp["v.beta"])
        tape.append((at_vjp, av_vjp, lt_vjp, lv_vjp))
        t_state, v_state = t_new, v_new

    def vjp(g_v, g_t):
        gV = np.zeros_like(V_seq)
        gT = np.zeros_like(T_seq)
        grads = []
        for at_vjp, av_vjp, lt_vjp, lv_vjp in reversed(tape):
            g_tsum, gtg, gtb = lt_vjp(g_t)
            g_vsum, gvg, gvb = lv_vjp(g_v)
            gq_t, gseq_t, tWq, tWk, tWv = at_vjp(g_tsum)
            gq_v, gseq_v, vWq, vWk, vWv = av_vjp(g_vsum)
            gT += gseq_t
            gV += gseq_v
            # text state feeds its own residual and the visual query; same for visual
            g_t = g_tsum + gq_v
            g_v = g_vsum + gq_t
            grads.append({"t.Wq": tWq, "t.Wk": tWk, "t.Wv": tWv, "t.gamma": gtg, "t.beta": gtb,
                          "v.Wq": vWq, "v.Wk": vWk, "v.Wv": vWv, "v.gamma": gvg, "v.beta": gvb})
        gV += g_v[:, None, :] / V_seq.shape[1]
        gT += g_t[:, None, :] / T_seq.shape[1]
        return gV, gT, grads[::-1]
    return (v_state, t_state), vjp


def assemble_features(v_star: Tensor, t_star: Tensor, u_proj: Tensor, R: Tensor):
    """H = [V*; T*; U; R; V* * R; T* * R], all blocks of common width."""
    H = np.concatenate([v_star, t_star, u_proj, R, v_star * R, t_star * R], axis=-1)

    def vjp(g):
        gv, gt, gu, gr, gvr, gtr = np.split(g, 6, axis=-1)
        return gv + gvr * R, gt + gtr * R, gu, gr + gvr * v_star + gtr * t_star
    return H, vjp


# ---------------------------------------------------------------------------
# losses

def total_loss(preds: Tensor, labels: Tensor, pref: float, balance: float, lambda_pref: float,
               lambda_bal: float, delta: float = 1.0, n_pairs: int = 0):
    """Huber regression plus weighted preference and balance terms.

    Returns ``(LossBreakdown, huber_vjp)``.
    """
    reg, hvjp = nx.huber_loss(np.asarray(preds, dtype=np.float64), np.asarray(labels, dtype=np.float64), delta)
    total = reg + lambda_pref * pref + lambda_bal * balance
    return LossBreakdown(total, reg, pref, balance, lambda_pref, lambda_bal, n_pairs), hvjp


# ---------------------------------------------------------------------------
# model

@dataclass
class ForwardCache:
    preds: Tensor
    routing: sp.RoutingResult | None
    temporal: object
    backward: object


class PopularityModel:
    """Temporal encoder, memory routing and prediction head under one ParameterStore."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        # one stream per component so ablations leave the shared parameters untouched
        t_seq, h_seq, m_seq = np.random.SeedSequence(seed).spawn(3)
        self.store = ParameterStore()
        self.temporal = TemporalEncoder(self.store, cfg.d_v, np.random.default_rng(t_seq), cfg.ssm,
                                        cfg.attn, cfg.d_score, cfg.use_scoring, cfg.use_ssm,
                                        cfg.use_attention)
        rng = np.random.default_rng(h_seq)
        mrng = np.random.default_rng(m_seq)
        dc = cfg.d_common
        add = self.store.add
        add("proj.v.W", uniform_init(rng, (dc, cfg.d_v), cfg.d_v))
        add("proj.v.b", np.zeros(dc))
        add("proj.t.W", uniform_init(rng, (dc, cfg.d_t), cfg.d_t))
        add("proj.t.b", np.zeros(dc))
        add("proj.u.W", uniform_init(rng, (dc, cfg.d_u), cfg.d_u))
        add("proj.u.b", np.zeros(dc))
        for layer in range(cfg.L_ca):
            for side in ("t", "v"):
                pre = f"xattn.{layer}.{side}."
                for w in ("Wq", "Wk", "Wv"):
                    add(pre + w, uniform_init(rng, (dc, dc), dc))
                add(pre + "gamma", np.ones(dc))
                add(pre + "beta", np.zeros(dc))
        d_q = cfg.d_v + cfg.d_t + cfg.d_u
        add("head.W1", uniform_init(rng, (cfg.d_hidden, 6 * dc), 6 * dc))
        add("head.b1", np.zeros(cfg.d_hidden))
        add("head.W2", uniform_init(rng, (1, cfg.d_hidden), cfg.d_hidden))
        add("head.b2", np.zeros(1))
        if cfg.use_memory:
            add("route.Wq", uniform_init(mrng, (cfg.d_m, d_q), d_q))
            add("retr.W", uniform_init(mrng, (dc, cfg.d_m + 1), cfg.d_m + 1))
            add("retr.b", np.zeros(dc))
        self.bank: sp.MemoryBank | None = None

    # -- memory ------------------------------------------------------------

    def routing_queries(self, batch: SampleBatch) -> Tensor:
        tout, _ = self.temporal.forward(batch.frames)
        return np.concatenate([tout.V, batch.text.mean(axis=1), batch.meta], axis=1)

    def projected_queries(self, batch: SampleBatch) -> Tensor:
        q = self.routing_queries(batch)
        proj = q @ self.store["route.Wq"].value.T
        ln, _ = nx.layer_norm(proj, np.ones(proj.shape[1]), np.zeros(proj.shape[1]))
        return np.tanh(ln)

    def init_memory(self, batch: SampleBatch, seed: int | None = None) -> sp.MemoryBank:
        """Initialise the bank from the projected routing queries of ``batch``.

        Also sets the output bias to the mean training label.
        """
        cfg = self.cfg
        self.store["head.b2"].value[...] = float(np.mean(batch.labels))
        if not cfg.use_memory:
            return None
        if cfg.init_space == "embedding":
            emb = self.routing_queries(batch)
            if emb.shape[1] != cfg.d_m:
                raise ShapeError(f"embedding-space init needs d_m = d_v + d_t + d_u = {emb.shape[1]}, "
                                 f"got d_m={cfg.d_m}")
        else:
            emb = self.projected_queries(batch)
        bank = sp.init_bank(emb, batch.labels, cfg.P, cfg.C, self.seed if seed is None else seed,
                            cfg.tau_init, cfg.tau_min, cfg.tau_max)
        self.attach_bank(bank)
        return bank

    def attach_bank(self, bank: sp.MemoryBank) -> None:
        for p in (bank.M, bank.tau):
            if p.name in self.store:
                self.store.replace(p)
            else:
                self.store.register(p)
        self.bank = bank

    def _layers(self):
        out = []
        for layer in range(self.cfg.L_ca):
            pre = f"xattn.{layer}."
            out.append({k: self.store[pre + k].value for k in
                        ("t.Wq", "t.Wk", "t.Wv", "t.gamma", "t.beta",
                         "v.Wq", "v.Wk", "v.Wv", "v.gamma", "v.beta")})
        return out

    # -- forward / backward ----------------------------------------------------

    def forward(self, batch: SampleBatch) -> ForwardCache:
        cfg = self.cfg
        S = self.store
        B = len(batch)
        tout, t_vjp = self.temporal.forward(batch.frames)
        Vs, pv_vjp = nx.linear(tout.V_seq, S["proj.v.W"].value, S["proj.v.b"].value)
        Ts, pt_vjp = nx.linear(batch.text, S["proj.t.W"].value, S["proj.t.b"].value)
        (v_star, t_star), xa_vjp = cross_attention(Vs, Ts, self._layers())
        u_proj, pu_vjp = nx.linear(batch.meta, S["proj.u.W"].value, S["proj.u.b"].value)

        routing = None
        if cfg.use_memory:
            if self.bank is None:
                raise RuntimeError("memory bank not initialised; call init_memory first")
            text_mean = batch.text.mean(axis=1)
            q = np.concatenate([tout.V, text_mean, batch.meta], axis=1)
            routing, r_vjp = sp.route_arrays(q, self.bank.M.value, self.bank.mu, self.bank.temperature,
                                             S["route.Wq"].value, cfg.K, cfg.renormalize_topk)
            r_in = np.concatenate([routing.z_aug, routing.c_pop[:, None]], axis=1)
            r_pre, rl_vjp = nx.linear(r_in, S["retr.W"].value, S["retr.b"].value)
            R, relu_vjp = nx.relu(r_pre)
        else:
            R = np.zeros((B, cfg.d_common))

        H, h_vjp = assemble_features(v_star, t_star, u_proj, R)
        h1_pre, l1_vjp = nx.linear(H, S["head.W1"].value, S["head.b1"].value)
        h1, g_vjp = nx.gelu(h1_pre)
        out, l2_vjp = nx.linear(h1, S["head.W2"].value, S["head.b2"].value)
        preds = out[:, 0]

        def backward(g_pred, g_pi_soft=None):
            g_out = np.asarray(g_pred, dtype=np.float64).reshape(B, 1)
            g_h1, gW2, gb2 = l2_vjp(g_out)
            S["head.W2"].accumulate(gW2)
            S["head.b2"].accumulate(gb2)
            (g_h1_pre,) = g_vjp(g_h1)
            gH, gW1, gb1 = l1_vjp(g_h1_pre)
            S["head.W1"].accumulate(gW1)
            S["head.b1"].accumulate(gb1)
            g_vstar, g_tstar, g_u, g_R = h_vjp(gH)
            g_u_in, gWu, gbu = pu_vjp(g_u)
            S["proj.u.W"].accumulate(gWu)
            S["proj.u.b"].accumulate(gbu)
            g_tV = np.zeros_like(tout.V)
            if cfg.use_memory:
                (g_rpre,) = relu_vjp(g_R)
                g_rin, gWr, gbr = rl_vjp(g_rpre)
                S["retr.W"].accumulate(gWr)
                S["retr.b"].accumulate(gbr)
                g_z, g_c = g_rin[:, :-1], g_rin[:, -1]
                g_q, gM, g_tau, gWq = r_vjp(g_z, g_c, g_pi_soft)
                self.bank.M.accumulate(gM)
                self.bank.tau.accumulate(np.array(g_tau))
                S["route.Wq"].accumulate(gWq)
                g_tV = g_q[:, :cfg.d_v]
            gVs, gTs, layer_grads = xa_vjp(g_vstar, g_tstar)
            for layer, grads in enumerate(layer_grads):
                for k, g in grads.items():
                    S[f"xattn.{layer}.{k}"].accumulate(g)
            g_vseq, gWv, gbv = pv_vjp(gVs)
            S["proj.v.W"].accumulate(gWv)
            S["proj.v.b"].accumulate(gbv)
            _, gWt, gbt = pt_vjp(gTs)
            S["proj.t.W"].accumulate(gWt)
            S["proj.t.b"].accumulate(gbt)
            t_vjp(g_vseq, g_tV)

        return ForwardCache(preds, routing, tout, backward)

    def predict(self, batch: SampleBatch) -> Tensor:
        return self.forward(batch).preds

    def loss_and_backward(self, batch: SampleBatch, pairs=None, backward: bool = True):
        """Composite loss on ``batch``; accumulates gradients when ``backward``.

        ``pairs`` are (more popular, less popular) index pairs; drawn with
        :func:`spatial_memory.preference_pairs` when omitted.
        """
        cfg = self.cfg
        fc = self.forward(batch)
        B = len(batch)
        g_pi = None
        balance = 0.0
        pref = sp.DPPOResult(0.0, 0)
        if cfg.use_memory:
            pi = fc.routing.pi_soft
            g_pi = np.zeros((B, cfg.P * cfg.C))
            if cfg.use_balance:
                balance, b_vjp = sp.load_balance_loss(pi, cfg.zipf_s, cfg.gamma_lb, cfg.beta_lb)
                g_pi += cfg.lambda_bal * b_vjp(1.0).reshape(B, -1)
            if cfg.use_dppo:
                if pairs is None:
                    pairs = sp.preference_pairs(batch.labels, cfg.margin_frac)
                if pairs:
                    hi = np.array([a for a, _ in pairs])
                    lo = np.array([b for _, b in pairs])
                    pref, d_vjp = sp.dppo_loss(pi[hi], pi[lo], cfg.gamma_pref)
                    g_hi, g_lo = d_vjp(cfg.lambda_pref)
                    np.add.at(g_pi, hi, g_hi.reshape(len(hi), -1))
                    np.add.at(g_pi, lo, g_lo.reshape(len(lo), -1))
        lb, h_vjp = total_loss(fc.preds, batch.labels, pref.value, balance,
                               cfg.lambda_pref if cfg.use_dppo else 0.0,
                               cfg.lambda_bal if cfg.use_balance else 0.0,
                               cfg.huber_delta, pref.n_pairs)
        if not math.isfinite(lb.total):
            raise EvaluationError(f"non-finite loss; first non-finite tensor: {self._first_nonfinite(fc)}")
        if backward:
            g_pred, _ = h_vjp(1.0)
            fc.backward(g_pred, g_pi)
        return lb, fc

    def _first_nonfinite(self, fc: ForwardCache) -> str:
        named = [("temporal.V_seq", fc.temporal.V_seq), ("preds", fc.preds)]
        if fc.routing is not None:
            named += [("routing.pi_soft", fc.routing.pi_soft), ("routing.z_aug", fc.routing.z_aug)]
        named += [(p.name, p.value) for p in self.store]
        for name, arr in named:
            if not np.all(np.isfinite(arr)):
                return name
        return "none found"

    def train_step(self, batch: SampleBatch, pairs=None) -> LossBreakdown:
        """One SGD step with weight decay, then the bank refresh and tau clamp."""
        cfg = self.cfg
        self.store.zero_grad()
        lb, fc = self.loss_and_backward(batch, pairs)
        tau_name = "memory.tau"
        for p in self.store:
            if p.name == tau_name:
                continue
            if not np.all(np.isfinite(p.grad)):
                raise EvaluationError(f"non-finite gradient in {p.name}")
            p.value -= cfg.lr * (p.grad + cfg.weight_decay * p.value)
        if cfg.use_memory:
            sp.update_bank(self.bank, fc.routing, batch.labels, cfg.eta, cfg.tau_lr)
        self.store.zero_grad()
        self.last_routing = fc.routing
        return lb

    # -- checkpoints ---------------------------------------------------------------

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        names = [p.name for p in self.store if not p.name.startswith("memory.")]
        buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(names)))
        for name in names:
            v = self.store[name].value
            raw = name.encode()
            buf.write(struct.pack("<H", len(raw)) + raw)
            buf.write(struct.pack("<B", v.ndim) + struct.pack(f"<{v.ndim}I", *v.shape))
            buf.write(v.astype("<f8").tobytes())
        buf.write(struct.pack("<B", self.bank is not None))
        if self.bank is not None:
            buf.write(sp.bank_to_bytes(self.bank))
        return buf.getvalue()

    def load_bytes(self, data: bytes) -> None:
        if data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
            raise nx.DataError("not a checkpoint (bad magic)")
        off = len(CHECKPOINT_MAGIC)
        version, n = struct.unpack_from("<II", data, off)
        if version != CHECKPOINT_VERSION:
            raise nx.DataError(f"unsupported checkpoint version {version}")
        off += 8
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + ln].decode()
            off += ln
            (ndim,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape)
            off += 8 * size
            if name not in self.store or self.store[name].shape != tuple(shape):
                raise nx.DataError(f"checkpoint parameter {name} {shape} does not fit this model")
            self.store[name].value[...] = arr
        (has_bank,) = struct.unpack_from("<B", data, off)
        off += 1
        if has_bank:
            bank, off = sp.bank_from_bytes(data, off)
            self.attach_bank(bank)

    def load(self, path) -> None:
        self.load_bytes(Path(path).read_bytes())


def config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)
