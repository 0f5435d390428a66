"""Finite-difference checks over every differentiable kernel and the full model.

Each case draws a fresh random point per repetition, wraps the kernel so it
maps arrays to ``(out, vjp)`` with a single output, and hands it to
:func:`numerics.grad_check`. Points are drawn away from kinks (ReLU at 0,
the Huber threshold, delta clamps, attention window boundaries, top-K ties)
since a central difference across a kink is not a gradient.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from . import numerics as nx
from . import predictor as pr
from . import spatial_memory as sp
from . import temporal as tp

KERNEL_TOL = 1e-4
MODEL_TOL = 1e-3


def _pack(outs):
    outs = [np.asarray(o, dtype=np.float64) for o in outs]
    shapes = [o.shape for o in outs]
    sizes = [o.size for o in outs]
    flat = np.concatenate([o.ravel() for o in outs])

    def split(g):
        parts = np.split(np.asarray(g).ravel(), np.cumsum(sizes)[:-1])
        return [p.reshape(s) for p, s in zip(parts, shapes)]
    return flat, split


def _away_from_zero(rng, shape, lo=0.1):
    x = rng.uniform(lo, 1.5, shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _simplex_rows(rng, shape):
    a = rng.uniform(0.2, 1.0, shape)
    return a / a.sum(axis=-1, keepdims=True)


# each builder returns (kernel, point, grad_check kwargs)

def _c_add(rng):
    return nx.add, [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))], {}


def _c_mul(rng):
    return nx.mul, [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))], {}


def _unary(fn, gen=None):
    def build(rng):
        x = rng.standard_normal((4, 5)) if gen is None else gen(rng, (4, 5))
        return fn, [x], {}
    return build


def _c_matmul(rng):
    return nx.matmul, [rng.standard_normal((3, 4)), rng.standard_normal((4, 5))], {}


def _c_linear(rng):
    return nx.linear, [rng.standard_normal((2, 3, 4)), rng.standard_normal((5, 4)),
                       rng.standard_normal(5)], {}


def _c_l2(rng):
    return nx.l2_norm, [rng.standard_normal((4, 6))], {}


def _c_mean_pool(rng):
    return (lambda x: nx.mean_pool(x, axis=1)), [rng.standard_normal((3, 5, 2))], {}


def _c_concat(rng):
    def k(a, b):
        out, vjp = nx.concat([a, b], axis=-1)
        return out, lambda g: tuple(vjp(g))
    return k, [rng.standard_normal((3, 2)), rng.standard_normal((3, 4))], {}


def _c_softmax(rng):
    def k(x, tau):
        out, vjp = nx.softmax_rows(x, axis=-1, temperature=float(tau))
        return out, vjp
    return k, [rng.standard_normal((3, 6)), np.array(rng.uniform(0.5, 2.0))], {}


def _c_layer_norm(rng):
    return nx.layer_norm, [rng.standard_normal((3, 6)), rng.uniform(0.5, 1.5, 6),
                           rng.standard_normal(6)], {}


def _c_cosine(rng):
    return nx.cosine_similarity, [rng.standard_normal((4, 5)), rng.standard_normal((4, 5))], {}


def _c_huber(rng):
    t = rng.standard_normal(12)
    r = rng.uniform(0.05, 3.0, 12) * rng.choice([-1.0, 1.0], 12)
    r[np.abs(np.abs(r) - 1.0) < 0.05] += 0.1   # keep clear of the threshold
    return nx.huber_loss, [t + r, t], {}


def _c_kl(rng):
    return nx.kl_divergence, [_simplex_rows(rng, 8), _simplex_rows(rng, 8)], {"step": 1e-7}


def _c_score_frames(rng):
    d, h = 4, 5

    def k(x, W1, b1, W2, b2, gamma, beta):
        out, vjp = tp.score_frames(x, W1, b1, W2, b2, gamma, beta)
        flat, split = _pack([out.w, out.anchor])
        return flat, lambda g: vjp(*split(g))
    pt = [rng.standard_normal((2, 6, d)), rng.standard_normal((h, d)), rng.standard_normal(h),
          rng.standard_normal((1, h)), rng.standard_normal(1), rng.uniform(0.5, 1.5, d),
          rng.standard_normal(d) * 0.3]
    return k, pt, {}


def _delta_case(mode):
    def build(rng):
        cfg = tp.SSMConfig(delta_base=0.4, alpha=0.2, rho=0.2, delta_min=0.01, delta_max=2.0,
                           delta_mode=mode)
        return ((lambda x, w, g: tp.compute_delta(x, w, g, cfg)),
                [rng.standard_normal((2, 5, 3)), rng.uniform(0.05, 0.95, (2, 5)),
                 rng.standard_normal((2, 3))], {})
    return build


def _ssm_point(rng, d=3, dh=4, T=6):
    return [rng.standard_normal((2, T, d)), rng.uniform(0.05, 0.8, (2, T)), rng.standard_normal(dh),
            rng.standard_normal((dh, d)) * 0.5, rng.standard_normal((d, dh)) * 0.5,
            rng.standard_normal(d)]


def _ssm_case(direction):
    def build(rng):
        return (lambda *a: tp.ssm_scan(*a, direction=direction)), _ssm_point(rng), {}
    return build


def _c_bidir(rng):
    return tp.bidirectional_ssm, _ssm_point(rng), {}


def _attn_point(rng, T=7, d=4, da=3):
    return [rng.standard_normal((2, T, d)), *(rng.standard_normal((da, d)) for _ in range(3)),
            rng.standard_normal((d, da))]


def _c_sparse(rng):
    # beta = 0 pins the windows so probing x cannot move a window edge
    cfg = tp.SparseAttnConfig(d_a=3, w_base=2.0, beta=0.0)
    return (lambda x, q, k, v, o: tp.sparse_attention(x, q, k, v, o, cfg)), _attn_point(rng), {}


def _c_sparse_adaptive(rng):
    # adaptive windows; only the weights are probed so windows stay put
    cfg = tp.SparseAttnConfig(d_a=3, w_base=1.0, beta=0.5)
    x = rng.standard_normal((2, 7, 4))

    def k(q, kk, v, o):
        y, vjp = tp.sparse_attention(x, q, kk, v, o, cfg)
        return y, lambda g: vjp(g)[1:]
    return k, _attn_point(rng)[1:], {}


def _c_dense(rng):
    return tp.dense_attention, _attn_point(rng), {}


def _c_fusion(rng):
    B, T, d = 2, 5, 3

    def k(*a):
        out, vjp = tp.gated_fusion(*a)
        flat, split = _pack([out.V_seq, out.V])
        return flat, lambda g: vjp(*split(g))
    pt = [rng.standard_normal((B, T, d)) for _ in range(3)] + [
        rng.standard_normal((B, d)), rng.standard_normal((3, 3 * d)), rng.standard_normal(3),
        rng.standard_normal((d, d)), rng.standard_normal(d)]
    return k, pt, {}


def _c_route(rng):
    P, C, dm, dq, K = 2, 3, 4, 5, 3

    def k(q, M, tau, Wq):
        res, vjp = sp.route_arrays(q, M, np.linspace(0.0, 1.0, P * C), float(tau), Wq, K)
        flat, split = _pack([res.z_aug, res.c_pop, res.pi_soft])
        return flat, lambda g: vjp(*split(g))
    return k, [rng.standard_normal((3, dq)), rng.standard_normal((P, C, dm)),
               np.array(rng.uniform(0.5, 2.0)), rng.standard_normal((dm, dq))], {}


def _c_balance(rng):
    def k(pi):
        return sp.load_balance_loss(pi, 1.0, 0.3, 0.2)
    return k, [_simplex_rows(rng, (4, 6)).reshape(4, 2, 3)], {"step": 1e-7}


def _c_dppo(rng):
    def k(a, b):
        res, vjp = sp.dppo_loss(a, b, 0.5)
        return res.value, vjp
    return k, [_simplex_rows(rng, (3, 6)).reshape(3, 2, 3),
               _simplex_rows(rng, (3, 6)).reshape(3, 2, 3)], {}


def _c_pooled(rng):
    return pr.pooled_attention, [rng.standard_normal((2, 4)), rng.standard_normal((2, 5, 4)),
                                 *(rng.standard_normal((4, 4)) for _ in range(3))], {}


def _c_cross(rng):
    d, n_layers = 3, 2
    keys = ["t.Wq", "t.Wk", "t.Wv", "t.gamma", "t.beta", "v.Wq", "v.Wk", "v.Wv", "v.gamma", "v.beta"]

    def k(V, T, *flat_layers):
        layers = [dict(zip(keys, flat_layers[i * 10:(i + 1) * 10])) for i in range(n_layers)]
        (vs, ts), vjp = pr.cross_attention(V, T, layers)
        flat, split = _pack([vs, ts])

        def back(g):
            gV, gT, grads = vjp(*split(g))
            return (gV, gT) + tuple(gl[key] for gl in grads for key in keys)
        return flat, back
    pt = [rng.standard_normal((2, 5, d)), rng.standard_normal((2, 3, d))]
    for _ in range(n_layers):
        for key in keys:
            if key.endswith("gamma"):
                pt.append(rng.uniform(0.5, 1.5, d))
            elif key.endswith("beta"):
                pt.append(rng.standard_normal(d) * 0.3)
            else:
                pt.append(rng.standard_normal((d, d)))
    return k, pt, {}


def _c_assemble(rng):
    return pr.assemble_features, [rng.standard_normal((3, 4)) for _ in range(4)], {}


KERNEL_CASES = {
    "add": _c_add, "mul": _c_mul,
    "tanh": _unary(nx.tanh), "sigmoid": _unary(nx.sigmoid),
    "relu": _unary(nx.relu, _away_from_zero), "gelu": _unary(nx.gelu),
    "softplus": _unary(nx.softplus), "exp": _unary(nx.exp),
    "matmul": _c_matmul, "linear": _c_linear, "l2_norm": _c_l2, "mean_pool": _c_mean_pool,
    "concat": _c_concat, "softmax": _c_softmax, "layer_norm": _c_layer_norm,
    "cosine_similarity": _c_cosine, "huber_loss": _c_huber, "kl_divergence": _c_kl,
    "score_frames": _c_score_frames,
    "delta_score": _delta_case("score"), "delta_anchor": _delta_case("anchor"),
    "ssm_forward": _ssm_case("forward"), "ssm_backward": _ssm_case("backward"),
    "bidirectional_ssm": _c_bidir,
    "sparse_attention": _c_sparse, "sparse_attention_adaptive": _c_sparse_adaptive,
    "dense_attention": _c_dense, "gated_fusion": _c_fusion,
    "route": _c_route, "load_balance": _c_balance, "dppo": _c_dppo,
    "pooled_attention": _c_pooled, "cross_attention": _c_cross,
    "assemble_features": _c_assemble,
}


@dataclass
class SuiteResult:
    reports: list
    seconds: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports)


def _merge(name, reps, tol):
    worst = max(r.max_rel_error for r in reps)
    return nx.GradCheckReport(name, worst, worst <= tol, sum(r.probes for r in reps))


def kernel_reports(points: int = 3, probes: int = 20, seed: int = 0, names=None) -> list:
    """One merged report per kernel over ``points`` random points, ``probes`` each."""
    out = []
    for i, name in enumerate(names or KERNEL_CASES):
        reps = []
        for j in range(points):
            rng = np.random.default_rng([seed, i, j])
            kernel, pt, kw = KERNEL_CASES[name](rng)
            reps.append(nx.grad_check(kernel, pt, probes=probes, tol=KERNEL_TOL, seed=seed + j,
                                      name=name, **kw))
        out.append(_merge(name, reps, KERNEL_TOL))
    return out


def tiny_model(delta_mode: str = "score", seed: int = 0):
    """A small model with K = P*C (no hard selection) and a batch to differentiate."""
    rng = np.random.default_rng(seed)
    cfg = pr.ModelConfig(d_v=4, d_t=3, d_u=2, d_m=3, d_common=5, d_hidden=4, d_score=3,
                         P=2, C=2, K=4, ssm=tp.SSMConfig(d_h=3, delta_mode=delta_mode,
                                                         delta_base=0.3, alpha=0.1, rho=0.1),
                         attn=tp.SparseAttnConfig(d_a=3, w_base=1.0, beta=0.0),
                         lambda_pref=0.5, gamma_lb=0.2, beta_lb=0.2)
    model = pr.PopularityModel(cfg, seed=seed)
    B, T, L = 6, 4, 2
    batch = pr.SampleBatch(rng.standard_normal((B, T, 4)), rng.standard_normal((B, L, 3)),
                           rng.standard_normal((B, 2)), rng.standard_normal(B) * 2)
    model.init_memory(batch, seed=seed)
    for p in model.store:
        if p.name != "memory.tau":
            p.value += 0.1 * rng.standard_normal(p.shape)
    model.bank.tau.value[...] = 0.8
    return model, batch


def model_report(delta_mode: str = "score", probes: int = 40, seed: int = 0):
    """Check d(total loss)/d(every parameter, tau included) on the tiny model."""
    model, batch = tiny_model(delta_mode, seed)
    names = model.store.names()
    y = batch.labels
    pairs = [(i, j) for i in range(len(y)) for j in range(len(y)) if y[i] - y[j] > 0.5][:5]

    def kernel(*arrs):
        for n, a in zip(names, arrs):
            model.store[n].value[...] = a
        model.store.zero_grad()
        lb, _ = model.loss_and_backward(batch, pairs)
        grads = tuple(model.store[n].grad.copy() for n in names)
        return lb.total, (lambda g: tuple(x * g for x in grads))
    pt = [model.store[n].value.copy() for n in names]
    return nx.grad_check(kernel, pt, probes=probes, tol=MODEL_TOL, seed=seed,
                         name=f"end_to_end[{delta_mode}]")


def run_suite(points: int = 3, probes: int = 20, seed: int = 0) -> SuiteResult:
    t0 = time.perf_counter()
    reports = kernel_reports(points, probes, seed)
    reports += [model_report(m, max(probes, 20), seed) for m in ("score", "anchor")]
    return SuiteResult(reports, time.perf_counter() - t0)
