"""Dense float64 kernels with hand-written vector-Jacobian products.

Every differentiable kernel returns ``(out, vjp)`` where ``vjp(g)`` maps the
upstream gradient of ``out`` to a tuple of gradients, one per positional
input (``None`` for inputs that are not differentiable). Arrays are plain
``numpy.ndarray`` in float64; shapes are checked eagerly and never broadcast
beyond what each signature documents.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import expit

Tensor = np.ndarray
VJP = Callable[[Tensor], tuple]

LN_EPS = 1e-5
KL_EPS = 1e-8
DIV_EPS = 1e-12

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


class ShapeError(ValueError):
    pass


class DataError(ValueError):
    pass


class EvaluationError(ArithmeticError):
    pass


def as_tensor(x, name: str = "tensor") -> Tensor:
    """Coerce to a contiguous float64 array and refuse NaN/Inf."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite values")
    return arr


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# parameters

@dataclass
class Param:
    name: str
    value: Tensor
    grad: Tensor = field(init=False)

    def __post_init__(self):
        self.value = np.array(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def accumulate(self, g: Tensor) -> None:
        if g.shape != self.value.shape:
            raise ShapeError(f"gradient for {self.name}: {g.shape} vs {self.value.shape}")
        self.grad += g


class ParameterStore:
    """Ordered name -> Param mapping with flat-vector views for checking."""

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, name: str, value) -> Param:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        p = Param(name, value)
        self._params[name] = p
        return p

    def register(self, param: Param) -> Param:
        """Adopt an existing Param object (shared with another owner)."""
        if param.name in self._params:
            raise KeyError(f"duplicate parameter {param.name!r}")
        self._params[param.name] = param
        return param

    def replace(self, param: Param) -> None:
        if param.name not in self._params:
            raise KeyError(param.name)
        self._params[param.name] = param

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Param]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def size(self) -> int:
        return sum(p.value.size for p in self._params.values())

    def get_flat(self, names: Sequence[str] | None = None) -> Tensor:
        names = self.names() if names is None else names
        return np.concatenate([self._params[n].value.ravel() for n in names])

    def set_flat(self, flat: Tensor, names: Sequence[str] | None = None) -> None:
        names = self.names() if names is None else names
        i = 0
        for n in names:
            p = self._params[n]
            k = p.value.size
            p.value[...] = flat[i:i + k].reshape(p.value.shape)
            i += k

    def grad_flat(self, names: Sequence[str] | None = None) -> Tensor:
        names = self.names() if names is None else names
        return np.concatenate([self._params[n].grad.ravel() for n in names])


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# elementwise kernels

def add(a: Tensor, b: Tensor):
    _same_shape(a, b, "add")

    def vjp(g):
        return g, g
    return a + b, vjp


def mul(a: Tensor, b: Tensor):
    _same_shape(a, b, "mul")

    def vjp(g):
        return g * b, g * a
    return a * b, vjp


def tanh(x: Tensor):
    y = np.tanh(x)

    def vjp(g):
        return (g * (1.0 - y * y),)
    return y, vjp


def sigmoid(x: Tensor):
    y = expit(x)

    def vjp(g):
        return (g * y * (1.0 - y),)
    return y, vjp


def relu(x: Tensor):
    mask = x > 0

    def vjp(g):
        return (g * mask,)
    return np.where(mask, x, 0.0), vjp


def gelu_value(x: Tensor) -> Tensor:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_K * x ** 3)))


def gelu(x: Tensor):
    """GELU, tanh approximation (derivative taken from the same formula)."""
    inner = _GELU_C * (x + _GELU_K * x ** 3)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def vjp(g):
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_K * x * x)
        return (g * d,)
    return y, vjp


def softplus(x: Tensor):
    y = np.logaddexp(0.0, x)

    def vjp(g):
        return (g * expit(x),)
    return y, vjp


def exp(x: Tensor):
    y = np.exp(x)

    def vjp(g):
        return (g * y,)
    return y, vjp


# ---------------------------------------------------------------------------
# structural kernels

def matmul(a: Tensor, b: Tensor):
    """``a @ b`` for 2-D operands, or stacked operands with equal leading dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims: {a.shape} @ {b.shape}")
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dims: {a.shape} @ {b.shape}")

    def vjp(g):
        return g @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ g
    return a @ b, vjp


def linear(x: Tensor, W: Tensor, b: Tensor | None = None):
    """``x @ W.T + b`` over the last axis of ``x``; W is (out, in)."""
    if x.shape[-1] != W.shape[1]:
        raise ShapeError(f"linear: input width {x.shape[-1]} vs weight {W.shape}")
    if b is not None and b.shape != (W.shape[0],):
        raise ShapeError(f"linear: bias {b.shape} vs weight {W.shape}")
    y = x @ W.T
    if b is not None:
        y = y + b

    def vjp(g):
        gx = g @ W
        g2 = g.reshape(-1, W.shape[0])
        gW = g2.T @ x.reshape(-1, W.shape[1])
        gb = g2.sum(axis=0) if b is not None else None
        return gx, gW, gb
    return y, vjp


def l2_norm(x: Tensor, axis: int = -1):
    n = np.sqrt(np.sum(x * x, axis=axis, keepdims=True))

    def vjp(g):
        return (np.expand_dims(g, axis) * x / np.maximum(n, DIV_EPS),)
    return np.squeeze(n, axis=axis), vjp


def mean_pool(x: Tensor, axis: int = 0):
    n = x.shape[axis]

    def vjp(g):
        return (np.repeat(np.expand_dims(g, axis), n, axis=axis) / n,)
    return x.mean(axis=axis), vjp


def concat(xs: Sequence[Tensor], axis: int = -1):
    ref = xs[0]
    ax = axis % ref.ndim
    for x in xs[1:]:
        if x.ndim != ref.ndim or x.shape[:ax] + x.shape[ax + 1:] != ref.shape[:ax] + ref.shape[ax + 1:]:
            raise ShapeError(f"concat: incompatible shapes {ref.shape} and {x.shape}")
    splits = np.cumsum([x.shape[ax] for x in xs])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=ax))
    return np.concatenate(xs, axis=ax), vjp


def softmax_rows(x: Tensor, axis: int = -1, temperature: float = 1.0):
    """Softmax of ``x / temperature`` along ``axis``.

    The VJP returns ``(g_x, g_temperature)``.
    """
    temperature = float(temperature)
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = x / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        gz = y * (g - np.sum(g * y, axis=axis, keepdims=True))
        return gz / temperature, -np.sum(gz * x) / temperature ** 2
    return y, vjp


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS):
    """Normalise over the last axis, then scale by gamma and shift by beta."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma + beta

    def vjp(g):
        gxhat = g * gamma
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * np.mean(gxhat * xhat, axis=-1, keepdims=True))
        lead = tuple(range(x.ndim - 1))
        return gx, np.sum(g * xhat, axis=lead), np.sum(g, axis=lead)
    return y, vjp


def cosine_similarity(a: Tensor, b: Tensor, eps: float = DIV_EPS):
    """Cosine similarity along the last axis; a and b share a shape."""
    _same_shape(a, b, "cosine_similarity")
    na = np.sqrt(np.sum(a * a, axis=-1))
    nb = np.sqrt(np.sum(b * b, axis=-1))
    denom = np.maximum(na * nb, eps)
    dot = np.sum(a * b, axis=-1)
    y = dot / denom

    def vjp(g):
        ge = g[..., None]
        active = (na * nb > eps)[..., None]
        ga = ge * (b / denom[..., None] - active * y[..., None] * a / np.maximum(na * na, eps)[..., None])
        gb = ge * (a / denom[..., None] - active * y[..., None] * b / np.maximum(nb * nb, eps)[..., None])
        return ga, gb
    return y, vjp


# ---------------------------------------------------------------------------
# losses

def huber_loss(pred: Tensor, target: Tensor, delta: float = 1.0):
    """Mean Huber loss; quadratic inside |r| <= delta, linear outside."""
    _same_shape(pred, target, "huber_loss")
    if not delta > 0:
        raise ValueError("delta must be positive")
    r = pred - target
    a = np.abs(r)
    quad = a <= delta
    per = np.where(quad, 0.5 * r * r, delta * (a - 0.5 * delta))
    n = max(r.size, 1)

    def vjp(g):
        d = np.where(quad, r, delta * np.sign(r)) * (g / n)
        return d, -d
    return float(per.mean()) if r.size else 0.0, vjp


@dataclass
class KLResult:
    value: float
    clamped: bool


def kl_divergence(p: Tensor, q: Tensor, eps: float = KL_EPS):
    """KL(p || q) with q floored at eps and 0 * log 0 taken as 0.

    The returned value is a ``KLResult`` whose ``clamped`` flag reports
    whether the eps floor was applied to any q entry where p > 0.
    """
    _same_shape(p, q, "kl_divergence")
    if abs(float(np.sum(p)) - 1.0) > 1e-6:
        raise DataError(f"p must sum to 1, got {np.sum(p)}")
    qf = np.maximum(q, eps)
    pos = p > 0
    safe_p = np.where(pos, p, 1.0)
    terms = np.where(pos, p * (np.log(safe_p) - np.log(qf)), 0.0)
    clamped = bool(np.any(pos & (q < eps)))

    def vjp(g):
        gp = np.where(pos, np.log(safe_p) - np.log(qf) + 1.0, 0.0) * g
        gq = np.where(q >= eps, -p / qf, 0.0) * g
        return gp, gq
    return KLResult(float(terms.sum()), clamped), vjp


# ---------------------------------------------------------------------------
# finite-difference oracle

@dataclass
class GradCheckReport:
    kernel: str
    max_rel_error: float
    passed: bool
    probes: int

    def __str__(self):
        flag = "PASS" if self.passed else "FAIL"
        return f"{flag} {self.kernel}: max rel err {self.max_rel_error:.3e} over {self.probes} probes"


def _scalarize(out, proj):
    if isinstance(out, KLResult):
        out = out.value
    return float(np.sum(np.asarray(out) * proj))


def grad_check(kernel: Callable, point: Sequence[Tensor], step: float = 1e-5, tol: float = 1e-4,
               probes: int = 20, seed: int = 0, name: str | None = None,
               floor: float = 1e-5) -> GradCheckReport:
    """Compare a kernel's VJP against central finite differences.

    ``kernel(*point)`` must return ``(out, vjp)``. Tensor outputs are reduced
    to a scalar with a fixed random projection. Relative error per probe is
    ``|a - n| / max(|a|, |n|, floor)``. Inputs whose VJP slot is ``None`` are
    not probed. When a kernel has fewer coordinates than ``probes``, every
    coordinate is checked.
    """
    if not 1e-7 <= step <= 1e-3:
        raise ValueError(f"step {step} outside [1e-7, 1e-3]")
    name = name or getattr(kernel, "__name__", "kernel")
    point = [np.array(x, dtype=np.float64) for x in point]
    rng = np.random.default_rng(seed)

    out, vjp = kernel(*point)
    out_arr = np.asarray(out.value if isinstance(out, KLResult) else out, dtype=np.float64)
    if not np.all(np.isfinite(out_arr)):
        raise EvaluationError(f"{name}: non-finite forward at point")
    proj = np.ones(()) if out_arr.ndim == 0 else rng.standard_normal(out_arr.shape)
    grads = vjp(proj if out_arr.ndim else 1.0)
    if not isinstance(grads, tuple):
        grads = (grads,)

    coords = [(i, j) for i, g in enumerate(grads) if g is not None and i < len(point)
              for j in range(point[i].size)]
    if not coords:
        raise ValueError(f"{name}: no differentiable inputs")
    if len(coords) > probes:
        pick = rng.choice(len(coords), size=probes, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    worst = 0.0
    for i, j in coords:
        x = point[i]
        orig = x.flat[j]
        x.flat[j] = orig + step
        fp = _scalarize(kernel(*point)[0], proj)
        x.flat[j] = orig - step
        fm = _scalarize(kernel(*point)[0], proj)
        x.flat[j] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise EvaluationError(f"{name}: non-finite forward at input {i} coordinate {j}")
        numeric = (fp - fm) / (2.0 * step)
        analytic = float(np.asarray(grads[i], dtype=np.float64).reshape(-1)[j]) \
            if np.ndim(grads[i]) else float(grads[i])
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        worst = max(worst, err)
    return GradCheckReport(name, worst, worst <= tol, len(coords))
