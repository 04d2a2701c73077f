"""Dense float64 primitives with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects of dtype float64.  Every forward
op has a matching ``*_backward`` that maps the upstream gradient to gradients
of the op's inputs.  Nothing here records a graph; layers in :mod:`xmatch.nn`
keep whatever they need from the forward pass and call the backward functions
in reverse order themselves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float64
LN_EPS = 1e-12
BCE_CLAMP = 1e-7

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand extents are incompatible."""


def tensor(values, shape: Sequence[int] | None = None) -> np.ndarray:
    out = np.array(values, dtype=DTYPE)
    if shape is not None:
        out = out.reshape(tuple(shape))
    return out


@dataclass(eq=False)
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.value = np.array(self.value, dtype=DTYPE, order="C")  # keeps rank 0, unlike ascontiguousarray
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad.fill(0.0)


# ---------------------------------------------------------------------------
# matmul / linear


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    return a @ b


def matmul_backward(dout: np.ndarray, a: np.ndarray, b: np.ndarray):
    return dout @ b.T, a.T @ dout


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """``x @ w + b`` over the last axis of ``x``; ``w`` is (d_in, d_out)."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    out = x @ w
    if b is not None:
        out = out + b
    return out


def linear_backward(dout: np.ndarray, x: np.ndarray, w: np.ndarray):
    """Returns ``(dx, dw, db)``; leading axes of ``x`` are summed into dw/db."""
    dx = dout @ w.T
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    return dx, x2.T @ d2, d2.sum(axis=0)


# ---------------------------------------------------------------------------
# elementwise


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    return a + b


def add_backward(dout: np.ndarray):
    return dout, dout


def mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}")
    return a * b


def mul_backward(dout: np.ndarray, a: np.ndarray, b: np.ndarray):
    return dout * b, dout * a


def concat(parts: Sequence[np.ndarray], axis: int = 0) -> np.ndarray:
    return np.concatenate(parts, axis=axis)


def concat_backward(dout: np.ndarray, sizes: Sequence[int], axis: int = 0) -> list[np.ndarray]:
    cuts = np.cumsum(sizes)[:-1]
    return np.split(dout, cuts, axis=axis)


def mean(x: np.ndarray) -> float:
    return float(x.mean())


def mean_backward(dout: float, shape: tuple[int, ...]) -> np.ndarray:
    return np.full(shape, dout / math.prod(shape), dtype=DTYPE)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=DTYPE)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(dout: np.ndarray, y: np.ndarray) -> np.ndarray:
    return dout * y * (1.0 - y)


def gaussian_cdf(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / _SQRT2))


def gelu(x: np.ndarray, cdf: np.ndarray | None = None) -> np.ndarray:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF via erf."""
    return x * (gaussian_cdf(x) if cdf is None else cdf)


def gelu_backward(dout: np.ndarray, x: np.ndarray, cdf: np.ndarray | None = None) -> np.ndarray:
    """``cdf`` may be passed in from the forward pass to skip recomputing it."""
    if cdf is None:
        cdf = gaussian_cdf(x)
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return dout * (cdf + x * pdf)


# ---------------------------------------------------------------------------
# softmax / layer norm / attention


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax axis {axis} out of range for {x.ndim}-d input")
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(dout: np.ndarray, y: np.ndarray, axis: int = -1) -> np.ndarray:
    return y * (dout - np.sum(dout * y, axis=axis, keepdims=True))


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = LN_EPS):
    """Normalize over the last axis then apply ``gamma``/``beta``.

    Returns ``(y, cache)``; pass the cache to :func:`layer_norm_backward`.
    """
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs width {x.shape[-1]}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, (xhat, rstd, gamma)


def layer_norm_backward(dy: np.ndarray, cache):
    xhat, rstd, gamma = cache
    dgamma = np.sum(dy * xhat, axis=tuple(range(dy.ndim - 1)))
    dbeta = np.sum(dy, axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * gamma
    dx = (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
    ) * rstd
    return dx, dgamma, dbeta


def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, mask: np.ndarray):
    """Scaled dot-product attention over the last two axes.

    ``q`` is (..., Lq, d), ``k``/``v`` are (..., Lk, d) and ``mask`` is a 0/1
    array broadcastable to (..., Lq, Lk) marking keys that may be attended.
    Masked keys get weight exactly zero.  Returns ``(out, cache)``.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: q{q.shape} k{k.shape} v{v.shape}")
    keep = np.broadcast_to(mask, q.shape[:-1] + (k.shape[-2],)) > 0
    if not np.all(keep.any(axis=-1)):
        raise ValueError("attention: a query row has every key masked")
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = np.where(keep, (q @ np.swapaxes(k, -1, -2)) * scale, -np.inf)
    probs = softmax(scores, axis=-1)
    return probs @ v, (q, k, v, probs, scale)


def attention_backward(dout: np.ndarray, cache):
    q, k, v, probs, scale = cache
    dv = np.swapaxes(probs, -1, -2) @ dout
    dprobs = dout @ np.swapaxes(v, -1, -2)
    dscores = softmax_backward(dprobs, probs, axis=-1) * scale
    dq = dscores @ k
    dk = np.swapaxes(dscores, -1, -2) @ q
    return dq, dk, dv


# ---------------------------------------------------------------------------
# embedding / losses


def embedding_lookup(table: np.ndarray, ids: np.ndarray) -> np.ndarray:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    return table[ids]


def embedding_backward(dout: np.ndarray, ids: np.ndarray, num_rows: int) -> np.ndarray:
    dtable = np.zeros((num_rows, dout.shape[-1]), dtype=DTYPE)
    np.add.at(dtable, np.asarray(ids).reshape(-1), dout.reshape(-1, dout.shape[-1]))
    return dtable


def bce_loss(p: np.ndarray, y: np.ndarray) -> float:
    """Mean binary cross-entropy with ``p`` clamped to [1e-7, 1 - 1e-7]."""
    pc = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    return float(-np.mean(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)))


def bce_backward(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    pc = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    inside = (p > BCE_CLAMP) & (p < 1.0 - BCE_CLAMP)
    g = (-(y / pc) + (1.0 - y) / (1.0 - pc)) / p.size
    return np.where(inside, g, 0.0)


def cross_entropy_diag(logits: np.ndarray) -> float:
    """Mean cross-entropy of each row of a square logit matrix against its diagonal."""
    z = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1))
    return float(np.mean(logz - np.diag(z)))


def cross_entropy_diag_backward(logits: np.ndarray) -> np.ndarray:
    n = logits.shape[0]
    g = softmax(logits, axis=1)
    g[np.arange(n), np.arange(n)] -= 1.0
    return g / n


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[Parameter], state: AdamState) -> None:
    """One bias-corrected Adam update in place.  Gradients are left untouched."""
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for p in params:
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.value)
            state.v[p.name] = np.zeros_like(p.value)
        v = state.v[p.name]
        m *= state.beta1
        m += (1.0 - state.beta1) * p.grad
        v *= state.beta2
        sq = (1.0 - state.beta2) * p.grad
        sq *= p.grad
        v += sq
        # same arithmetic as lr * (m / c1) / (sqrt(v / c2) + eps), fewer temporaries
        denom = np.sqrt(v / c2)
        denom += state.eps
        step = np.divide(m, c1)
        step *= state.lr
        step /= denom
        p.value -= step


# ---------------------------------------------------------------------------
# finite differences


def grad_check(
    fn: Callable[[], float],
    inputs: Sequence[np.ndarray],
    analytic: Sequence[np.ndarray],
    step: float = 1e-5,
    max_per_input: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Largest ``|numeric - analytic| / max(1, |analytic|)`` over checked components.

    ``fn`` re-evaluates the scalar objective reading ``inputs``, which are
    perturbed in place and restored.  With ``max_per_input`` set, only that
    many randomly chosen components of each input are probed.
    """
    worst = 0.0
    for x, g in zip(inputs, analytic):
        if x.shape != g.shape:
            raise ShapeError(f"grad_check: input {x.shape} vs gradient {g.shape}")
        flat = x.reshape(-1)
        if not np.shares_memory(flat, x):
            raise ValueError("grad_check inputs must be contiguous arrays")
        idx = np.arange(flat.size)
        if max_per_input is not None and flat.size > max_per_input:
            rng = rng or np.random.default_rng(0)
            idx = rng.choice(flat.size, size=max_per_input, replace=False)
        gflat = g.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            up = fn()
            flat[i] = orig - step
            down = fn()
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            err = abs(numeric - gflat[i]) / max(1.0, abs(gflat[i]))
            worst = max(worst, err)
    return worst
