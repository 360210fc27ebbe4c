"""Dense-array primitives with hand-written backward passes.

Every forward function here returns its output(s) together with a cache; the
matching ``*_backward`` function consumes that cache, accumulates parameter
gradients into :class:`ParamTensor.grad` and returns gradients for the
non-parameter inputs.  Arrays are plain :class:`numpy.ndarray` objects; a
leading batch axis is allowed everywhere.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64
INIT_SCALE = 0.1

# Set NEURAL_OIE_DEBUG=1 to check every op output for NaN/Inf.
DEBUG = os.environ.get("NEURAL_OIE_DEBUG", "") not in ("", "0")


class DimensionError(ValueError):
    """Raised when array shapes do not line up."""


class NonFiniteError(FloatingPointError):
    pass


class StateError(RuntimeError):
    """Raised when an operation is invoked out of order (e.g. backward first)."""


def check_finite(name: str, *arrays: np.ndarray) -> None:
    if not DEBUG:
        return
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"non-finite values produced by {name}")


def make_rng(seed: int | np.random.Generator | None) -> np.random.Generator:
    """Deterministic generator (PCG64) from a seed; generators pass through."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(seed))


@dataclass
class ParamTensor:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise DimensionError(
                f"{self.name}: grad shape {self.grad.shape} != value shape {self.value.shape}"
            )

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    @classmethod
    def uniform(cls, name, shape, rng, scale=INIT_SCALE, dtype=DEFAULT_DTYPE):
        value = rng.uniform(-scale, scale, size=shape).astype(dtype)
        return cls(name, value)

    @classmethod
    def zeros(cls, name, shape, dtype=DEFAULT_DTYPE):
        return cls(name, np.zeros(shape, dtype=dtype))


@dataclass
class LstmCellWeights:
    """LSTM weights with gate blocks stacked in the order [i, f, g, o]."""

    W_input: ParamTensor
    W_hidden: ParamTensor
    bias: ParamTensor

    def __post_init__(self):
        four_h, hidden = self.W_hidden.shape
        if four_h != 4 * hidden:
            raise DimensionError(f"W_hidden must be (4H, H), got {self.W_hidden.shape}")
        if self.W_input.shape[0] != four_h or self.bias.shape != (four_h,):
            raise DimensionError(
                f"inconsistent LSTM shapes: W_input {self.W_input.shape}, "
                f"W_hidden {self.W_hidden.shape}, bias {self.bias.shape}"
            )

    @property
    def hidden_dim(self) -> int:
        return self.W_hidden.shape[1]

    @property
    def input_dim(self) -> int:
        return self.W_input.shape[1]

    def params(self) -> list[ParamTensor]:
        return [self.W_input, self.W_hidden, self.bias]

    @classmethod
    def init(cls, prefix, input_dim, hidden_dim, rng, scale=INIT_SCALE, dtype=DEFAULT_DTYPE):
        return cls(
            ParamTensor.uniform(f"{prefix}.W_ih", (4 * hidden_dim, input_dim), rng, scale, dtype),
            ParamTensor.uniform(f"{prefix}.W_hh", (4 * hidden_dim, hidden_dim), rng, scale, dtype),
            ParamTensor.uniform(f"{prefix}.b", (4 * hidden_dim,), rng, scale, dtype),
        )


# ---------------------------------------------------------------- linear


def linear(x, W, b):
    """``W @ x + b`` for a vector ``x`` or a batch of row vectors."""
    y, _ = linear_forward(x, W, b)
    return y


def linear_forward(x, W: ParamTensor | np.ndarray, b: ParamTensor | np.ndarray | None):
    Wv = W.value if isinstance(W, ParamTensor) else W
    bv = b.value if isinstance(b, ParamTensor) else b
    x = np.asarray(x)
    if Wv.ndim != 2 or x.shape[-1] != Wv.shape[1]:
        raise DimensionError(f"linear: x shape {x.shape} incompatible with W shape {Wv.shape}")
    if bv is not None and bv.shape != (Wv.shape[0],):
        raise DimensionError(f"linear: b shape {bv.shape} incompatible with W shape {Wv.shape}")
    y = x @ Wv.T
    if bv is not None:
        y = y + bv
    check_finite("linear", y)
    return y, (x, W, b)


def linear_backward(dy, cache):
    x, W, b = cache
    Wv = W.value if isinstance(W, ParamTensor) else W
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    if isinstance(W, ParamTensor):
        W.grad += dy2.T @ x2
    if isinstance(b, ParamTensor):
        b.grad += dy2.sum(axis=0)
    dx = dy @ Wv
    check_finite("linear_backward", dx)
    return dx


# ---------------------------------------------------------------- softmax


def softmax(v, axis=-1):
    v = np.asarray(v)
    if v.size == 0 or v.shape[axis] == 0:
        raise ValueError("softmax of an empty vector")
    z = v - v.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    check_finite("softmax", p)
    return p


def log_softmax(v, axis=-1):
    v = np.asarray(v)
    if v.size == 0 or v.shape[axis] == 0:
        raise ValueError("log_softmax of an empty vector")
    z = v - v.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax_backward(dp, p, axis=-1):
    return p * (dp - (dp * p).sum(axis=axis, keepdims=True))


def masked_softmax(v, mask, axis=-1):
    """Softmax restricted to entries where ``mask`` is nonzero."""
    big_neg = np.where(mask > 0, 0.0, -np.inf)
    return softmax(v + big_neg, axis=axis)


def sigmoid(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def nll_loss(logits, target: int):
    """Negative log-likelihood of ``target`` under ``softmax(logits)``."""
    return -log_softmax(logits)[..., target]


def nll_loss_backward(logits, target: int):
    d = softmax(logits)
    d[..., target] -= 1.0
    return d


# ---------------------------------------------------------------- LSTM


def lstm_cell(x, h_prev, c_prev, w: LstmCellWeights):
    h, c, _ = lstm_cell_forward(x, h_prev, c_prev, w)
    return h, c


def lstm_cell_forward(x, h_prev, c_prev, w: LstmCellWeights):
    H = w.hidden_dim
    if x.shape[-1] != w.input_dim:
        raise DimensionError(f"lstm_cell: x dim {x.shape[-1]} != W_input cols {w.input_dim}")
    if h_prev.shape[-1] != H or c_prev.shape[-1] != H:
        raise DimensionError(
            f"lstm_cell: state dims {h_prev.shape}/{c_prev.shape} != hidden {H}"
        )
    z = x @ w.W_input.value.T + h_prev @ w.W_hidden.value.T + w.bias.value
    i = sigmoid(z[..., :H])
    f = sigmoid(z[..., H : 2 * H])
    g = np.tanh(z[..., 2 * H : 3 * H])
    o = sigmoid(z[..., 3 * H :])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    check_finite("lstm_cell", h, c)
    return h, c, (x, h_prev, c_prev, i, f, g, o, tc, w)


def lstm_cell_backward(dh, dc, cache):
    """Returns ``(dx, dh_prev, dc_prev)``; weight grads go into ``w``."""
    x, h_prev, c_prev, i, f, g, o, tc, w = cache
    do = dh * tc
    dc = dc + dh * o * (1.0 - tc * tc)
    di = dc * g
    df = dc * c_prev
    dg = dc * i
    dc_prev = dc * f
    dz = np.concatenate(
        [di * i * (1.0 - i), df * f * (1.0 - f), dg * (1.0 - g * g), do * o * (1.0 - o)],
        axis=-1,
    )
    dz2 = dz.reshape(-1, dz.shape[-1])
    w.W_input.grad += dz2.T @ x.reshape(-1, x.shape[-1])
    w.W_hidden.grad += dz2.T @ h_prev.reshape(-1, h_prev.shape[-1])
    w.bias.grad += dz2.sum(axis=0)
    dx = dz @ w.W_input.value
    dh_prev = dz @ w.W_hidden.value
    check_finite("lstm_cell_backward", dx, dh_prev, dc_prev)
    return dx, dh_prev, dc_prev


# ---------------------------------------------------------------- attention


def additive_attention_forward(s, keys, values, mask, W_s: ParamTensor, v: ParamTensor):
    """Concat-style attention over a padded batch.

    ``s`` (B, Hd) is the query, ``keys`` (B, T, A) the precomputed ``W_h @ h_j``
    projections, ``values`` (B, T, De) the encoder outputs and ``mask`` (B, T).
    Returns ``(context, alpha, scores, cache)``.
    """
    q = s @ W_s.value.T  # (B, A)
    a = np.tanh(keys + q[:, None, :])
    e = a @ v.value  # (B, T)
    alpha = masked_softmax(e, mask)
    ctx = np.einsum("bt,btd->bd", alpha, values)
    check_finite("attention", ctx, alpha)
    return ctx, alpha, e, (s, a, alpha, values, W_s, v)


def additive_attention_backward(dctx, dalpha_extra, cache):
    """Returns ``(ds, dkeys, dvalues)``.

    ``dalpha_extra`` is any gradient reaching the weights directly (the copy
    branch); it may be ``None``.
    """
    s, a, alpha, values, W_s, v = cache
    dalpha = np.einsum("bd,btd->bt", dctx, values)
    if dalpha_extra is not None:
        dalpha = dalpha + dalpha_extra
    dvalues = alpha[:, :, None] * dctx[:, None, :]
    de = softmax_backward(dalpha, alpha)
    v.grad += np.einsum("bt,bta->a", de, a)
    da = de[:, :, None] * v.value * (1.0 - a * a)
    dkeys = da
    dq = da.sum(axis=1)
    W_s.grad += dq.T @ s
    ds = dq @ W_s.value
    return ds, dkeys, dvalues


# ---------------------------------------------------------------- dropout


def dropout_mask(shape, rate, rng, dtype=DEFAULT_DTYPE):
    """Inverted-dropout mask, or ``None`` when dropout is inactive."""
    if rate <= 0.0 or rng is None:
        return None
    keep = 1.0 - rate
    return (rng.random(shape) < keep).astype(dtype) / keep


def apply_mask(x, mask):
    return x if mask is None else x * mask


# ---------------------------------------------------------------- checking


def zero_grads(params: Iterable[ParamTensor]) -> None:
    for p in params:
        p.zero_grad()


def global_grad_norm(params: Iterable[ParamTensor]) -> float:
    return float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params)))


def clip_grad_norm(params: Sequence[ParamTensor], max_norm: float) -> float:
    """Scale gradients in place so their global norm is at most ``max_norm``."""
    norm = global_grad_norm(params)
    if norm > max_norm > 0:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            p.grad *= scale
    return norm


def gradient_check(
    f: Callable[[], float],
    params: Sequence[ParamTensor],
    eps: float = 1e-5,
    num_samples: int | None = 20,
    seed: int = 0,
    reduction: str = "elementwise",
) -> float:
    """Compare analytic gradients against central differences.

    ``f`` must run a forward pass, run the backward pass (accumulating into
    the parameters' ``grad``) and return the scalar objective.  Up to
    ``num_samples`` coordinates per parameter are probed (all of them when
    ``None``).  Returns the maximum relative error.

    ``reduction="elementwise"`` scores each coordinate as |a - n| / max(|a|, |n|).
    ``"norm"`` scores each tensor as ||a - n|| / max(||a||, ||n||) over its probed
    coordinates, which stays meaningful when single gradients sit near zero and
    the difference quotient is dominated by cancellation noise.  ``"global"``
    applies the same formula once to the concatenation of all probed
    coordinates, i.e. the relative error of the whole gradient vector.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if reduction not in ("elementwise", "norm", "global"):
        raise ValueError(f"unknown reduction {reduction!r}")
    zero_grads(params)
    out = f()
    if np.ndim(out) != 0:
        raise ValueError(f"gradient_check needs a scalar objective, got shape {np.shape(out)}")
    analytic = [p.grad.copy() for p in params]
    rng = make_rng(seed)
    worst = 0.0
    all_a, all_n = [], []
    for p, g in zip(params, analytic):
        flat = p.value.reshape(-1)
        n = flat.size
        if num_samples is None or num_samples >= n:
            idx = np.arange(n)
        else:
            idx = rng.choice(n, size=num_samples, replace=False)
        nums = np.empty(len(idx))
        for i, k in enumerate(idx):
            old = flat[k]
            flat[k] = old + eps
            fp = float(f())
            flat[k] = old - eps
            fm = float(f())
            flat[k] = old
            nums[i] = (fp - fm) / (2 * eps)
        anas = g.reshape(-1)[idx].astype(np.float64)
        all_a.append(anas)
        all_n.append(nums)
        if reduction == "norm":
            denom = max(np.linalg.norm(anas), np.linalg.norm(nums))
            if denom > 0:
                worst = max(worst, float(np.linalg.norm(anas - nums) / denom))
        else:
            denom = np.maximum(np.maximum(np.abs(anas), np.abs(nums)), 1e-12)
            if len(idx):
                worst = max(worst, float(np.max(np.abs(anas - nums) / denom)))
    zero_grads(params)
    if reduction == "global" and all_a:
        a, n = np.concatenate(all_a), np.concatenate(all_n)
        denom = max(np.linalg.norm(a), np.linalg.norm(n))
        worst = float(np.linalg.norm(a - n) / denom) if denom > 0 else 0.0
    return worst
