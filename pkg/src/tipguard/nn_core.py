"""Dense neural-network numerics: LSTM cell, linear head, dropout, losses, Adam.

Everything runs in double precision with hand-derived analytic gradients.
Sequences are batch-first ``(B, L, features)``; a 2-D ``(L, features)`` input
is treated as a batch of one and results are returned without the batch axis.

Gate order inside the packed LSTM weights is fixed as
(input, forget, cell, output), i.e. ``W[0:H]`` are the input-gate rows,
``W[H:2H]`` the forget gate, and so on.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError

log = logging.getLogger(__name__)

GATE_ORDER = ("input", "forget", "cell", "output")


def sigmoid(z):
    """Numerically stable logistic function, elementwise."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# parameter containers and initialization
# ---------------------------------------------------------------------------


@dataclass
class LstmLayerParams:
    """Packed weights of one LSTM layer.

    W: (4H, D) input projection, U: (4H, H) recurrent projection, b: (4H,).
    Rows are packed in GATE_ORDER.
    """

    input_size: int
    hidden_size: int
    W: np.ndarray
    U: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        h, d = self.hidden_size, self.input_size
        if self.W.shape != (4 * h, d) or self.U.shape != (4 * h, h) or self.b.shape != (4 * h,):
            raise ValueError(
                f"inconsistent LSTM parameter shapes for D={d}, H={h}: "
                f"W{self.W.shape}, U{self.U.shape}, b{self.b.shape}")

    def arrays(self):
        return [self.W, self.U, self.b]


@dataclass
class DenseParams:
    """Time-distributed affine head: y = x @ weight.T + bias."""

    weight: np.ndarray  # (O, H)
    bias: np.ndarray  # (O,)

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError(
                f"inconsistent dense shapes: weight{self.weight.shape}, bias{self.bias.shape}")

    def arrays(self):
        return [self.weight, self.bias]


def _glorot_uniform(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _orthogonal(rng, n):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def init_lstm(input_size, hidden_size, rng):
    """Glorot-uniform W, per-gate orthogonal U, zero bias with forget gate at 1."""
    h = hidden_size
    W = _glorot_uniform(rng, input_size, 4 * h, (4 * h, input_size))
    U = np.concatenate([_orthogonal(rng, h) for _ in GATE_ORDER], axis=0)
    b = np.zeros(4 * h)
    b[h:2 * h] = 1.0
    return LstmLayerParams(input_size, h, W, U, b)


def init_dense(input_size, output_size, rng):
    weight = _glorot_uniform(rng, input_size, output_size, (output_size, input_size))
    return DenseParams(weight, np.zeros(output_size))


# ---------------------------------------------------------------------------
# LSTM forward / backward
# ---------------------------------------------------------------------------


@dataclass
class LstmCache:
    """Activations retained by lstm_forward for the backward pass."""

    params: LstmLayerParams
    x: np.ndarray  # (B, L, D)
    h_prev: np.ndarray  # (B, L, H), h_{t-1} per step
    c_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    tanh_c: np.ndarray
    squeeze: bool


def _promote(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 2:
        return x[None, :, :], True
    if x.ndim == 3:
        return x, False
    raise ValueError(f"expected (L, D) or (B, L, D) input, got shape {x.shape}")


def lstm_forward(x, params, h0=None, c0=None):
    """Run one LSTM layer over a sequence.

    Returns (hidden sequence (B, L, H), (h_T, c_T), cache). Initial states
    default to zeros.
    """
    x, squeeze = _promote(x)
    B, L, D = x.shape
    H = params.hidden_size
    if D != params.input_size:
        raise ValueError(f"input feature size {D} != layer input_size {params.input_size}")
    if not np.isfinite(x).all():
        raise NumericError("non-finite values in LSTM input")

    h = np.zeros((B, H)) if h0 is None else np.array(h0, dtype=float).reshape(B, H).copy()
    c = np.zeros((B, H)) if c0 is None else np.array(c0, dtype=float).reshape(B, H).copy()

    # one big input projection for all steps, recurrent part added per step
    xz = x.reshape(B * L, D) @ params.W.T
    xz = xz.reshape(B, L, 4 * H) + params.b

    h_seq = np.empty((B, L, H))
    cache = LstmCache(
        params=params, x=x,
        h_prev=np.empty((B, L, H)), c_prev=np.empty((B, L, H)),
        i=np.empty((B, L, H)), f=np.empty((B, L, H)),
        g=np.empty((B, L, H)), o=np.empty((B, L, H)),
        tanh_c=np.empty((B, L, H)), squeeze=squeeze)

    for t in range(L):
        z = xz[:, t] + h @ params.U.T
        i = sigmoid(z[:, :H])
        f = sigmoid(z[:, H:2 * H])
        g = np.tanh(z[:, 2 * H:3 * H])
        o = sigmoid(z[:, 3 * H:])
        cache.h_prev[:, t] = h
        cache.c_prev[:, t] = c
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        cache.i[:, t] = i
        cache.f[:, t] = f
        cache.g[:, t] = g
        cache.o[:, t] = o
        cache.tanh_c[:, t] = tc
        h_seq[:, t] = h

    if squeeze:
        return h_seq[0], (h[0], c[0]), cache
    return h_seq, (h, c), cache


def lstm_backward(dh_seq, cache, dh_last=None, dc_last=None):
    """Backpropagate through time.

    dh_seq holds the upstream gradient for every hidden output; dh_last/dc_last
    add gradient flowing into the final state (e.g. from a downstream layer
    consuming only h_T). Returns (dx, {"W","U","b"} gradients, (dh0, dc0)).
    """
    p = cache.params
    B, L, H = cache.i.shape
    if dh_seq is None:
        dh_seq = np.zeros((B, L, H))
    dh_seq = np.asarray(dh_seq, dtype=float)
    if cache.squeeze and dh_seq.ndim == 2:
        dh_seq = dh_seq[None, :, :]
    if dh_seq.shape != (B, L, H):
        raise ValueError(f"upstream gradient shape {dh_seq.shape} != {(B, L, H)}")

    dW = np.zeros_like(p.W)
    dU = np.zeros_like(p.U)
    db = np.zeros_like(p.b)
    dx = np.empty_like(cache.x)
    dh = np.zeros((B, H)) if dh_last is None else np.array(dh_last, dtype=float).reshape(B, H).copy()
    dc = np.zeros((B, H)) if dc_last is None else np.array(dc_last, dtype=float).reshape(B, H).copy()

    for t in range(L - 1, -1, -1):
        i, f, g, o = cache.i[:, t], cache.f[:, t], cache.g[:, t], cache.o[:, t]
        tc = cache.tanh_c[:, t]
        dh_t = dh + dh_seq[:, t]
        do = dh_t * tc
        dc = dc + dh_t * o * (1.0 - tc * tc)
        dzi = dc * g * i * (1.0 - i)
        dzf = dc * cache.c_prev[:, t] * f * (1.0 - f)
        dzg = dc * i * (1.0 - g * g)
        dzo = do * o * (1.0 - o)
        dz = np.concatenate([dzi, dzf, dzg, dzo], axis=1)  # (B, 4H)
        dW += dz.T @ cache.x[:, t]
        dU += dz.T @ cache.h_prev[:, t]
        db += dz.sum(axis=0)
        dx[:, t] = dz @ p.W
        dh = dz @ p.U
        dc = dc * f

    if cache.squeeze:
        dx = dx[0]
        dh, dc = dh[0], dc[0]
    return dx, {"W": dW, "U": dU, "b": db}, (dh, dc)


# ---------------------------------------------------------------------------
# dense head, dropout, losses
# ---------------------------------------------------------------------------


def dense_forward(x, params):
    """Affine map over the last axis: (..., H) -> (..., O)."""
    x = np.asarray(x, dtype=float)
    return x @ params.weight.T + params.bias, x


def dense_backward(dy, x_cache, params):
    dy = np.asarray(dy, dtype=float)
    flat_dy = dy.reshape(-1, dy.shape[-1])
    flat_x = x_cache.reshape(-1, x_cache.shape[-1])
    grads = {"weight": flat_dy.T @ flat_x, "bias": flat_dy.sum(axis=0)}
    return dy @ params.weight, grads


def dropout_apply(x, rate, rng, training):
    """Inverted dropout.

    In training mode each unit is zeroed independently with probability
    ``rate`` and survivors are scaled by 1/(1-rate), so E[output] = input.
    Returns (output, mask); the mask is None whenever the op is the identity
    and otherwise already carries the 1/(1-rate) factor (multiply upstream
    gradients by it in the backward pass).
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    x = np.asarray(x, dtype=float)
    if not training or rate == 0.0:
        return x, None
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask, mask


def mse_loss(prediction, target):
    """Mean squared error and its gradient with respect to the prediction.

    loss = (1/n) * sum((y - yhat)^2), grad = (2/n) * (yhat - y), with n the
    total number of values.
    """
    prediction = np.asarray(prediction, dtype=float)
    target = np.asarray(target, dtype=float)
    if prediction.shape != target.shape:
        raise ValueError(f"shape mismatch: {prediction.shape} vs {target.shape}")
    diff = prediction - target
    n = diff.size
    return float(np.mean(diff * diff)), (2.0 / n) * diff


def mae_loss(prediction, target):
    """Mean absolute error (evaluation-only; never trained on)."""
    prediction = np.asarray(prediction, dtype=float)
    target = np.asarray(target, dtype=float)
    if prediction.shape != target.shape:
        raise ValueError(f"shape mismatch: {prediction.shape} vs {target.shape}")
    return float(np.mean(np.abs(prediction - target)))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def clip_global_norm(grads, max_norm):
    """Scale the gradient list in place so its global L2 norm is <= max_norm.

    Returns the pre-clip norm.
    """
    total = 0.0
    for g in grads:
        total += float(np.sum(g * g))
    norm = np.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


@dataclass
class AdamState:
    """Adam accumulators for a fixed list of parameter tensors."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_init(params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    return AdamState(
        lr=lr, beta1=beta1, beta2=beta2, eps=eps, step=0,
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params])


def adam_step(params, grads, state):
    """Apply one bias-corrected Adam update in place.

    A non-finite gradient anywhere skips the whole step (state untouched) and
    returns False; otherwise returns True.
    """
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ValueError("parameter/gradient/state length mismatch")
    for g in grads:
        if not np.isfinite(g).all():
            log.warning("non-finite gradient encountered; optimizer step skipped")
            return False
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return True
