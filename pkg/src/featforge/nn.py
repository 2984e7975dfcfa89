"""Numpy recurrent layers with explicit backward passes, plus Adam.

All arrays are float64. Sequences are time-major: ``X`` has shape
(T, B, D) and ``mask`` has shape (T, B) with 1.0 for real positions.
Masked steps carry the previous hidden state through unchanged.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

Params = "OrderedDict[str, np.ndarray]"


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(logits, axis=-1):
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def uniform_init(rng, shape, fan):
    k = 1.0 / np.sqrt(fan)
    return rng.uniform(-k, k, size=shape)


def pad_batch(sequences: list[list[int]], pad: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Stack ragged id lists into time-major (T, B) ids and mask."""
    T = max(len(s) for s in sequences)
    ids = np.full((T, len(sequences)), pad, dtype=np.int64)
    mask = np.zeros((T, len(sequences)))
    for b, s in enumerate(sequences):
        ids[: len(s), b] = s
        mask[: len(s), b] = 1.0
    return ids, mask


# --- GRU ------------------------------------------------------------------------

def gru_params(rng, prefix, d_in, d_h):
    return OrderedDict(
        [
            (f"{prefix}_Wx", uniform_init(rng, (d_in, 3 * d_h), d_h)),
            (f"{prefix}_Wh", uniform_init(rng, (d_h, 3 * d_h), d_h)),
            (f"{prefix}_b", uniform_init(rng, (3 * d_h,), d_h)),
        ]
    )


def gru_step(Wx, Wh, b, x, h):
    H = Wh.shape[0]
    a = x @ Wx + b
    hh = h @ Wh
    r = sigmoid(a[:, :H] + hh[:, :H])
    u = sigmoid(a[:, H:2 * H] + hh[:, H:2 * H])
    hn = hh[:, 2 * H:]
    n = np.tanh(a[:, 2 * H:] + r * hn)
    return (1.0 - u) * n + u * h, (r, u, n, hn)


def gru_forward(Wx, Wh, b, X, mask, h0):
    T, B = X.shape[:2]
    hs = np.empty((T + 1, B, Wh.shape[0]), dtype=np.result_type(X, Wh))
    hs[0] = h0
    cache = []
    for t in range(T):
        h = hs[t]
        hnew, c = gru_step(Wx, Wh, b, X[t], h)
        m = mask[t][:, None]
        hs[t + 1] = m * hnew + (1.0 - m) * h
        cache.append(c)
    return hs, cache


def gru_backward(Wx, Wh, X, mask, hs, cache, dhs):
    """``dhs`` (T, B, H) is the upstream gradient w.r.t. ``hs[1:]``."""
    T = X.shape[0]
    H = Wh.shape[0]
    dWx = np.zeros_like(Wx)
    dWh = np.zeros_like(Wh)
    db = np.zeros(3 * H)
    dX = np.zeros_like(X)
    carry = np.zeros_like(hs[0])
    for t in range(T - 1, -1, -1):
        r, u, n, hn = cache[t]
        h = hs[t]
        m = mask[t][:, None]
        dtotal = dhs[t] + carry
        dnew = m * dtotal
        dprev = (1.0 - m) * dtotal + dnew * u
        dn = dnew * (1.0 - u)
        du = dnew * (h - n)
        dan = dn * (1.0 - n * n)
        dr = dan * hn
        dar = dr * r * (1.0 - r)
        dau = du * u * (1.0 - u)
        da = np.concatenate([dar, dau, dan], axis=1)
        dhh = np.concatenate([dar, dau, dan * r], axis=1)
        dWx += X[t].T @ da
        db += da.sum(axis=0)
        dX[t] = da @ Wx.T
        dWh += h.T @ dhh
        carry = dprev + dhh @ Wh.T
    return dWx, dWh, db, dX, carry


# --- LSTM -----------------------------------------------------------------------

def lstm_params(rng, prefix, d_in, d_h):
    return OrderedDict(
        [
            (f"{prefix}_Wx", uniform_init(rng, (d_in, 4 * d_h), d_h)),
            (f"{prefix}_Wh", uniform_init(rng, (d_h, 4 * d_h), d_h)),
            (f"{prefix}_b", uniform_init(rng, (4 * d_h,), d_h)),
        ]
    )


def lstm_step(Wx, Wh, b, x, h, c):
    H = Wh.shape[0]
    g = x @ Wx + h @ Wh + b
    i = sigmoid(g[:, :H])
    f = sigmoid(g[:, H:2 * H])
    gg = np.tanh(g[:, 2 * H:3 * H])
    o = sigmoid(g[:, 3 * H:])
    c_new = f * c + i * gg
    tc = np.tanh(c_new)
    return o * tc, c_new, (i, f, gg, o, tc)


def lstm_forward(Wx, Wh, b, X, h0, c0):
    T, B = X.shape[:2]
    H = Wh.shape[0]
    dtype = np.result_type(X, Wh, h0, c0)
    hs = np.empty((T + 1, B, H), dtype=dtype)
    cs = np.empty((T + 1, B, H), dtype=dtype)
    hs[0], cs[0] = h0, c0
    cache = []
    for t in range(T):
        hs[t + 1], cs[t + 1], k = lstm_step(Wx, Wh, b, X[t], hs[t], cs[t])
        cache.append(k)
    return hs, cs, cache


def lstm_backward(Wx, Wh, X, hs, cs, cache, dhs):
    T = X.shape[0]
    H = Wh.shape[0]
    dWx = np.zeros_like(Wx)
    dWh = np.zeros_like(Wh)
    db = np.zeros(4 * H)
    dX = np.zeros_like(X)
    dh_carry = np.zeros_like(hs[0])
    dc_carry = np.zeros_like(cs[0])
    for t in range(T - 1, -1, -1):
        i, f, gg, o, tc = cache[t]
        dh = dhs[t] + dh_carry
        dc = dc_carry + dh * o * (1.0 - tc * tc)
        dgates = np.concatenate(
            [
                dc * gg * i * (1.0 - i),
                dc * cs[t] * f * (1.0 - f),
                dc * i * (1.0 - gg * gg),
                dh * tc * o * (1.0 - o),
            ],
            axis=1,
        )
        dWx += X[t].T @ dgates
        dWh += hs[t].T @ dgates
        db += dgates.sum(axis=0)
        dX[t] = dgates @ Wx.T
        dh_carry = dgates @ Wh.T
        dc_carry = dc * f
    return dWx, dWh, db, dX, dh_carry, dc_carry


# --- MLP head ---------------------------------------------------------------------

def mlp_params(rng, prefix, d_in, d_h):
    return OrderedDict(
        [
            (f"{prefix}_W1", uniform_init(rng, (d_in, d_h), d_in)),
            (f"{prefix}_b1", uniform_init(rng, (d_h,), d_in)),
            (f"{prefix}_W2", uniform_init(rng, (d_h, 1), d_h)),
            (f"{prefix}_b2", uniform_init(rng, (1,), d_h)),
        ]
    )


def mlp_forward(W1, b1, W2, b2, x):
    a = np.tanh(x @ W1 + b1)
    return (a @ W2 + b2)[:, 0], a


def mlp_backward(W1, W2, x, a, ds):
    """``ds`` (B,) upstream gradient on the scalar outputs."""
    dW2 = a.T @ ds[:, None]
    db2 = np.array([ds.sum()])
    dpre = (ds[:, None] * W2[:, 0]) * (1.0 - a * a)
    dW1 = x.T @ dpre
    db1 = dpre.sum(axis=0)
    dx = dpre @ W1.T
    return dW1, db1, dW2, db2, dx


# --- losses ---------------------------------------------------------------------

def masked_cross_entropy(logits, targets, mask):
    """Mean token cross-entropy and its gradient w.r.t. ``logits``."""
    logp = log_softmax(logits)
    n = mask.sum()
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(picked * mask).sum() / n
    dlogits = np.exp(logp)
    np.put_along_axis(dlogits, targets[..., None], np.take_along_axis(dlogits, targets[..., None], -1) - 1.0, -1)
    dlogits *= (mask / n)[..., None]
    return loss, dlogits


def embedding_grad(shape, ids, dX):
    g = np.zeros(shape)
    np.add.at(g, ids.reshape(-1), dX.reshape(-1, shape[1]))
    return g


# --- optimisation -----------------------------------------------------------------

def global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_grads(grads, max_norm):
    if not max_norm:
        return grads
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        return OrderedDict((k, g * scale) for k, g in grads.items())
    return grads


@dataclass
class Adam:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params, grads):
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= self.learning_rate * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


# --- finite differences -------------------------------------------------------------

def relative_error(analytic, numeric, floor=1e-8):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(loss_fn, params, grads, epsilon=1e-5, n_coords=50, seed=0, dtype=np.longdouble):
    """Central-difference check on a random coordinate subset of every tensor.

    ``loss_fn(params)`` must return a scalar and must not downcast. The
    differences are taken in ``dtype`` (extended precision by default) so that
    roundoff in the loss does not swamp gradients near 1e-8.
    Returns ``(max_error, per_tensor)``.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must be in [1e-7, 1e-3]")
    rng = np.random.default_rng(seed)
    params = OrderedDict((k, np.array(v, dtype=dtype)) for k, v in params.items())
    epsilon = dtype(epsilon)
    per_tensor = {}
    for name, p in params.items():
        flat = p.reshape(-1)
        coords = np.arange(flat.size)
        if flat.size > n_coords:
            coords = rng.choice(flat.size, size=n_coords, replace=False)
        worst = 0.0
        g = grads[name].reshape(-1)
        for i in coords:
            old = flat[i]
            flat[i] = old + epsilon
            up = loss_fn(params)
            flat[i] = old - epsilon
            down = loss_fn(params)
            flat[i] = old
            worst = max(worst, float(relative_error(g[i], (up - down) / (2 * epsilon))))
        per_tensor[name] = worst
    return max(per_tensor.values()), per_tensor
