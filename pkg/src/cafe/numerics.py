"""Dense-array layer primitives with explicit forward/backward passes.

Every primitive is a pure function pair::

    y, cache = <op>_forward(inputs, params)
    grad     = <op>_backward(cache, upstream)

All compute is float64; gradients are exact analytic expressions and are
validated against central finite differences (see ``grad_check``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class LayerGrad:
    """Gradients of one primitive: parameter grads by name plus input grad."""

    params: dict[str, np.ndarray] = field(default_factory=dict)
    x: np.ndarray | None = None


def _f64(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64)


# ---------------------------------------------------------------------------
# linear


def linear_forward(x, w, b):
    """y = x @ w + b for x (B,N), w (N,M), b (M,)."""
    x, w, b = _f64(x), _f64(w), _f64(b)
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise ValueError(f"linear: bad ranks {x.shape}, {w.shape}, {b.shape}")
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ValueError(f"linear: shape mismatch {x.shape} @ {w.shape} + {b.shape}")
    y = x @ w + b
    return y, (x, w)


def linear_backward(cache, gy) -> LayerGrad:
    x, w = cache
    gy = _f64(gy)
    return LayerGrad(
        params={"w": x.T @ gy, "b": gy.sum(axis=0)},
        x=gy @ w.T,
    )


# ---------------------------------------------------------------------------
# 1-d convolutions over the time axis


def conv1d_depthwise_forward(x, k):
    """Per-channel correlation with zero 'same' padding.

    x (B,C,T), k (C,K) with K odd; output (B,C,T).
    """
    x, k = _f64(x), _f64(k)
    if x.ndim != 3 or k.ndim != 2:
        raise ValueError(f"depthwise: bad ranks {x.shape}, {k.shape}")
    if x.shape[1] != k.shape[0]:
        raise ValueError(f"depthwise: channel mismatch {x.shape} vs {k.shape}")
    kk = k.shape[1]
    if kk % 2 == 0:
        raise ValueError(f"depthwise: kernel size must be odd, got {kk}")
    pad = kk // 2
    t = x.shape[2]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    y = np.zeros_like(x)
    for j in range(kk):
        y += xp[:, :, j : j + t] * k[:, j][None, :, None]
    return y, (xp, k, t)


def conv1d_depthwise_backward(cache, gy) -> LayerGrad:
    xp, k, t = cache
    gy = _f64(gy)
    kk = k.shape[1]
    pad = kk // 2
    dk = np.empty_like(k)
    dxp = np.zeros_like(xp)
    for j in range(kk):
        dk[:, j] = (xp[:, :, j : j + t] * gy).sum(axis=(0, 2))
        dxp[:, :, j : j + t] += gy * k[:, j][None, :, None]
    return LayerGrad(params={"k": dk}, x=dxp[:, :, pad : pad + t])


def conv1d_pointwise_forward(x, w):
    """1x1 channel mixing: x (B,C,T), w (C,C') -> (B,C',T)."""
    x, w = _f64(x), _f64(w)
    if x.ndim != 3 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"pointwise: shape mismatch {x.shape} vs {w.shape}")
    y = (x.transpose(0, 2, 1) @ w).transpose(0, 2, 1)
    return y, (x, w)


def conv1d_pointwise_backward(cache, gy) -> LayerGrad:
    x, w = cache
    gy = _f64(gy)
    dw = np.tensordot(x, gy, axes=([0, 2], [0, 2]))
    dx = (gy.transpose(0, 2, 1) @ w.T).transpose(0, 2, 1)
    return LayerGrad(params={"w": dw}, x=dx)


def channel_bias_forward(x, b):
    """Add a per-channel bias: x (B,C,T), b (C,)."""
    x, b = _f64(x), _f64(b)
    if x.ndim != 3 or b.shape != (x.shape[1],):
        raise ValueError(f"channel_bias: shape mismatch {x.shape} vs {b.shape}")
    return x + b[None, :, None], None


def channel_bias_backward(cache, gy) -> LayerGrad:
    gy = _f64(gy)
    return LayerGrad(params={"b": gy.sum(axis=(0, 2))}, x=gy)


# ---------------------------------------------------------------------------
# single-head self-attention over the channel axis


def attention_channels_forward(x, wq, wk, wv):
    """softmax((xWq)(xWk)^T / sqrt(D)) (xWv) for x (B,C,D)."""
    x, wq, wk, wv = _f64(x), _f64(wq), _f64(wk), _f64(wv)
    if x.ndim != 3:
        raise ValueError(f"attention: expected (B,C,D), got {x.shape}")
    d = x.shape[2]
    for name, w in (("wq", wq), ("wk", wk), ("wv", wv)):
        if w.shape != (d, d):
            raise ValueError(f"attention: {name} must be ({d},{d}), got {w.shape}")
    q = x @ wq
    k = x @ wk
    v = x @ wv
    scale = 1.0 / np.sqrt(d)
    s = (q @ k.transpose(0, 2, 1)) * scale
    s = s - s.max(axis=-1, keepdims=True)  # overflow guard
    e = np.exp(s)
    a = e / e.sum(axis=-1, keepdims=True)
    y = a @ v
    return y, (x, wq, wk, wv, q, k, v, a, scale)


def attention_channels_backward(cache, gy) -> LayerGrad:
    x, wq, wk, wv, q, k, v, a, scale = cache
    gy = _f64(gy)
    da = gy @ v.transpose(0, 2, 1)
    dv = a.transpose(0, 2, 1) @ gy
    ds = a * (da - (da * a).sum(axis=-1, keepdims=True))
    ds *= scale
    dq = ds @ k
    dk = ds.transpose(0, 2, 1) @ q
    dwq = np.tensordot(x, dq, axes=([0, 1], [0, 1]))
    dwk = np.tensordot(x, dk, axes=([0, 1], [0, 1]))
    dwv = np.tensordot(x, dv, axes=([0, 1], [0, 1]))
    dx = dq @ wq.T + dk @ wk.T + dv @ wv.T
    return LayerGrad(params={"wq": dwq, "wk": dwk, "wv": dwv}, x=dx)


# ---------------------------------------------------------------------------
# elementwise / normalization


def relu_forward(x):
    x = _f64(x)
    return np.maximum(x, 0.0), x


def relu_backward(cache, gy) -> LayerGrad:
    return LayerGrad(x=_f64(gy) * (cache > 0))


LAYERNORM_EPS = 1e-5


def layernorm_forward(x, gain, bias):
    """Normalize over the last axis, then scale and shift."""
    x, gain, bias = _f64(x), _f64(gain), _f64(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"layernorm: params must be ({d},)")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYERNORM_EPS)
    xhat = xc * inv
    y = xhat * gain + bias
    return y, (xhat, inv, gain, d)


def layernorm_backward(cache, gy) -> LayerGrad:
    xhat, inv, gain, d = cache
    gy = _f64(gy)
    sum_axes = tuple(range(gy.ndim - 1))
    dgain = (gy * xhat).sum(axis=sum_axes)
    dbias = gy.sum(axis=sum_axes)
    dxhat = gy * gain
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return LayerGrad(params={"gain": dgain, "bias": dbias}, x=dx)


# ---------------------------------------------------------------------------
# masked reconstruction loss


def mse_masked_forward(pred, target, channel_set):
    """Sum of squared error over the selected channels (all time samples).

    pred/target are (C,T) or (B,C,T); channel_set indexes the channel axis.
    Sum reduction; callers that want scale-stable losses divide by
    ``len(channel_set) * T`` themselves.
    """
    pred, target = _f64(pred), _f64(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse_masked: shape mismatch {pred.shape} vs {target.shape}")
    idx = np.asarray(sorted(channel_set), dtype=np.intp)
    if idx.size == 0:
        raise ValueError("mse_masked: empty channel set")
    c_axis = pred.ndim - 2
    n_ch = pred.shape[c_axis]
    if idx.min() < 0 or idx.max() >= n_ch:
        raise ValueError(f"mse_masked: channel index out of range 0..{n_ch - 1}")
    diff = np.take(pred, idx, axis=c_axis) - np.take(target, idx, axis=c_axis)
    loss = float((diff * diff).sum())
    return loss, (diff, idx, pred.shape, c_axis)


def mse_masked_backward(cache, gy=1.0) -> LayerGrad:
    diff, idx, shape, c_axis = cache
    dpred = np.zeros(shape)
    sl = [slice(None)] * len(shape)
    sl[c_axis] = idx
    dpred[tuple(sl)] = 2.0 * float(gy) * diff
    return LayerGrad(x=dpred)


# ---------------------------------------------------------------------------
# finite-difference gradient checking


def grad_check(f, args, analytic, h=1e-5):
    """Max relative error between analytic grads and central differences.

    ``f(*args) -> scalar``; ``analytic`` is a sequence of gradient arrays
    aligned with ``args`` (``None`` entries are skipped). The relative error
    at each coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    args = [_f64(a).copy() for a in args]
    worst = 0.0
    for ai, grad in enumerate(analytic):
        if grad is None:
            continue
        a = args[ai]
        grad = _f64(grad)
        if grad.shape != a.shape:
            raise ValueError(f"grad_check: grad {ai} shape {grad.shape} != {a.shape}")
        flat = a.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(*args))
            flat[i] = orig - h
            fm = float(f(*args))
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            err = abs(gflat[i] - num) / max(abs(gflat[i]), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
