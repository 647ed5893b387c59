"""Numpy building blocks with explicit backward passes (float64 throughout)."""

from __future__ import annotations

import numpy as np


def positional_encoding(seq_len: int, d_model: int) -> np.ndarray:
    """Sinusoidal encoding: sin on even columns, cos on odd, frequency 10000^(-2i/d)."""
    if seq_len <= 0 or d_model <= 0:
        raise ValueError("positional encoding dimensions must be positive")
    pos = np.arange(seq_len)[:, None]
    pair = np.arange(d_model) // 2
    angle = pos / np.power(10000.0, 2 * pair / d_model)
    pe = np.empty((seq_len, d_model))
    pe[:, 0::2] = np.sin(angle[:, 0::2])
    pe[:, 1::2] = np.cos(angle[:, 1::2])
    return pe


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    return p * (dp - np.sum(dp * p, axis=-1, keepdims=True))


def scaled_dot_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, return_weights: bool = False):
    """softmax(Q K^T / sqrt(d_k)) V over the last two axes."""
    if q.shape[-1] != k.shape[-1]:
        raise ValueError("Q and K must share the key dimension")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError("K and V must have the same sequence length")
    scores = q @ np.swapaxes(k, -1, -2) / np.sqrt(q.shape[-1])
    w = softmax(scores)
    out = w @ v
    return (out, w) if return_weights else out


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-8):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv)


def layer_norm_backward(dy: np.ndarray, cache, gain: np.ndarray):
    xhat, inv = cache
    red = tuple(range(dy.ndim - 1))
    dgain = np.sum(dy * xhat, axis=red)
    dbias = np.sum(dy, axis=red)
    dxhat = dy * gain
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
    return dx, dgain, dbias


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over samples of the squared Euclidean error, and its gradient wrt ``pred``.

    A 1-D input counts as a single sample.
    """
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    p2 = pred.reshape(-1, pred.shape[-1]) if pred.ndim else pred.reshape(1, 1)
    t2 = target.reshape(p2.shape)
    n = p2.shape[0]
    diff = t2 - p2
    loss = float(np.sum(diff * diff) / n)
    return loss, (-2.0 * diff / n).reshape(pred.shape)
