"""Network building blocks: gated convolutions with squeeze-and-excitation,
bidirectional LSTMs and the two-stage (multi-head + Proxima) attention."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import (
    ShapeError,
    Tensor,
    batch_norm_train,
    concat,
    glu,
    conv2d,
    layer_norm,
    matmul,
    max_pool2d,
    relu,
    sigmoid,
    softmax,
    stack,
    tanh,
)

BN_MOMENTUM = 0.9
BN_EPS = 1e-5


class ConfigError(ValueError):
    """Inconsistent layer or model configuration."""


@dataclass
class CnnBlockParams:
    conv_w: Tensor
    conv_b: Tensor
    gate_w: Tensor
    gate_b: Tensor
    bn_gain: Tensor
    bn_bias: Tensor
    bn_mean: np.ndarray  # running statistics, mutated in training mode only
    bn_var: np.ndarray
    se_w1: Tensor  # [reduced, C]
    se_w2: Tensor  # [C, reduced]
    pool: tuple[int, int] = (2, 2)


@dataclass
class LstmParams:
    """Gate weights acting on ``[h_prev, x_t]``.

    ``w`` has shape ``[H + D, 4H]``: rows ``:H`` multiply the previous hidden
    state, rows ``H:`` the input; columns hold the input, forget, output and
    candidate gates in that order.
    """

    w: Tensor
    b: Tensor

    @property
    def hidden(self) -> int:
        return self.b.shape[0] // 4


@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    prox_wq: Tensor
    prox_wk: Tensor
    prox_wv: Tensor
    fuse_w: Tensor  # [2D, D]
    ln_gain: Tensor
    ln_bias: Tensor
    heads: int

    @property
    def width(self) -> int:
        return self.wq.shape[0]

    @property
    def key_width(self) -> int:
        return self.width // self.heads


def se_width(channels: int, ratio: int) -> int:
    return max(1, channels // ratio)


# -- convolutional stage ---------------------------------------------------------

def full_gated_conv(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """``(W1 * x) ⊙ σ(W2 * x)`` with same padding on both branches."""
    if w1.shape != w2.shape:
        raise ShapeError(f"gated conv branches differ: {w1.shape} vs {w2.shape}")
    kh, kw = w1.shape[2:]
    # both branches share one convolution, then split
    both = conv2d(x, concat([w1, w2], axis=0), concat([b1, b2], axis=0), (kh // 2, kw // 2))
    return glu(both, axis=1)


def se_scales(x: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """Per-channel excitation ``σ(W2 ReLU(W1 GAP(x)))`` as ``[B, C]``."""
    squeeze = x.mean(axis=(2, 3))
    return sigmoid(matmul(relu(matmul(squeeze, w1.T)), w2.T))


def se_block(x: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError("se_block expects a rank-4 input")
    s = se_scales(x, w1, w2)
    return x * s.reshape(s.shape[0], s.shape[1], 1, 1)


def batch_norm(
    x: Tensor,
    gain: Tensor,
    bias: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    C = x.shape[1]
    g = gain.reshape(1, C, 1, 1)
    b = bias.reshape(1, C, 1, 1)
    if not training:
        scale = 1.0 / np.sqrt(running_var + eps)
        xhat = (x - running_mean.reshape(1, C, 1, 1).astype(x.dtype)) * scale.reshape(1, C, 1, 1).astype(x.dtype)
        return xhat * g + b
    out, mu, var = batch_norm_train(x, gain, bias, eps)
    n = x.shape[0] * x.shape[2] * x.shape[3]
    unbiased = var * (n / max(n - 1, 1))
    running_mean *= momentum
    running_mean += (1 - momentum) * mu
    running_var *= momentum
    running_var += (1 - momentum) * unbiased
    return out


def max_pool(x: Tensor, spec: tuple[int, int]) -> Tensor:
    """``(2, 1)`` halves height only and keeps the time axis intact."""
    return max_pool2d(x, spec)


def cnn_block(x: Tensor, p: CnnBlockParams, training: bool) -> Tensor:
    """Gated conv → BN → ReLU → MaxPool → SE."""
    y = full_gated_conv(x, p.conv_w, p.conv_b, p.gate_w, p.gate_b)
    y = batch_norm(y, p.bn_gain, p.bn_bias, p.bn_mean, p.bn_var, training)
    y = relu(y)
    y = max_pool(y, p.pool)
    return se_block(y, p.se_w1, p.se_w2)


# -- recurrent stage ------------------------------------------------------------

def lstm_cell(x_t: Tensor, h_prev: Tensor, c_prev: Tensor, p: LstmParams) -> tuple[Tensor, Tensor]:
    H = p.hidden
    if h_prev.shape[-1] != H or p.w.shape[0] != H + x_t.shape[-1]:
        raise ShapeError("lstm_cell dimensions are inconsistent")
    z = matmul(concat([h_prev, x_t], axis=-1), p.w) + p.b
    i = sigmoid(z[..., :H])
    f = sigmoid(z[..., H:2 * H])
    o = sigmoid(z[..., 2 * H:3 * H])
    c_hat = tanh(z[..., 3 * H:])
    c = f * c_prev + i * c_hat
    h = o * tanh(c)
    return h, c


def bilstm(x: Tensor, fwd: LstmParams, bwd: LstmParams) -> Tensor:
    """Bidirectional LSTM over ``x[T, B, D]`` returning ``[T, B, 2H]``.

    Both directions advance in lockstep as one batched recurrence; the
    backward direction reads the time-reversed input.
    """
    T, B, D = x.shape
    H = fwd.hidden
    if bwd.hidden != H:
        raise ShapeError("forward and backward LSTM widths differ")
    w_x = stack([fwd.w[H:], bwd.w[H:]])
    w_h = stack([fwd.w[:H], bwd.w[:H]])
    bias = stack([fwd.b, bwd.b]).reshape(2, 1, 4 * H)
    xs = stack([x, x[::-1]]).reshape(2, T * B, D)
    xw = (matmul(xs, w_x) + bias).reshape(2, T, B, 4 * H)
    h = Tensor(np.zeros((2, B, H), dtype=x.dtype))
    c = Tensor(np.zeros((2, B, H), dtype=x.dtype))
    hs = []
    for t in range(T):
        z = xw[:, t] + matmul(h, w_h)
        gates = sigmoid(z[..., :3 * H])
        c_hat = tanh(z[..., 3 * H:])
        c = gates[..., H:2 * H] * c + gates[..., :H] * c_hat
        h = gates[..., 2 * H:] * tanh(c)
        hs.append(h)
    seq = stack(hs, axis=1)  # 2,T,B,H
    return concat([seq[0], seq[1][::-1]], axis=-1)


# -- attention stage --------------------------------------------------------------

def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, T, D = x.shape
    return x.reshape(B, T, heads, D // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    B, h, T, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, h * dk)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """``softmax(Q Kᵀ / √d_k) V`` over the last two axes."""
    dk = q.shape[-1]
    scores = matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dk))
    weights = softmax(scores, axis=-1)
    return matmul(weights, v), weights


def _check_heads(width: int, heads: int) -> None:
    if heads < 1 or width % heads:
        raise ConfigError(f"width {width} is not divisible by {heads} heads")


def multi_head_attention(x: Tensor, p: AttentionParams) -> tuple[Tensor, np.ndarray]:
    """Self-attention over ``x[T, B, D]``; returns output and ``[B, h, T, T]`` weights."""
    _check_heads(x.shape[-1], p.heads)
    xb = x.transpose(1, 0, 2)
    q = _split_heads(matmul(xb, p.wq), p.heads)
    k = _split_heads(matmul(xb, p.wk), p.heads)
    v = _split_heads(matmul(xb, p.wv), p.heads)
    o, w = scaled_dot_attention(q, k, v)
    out = matmul(_merge_heads(o), p.wo)
    return out.transpose(1, 0, 2), w.data


def proxima_attention(x: Tensor, o_mha: Tensor, p: AttentionParams) -> tuple[Tensor, np.ndarray]:
    """Keys and values come from ``x``; queries are a learned projection of
    the multi-head stage's output, so they move with the first stage."""
    if x.shape != o_mha.shape:
        raise ShapeError(f"proxima inputs differ: {x.shape} vs {o_mha.shape}")
    _check_heads(x.shape[-1], p.heads)
    xb = x.transpose(1, 0, 2)
    q = _split_heads(matmul(o_mha.transpose(1, 0, 2), p.prox_wq), p.heads)
    k = _split_heads(matmul(xb, p.prox_wk), p.heads)
    v = _split_heads(matmul(xb, p.prox_wv), p.heads)
    o, w = scaled_dot_attention(q, k, v)
    return _merge_heads(o).transpose(1, 0, 2), w.data


def combined_attention(x: Tensor, p: AttentionParams) -> tuple[Tensor, dict[str, np.ndarray]]:
    """``LayerNorm(W_f [O_mha; O_proxima] + x)``."""
    o_mha, w_mha = multi_head_attention(x, p)
    o_prox, w_prox = proxima_attention(x, o_mha, p)
    fused = matmul(concat([o_mha, o_prox], axis=-1), p.fuse_w) + x
    return layer_norm(fused, p.ln_gain, p.ln_bias), {"mha": w_mha, "proxima": w_prox}
