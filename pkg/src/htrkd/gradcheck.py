"""Finite-difference checks for every differentiable building block."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import layers as L
from .ctc import ctc_loss
from .distill import ce_loss, kd_loss
from .model import TINY, forward, init_params
from .numerics import Tensor, grad_check, layer_norm, max_pool2d, softmax

TOL = 1e-4
MODEL_TOL = 1e-3


def _t(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale)


def _weighted_sum(rng, shape) -> Callable[[Tensor], Tensor]:
    """Random projection to a scalar so every output coordinate matters."""
    w = Tensor(rng.standard_normal(shape))
    return lambda y: (y * w).sum()


def _attention_params(rng, D, heads) -> list[Tensor]:
    shapes = [(D, D)] * 7 + [(2 * D, D), (D,), (D,)]
    return [_t(rng, *s, scale=0.5) for s in shapes]


def _att(ps, heads) -> L.AttentionParams:
    return L.AttentionParams(*ps, heads=heads)


def gradient_cases(rng: np.random.Generator) -> list[tuple[str, Callable[[], float], float]]:
    """``(name, run, tolerance)`` triples; ``run()`` returns the max relative error."""
    cases = []

    def add(name, f, xs, tol=TOL, max_coords=None):
        cases.append((name, lambda: grad_check(f, xs, max_coords=max_coords, rng=rng), tol))

    x4 = _t(rng, 2, 2, 4, 6)
    proj = _weighted_sum(rng, (2, 3, 4, 6))
    add("full_gated_conv", lambda x, w1, b1, w2, b2: proj(L.full_gated_conv(x, w1, b1, w2, b2)),
        [x4, _t(rng, 3, 2, 3, 3), _t(rng, 3), _t(rng, 3, 2, 3, 3), _t(rng, 3)])

    proj_se = _weighted_sum(rng, (2, 4, 3, 5))
    add("se_block", lambda x, w1, w2: proj_se(L.se_block(x, w1, w2)),
        [_t(rng, 2, 4, 3, 5), _t(rng, 2, 4), _t(rng, 4, 2)])

    proj_pool = _weighted_sum(rng, (2, 2, 2, 3))
    add("max_pool", lambda x: proj_pool(max_pool2d(x, (2, 2))), [_t(rng, 2, 2, 3, 5)])

    proj_bn = _weighted_sum(rng, (3, 2, 2, 3))
    add("batch_norm", lambda x, g, b: proj_bn(L.batch_norm(x, g, b, np.zeros(2), np.ones(2), True)),
        [_t(rng, 3, 2, 2, 3), _t(rng, 2), _t(rng, 2)])

    H, D = 3, 2
    proj_h = _weighted_sum(rng, (2, H))

    def cell(x, h, c, w, b):
        h1, c1 = L.lstm_cell(x, h, c, L.LstmParams(w, b))
        return proj_h(h1) + (c1 * c1).sum()

    add("lstm_cell", cell, [_t(rng, 2, D), _t(rng, 2, H), _t(rng, 2, H), _t(rng, H + D, 4 * H), _t(rng, 4 * H)])

    proj_bi = _weighted_sum(rng, (4, 2, 2 * H))
    add("bilstm", lambda x, wf, bf, wb, bb: proj_bi(L.bilstm(x, L.LstmParams(wf, bf), L.LstmParams(wb, bb))),
        [_t(rng, 4, 2, D), _t(rng, H + D, 4 * H), _t(rng, 4 * H), _t(rng, H + D, 4 * H), _t(rng, 4 * H)])

    T, B, Dm, heads = 3, 2, 4, 2
    proj_a = _weighted_sum(rng, (T, B, Dm))
    ap = _attention_params(rng, Dm, heads)
    add("multi_head_attention", lambda x, *ps: proj_a(L.multi_head_attention(x, _att(ps, heads))[0]),
        [_t(rng, T, B, Dm)] + ap)
    add("proxima_attention", lambda x, o, *ps: proj_a(L.proxima_attention(x, o, _att(ps, heads))[0]),
        [_t(rng, T, B, Dm), _t(rng, T, B, Dm)] + ap)
    add("combined_attention", lambda x, *ps: proj_a(L.combined_attention(x, _att(ps, heads))[0]),
        [_t(rng, T, B, Dm)] + ap)

    proj_ln = _weighted_sum(rng, (3, 5))
    add("layer_norm", lambda x, g, b: proj_ln(layer_norm(x, g, b)), [_t(rng, 3, 5), _t(rng, 5), _t(rng, 5)])

    tgt = rng.integers(0, 4, size=(3, 2))
    add("ce_loss", lambda z: ce_loss(softmax(z, -1), tgt), [_t(rng, 3, 2, 4)])

    zt = rng.standard_normal((5, 2, 4))
    add("kd_loss", lambda z: kd_loss(zt, z, 2.0), [_t(rng, 3, 2, 4)])

    targets = [[1, 2], [3]]
    add("ctc_loss", lambda z: ctc_loss(z, targets).sum(), [_t(rng, 4, 2, 4)])

    store = init_params(TINY, seed=int(rng.integers(1 << 31)))
    names = [n for n, _ in store.trainable()]
    images = rng.uniform(-1, 1, size=(2, TINY.height, TINY.width))
    model_targets = [[1, 2], [3]]

    def model_loss(*ps):
        s = store.copy()
        for n, p in zip(names, ps):
            s._t[n] = p
        out = forward(TINY, s, images, training=True)
        return ctc_loss(out.logits, model_targets).sum() + (out.aux_logits * 0.1).sum()

    add("tiny_model", model_loss, [Tensor(store[n].data.copy()) for n in names], MODEL_TOL, max_coords=6)
    return cases
