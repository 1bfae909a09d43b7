"""Loss terms combined during teacher training and student distillation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .layers import ConfigError
from .numerics import NonFiniteError, Tensor, as_tensor, clamp_min, log, log_softmax, matmul, softmax

log_ = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
DEFAULT_TAU = 2.0
ALPHA_START, ALPHA_END = 0.7, 0.4
GAMMA_START, GAMMA_END = 0.2, 0.5
DELTA = 0.1


class ClampCounter:
    def __init__(self):
        self.count = 0


CLAMPED = ClampCounter()


@dataclass(frozen=True)
class LossWeights:
    alpha: float
    beta: float
    gamma: float
    delta: float

    def __post_init__(self):
        parts = (self.alpha, self.beta, self.gamma, self.delta)
        if any(not 0.0 <= w <= 1.0 for w in parts):
            raise ConfigError(f"loss weights must lie in [0, 1]: {parts}")
        if math.fsum(parts) != 1.0:
            raise ConfigError(f"loss weights must sum to 1: {parts}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.alpha, self.beta, self.gamma, self.delta)


def _weights_from(alpha: float, gamma: float, delta: float) -> LossWeights:
    exact = Fraction(1) - Fraction(alpha) - Fraction(gamma) - Fraction(delta)
    if abs(exact) < Fraction(1, 10**12):
        # beta is zero in exact arithmetic; give the rounding residue to gamma or alpha
        beta = 0.0
        if gamma > 0:
            gamma = _balance(alpha, float(Fraction(1) - Fraction(alpha) - Fraction(delta)), delta)
        else:
            alpha = float(Fraction(1) - Fraction(delta))
    else:
        beta = float(exact)
    return LossWeights(alpha, beta, gamma, delta)


def _balance(alpha: float, gamma: float, delta: float) -> float:
    """Nudge ``gamma`` by a few ulps so that both the exact sum and the
    left-to-right float sum of the weights equal 1."""
    for k in range(8):
        for cand in {gamma + k * math.ulp(gamma), gamma - k * math.ulp(gamma)}:
            if alpha + cand + delta == 1.0 and math.fsum((alpha, cand, delta)) == 1.0:
                return cand
    return gamma


def weight_schedule(epoch: int, total_epochs: int, kd: bool = True) -> LossWeights:
    """Linear move from ``(α, γ) = (0.7, 0.2)`` to ``(0.4, 0.5)`` with ``δ = 0.1``.

    Without distillation ``γ`` is zero and its share goes to ``α``.
    """
    if total_epochs <= 0:
        raise ConfigError("total_epochs must be positive")
    frac = min(max(epoch / total_epochs, 0.0), 1.0)
    alpha = ALPHA_START + frac * (ALPHA_END - ALPHA_START)
    gamma = GAMMA_START + frac * (GAMMA_END - GAMMA_START)
    if not kd:
        return _weights_from(alpha + gamma, 0.0, DELTA)
    return _weights_from(alpha, gamma, DELTA)


def _frame_mean(values: Tensor, mask: np.ndarray | None, reduction: str) -> Tensor:
    """Average ``values[T, B]`` over unmasked frames, per sample or overall."""
    T, B = values.shape
    m = np.ones((T, B), dtype=values.dtype) if mask is None else np.asarray(mask, dtype=values.dtype)
    if reduction == "none":
        counts = np.maximum(m.sum(axis=0), 1.0)
        return (values * m).sum(axis=0) * (1.0 / counts)
    return (values * m).sum() * (1.0 / max(float(m.sum()), 1.0))


def _pick(log_probs: Tensor, targets: np.ndarray) -> Tensor:
    T, B, V = log_probs.shape
    onehot = np.zeros((T, B, V), dtype=log_probs.dtype)
    np.put_along_axis(onehot, np.asarray(targets)[..., None], 1.0, axis=-1)
    return (log_probs * onehot).sum(axis=-1)


def ce_loss(probs: Tensor, targets: np.ndarray, mask: np.ndarray | None = None,
            reduction: str = "mean") -> Tensor:
    """Cross-entropy of frame-level class ``targets[T, B]`` under ``probs[T, B, V]``.

    Zero probabilities on the true class are floored at 1e-12 (and counted).
    """
    probs = as_tensor(probs)
    if probs.ndim == 2:
        probs = probs.reshape(probs.shape[0], 1, probs.shape[1])
        targets = np.asarray(targets).reshape(-1, 1)
        mask = None if mask is None else np.asarray(mask).reshape(-1, 1)
    true_p = np.take_along_axis(probs.data, np.asarray(targets)[..., None], axis=-1)
    n_low = int((true_p < PROB_FLOOR).sum())
    if n_low:
        CLAMPED.count += n_low
        log_.warning("clamped %d zero probabilities in cross-entropy", n_low)
    return _frame_mean(-_pick(log(clamp_min(probs, PROB_FLOOR)), targets), mask, reduction)


def nll_from_logits(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None,
                    reduction: str = "mean") -> Tensor:
    """Cross-entropy computed from raw logits (stable path used in training)."""
    return _frame_mean(-_pick(log_softmax(logits, -1), targets), mask, reduction)


def aux_loss(aux_probs: Tensor, targets: np.ndarray, mask: np.ndarray | None = None,
             reduction: str = "mean") -> Tensor:
    """Auxiliary-head cross-entropy; the same formula as :func:`ce_loss`."""
    return ce_loss(aux_probs, targets, mask, reduction)


def kl_div(p, q) -> float:
    """``Σ p log(p / q)`` along the last axis, summed over any leading axes."""
    p = np.asarray(p, dtype=np.float64)
    q = np.maximum(np.asarray(q, dtype=np.float64), PROB_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return float(terms.sum())


def interpolation_matrix(source_len: int, target_len: int, dtype=np.float64) -> np.ndarray:
    """``[target_len, source_len]`` weights for piecewise-linear resampling
    with endpoints aligned."""
    if source_len < 1 or target_len < 1:
        raise ConfigError("interpolation lengths must be at least 1")
    M = np.zeros((target_len, source_len), dtype=dtype)
    if source_len == 1:
        M[:, 0] = 1.0
        return M
    if target_len == 1:
        pos = np.array([(source_len - 1) / 2.0])
    else:
        pos = np.arange(target_len) * (source_len - 1) / (target_len - 1)
    lo = np.minimum(np.floor(pos).astype(int), source_len - 2)
    frac = pos - lo
    M[np.arange(target_len), lo] = 1.0 - frac
    M[np.arange(target_len), lo + 1] += frac
    return M


def interpolate_logits(z: Tensor, target_len: int) -> Tensor:
    """Resample ``z[T_s, ...]`` along time to ``target_len`` frames."""
    z = as_tensor(z)
    if target_len < 1:
        raise ConfigError("target length must be at least 1")
    Ts = z.shape[0]
    if Ts == target_len:
        return z
    M = Tensor(interpolation_matrix(Ts, target_len, z.dtype))
    rest = z.shape[1:]
    flat = z.reshape(Ts, int(np.prod(rest)) if rest else 1)
    return matmul(M, flat).reshape((target_len,) + rest)


def kd_loss(z_teacher, z_student: Tensor, tau: float = DEFAULT_TAU,
            mask: np.ndarray | None = None, reduction: str = "mean") -> Tensor:
    """``τ² · KL(softmax(z_T/τ) ‖ softmax(z_S/τ))`` averaged over frames.

    The teacher is the reference distribution and receives no gradient. The
    student's time axis is first interpolated to the teacher's length.
    """
    if not tau > 0 or not math.isfinite(tau):
        raise ConfigError(f"temperature must be positive and finite, got {tau}")
    zt = z_teacher.data if isinstance(z_teacher, Tensor) else np.asarray(z_teacher)
    zs = as_tensor(z_student)
    squeeze = zt.ndim == 2
    if squeeze:
        zt = zt[:, None, :]
        zs = zs.reshape(zs.shape[0], 1, zs.shape[1])
        mask = None if mask is None else np.asarray(mask).reshape(-1, 1)
    zs = interpolate_logits(zs, zt.shape[0])
    zt = zt.astype(zs.dtype)
    p_log = zt / tau - np.max(zt / tau, axis=-1, keepdims=True)
    p_log = p_log - np.log(np.exp(p_log).sum(axis=-1, keepdims=True))
    p = np.exp(p_log)
    q_log = log_softmax(zs * (1.0 / tau), -1)
    frame_kl = (Tensor((p * p_log).sum(axis=-1)) - (q_log * p).sum(axis=-1))
    return _frame_mean(frame_kl, mask, reduction) * (tau * tau)


def total_loss(parts: dict[str, Tensor], weights: LossWeights) -> Tensor:
    """``α·ctc + β·ce + γ·kd + δ·aux``; terms with zero weight may be omitted."""
    named = {"ctc": weights.alpha, "ce": weights.beta, "kd": weights.gamma, "aux": weights.delta}
    total = None
    for name, w in named.items():
        part = parts.get(name)
        if part is None:
            if w != 0.0:
                raise KeyError(f"loss part '{name}' is required by its weight {w}")
            continue
        part = as_tensor(part)
        if not np.isfinite(part.data).all():
            raise NonFiniteError(f"loss part '{name}' is not finite")
        term = part * w
        total = term if total is None else total + term
    if total is None:
        return Tensor(np.zeros(()))
    return total
