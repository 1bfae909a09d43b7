"""Training orchestration: curriculum stages, synthetic-data ramp, task
weighting, early stopping, Adam, and the teacher/student training loops."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .ctc import ctc_loss, viterbi_align_batch
from .data import Dataset, synthetic_count
from .distill import LossWeights, kd_loss, nll_from_logits, total_loss, weight_schedule
from .evaluation import metrics
from .layers import ConfigError
from .model import ModelConfig, ParameterStore, forward, init_params
from .numerics import NonFiniteError, Tape, Tensor, log_softmax

log = logging.getLogger(__name__)

R0, R_MAX = 0.1, 0.4
STAGE_THRESHOLD, STAGE_DELTA = 0.75, 0.05
MAX_STAGE = 5
PATIENCE, MIN_DELTA = 10, 1e-3
LR, BETA1, BETA2, ADAM_EPS, CLIP_NORM = 1e-3, 0.9, 0.999, 1e-8, 5.0
SYNTHETIC_TAG = "synthetic"


def synthetic_ratio(epoch: int, total_epochs: int, r0: float = R0, r_max: float = R_MAX) -> float:
    """Share of synthetic lines, ramped linearly from ``r0`` to ``r_max``."""
    if total_epochs <= 0:
        raise ConfigError("total_epochs must be positive")
    return min(r_max, r0 + (epoch / total_epochs) * (r_max - r0))


# -- curriculum --------------------------------------------------------------------

@dataclass(frozen=True)
class StageSpec:
    max_len: int | None
    synthetic: bool
    augmented: bool
    balanced: bool = False


# short clean lines → synthetic ramp → augmentation → long lines → balanced full mixture
STAGES = {
    1: StageSpec(max_len=3, synthetic=False, augmented=False),
    2: StageSpec(max_len=5, synthetic=True, augmented=False),
    3: StageSpec(max_len=5, synthetic=True, augmented=True),
    4: StageSpec(max_len=None, synthetic=True, augmented=True),
    5: StageSpec(max_len=None, synthetic=True, augmented=True, balanced=True),
}


@dataclass(frozen=True)
class TrainState:
    epoch: int = 0
    total_epochs: int = 30
    stage: int = 1
    threshold: float = STAGE_THRESHOLD
    delta_t: float = STAGE_DELTA
    ratio: float = R0
    weights: LossWeights = field(default_factory=lambda: weight_schedule(0, 1))
    best_val: float = math.inf
    best_epoch: int = -1
    patience: int = 0
    stopped: bool = False
    seed: int = 0


def acp_step(state: TrainState, performance: float) -> TrainState:
    """Advance the curriculum when ``performance`` beats the threshold.

    Performance is ``1 - CER`` on validation data. Stage 5 is absorbing.
    """
    if not math.isfinite(performance):
        raise ValueError("performance must be finite")
    if performance > state.threshold and state.stage < MAX_STAGE:
        return replace(state, stage=state.stage + 1, threshold=state.threshold + state.delta_t)
    return state


def early_stop(state: TrainState, val_loss: float, patience: int = PATIENCE,
               min_delta: float = MIN_DELTA) -> tuple[TrainState, bool]:
    """Track the best validation loss; stop after ``patience`` consecutive
    epochs whose gain over the previous best is not larger than ``min_delta``.

    Improvements equal to ``min_delta`` up to float rounding do not count.
    """
    gain = state.best_val - val_loss
    improved = gain > min_delta and not math.isclose(gain, min_delta, rel_tol=1e-9, abs_tol=1e-15)
    if val_loss < state.best_val:
        # the best is always tracked; only a large enough gain resets patience
        state = replace(state, best_val=val_loss, best_epoch=state.epoch)
    state = replace(state, patience=0 if improved else min(state.patience + 1, patience))
    stop = state.patience >= patience
    return replace(state, stopped=stop), stop


# -- task weighting ------------------------------------------------------------------

def task_weights(cers: dict[str, float], mode: str = "harder") -> dict[str, float]:
    """Per-source weights ``λ_k``: proportional to validation CER ("harder")
    or equal ("uniform"). All-zero CERs fall back to equal weights."""
    if not cers:
        raise ConfigError("no tasks")
    if mode not in ("harder", "uniform"):
        raise ConfigError(f"unknown task weighting {mode!r}")
    vals = np.array([max(float(c), 0.0) for c in cers.values()])
    if mode == "uniform" or vals.sum() == 0:
        vals = np.ones(len(cers))
    vals = vals / vals.sum()
    return dict(zip(cers, vals.tolist()))


def multitask_loss(losses: dict[str, Tensor | float], weights: dict[str, float]) -> Tensor:
    """``Σ λ_k L_k`` over the tasks present, weights renormalised to sum to 1."""
    lam = {k: float(weights.get(k, 0.0)) for k in losses}
    if any(v < 0 for v in lam.values()):
        raise ConfigError("task weights must be non-negative")
    s = sum(lam.values())
    if s <= 0:
        raise ConfigError("task weights are all zero")
    total = None
    for k, loss in losses.items():
        term = (loss if isinstance(loss, Tensor) else Tensor(np.asarray(loss, dtype=np.float64))) * (lam[k] / s)
        total = term if total is None else total + term
    return total


def _sample_coefficients(sources: Sequence[str], weights: dict[str, float]) -> np.ndarray:
    """Per-sample factors so that a weighted sum equals ``Σ λ_k mean_k``."""
    present = list(dict.fromkeys(sources))
    lam = {k: float(weights.get(k, 0.0)) for k in present}
    s = sum(lam.values())
    if s <= 0:
        lam = {k: 1.0 for k in present}
        s = float(len(present))
    counts = {k: sum(1 for x in sources if x == k) for k in present}
    return np.array([lam[k] / s / counts[k] for k in sources])


# -- optimiser -----------------------------------------------------------------------

class Adam:
    """Adam with global gradient-norm clipping; non-finite gradients skip the step."""

    def __init__(self, lr: float = LR, beta1: float = BETA1, beta2: float = BETA2,
                 eps: float = ADAM_EPS, clip: float | None = CLIP_NORM):
        self.lr, self.beta1, self.beta2, self.eps, self.clip = lr, beta1, beta2, eps, clip
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0
        self.skipped = 0
        self.last_norm = 0.0

    def step(self, params: Sequence[tuple[str, Tensor]], grads: dict[str, np.ndarray] | None = None) -> bool:
        """Update ``params`` in place from ``grads`` (default: each ``.grad``)."""
        g = {n: (grads[n] if grads is not None else p.grad) for n, p in params}
        g = {n: (np.zeros_like(p.data) if g[n] is None else g[n]) for n, p in params}
        sq = math.fsum(float(np.sum(np.square(x, dtype=np.float64))) for x in g.values())
        norm = math.sqrt(sq) if math.isfinite(sq) else math.inf
        self.last_norm = norm
        if not all(np.isfinite(x).all() for x in g.values()):
            self.skipped += 1
            log.warning("skipping optimiser step with non-finite gradients (%d so far)", self.skipped)
            return False
        scale = self.clip / norm if self.clip is not None and norm > self.clip else 1.0
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for n, p in params:
            gi = g[n] * scale
            m = self.m.setdefault(n, np.zeros_like(p.data))
            v = self.v.setdefault(n, np.zeros_like(p.data))
            m *= self.beta1
            m += (1 - self.beta1) * gi
            v *= self.beta2
            v += (1 - self.beta2) * gi * gi
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
        return True


def optimizer_step(params: Sequence[tuple[str, Tensor]], grads: dict[str, np.ndarray] | None,
                   lr: float, opt: Adam | None = None) -> Adam:
    """One Adam step at learning rate ``lr``; returns the optimiser for chaining."""
    opt = opt or Adam(lr=lr)
    opt.lr = lr
    opt.step(params, grads)
    return opt


# -- networks and epochs -----------------------------------------------------------------

@dataclass
class Network:
    config: ModelConfig
    params: ParameterStore

    @classmethod
    def create(cls, config: ModelConfig, seed: int) -> "Network":
        return cls(config, init_params(config, seed))

    def __call__(self, images, training: bool = False):
        return forward(self.config, self.params, images, training)

    def logits(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Inference logits ``[T, N, V]`` (batch-norm in eval mode)."""
        outs = [self(images[i:i + batch_size]).logits.data for i in range(0, len(images), batch_size)]
        return np.concatenate(outs, axis=1)

    def log_probs(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        return log_softmax(Tensor(self.logits(images, batch_size)), -1).data


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = LR
    clip: float = CLIP_NORM
    tau: float = 2.0
    kd: bool = False
    r0: float = R0
    r_max: float = R_MAX
    stage_threshold: float = STAGE_THRESHOLD
    stage_delta: float = STAGE_DELTA
    patience: int = PATIENCE
    min_delta: float = MIN_DELTA
    task_weighting: str = "harder"
    curriculum: bool = True
    seed: int = 0


@dataclass
class Pools:
    """Everything an epoch may draw from.

    ``augmented`` holds one pre-augmented copy of each real training image;
    ``teacher_lp`` optionally caches the frozen teacher's logits for the real,
    augmented and synthetic images.
    """

    real: Dataset
    augmented: np.ndarray | None = None
    synthetic: Dataset | None = None
    teacher_real: np.ndarray | None = None
    teacher_aug: np.ndarray | None = None
    teacher_syn: np.ndarray | None = None


@dataclass
class EpochData:
    images: np.ndarray
    targets: list[list[int]]
    sources: list[str]
    teacher: np.ndarray | None  # [T, N, V] cached teacher logits


def _length_ok(texts: Sequence[str], max_len: int | None) -> np.ndarray:
    return np.array([max_len is None or len(t) <= max_len for t in texts], dtype=bool)


def update_curriculum(pools: Pools, state: TrainState, rng: np.random.Generator,
                      curriculum: bool = True) -> EpochData:
    """Assemble the epoch's lines for the current stage and synthetic ratio."""
    spec = STAGES[state.stage] if curriculum else STAGES[MAX_STAGE]
    real = pools.real
    idx = np.flatnonzero(_length_ok(real.texts, spec.max_len))
    imgs = real.images[idx]
    teacher = None if pools.teacher_real is None else pools.teacher_real[:, idx]
    if spec.augmented and pools.augmented is not None:
        use_aug = rng.random(len(idx)) < 0.5
        imgs = np.where(use_aug[:, None, None], pools.augmented[idx], imgs)
        if teacher is not None:
            teacher = np.where(use_aug[None, :, None], pools.teacher_aug[:, idx], teacher)
    targets = [real.targets[i] for i in idx]
    sources = [real.sources[i] for i in idx]
    weights = real.weights[idx]
    if spec.synthetic and pools.synthetic is not None:
        syn = pools.synthetic
        ok = np.flatnonzero(_length_ok(syn.texts, spec.max_len))
        k = min(synthetic_count(len(idx), state.ratio), len(ok))
        pick = np.sort(rng.permutation(ok)[:k])
        imgs = np.concatenate([imgs, syn.images[pick]])
        targets += [syn.targets[i] for i in pick]
        sources += [SYNTHETIC_TAG] * k
        weights = np.concatenate([weights, syn.weights[pick]])
        if teacher is not None:
            teacher = np.concatenate([teacher, pools.teacher_syn[:, pick]], axis=1)
    if spec.balanced:
        # oversample lines in proportion to their rarest character's weight
        order = np.sort(rng.choice(len(targets), size=len(targets), replace=True, p=weights / weights.sum()))
    else:
        order = np.arange(len(targets))
    return EpochData(imgs[order], [targets[i] for i in order], [sources[i] for i in order],
                     None if teacher is None else teacher[:, order])


@dataclass
class EpochMetrics:
    ctc: float
    ce: float
    kd: float
    aux: float
    total: float
    val_cer: float
    val_wer: float
    val_ser: float
    val_loss: float
    stage_cer: float
    task_cer: dict[str, float]
    batches: int
    skipped: int


def greedy_texts(lp: np.ndarray, decode: Callable[[list[int]], str]) -> list[str]:
    """Greedy transcription of every column of ``lp[T, N, V]``."""
    from .ctc import collapse

    best = lp.argmax(axis=-1)
    return [decode(collapse(best[:, i])) for i in range(best.shape[1])]


def validate(net: Network, val: Dataset, decode: Callable[[list[int]], str],
             max_len: int | None = None, batch_size: int = 64):
    """CER/WER/SER on the validation lines, mean CTC loss, stage-subset CER and
    per-source CER."""
    lp = net.log_probs(val.images, batch_size)
    hyps = greedy_texts(lp, decode)
    rep = metrics(val.texts, hyps)
    loss = float(ctc_loss(Tensor(lp), val.targets, skip_infeasible=True).data.mean())
    keep = _length_ok(val.texts, max_len)
    stage_cer = metrics([t for t, k in zip(val.texts, keep) if k],
                        [h for h, k in zip(hyps, keep) if k]).cer if keep.any() else rep.cer
    per_source = {}
    for s in dict.fromkeys(val.sources):
        sel = [i for i, x in enumerate(val.sources) if x == s]
        per_source[s] = metrics([val.texts[i] for i in sel], [hyps[i] for i in sel]).cer
    return rep, loss, stage_cer, per_source


def utf_epoch(teacher: Network | None, student: Network, pools: Pools, val: Dataset,
              state: TrainState, cfg: TrainConfig, opt: Adam, lam: dict[str, float],
              decode: Callable[[list[int]], str]) -> tuple[TrainState, EpochMetrics]:
    """One epoch of the unified loop; ``teacher`` is frozen (or ``None`` when
    training without distillation)."""
    rng = np.random.default_rng([cfg.seed, state.epoch])
    weights = weight_schedule(state.epoch, state.total_epochs, kd=cfg.kd)
    ratio = synthetic_ratio(state.epoch, state.total_epochs, cfg.r0, cfg.r_max)
    state = replace(state, weights=weights, ratio=ratio)
    data = update_curriculum(pools, state, rng, cfg.curriculum)
    if cfg.kd and teacher is None and data.teacher is None:
        raise ConfigError("distillation needs a teacher or cached teacher logits")
    n = len(data.targets)
    perm = rng.permutation(n)
    sums = dict(ctc=0.0, ce=0.0, kd=0.0, aux=0.0, total=0.0)
    batches = 0
    for start in range(0, n, cfg.batch_size):
        bi = np.sort(perm[start:start + cfg.batch_size])
        x = data.images[bi]
        targets = [data.targets[i] for i in bi]
        sources = [data.sources[i] for i in bi]
        z_t = None
        if cfg.kd:
            z_t = data.teacher[:, bi] if data.teacher is not None else teacher(x).logits.data
        student.params.zero_grad()
        with Tape() as tape:
            out = student(x, training=True)
            frames = viterbi_align_batch(log_softmax(Tensor(out.logits.data.astype(np.float64)), -1).data, targets)
            parts = {"ctc": ctc_loss(out.logits, targets, skip_infeasible=True),
                     "aux": nll_from_logits(out.aux_logits, frames, reduction="none")}
            if weights.beta:
                parts["ce"] = nll_from_logits(out.logits, frames, reduction="none")
            if weights.gamma:
                parts["kd"] = kd_loss(z_t, out.logits, cfg.tau, reduction="none")
            try:
                per_sample = total_loss(parts, weights)
            except NonFiniteError as e:
                raise NonFiniteError(f"epoch {state.epoch} batch {batches}: {e}") from e
            coef = Tensor(_sample_coefficients(sources, lam).astype(per_sample.dtype))
            loss = (per_sample * coef).sum()
        tape.backward(loss)
        opt.step(student.params.trainable())
        for k, v in parts.items():
            sums[k] += float(v.data.mean())
        sums["total"] += float(loss.data)
        batches += 1
    spec = STAGES[state.stage] if cfg.curriculum else STAGES[MAX_STAGE]
    rep, vloss, stage_cer, per_source = validate(student, val, decode, spec.max_len)
    mean = {k: v / max(batches, 1) for k, v in sums.items()}
    m = EpochMetrics(mean["ctc"], mean["ce"], mean["kd"], mean["aux"], mean["total"], rep.cer, rep.wer,
                     rep.ser, vloss, stage_cer, per_source, batches, opt.skipped)
    return state, m


def log_record(state: TrainState, m: EpochMetrics, seconds: float) -> dict:
    w = state.weights
    return {
        "epoch": state.epoch, "stage": state.stage, "r_s": state.ratio,
        "alpha": w.alpha, "beta": w.beta, "gamma": w.gamma, "delta": w.delta,
        "loss_ctc": m.ctc, "loss_ce": m.ce, "loss_kd": m.kd, "loss_aux": m.aux, "loss_total": m.total,
        "val_cer": m.val_cer, "val_wer": m.val_wer, "val_ser": m.val_ser, "val_loss": m.val_loss,
        "seconds": seconds,
    }


@dataclass
class TrainResult:
    net: Network
    best: ParameterStore
    log: list[dict]
    state: TrainState


def train(student: Network, pools: Pools, val: Dataset, cfg: TrainConfig,
          decode: Callable[[list[int]], str], teacher: Network | None = None,
          log_path: str | Path | None = None) -> TrainResult:
    """Alg.-4-style loop: curriculum update, batches, validation, stage
    advance, task re-weighting and early stopping. Returns the best-validation
    parameters alongside the final ones."""
    state = TrainState(total_epochs=cfg.epochs, threshold=cfg.stage_threshold,
                       delta_t=cfg.stage_delta, seed=cfg.seed, ratio=cfg.r0)
    opt = Adam(lr=cfg.lr, clip=cfg.clip)
    tasks = sorted(set(pools.real.sources))
    lam = task_weights({k: 1.0 for k in tasks}, "uniform")
    lam[SYNTHETIC_TAG] = float(np.mean(list(lam.values())))
    records: list[dict] = []
    best = student.params.copy()
    fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            state = replace(state, epoch=epoch)
            state, m = utf_epoch(teacher, student, pools, val, state, cfg, opt, lam, decode)
            rec = log_record(state, m, time.perf_counter() - t0)
            records.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
                fh.flush()
            log.info("epoch %d stage %d val_cer %.4f", epoch, state.stage, m.val_cer)
            if cfg.curriculum:
                state = acp_step(state, 1.0 - m.stage_cer)
            lam = task_weights({k: m.task_cer.get(k, 0.0) for k in tasks}, cfg.task_weighting)
            lam[SYNTHETIC_TAG] = float(np.mean(list(lam.values())))
            prev_best = state.best_val
            state, stop = early_stop(state, m.val_loss, cfg.patience, cfg.min_delta)
            if state.best_val != prev_best:
                best = student.params.copy()
            if stop:
                break
    finally:
        if fh:
            fh.close()
    return TrainResult(student, best, records, state)
