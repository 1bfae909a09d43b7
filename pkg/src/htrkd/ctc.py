"""Connectionist temporal classification: path probability, loss with its
analytic gradient, and decoding.

All lattices are log-probabilities with time on the first axis. Token id 0 is
the blank.
"""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .numerics import Tensor, make_op

log = logging.getLogger(__name__)

BLANK = 0
DEFAULT_BEAM_WIDTH = 10
NEG_INF = -np.inf


class InfeasibleTargetError(ValueError):
    """The target cannot be emitted within the available frames."""


class DecoderConfigError(ValueError):
    pass


def collapse(path: Sequence[int], blank: int = BLANK) -> list[int]:
    """Merge repeated ids, then drop blanks."""
    out: list[int] = []
    prev = None
    for p in path:
        p = int(p)
        if p != prev and p != blank:
            out.append(p)
        prev = p
    return out


def min_frames(target: Sequence[int]) -> int:
    """Frames needed to emit ``target``: one per label plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _lse(*arrays: np.ndarray) -> np.ndarray:
    m = arrays[0]
    for a in arrays[1:]:
        m = np.maximum(m, a)
    safe = np.where(np.isfinite(m), m, 0.0)
    total = sum(np.exp(a - safe) for a in arrays)
    with np.errstate(divide="ignore"):
        return np.log(total) + safe


def _extended(targets: Sequence[Sequence[int]], blank: int):
    B = len(targets)
    L = max((len(t) for t in targets), default=0)
    S = 2 * L + 1
    ext = np.full((B, S), blank, dtype=np.int64)
    valid = np.zeros((B, S), dtype=bool)
    skip = np.zeros((B, S), dtype=bool)
    for b, tgt in enumerate(targets):
        n = len(tgt)
        ext[b, 1:2 * n:2] = tgt
        valid[b, :2 * n + 1] = True
        for s in range(3, 2 * n, 2):
            skip[b, s] = ext[b, s] != ext[b, s - 2]
    return ext, valid, skip


def forward_backward(log_probs: np.ndarray, targets: Sequence[Sequence[int]],
                     lengths: Sequence[int] | None = None, blank: int = BLANK):
    """Log-space forward and backward variables for a batch.

    ``log_probs`` is ``[T, B, V]``. Returns ``(log_alpha, log_beta, log_p, ext)``
    where ``log_alpha + log_beta`` at ``(t, b, s)`` is the log mass of all
    valid paths through state ``s`` at frame ``t``.
    """
    T, B, _ = log_probs.shape
    lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
    ext, valid, skip = _extended(targets, blank)
    S = ext.shape[1]
    rows = np.arange(B)[:, None]
    emit = log_probs.transpose(1, 0, 2)[rows, :, ext].transpose(2, 0, 1)  # T,B,S
    emit = np.where(valid[None], emit, NEG_INF)

    alpha = np.full((T, B, S), NEG_INF)
    alpha[0, :, 0] = emit[0, :, 0]
    if S > 1:
        alpha[0, :, 1] = emit[0, :, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        shift1 = np.concatenate([np.full((B, 1), NEG_INF), prev[:, :-1]], axis=1)
        shift2 = np.concatenate([np.full((B, 2), NEG_INF), prev[:, :-2]], axis=1)[:, :S]
        shift2 = np.where(skip, shift2, NEG_INF)
        new = _lse(prev, shift1, shift2) + emit[t]
        alpha[t] = np.where((t < lengths)[:, None], new, prev)

    n_states = np.array([2 * len(t) + 1 for t in targets])
    last = alpha[T - 1]
    end_a = last[np.arange(B), n_states - 1]
    end_b = np.where(n_states > 1, last[np.arange(B), np.maximum(n_states - 2, 0)], NEG_INF)
    log_p = _lse(end_a, end_b)

    beta = np.full((T, B, S), NEG_INF)
    final = np.full((B, S), NEG_INF)
    final[np.arange(B), n_states - 1] = 0.0
    final[np.arange(B), np.maximum(n_states - 2, 0)] = np.where(
        n_states > 1, 0.0, final[np.arange(B), np.maximum(n_states - 2, 0)])
    skip_next = np.concatenate([skip[:, 2:], np.zeros((B, 2), dtype=bool)], axis=1)[:, :S]
    for t in range(T - 1, -1, -1):
        if t == T - 1:
            rec = np.full((B, S), NEG_INF)
        else:
            nxt = beta[t + 1] + emit[t + 1]
            shift1 = np.concatenate([nxt[:, 1:], np.full((B, 1), NEG_INF)], axis=1)
            shift2 = np.concatenate([nxt[:, 2:], np.full((B, 2), NEG_INF)], axis=1)[:, :S]
            shift2 = np.where(skip_next, shift2, NEG_INF)
            rec = _lse(nxt, shift1, shift2)
        at_end = (t == lengths - 1)[:, None]
        beyond = (t > lengths - 1)[:, None]
        beta[t] = np.where(at_end, final, np.where(beyond, NEG_INF, rec))
        beta[t] = np.where(valid, beta[t], NEG_INF)
    return alpha, beta, log_p, ext


def ctc_log_prob(log_probs: np.ndarray, target: Sequence[int], blank: int = BLANK) -> float:
    """``log p(target | lattice)`` for a single ``[T, V]`` lattice; ``-inf`` if
    the target needs more frames than available."""
    lp = np.asarray(log_probs, dtype=np.float64)
    if min_frames(target) > lp.shape[0]:
        return NEG_INF
    _, _, log_p, _ = forward_backward(lp[:, None, :], [list(target)], blank=blank)
    return float(log_p[0])


def _posterior_grad(log_probs, alpha, beta, log_p, ext, lengths):
    """Gradient of ``-log p`` w.r.t. pre-softmax logits, per sample."""
    T, B, V = log_probs.shape
    occ = np.exp(alpha + beta - log_p[None, :, None])  # T,B,S
    occ = np.nan_to_num(occ, nan=0.0)
    post = np.zeros((T, B, V))
    t_idx = np.arange(T)[:, None, None]
    b_idx = np.arange(B)[None, :, None]
    np.add.at(post, (t_idx, b_idx, ext[None, :, :]), occ)
    grad = np.exp(log_probs) - post
    mask = (np.arange(T)[:, None] < np.asarray(lengths)[None, :])
    return grad * mask[:, :, None]


def ctc_loss_and_grad(logits: np.ndarray, target: Sequence[int], blank: int = BLANK) -> tuple[float, np.ndarray]:
    """Loss ``-log p(target)`` and its gradient for raw ``[T, V]`` logits."""
    z = np.asarray(logits, dtype=np.float64)
    lp = z - logsumexp(z, axis=-1, keepdims=True)
    if min_frames(target) > z.shape[0]:
        raise InfeasibleTargetError(f"target of length {len(target)} needs {min_frames(target)} frames, have {z.shape[0]}")
    a, b, log_p, ext = forward_backward(lp[:, None, :], [list(target)], blank=blank)
    g = _posterior_grad(lp[:, None, :], a, b, log_p, ext, [z.shape[0]])
    return float(-log_p[0]), g[:, 0, :]


class SkipCounter:
    """Counts infeasible targets skipped during training."""

    def __init__(self):
        self.count = 0


SKIPPED = SkipCounter()


def ctc_loss(logits: Tensor, targets: Sequence[Sequence[int]], lengths: Sequence[int] | None = None,
             skip_infeasible: bool = False, blank: int = BLANK) -> Tensor:
    """Per-sample CTC loss for ``logits[T, B, V]`` as a ``[B]`` tensor.

    The gradient is the closed-form posterior expression, not replayed
    through the softmax. With ``skip_infeasible`` an unattainable target
    yields zero loss and zero gradient and is counted in ``SKIPPED``.
    """
    z = logits.data
    T, B, V = z.shape
    lengths = [T] * B if lengths is None else [int(n) for n in lengths]
    z64 = z.astype(np.float64)
    lp = z64 - logsumexp(z64, axis=-1, keepdims=True)
    feasible = np.array([min_frames(t) <= n for t, n in zip(targets, lengths)])
    if not feasible.all():
        bad = int(np.flatnonzero(~feasible)[0])
        if not skip_infeasible:
            raise InfeasibleTargetError(f"sample {bad}: target needs {min_frames(targets[bad])} frames, have {lengths[bad]}")
        SKIPPED.count += int((~feasible).sum())
        log.warning("skipping %d infeasible CTC targets", int((~feasible).sum()))
    safe_targets = [list(t) if ok else [] for t, ok in zip(targets, feasible)]
    a, b, log_p, ext = forward_backward(lp, safe_targets, lengths, blank)
    grad = _posterior_grad(lp, a, b, log_p, ext, lengths) * feasible[None, :, None]
    loss = np.where(feasible, -log_p, 0.0).astype(z.dtype)

    def backward(g):
        return ((grad * g[None, :, None]).astype(z.dtype),)

    return make_op("ctc_loss", loss, (logits,), backward)


def viterbi_align_batch(log_probs: np.ndarray, targets: Sequence[Sequence[int]],
                        blank: int = BLANK) -> np.ndarray:
    """Most probable frame labelling emitting each target, as ``[T, B]`` ids.

    ``log_probs`` is ``[T, B, V]``; every target must fit in ``T`` frames.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    T, B, _ = lp.shape
    for tgt in targets:
        if min_frames(tgt) > T:
            raise InfeasibleTargetError("target does not fit the lattice")
    ext, valid, skip = _extended([list(t) for t in targets], blank)
    S = ext.shape[1]
    rows = np.arange(B)
    emit = lp.transpose(1, 0, 2)[rows[:, None], :, ext].transpose(2, 0, 1)  # T,B,S
    emit = np.where(valid[None], emit, NEG_INF)
    score = np.full((B, S), NEG_INF)
    score[:, 0] = emit[0, :, 0]
    if S > 1:
        score[:, 1] = emit[0, :, 1]
    back = np.zeros((T, B, S), dtype=np.int64)
    for t in range(1, T):
        c1 = np.concatenate([np.full((B, 1), NEG_INF), score[:, :-1]], axis=1)
        c2 = np.concatenate([np.full((B, 2), NEG_INF), score[:, :-2]], axis=1)[:, :S]
        cand = np.stack([score, c1, np.where(skip, c2, NEG_INF)])
        choice = cand.argmax(axis=0)
        back[t] = choice
        score = np.take_along_axis(cand, choice[None], axis=0)[0] + emit[t]
    n_states = np.array([2 * len(t) + 1 for t in targets])
    last = n_states - 1
    prev = np.maximum(n_states - 2, 0)
    s = np.where((n_states > 1) & (score[rows, prev] > score[rows, last]), prev, last)
    path = np.empty((T, B), dtype=np.int64)
    for t in range(T - 1, -1, -1):
        path[t] = ext[rows, s]
        s = s - back[t, rows, s]
    return path


def viterbi_align(log_probs: np.ndarray, target: Sequence[int], blank: int = BLANK) -> np.ndarray:
    """Most probable frame-level path emitting ``target`` (ids per frame)."""
    lp = np.asarray(log_probs, dtype=np.float64)
    return viterbi_align_batch(lp[:, None, :], [list(target)], blank)[:, 0]


# -- decoding ----------------------------------------------------------------

def _alphabet_decode(ids: Sequence[int], charset) -> str:
    if hasattr(charset, "decode"):
        return charset.decode(ids)
    return "".join(charset[i] for i in ids)


def greedy_decode(log_probs: np.ndarray, charset) -> str:
    """Per-frame argmax (lowest id wins ties), then collapse.

    ``charset`` is a :class:`~htrkd.data.Charset` or any sequence mapping id to
    character (index 0 unused).
    """
    path = np.argmax(np.asarray(log_probs), axis=-1)
    return _alphabet_decode(collapse(path), charset)


def beam_search(log_probs: np.ndarray, width: int = DEFAULT_BEAM_WIDTH) -> list[tuple[tuple[int, ...], float]]:
    """Prefix beam search returning ranked ``(prefix, log score)`` pairs.

    Each beam entry is a prefix together with whether its last frame was a
    blank; entries reaching the same state are merged by log-sum-exp and the
    ``width`` best entries survive each frame. A prefix's score is the merged
    mass of its blank- and label-ending entries. Width 1 therefore follows
    the best single path exactly.
    """
    if width < 1:
        raise DecoderConfigError("beam width must be at least 1")
    lp = np.asarray(log_probs, dtype=np.float64)
    T, V = lp.shape
    # state key: (prefix, last) where last is 0 for blank-ending, else the last label id
    beam: list[tuple[tuple[tuple[int, ...], int], float]] = [(((), BLANK), 0.0)]
    candidates: dict = {}
    for t in range(T):
        candidates = {}
        order: list = []
        row = lp[t]
        for (prefix, last), score in beam:
            for k in range(V):
                if k == BLANK:
                    key = (prefix, BLANK)
                elif k == last:
                    key = (prefix, k)
                else:
                    key = (prefix + (k,), k)
                s = score + row[k]
                if key in candidates:
                    candidates[key] = float(np.logaddexp(candidates[key], s))
                else:
                    candidates[key] = s
                    order.append(key)
        ranked = sorted(order, key=lambda key: -candidates[key])
        beam = [(key, candidates[key]) for key in ranked[:width]]
    keep = {prefix for (prefix, _), _ in beam}
    totals: dict[tuple[int, ...], float] = {}
    for (prefix, _), s in candidates.items():
        if prefix in keep:
            totals[prefix] = float(np.logaddexp(totals[prefix], s)) if prefix in totals else s
    first_seen = [prefix for (prefix, _), _ in beam]
    ordered = list(dict.fromkeys(first_seen))
    return sorted(((p, totals[p]) for p in ordered), key=lambda ps: -ps[1])


def beam_decode(log_probs: np.ndarray, charset, width: int = DEFAULT_BEAM_WIDTH,
                lexicon=None, max_snap: int = 1) -> str:
    """Best beam hypothesis as text.

    With a lexicon, each surviving hypothesis is snapped word-by-word to
    lexicon entries within ``max_snap`` edits and the highest-ranked one whose
    words all land in the lexicon wins.
    """
    ranked = beam_search(log_probs, width)
    texts = [_alphabet_decode(p, charset) for p, _ in ranked]
    if lexicon is None:
        return texts[0]
    from .evaluation import lexicon_correct

    words = lexicon.words if hasattr(lexicon, "words") else set(lexicon)
    snapped = [lexicon_correct(t, words, max_snap=max_snap) for t in texts]
    for s in snapped:
        if all(w in words for w in s.split()):
            return s
    return snapped[0]
