"""Brute-force references used to check the fast CTC and decoder code, plus
the runnable oracle suites behind the ``oracle`` command."""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .ctc import BLANK, beam_search, collapse, ctc_log_prob, greedy_decode, min_frames

MAX_ENUM_PATHS = 5 ** 7


def _check_size(T: int, V: int) -> None:
    if V ** T > MAX_ENUM_PATHS:
        raise ValueError(f"refusing to enumerate {V}**{T} paths")


def brute_force_log_prob(log_probs: np.ndarray, target) -> float:
    """``log p(target)`` by summing every frame path that collapses to it."""
    lp = np.asarray(log_probs, dtype=np.float64)
    T, V = lp.shape
    _check_size(T, V)
    tgt = [int(t) for t in target]
    scores = [sum(lp[t, k] for t, k in enumerate(path))
              for path in itertools.product(range(V), repeat=T) if collapse(path) == tgt]
    if not scores:
        return -math.inf
    m = max(scores)
    return m + math.log(math.fsum(math.exp(s - m) for s in scores))


def string_posteriors(log_probs: np.ndarray) -> dict[tuple[int, ...], float]:
    """Exact probability of every collapsed label string."""
    lp = np.asarray(log_probs, dtype=np.float64)
    T, V = lp.shape
    _check_size(T, V)
    acc: dict[tuple[int, ...], list[float]] = {}
    for path in itertools.product(range(V), repeat=T):
        acc.setdefault(tuple(collapse(path)), []).append(math.exp(sum(lp[t, k] for t, k in enumerate(path))))
    return {s: math.fsum(ps) for s, ps in acc.items()}


def random_lattice(rng: np.random.Generator, T: int, V: int) -> np.ndarray:
    return np.log(rng.dirichlet(np.ones(V), size=T))


@dataclass
class SuiteResult:
    name: str
    cases: int
    worst: float
    passed: bool
    seconds: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: cases={self.cases} worst={self.worst:.3e} time={self.seconds:.2f}s"


def ctc_oracle_suite(cases: int = 200, seed: int = 0, tol: float = 1e-9) -> SuiteResult:
    """Forward-backward against enumeration on random small lattices
    (T ≤ 6, V ≤ 4, target length ≤ 3), feasible and infeasible alike."""
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst = 0.0
    ok = True
    for _ in range(cases):
        T = int(rng.integers(1, 7))
        V = int(rng.integers(2, 5))
        L = int(rng.integers(0, 4))
        target = [int(x) for x in rng.integers(1, V, size=L)]
        lp = random_lattice(rng, T, V)
        fast = ctc_log_prob(lp, target)
        slow = brute_force_log_prob(lp, target)
        if math.isinf(slow) or math.isinf(fast):
            ok &= math.isinf(slow) and math.isinf(fast) and min_frames(target) > T
            continue
        err = abs(fast - slow)
        worst = max(worst, err)
        ok &= err < tol
    return SuiteResult("ctc-forward-backward", cases, worst, bool(ok), time.perf_counter() - t0)


def decoder_oracle_suite(cases: int = 100, seed: int = 0) -> SuiteResult:
    """Width-1 beam against greedy, and a wide beam against the exact string
    posterior argmax on ``T = 3, V = 3`` lattices."""
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    bad = 0
    alphabet = [""] + [chr(ord("a") + i) for i in range(8)]
    for _ in range(cases):
        T, V = int(rng.integers(1, 12)), int(rng.integers(2, 6))
        lp = random_lattice(rng, T, V)
        beam = "".join(alphabet[i] for i in beam_search(lp, 1)[0][0])
        bad += beam != greedy_decode(lp, alphabet)
    for _ in range(cases):
        lp = random_lattice(rng, 3, 3)
        post = string_posteriors(lp)
        best = max(post.items(), key=lambda kv: kv[1])[0]
        bad += beam_search(lp, len(post))[0][0] != best
    return SuiteResult("decoders", 2 * cases, float(bad), bad == 0, time.perf_counter() - t0)


def gradient_oracle_suite(seed: int = 0) -> SuiteResult:
    """Central differences on every differentiable building block."""
    from .gradcheck import gradient_cases

    t0 = time.perf_counter()
    worst, n, ok = 0.0, 0, True
    for name, fn, tol in gradient_cases(np.random.default_rng(seed)):
        err = fn()
        n += 1
        worst = max(worst, err)
        ok &= err < tol
    return SuiteResult("gradients", n, worst, bool(ok), time.perf_counter() - t0)


SUITES: dict[str, Callable[[], SuiteResult]] = {
    "ctc": ctc_oracle_suite,
    "decoder": decoder_oracle_suite,
    "gradients": gradient_oracle_suite,
}
