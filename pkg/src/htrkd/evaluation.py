"""Error rates, lexicon snapping, confusion counts and attention export."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import write_pgm

DEFAULT_THETA = 0.9
DEFAULT_MAX_SNAP = 1


def _dp_table(a: Sequence, b: Sequence) -> np.ndarray:
    n, m = len(a), len(b)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        ai = a[i - 1]
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j] + 1, d[i, j - 1] + 1, d[i - 1, j - 1] + (ai != b[j - 1]))
    return d


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Levenshtein distance with unit costs; works on strings or token lists."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def align(ref: Sequence, hyp: Sequence) -> list[tuple[object, object]]:
    """Minimum-edit alignment as ``(ref_item, hyp_item)`` pairs; ``None``
    marks an insertion or deletion. Substitutions are preferred on ties."""
    d = _dp_table(ref, hyp)
    i, j = len(ref), len(hyp)
    pairs = []
    while i or j:
        if i and j and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            pairs.append((ref[i - 1], hyp[j - 1]))
            i, j = i - 1, j - 1
        elif i and d[i, j] == d[i - 1, j] + 1:
            pairs.append((ref[i - 1], None))
            i -= 1
        else:
            pairs.append((None, hyp[j - 1]))
            j -= 1
    return pairs[::-1]


@dataclass
class EvalReport:
    cer: float
    wer: float
    ser: float
    lines: int
    confusion: np.ndarray | None = None
    corrections: list[tuple[str, str]] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"cer": self.cer, "wer": self.wer, "ser": self.ser, "lines": self.lines}

    def to_text(self) -> str:
        rows = [f"cer\t{100 * self.cer:.4f}%", f"wer\t{100 * self.wer:.4f}%",
                f"ser\t{100 * self.ser:.4f}%", f"lines\t{self.lines}",
                f"corrected_lines\t{len(self.corrections)}"]
        rows += [f"correction\t{before}\t{after}" for before, after in self.corrections]
        return "\n".join(rows) + "\n"


def metrics(refs: Sequence[str], hyps: Sequence[str]) -> EvalReport:
    """Corpus CER and WER (edits over reference length) and line error rate."""
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references but {len(hyps)} hypotheses")
    n_chars = sum(len(r) for r in refs)
    n_words = sum(len(r.split()) for r in refs)
    if not refs or n_chars == 0:
        raise ValueError("reference corpus is empty")
    char_err = sum(edit_distance(r, h) for r, h in zip(refs, hyps))
    word_err = sum(edit_distance(r.split(), h.split()) for r, h in zip(refs, hyps))
    bad_lines = sum(r != h for r, h in zip(refs, hyps))
    return EvalReport(char_err / n_chars, word_err / max(n_words, 1), bad_lines / len(refs), len(refs))


def cer(refs: Sequence[str], hyps: Sequence[str]) -> float:
    return metrics(refs, hyps).cer


# -- lexicon correction -------------------------------------------------------------

@dataclass
class Lexicon:
    words: set[str]
    max_snap: int = DEFAULT_MAX_SNAP

    def __post_init__(self):
        if not self.words:
            raise ValueError("lexicon is empty")

    def __contains__(self, word: str) -> bool:
        return word in self.words

    @classmethod
    def load(cls, path: str | os.PathLike, max_snap: int = DEFAULT_MAX_SNAP) -> "Lexicon":
        with open(path, encoding="utf-8") as f:
            words = {line.strip() for line in f if line.strip()}
        return cls(words, max_snap)


def _bounded_distance(a: str, b: str, bound: int) -> int:
    if abs(len(a) - len(b)) > bound:
        return bound + 1
    return edit_distance(a, b)


def snap_word(word: str, words: Iterable[str], max_snap: int = DEFAULT_MAX_SNAP) -> str:
    """The unique nearest lexicon word within ``max_snap`` edits, or ``word``."""
    best, best_d, tied = word, max_snap + 1, False
    for cand in words:
        d = _bounded_distance(word, cand, max_snap)
        if d < best_d:
            best, best_d, tied = cand, d, False
        elif d == best_d and d <= max_snap:
            tied = True
    if best_d > max_snap or tied:
        return word
    return best


def lexicon_correct(hyp: str, lexicon, conf: Sequence[float] | None = None,
                    theta: float = DEFAULT_THETA, max_snap: int | None = None) -> str:
    """Snap low-confidence out-of-lexicon words to their nearest lexicon entry.

    ``conf`` gives one confidence per whitespace-separated word; words at or
    above ``theta`` are kept as they are. Without ``conf`` every word is
    treated as low-confidence.
    """
    words = lexicon.words if isinstance(lexicon, Lexicon) else set(lexicon)
    if max_snap is None:
        max_snap = lexicon.max_snap if isinstance(lexicon, Lexicon) else DEFAULT_MAX_SNAP
    tokens = hyp.split(" ")
    if conf is not None and len(conf) != len([t for t in tokens if t]):
        raise ValueError("need one confidence per word")
    out, k = [], 0
    for tok in tokens:
        if not tok:
            out.append(tok)
            continue
        c = 0.0 if conf is None else conf[k]
        k += 1
        out.append(tok if tok in words or c >= theta else snap_word(tok, words, max_snap))
    return " ".join(out)


def word_confidences(log_probs: np.ndarray, blank: int = 0, space_id: int | None = None) -> list[float]:
    """Mean per-frame max posterior over each word's frames in the greedy path.

    Frames are assigned to the word whose characters they emit; blanks and
    repeats attach to the current word. ``space_id`` separates words.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    best = lp.argmax(axis=-1)
    peak = np.exp(lp.max(axis=-1))
    groups: list[list[float]] = [[]]
    prev = blank
    for t, k in enumerate(best):
        if space_id is not None and k == space_id:
            if k != prev and groups[-1]:
                groups.append([])
            prev = k
            continue
        groups[-1].append(peak[t])
        prev = k
    return [float(np.mean(g)) for g in groups if g]


# -- confusion and attention export ---------------------------------------------------

def confusion_matrix(refs: Sequence[str], hyps: Sequence[str], charset) -> np.ndarray:
    """``[V, V]`` counts over aligned character pairs.

    Index 0 (the blank slot) stands for the missing side: row 0 holds
    insertions, column 0 deletions. ``charset`` is a Charset or a string of
    characters whose position + 1 gives the id.
    """
    chars = charset.chars if hasattr(charset, "chars") else str(charset)
    index = {c: i + 1 for i, c in enumerate(chars)}
    V = len(chars) + 1
    counts = np.zeros((V, V), dtype=np.int64)
    for r, h in zip(refs, hyps):
        for a, b in align(r, h):
            counts[0 if a is None else index[a], 0 if b is None else index[b]] += 1
    return counts


def export_attention(weights: np.ndarray, path: str | os.PathLike) -> tuple[Path, Path]:
    """Write ``<path>.csv`` at full precision and ``<path>.pgm`` scaled per row max."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError("attention weights must be a 2-D matrix")
    base = Path(path)
    if base.suffix in (".csv", ".pgm"):
        base = base.with_suffix("")
    csv_path, pgm_path = base.with_suffix(".csv"), base.with_suffix(".pgm")
    row_max = w.max(axis=1, keepdims=True)
    scaled = np.divide(w, row_max, out=np.zeros_like(w), where=row_max > 0)
    img = np.round(scaled * 255).astype(np.uint8)
    try:
        np.savetxt(csv_path, w, delimiter=",", fmt="%.17g")
        write_pgm(pgm_path, img)
    except OSError as e:
        raise OSError(f"cannot write attention export to {base}: {e}") from e
    return csv_path, pgm_path
