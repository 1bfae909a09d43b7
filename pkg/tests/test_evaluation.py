import math
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from htrkd.data import read_pgm
from htrkd.evaluation import (
    Lexicon,
    align,
    confusion_matrix,
    edit_distance,
    export_attention,
    lexicon_correct,
    metrics,
    snap_word,
    word_confidences,
)

short = st.text(alphabet="abc", max_size=7)


def recursive_distance(a, b):
    @lru_cache(maxsize=None)
    def d(i, j):
        if i == 0 or j == 0:
            return i + j
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))

    return d(len(a), len(b))


class TestEditDistance:
    @pytest.mark.parametrize("a, b, d", [("", "abc", 3), ("abc", "abc", 0), ("kitten", "sitting", 3)])
    def test_examples(self, a, b, d):
        assert edit_distance(a, b) == d

    @given(short, short)
    def test_matches_recursive_definition(self, a, b):
        assert edit_distance(a, b) == recursive_distance(a, b)

    @given(short, short, short)
    def test_triangle_inequality(self, a, b, c):
        assert edit_distance(a, c) <= edit_distance(a, b) + edit_distance(b, c)

    @given(short, short)
    def test_alignment_cost_is_distance(self, a, b):
        pairs = align(a, b)
        assert sum(x != y for x, y in pairs) == edit_distance(a, b)
        assert "".join(x for x, _ in pairs if x is not None) == a
        assert "".join(y for _, y in pairs if y is not None) == b


class TestMetrics:
    def test_perfect(self):
        r = metrics(["a b", "c"], ["a b", "c"])
        assert (r.cer, r.wer, r.ser) == (0, 0, 0)

    def test_single_substitution(self):
        r = metrics(["abc"], ["abd"])
        assert (r.cer, r.wer, r.ser) == (pytest.approx(1 / 3), 1.0, 1.0)

    def test_line_error_rate(self):
        assert metrics(["ab", "cd"], ["ab", "cx"]).ser == 0.5

    def test_empty_references(self):
        with pytest.raises(ValueError):
            metrics([], [])

    @given(st.lists(st.tuples(short.filter(bool), short), min_size=1, max_size=5))
    def test_duplicating_corpus_keeps_cer(self, pairs):
        refs, hyps = zip(*pairs)
        assert metrics(refs * 2, hyps * 2).cer == pytest.approx(metrics(refs, hyps).cer)

    @given(st.lists(short.filter(bool), min_size=1, max_size=5))
    def test_self_is_zero(self, refs):
        r = metrics(refs, refs)
        assert (r.cer, r.wer, r.ser) == (0, 0, 0)

    def test_report_text(self):
        text = metrics(["ab"], ["ab"]).to_text()
        assert text.startswith("cer\t0.0000%")


class TestLexicon:
    def test_tie_unchanged(self):
        assert lexicon_correct("ha", {"had", "has"}) == "ha"

    def test_two_edit_snap(self):
        assert lexicon_correct("rleeing", {"fleeing"}, max_snap=2) == "fleeing"

    def test_in_lexicon_kept(self):
        assert lexicon_correct("had", {"had", "hat"}) == "had"

    def test_confident_word_kept(self):
        assert lexicon_correct("hsd", {"had"}, conf=[0.95]) == "hsd"
        assert lexicon_correct("hsd", {"had"}, conf=[0.5]) == "had"

    def test_too_far(self):
        assert snap_word("xyz", {"had"}, 1) == "xyz"

    def test_load(self, tmp_path):
        (tmp_path / "lex.txt").write_text("alpha\nbeta\n\n", encoding="utf-8")
        assert Lexicon.load(tmp_path / "lex.txt").words == {"alpha", "beta"}

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10**6))
    def test_never_hurts_with_full_coverage(self, seed):
        rng = np.random.default_rng(seed)
        words = ["".join(rng.choice(list("abcdefgh"), size=rng.integers(2, 6))) for _ in range(12)]
        ref = " ".join(rng.choice(words, size=4))
        hyp = list(ref)
        i = int(rng.integers(len(hyp)))
        if hyp[i] != " ":
            hyp[i] = rng.choice(list("abcdefgh"))
        hyp = "".join(hyp)
        fixed = lexicon_correct(hyp, set(words), max_snap=1)
        assert edit_distance(ref, fixed) <= edit_distance(ref, hyp)

    def test_lowers_wer_on_substitution_corpus(self, rng):
        vocab = ["fleeing", "market", "window", "garden", "silver", "thunder", "orange", "pocket"]
        refs, hyps = [], []
        for _ in range(50):
            line = list(rng.choice(vocab, size=3))
            k = int(rng.integers(3))
            w = list(line[k])
            j = int(rng.integers(len(w)))
            w[j] = "z" if w[j] != "z" else "q"
            refs.append(" ".join(line))
            hyps.append(" ".join(line[:k] + ["".join(w)] + line[k + 1:]))
        fixed = [lexicon_correct(h, set(vocab)) for h in hyps]
        assert metrics(refs, fixed).wer < metrics(refs, hyps).wer


class TestConfidence:
    def test_per_word_means(self):
        p = np.array([[0.1, 0.9, 0.0], [0.2, 0.8, 0.0], [0.1, 0.0, 0.9], [0.3, 0.7, 0.0]])
        p = np.clip(p, 1e-12, 1)
        conf = word_confidences(np.log(p), space_id=2)
        assert conf == [pytest.approx(0.85), pytest.approx(0.7)]


class TestConfusion:
    def test_diagonal(self):
        m = confusion_matrix(["ab", "ba"], ["ab", "ba"], "ab")
        assert np.array_equal(m, np.diag([0, 2, 2]))

    def test_substitution(self):
        m = confusion_matrix(["a"], ["b"], "ab")
        assert m[1, 2] == 1 and m.sum() == 1

    def test_deletion(self):
        m = confusion_matrix(["ab"], ["b"], "ab")
        assert m[1, 0] == 1 and m[2, 2] == 1 and m.sum() == 2


class TestAttentionExport:
    def test_identity(self, tmp_path):
        _, pgm = export_attention(np.eye(4), tmp_path / "eye")
        np.testing.assert_array_equal(read_pgm(pgm), np.eye(4) * 255)

    def test_uniform(self, tmp_path):
        _, pgm = export_attention(np.full((3, 5), 0.2), tmp_path / "u")
        assert np.unique(read_pgm(pgm)).tolist() == [255]

    def test_csv_round_trip(self, tmp_path, rng):
        w = rng.dirichlet(np.ones(6), size=6)
        csv, _ = export_attention(w, tmp_path / "w.csv")
        np.testing.assert_array_equal(np.loadtxt(csv, delimiter=","), w)

    def test_io_error_names_path(self, tmp_path):
        with pytest.raises(OSError, match="missing"):
            export_attention(np.eye(2), tmp_path / "missing" / "x")
