import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from htrkd.ctc import (
    DecoderConfigError,
    InfeasibleTargetError,
    beam_decode,
    beam_search,
    collapse,
    ctc_log_prob,
    ctc_loss,
    ctc_loss_and_grad,
    greedy_decode,
    min_frames,
    viterbi_align,
)
from htrkd.numerics import Tape, Tensor, grad_check
from htrkd.oracles import brute_force_log_prob, random_lattice, string_posteriors

ALPHA = ["", "G", "r", "i", "a", "b"]


def one_hot_lattice(path, V, eps=1e-6):
    lp = np.full((len(path), V), math.log(eps))
    lp[np.arange(len(path)), path] = 0.0
    return lp - np.log(np.exp(lp).sum(axis=1, keepdims=True))


class TestCollapse:
    @pytest.mark.parametrize("path, expected", [([1, 1, 0, 2, 2], [1, 2]), ([0, 0], []), ([1, 0, 1], [1, 1])])
    def test_examples(self, path, expected):
        assert collapse(path) == expected

    @given(st.lists(st.integers(0, 4), max_size=12))
    def test_output_has_no_blanks_or_unseparated_repeats(self, path):
        out = collapse(path)
        assert 0 not in out
        assert len(out) <= len(path)

    @given(st.lists(st.integers(1, 3), max_size=6))
    def test_min_frames_is_achievable(self, target):
        path = []
        for i, c in enumerate(target):
            if i and target[i - 1] == c:
                path.append(0)
            path.append(c)
        assert len(path) == min_frames(target)
        assert collapse(path) == target


class TestLogProb:
    def test_two_frame_example(self):
        lp = np.log(np.full((2, 2), 0.5))
        assert ctc_log_prob(lp, [1]) == pytest.approx(math.log(0.75), abs=1e-12)

    def test_infeasible(self):
        lp = np.log(np.full((2, 2), 0.5))
        assert ctc_log_prob(lp, [1, 1]) == -math.inf
        with pytest.raises(InfeasibleTargetError):
            ctc_loss(Tensor(np.zeros((2, 1, 2))), [[1, 1]])

    def test_empty_target_is_blank_path(self, rng):
        lp = random_lattice(rng, 5, 4)
        assert ctc_log_prob(lp, []) == pytest.approx(lp[:, 0].sum(), abs=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 5), st.integers(2, 4), st.lists(st.integers(1, 3), max_size=3), st.integers(0, 10**6))
    def test_matches_enumeration(self, T, V, target, seed):
        target = [min(t, V - 1) for t in target]
        lp = random_lattice(np.random.default_rng(seed), T, V)
        fast, slow = ctc_log_prob(lp, target), brute_force_log_prob(lp, target)
        if math.isinf(slow):
            assert math.isinf(fast)
        else:
            assert abs(fast - slow) < 1e-9


class TestLossAndGrad:
    def test_against_finite_differences(self, rng):
        z = rng.standard_normal((4, 3))
        loss, g = ctc_loss_and_grad(z, [1, 2])
        h = 1e-6
        fd = np.zeros_like(z)
        for idx in np.ndindex(z.shape):
            zp, zm = z.copy(), z.copy()
            zp[idx] += h
            zm[idx] -= h
            fd[idx] = (ctc_loss_and_grad(zp, [1, 2])[0] - ctc_loss_and_grad(zm, [1, 2])[0]) / (2 * h)
        assert np.max(np.abs(g - fd) / np.maximum(1, np.abs(g))) < 1e-4
        assert loss == pytest.approx(-ctc_log_prob(z - np.log(np.exp(z).sum(1, keepdims=True)), [1, 2]))

    def test_saturated_path(self):
        z = np.full((4, 3), -30.0)
        z[[0, 1, 2, 3], [1, 0, 2, 2]] = 30.0
        loss, _ = ctc_loss_and_grad(z, [1, 2])
        assert loss < 1e-10

    def test_identical_batch_items(self, rng):
        z = rng.standard_normal((5, 1, 4))
        losses = ctc_loss(Tensor(np.concatenate([z, z], axis=1)), [[1, 3], [1, 3]]).data
        assert losses[0] == losses[1]

    def test_batched_tape_gradient(self, rng):
        assert grad_check(lambda z: ctc_loss(z, [[1, 2], [3], []]).sum(), Tensor(rng.standard_normal((4, 3, 4)))) < 1e-6

    def test_skip_infeasible(self, rng):
        z = Tensor(rng.standard_normal((2, 2, 3)), requires_grad=True)
        with Tape() as tape:
            loss = ctc_loss(z, [[1, 1], [2]], skip_infeasible=True)
            total = loss.sum()
        tape.backward(total)
        assert loss.data[0] == 0.0
        np.testing.assert_array_equal(z.grad[:, 0], 0.0)

    def test_gradient_rows_sum_to_zero(self, rng):
        _, g = ctc_loss_and_grad(rng.standard_normal((6, 5)), [2, 2, 4])
        np.testing.assert_allclose(g.sum(axis=1), 0.0, atol=1e-12)


class TestViterbi:
    def test_alignment_collapses_to_target(self, rng):
        lp = random_lattice(rng, 7, 4)
        path = viterbi_align(lp, [1, 1, 3])
        assert collapse(path.tolist()) == [1, 1, 3]

    def test_is_best_path(self, rng):
        import itertools

        lp = random_lattice(rng, 4, 3)
        best = max((p for p in itertools.product(range(3), repeat=4) if collapse(p) == [2, 1]),
                   key=lambda p: sum(lp[t, k] for t, k in enumerate(p)))
        assert tuple(viterbi_align(lp, [2, 1]).tolist()) == best


class TestDecoders:
    def test_greedy_example(self):
        assert greedy_decode(one_hot_lattice([1, 2, 3, 0], 6), ALPHA) == "Gri"

    def test_greedy_all_blank(self):
        assert greedy_decode(one_hot_lattice([0, 0, 0], 6), ALPHA) == ""

    @pytest.mark.parametrize("width", [1, 3, 10])
    def test_one_hot_exact(self, width):
        lat = one_hot_lattice([4, 4, 0, 4, 5, 0], 6)
        assert beam_decode(lat, ALPHA, width) == "aab"

    def test_width_zero_rejected(self):
        with pytest.raises(DecoderConfigError):
            beam_decode(np.zeros((2, 3)), ALPHA, 0)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 10), st.integers(2, 6), st.integers(0, 10**6))
    def test_width_one_is_greedy(self, T, V, seed):
        lp = random_lattice(np.random.default_rng(seed), T, V)
        assert beam_decode(lp, ALPHA, 1) == greedy_decode(lp, ALPHA)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10**6))
    def test_wide_beam_is_map_string(self, seed):
        lp = random_lattice(np.random.default_rng(seed), 3, 3)
        post = string_posteriors(lp)
        best = max(post, key=post.get)
        assert beam_search(lp, len(post))[0][0] == best

    def test_scores_are_string_log_probs(self, rng):
        lp = random_lattice(rng, 3, 3)
        post = string_posteriors(lp)
        for prefix, score in beam_search(lp, len(post)):
            assert score == pytest.approx(math.log(post[prefix]), abs=1e-9)

    def test_lexicon_picks_in_vocabulary_hypothesis(self):
        lat = one_hot_lattice([4, 0, 5], 6)  # "ab"
        assert beam_decode(lat, ALPHA, 5, lexicon={"abb"}) == "abb"
