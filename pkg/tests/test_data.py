import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from htrkd.data import (
    AugmentSpec,
    Charset,
    MissingGlyphError,
    SampleRecord,
    UnknownCharError,
    augment,
    build_charset,
    class_weights,
    detokenize,
    fit_to_size,
    generate_synthetic,
    make_toy_corpus,
    normalize_image,
    preprocess,
    random_text,
    read_manifest,
    read_pgm,
    render_text,
    sample_weight,
    synthetic_count,
    tokenize,
    write_manifest,
    write_pgm,
)
from htrkd.distill import ConfigError

TOY = "abcdeghkmnrs"


class TestNormalize:
    def test_endpoints_and_midpoint(self):
        out = normalize_image(np.array([[0.0, 50.0, 100.0]]))
        np.testing.assert_allclose(out, [[-1.0, 0.0, 1.0]])

    def test_constant_image(self):
        np.testing.assert_array_equal(normalize_image(np.full((3, 4), 7.0)), 0.0)

    @given(st.integers(1, 40), st.integers(1, 40))
    def test_fit_to_size_shape(self, h, w):
        img = np.random.default_rng(h * 41 + w).uniform(0, 255, (h, w))
        out = fit_to_size(img, 8, 32)
        assert out.shape == (8, 32)
        assert img.min() - 1e-9 <= out.min() and out.max() <= img.max() + 1e-9

    def test_narrow_image_padded_with_background(self):
        img = np.zeros((8, 8))
        out = fit_to_size(img + np.eye(8) * 255, 8, 32)
        # the right three quarters are pure background
        np.testing.assert_allclose(out[:, 9:], 255.0)


class TestClassWeights:
    def test_mean_frequency(self):
        assert class_weights([10, 10])[0] == 1.0

    def test_rare(self):
        w = class_weights([2.0, 18.0])  # mean 10
        assert w[0] == pytest.approx(5.0)
        assert w[1] == 1.0

    def test_absent_is_capped(self):
        assert class_weights([0.0, 20.0])[0] == 100.0


class TestCharset:
    def test_frequencies(self):
        cs = build_charset(["aab"])
        assert cs.chars == "ab"
        assert cs.freqs == {"a": 2, "b": 1}

    def test_min_freq_excludes_samples(self):
        cs = build_charset(["aab", "ab", "aa"], min_freq=3)
        assert cs.chars == "a"
        assert cs.excluded_samples == 2
        assert not cs.admits("ab")

    def test_empty_result(self):
        with pytest.raises(ConfigError):
            build_charset(["ab"], min_freq=5)

    def test_toy_corpus_round_trip(self):
        texts = [r.text for r in make_toy_corpus(1000, TOY, (1, 8), 3, height=8, width=32)]
        assert build_charset(texts).chars == TOY

    def test_tokenize(self):
        cs = Charset("ab")
        assert tokenize("", cs) == []
        assert tokenize("ab", cs) == [1, 2]
        with pytest.raises(UnknownCharError, match="z"):
            tokenize("az", cs)

    @given(st.text(alphabet=TOY + " ", max_size=30))
    def test_round_trip(self, text):
        cs = Charset(TOY + " ")
        assert detokenize(tokenize(text, cs), cs) == text

    def test_serialisation(self):
        cs = build_charset(["hello world"])
        assert Charset.from_dict(cs.to_dict()).chars == cs.chars

    def test_sample_weight_is_rarest(self):
        cs = build_charset(["aaaaaaab"])
        assert sample_weight("ab", cs) == cs.weight("b") > 1.0


class TestRender:
    def test_empty_text_is_blank(self):
        img = render_text("", 0, 16, 64)
        assert img.shape == (16, 64)
        np.testing.assert_array_equal(img, 255.0)

    def test_deterministic(self):
        np.testing.assert_array_equal(render_text("mask", 4), render_text("mask", 4))

    def test_seed_changes_style(self):
        assert not np.array_equal(render_text("mask", 4), render_text("mask", 5))

    def test_has_ink(self):
        assert render_text("hm", 1).min() <= 80

    def test_missing_glyph(self):
        with pytest.raises(MissingGlyphError, match="€"):
            render_text("a€", 0)


class TestAugment:
    def test_zero_probability_is_identity(self, rng):
        img = rng.uniform(-1, 1, (8, 16))
        np.testing.assert_array_equal(augment(img, AugmentSpec(prob=0.0), 3), img)

    def test_null_transforms(self, rng):
        img = rng.uniform(-1, 1, (8, 16))
        np.testing.assert_allclose(augment(img, AugmentSpec.null(), 3), img, atol=1e-6)

    def test_deterministic(self, rng):
        img = rng.uniform(-1, 1, (8, 16))
        spec = AugmentSpec(prob=1.0)
        np.testing.assert_array_equal(augment(img, spec, 9), augment(img, spec, 9))

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_range_preserved(self, seed):
        img = np.random.default_rng(seed).uniform(-1, 1, (8, 16))
        out = augment(img, AugmentSpec(prob=1.0), seed)
        assert out.shape == img.shape and out.min() >= -1 and out.max() <= 1


class TestSynthetic:
    @pytest.mark.parametrize("n, r, expected", [(90, 0.1, 10), (60, 0.4, 40)])
    def test_counts(self, n, r, expected):
        assert synthetic_count(n, r) == expected

    def test_generate(self):
        cs = build_charset(["abcab", "ccc"])
        recs = generate_synthetic(cs, 7, (2, 4), 1, height=8, width=32)
        assert len(recs) == 7
        assert all(r.synthetic and 2 <= len(r.text) <= 4 and cs.admits(r.text) for r in recs)
        assert recs[0].image.shape == (8, 32)

    def test_random_text_prefers_rare(self):
        cs = build_charset(["a" * 90 + "b" * 10])
        rng = np.random.default_rng(0)
        text = "".join(random_text(cs, 50, rng) for _ in range(20))
        assert text.count("b") / len(text) > 0.5

    def test_pipeline_count(self):
        cs = build_charset(["ab", "ba", "aa"])
        recs = [SampleRecord(np.random.default_rng(i).uniform(0, 255, (10, 30)), t)
                for i, t in enumerate(["ab", "ba", "aa"] * 20)]
        ds = preprocess(recs, cs, ratio=0.4, seed=2, height=8, width=32)
        assert len(ds) == 60 + 40
        assert int(ds.synthetic.sum()) == 40


class TestFiles:
    def test_pgm_round_trip(self, tmp_path, rng):
        img = rng.integers(0, 256, (5, 7)).astype(np.uint8)
        write_pgm(tmp_path / "x.pgm", img)
        np.testing.assert_array_equal(read_pgm(tmp_path / "x.pgm"), img)

    def test_manifest_round_trip(self, tmp_path):
        recs = make_toy_corpus(4, TOY, (1, 3), 0, height=8, width=32)
        path = write_manifest(recs, tmp_path)
        back = read_manifest(path, 8, 32)
        assert [r.text for r in back] == [r.text for r in recs]
        assert all(np.abs(a.image - b.image).max() <= 2 / 255 + 1e-6 for a, b in zip(recs, back))

    def test_empty_manifest(self, tmp_path):
        path = write_manifest([], tmp_path)
        assert path.read_text() == ""
        assert read_manifest(path) == []
