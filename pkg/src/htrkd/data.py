"""Images, characters and samples: normalisation, augmentation, synthetic
text-line rendering, charset construction, class balancing and manifests."""

from __future__ import annotations

import json
import logging
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .glyphs import GLYPH_COLS, GLYPH_ROWS, GLYPHS
from .layers import ConfigError

log = logging.getLogger(__name__)

BLANK_ID = 0
CLASS_WEIGHT_EPS = 1e-8
CLASS_WEIGHT_CAP = 100.0
DEFAULT_HEIGHT, DEFAULT_WIDTH = 32, 256
PAPER_HEIGHT, PAPER_WIDTH = 68, 864


class UnknownCharError(KeyError):
    def __str__(self):
        return f"character {self.args[0]!r} is not in the charset"


class MissingGlyphError(KeyError):
    def __str__(self):
        return f"no glyph for character {self.args[0]!r}"


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Per-sample stream, independent of worker count and scheduling."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


# -- image normalisation ----------------------------------------------------------

def _resize(img: np.ndarray, height: int, width: int) -> np.ndarray:
    h, w = img.shape
    if (h, w) == (height, width):
        return img
    ys = (np.arange(height) + 0.5) * h / height - 0.5
    xs = (np.arange(width) + 0.5) * w / width - 0.5
    grid = np.meshgrid(np.clip(ys, 0, h - 1), np.clip(xs, 0, w - 1), indexing="ij")
    return ndimage.map_coordinates(img, grid, order=1, mode="nearest")


def fit_to_size(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Pad with background to the target aspect ratio, then scale.

    Narrow images are padded on the right, wide ones at the bottom; the
    background is taken to be the image maximum (paper white).
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise ValueError("expected a non-empty 2-D grayscale image")
    h, w = img.shape
    bg = img.max()
    target = width / height
    if w / h < target:
        new_w = int(round(h * target))
        if new_w > w:
            img = np.pad(img, ((0, 0), (0, new_w - w)), constant_values=bg)
    elif w / h > target:
        new_h = int(round(w / target))
        if new_h > h:
            img = np.pad(img, ((0, new_h - h), (0, 0)), constant_values=bg)
    return _resize(img, height, width)


def normalize_image(img: np.ndarray, height: int | None = None, width: int | None = None) -> np.ndarray:
    """Resize (when a size is given) and min-max scale into ``[-1, 1]``.

    A constant image maps to all zeros.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.size == 0:
        raise ValueError("cannot normalise an empty image")
    if height is not None and width is not None:
        img = fit_to_size(img, height, width)
    lo, hi = img.min(), img.max()
    if hi == lo:
        return np.zeros_like(img)
    return 2.0 * (img - lo) / (hi - lo) - 1.0


# -- augmentation -----------------------------------------------------------------

@dataclass(frozen=True)
class AugmentSpec:
    rotation: float = 2.0  # max |degrees|
    shear: float = 0.15  # max |horizontal shear factor|
    elastic_alpha: float = 1.5
    elastic_sigma: float = 4.0
    contrast: tuple[float, float] = (0.7, 1.2)
    noise_sigma: float = 0.05
    prob: float = 0.5

    def __post_init__(self):
        values = (self.rotation, self.shear, self.elastic_alpha, self.elastic_sigma,
                  *self.contrast, self.noise_sigma, self.prob)
        if not all(math.isfinite(v) for v in values):
            raise ConfigError("augmentation ranges must be finite")
        if not 0.0 <= self.prob <= 1.0:
            raise ConfigError("augmentation probability must lie in [0, 1]")

    @classmethod
    def null(cls, prob: float = 1.0) -> "AugmentSpec":
        return cls(rotation=0.0, shear=0.0, elastic_alpha=0.0, elastic_sigma=1.0,
                   contrast=(1.0, 1.0), noise_sigma=0.0, prob=prob)


def _affine(img: np.ndarray, matrix: np.ndarray, cval: float) -> np.ndarray:
    center = (np.array(img.shape) - 1) / 2.0
    offset = center - matrix @ center
    return ndimage.affine_transform(img, matrix, offset=offset, order=1, mode="constant", cval=cval)


def augment(img: np.ndarray, spec: AugmentSpec, seed) -> np.ndarray:
    """Rotate, shear, elastic-distort, rescale contrast and add noise, each
    applied with probability ``spec.prob``; the result is clipped to [-1, 1]."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = np.asarray(img, dtype=np.float64)
    bg = float(out.max())
    if rng.random() < spec.prob:
        a = math.radians(rng.uniform(-spec.rotation, spec.rotation))
        m = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
        out = _affine(out, m, bg)
    if rng.random() < spec.prob:
        s = rng.uniform(-spec.shear, spec.shear)
        out = _affine(out, np.array([[1.0, 0.0], [s, 1.0]]), bg)
    if rng.random() < spec.prob:
        dy = ndimage.gaussian_filter(rng.uniform(-1, 1, out.shape), spec.elastic_sigma) * spec.elastic_alpha
        dx = ndimage.gaussian_filter(rng.uniform(-1, 1, out.shape), spec.elastic_sigma) * spec.elastic_alpha
        yy, xx = np.meshgrid(np.arange(out.shape[0]), np.arange(out.shape[1]), indexing="ij")
        out = ndimage.map_coordinates(out, [yy + dy, xx + dx], order=1, mode="nearest")
    if rng.random() < spec.prob:
        c = rng.uniform(*spec.contrast)
        m = out.mean()
        out = (out - m) * c + m
    if rng.random() < spec.prob:
        out = out + rng.normal(0.0, spec.noise_sigma, out.shape)
    return np.clip(out, -1.0, 1.0)


# -- rendering --------------------------------------------------------------------

def render_text(text: str, seed, height: int = DEFAULT_HEIGHT, width: int = DEFAULT_WIDTH) -> np.ndarray:
    """Rasterise ``text`` with the built-in bitmap font.

    Returns an 8-bit-range float image (ink dark, background 255) of the
    configured size. The seed picks the slant (±15°), stroke thickness (1-2 px),
    per-character baseline jitter (±2 px) and ink darkness.
    """
    for ch in text:
        if ch not in GLYPHS:
            raise MissingGlyphError(ch)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    slant = math.tan(math.radians(rng.uniform(-15, 15)))
    thickness = int(rng.integers(1, 3))
    ink = float(rng.uniform(0, 80))
    jitter = rng.integers(-2, 3, size=len(text))
    scale = max(1, (height - 8) // (GLYPH_ROWS + 2))
    gh, gw = GLYPH_ROWS * scale, GLYPH_COLS * scale
    advance = (GLYPH_COLS + 1) * scale
    pad_x = 4 + int(math.ceil(abs(slant) * height))
    canvas_w = max(width, 2 * pad_x + advance * len(text))
    mask = np.zeros((height, canvas_w), dtype=bool)
    top = (height - gh) // 2
    for i, ch in enumerate(text):
        glyph = np.kron(GLYPHS[ch], np.ones((scale, scale), dtype=bool))
        y0 = int(np.clip(top + jitter[i], 0, height - gh))
        x0 = pad_x + i * advance
        mask[y0:y0 + gh, x0:x0 + gw] |= glyph
    if thickness > 1:
        mask = ndimage.binary_dilation(mask, iterations=thickness - 1)
    if slant:
        base = top + gh
        sheared = np.zeros_like(mask)
        for y in range(height):
            shift = int(round(slant * (base - y)))
            sheared[y] = np.roll(mask[y], shift)
        mask = sheared
    img = np.where(mask, ink, 255.0)
    if canvas_w != width:
        img = fit_to_size(img, height, width)
    return img


# -- charset and class balancing ----------------------------------------------------

def class_weights(freqs, eps: float = CLASS_WEIGHT_EPS, cap: float = CLASS_WEIGHT_CAP) -> np.ndarray:
    """``max(1, mean(f) / (eps + f_c))``, capped to keep sampling sane."""
    f = np.asarray(freqs, dtype=np.float64)
    if (f < 0).any():
        raise ValueError("frequencies must be non-negative")
    w = np.maximum(1.0, f.mean() / (eps + f))
    return np.minimum(w, cap)


@dataclass
class Charset:
    """Ordered vocabulary; id 0 is the CTC blank, characters start at 1."""

    chars: str
    freqs: dict[str, int] = field(default_factory=dict)
    min_freq: int = 1
    excluded_samples: int = 0

    def __post_init__(self):
        if len(set(self.chars)) != len(self.chars):
            raise ConfigError("charset characters must be unique")
        self._index = {c: i + 1 for i, c in enumerate(self.chars)}
        counts = [self.freqs.get(c, 0) for c in self.chars]
        self.weights = class_weights(counts) if counts else np.zeros(0)

    def __len__(self) -> int:
        return len(self.chars)

    def __contains__(self, ch: str) -> bool:
        return ch in self._index

    @property
    def vocab_size(self) -> int:
        return len(self.chars) + 1

    @property
    def mean_freq(self) -> float:
        return float(np.mean([self.freqs.get(c, 0) for c in self.chars])) if self.chars else 0.0

    def weight(self, ch: str) -> float:
        return float(self.weights[self._index[ch] - 1])

    def encode(self, text: str) -> list[int]:
        try:
            return [self._index[c] for c in text]
        except KeyError as e:
            raise UnknownCharError(e.args[0]) from None

    def decode(self, ids: Iterable[int]) -> str:
        return "".join(self.chars[i - 1] for i in ids if i != BLANK_ID)

    def admits(self, text: str) -> bool:
        return all(c in self._index for c in text)

    def to_dict(self) -> dict:
        return {"chars": self.chars, "freqs": self.freqs, "min_freq": self.min_freq}

    @classmethod
    def from_dict(cls, d: dict) -> "Charset":
        return cls(d["chars"], dict(d.get("freqs", {})), d.get("min_freq", 1))


def build_charset(corpus: Sequence[str], min_freq: int = 1) -> Charset:
    """Characters seen at least ``min_freq`` times, in code-point order."""
    if not corpus:
        raise ConfigError("cannot build a charset from an empty corpus")
    counts = Counter(ch for line in corpus for ch in line)
    kept = sorted((c for c, n in counts.items() if n >= min_freq), key=ord)
    if not kept:
        raise ConfigError(f"no character reaches min_freq={min_freq}")
    cs = Charset("".join(kept), {c: counts[c] for c in kept}, min_freq)
    _, cs.excluded_samples = filter_samples(corpus, cs)
    return cs


def filter_samples(texts: Sequence[str], charset: Charset) -> tuple[list[str], int]:
    kept = [t for t in texts if charset.admits(t)]
    dropped = len(texts) - len(kept)
    if dropped:
        log.warning("excluded %d samples containing characters outside the charset", dropped)
    return kept, dropped


def tokenize(text: str, charset: Charset) -> list[int]:
    return charset.encode(text)


def detokenize(ids: Sequence[int], charset: Charset) -> str:
    return charset.decode(ids)


def sample_weight(text: str, charset: Charset) -> float:
    """Oversampling weight of a line: its rarest character's class weight."""
    return max((charset.weight(c) for c in text), default=1.0)


# -- samples and synthetic data ----------------------------------------------------

@dataclass
class SampleRecord:
    image: np.ndarray
    text: str
    source: str = "real"
    synthetic: bool = False


def synthetic_count(n_real: int, ratio: float) -> int:
    """Synthetic lines needed so they make up ``ratio`` of the union."""
    if not 0.0 <= ratio < 1.0:
        raise ConfigError("synthetic ratio must lie in [0, 1)")
    return int(round(n_real * ratio / (1.0 - ratio)))


def random_text(charset: Charset, length: int, rng: np.random.Generator) -> str:
    """Characters drawn with probability proportional to their class weight.

    Spaces never lead, trail or repeat.
    """
    chars = list(charset.chars)
    p = np.asarray(charset.weights, dtype=np.float64)
    p = p / p.sum()
    no_space = [i for i, c in enumerate(chars) if c != " "]
    q = p[no_space] / p[no_space].sum() if no_space else p
    out: list[str] = []
    for i in range(length):
        edge = i == 0 or i == length - 1 or (out and out[-1] == " ")
        if edge and no_space:
            out.append(chars[no_space[rng.choice(len(no_space), p=q)]])
        else:
            out.append(chars[rng.choice(len(chars), p=p)])
    return "".join(out)


def make_sample(text: str, rng: np.random.Generator, height: int, width: int,
                spec: AugmentSpec | None, source: str, synthetic: bool) -> SampleRecord:
    img = normalize_image(render_text(text, rng, height, width))
    if spec is not None:
        img = augment(img, spec, rng)
    return SampleRecord(img.astype(np.float32), text, source, synthetic)


def generate_synthetic(charset: Charset, count: int, length_range: tuple[int, int], seed: int,
                       height: int = DEFAULT_HEIGHT, width: int = DEFAULT_WIDTH,
                       spec: AugmentSpec | None = None, source: str = "synthetic") -> list[SampleRecord]:
    """Render ``count`` random lines (rare characters oversampled)."""
    if count < 0:
        raise ConfigError("count must be non-negative")
    lo, hi = length_range
    out = []
    for i in range(count):
        rng = sample_rng(seed, i)
        text = random_text(charset, int(rng.integers(lo, hi + 1)), rng)
        out.append(make_sample(text, rng, height, width, spec, source, True))
    return out


def make_toy_corpus(n: int, alphabet: str, length_range: tuple[int, int], seed: int,
                    height: int = DEFAULT_HEIGHT, width: int = DEFAULT_WIDTH,
                    sources: Sequence[str] = ("toy-a", "toy-b")) -> list[SampleRecord]:
    """Uniform-alphabet lines rendered cleanly, tagged round-robin by source."""
    flat = Charset("".join(sorted(set(alphabet), key=ord)), {c: 1 for c in alphabet})
    lo, hi = length_range
    out = []
    for i in range(n):
        rng = sample_rng(seed, i)
        text = random_text(flat, int(rng.integers(lo, hi + 1)), rng)
        out.append(make_sample(text, rng, height, width, None, sources[i % len(sources)], False))
    return out


@dataclass
class Dataset:
    images: np.ndarray  # N,H,W float32 in [-1, 1]
    targets: list[list[int]]
    texts: list[str]
    sources: list[str]
    synthetic: np.ndarray
    weights: np.ndarray

    def __len__(self) -> int:
        return len(self.texts)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], [self.targets[i] for i in idx], [self.texts[i] for i in idx],
                       [self.sources[i] for i in idx], self.synthetic[idx], self.weights[idx])


def to_dataset(records: Sequence[SampleRecord], charset: Charset) -> Dataset:
    if not records:
        raise ConfigError("no samples")
    return Dataset(
        images=np.stack([r.image for r in records]).astype(np.float32),
        targets=[tokenize(r.text, charset) for r in records],
        texts=[r.text for r in records],
        sources=[r.source for r in records],
        synthetic=np.array([r.synthetic for r in records], dtype=bool),
        weights=np.array([sample_weight(r.text, charset) for r in records]),
    )


def preprocess(records: Sequence[SampleRecord], charset: Charset, ratio: float, seed: int,
               spec: AugmentSpec | None = None, length_range: tuple[int, int] = (1, 8),
               height: int = DEFAULT_HEIGHT, width: int = DEFAULT_WIDTH) -> Dataset:
    """Normalise → augment → merge synthetic → tokenise → balance."""
    normed = [SampleRecord(normalize_image(r.image, height, width), r.text, r.source, r.synthetic)
              for r in records]
    if spec is not None:
        normed = [SampleRecord(augment(r.image, spec, sample_rng(seed, i)), r.text, r.source, r.synthetic)
                  for i, r in enumerate(normed)]
    synth = generate_synthetic(charset, synthetic_count(len(records), ratio), length_range,
                               seed + 1, height, width, spec)
    return to_dataset(normed + synth, charset)


# -- files ------------------------------------------------------------------------

def write_pgm(path: str | os.PathLike, img: np.ndarray) -> None:
    """Binary P5 PGM; float images in [-1, 1] are mapped to 0..255."""
    a = np.asarray(img)
    if a.dtype != np.uint8:
        a = np.clip(np.round((a.astype(np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    h, w = a.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(a.tobytes())


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    pos += 1
    return np.frombuffer(data[pos:pos + w * h], dtype=np.uint8).reshape(h, w).copy()


def write_manifest(records: Sequence[SampleRecord], out_dir: str | os.PathLike,
                   name: str = "manifest.jsonl") -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    path = out / name
    with open(path, "w", encoding="utf-8") as f:
        for i, r in enumerate(records):
            rel = f"images/{Path(name).stem}_{i:06d}.pgm"
            write_pgm(out / rel, r.image)
            f.write(json.dumps({"image": rel, "text": r.text, "source": r.source}, ensure_ascii=False) + "\n")
    return path


def read_manifest(path: str | os.PathLike, height: int = DEFAULT_HEIGHT,
                  width: int = DEFAULT_WIDTH) -> list[SampleRecord]:
    """Load and normalise every image listed in a JSON-lines manifest."""
    path = Path(path)
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
                img_path = path.parent / entry["image"]
                text, source = entry["text"], entry.get("source", "real")
            except (json.JSONDecodeError, KeyError) as e:
                raise ValueError(f"{path}:{lineno}: malformed manifest record ({e})") from None
            img = normalize_image(read_pgm(img_path).astype(np.float64), height, width)
            records.append(SampleRecord(img.astype(np.float32), text, source, source == "synthetic"))
    return records
