"""Teacher and Student networks: configuration, parameters, forward pass and
checkpoint files."""

from __future__ import annotations

import hashlib
import io
import json
import math
import os
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .distill import interpolate_logits
from .layers import (
    AttentionParams,
    CnnBlockParams,
    ConfigError,
    LstmParams,
    bilstm,
    cnn_block,
    combined_attention,
    se_width,
)
from .numerics import Tensor, as_tensor, log_softmax, matmul

MAGIC = b"HTRJ"
FORMAT_VERSION = 1
DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
FORGET_BIAS = 1.0


class FingerprintError(ValueError):
    """Parameters or checkpoint belong to a different configuration."""


class CheckpointError(ValueError):
    """Malformed, truncated or foreign checkpoint file."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``hidden`` is the BiLSTM output width (both directions together), which
    is also the attention width. Block ``i`` has ``channels * min(2**i,
    channel_cap)`` channels. The first ``pool_2x2_blocks`` blocks pool 2x2,
    the rest 2x1 (height only).
    """

    cnn_blocks: int = 5
    channels: int = 32
    hidden: int = 128
    lstm_layers: int = 4
    heads: int = 2
    vocab: int = 104
    height: int = 68
    width: int = 864
    aux_layer: int = 2
    se_ratio: int = 4
    kernel: int = 3
    channel_cap: int = 4
    pool_2x2_blocks: int = 2
    dtype: str = "float32"

    def __post_init__(self):
        positive = ("cnn_blocks", "channels", "hidden", "lstm_layers", "heads", "height",
                    "width", "se_ratio", "kernel", "channel_cap")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.vocab < 2:
            raise ConfigError("vocab must include the blank and at least one character")
        if self.hidden % 2:
            raise ConfigError("hidden must be even (two LSTM directions)")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden {self.hidden} is not divisible by {self.heads} heads")
        if not 1 <= self.aux_layer <= self.lstm_layers:
            raise ConfigError("aux_layer must name one of the LSTM layers")
        if self.kernel % 2 == 0:
            raise ConfigError("kernel must be odd for same padding")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    def block_channels(self) -> list[int]:
        return [self.channels * min(2 ** i, self.channel_cap) for i in range(self.cnn_blocks)]

    def pools(self) -> list[tuple[int, int]]:
        return [(2, 2) if i < self.pool_2x2_blocks else (2, 1) for i in range(self.cnn_blocks)]

    def feature_height(self) -> int:
        h = self.height
        for ph, _ in self.pools():
            h = -(-h // ph)
        return h

    def feature_dim(self) -> int:
        return self.block_channels()[-1] * self.feature_height()

    def canonical(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    def fingerprint(self) -> bytes:
        return hashlib.sha256(self.canonical().encode("utf-8")).digest()

    def with_(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


TEACHER = ModelConfig(cnn_blocks=5, channels=32, hidden=128, lstm_layers=4, heads=2)
STUDENT = ModelConfig(cnn_blocks=3, channels=16, hidden=64, lstm_layers=4, heads=1)
# Desk-scale shapes for the toy experiment (32x256 input, 13-way output).
TOY_TEACHER = ModelConfig(cnn_blocks=3, channels=8, hidden=64, lstm_layers=2, heads=2,
                          vocab=13, height=32, width=256, aux_layer=1)
TOY_STUDENT = ModelConfig(cnn_blocks=2, channels=4, hidden=32, lstm_layers=2, heads=1,
                          vocab=13, height=32, width=256, aux_layer=1)
TINY = ModelConfig(cnn_blocks=1, channels=8, hidden=8, lstm_layers=2, heads=1, vocab=4,
                   height=4, width=8, aux_layer=1, dtype="float64")
PRESETS = {"teacher": TEACHER, "student": STUDENT, "toy-teacher": TOY_TEACHER,
           "toy-student": TOY_STUDENT, "tiny": TINY}


def output_length(width: int, config: ModelConfig) -> int:
    """Frames emitted for an input ``width``: each 2x2 pool halves it, rounding up."""
    return -(-width // 2 ** min(config.pool_2x2_blocks, config.cnn_blocks))


# -- parameters ------------------------------------------------------------------

def _is_buffer(name: str) -> bool:
    return name.endswith(".bn_mean") or name.endswith(".bn_var")


class ParameterStore:
    """Ordered name → tensor map bound to one configuration.

    Batch-norm running statistics are stored alongside the weights as
    non-trainable buffers.
    """

    def __init__(self, config: ModelConfig | None, tensors: dict[str, Tensor] | None = None):
        self.config = config
        self.fingerprint = config.fingerprint() if config is not None else bytes(32)
        self.version = FORMAT_VERSION
        self._t: dict[str, Tensor] = dict(tensors or {})

    def __getitem__(self, name: str) -> Tensor:
        return self._t[name]

    def __setitem__(self, name: str, t: Tensor) -> None:
        if name in self._t:
            raise KeyError(f"duplicate parameter name {name!r}")
        self._t[name] = t

    def __contains__(self, name: str) -> bool:
        return name in self._t

    def __len__(self) -> int:
        return len(self._t)

    def __iter__(self) -> Iterator[str]:
        return iter(self._t)

    def items(self):
        return self._t.items()

    def names(self) -> list[str]:
        return list(self._t)

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self._t.items() if not _is_buffer(n)]

    def count(self) -> int:
        return sum(t.size for _, t in self.trainable())

    def zero_grad(self) -> None:
        for t in self._t.values():
            t.grad = None

    def copy(self) -> "ParameterStore":
        out = ParameterStore(self.config)
        for n, t in self._t.items():
            out[n] = Tensor(t.data.copy(), requires_grad=t.requires_grad, name=n)
        return out

    def equal(self, other: "ParameterStore") -> bool:
        """Bitwise equality of names, dtypes and values."""
        if self.fingerprint != other.fingerprint or self.names() != other.names():
            return False
        return all(a.dtype == b.dtype and a.data.tobytes() == b.data.tobytes()
                   for a, b in zip(self._t.values(), other._t.values()))

    def check(self, config: ModelConfig) -> None:
        if config.fingerprint() != self.fingerprint:
            raise FingerprintError("parameters were built for a different model configuration")


def _glorot(rng, shape, fan_in, fan_out, dtype):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _orthogonal(rng, n, dtype):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return (q * np.sign(np.diag(r))).astype(dtype)


def init_params(config: ModelConfig, seed: int = 0) -> ParameterStore:
    """Glorot-uniform projections and kernels, orthogonal recurrent blocks,
    forget-gate bias 1."""
    rng = np.random.default_rng(seed)
    dt = np.dtype(config.dtype)
    store = ParameterStore(config)

    def put(name, arr, trainable=True):
        store[name] = Tensor(np.asarray(arr, dtype=dt), requires_grad=trainable, name=name)

    k = config.kernel
    c_in = 1
    for i, c in enumerate(config.block_channels()):
        p = f"cnn{i}"
        for branch in ("conv", "gate"):
            put(f"{p}.{branch}_w", _glorot(rng, (c, c_in, k, k), c_in * k * k, c * k * k, dt))
            put(f"{p}.{branch}_b", np.zeros(c))
        put(f"{p}.bn_gain", np.ones(c))
        put(f"{p}.bn_bias", np.zeros(c))
        put(f"{p}.bn_mean", np.zeros(c), trainable=False)
        put(f"{p}.bn_var", np.ones(c), trainable=False)
        r = se_width(c, config.se_ratio)
        put(f"{p}.se_w1", _glorot(rng, (r, c), c, r, dt))
        put(f"{p}.se_w2", _glorot(rng, (c, r), r, c, dt))
        c_in = c

    H = config.hidden // 2
    d_in = config.feature_dim()
    for layer in range(config.lstm_layers):
        for direction in ("fwd", "bwd"):
            p = f"lstm{layer}.{direction}"
            w_h = np.concatenate([_orthogonal(rng, H, dt) for _ in range(4)], axis=1)
            w_x = _glorot(rng, (d_in, 4 * H), d_in, 4 * H, dt)
            b = np.zeros(4 * H)
            b[H:2 * H] = FORGET_BIAS
            put(f"{p}.w", np.concatenate([w_h, w_x], axis=0))
            put(f"{p}.b", b)
        d_in = config.hidden

    D = config.hidden
    for name in ("wq", "wk", "wv", "wo", "prox_wq", "prox_wk", "prox_wv"):
        put(f"attn.{name}", _glorot(rng, (D, D), D, D, dt))
    put("attn.fuse_w", _glorot(rng, (2 * D, D), 2 * D, D, dt))
    put("attn.ln_gain", np.ones(D))
    put("attn.ln_bias", np.zeros(D))
    V = config.vocab
    for head in ("head", "aux"):
        put(f"{head}.w", _glorot(rng, (D, V), D, V, dt))
        put(f"{head}.b", np.zeros(V))
    return store


def zero_params(config: ModelConfig) -> ParameterStore:
    """Every weight zero; batch-norm statistics keep their identity values."""
    store = init_params(config)
    out = ParameterStore(config)
    for n, t in store.items():
        data = t.data if _is_buffer(n) or n.endswith("bn_gain") or n.endswith("ln_gain") else np.zeros_like(t.data)
        out[n] = Tensor(data.copy(), requires_grad=t.requires_grad, name=n)
    return out


def param_count(config: ModelConfig) -> int:
    """Number of trainable scalars, evaluated from the layer formulas."""
    k2 = config.kernel ** 2
    total, c_in = 0, 1
    for c in config.block_channels():
        r = se_width(c, config.se_ratio)
        total += 2 * (c * c_in * k2 + c)  # conv and gate branches
        total += 2 * c  # batch-norm affine
        total += 2 * r * c  # squeeze-excitation
        c_in = c
    H = config.hidden // 2
    d_in = config.feature_dim()
    for _ in range(config.lstm_layers):
        total += 2 * (4 * H * (H + d_in) + 4 * H)
        d_in = config.hidden
    D, V = config.hidden, config.vocab
    total += 7 * D * D + 2 * D * D + 2 * D  # projections, fusion, layer norm
    total += 2 * (D * V + V)  # output and auxiliary heads
    return total


# -- forward --------------------------------------------------------------------

@dataclass
class ForwardResult:
    logits: Tensor  # [T, B, V]
    aux_logits: Tensor  # [T, B, V]
    attention: dict[str, np.ndarray]


def _block(store: ParameterStore, i: int, pool) -> CnnBlockParams:
    p = f"cnn{i}"
    return CnnBlockParams(
        store[f"{p}.conv_w"], store[f"{p}.conv_b"], store[f"{p}.gate_w"], store[f"{p}.gate_b"],
        store[f"{p}.bn_gain"], store[f"{p}.bn_bias"], store[f"{p}.bn_mean"].data,
        store[f"{p}.bn_var"].data, store[f"{p}.se_w1"], store[f"{p}.se_w2"], pool)


def _attention(store: ParameterStore, heads: int) -> AttentionParams:
    g = lambda n: store[f"attn.{n}"]  # noqa: E731
    return AttentionParams(g("wq"), g("wk"), g("wv"), g("wo"), g("prox_wq"), g("prox_wk"),
                           g("prox_wv"), g("fuse_w"), g("ln_gain"), g("ln_bias"), heads)


def forward(config: ModelConfig, store: ParameterStore, images, training: bool = False) -> ForwardResult:
    """Images ``[B, H, W]`` (or ``[B, 1, H, W]``) to frame logits ``[T, B, V]``.

    Gated-conv blocks, then each column's (channel, height) features become
    one time step for the stacked BiLSTMs, then combined attention and a
    linear classifier. The auxiliary classifier reads the output of BiLSTM
    layer ``aux_layer``.
    """
    store.check(config)
    x = as_tensor(images)
    if x.ndim == 3:
        x = x.reshape(x.shape[0], 1, x.shape[1], x.shape[2])
    dt = np.dtype(config.dtype)
    if x.dtype != dt:
        x = Tensor(x.data.astype(dt))
    if x.shape[1] != 1 or x.shape[2] != config.height:
        raise ConfigError(f"expected images of height {config.height}, got shape {x.shape}")
    for i, pool in enumerate(config.pools()):
        x = cnn_block(x, _block(store, i, pool), training)
    B, C, Hf, W = x.shape
    seq = x.transpose(3, 0, 1, 2).reshape(W, B, C * Hf)
    aux = None
    for layer in range(config.lstm_layers):
        fwd = LstmParams(store[f"lstm{layer}.fwd.w"], store[f"lstm{layer}.fwd.b"])
        bwd = LstmParams(store[f"lstm{layer}.bwd.w"], store[f"lstm{layer}.bwd.b"])
        seq = bilstm(seq, fwd, bwd)
        if layer + 1 == config.aux_layer:
            aux = matmul(seq, store["aux.w"]) + store["aux.b"]
    att, weights = combined_attention(seq, _attention(store, config.heads))
    logits = matmul(att, store["head.w"]) + store["head.b"]
    return ForwardResult(logits, aux, weights)


def ensemble_logits(members: Sequence) -> np.ndarray:
    """Mean of member log-softmax outputs after aligning time axes to the first."""
    if not members:
        raise ValueError("ensemble needs at least one member")
    arrays = [m.data if isinstance(m, Tensor) else np.asarray(m, dtype=np.float64) for m in members]
    T = arrays[0].shape[0]
    out = []
    for a in arrays:
        aligned = interpolate_logits(Tensor(a), T).data if a.shape[0] != T else a
        if aligned.shape != arrays[0].shape:
            raise ValueError(f"member shape {a.shape} does not match {arrays[0].shape}")
        out.append(log_softmax(Tensor(aligned), -1).data)
    return np.mean(out, axis=0)


# -- checkpoint files ------------------------------------------------------------

def save(store: ParameterStore, path: str | os.PathLike) -> None:
    """Write the HTRJ binary checkpoint (little-endian throughout)."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", FORMAT_VERSION, len(store)))
    for name, t in store.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(t.data)
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", DTYPE_CODES[arr.dtype], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    buf.write(store.fingerprint)
    Path(path).write_bytes(buf.getvalue())


def _read(view: memoryview, pos: int, n: int) -> tuple[bytes, int]:
    if pos + n > len(view):
        raise CheckpointError("checkpoint is truncated")
    return bytes(view[pos:pos + n]), pos + n


def load(path: str | os.PathLike, config: ModelConfig | None = None) -> ParameterStore:
    """Read a checkpoint; with ``config`` the stored fingerprint must match it.

    Nothing is returned unless the whole file parses.
    """
    view = memoryview(Path(path).read_bytes())
    magic, pos = _read(view, 0, 4)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    head, pos = _read(view, pos, 12)
    version, count = struct.unpack("<IQ", head)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    codes = {v: k for k, v in DTYPE_CODES.items()}
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        raw, pos = _read(view, pos, 2)
        name_b, pos = _read(view, pos, struct.unpack("<H", raw)[0])
        meta, pos = _read(view, pos, 2)
        code, rank = struct.unpack("<BB", meta)
        if code not in codes:
            raise CheckpointError(f"{path}: unknown dtype code {code}")
        dims_b, pos = _read(view, pos, 8 * rank)
        dims = struct.unpack(f"<{rank}Q", dims_b)
        dt = codes[code].newbyteorder("<")
        data, pos = _read(view, pos, int(np.prod(dims, dtype=np.int64)) * dt.itemsize)
        name = name_b.decode("utf-8")
        if name in tensors:
            raise CheckpointError(f"{path}: duplicate entry {name!r}")
        tensors[name] = np.frombuffer(data, dtype=dt).reshape(dims).astype(codes[code])
    fingerprint, pos = _read(view, pos, 32)
    if pos != len(view):
        raise CheckpointError(f"{path}: trailing bytes after fingerprint")
    if config is not None and fingerprint != config.fingerprint():
        raise FingerprintError(f"{path}: checkpoint fingerprint does not match the configuration")
    store = ParameterStore(config)
    store.fingerprint = fingerprint
    for name, arr in tensors.items():
        store[name] = Tensor(arr, requires_grad=not _is_buffer(name), name=name)
    return store
