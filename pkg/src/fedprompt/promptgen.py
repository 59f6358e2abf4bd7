"""Cross-attention prompt generator and its checkpoint format.

The generator maps the token embeddings of a task's class names to ``m``
prompt vectors::

    K = T W_K,  V = T W_V
    A = softmax(Q K^T / sqrt(d)) V
    P = tanh(A W1 + b1) W2 + b2

Gradients are written out by hand (no autodiff dependency); the tests check
them against central differences.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError, ShapeError
from .numerics import RngStream, as_matrix, softmax_rows

INIT_SCALE = 0.02
MAGIC = b"VLPG"
VERSION = 1


@dataclass(frozen=True)
class Span:
    name: str
    start: int
    length: int


@dataclass
class ClassEmbeddingBatch:
    """Token embeddings of concatenated class names plus per-class extents."""

    tokens: np.ndarray
    spans: list[Span]

    def __post_init__(self):
        self.tokens = as_matrix(self.tokens, "tokens")
        pos = 0
        for s in self.spans:
            if s.start != pos or s.length < 1:
                raise ShapeError(f"span {s} is not contiguous with the previous one")
            pos += s.length
        if pos != self.tokens.shape[0]:
            raise ShapeError(f"spans cover {pos} rows but tokens has {self.tokens.shape[0]}")

    @property
    def class_names(self) -> list[str]:
        return [s.name for s in self.spans]

    @property
    def mean_span_length(self) -> float:
        return self.tokens.shape[0] / len(self.spans)


@dataclass
class ForwardTrace:
    keys: np.ndarray
    values: np.ndarray
    attn_weights: np.ndarray
    attn_out: np.ndarray
    hidden_pre: np.ndarray
    hidden: np.ndarray = field(repr=False)


# Flat order used by init, flatten and serialization.
TENSOR_NAMES = ("Q", "W_K", "W_V", "W1", "b1", "W2", "b2")


@dataclass
class PromptGeneratorParams:
    Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        m, d = self.Q.shape
        d_h = self.W1.shape[1]
        expected = {
            "Q": (m, d), "W_K": (d, d), "W_V": (d, d), "W1": (d, d_h),
            "b1": (d_h,), "W2": (d_h, d), "b2": (d,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def m(self) -> int:
        return self.Q.shape[0]

    @property
    def d(self) -> int:
        return self.Q.shape[1]

    @property
    def d_h(self) -> int:
        return self.W1.shape[1]

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        return [(name, getattr(self, name)) for name in TENSOR_NAMES]

    def flatten(self) -> np.ndarray:
        return np.concatenate([t.ravel() for _, t in self.tensors()])

    def unflatten(self, flat) -> "PromptGeneratorParams":
        """New params with this object's shapes and values taken from ``flat``."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.size:
            raise ShapeError(f"flat vector has {flat.size} entries, expected {self.size}")
        out, pos = {}, 0
        for name, t in self.tensors():
            out[name] = flat[pos:pos + t.size].reshape(t.shape).copy()
            pos += t.size
        return PromptGeneratorParams(**out)

    @property
    def size(self) -> int:
        return param_count(self.m, self.d, self.d_h)

    def zeros_like(self) -> "PromptGeneratorParams":
        return self.unflatten(np.zeros(self.size))


def param_count(m: int, d: int, d_h: int) -> int:
    return m * d + 2 * d * d + d * d_h + d_h + d_h * d + d


def init_params(m: int, d: int, d_h: int, stream: RngStream) -> PromptGeneratorParams:
    """Gaussian weights (std 0.02) drawn in TENSOR_NAMES order; zero biases."""
    if min(m, d, d_h) < 1:
        raise ConfigError(f"prompt generator dimensions must be >= 1, got m={m} d={d} d_h={d_h}")

    def w(rows, cols):
        return INIT_SCALE * stream.normal(rows * cols).reshape(rows, cols)

    Q = w(m, d)
    W_K = w(d, d)
    W_V = w(d, d)
    W1 = w(d, d_h)
    W2 = w(d_h, d)
    return PromptGeneratorParams(Q=Q, W_K=W_K, W_V=W_V, W1=W1, b1=np.zeros(d_h),
                                 W2=W2, b2=np.zeros(d))


def generate_prompts(params: PromptGeneratorParams, T: ClassEmbeddingBatch):
    tokens = T.tokens
    if tokens.shape[1] != params.d:
        raise ShapeError(f"token width {tokens.shape[1]} != generator width {params.d}")
    keys = tokens @ params.W_K
    values = tokens @ params.W_V
    weights = softmax_rows(params.Q @ keys.T / np.sqrt(params.d))
    attn_out = weights @ values
    hidden_pre = attn_out @ params.W1 + params.b1
    hidden = np.tanh(hidden_pre)
    prompts = hidden @ params.W2 + params.b2
    trace = ForwardTrace(keys, values, weights, attn_out, hidden_pre, hidden)
    return prompts, trace


def backprop(params: PromptGeneratorParams, trace: ForwardTrace, T: ClassEmbeddingBatch,
             dL_dP) -> PromptGeneratorParams:
    """Gradient of ``sum(dL_dP * P)`` with respect to every generator tensor."""
    G = as_matrix(dL_dP, "dL_dP")
    n_tok = T.tokens.shape[0]
    if G.shape != (params.m, params.d) or trace.attn_weights.shape != (params.m, n_tok):
        raise ShapeError("trace or upstream gradient does not match params and tokens")
    scale = 1.0 / np.sqrt(params.d)

    dW2 = trace.hidden.T @ G
    db2 = G.sum(axis=0)
    d_hidden_pre = (G @ params.W2.T) * (1.0 - trace.hidden**2)
    dW1 = trace.attn_out.T @ d_hidden_pre
    db1 = d_hidden_pre.sum(axis=0)
    d_attn_out = d_hidden_pre @ params.W1.T

    A = trace.attn_weights
    dA = d_attn_out @ trace.values.T
    d_values = A.T @ d_attn_out
    d_scores = A * (dA - (dA * A).sum(axis=1, keepdims=True)) * scale
    dQ = d_scores @ trace.keys
    d_keys = d_scores.T @ params.Q

    return PromptGeneratorParams(
        Q=dQ, W_K=T.tokens.T @ d_keys, W_V=T.tokens.T @ d_values,
        W1=dW1, b1=db1, W2=dW2, b2=db2,
    )


# -- checkpoint format -----------------------------------------------------
#
# "VLPG" | u32 version | u32 tensor count | per tensor:
#   u16 name length, UTF-8 name, u8 rank, u32 dims..., float32 data (row-major)
# All integers and floats little-endian.

def serialize_tensors(tensors: list[tuple[str, np.ndarray]]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors:
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def deserialize_tensors(data: bytes) -> list[tuple[str, np.ndarray]]:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"truncated payload at byte {pos}, need {n} more")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise FormatError("bad magic, expected b'VLPG'")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    out = []
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("tensor name is not UTF-8") from exc
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(bytes(take(4 * n)), dtype="<f4").astype(np.float64)
        out.append((name, arr.reshape(dims)))
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes after last tensor")
    return out


def serialize_params(params: PromptGeneratorParams) -> bytes:
    return serialize_tensors(params.tensors())


def deserialize_params(data: bytes) -> PromptGeneratorParams:
    tensors = dict(deserialize_tensors(data))
    if tuple(tensors) != TENSOR_NAMES:
        raise FormatError(f"expected tensors {TENSOR_NAMES}, got {tuple(tensors)}")
    return PromptGeneratorParams(**tensors)


def header_size(tensors: list[tuple[str, np.ndarray]]) -> int:
    return 12 + sum(2 + len(n.encode("utf-8")) + 1 + 4 * np.ndim(a) for n, a in tensors)


def quantize(x: np.ndarray) -> np.ndarray:
    """Round to float32 and back, i.e. what survives a trip over the wire."""
    return np.asarray(x, dtype=np.float32).astype(np.float64)
