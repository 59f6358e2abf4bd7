"""Dense linear algebra helpers, seeded random streams and the AdamW optimizer.

Matrices are plain ``float64`` numpy arrays of rank 2. Everything random in the
package is drawn from :class:`RngStream`, a SplitMix64 generator whose output
is fully determined by its seed, so experiments replay bit for bit.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .errors import EvaluationError, ShapeError

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)

STREAM_NAMES = ("init", "selection", "world", "scenes", "batching")


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = a @ b
    if not np.all(np.isfinite(out)):
        raise EvaluationError("matmul produced non-finite entries")
    return out


def softmax_rows(a) -> np.ndarray:
    a = as_matrix(a)
    z = a - a.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _splitmix(counters: np.ndarray) -> np.ndarray:
    z = counters.copy()
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _derive_key(*parts) -> int:
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(repr(p).encode("utf-8"))
        h.update(b"\x00")
    return int.from_bytes(h.digest(), "little")


class RngStream:
    """Named SplitMix64 stream.

    ``key`` identifies the stream and never changes; ``state`` advances with
    every draw. :meth:`spawn` derives children from the key alone, so a child
    does not depend on how many values the parent has produced.
    """

    def __init__(self, seed: int, name: str = "root"):
        self.name = name
        self.key = _derive_key("stream", int(seed) & _MASK, name)
        self.state = self.key

    def spawn(self, *labels) -> "RngStream":
        child = RngStream.__new__(RngStream)
        child.name = "/".join([self.name, *map(str, labels)])
        child.key = _derive_key("spawn", self.key, *labels)
        child.state = child.key
        return child

    def next_u64(self, n: int) -> np.ndarray:
        if n <= 0:
            return np.zeros(0, dtype=np.uint64)
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            counters = np.uint64(self.state) + steps * np.uint64(_GAMMA)
            out = _splitmix(counters)
        self.state = (self.state + n * _GAMMA) & _MASK
        return out

    def uniform(self, n: int) -> np.ndarray:
        """``n`` floats in [0, 1) built from the top 53 bits."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal(self, n: int) -> np.ndarray:
        """``n`` standard normals via Box-Muller (both outputs of each pair used)."""
        if n <= 0:
            return np.zeros(0)
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        u1 = 1.0 - u[0::2]
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(2.0 * np.pi * u2)
        out[1::2] = r * np.sin(2.0 * np.pi * u2)
        return out[:n]

    def integers(self, high: int, n: int) -> np.ndarray:
        return np.floor(self.uniform(n) * high).astype(np.int64)

    def randint(self, low: int, high: int) -> int:
        """One integer in the closed range [low, high]."""
        return low + int(self.integers(high - low + 1, 1)[0])

    def sample(self, n: int, k: int) -> list[int]:
        """``k`` distinct indices from range(n), partial Fisher-Yates."""
        if not 0 <= k <= n:
            raise ValueError(f"cannot sample {k} of {n}")
        pool = list(range(n))
        u = self.uniform(k)
        for i in range(k):
            j = i + int(u[i] * (n - i))
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]

    def permutation(self, n: int) -> list[int]:
        return self.sample(n, n)


def make_streams(seeds: dict[str, int] | int) -> dict[str, RngStream]:
    """One stream per standard name; an int seeds all of them."""
    if isinstance(seeds, int):
        seeds = {name: seeds for name in STREAM_NAMES}
    return {name: RngStream(seeds[name], name) for name in STREAM_NAMES}


@dataclass(frozen=True)
class AdamWState:
    m1: np.ndarray
    m2: np.ndarray
    step: int = 0
    lr: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4

    @classmethod
    def zeros(cls, n: int, **hyper) -> "AdamWState":
        return cls(m1=np.zeros(n), m2=np.zeros(n), **hyper)


def adamw_step(state: AdamWState, params, grads) -> tuple[np.ndarray, AdamWState]:
    """One AdamW update with decoupled weight decay and bias correction."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m1.shape:
        raise ShapeError(
            f"params {params.shape}, grads {grads.shape}, state {state.m1.shape}"
        )
    t = state.step + 1
    m1 = state.beta1 * state.m1 + (1.0 - state.beta1) * grads
    m2 = state.beta2 * state.m2 + (1.0 - state.beta2) * grads * grads
    m1_hat = m1 / (1.0 - state.beta1**t)
    m2_hat = m2 / (1.0 - state.beta2**t)
    decayed = params * (1.0 - state.lr * state.weight_decay)
    new = decayed - state.lr * m1_hat / (np.sqrt(m2_hat) + state.eps)
    return new, replace(state, m1=m1, m2=m2, step=t)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    x = np.array(x, dtype=np.float64)
    shape = x.shape
    x = x.ravel()
    g = np.zeros_like(x)
    for i in range(x.size):
        old = x[i]
        x[i] = old + h
        fp = f(x.reshape(shape))
        x[i] = old - h
        fm = f(x.reshape(shape))
        x[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EvaluationError(f"non-finite evaluation at coordinate {i}")
        g[i] = (fp - fm) / (2.0 * h)
    return g.reshape(shape)
