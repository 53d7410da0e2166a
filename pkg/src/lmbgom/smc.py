"""Particle-filtering primitives: seedable streams, weights, resampling."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np


class DegenerateWeightsError(ValueError):
    """Every weight in a vector is zero, so it cannot be normalized."""


def stable_key(obj) -> int:
    """64-bit key of ``repr(obj)`` that is identical across processes."""
    digest = hashlib.blake2b(repr(obj).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass(frozen=True)
class RandomStream:
    """Counter-based random stream.

    A stream is a value: ``(seed, path)`` always yields the same draws, and
    children derived with :meth:`child` are independent of each other and of
    the order in which they are consumed.
    """

    seed: int
    path: tuple[int, ...] = ()

    def child(self, *keys) -> "RandomStream":
        ints = tuple(k if isinstance(k, int) and 0 <= k < 2**63 else stable_key(k) for k in keys)
        return RandomStream(self.seed, self.path + ints)

    @property
    def stream_id(self) -> int:
        return stable_key(self.path)

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed & (2**64 - 1), spawn_key=self.path)
        return np.random.Generator(np.random.PCG64(ss))


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RandomStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def normalize(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    total = w.sum()
    if total <= 0:
        raise DegenerateWeightsError("all weights are zero")
    return w / total


def normalize_log(log_weights) -> tuple[np.ndarray, float]:
    """Normalize log-weights; also return log of the un-normalized sum."""
    lw = np.asarray(log_weights, dtype=float)
    m = np.max(lw) if lw.size else -np.inf
    if not np.isfinite(m):
        raise DegenerateWeightsError("all weights are zero")
    w = np.exp(lw - m)
    s = w.sum()
    return w / s, float(m + np.log(s))


def effective_sample_size(weights) -> float:
    w = np.asarray(weights, dtype=float)
    return float(1.0 / np.sum(w * w))


def systematic_indices(weights, n: int, rng) -> np.ndarray:
    """Indices of a systematic resample of size ``n`` (one uniform offset)."""
    w = np.asarray(weights, dtype=float)
    gen = as_generator(rng)
    positions = (gen.random() + np.arange(n)) / n
    cdf = np.cumsum(w)
    cdf[-1] = 1.0
    idx = np.searchsorted(cdf, positions, side="right")
    return np.minimum(idx, len(w) - 1)


def resample_systematic(states, weights, rng, n: int | None = None):
    """Resample ``states`` (leading axis = particle) to ``n`` equal weights."""
    states = np.asarray(states)
    n = len(weights) if n is None else n
    idx = systematic_indices(weights, n, rng)
    return states[idx], np.full(n, 1.0 / n)
