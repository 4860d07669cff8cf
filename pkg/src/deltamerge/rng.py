"""Deterministic, counter-based random streams.

Every random decision in this package is a pure function of a 64-bit stream
key and an element counter, so results never depend on traversal order,
thread schedule or library version. The generator is pinned and recorded in
output reports as RNG_VERSION; changing any constant below is a breaking
format change.

Construction (all arithmetic mod 2**64):

    mix64(x)        = splitmix64 finalizer applied to x + GOLDEN
    key derivation  = k0 = mix64(seed); k_{j+1} = mix64(k_j XOR part_j)
                      where string parts hash via FNV-1a 64 of their UTF-8
                      bytes and integer parts are used directly
    uniform(key, i) = (mix64(key + i * GOLDEN) >> 11) * 2**-53   in [0, 1)

Pruning streams use parts (tensor name, group index); Monte-Carlo trials use
the single part (trial index). A drop decision is `uniform < p`, which makes
p = 0 impossible and p = 1 certain with no special casing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

RNG_VERSION = "splitmix64-fnv1a-v1"

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3

_INV_2_53 = 2.0 ** -53


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


def mix64(x: int) -> int:
    x = (x + _GOLDEN) & _MASK64
    x = ((x ^ (x >> 30)) * _MIX1) & _MASK64
    x = ((x ^ (x >> 27)) * _MIX2) & _MASK64
    return x ^ (x >> 31)


def _mix64_vec(x: np.ndarray) -> np.ndarray:
    # uint64 array arithmetic wraps mod 2**64, matching the scalar path
    x = x + np.uint64(_GOLDEN)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(_MIX1)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(_MIX2)
    return x ^ (x >> np.uint64(31))


def _encode_part(part: int | str) -> int:
    if isinstance(part, str):
        return fnv1a64(part.encode("utf-8"))
    return part & _MASK64


def stream_key(seed: int, *parts: int | str) -> int:
    """Derive the 64-bit key of the substream identified by (seed, parts)."""
    key = mix64(seed & _MASK64)
    for part in parts:
        key = mix64(key ^ _encode_part(part))
    return key


def child_keys(parent_key: int, indices: np.ndarray) -> np.ndarray:
    """Vectorized stream_key(parent, i) for an array of integer child indices."""
    return _mix64_vec(np.uint64(parent_key) ^ indices.astype(np.uint64))


def uniform_matrix(keys: np.ndarray, count: int, start: int = 0) -> np.ndarray:
    """Uniforms in [0, 1), shape (len(keys), count), counters start..start+count-1."""
    counters = np.arange(start, start + count, dtype=np.uint64)
    states = keys.astype(np.uint64)[:, None] + counters[None, :] * np.uint64(_GOLDEN)
    return (_mix64_vec(states) >> np.uint64(11)).astype(np.float64) * _INV_2_53


@dataclass(frozen=True)
class Substream:
    """One independent random stream, addressed by counter."""

    key: int

    def uniform(self, index: int) -> float:
        """Scalar path (pure Python ints); bit-identical to uniforms()."""
        return (mix64((self.key + (index * _GOLDEN)) & _MASK64) >> 11) * _INV_2_53

    def uniforms(self, count: int, start: int = 0) -> np.ndarray:
        return uniform_matrix(np.array([self.key], dtype=np.uint64), count, start)[0]


def substream(seed: int, *parts: int | str) -> Substream:
    return Substream(stream_key(seed, *parts))
