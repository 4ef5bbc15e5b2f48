"""Privacy amplification by binary Toeplitz hashing.

T[i, j] = seed[i - j + n - 1], so output bit i is the parity of
seed[i : i + n] AND reversed(key).  Both operands are packed into uint64
words; each output bit is a word-wise AND followed by a parity fold.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_CHUNK_WORDS = 1 << 22  # bound on uint64 words held per batch


@dataclass(frozen=True)
class ToeplitzSpec:
    input_len: int
    output_len: int
    diagonal_seed: np.ndarray

    def __post_init__(self):
        if self.output_len < 0 or self.output_len > self.input_len:
            raise ValueError("need 0 <= output_len <= input_len")
        want = self.input_len + self.output_len - 1 if self.output_len else 0
        if len(self.diagonal_seed) != want:
            raise ValueError(f"diagonal_seed must hold {want} bits")

    @classmethod
    def from_seed(cls, input_len: int, output_len: int, seed) -> "ToeplitzSpec":
        rng = np.random.default_rng(seed)
        n_bits = input_len + output_len - 1 if output_len else 0
        return cls(input_len, output_len, rng.integers(0, 2, n_bits, dtype=np.uint8))


def _pack_words(bits: np.ndarray, n_words: int) -> np.ndarray:
    """Little-endian bit packing: bit k of the input is bit k % 64 of word k // 64."""
    buf = np.zeros(n_words * 64, dtype=np.uint8)
    buf[:len(bits)] = bits[:n_words * 64]
    return np.packbits(buf, bitorder="little").view("<u8")


def _parity64(x: np.ndarray) -> np.ndarray:
    for s in (32, 16, 8, 4, 2, 1):
        x = x ^ (x >> np.uint64(s))
    return (x & np.uint64(1)).astype(np.uint8)


def privacy_amplify(key, spec: ToeplitzSpec) -> np.ndarray:
    key = np.asarray(key, dtype=np.uint8)
    if len(key) != spec.input_len:
        raise ValueError("key length does not match the Toeplitz spec")
    n, ell = spec.input_len, spec.output_len
    if ell == 0:
        return np.zeros(0, dtype=np.uint8)
    n_words = -(-n // 64)
    rev = _pack_words(key[::-1], n_words)
    seed = np.asarray(spec.diagonal_seed, dtype=np.uint8)
    out = np.empty(ell, dtype=np.uint8)
    per_offset = -(-ell // 64)
    rows = max(1, _CHUNK_WORDS // n_words)
    for off in range(min(64, ell)):
        # words of seed[off + 64 w :] for every w; window b covers output off + 64 b
        shifted = _pack_words(seed[off:], per_offset + n_words)
        windows = sliding_window_view(shifted, n_words)
        idx = np.arange(off, ell, 64)
        for lo in range(0, len(idx), rows):
            block = windows[lo:lo + rows][:len(idx[lo:lo + rows])]
            acc = np.bitwise_xor.reduce(block & rev, axis=1)
            out[idx[lo:lo + rows]] = _parity64(acc)
    return out


def toeplitz_matrix(spec: ToeplitzSpec) -> np.ndarray:
    """Dense (output_len, input_len) matrix; reference implementation for tests."""
    n, ell = spec.input_len, spec.output_len
    i = np.arange(ell)[:, None]
    j = np.arange(n)[None, :]
    return np.asarray(spec.diagonal_seed, dtype=np.uint8)[i - j + n - 1]
