"""Error verification by a two-stage universal hash over GF(2^64).

Stage 1 evaluates the key (as 64-bit words, followed by a length word) as a
polynomial at a secret point ``a``.  Stage 2 multiplies the result by a
secret ``b`` and keeps the top m bits.  For two distinct keys of at most L
words the tags collide with probability at most (L + 1) / 2^64 + 2^-m.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# x^64 + x^4 + x^3 + x + 1, irreducible over GF(2)
_POLY_LOW = 0x1B
_MASK = (1 << 64) - 1


def gf64_mul(x: int, y: int) -> int:
    r = 0
    while y:
        if y & 1:
            r ^= x
        y >>= 1
        carry = x >> 63
        x = (x << 1) & _MASK
        if carry:
            x ^= _POLY_LOW
    return r


def gf64_mul_array(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Element-wise GF(2^64) product of two uint64 arrays."""
    x = np.array(x, dtype=np.uint64)
    y = np.array(y, dtype=np.uint64)
    r = np.zeros(np.broadcast(x, y).shape, dtype=np.uint64)
    one, low = np.uint64(1), np.uint64(_POLY_LOW)
    for _ in range(64):
        r ^= np.where(y & one, x, np.uint64(0))
        y = y >> one
        carry = (x >> np.uint64(63)) & one
        x = (x << one) ^ (carry * low)
    return r


def key_words(bits) -> list[int]:
    """Pack bits (first bit most significant) into 64-bit words plus a length word."""
    bits = np.asarray(bits, dtype=np.uint8)
    n = len(bits)
    padded = np.zeros(-(-n // 64) * 64, dtype=np.uint8)
    padded[:n] = bits
    words = np.packbits(padded).view(">u8").tolist() if n else []
    return [int(w) for w in words] + [n]


def poly_hash(words, a: int) -> int:
    acc = 0
    for w in words:
        acc = gf64_mul(acc ^ w, a)
    return acc


def tag_length(eps_cor: float) -> int:
    if not 0.0 < eps_cor < 1.0:
        raise ValueError("eps_cor must lie in (0, 1)")
    m = math.ceil(math.log2(2.0 / eps_cor))
    if m > 64:
        raise ValueError("eps_cor too small for a 64-bit field")
    return m


def hash_keys(seed):
    """Secret hash keys (a, b) drawn from a seeded PCG64 stream."""
    rng = np.random.default_rng(seed)
    a, b = (int(v) for v in rng.integers(0, 2**64, size=2, dtype=np.uint64))
    return a, b


@dataclass(frozen=True)
class VerificationTag:
    tag_bits: str
    hash_seed: int

    @property
    def length(self) -> int:
        return len(self.tag_bits)


def compute_tag(key, eps_cor: float, seed) -> VerificationTag:
    m = tag_length(eps_cor)
    a, b = hash_keys(seed)
    value = gf64_mul(poly_hash(key_words(key), a), b) >> (64 - m)
    return VerificationTag(format(value, f"0{m}b"), int(seed))


def verify(key_a, key_b, eps_cor: float, seed):
    """Compare hash tags of both keys; returns (passed, Alice's tag)."""
    if len(key_a) != len(key_b):
        raise ValueError("keys must have equal length")
    tag_a = compute_tag(key_a, eps_cor, seed)
    tag_b = compute_tag(key_b, eps_cor, seed)
    return tag_a.tag_bits == tag_b.tag_bits, tag_a


def tag_values_batch(word_matrix: np.ndarray, a: np.ndarray, b: np.ndarray, m: int) -> np.ndarray:
    """Vectorised tags: row i of ``word_matrix`` hashed with (a[i], b[i])."""
    words = np.asarray(word_matrix, dtype=np.uint64)
    acc = np.zeros(words.shape[0], dtype=np.uint64)
    for j in range(words.shape[1]):
        acc = gf64_mul_array(acc ^ words[:, j], a)
    return gf64_mul_array(acc, b) >> np.uint64(64 - m)
