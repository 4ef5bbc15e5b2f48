"""CASCADE reconciliation as a two-party message exchange.

Bob (initiator) holds the noisy key and drives the protocol.  Alice
(responder) only answers parity queries on her key.  Both sides derive the
per-pass permutations from a shared seed, so a query names ranges in the
permuted order of a pass and no key material crosses the channel.

Every parity bit Alice returns is disclosed information; the session counts
them, and identical ranges are never asked twice.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

PASS_COUNT = 4
K1_CONSTANT = 0.73

_HEAD = struct.Struct(">BBI")   # kind, pass index, record count
_RANGE = struct.Struct(">III")  # block index, start, end
_LEN = struct.Struct(">I")
QUERY, REPLY = 1, 2


@dataclass(frozen=True)
class ParityQuery:
    pass_index: int
    ranges: tuple  # ((block, start, end), ...)


@dataclass(frozen=True)
class ParityReply:
    pass_index: int
    ranges: tuple
    parities: tuple


def encode_message(msg) -> bytes:
    kind = QUERY if isinstance(msg, ParityQuery) else REPLY
    body = [_HEAD.pack(kind, msg.pass_index, len(msg.ranges))]
    body += [_RANGE.pack(*r) for r in msg.ranges]
    if kind == REPLY:
        body.append(np.packbits(np.asarray(msg.parities, dtype=np.uint8)).tobytes())
    payload = b"".join(body)
    return _LEN.pack(len(payload)) + payload


def decode_messages(data: bytes) -> list:
    out, pos = [], 0
    while pos < len(data):
        (length,) = _LEN.unpack_from(data, pos)
        pos += _LEN.size
        payload = data[pos:pos + length]
        if len(payload) != length:
            raise ValueError("truncated message")
        pos += length
        kind, pass_index, count = _HEAD.unpack_from(payload, 0)
        off = _HEAD.size
        ranges = tuple(_RANGE.unpack_from(payload, off + i * _RANGE.size) for i in range(count))
        off += count * _RANGE.size
        if kind == QUERY:
            out.append(ParityQuery(pass_index, ranges))
        elif kind == REPLY:
            bits = np.unpackbits(np.frombuffer(payload[off:], dtype=np.uint8))[:count]
            out.append(ParityReply(pass_index, ranges, tuple(int(b) for b in bits)))
        else:
            raise ValueError(f"unknown message kind {kind}")
    return out


def initial_block_size(qber_estimate: float) -> int:
    if not 0.0 < qber_estimate <= 0.25:
        raise ValueError("qber_estimate must lie in (0, 0.25]")
    # the small offset keeps 0.73/q from rounding up when it is an integer
    return max(1, math.ceil(K1_CONSTANT / qber_estimate - 1e-9))


def pass_permutations(n: int, seed, pass_count: int = PASS_COUNT) -> list[np.ndarray]:
    """Identity for the first pass, seeded shuffles afterwards."""
    rng = np.random.default_rng(seed)
    perms = [np.arange(n)]
    for _ in range(1, pass_count):
        perms.append(rng.permutation(n))
    return perms


def _block_bounds(n, k):
    starts = np.arange(0, n, k)
    return starts, np.minimum(starts + k, n)


class CascadeResponder:
    """Alice's side: answers parity queries from her key."""

    def __init__(self, key: np.ndarray, seed, pass_count: int = PASS_COUNT):
        key = np.asarray(key, dtype=np.uint8)
        self._permuted = [key[p] for p in pass_permutations(len(key), seed, pass_count)]
        self._prefix = [np.concatenate(([0], np.cumsum(k, dtype=np.int64))) for k in self._permuted]

    def respond(self, query: ParityQuery) -> ParityReply:
        prefix = self._prefix[query.pass_index]
        r = np.asarray(query.ranges, dtype=np.int64).reshape(-1, 3)
        par = ((prefix[r[:, 2]] - prefix[r[:, 1]]) & 1).astype(int)
        return ParityReply(query.pass_index, query.ranges, tuple(par.tolist()))


@dataclass
class ReconciliationSession:
    role: str
    block_size_initial: int
    pass_count: int = PASS_COUNT
    disclosed_bits: int = 0
    transcript: list = field(default_factory=list)

    def encode_transcript(self) -> bytes:
        return b"".join(encode_message(m) for m in self.transcript)


class CascadeInitiator:
    """Bob's side: corrects his key through parity queries to Alice."""

    def __init__(self, key: np.ndarray, qber_estimate: float, seed,
                 pass_count: int = PASS_COUNT):
        self.key = np.array(key, dtype=np.uint8)
        n = len(self.key)
        k1 = initial_block_size(qber_estimate)
        self.session = ReconciliationSession("initiator", k1, pass_count)
        self.perms = pass_permutations(n, seed, pass_count)
        self.inv = [np.argsort(p) for p in self.perms]
        # every pass keeps at least two blocks, otherwise an error pair is invisible
        cap = max(-(-n // 2), 1)
        self.sizes = [min(k1 * 2**p, cap) for p in range(pass_count)]
        self.permuted = [self.key[p] for p in self.perms]
        self._alice_cache: dict = {}
        self._alice_block = [None] * pass_count
        self._bob_block = [None] * pass_count
        self.corrected_positions: list[int] = []

    # -- channel helpers --------------------------------------------------------
    def _ask(self, channel, pass_index, ranges):
        todo = tuple(r for r in ranges if (pass_index, r[1], r[2]) not in self._alice_cache)
        if todo:
            query = ParityQuery(pass_index, todo)
            reply = channel(query)
            if reply.ranges != todo or len(reply.parities) != len(todo):
                raise ValueError("reply does not match query")
            self.session.transcript += [query, reply]
            self.session.disclosed_bits += len(reply.parities)
            for r, b in zip(todo, reply.parities):
                self._alice_cache[(pass_index, r[1], r[2])] = int(b)
        return [self._alice_cache[(pass_index, r[1], r[2])] for r in ranges]

    def _bob_parity(self, p, start, end):
        return int(self.permuted[p][start:end].sum() & 1)

    def _flip(self, pos):
        self.key[pos] ^= 1
        self.corrected_positions.append(int(pos))
        touched = []
        for p in range(len(self.perms)):
            idx = self.inv[p][pos]
            self.permuted[p][idx] ^= 1
            if self._bob_block[p] is not None:
                b = idx // self.sizes[p]
                self._bob_block[p][b] ^= 1
                touched.append((p, b))
        return touched

    def _binary_search(self, channel, p, block):
        n = len(self.key)
        start = block * self.sizes[p]
        end = min(start + self.sizes[p], n)
        while end - start > 1:
            mid = (start + end) // 2
            (alice,) = self._ask(channel, p, [(block, start, mid)])
            if alice != self._bob_parity(p, start, mid):
                end = mid
            else:
                start = mid
        return int(self.perms[p][start])

    def run(self, channel: Callable[[ParityQuery], ParityReply]) -> np.ndarray:
        n = len(self.key)
        if n == 0:
            return self.key
        for p in range(len(self.perms)):
            starts, ends = _block_bounds(n, self.sizes[p])
            ranges = [(i, int(s), int(e)) for i, (s, e) in enumerate(zip(starts, ends))]
            self._alice_block[p] = np.array(self._ask(channel, p, ranges), dtype=np.uint8)
            prefix = np.concatenate(([0], np.cumsum(self.permuted[p], dtype=np.int64)))
            self._bob_block[p] = ((prefix[ends] - prefix[starts]) & 1).astype(np.uint8)
            queue = [(p, int(b)) for b in np.flatnonzero(self._alice_block[p] != self._bob_block[p])]
            while queue:
                # smallest blocks first: they are the cheapest to search
                queue.sort(key=lambda pb: self.sizes[pb[0]])
                q, b = queue.pop(0)
                if self._alice_block[q][b] == self._bob_block[q][b]:
                    continue
                pos = self._binary_search(channel, q, b)
                for pb in self._flip(pos):
                    if self._alice_block[pb[0]][pb[1]] != self._bob_block[pb[0]][pb[1]]:
                        queue.append(pb)
        return self.key


def cascade_reconcile(key_a, key_b, qber_estimate: float, seed=0,
                      pass_count: int = PASS_COUNT):
    """Run both parties locally; returns (corrected_b, m_ir, session)."""
    key_a = np.asarray(key_a, dtype=np.uint8)
    key_b = np.asarray(key_b, dtype=np.uint8)
    if key_a.shape != key_b.shape:
        raise ValueError("keys must have equal length")
    alice = CascadeResponder(key_a, seed, pass_count)
    bob = CascadeInitiator(key_b, qber_estimate, seed, pass_count)
    corrected = bob.run(alice.respond)
    return corrected, bob.session.disclosed_bits, bob.session


def replay_initiator(key_b, qber_estimate: float, seed, transcript: list,
                     pass_count: int = PASS_COUNT) -> np.ndarray:
    """Re-run Bob's side against recorded replies; must retrace the transcript."""
    replies = iter(m for m in transcript if isinstance(m, ParityReply))
    expected = iter(m for m in transcript if isinstance(m, ParityQuery))

    def channel(query):
        if query != next(expected):
            raise ValueError("replay diverged from the recorded transcript")
        return next(replies)

    bob = CascadeInitiator(key_b, qber_estimate, seed, pass_count)
    return bob.run(channel)


def audit_transcript(key_a, seed, transcript: list, pass_count: int = PASS_COUNT) -> int:
    """Recompute every recorded parity from Alice's key; returns the disclosed count."""
    alice = CascadeResponder(key_a, seed, pass_count)
    disclosed = 0
    for msg in transcript:
        if isinstance(msg, ParityReply):
            if alice.respond(ParityQuery(msg.pass_index, msg.ranges)).parities != msg.parities:
                raise ValueError("recorded parity does not match the key")
            disclosed += len(msg.parities)
    return disclosed
