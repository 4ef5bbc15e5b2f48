"""Classical post-processing: reconciliation, verification and privacy amplification."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .amplification import ToeplitzSpec, privacy_amplify, toeplitz_matrix
from .cascade import (
    CascadeInitiator, CascadeResponder, ParityQuery, ParityReply, ReconciliationSession,
    cascade_reconcile, decode_messages, encode_message,
)
from .verification import VerificationTag, compute_tag, tag_length, verify

__all__ = [
    "CascadeInitiator", "CascadeResponder", "ParityQuery", "ParityReply",
    "ReconciliationSession", "ToeplitzSpec", "VerificationTag", "cascade_reconcile",
    "compute_tag", "decode_messages", "encode_message", "format_key", "measure_qber",
    "privacy_amplify", "reconcile_in_blocks", "tag_length", "toeplitz_matrix", "verify",
    "write_key_file",
]


def measure_qber(original_b, corrected_b) -> float:
    a = np.asarray(original_b, dtype=np.uint8)
    b = np.asarray(corrected_b, dtype=np.uint8)
    if a.shape != b.shape:
        raise ValueError("keys must have equal length")
    if a.size == 0:
        return 0.0
    return int(np.count_nonzero(a != b)) / a.size


def reconcile_in_blocks(key_a, key_b, qber_estimate: float, block_size: int, seed):
    """CASCADE over consecutive sub-blocks; leakage is summed.

    Returns (corrected_b, m_ir, sessions).
    """
    key_a = np.asarray(key_a, dtype=np.uint8)
    key_b = np.asarray(key_b, dtype=np.uint8)
    if key_a.shape != key_b.shape:
        raise ValueError("keys must have equal length")
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    count = max(1, -(-len(key_a) // block_size))
    # children derived by spawn key so the caller's SeedSequence is not mutated
    seeds = [np.random.SeedSequence(root.entropy, spawn_key=tuple(root.spawn_key) + (i,))
             for i in range(count)]
    pieces, m_ir, sessions = [], 0, []
    for i, start in enumerate(range(0, len(key_a), block_size)):
        sl = slice(start, start + block_size)
        corrected, leak, session = cascade_reconcile(key_a[sl], key_b[sl], qber_estimate, seeds[i])
        pieces.append(corrected)
        m_ir += leak
        sessions.append(session)
    corrected = np.concatenate(pieces) if pieces else key_b.copy()
    return corrected, m_ir, sessions


def format_key(bits, header: dict) -> str:
    """Hex key text with a ``# key=value`` header; the last byte is zero padded."""
    bits = np.asarray(bits, dtype=np.uint8)
    lines = [f"# {k}={header[k]}" for k in sorted(header)]
    lines.append(f"# bits={len(bits)}")
    lines.append(np.packbits(bits).tobytes().hex() if len(bits) else "")
    return "\n".join(lines) + "\n"


def write_key_file(path, bits, header: dict) -> Path:
    path = Path(path)
    path.write_text(format_key(bits, header))
    return path
