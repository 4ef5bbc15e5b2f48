"""One CPP block from photons to final keys.

Seed splitting: the root seed feeds ``numpy.random.SeedSequence``; block i
uses child i, which has children 0..5 for (symbols, channel, sifting,
reconciliation, verification, amplification).  Children are derived from
spawn keys without mutating the parent, so a block can be rerun alone.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .postproc import (
    ToeplitzSpec, measure_qber, privacy_amplify, reconcile_in_blocks, verify,
)
from .security import KeyLengthResult, ObservedBlock, SecurityParams, optimize_beta
from .sim import alice_generate, dark_corrected, sift, transmit_detect
from .system import SystemConfig, system_stats

MIN_IR_BLOCK = 1024
#: bounds on the a-priori error estimate handed to CASCADE
QBER_ESTIMATE_RANGE = (1e-3, 0.25)


@dataclass
class BlockResult:
    block_id: int
    n_symbols: int
    duration_s: float
    n_cpp: int
    n_vis: int
    q_raw: float = float("nan")
    q_hat: float = float("nan")
    v_obs: float = float("nan")
    v_hat: float = float("nan")
    m_ir: int = 0
    ell: int = 0
    beta: float = float("nan")
    verified: bool = False
    abort_reason: str | None = None
    reconciled_match: bool = False
    key_alice: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint8), repr=False)
    key_bob: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint8), repr=False)

    def stats_dict(self) -> dict:
        return {
            "block_id": self.block_id, "n_symbols": self.n_symbols,
            "duration_s": self.duration_s, "n_cpp": self.n_cpp, "n_vis": self.n_vis,
            "q_raw": self.q_raw, "q_hat": self.q_hat, "v_obs": self.v_obs,
            "v_hat": self.v_hat, "m_ir": self.m_ir, "ell": self.ell, "beta": self.beta,
            "verified": self.verified, "abort_reason": self.abort_reason,
        }


def ir_block_size(n_cpp: int) -> int:
    return max(n_cpp // 100, MIN_IR_BLOCK)


def block_seeds(root_seed, n_blocks: int):
    return [child_seed(np.random.SeedSequence(root_seed), i) for i in range(n_blocks)]


def child_seed(seed: np.random.SeedSequence, index: int) -> np.random.SeedSequence:
    """Child ``index`` of ``seed``; unlike ``spawn`` this leaves ``seed`` untouched."""
    return np.random.SeedSequence(seed.entropy, spawn_key=tuple(seed.spawn_key) + (index,))


def run_block(config: SystemConfig, params: SecurityParams, n_symbols: int,
              seed: np.random.SeedSequence, block_id: int = 0,
              ir_block: int | None = None) -> BlockResult:
    s_sym, s_chan, s_sift, s_ir, s_ver, s_pa = (child_seed(seed, j) for j in range(6))
    stream = alice_generate(n_symbols, config.source.decoy_prob, s_sym)
    records = transmit_detect(stream, config, s_chan)
    blk = sift(records, stream, s_sift)
    res = BlockResult(block_id, n_symbols, blk.duration_s, blk.n_cpp, blk.n_vis, v_obs=blk.v_obs)
    if blk.n_cpp == 0:
        res.abort_reason = "no sifted bits"
        return res

    lo, hi = QBER_ESTIMATE_RANGE
    estimate = min(max(system_stats(config).q_raw, lo), hi)
    size = ir_block or ir_block_size(blk.n_cpp)
    corrected, m_ir, _ = reconcile_in_blocks(blk.alice_bits, blk.bob_bits, estimate, size, s_ir)
    res.m_ir = int(min(m_ir, blk.n_cpp))
    res.reconciled_match = bool(np.array_equal(corrected, blk.alice_bits))
    ver_seed = int(s_ver.generate_state(1, np.uint64)[0] >> np.uint64(1))
    res.verified, _ = verify(blk.alice_bits, corrected, params.eps_cor, ver_seed)
    if not res.verified:
        res.abort_reason = "error verification failed"
        return res

    res.q_raw = measure_qber(blk.bob_bits, corrected)
    res.q_hat, res.v_hat = dark_corrected(blk, config, q_raw=res.q_raw)
    if blk.n_vis < 1:
        res.abort_reason = "no monitoring events"
        return res
    observed = ObservedBlock(n_cpp=blk.n_cpp, n_vis=blk.n_vis, q_hat=res.q_hat,
                             v_obs=res.v_hat, m_ir=res.m_ir, mu=config.source.mu)
    key: KeyLengthResult = optimize_beta(observed, params)
    res.ell, res.beta = key.ell, key.beta_used
    if key.ell == 0:
        res.abort_reason = key.abort_reason
        return res
    spec = ToeplitzSpec.from_seed(blk.n_cpp, key.ell, s_pa)
    res.key_alice = privacy_amplify(blk.alice_bits, spec)
    res.key_bob = privacy_amplify(corrected, spec)
    return res


def run_blocks(config: SystemConfig, params: SecurityParams, n_blocks: int, n_symbols: int,
               root_seed: int, ir_block: int | None = None) -> list[BlockResult]:
    return [run_block(config, params, n_symbols, s, i, ir_block)
            for i, s in enumerate(block_seeds(root_seed, n_blocks))]


def aggregate(results: list[BlockResult]) -> dict:
    duration = sum(r.duration_s for r in results)
    bits = sum(r.ell for r in results)
    return {
        "blocks": len(results),
        "blocks_with_key": sum(r.ell > 0 for r in results),
        "blocks_verified": sum(r.verified for r in results),
        "total_secret_bits": bits,
        "total_duration_s": duration,
        "skr_bps": bits / duration if duration > 0 else 0.0,
    }
