"""Monte-Carlo simulation of an honest COW link, down to sifted keys.

Photon statistics are collapsed to Poissonian click probabilities per half-slot.
Half-slot k belongs to symbol k // 2; the first half-slot is k even.

Detection records carry a ``cause`` tag for debugging only; :func:`sift` reads
slots and lines and nothing else.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from .system import (
    SystemConfig, channel_transmittance, dcr_at_temperature, expected_stats,
)

BIT0, BIT1, TEST = 0, 1, 2
KIND_NAMES = ("bit0", "bit1", "test")
LINE_DATA, LINE_MONITOR = 0, 1
LINE_NAMES = ("data", "monitor")
CAUSE_SIGNAL, CAUSE_DARK, CAUSE_AFTERPULSE = 0, 1, 2
CAUSE_NAMES = ("signal", "dark", "afterpulse")

# half-slot occupancy per symbol kind: bit0 = (empty, pulse), bit1 = (pulse, empty)
_OCCUPANCY = np.array([[False, True], [True, False], [True, True]])


@dataclass(frozen=True)
class Symbol:
    kind: str
    slot_index: int


@dataclass
class SymbolStream:
    kinds: np.ndarray  # int8 codes BIT0 / BIT1 / TEST

    def __len__(self) -> int:
        return len(self.kinds)

    def __getitem__(self, i) -> Symbol:
        return Symbol(KIND_NAMES[int(self.kinds[i])], int(i))

    def occupancy(self) -> np.ndarray:
        """Boolean (n_symbols, 2) array of occupied half-slots."""
        return _OCCUPANCY[self.kinds]

    def monitor_bin_classes(self):
        """Masks over half-slot bins: (two pulses, one pulse) feeding each monitor bin.

        Bin j combines half-slots j-1 and j; bin 0 has no predecessor.
        """
        occ = self.occupancy().ravel()
        prev = np.concatenate(([False], occ[:-1]))
        return occ & prev, occ ^ prev


def alice_generate(n_symbols: int, decoy_prob: float, seed) -> SymbolStream:
    if n_symbols < 1:
        raise ValueError("n_symbols must be >= 1")
    if not 0.0 <= decoy_prob <= 1.0:
        raise ValueError("decoy_prob must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    test = rng.random(n_symbols) < decoy_prob
    bits = rng.integers(0, 2, n_symbols, dtype=np.int8)
    return SymbolStream(np.where(test, np.int8(TEST), bits).astype(np.int8))


@dataclass(frozen=True)
class DetectionRecord:
    slot: int
    line: str
    cause: str


@dataclass
class DetectionRecords:
    """Column store of clicks, sorted by (line, slot)."""

    slot: np.ndarray
    line: np.ndarray
    cause: np.ndarray
    n_symbols: int
    rep_rate_hz: float

    def __len__(self) -> int:
        return len(self.slot)

    def __iter__(self):
        for s, ln, c in zip(self.slot, self.line, self.cause):
            yield DetectionRecord(int(s), LINE_NAMES[ln], CAUSE_NAMES[c])

    def __eq__(self, other) -> bool:
        return (isinstance(other, DetectionRecords) and self.n_symbols == other.n_symbols
                and np.array_equal(self.slot, other.slot)
                and np.array_equal(self.line, other.line)
                and np.array_equal(self.cause, other.cause))

    def line_slots(self, line: int) -> np.ndarray:
        return self.slot[self.line == line]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("slot,line,cause\n")
        for rec in self:
            buf.write(f"{rec.slot},{rec.line},{rec.cause}\n")
        return buf.getvalue()


def _dead_time_filter(slots, causes, dead_slots, ap_prob, rng):
    """Keep clicks at least ``dead_slots`` half-slots after the last kept one.

    A kept click spawns an afterpulse at the first live half-slot with
    probability ``ap_prob``.
    """
    if len(slots) == 0 or (dead_slots <= 0 and ap_prob == 0.0):
        return slots, causes
    kept_s, kept_c = [], []
    i, n = 0, len(slots)
    gap = max(int(math.ceil(dead_slots)), 1)
    while i < n:
        t = int(slots[i])
        kept_s.append(t)
        kept_c.append(int(causes[i]))
        while ap_prob > 0.0 and rng.random() < ap_prob:
            t += gap
            kept_s.append(t)
            kept_c.append(CAUSE_AFTERPULSE)
        if dead_slots <= 0:
            i += 1
        else:
            i = int(np.searchsorted(slots, t + dead_slots, side="left"))
    return np.asarray(kept_s, dtype=np.int64), np.asarray(kept_c, dtype=np.int8)


def _rare_events(rng, n, p):
    """Boolean mask of n Bernoulli(p) trials; cheap when p is tiny."""
    p = np.asarray(p, dtype=float)
    if p.ndim == 0:
        if p <= 0.0:
            return np.zeros(n, dtype=bool)
        k = rng.binomial(n, float(p))
        mask = np.zeros(n, dtype=bool)
        mask[rng.choice(n, size=k, replace=False)] = True
        return mask
    return rng.random(n) < p


def transmit_detect(stream: SymbolStream, config: SystemConfig, seed) -> DetectionRecords:
    src, rate = config.source, config.source.rep_rate_hz
    rng = np.random.default_rng(seed)
    n_sym = len(stream)
    n_half = 2 * n_sym
    trans = channel_transmittance(config.link)
    occ = stream.occupancy().ravel()

    # data line
    p_sig = -math.expm1(-src.mu * trans * config.det_data.efficiency * config.data_tap)
    d = dcr_at_temperature(config.det_data) / (2.0 * rate)
    sig = occ & (rng.random(n_half) < p_sig) if p_sig > 0 else np.zeros(n_half, dtype=bool)
    dark = _rare_events(rng, n_half, d)
    click = sig | dark
    # intrinsic errors move a lone click to the other half-slot
    per_sym = click.reshape(n_sym, 2)
    lone = per_sym.sum(axis=1) == 1
    flip = lone & (rng.random(n_sym) < src.intrinsic_error)
    per_sym[flip] = ~per_sym[flip]
    cause = np.where(sig, CAUSE_SIGNAL, CAUSE_DARK).reshape(n_sym, 2)
    cause[flip] = cause[flip][:, ::-1]
    data_slots = np.flatnonzero(click)
    data_causes = cause.ravel()[data_slots].astype(np.int8)
    data_slots, data_causes = _dead_time_filter(
        data_slots, data_causes, config.det_data.dead_time_s * 2.0 * rate,
        config.det_data.afterpulse_prob, rng)

    # monitor line, destructive port
    both, single = stream.monitor_bin_classes()
    m_m = src.mu * trans * config.det_mon.efficiency * (1.0 - config.data_tap)
    mean = np.where(both, m_m * (1.0 - src.intrinsic_visibility) / 2.0,
                    np.where(single, m_m / 4.0, 0.0))
    mon_sig = rng.random(n_half) < -np.expm1(-mean)
    d_m = dcr_at_temperature(config.det_mon) / (2.0 * rate)
    mon_click = mon_sig | _rare_events(rng, n_half, d_m)
    mon_slots = np.flatnonzero(mon_click)
    mon_causes = np.where(mon_sig[mon_slots], CAUSE_SIGNAL, CAUSE_DARK).astype(np.int8)
    mon_slots, mon_causes = _dead_time_filter(
        mon_slots, mon_causes, config.det_mon.dead_time_s * 2.0 * rate,
        config.det_mon.afterpulse_prob, rng)

    # afterpulses may land past the frame end; drop them
    keep_d, keep_m = data_slots < n_half, mon_slots < n_half
    slots = np.concatenate((data_slots[keep_d], mon_slots[keep_m])).astype(np.int64)
    lines = np.concatenate((np.full(keep_d.sum(), LINE_DATA, np.int8),
                            np.full(keep_m.sum(), LINE_MONITOR, np.int8)))
    causes = np.concatenate((data_causes[keep_d], mon_causes[keep_m])).astype(np.int8)
    return DetectionRecords(slots, lines, causes, n_sym, rate)


@dataclass
class SiftedBlock:
    alice_bits: np.ndarray
    bob_bits: np.ndarray
    n_vis: int
    v_obs: float
    n_cpp: int
    slot_map: np.ndarray
    # monitor and data-line bookkeeping used for dark subtraction
    mon_int_clicks: int = 0
    mon_single_clicks: int = 0
    mon_int_bins: int = 0
    mon_single_bins: int = 0
    mon_clicks: int = 0
    n_bit_symbols: int = 0
    data_clicks: int = 0
    double_clicks: int = 0
    duration_s: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def raw_errors(self) -> int:
        return int(np.count_nonzero(self.alice_bits != self.bob_bits))

    def save(self, path) -> None:
        np.savez_compressed(
            path, alice_bits=self.alice_bits, bob_bits=self.bob_bits, slot_map=self.slot_map,
            scalars=np.array([self.n_vis, self.n_cpp, self.mon_int_clicks, self.mon_single_clicks,
                              self.mon_int_bins, self.mon_single_bins, self.mon_clicks,
                              self.n_bit_symbols, self.data_clicks, self.double_clicks],
                             dtype=np.int64),
            floats=np.array([self.v_obs, self.duration_s]),
        )

    @classmethod
    def load(cls, path) -> "SiftedBlock":
        with np.load(path) as z:
            s = [int(x) for x in z["scalars"]]
            v_obs, duration = (float(x) for x in z["floats"])
            return cls(z["alice_bits"], z["bob_bits"], s[0], v_obs, s[1], z["slot_map"],
                       *s[2:], duration_s=duration)


def visibility_estimate(int_clicks, int_bins, single_clicks, single_bins) -> float:
    """V = 1 - p_int / (2 p_single), clipped to [0, 1]; 0 when undefined."""
    if int_bins == 0 or single_bins == 0 or single_clicks == 0:
        return 0.0
    p_int, p_single = int_clicks / int_bins, single_clicks / single_bins
    return min(max(1.0 - p_int / (2.0 * p_single), 0.0), 1.0)


def sift(records: DetectionRecords, stream: SymbolStream, seed=0) -> SiftedBlock:
    """Turn clicks into raw keys and monitor statistics.

    A data click in the first half-slot reads as bit 1, in the second as bit 0.
    Both half-slots clicking gives a uniformly random bit (seeded by ``seed``).
    Clicks in test-state symbols are discarded.
    """
    n_sym = len(stream)
    if records.n_symbols != n_sym:
        raise ValueError("records and stream describe different frames")
    if len(records) and (records.slot.min() < 0 or records.slot.max() >= 2 * n_sym):
        raise ValueError("detection record references a slot outside the frame")
    rng = np.random.default_rng(seed)

    data = np.unique(records.line_slots(LINE_DATA))
    sym, half = data // 2, data % 2
    first = np.zeros(n_sym, dtype=bool)
    second = np.zeros(n_sym, dtype=bool)
    first[sym[half == 0]] = True
    second[sym[half == 1]] = True
    clicked = np.flatnonzero(first | second)
    is_bit = stream.kinds[clicked] != TEST
    kept = clicked[is_bit]
    double = first[kept] & second[kept]
    bob = np.where(first[kept], 1, 0).astype(np.uint8)
    bob[double] = rng.integers(0, 2, int(double.sum()), dtype=np.uint8)
    alice = stream.kinds[kept].astype(np.uint8)

    both, single = stream.monitor_bin_classes()
    mon = np.unique(records.line_slots(LINE_MONITOR))
    int_clicks = int(both[mon].sum())
    single_clicks = int(single[mon].sum())
    int_bins, single_bins = int(both.sum()), int(single.sum())
    v_obs = visibility_estimate(int_clicks, int_bins, single_clicks, single_bins)
    n_vis = int(round(4.0 * int_bins * single_clicks / single_bins)) if single_bins else 0

    return SiftedBlock(
        alice_bits=alice, bob_bits=bob, n_vis=n_vis, v_obs=v_obs, n_cpp=len(kept),
        slot_map=kept.astype(np.int64), mon_int_clicks=int_clicks,
        mon_single_clicks=single_clicks, mon_int_bins=int_bins, mon_single_bins=single_bins,
        mon_clicks=len(mon), n_bit_symbols=int(np.count_nonzero(stream.kinds != TEST)),
        data_clicks=len(data), double_clicks=int(double.sum()),
        duration_s=n_sym / records.rep_rate_hz,
    )


def dark_corrected(block: SiftedBlock, config: SystemConfig, q_raw: float | None = None):
    """(q_hat, v_hat) after removing the characterised detector noise.

    ``q_raw`` is the measured error rate; by default it is counted from the
    sifted keys directly.

    Dark probabilities come from the detector model; the fraction of time a
    detector was live is estimated from its observed click rate,
    live = 1 - rate_obs * dead_time.
    """
    rate = config.source.rep_rate_hz
    d = dcr_at_temperature(config.det_data) / (2.0 * rate)
    d_m = dcr_at_temperature(config.det_mon) / (2.0 * rate)
    live = max(1.0 - block.data_clicks / block.duration_s * config.det_data.dead_time_s, 0.0)
    live_m = max(1.0 - block.mon_clicks / block.duration_s * config.det_mon.dead_time_s, 0.0)
    if q_raw is None:
        q_raw = block.raw_errors / block.n_cpp if block.n_cpp else 0.5
    p_click = block.n_cpp / block.n_bit_symbols if block.n_bit_symbols else 0.0
    delta = min(2.0 * d * live / p_click, 1.0) if p_click > 0 else 1.0
    p_single = block.mon_single_clicks / block.mon_single_bins if block.mon_single_bins else 0.0
    delta_m = min(d_m * live_m / p_single, 1.0) if p_single > 0 else 1.0
    if delta >= 1.0 or delta_m >= 1.0:
        return q_raw, 0.0
    q_hat = min(max((q_raw - 0.5 * delta) / (1.0 - delta), 0.0), 1.0)
    v_hat = 1.0 - (2.0 * (1.0 - block.v_obs) - delta_m) / (2.0 * (1.0 - delta_m))
    return q_hat, min(max(v_hat, 0.0), 1.0)


def model_agreement(block: SiftedBlock, config: SystemConfig) -> dict:
    """z-scores of simulated counts against the analytic expectation.

    Compared counts: sifted bits, sifted-bit errors, and monitor clicks in
    interfering and single-pulse bins.  q_raw, v_raw and the sifted rate are
    functions of exactly these counts; comparing counts stays well defined
    when a block holds only a handful of clicks.
    """
    st = expected_stats(config.source, config.link, config.det_data, config.det_mon,
                        config.data_tap)
    n_bit = block.n_bit_symbols
    p_sift = st.p_click_bit * st.live_data
    p_err = p_sift * st.q_raw
    out = {}
    for name, obs, trials, p in (
        ("sifted", block.n_cpp, n_bit, p_sift),
        ("errors", block.raw_errors, n_bit, p_err),
        ("mon_int", block.mon_int_clicks, block.mon_int_bins, st.p_int * st.live_mon),
        ("mon_single", block.mon_single_clicks, block.mon_single_bins,
         st.p_single * st.live_mon),
    ):
        mean = trials * p
        sigma = math.sqrt(max(trials * p * (1.0 - p), 0.0))
        z = 0.0 if obs == mean else (abs(obs - mean) / sigma if sigma > 0 else math.inf)
        out[name] = {"observed": int(obs), "expected": mean, "sigma": sigma, "z": z}
    out["q_raw"] = {"simulated": block.raw_errors / block.n_cpp if block.n_cpp else float("nan"),
                    "model": st.q_raw}
    out["v_raw"] = {"simulated": block.v_obs, "model": st.v_raw}
    out["sifted_rate_hz"] = {"simulated": block.n_cpp / block.duration_s,
                             "model": st.sifted_rate_hz}
    return out
