"""Analytic physical-layer model of a COW link.

Time is divided into symbols at ``rep_rate_hz``; each symbol has two
half-slots.  Bit 0 is (empty, pulse), bit 1 is (pulse, empty) and the test
state is (pulse, pulse).

Bob splits the light with a passive tap.  The data detector sees the fraction
``data_tap`` and reads the arrival half-slot.  The rest goes through an
interferometer whose delay is one half-slot; the monitor detector sits on the
destructive port.  Monitor time bin j therefore combines the pulses of
half-slots j-1 and j, each contributing a quarter of its monitor-line mean.

Monitor-line estimator (one destructive-port detector):

    p_int    = click probability in a bin fed by two coherent pulses
    p_single = click probability in a bin fed by a single pulse
    V        = 1 - p_int / (2 p_single)

For weak light p_int ~ m (1 - V_int) / 2 and p_single ~ m / 4, so the ratio
returns V_int.  With darks only both probabilities equal the dark probability
and the estimator floors at 0.5.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError, DegenerateSignalError, RangeWarning

#: Temperature span over which the dark-count law was characterised.
DCR_MODEL_RANGE_K = (150.0, 225.0)
DCR_REF_TEMP_K = 200.0

PRESET_NAMES = ("ull_307km", "ull_200km", "ull_104km", "desk_25db")


@dataclass(frozen=True)
class FiberLink:
    length_km: float
    atten_db_per_km: float = 0.160
    extra_loss_db: float = 0.0

    def __post_init__(self):
        if self.length_km < 0:
            raise ValueError("length_km must be >= 0")
        if self.atten_db_per_km <= 0:
            raise ValueError("atten_db_per_km must be > 0")
        if self.extra_loss_db < 0:
            raise ValueError("extra_loss_db must be >= 0")

    @property
    def total_db(self) -> float:
        return self.length_km * self.atten_db_per_km + self.extra_loss_db

    def with_length(self, length_km: float) -> "FiberLink":
        return replace(self, length_km=float(length_km))


@dataclass(frozen=True)
class DetectorModel:
    """Free-running detector.

    Afterpulsing adds a probability ``afterpulse_prob`` of a spurious click
    per genuine click; it is off by default.
    """

    efficiency: float = 0.20
    dcr_ref_hz: float = 100.0
    temp_k: float = 153.0
    dead_time_s: float = 115e-6
    afterpulse_coeff: float = 0.0
    afterpulse_temp_scale: float = 10.0
    afterpulse_ref_temp_k: float = 223.0
    afterpulse_ref_dead_time_s: float = 8e-6

    def __post_init__(self):
        if not 0.0 < self.efficiency <= 1.0:
            raise ValueError("efficiency must lie in (0, 1]")
        if self.dcr_ref_hz <= 0:
            raise ValueError("dcr_ref_hz must be > 0")
        if self.dead_time_s < 0:
            raise ValueError("dead_time_s must be >= 0")
        if self.afterpulse_coeff < 0 or self.afterpulse_temp_scale <= 0:
            raise ValueError("invalid afterpulse parameters")

    def at(self, temp_k: float, dead_time_s: float) -> "DetectorModel":
        return replace(self, temp_k=float(temp_k), dead_time_s=float(dead_time_s))

    @property
    def afterpulse_prob(self) -> float:
        if self.afterpulse_coeff == 0.0:
            return 0.0
        dead = max(self.dead_time_s, 1e-9)
        p = (self.afterpulse_coeff
             * math.exp(-(self.temp_k - self.afterpulse_ref_temp_k) / self.afterpulse_temp_scale)
             * self.afterpulse_ref_dead_time_s / dead)
        return min(p, 1.0)


@dataclass(frozen=True)
class SourceModel:
    rep_rate_hz: float = 6.25e8
    mu: float = 0.1
    decoy_prob: float = 0.155
    intrinsic_visibility: float = 0.98
    intrinsic_error: float = 0.01

    def __post_init__(self):
        if self.rep_rate_hz <= 0:
            raise ValueError("rep_rate_hz must be > 0")
        if self.mu <= 0:
            raise ValueError("mu must be > 0")
        # the closed interval is allowed so toy streams can be all-bit or all-test
        if not 0.0 <= self.decoy_prob <= 1.0:
            raise ValueError("decoy_prob must lie in [0, 1]")
        if not 0.0 <= self.intrinsic_visibility <= 1.0:
            raise ValueError("intrinsic_visibility must lie in [0, 1]")
        if not 0.0 <= self.intrinsic_error <= 0.5:
            raise ValueError("intrinsic_error must lie in [0, 0.5]")


@dataclass(frozen=True)
class OperatingGrid:
    temperatures_k: tuple = (153.0, 163.0, 173.0, 183.0, 193.0, 203.0, 213.0, 223.0)
    dead_times_s: tuple = (8e-6, 16e-6, 32e-6, 64e-6, 115e-6)

    def points(self):
        return [(t, d) for t in self.temperatures_k for d in self.dead_times_s]


@dataclass(frozen=True)
class SystemConfig:
    link: FiberLink
    det_data: DetectorModel = field(default_factory=DetectorModel)
    det_mon: DetectorModel = field(default_factory=DetectorModel)
    source: SourceModel = field(default_factory=SourceModel)
    data_tap: float = 0.9
    #: leakage per sifted bit relative to h(q_raw)
    ir_efficiency: float = 1.16
    #: None means: optimise over the default grid
    operating_grid: OperatingGrid | None = None
    name: str = "custom"
    #: free-form analysis defaults (n_cpp, beta, ...), used by the CLI
    analysis: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.data_tap < 1.0:
            raise ValueError("data_tap must lie in (0, 1)")
        if self.ir_efficiency < 1.0:
            raise ValueError("ir_efficiency must be >= 1")

    def at_distance(self, length_km: float) -> "SystemConfig":
        return replace(self, link=self.link.with_length(length_km))

    def at_operating_point(self, temp_k: float, dead_time_s: float) -> "SystemConfig":
        return replace(self, det_data=self.det_data.at(temp_k, dead_time_s),
                       det_mon=self.det_mon.at(temp_k, dead_time_s))

    def with_mu(self, mu: float) -> "SystemConfig":
        return replace(self, source=replace(self.source, mu=float(mu)))

    def with_visibility(self, v: float) -> "SystemConfig":
        return replace(self, source=replace(self.source, intrinsic_visibility=float(v)))

    def to_dict(self) -> dict:
        grid = self.operating_grid
        return {
            "name": self.name,
            "link": asdict(self.link),
            "detectors": {"data": asdict(self.det_data), "monitor": asdict(self.det_mon)},
            "source": asdict(self.source),
            "data_tap": self.data_tap,
            "ir_efficiency": self.ir_efficiency,
            "operating_grid": None if grid is None else {
                "temperatures_k": list(grid.temperatures_k),
                "dead_times_s": list(grid.dead_times_s),
            },
            "analysis": dict(self.analysis),
        }


@dataclass(frozen=True)
class ExpectedStats:
    sifted_rate_hz: float
    q_raw: float
    v_raw: float
    q_hat: float
    v_hat_input: float
    dark_fraction_data: float
    dark_fraction_monitor: float
    n_vis_rate_hz: float
    # per-symbol detail, used by the simulator comparison
    p_click_bit: float = 0.0
    p_click_test: float = 0.0
    p_int: float = 0.0
    p_single: float = 0.0
    p_dark_mon: float = 0.0
    live_data: float = 1.0
    live_mon: float = 1.0
    degenerate: bool = False


def channel_transmittance(link: FiberLink) -> float:
    return 10.0 ** (-link.total_db / 10.0)


def dcr_at_temperature(det: DetectorModel) -> float:
    """Dark-count rate, halving with every 10 K below the 200 K reference."""
    lo, hi = DCR_MODEL_RANGE_K
    if not lo <= det.temp_k <= hi:
        warnings.warn(f"temperature {det.temp_k} K outside characterised range [{lo}, {hi}] K",
                      RangeWarning, stacklevel=2)
    return det.dcr_ref_hz * 2.0 ** ((det.temp_k - DCR_REF_TEMP_K) / 10.0)


def dead_time_throughput(raw_rate_hz, dead_time_s):
    """Non-paralysable dead time: raw / (1 + raw * tau)."""
    raw = np.asarray(raw_rate_hz, dtype=float)
    if np.any(raw < 0):
        raise ValueError("raw_rate_hz must be >= 0")
    out = raw / (1.0 + raw * dead_time_s)
    return float(out) if out.ndim == 0 else out


def symbol_pattern_probs(decoy_prob: float):
    """Per-symbol expected number of (interfering, single-pulse, empty) monitor bins."""
    f = decoy_prob
    q = f + (1.0 - f) / 2.0  # P(a given half-slot of a random symbol is occupied)
    n_int = f + q * q
    n_single = (1.0 - f) + 2.0 * q * (1.0 - q)
    return n_int, n_single, 2.0 - n_int - n_single


def _check_prob(name, value):
    v = np.asarray(value)
    if np.any((v < -1e-15) | (v > 1.0 + 1e-15)) or np.any(np.isnan(v)):
        raise ValueError(f"{name} left [0, 1]")


def expected_stats(source: SourceModel, link: FiberLink, det_data: DetectorModel,
                   det_mon: DetectorModel, data_tap: float, mu=None):
    """Expected click statistics for the honest channel.

    Data line, per bit symbol: A = P(click in the occupied half-slot),
    B = P(click in the empty one).  A single click is reported in the wrong
    half-slot with probability ``intrinsic_error``; a double click yields a
    random bit.  Dead time acts on the whole detector event rate.

    ``mu`` overrides ``source.mu`` and may be an array; the result then holds
    arrays in place of floats.
    """
    if not 0.0 < data_tap < 1.0:
        raise ValueError("data_tap must lie in (0, 1)")
    mu = np.asarray(source.mu if mu is None else mu, dtype=float)
    rate = source.rep_rate_hz
    e = source.intrinsic_error
    v_int = source.intrinsic_visibility
    trans = channel_transmittance(link)

    ap_d, ap_m = det_data.afterpulse_prob, det_mon.afterpulse_prob
    d = dcr_at_temperature(det_data) / (2.0 * rate)
    d_m = dcr_at_temperature(det_mon) / (2.0 * rate)

    s = -np.expm1(-mu * trans * det_data.efficiency * data_tap)
    # union probabilities written as sums, so they stay exact when s << d
    a = s + d * (1.0 - s)
    b = d
    p_click = a + b * (1.0 - a)
    p_err = (1.0 - e) * b * (1.0 - a) + e * a * (1.0 - b) + 0.5 * a * b
    p_click_test = a * (2.0 - a)
    _check_prob("data click probability", p_click)

    f = source.decoy_prob
    event_rate = rate * ((1.0 - f) * p_click + f * p_click_test)
    # afterpulses behave as extra noise clicks with a random bit value
    ap_sym = event_rate / rate * ap_d
    live = 1.0 / (1.0 + event_rate * (1.0 + ap_d) * det_data.dead_time_s)
    sifted = rate * (1.0 - f) * (p_click + ap_sym) * live
    q_raw = (p_err + 0.5 * ap_sym) / (p_click + ap_sym)
    # detector noise clicks per bit symbol over all clicks per bit symbol
    delta = np.minimum((2.0 * d + ap_sym) / (p_click + ap_sym), 1.0)

    # monitor line
    m_m = mu * trans * det_mon.efficiency * (1.0 - data_tap)
    s_int = -np.expm1(-m_m * (1.0 - v_int) / 2.0)
    s_single = -np.expm1(-m_m / 4.0)
    p_int = s_int + d_m * (1.0 - s_int)
    p_single = s_single + d_m * (1.0 - s_single)
    n_int, n_single, n_empty = symbol_pattern_probs(f)
    mon_rate = rate * (n_int * p_int + n_single * p_single + n_empty * d_m) * (1.0 + ap_m)
    live_m = 1.0 / (1.0 + mon_rate * det_mon.dead_time_s)
    v_raw = 1.0 - p_int / (2.0 * p_single)
    delta_m = np.minimum(d_m / p_single, 1.0)
    n_vis_rate = 4.0 * rate * n_int * p_single * live_m

    degenerate = np.asarray(delta >= 1.0) | np.asarray(delta_m >= 1.0)
    safe_delta = np.where(degenerate, 0.0, delta)
    safe_delta_m = np.where(degenerate, 0.0, delta_m)
    q_hat, v_hat = _correct(q_raw, v_raw, safe_delta, safe_delta_m)
    q_hat = np.where(degenerate, q_raw, q_hat)
    v_hat = np.where(degenerate, v_raw, v_hat)

    out = dict(
        sifted_rate_hz=sifted, q_raw=q_raw, v_raw=v_raw, q_hat=q_hat, v_hat_input=v_hat,
        dark_fraction_data=delta, dark_fraction_monitor=delta_m, n_vis_rate_hz=n_vis_rate,
        p_click_bit=p_click, p_click_test=p_click_test, p_int=p_int, p_single=p_single,
        p_dark_mon=np.broadcast_to(d_m, np.shape(mu)), live_data=live, live_mon=live_m,
        degenerate=degenerate,
    )
    for key in ("q_raw", "v_raw", "q_hat", "v_hat_input"):
        _check_prob(key, out[key])
    if mu.ndim == 0:
        out = {k: (bool(v) if k == "degenerate" else float(v)) for k, v in out.items()}
    return ExpectedStats(**out)


def system_stats(config: SystemConfig, mu=None) -> ExpectedStats:
    return expected_stats(config.source, config.link, config.det_data, config.det_mon,
                          config.data_tap, mu=mu)


def _correct(q_raw, v_raw, delta, delta_m):
    q_hat = (q_raw - 0.5 * delta) / (1.0 - delta)
    v_hat = 1.0 - (2.0 * (1.0 - v_raw) - delta_m) / (2.0 * (1.0 - delta_m))
    return np.clip(q_hat, 0.0, 1.0), np.clip(v_hat, 0.0, 1.0)


def trusted_detector_correction(stats: ExpectedStats):
    """Remove the dark-count contribution from (q_raw, v_raw).

    With delta = p_dark / p_click on the data line,
    q_hat = (q_raw - delta/2) / (1 - delta).  On the monitor line, with
    delta_m = p_dark / p_single, the dark level is removed from both bin
    classes before forming the visibility ratio.
    """
    delta, delta_m = stats.dark_fraction_data, stats.dark_fraction_monitor
    if delta >= 1.0 or delta_m >= 1.0:
        raise DegenerateSignalError("signal clicks indistinguishable from dark counts")
    q_hat, v_hat = _correct(stats.q_raw, stats.v_raw, delta, delta_m)
    return float(q_hat), float(v_hat)


def add_dark_counts(q: float, v: float, delta: float, delta_m: float):
    """Inverse of the correction: raw (q, v) given dark-free values."""
    if not (0.0 <= delta < 1.0 and 0.0 <= delta_m < 1.0):
        raise ValueError("dark fractions must lie in [0, 1)")
    q_raw = q * (1.0 - delta) + 0.5 * delta
    v_raw = 1.0 - ((1.0 - v) * 2.0 * (1.0 - delta_m) + delta_m) / 2.0
    return q_raw, v_raw


# --- configuration files ------------------------------------------------------

def _build(cls, data: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def config_from_dict(data: dict) -> SystemConfig:
    allowed = {"name", "link", "detectors", "source", "data_tap", "ir_efficiency",
               "operating_grid", "analysis"}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    if "link" not in data:
        raise ConfigError("missing [link] section")
    dets = data.get("detectors", {})
    det_data = _build(DetectorModel, dets.get("data", {}), "detectors.data")
    det_mon = _build(DetectorModel, dets.get("monitor", dets.get("data", {})), "detectors.monitor")
    grid = data.get("operating_grid")
    if grid is not None:
        grid = OperatingGrid(tuple(map(float, grid["temperatures_k"])),
                             tuple(map(float, grid["dead_times_s"])))
    try:
        return SystemConfig(
            link=_build(FiberLink, data["link"], "link"),
            det_data=det_data, det_mon=det_mon,
            source=_build(SourceModel, data.get("source", {}), "source"),
            data_tap=float(data.get("data_tap", 0.9)),
            ir_efficiency=float(data.get("ir_efficiency", 1.16)),
            operating_grid=grid,
            name=str(data.get("name", "custom")),
            analysis=dict(data.get("analysis", {})),
        )
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> SystemConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    try:
        return config_from_dict(json.loads(text))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def load_preset(name: str) -> SystemConfig:
    if name not in PRESET_NAMES:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}")
    text = resources.files("cowqkd").joinpath("presets").joinpath(f"{name}.json").read_text()
    return config_from_dict(json.loads(text))
