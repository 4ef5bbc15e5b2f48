"""Secret-key-rate optimisation over mean photon number, beta and detector setting."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy.optimize import minimize_scalar

from .sampling import baseline_deviation, deviation_t
from .security import (
    ObservedBlock, SecurityParams, beta_grid, binary_entropy, entropy_factor,
    key_length, optimize_beta,
)
from .system import OperatingGrid, SystemConfig, system_stats

BOUND_KINDS = ("new", "baseline", "asymptotic")
MU_GRID = np.round(np.arange(0.01, 1.5 + 1e-9, 0.01), 2)
MIN_N_CPP = 1000
CSV_HEADER = ("distance_km", "n_cpp", "bound_kind", "skr_bps", "ell", "mu_opt", "beta_opt",
              "temp_k", "dead_time_us", "q_hat", "v_hat", "collection_s")


@dataclass
class ScanPoint:
    distance_km: float
    n_cpp: int
    bound_kind: str
    skr_bps: float
    ell: int
    mu_opt: float
    beta_opt: float
    temp_opt_k: float
    dead_time_opt_s: float
    q_hat: float
    v_hat: float
    block_collection_time_s: float
    reason: str | None = None

    def csv_row(self) -> list[str]:
        def g(x):
            return f"{x:.9g}"
        return [g(self.distance_km), str(self.n_cpp), self.bound_kind, g(self.skr_bps),
                str(self.ell), g(self.mu_opt), g(self.beta_opt), g(self.temp_opt_k),
                g(self.dead_time_opt_s * 1e6), g(self.q_hat), g(self.v_hat),
                g(self.block_collection_time_s)]


def _baseline(n_cpp, n_vis, v_obs, eps):
    return baseline_deviation(n_cpp, n_vis, eps) + 0.0 * np.asarray(v_obs, dtype=float)


DEVIATIONS = {"new": deviation_t, "baseline": _baseline}


@dataclass
class _Candidate:
    value: float
    mu: float
    temp_k: float
    dead_time_s: float


def _block_inputs(stats, n_cpp, ir_efficiency):
    n_vis = np.maximum(np.rint(n_cpp * stats.n_vis_rate_hz / np.maximum(stats.sifted_rate_hz, 1e-300)), 1)
    m_ir = np.minimum(np.ceil(ir_efficiency * n_cpp * binary_entropy(stats.q_raw)), n_cpp)
    return n_vis, m_ir


def _rate_grid(stats, mu, n_cpp, params, kind, ir_efficiency, beta):
    """Unfloored secret rate for each mu (vectorised over mu and beta)."""
    sifted = np.asarray(stats.sifted_rate_hz, dtype=float)
    q_hat = np.asarray(stats.q_hat, dtype=float)
    v = np.asarray(stats.v_hat_input, dtype=float)
    ok = ~np.asarray(stats.degenerate)
    if kind == "asymptotic":
        frac = entropy_factor(q_hat, mu, v) - ir_efficiency * binary_entropy(stats.q_raw)
        return np.where(ok, sifted * np.maximum(frac, 0.0), 0.0)
    n_vis, m_ir = _block_inputs(stats, n_cpp, ir_efficiency)
    betas = np.atleast_1d(beta_grid(params) if beta is None else float(beta))
    t = DEVIATIONS[kind](n_cpp, n_vis[:, None], v[:, None], betas[None, :])
    v_hat = np.clip(v[:, None] - t, 0.0, 1.0)
    factor = entropy_factor(q_hat[:, None], mu[:, None], v_hat)
    raw = (n_cpp * factor - 7.0 * np.sqrt(n_cpp * np.log2(1.0 / betas))
           - m_ir[:, None] - np.log2(2.0 / (4.0 * params.eps_cor * betas**2)))
    raw = np.where(factor > 0.0, raw, 0.0)
    best = np.max(raw, axis=1)
    return np.where(ok, sifted * np.maximum(best, 0.0) / n_cpp, 0.0)


def observed_block(cfg: SystemConfig, mu: float, n_cpp: int, stats=None) -> ObservedBlock:
    """Expected block statistics for ``n_cpp`` sifted bits at mean photon number ``mu``."""
    stats = stats or system_stats(cfg, mu=mu)
    n_vis, m_ir = _block_inputs(stats, n_cpp, cfg.ir_efficiency)
    return ObservedBlock(n_cpp=int(n_cpp), n_vis=int(n_vis), q_hat=stats.q_hat,
                         v_obs=stats.v_hat_input, m_ir=int(m_ir), mu=float(mu))


def _finalise(cfg: SystemConfig, mu, n_cpp, params, kind, beta, distance_km):
    stats = system_stats(cfg, mu=mu)
    temp, dead = cfg.det_data.temp_k, cfg.det_data.dead_time_s
    base = dict(distance_km=float(distance_km), n_cpp=int(n_cpp), bound_kind=kind,
                mu_opt=float(mu), temp_opt_k=temp, dead_time_opt_s=dead,
                q_hat=stats.q_hat, v_hat=stats.v_hat_input)
    collection = n_cpp / stats.sifted_rate_hz if stats.sifted_rate_hz > 0 else math.inf
    base["block_collection_time_s"] = collection
    if stats.degenerate:
        return ScanPoint(skr_bps=0.0, ell=0, beta_opt=float("nan"),
                         reason="signal indistinguishable from dark counts", **base)
    if kind == "asymptotic":
        frac = max(0.0, float(entropy_factor(stats.q_hat, mu, stats.v_hat_input))
                   - cfg.ir_efficiency * binary_entropy(stats.q_raw))
        ell = int(math.floor(n_cpp * frac))
        return ScanPoint(skr_bps=ell / collection, ell=ell, beta_opt=float("nan"),
                         reason=None if ell > 0 else "asymptotic fraction is zero", **base)
    block = observed_block(cfg, mu, n_cpp, stats)
    if beta is None:
        res = optimize_beta(block, params, deviation_fn=DEVIATIONS[kind])
    else:
        t = float(DEVIATIONS[kind](block.n_cpp, block.n_vis, block.v_obs, beta))
        res = key_length(block, min(max(block.v_obs - t, 0.0), 1.0), params, beta)
    base["v_hat"] = res.v_hat
    return ScanPoint(skr_bps=res.ell / collection, ell=res.ell, beta_opt=res.beta_used,
                     reason=res.abort_reason, **base)


def operating_points(config: SystemConfig):
    grid = config.operating_grid or OperatingGrid()
    return grid.points()


def skr_at(config: SystemConfig, distance_km: float, n_cpp: int, params: SecurityParams,
           bound_kind: str = "new", beta: float | None = None) -> ScanPoint:
    """Best secret key rate at one distance.

    mu runs over a 0.01-step grid on [0.01, 1.5] followed by one bounded
    refinement around the best grid value; beta is optimised unless given;
    the detector setting runs over the configured (temperature, dead time)
    set, or the default grid when the config leaves it open.
    """
    if bound_kind not in BOUND_KINDS:
        raise ValueError(f"bound_kind must be one of {BOUND_KINDS}")
    if n_cpp < MIN_N_CPP:
        raise ValueError(f"n_cpp must be >= {MIN_N_CPP}")
    if distance_km < 0:
        raise ValueError("distance must be >= 0")
    cfg = config.at_distance(distance_km)
    best = None
    for temp, dead in operating_points(cfg):
        op_cfg = cfg.at_operating_point(temp, dead)
        stats = system_stats(op_cfg, mu=MU_GRID)
        rates = _rate_grid(stats, MU_GRID, n_cpp, params, bound_kind, cfg.ir_efficiency, beta)
        i = int(np.argmax(rates))
        if best is None or rates[i] > best.value:
            best = _Candidate(float(rates[i]), float(MU_GRID[i]), temp, dead)
    op_cfg = cfg.at_operating_point(best.temp_k, best.dead_time_s)
    mu = best.mu
    if best.value > 0:
        lo, hi = max(mu - 0.01, 1e-4), mu + 0.01

        def neg_rate(x):
            st = system_stats(op_cfg, mu=np.array([x]))
            return -float(_rate_grid(st, np.array([x]), n_cpp, params, bound_kind,
                                     cfg.ir_efficiency, beta)[0])

        res = minimize_scalar(neg_rate, bounds=(lo, hi), method="bounded",
                              options={"xatol": 1e-5})
        if -res.fun > best.value:
            mu = float(res.x)
    point = _finalise(op_cfg, mu, n_cpp, params, bound_kind, beta, distance_km)
    if point.ell == 0 and mu != best.mu:
        # the floored length can differ from the smooth objective near the cutoff
        alt = _finalise(op_cfg, best.mu, n_cpp, params, bound_kind, beta, distance_km)
        if alt.ell > 0:
            point = alt
    return point


def scan(config: SystemConfig, distances: Iterable[float], n_cpp_list: Iterable[int],
         params: SecurityParams, bound_kind: str = "new",
         beta: float | None = None) -> list[ScanPoint]:
    """Row per (distance, n_cpp), in input order."""
    distances, n_cpp_list = list(distances), list(n_cpp_list)
    if not distances or not n_cpp_list:
        raise ValueError("distances and n_cpp_list must be non-empty")
    rows = []
    for dist in distances:
        for n in n_cpp_list:
            try:
                rows.append(skr_at(config, dist, n, params, bound_kind, beta=beta))
            except (ValueError, ArithmeticError) as exc:
                rows.append(ScanPoint(float(dist), int(n), bound_kind, 0.0, 0, float("nan"),
                                      float("nan"), float("nan"), float("nan"), float("nan"),
                                      float("nan"), math.inf, reason=str(exc)))
    return rows


def find_cutoff(config: SystemConfig, n_cpp: int, params: SecurityParams,
                bound_kind: str = "new", max_distance_km: float = 400.0,
                resolution_km: float = 1.0, min_distance_km: float = 0.0) -> float:
    """Largest distance with a positive key, by bisection to ``resolution_km``.

    Returns 0 if no distance works and ``max_distance_km`` if all do.
    """
    def positive(d):
        return skr_at(config, d, n_cpp, params, bound_kind).ell > 0

    lo, hi = float(min_distance_km), float(max_distance_km)
    if positive(hi):
        return hi
    if not positive(lo):
        return 0.0
    while hi - lo > resolution_km:
        mid = 0.5 * (lo + hi)
        if positive(mid):
            lo = mid
        else:
            hi = mid
    return lo


def to_csv(points: Iterable[ScanPoint]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for p in points:
        writer.writerow(p.csv_row())
    return buf.getvalue()
