"""Tail bounds for estimating key-side visibility from a monitoring sample.

Visibility V and the error fraction lambda are related by V = 1 - 2*lambda.
The deviation ``t`` is expressed in visibility units: the certified value is
V_hat = V_obs - t.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .errors import ResourceLimitError

#: Exhaustive validation is limited to populations of this size.
EXHAUSTIVE_LIMIT = 10_000


@dataclass(frozen=True)
class SampleSplit:
    n_cpp: int
    n_vis: int

    def __post_init__(self):
        if self.n_cpp < 1 or self.n_vis < 1:
            raise ValueError("n_cpp and n_vis must be >= 1")


@dataclass(frozen=True)
class VisibilityEstimate:
    v_obs: float
    lam: float
    t: float
    v_hat: float
    beta: float


def _check_counts(n_cpp, n_vis):
    if np.any(np.asarray(n_cpp) < 1) or np.any(np.asarray(n_vis) < 1):
        raise ValueError("n_cpp and n_vis must be >= 1")


def _check_eps(eps):
    e = np.asarray(eps, dtype=float)
    if np.any((e <= 0.0) | (e > 1.0)):
        raise ValueError("eps must lie in (0, 1]")


def correction_c(n_cpp, n_vis, lam):
    """Stirling-remainder constant C(n_cpp, n_vis, lambda)."""
    _check_counts(n_cpp, n_vis)
    lam = np.asarray(lam, dtype=float)
    if np.any((lam <= 0.0) | (lam >= 1.0)):
        raise ValueError("lambda must lie in (0, 1)")
    n_cpp = np.asarray(n_cpp, dtype=float)
    n_vis = np.asarray(n_vis, dtype=float)
    expo = (
        1.0 / (8.0 * (n_cpp + n_vis))
        + 1.0 / (12.0 * n_vis)
        - 1.0 / (12.0 * n_vis * lam + 1.0)
        - 1.0 / (12.0 * n_vis * (1.0 - lam) + 1.0)
    )
    out = np.exp(expo)
    return float(out) if out.ndim == 0 else out


def lambda_floor(n_cpp, n_vis):
    """Half a count over the pooled population; keeps lambda off {0, 1}."""
    return 1.0 / (2.0 * (np.asarray(n_cpp, dtype=float) + np.asarray(n_vis, dtype=float)))


def deviation_from_lambda(n_cpp, n_vis, lam, eps):
    """Deviation t for an error fraction ``lam`` (no clamping).  Vectorised."""
    _check_counts(n_cpp, n_vis)
    _check_eps(eps)
    n_cpp = np.asarray(n_cpp, dtype=float)
    n_vis = np.asarray(n_vis, dtype=float)
    lam = np.asarray(lam, dtype=float)
    eps = np.asarray(eps, dtype=float)
    total = n_cpp + n_vis
    var = lam * (1.0 - lam)
    c = correction_c(n_cpp, n_vis, lam)
    log_arg = np.sqrt(total) * c / (np.sqrt(2.0 * math.pi * n_cpp * n_vis * var) * eps)
    prefactor = 8.0 * total * var / (n_vis * n_cpp)
    # deviation cannot be negative: floor at 0 once the log argument drops below 1
    out = np.sqrt(prefactor * np.log(np.maximum(log_arg, 1.0)))
    return float(out) if out.ndim == 0 else out


def deviation_t(n_cpp, n_vis, v_obs, eps):
    """Deviation t(n_cpp, n_vis, V_obs, eps) of the sampling tail inequality.

    lambda = (1 - V_obs)/2 is clamped to [lambda_min, 1 - lambda_min] with
    lambda_min = 1/(2(n_cpp + n_vis)), since the closed form is singular at
    lambda in {0, 1}.  Broadcasts over array arguments.
    """
    v = np.asarray(v_obs, dtype=float)
    if np.any((v < 0.0) | (v > 1.0)):
        raise ValueError("v_obs must lie in [0, 1]")
    _check_counts(n_cpp, n_vis)
    lo = lambda_floor(n_cpp, n_vis)
    lam = np.clip((1.0 - v) / 2.0, lo, 1.0 - lo)
    return deviation_from_lambda(n_cpp, n_vis, lam, eps)


def baseline_deviation(n_cpp, n_vis, eps):
    """Serfling-type deviation used as the comparison baseline."""
    _check_counts(n_cpp, n_vis)
    _check_eps(eps)
    n_cpp = np.asarray(n_cpp, dtype=float)
    n_vis = np.asarray(n_vis, dtype=float)
    eps = np.asarray(eps, dtype=float)
    out = np.sqrt(
        (n_cpp + n_vis) * (n_vis + 1.0) * np.log(1.0 / eps) / (2.0 * n_vis**2 * n_cpp)
    )
    return float(out) if out.ndim == 0 else out


def estimate_visibility(n_cpp: int, n_vis: int, v_obs: float, beta: float,
                        deviation_fn: Callable = deviation_t) -> VisibilityEstimate:
    t = float(deviation_fn(n_cpp, n_vis, v_obs, beta))
    return VisibilityEstimate(
        v_obs=v_obs, lam=(1.0 - v_obs) / 2.0, t=t, v_hat=v_obs - t, beta=beta
    )


def _hypergeom_support(population_total, population_errors, sample_size):
    if not 0 <= population_errors <= population_total:
        raise ValueError("population_errors must lie in [0, population_total]")
    if not 1 <= sample_size <= population_total:
        raise ValueError("sample_size must lie in [1, population_total]")
    k_min = max(0, sample_size - (population_total - population_errors))
    k_max = min(population_errors, sample_size)
    return k_min, k_max


def hypergeom_pmf(population_total: int, population_errors: int, sample_size: int):
    """Exact hypergeometric pmf over its support.

    Returns ``(ks, pmf)``.  Relative weights come from the term ratio
    p(k+1)/p(k) accumulated outward from the mode and are normalised with a
    compensated sum; a log-gamma evaluation at the mode is kept only as a
    consistency check.
    """
    n_tot, n_err, n_s = int(population_total), int(population_errors), int(sample_size)
    k_min, k_max = _hypergeom_support(n_tot, n_err, n_s)
    ks = np.arange(k_min, k_max + 1)
    if k_min == k_max:
        return ks, np.ones(1)
    # ratio recurrence p(k+1)/p(k), anchored at the mode, avoids cancellation
    # between lgamma terms of size ~N log N
    k = ks[:-1].astype(float)
    ratios = (n_err - k) * (n_s - k) / ((k + 1.0) * (n_tot - n_err - n_s + k + 1.0))
    mode = int(np.argmax(np.concatenate(([0.0], np.cumsum(np.log(ratios))))))
    logw = np.zeros(len(ks))
    logw[mode + 1:] = np.cumsum(np.log(ratios[mode:]))
    logw[:mode] = -np.cumsum(np.log(ratios[:mode])[::-1])[::-1]
    w = np.exp(logw)
    # absolute anchor through lgamma, then exact renormalisation
    log_anchor = (
        _log_comb(n_err, int(ks[mode])) + _log_comb(n_tot - n_err, n_s - int(ks[mode]))
        - _log_comb(n_tot, n_s)
    )
    anchor = math.exp(log_anchor)
    total = math.fsum(w.tolist())
    pmf = w / total
    if abs(anchor - pmf[mode]) > 1e-6 * max(anchor, 1e-300):
        raise ArithmeticError("hypergeometric normalisation drifted")
    return ks, pmf


def _log_comb(n, k):
    return math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)


def hypergeom_tail(population_total: int, population_errors: int, sample_size: int,
                   threshold_errors: int) -> float:
    """P[errors in a uniform sample without replacement <= threshold_errors]."""
    ks, pmf = hypergeom_pmf(population_total, population_errors, sample_size)
    if threshold_errors < 0 or threshold_errors > sample_size:
        raise ValueError("threshold_errors must lie in [0, sample_size]")
    if threshold_errors >= ks[-1]:
        return 1.0
    if threshold_errors < ks[0]:
        return 0.0
    upper = ks <= threshold_errors
    lower_mass = math.fsum(pmf[upper].tolist())
    upper_mass = math.fsum(pmf[~upper].tolist())
    # use the smaller side for accuracy near 1
    return lower_mass if lower_mass <= 0.5 else 1.0 - upper_mass


@dataclass
class ValidationReport:
    n_cpp: int
    n_vis: int
    true_error_count: int
    eps: float
    population: str
    max_violation_probability: float
    holds: bool
    violating_counts: list

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def validate_inequality(split: SampleSplit, true_error_count: int, eps: float,
                        population: str = "key",
                        deviation_fn: Callable = deviation_t) -> ValidationReport:
    """Exact probability that V_key <= V_obs - t over all sample outcomes.

    ``population="key"``: the monitoring sample (n_vis) is drawn without
    replacement from the key block of n_cpp items holding ``true_error_count``
    errors, so V_key = 1 - 2 K / n_cpp.

    ``population="union"``: the n_cpp + n_vis items hold K errors, the sample
    is drawn from the union and V_key refers to the complementary n_cpp items.
    """
    n_c, n_v, errs = split.n_cpp, split.n_vis, int(true_error_count)
    if population == "key":
        total = n_c
        if n_v > n_c:
            raise ValueError("sample larger than the key population")
    elif population == "union":
        total = n_c + n_v
    else:
        raise ValueError(f"unknown population mode {population!r}")
    if total > EXHAUSTIVE_LIMIT:
        raise ResourceLimitError(f"population {total} exceeds exhaustive limit {EXHAUSTIVE_LIMIT}")
    ks, pmf = hypergeom_pmf(total, errs, n_v)
    if deviation_fn is deviation_t:
        # outcomes with more than half the sample in error have V_obs < 0;
        # t depends on lambda(1 - lambda) only, so evaluate it from lambda
        lo = lambda_floor(n_c, n_v)
        lam = np.clip(ks / n_v, lo, 1.0 - lo)
        t = np.asarray(deviation_from_lambda(n_c, n_v, lam, eps), dtype=float)
    else:
        v_obs = np.clip(1.0 - 2.0 * ks / n_v, 0.0, 1.0)
        t = np.asarray(deviation_fn(n_c, n_v, v_obs, eps), dtype=float)
    # V_obs - V_key with an exact integer numerator
    if population == "key":
        gap = 2.0 * (errs * n_v - ks * n_c) / (n_c * n_v)
    else:
        gap = 2.0 * ((errs - ks) * n_v - ks * n_c) / (n_c * n_v)
    violating = gap >= t
    prob = math.fsum(pmf[violating].tolist())
    return ValidationReport(
        n_cpp=n_c, n_vis=n_v, true_error_count=errs, eps=float(eps), population=population,
        max_violation_probability=prob, holds=prob <= eps,
        violating_counts=[int(k) for k in ks[violating]],
    )


DEFAULT_GRID = {
    "splits": [(100, 100), (1000, 100), (1000, 1000), (5000, 500)],
    "error_fractions": [0.01, 0.05, 0.25],
    "eps": [1e-3, 1e-6, 1e-9],
}


def validate_grid(splits, error_fractions, eps_values, population="key",
                  deviation_fn: Callable = deviation_t) -> list[ValidationReport]:
    reports = []
    for (n_c, n_v), frac, eps in itertools.product(splits, error_fractions, eps_values):
        base = n_c if population == "key" else n_c + n_v
        reports.append(validate_inequality(
            SampleSplit(n_c, n_v), round(frac * base), eps,
            population=population, deviation_fn=deviation_fn,
        ))
    return reports
