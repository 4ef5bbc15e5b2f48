"""Finite-key secret key length for COW QKD and its epsilon accounting.

All quantities are plain floats; the floor to an integer bit count happens
once, at the end of :func:`key_length`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import BudgetExceededError

#: Smallest beta considered by the optimiser.
BETA_FLOOR = 1e-30
#: log10 step of the beta grid.
BETA_GRID_STEP = 0.1
#: Relative slack used when checking a composed budget against a rounded target.
PAPER_ROUNDING_RTOL = 5e-3


@dataclass(frozen=True)
class SecurityParams:
    """Composable security budget.

    ``beta`` is the default tail/smoothing parameter used when a caller does
    not optimise it.  The upper end ``beta <= eps_qkd/4`` is accepted with
    equality so that the published operating point (beta = 1e-9 at
    eps_qkd = 4e-9) is representable.
    """

    eps_qkd: float = 4e-9
    eps_cor: float = 1e-11
    eps_auth: float = 1e-15
    beta: float = 1e-9

    def __post_init__(self):
        for name in ("eps_qkd", "eps_cor", "eps_auth", "beta"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {value!r}")
        if self.beta > self.beta_max:
            raise ValueError(f"beta={self.beta} exceeds eps_qkd/4={self.beta_max}")

    @property
    def beta_max(self) -> float:
        return self.eps_qkd / 4.0

    @property
    def eps_sec(self) -> float:
        return self.eps_qkd - self.eps_cor


@dataclass(frozen=True)
class ObservedBlock:
    n_cpp: int
    n_vis: int
    q_hat: float
    v_obs: float
    m_ir: int
    mu: float

    def __post_init__(self):
        if self.n_cpp < 1 or self.n_vis < 1:
            raise ValueError("n_cpp and n_vis must be >= 1")
        if not 0 <= self.m_ir <= self.n_cpp:
            raise ValueError(f"m_ir={self.m_ir} outside [0, n_cpp={self.n_cpp}]")
        if not (0.0 <= self.q_hat <= 1.0 and 0.0 <= self.v_obs <= 1.0):
            raise ValueError("q_hat and v_obs must lie in [0, 1]")
        if not self.mu > 0:
            raise ValueError("mu must be positive")


@dataclass
class KeyLengthResult:
    ell: int
    beta_used: float
    v_hat: float
    terms: dict = field(default_factory=dict)
    abort_reason: str | None = None

    @property
    def aborted(self) -> bool:
        return self.ell == 0

    def to_dict(self) -> dict:
        return {
            "ell": self.ell,
            "beta_used": self.beta_used,
            "v_hat": self.v_hat,
            "terms": dict(self.terms),
            "abort_reason": self.abort_reason,
        }


def binary_entropy(x):
    """h(x) in bits, with h(0) = h(1) = 0.  Accepts scalars or arrays."""
    arr = np.asarray(x, dtype=float)
    if np.any((arr < 0.0) | (arr > 1.0)) or np.any(np.isnan(arr)):
        raise ValueError("binary_entropy argument must lie in [0, 1]")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = -arr * np.log2(arr) - (1.0 - arr) * np.log2(1.0 - arr)
    out = np.where((arr == 0.0) | (arr == 1.0), 0.0, out)
    return float(out) if out.ndim == 0 else out


def xi(mu, v_hat):
    """Phase-error proxy entering the entropy term; vectorised over both inputs."""
    mu = np.asarray(mu, dtype=float)
    v = np.asarray(v_hat, dtype=float)
    if np.any(mu < 0):
        raise ValueError("mu must be non-negative")
    if np.any((v < 0.0) | (v > 1.0)):
        raise ValueError("v_hat must lie in [0, 1]")
    out = (2.0 * v - 1.0) * np.exp(-mu) - 2.0 * np.sqrt(
        (1.0 - np.exp(-2.0 * mu)) * v * (1.0 - v)
    )
    return float(out) if out.ndim == 0 else out


def entropy_factor(q_hat, mu, v_hat):
    """Per-bit secrecy factor 1 - Q - (1 - Q) h((1 + xi) / 2)."""
    arg = np.clip((1.0 + xi(mu, v_hat)) / 2.0, 0.0, 1.0)
    return 1.0 - q_hat - (1.0 - q_hat) * binary_entropy(arg)


def _finite_terms(n_cpp, beta, eps_cor):
    beta_penalty = 7.0 * np.sqrt(n_cpp * np.log2(1.0 / beta))
    eps_cor_term = np.log2(2.0 / (4.0 * eps_cor * beta**2))
    return beta_penalty, eps_cor_term


def key_length(block: ObservedBlock, v_hat: float, params: SecurityParams,
               beta: float) -> KeyLengthResult:
    if not 0.0 < beta <= params.beta_max:
        raise ValueError(f"beta={beta} outside (0, eps_qkd/4]")
    if not 0.0 <= v_hat <= 1.0:
        raise ValueError("v_hat must lie in [0, 1]")
    factor = float(entropy_factor(block.q_hat, block.mu, v_hat))
    entropy_term = block.n_cpp * factor
    beta_penalty, eps_cor_term = _finite_terms(block.n_cpp, beta, params.eps_cor)
    terms = {
        "entropy_term": entropy_term,
        "beta_penalty": float(beta_penalty),
        "m_ir": float(block.m_ir),
        "eps_cor_term": float(eps_cor_term),
    }
    if factor <= 0.0:
        return KeyLengthResult(0, beta, v_hat, terms,
                               abort_reason="entropy factor is non-positive")
    raw = entropy_term - beta_penalty - block.m_ir - eps_cor_term
    ell = max(0, math.floor(raw))
    reason = None if ell > 0 else "finite-size penalties exceed the entropy term"
    return KeyLengthResult(min(ell, block.n_cpp), beta, v_hat, terms, abort_reason=reason)


def _default_deviation():
    from .sampling import deviation_t

    return deviation_t


def _raw_length(block: ObservedBlock, params: SecurityParams, deviation_fn, beta):
    """Unfloored length for an array of betas (used by the optimiser)."""
    beta = np.asarray(beta, dtype=float)
    t = np.asarray(deviation_fn(block.n_cpp, block.n_vis, block.v_obs, beta), dtype=float)
    v_hat = np.clip(block.v_obs - t, 0.0, 1.0)
    factor = entropy_factor(block.q_hat, block.mu, v_hat)
    beta_penalty, eps_cor_term = _finite_terms(block.n_cpp, beta, params.eps_cor)
    raw = block.n_cpp * factor - beta_penalty - block.m_ir - eps_cor_term
    return np.where(factor > 0.0, raw, -np.inf)


def beta_grid(params: SecurityParams) -> np.ndarray:
    top = math.log10(params.beta_max)
    grid = np.arange(math.log10(BETA_FLOOR), top, BETA_GRID_STEP)
    betas = np.minimum(10.0**grid, params.beta_max)
    if top - grid[-1] > 1e-9:
        betas = np.append(betas, params.beta_max)
    return betas


def optimize_beta(block: ObservedBlock, params: SecurityParams,
                  deviation_fn: Callable | None = None) -> KeyLengthResult:
    """Maximise the key length over beta in [1e-30, eps_qkd/4].

    A 0.1-decade grid locates the best region; a golden-section
    search on log10(beta) refines it.  V-hat is recomputed for every beta.
    """
    deviation_fn = deviation_fn or _default_deviation()
    grid = beta_grid(params)
    raw = _raw_length(block, params, deviation_fn, grid)
    i = int(np.argmax(raw))
    best_beta = float(grid[i])
    if np.isfinite(raw[i]) and 0 < i < len(grid) - 1:
        bracket = tuple(math.log10(b) for b in grid[i - 1:i + 2])
        try:
            res = minimize_scalar(
                lambda lb: -float(_raw_length(block, params, deviation_fn, 10.0**lb)),
                bracket=bracket, method="golden", options={"xtol": 1e-6},
            )
        except ValueError:  # flat bracket
            res = None
        if res is not None and bracket[0] <= res.x <= bracket[2] and -res.fun > raw[i]:
            best_beta = min(10.0**float(res.x), params.beta_max)
    t = float(deviation_fn(block.n_cpp, block.n_vis, block.v_obs, best_beta))
    v_hat = min(max(block.v_obs - t, 0.0), 1.0)
    return key_length(block, v_hat, params, best_beta)


def asymptotic_fraction(q: float, v: float, mu: float, leak: float | None = None) -> float:
    """Asymptotic secret fraction per sifted bit.

    ``leak`` is the reconciliation leakage per bit; by default the Shannon
    limit h(q) is used, giving 1 - q - (1 - q) h((1 + xi) / 2) - h(q).
    """
    if not (0.0 <= q <= 1.0 and 0.0 <= v <= 1.0):
        raise ValueError("q and v must lie in [0, 1]")
    if leak is None:
        leak = binary_entropy(q)
    return max(0.0, float(entropy_factor(q, mu, v)) - leak)


def epsilon_budget(params: SecurityParams, eps_verify: float,
                   rtol: float = 0.0) -> float:
    """Compose 4*beta + eps_verify + eps_auth and check it against eps_qkd.

    ``rtol`` allows for a target quoted to limited precision; use
    :data:`PAPER_ROUNDING_RTOL` for a one-significant-figure target.
    """
    if not 0.0 < eps_verify < 1.0:
        raise ValueError("eps_verify must lie in (0, 1)")
    total = 4.0 * params.beta + eps_verify + params.eps_auth
    if total > params.eps_qkd * (1.0 + rtol):
        raise BudgetExceededError(
            f"composed budget {total:.6g} exceeds eps_qkd={params.eps_qkd:.6g}"
        )
    return total
