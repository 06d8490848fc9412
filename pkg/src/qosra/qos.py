"""Per-service QoS quantities and the base-station power model.

Rates are in bits/s (base-2 logarithms). Every Monte Carlo expectation is an
average over a *gain pool* for one user: an array of shape
``(draws, subcarriers)``. Average rate and effective capacity depend only on
the per-subcarrier marginal, so they average over every entry of the pool;
the URLLC error probability sums over the first ``n`` columns of each row.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import logsumexp, ndtr, ndtri

from .config import SENSITIVE, TOLERANT, URLLC, Allocation, SystemConfig, UserSpec
from .errors import InvalidInputError

LN2 = math.log(2.0)


def as_pool(gains) -> np.ndarray:
    g = np.asarray(gains, dtype=float)
    if g.ndim == 0:
        g = g.reshape(1, 1)
    elif g.ndim == 1:
        g = g[:, None]
    if g.ndim != 2 or g.size == 0:
        raise InvalidInputError("gain pool must be a nonempty (draws, subcarriers) array")
    return g


def _check(n, p):
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    if p < 0:
        raise InvalidInputError("p must be >= 0")


def snr_scale(user: UserSpec, n: int, cfg: SystemConfig, gap: float = 1.0) -> float:
    """Per-unit-power, per-unit-gain SNR on one of ``n`` subcarriers."""
    return user.alpha / (gap * cfg.N_0 * cfg.N_T * n * cfg.W)


def avg_rate_tolerant(user: UserSpec, n: int, p: float, gains, cfg: SystemConfig, gap: float = 1.0) -> float:
    _check(n, p)
    g = as_pool(gains)
    x = snr_scale(user, n, cfg, gap) * p * g
    return float(n * cfg.W * np.mean(np.log1p(x)) / LN2)


def qos_exponent(user: UserSpec) -> float:
    """QoS exponent of a compound-Poisson source (1/bits)."""
    if not 0 < user.eps_q < 1:
        raise InvalidInputError("eps_q must lie in (0, 1)")
    le = math.log(user.eps_q)
    denom = le - user.nu_a * user.delay_bound
    if denom == 0:
        raise InvalidInputError("degenerate traffic descriptor")
    return user.nu_s * le / denom


def effective_bandwidth(user: UserSpec) -> float:
    theta = qos_exponent(user)
    if theta >= user.nu_s:
        raise InvalidInputError("QoS exponent must stay below nu_s")
    return user.nu_a / (user.nu_s - theta)


def effective_capacity(user: UserSpec, n: int, p: float, gains, cfg: SystemConfig,
                       theta: float | None = None) -> float:
    _check(n, p)
    if theta is None:
        theta = qos_exponent(user)
    g = as_pool(gains)
    if p == 0:
        return 0.0
    varpi = theta * cfg.T_c * cfg.W / LN2
    x = snr_scale(user, n, cfg, cfg.snr_gap) * p * g
    # ln E[(1+x)^-varpi] evaluated in log space
    log_mean = logsumexp(-varpi * np.log1p(x).ravel()) - math.log(x.size)
    return float(-n / (theta * cfg.T_c) * log_mean)


def q_function(x):
    return ndtr(-np.asarray(x, dtype=float))


def q_inverse(eps: float) -> float:
    if not 0 < eps < 1:
        raise InvalidInputError("eps must lie in (0, 1)")
    return float(-ndtri(eps))


def urllc_error_prob(user: UserSpec, n: int, p: float, gains, cfg: SystemConfig) -> float:
    _check(n, p)
    g = as_pool(gains)
    if g.shape[1] < n:
        raise InvalidInputError(f"gain pool has {g.shape[1]} subcarrier columns, need {n}")
    tw = cfg.T_s * cfg.W
    cap = np.log1p(snr_scale(user, n, cfg) * p * g[:, :n]).sum(axis=1)
    arg = math.sqrt(tw / n) * (cap - user.packet_bits * LN2 / tw)
    return float(np.mean(q_function(arg)))


def total_power(alloc: Allocation, cfg: SystemConfig) -> float:
    return float(alloc.p.sum() / cfg.rho + cfg.P_ca * cfg.N_T * alloc.n.sum() + cfg.P_0c)


def qos_residual(user: UserSpec, n: int, p: float, gains, cfg: SystemConfig) -> float:
    """Relative shortfall of the user's QoS at ``(n, p)``; <= 0 means satisfied."""
    if not user.active:
        return -1.0
    if user.service == TOLERANT:
        return 1.0 - avg_rate_tolerant(user, n, p, gains, cfg) / user.arrival_rate
    if user.service == SENSITIVE:
        return 1.0 - effective_capacity(user, n, p, gains, cfg) / effective_bandwidth(user)
    return urllc_error_prob(user, n, p, gains, cfg) / user.eps_max - 1.0
