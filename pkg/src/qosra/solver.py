"""Minimum transmit power of one user for a fixed subcarrier count.

Two independent routes:

* projected stochastic-gradient iterations driven by fresh channel draws
  (:func:`sgd_min_power` and the per-service wrappers), and
* geometric bisection on a frozen gain pool (:func:`bisection_min_power`,
  vectorised over many subcarrier counts by :func:`min_power_curve`).

The URLLC closed form for channel-hardened links is
:func:`urllc_closed_form_power`.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .config import SENSITIVE, TOLERANT, URLLC, SystemConfig, UserSpec
from .errors import ConvergenceError, InfeasibleError, InvalidInputError
from .qos import LN2, as_pool, effective_bandwidth, q_inverse, qos_exponent, snr_scale

P_CEILING = 1e250
P_FLOOR = 1e-300


@dataclass(frozen=True)
class SolverConfig:
    step_scale: float = 1.0
    max_iters: int = 20000
    min_iters: int = 300
    draws_per_iter: int = 256
    residual_tol: float = 1e-3
    window: int = 50
    oracle_draws: int = 10000
    rel_width: float = 1e-6
    probit_clip: float = 3.0

    def __post_init__(self):
        if self.step_scale <= 0:
            raise InvalidInputError("step_scale must be positive")
        if self.max_iters < 1 or self.draws_per_iter < 1 or self.oracle_draws < 1:
            raise InvalidInputError("iteration and draw counts must be >= 1")
        if not 0 < self.residual_tol < 1 or not 0 < self.rel_width < 1:
            raise InvalidInputError("tolerances must lie in (0, 1)")


# ---------------------------------------------------------------------------
# deterministic (mean-gain) approximations, used for starting points and gains

def _deterministic_power(user: UserSpec, n, cfg: SystemConfig, gbar: float):
    """Root of the constraint when every gain equals ``gbar``."""
    n = np.asarray(n, dtype=float)
    base = cfg.N_0 * cfg.N_T * n * cfg.W / (user.alpha * gbar)
    with np.errstate(over="ignore"):
        if user.service == TOLERANT:
            p = base * np.expm1(np.minimum(user.arrival_rate / (n * cfg.W), 1000.0) * LN2)
        elif user.service == SENSITIVE:
            p = cfg.snr_gap * base * np.expm1(np.minimum(effective_bandwidth(user) / (n * cfg.W), 1000.0) * LN2)
        else:
            tw = cfg.T_s * n * cfg.W
            expo = user.packet_bits * LN2 / tw + q_inverse(user.eps_max) / np.sqrt(tw)
            p = base * np.expm1(np.minimum(expo, 700.0))
    return np.clip(p, 1e-30, 1e200)


def urllc_closed_form_power(user: UserSpec, n: int, cfg: SystemConfig) -> float:
    """Required URLLC power under channel hardening (gain -> N_T).

    ``(N_0 n W / alpha) * (exp(B ln2 / (T_s n W) + Qinv(eps) / sqrt(T_s n W)) - 1)``
    """
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    tw = cfg.T_s * n * cfg.W
    expo = user.packet_bits * LN2 / tw + q_inverse(user.eps_max) / math.sqrt(tw)
    return float(cfg.N_0 * n * cfg.W / user.alpha * math.expm1(expo))


def urllc_closed_form_minimizer(user: UserSpec, cfg: SystemConfig, n_limit: int = 100000) -> int:
    """Subcarrier count minimising :func:`urllc_closed_form_power`."""
    prev = urllc_closed_form_power(user, 1, cfg)
    for n in range(2, n_limit + 1):
        cur = urllc_closed_form_power(user, n, cfg)
        if cur >= prev:
            return n - 1
        prev = cur
    return n_limit


# ---------------------------------------------------------------------------
# frozen-pool bisection

def _pool_deficit(user: UserSpec, n: np.ndarray, p: np.ndarray, pool: np.ndarray, cfg: SystemConfig) -> np.ndarray:
    """Sign-carrying shortfall for pairs ``(n[i], p[i])``; > 0 means QoS violated."""
    n = np.asarray(n, dtype=float)
    p = np.asarray(p, dtype=float)
    if user.service == TOLERANT:
        s = user.alpha / (cfg.N_0 * cfg.N_T * n * cfg.W) * p
        mean_log = np.log1p(s[:, None] * pool.ravel()[None, :]).mean(axis=1)
        return 1.0 - n * cfg.W * mean_log / LN2 / user.arrival_rate
    if user.service == SENSITIVE:
        theta = qos_exponent(user)
        varpi = theta * cfg.T_c * cfg.W / LN2
        s = user.alpha / (cfg.snr_gap * cfg.N_0 * cfg.N_T * n * cfg.W) * p
        y = -varpi * np.log1p(s[:, None] * pool.ravel()[None, :])
        top = y.max(axis=1)
        log_mean = top + np.log(np.exp(y - top[:, None]).mean(axis=1))
        ec = -n / (theta * cfg.T_c) * log_mean
        return 1.0 - ec / effective_bandwidth(user)
    tw = cfg.T_s * cfg.W
    n_int = n.astype(int)
    width = int(n_int.max())
    s = user.alpha / (cfg.N_0 * cfg.N_T * n * cfg.W) * p
    logs = np.log1p(s[:, None, None] * pool[None, :, :width])
    caps = np.cumsum(logs, axis=2)[np.arange(len(n_int)), :, n_int - 1]
    arg = np.sqrt(tw / n)[:, None] * (caps - user.packet_bits * LN2 / tw)
    eps = ndtr(-arg).mean(axis=1)
    # log scale keeps the residual close to linear in log p for the root finder
    return np.log(np.maximum(eps, 1e-300)) - math.log(user.eps_max)


def min_power_curve(user: UserSpec, n_values, cfg: SystemConfig, pool, rel_width: float = 1e-6) -> np.ndarray:
    """Bracketed roots for every entry of ``n_values`` on one frozen pool.

    Returns the upper end of each final bracket (so the QoS holds on the
    pool), ``0`` for users with no demand and ``inf`` if no power below
    ``P_CEILING`` suffices. Values are *not* capped at ``P_max``.
    """
    n = np.atleast_1d(np.asarray(n_values, dtype=np.int64))
    if np.any(n < 1):
        raise InvalidInputError("subcarrier counts must be >= 1")
    pool = as_pool(pool)
    if user.service == URLLC and pool.shape[1] < n.max():
        raise InvalidInputError(f"URLLC pool has {pool.shape[1]} columns, need {n.max()}")
    out = np.zeros(len(n))
    if not user.active:
        return out
    if user.service == URLLC and len(n) > 1 and len(n) * pool.shape[0] * int(n.max()) > 2_000_000:
        # bound the (n, draws, width) temporaries
        chunk = max(1, 2_000_000 // (pool.shape[0] * int(n.max())))
        return np.concatenate([min_power_curve(user, n[i:i + chunk], cfg, pool, rel_width)
                               for i in range(0, len(n), chunk)])

    def deficit(idx, p):
        return _pool_deficit(user, n[idx], p, pool, cfg)

    idx = np.arange(len(n))
    hi = _deterministic_power(user, n, cfg, float(pool.mean()))
    lo = hi.copy()
    # expand upward until feasible
    todo = idx[deficit(idx, hi) > 0]
    while todo.size:
        hi[todo] *= 8.0
        over = hi[todo] > P_CEILING
        if np.any(over):
            hi[todo[over]] = np.inf
            todo = todo[~over]
            if not todo.size:
                break
        todo = todo[deficit(todo, hi[todo]) > 0]
    finite = np.isfinite(hi)
    # expand downward until infeasible (or the user needs no power at all)
    lo[finite] = hi[finite] / 8.0
    zero = np.zeros(len(n), dtype=bool)
    todo = idx[finite]
    todo = todo[deficit(todo, lo[todo]) <= 0]
    while todo.size:
        lo[todo] /= 8.0
        tiny = lo[todo] < 1e-30
        if np.any(tiny):
            t = todo[tiny]
            at_zero = deficit(t, np.zeros(len(t))) <= 0
            zero[t[at_zero]] = True
            lo[t[~at_zero]] = P_FLOOR
            todo = todo[~tiny]
        if todo.size:
            todo = todo[deficit(todo, lo[todo]) <= 0]
    # Illinois false position on log p; every step keeps a sign-changing bracket
    active = idx[finite & ~zero]
    a, b = np.log(lo), np.log(hi)
    fa = np.zeros(len(n))
    fb = np.zeros(len(n))
    side = np.zeros(len(n), dtype=np.int8)
    if active.size:
        fa[active] = deficit(active, lo[active])
        fb[active] = deficit(active, hi[active])
    tol = math.log1p(rel_width)
    while active.size:
        aa, bb, ya, yb = a[active], b[active], fa[active], fb[active]
        x = bb - yb * (bb - aa) / (yb - ya)
        # guard against stalls at the bracket ends and non-finite secants
        w = bb - aa
        x = np.where(np.isfinite(x), np.clip(x, aa + 1e-3 * w, bb - 1e-3 * w), 0.5 * (aa + bb))
        fx = deficit(active, np.exp(x))
        up = fx > 0
        i_up, i_dn = active[up], active[~up]
        a[i_up], fa[i_up] = x[up], fx[up]
        fb[i_up[side[i_up] == 1]] *= 0.5
        side[i_up] = 1
        b[i_dn], fb[i_dn] = x[~up], fx[~up]
        fa[i_dn[side[i_dn] == -1]] *= 0.5
        side[i_dn] = -1
        active = active[b[active] - a[active] >= tol]
    hi = np.where(finite & ~zero, np.exp(b), hi)
    out[:] = hi
    out[zero] = 0.0
    return out


def bisection_min_power(user: UserSpec, n: int, cfg: SystemConfig, sol: SolverConfig | None = None,
                        rng: np.random.Generator | None = None, pool=None,
                        p_cap: float | None = -1.0) -> float:
    """Scalar bisection oracle with common random numbers.

    Draws ``sol.oracle_draws`` blocks of ``n`` Gamma gains from ``rng`` unless
    a frozen ``pool`` is supplied. Raises :class:`InfeasibleError` when the
    root exceeds ``p_cap`` (default ``cfg.P_max``; ``None`` disables the cap).
    """
    sol = sol or SolverConfig()
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    if pool is None:
        if rng is None:
            raise InvalidInputError("either rng or pool is required")
        pool = rng.standard_gamma(cfg.N_T, size=(sol.oracle_draws, n))
    p = float(min_power_curve(user, [n], cfg, pool, sol.rel_width)[0])
    cap = cfg.P_max if p_cap is not None and p_cap < 0 else p_cap
    if cap is not None and p > cap:
        raise InfeasibleError(f"{user.service} user needs {p:.4g} W on {n} subcarriers, cap {cap:.4g} W")
    return p


# ---------------------------------------------------------------------------
# stochastic-gradient iterations

def _sgd_residual(user: UserSpec, n: int, p: float, g: np.ndarray, cfg: SystemConfig, sol: SolverConfig,
                  consts: dict) -> float:
    """Normalised constraint residual from one batch ``g`` of shape (draws, n); > 0 asks for more power."""
    if user.service == TOLERANT:
        rate = n * cfg.W * np.mean(np.log1p(consts["s"] * p * g)) / LN2
        return 1.0 - rate / user.arrival_rate
    if user.service == SENSITIVE:
        # E[exp(-theta T_c R)] - exp(-theta T_c E^B), relative to the target term
        rate = cfg.W * np.log1p(consts["s"] * p * g).sum(axis=1) / LN2
        log_terms = -consts["theta_tc"] * (rate - consts["eb"])
        return float(np.mean(np.exp(log_terms)) - 1.0)
    tw = cfg.T_s * cfg.W
    cap = np.log1p(consts["s"] * p * g).sum(axis=1)
    eps = float(np.mean(ndtr(-math.sqrt(tw / n) * (cap - user.packet_bits * LN2 / tw))))
    # probit transform of eps_hat - eps_max keeps the sign, tames the heavy tail
    probit = -ndtri(eps) if eps > 0 else np.inf
    r = (consts["qinv"] - probit) / consts["qinv"]
    return float(np.clip(r, -sol.probit_clip, sol.probit_clip))


def _residual_consts(user: UserSpec, n: int, cfg: SystemConfig) -> dict:
    if user.service == SENSITIVE:
        theta = qos_exponent(user)
        return {"s": snr_scale(user, n, cfg, cfg.snr_gap), "theta_tc": theta * cfg.T_c,
                "eb": effective_bandwidth(user)}
    c = {"s": snr_scale(user, n, cfg)}
    if user.service == URLLC:
        c["qinv"] = q_inverse(user.eps_max)
    return c


def gamma_sampler(cfg: SystemConfig):
    """Default channel: i.i.d. Gamma(N_T, 1) gains."""
    return lambda rng, shape: rng.standard_gamma(cfg.N_T, size=shape)


def frozen_sampler(value: float):
    """Deterministic channel: every draw equals ``value``."""
    return lambda rng, shape: np.full(shape, float(value))


def sgd_min_power(user: UserSpec, n: int, cfg: SystemConfig, sol: SolverConfig | None = None,
                  rng: np.random.Generator | None = None, trace: list | None = None, sampler=None) -> float:
    """Projected SGD ``P <- [P + phi(tau) * residual]^+`` with ``phi(tau) = phi0 / tau``.

    The step is scaled by a constant ``P_ref / slope`` taken from the
    mean-gain approximation at its root, which keeps the 1/tau schedule
    well conditioned across power scales spanning many decades. The returned
    power is the average of the iterates in the final window. ``sampler(rng,
    shape)`` supplies the channel draws (default :func:`gamma_sampler`).
    """
    sol = sol or SolverConfig()
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    if rng is None:
        raise InvalidInputError("rng is required")
    if not user.active:
        return 0.0
    if user.service == URLLC and user.eps_max >= 0.5 and user.packet_bits == 0:
        return 0.0
    sampler = sampler or gamma_sampler(cfg)
    consts = _residual_consts(user, n, cfg)
    gbar = float(np.mean(sampler(np.random.default_rng(0), (64, n))))
    p_ref = float(_deterministic_power(user, [n], cfg, gbar)[0])
    det = np.full((1, n), gbar)
    h = 0.05
    r_up = _sgd_residual(user, n, p_ref * math.exp(h), det, cfg, sol, consts)
    r_dn = _sgd_residual(user, n, p_ref * math.exp(-h), det, cfg, sol, consts)
    slope = (r_dn - r_up) / (2 * h)
    if not np.isfinite(slope) or slope <= 0:
        slope = 1.0
    gain = sol.step_scale * p_ref / slope

    p = p_ref
    recent_r: deque = deque(maxlen=sol.window)
    recent_p: deque = deque(maxlen=sol.window)
    r = float("nan")
    for tau in range(1, sol.max_iters + 1):
        g = sampler(rng, (sol.draws_per_iter, n))
        r = _sgd_residual(user, n, p, g, cfg, sol, consts)
        p = max(p + gain / tau * r, 0.0)
        recent_r.append(r)
        recent_p.append(p)
        if trace is not None:
            trace.append(p)
        if tau >= sol.min_iters and len(recent_r) == sol.window:
            if abs(float(np.mean(recent_r))) < sol.residual_tol:
                return float(np.mean(recent_p))
    raise ConvergenceError(
        f"SGD did not converge in {sol.max_iters} iterations (window residual {np.mean(recent_r):.3g})",
        residual=float(np.mean(recent_r)),
    )


def _require(user: UserSpec, service: str):
    if user.service != service:
        raise InvalidInputError(f"expected a {service} user, got {user.service}")


def sgd_min_power_tolerant(user, n, cfg, sol=None, rng=None, sampler=None):
    _require(user, TOLERANT)
    return sgd_min_power(user, n, cfg, sol, rng, sampler=sampler)


def sgd_min_power_sensitive(user, n, cfg, sol=None, rng=None, sampler=None):
    _require(user, SENSITIVE)
    return sgd_min_power(user, n, cfg, sol, rng, sampler=sampler)


def sgd_min_power_urllc(user, n, cfg, sol=None, rng=None, p_cap: float | None = -1.0, sampler=None):
    """URLLC wrapper; signals per-user infeasibility if even the cap is not enough."""
    _require(user, URLLC)
    cap = cfg.P_max if p_cap is not None and p_cap < 0 else p_cap
    if cap is not None and user.active:
        sol_ = sol or SolverConfig()
        probe = (sampler or gamma_sampler(cfg))(rng, (sol_.oracle_draws, n))
        if _pool_deficit(user, np.array([n]), np.array([cap]), probe, cfg)[0] > 0:
            raise InfeasibleError(f"URLLC target unreachable on {n} subcarriers below {cap:.4g} W")
    return sgd_min_power(user, n, cfg, sol, rng, sampler=sampler)
