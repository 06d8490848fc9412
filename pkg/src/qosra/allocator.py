"""Greedy subcarrier allocation and its exhaustive-search check.

The greedy routines consume a :class:`PowerTable`, which caches the
per-user required power ``P_k(n)`` on frozen gain pools so that every
marginal-saving comparison is deterministic and the exhaustive oracle can
reuse exactly the same numbers.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .config import URLLC, Allocation, SystemConfig, UserSpec
from .errors import ConvergenceError, InvalidInputError, OracleBudgetError
from .qos import qos_residual, total_power
from .solver import SolverConfig, min_power_curve, sgd_min_power, urllc_closed_form_minimizer


@dataclass
class Scenario:
    users: list
    cfg: SystemConfig

    def __post_init__(self):
        if len(self.users) < 1:
            raise InvalidInputError("scenario needs at least one user")
        for u in self.users:
            if not isinstance(u, UserSpec):
                raise InvalidInputError("users must be UserSpec instances")

    @property
    def K(self) -> int:
        return len(self.users)


def draw_pools(scn: Scenario, draws: int, rng: np.random.Generator) -> np.ndarray:
    """Frozen Gamma(N_T) pools, shape ``(K, draws, N_max)``."""
    return rng.standard_gamma(scn.cfg.N_T, size=(scn.K, draws, scn.cfg.N_max))


class PowerTable:
    """Lazily filled cache of ``P_k(n)`` for ``n = 1..N_max``.

    ``method='bisection'`` solves a whole curve per user on its frozen pool;
    ``method='sgd'`` runs the stochastic iterations per ``(k, n)`` with a
    stream derived from ``seed`` so repeated queries agree.
    """

    def __init__(self, scn: Scenario, pools=None, method: str = "bisection",
                 sol: SolverConfig | None = None, seed: int = 0, draws: int = 200,
                 pooled_columns: int = 4):
        if method not in ("bisection", "sgd"):
            raise InvalidInputError(f"unknown power method {method!r}")
        self.scn = scn
        self.method = method
        self.sol = sol or SolverConfig()
        self.seed = seed
        if pools is None and method == "bisection":
            pools = draw_pools(scn, draws, np.random.default_rng(seed))
        self.pools = None if pools is None else np.asarray(pools, dtype=float)
        if self.pools is not None and self.pools.ndim == 2:
            self.pools = self.pools[:, :, None]
        self.pooled_columns = pooled_columns
        self._curves: dict[int, np.ndarray] = {}
        self._points: dict[tuple[int, int], float] = {}

    @classmethod
    def from_curves(cls, scn: Scenario, curves) -> "PowerTable":
        """Table backed by precomputed curves (``curves[k][n-1] = P_k(n)``), no pools."""
        curves = np.asarray(curves, dtype=float)
        if curves.shape != (scn.K, scn.cfg.N_max):
            raise InvalidInputError("curves must have shape (K, N_max)")
        table = cls(scn, pools=np.zeros((1, 1, 1)))
        table.pools = None
        table._curves = {k: curves[k].copy() for k in range(scn.K)}
        return table

    def pool(self, k: int) -> np.ndarray:
        """Frozen gains of user ``k``.

        Rate and effective-capacity expectations only need the per-subcarrier
        marginal, so those services see the first ``pooled_columns`` columns.
        """
        if self.pools is None:
            raise InvalidInputError("table has no frozen pools")
        pool = self.pools[k] if self.pools.shape[0] > 1 else self.pools[0]
        if self.scn.users[k].service != URLLC:
            pool = pool[:, : self.pooled_columns]
        return pool

    def curve(self, k: int) -> np.ndarray:
        """``P_k(n)`` for ``n = 1..N_max`` (index ``n-1``)."""
        if k not in self._curves:
            n_max = self.scn.cfg.N_max
            if self.method == "bisection":
                user = self.scn.users[k]
                pool = self.pool(k)
                n_vals = np.arange(1, n_max + 1)
                if user.service == URLLC and pool.shape[1] < n_max:
                    n_vals = n_vals[n_vals <= pool.shape[1]]
                c = np.full(n_max, np.inf)
                c[: len(n_vals)] = min_power_curve(user, n_vals, self.scn.cfg, pool, self.sol.rel_width)
                self._curves[k] = c
            else:
                self._curves[k] = np.array([self.power(k, n) for n in range(1, n_max + 1)])
        return self._curves[k]

    def power(self, k: int, n: int) -> float:
        if n < 1 or n > self.scn.cfg.N_max:
            raise InvalidInputError("n out of range")
        if k in self._curves:
            return float(self._curves[k][n - 1])
        if self.method == "bisection":
            return float(self.curve(k)[n - 1])
        key = (k, n)
        if key not in self._points:
            rng = np.random.default_rng([self.seed, k, n])
            try:
                self._points[key] = sgd_min_power(self.scn.users[k], n, self.scn.cfg, self.sol, rng)
            except ConvergenceError as exc:
                exc.user_index = k
                raise
        return self._points[key]

    def as_dict(self) -> dict:
        return {(k, n): float(c[n - 1]) for k, c in self._curves.items() for n in range(1, len(c) + 1)}


@dataclass
class AllocationResult:
    alloc: Allocation
    feasible: bool
    total_power: float
    transmit_power: float
    table: PowerTable | None = None
    limiting: str | None = None
    objective: str = "total"
    steps: int = 0
    meta: dict = field(default_factory=dict)


def _delta(a: float, b: float) -> float:
    """Power saving ``a - b`` with infinite requirements treated as +inf saving."""
    if math.isinf(a):
        return math.inf
    return a - b


def _finish(scn, table, n, objective, limiting=None, steps=0, feasible_override=None):
    p = np.array([table.power(k, int(nk)) if nk > 0 else 0.0 for k, nk in enumerate(n)])
    alloc = Allocation(n.copy(), np.where(np.isfinite(p), p, 0.0))
    finite = bool(np.all(np.isfinite(p)))
    tx = float(p.sum()) if finite else math.inf
    feasible = finite and tx <= scn.cfg.P_max and int(n.sum()) <= scn.cfg.N_max
    if feasible_override is not None:
        feasible = bool(feasible and feasible_override)
    if not feasible and limiting is None:
        limiting = "transmit-power" if int(n.sum()) <= scn.cfg.N_max else "subcarriers"
    tot = tx / scn.cfg.rho + scn.cfg.P_ca * scn.cfg.N_T * int(n.sum()) + scn.cfg.P_0c
    return AllocationResult(alloc, feasible, tot, tx, table, None if feasible else limiting, objective, steps)


def _init(scn: Scenario):
    active = np.array([u.active for u in scn.users])
    n = active.astype(np.int64)
    return active, n


def _greedy_fill(scn, table, n, active, score, stop):
    """Add subcarriers one at a time to ``argmax score`` while it is > 0 and ``stop`` is false."""
    n_max = scn.cfg.N_max
    steps = 0
    while int(n.sum()) < n_max and not stop(n):
        best_k, best = -1, -math.inf
        for k in np.flatnonzero(active):
            if n[k] >= n_max:
                continue
            s = score(k, int(n[k]))
            if s > best:  # strict: lowest index wins ties
                best_k, best = int(k), s
        if best_k < 0 or not best > 0:
            break
        n[best_k] += 1
        steps += 1
    return steps


def _prepare(scn, sol, rng, table):
    if table is None:
        seed = int(rng.integers(2**63)) if rng is not None else 0
        table = PowerTable(scn, sol=sol, seed=seed)
    return table


def greedy_min_transmit(scn: Scenario, sol: SolverConfig | None = None, rng: np.random.Generator | None = None,
                        table: PowerTable | None = None) -> AllocationResult:
    """Minimise the summed transmit power: give each next subcarrier to the largest saving."""
    table = _prepare(scn, sol, rng, table)
    active, n = _init(scn)
    if int(n.sum()) > scn.cfg.N_max:
        return _finish(scn, table, n, "transmit", limiting="subcarriers", feasible_override=False)

    def saving(k, nk):
        return _delta(table.power(k, nk), table.power(k, nk + 1))

    steps = _greedy_fill(scn, table, n, active, saving, lambda n: False)
    return _finish(scn, table, n, "transmit", steps=steps)


def greedy_min_total(scn: Scenario, sol: SolverConfig | None = None, rng: np.random.Generator | None = None,
                     table: PowerTable | None = None) -> AllocationResult:
    """Minimise total BS power, then add subcarriers until the transmit cap holds.

    The marginal of the total-power objective is ``dP/rho - P_ca N_T``.
    """
    table = _prepare(scn, sol, rng, table)
    cfg = scn.cfg
    check = greedy_min_transmit(scn, sol, rng, table)
    active, n = _init(scn)
    if int(n.sum()) > cfg.N_max:
        return _finish(scn, table, n, "total", limiting="subcarriers", feasible_override=False)
    circuit = cfg.P_ca * cfg.N_T

    def total_saving(k, nk):
        return _delta(table.power(k, nk), table.power(k, nk + 1)) / cfg.rho - circuit

    steps = _greedy_fill(scn, table, n, active, total_saving, lambda n: False)

    def transmit(n):
        return sum(table.power(k, int(nk)) for k, nk in enumerate(n) if nk > 0)

    repaired = 0
    if not transmit(n) <= cfg.P_max:
        def saving(k, nk):
            return _delta(table.power(k, nk), table.power(k, nk + 1))

        repaired = _greedy_fill(scn, table, n, active, saving, lambda n: transmit(n) <= cfg.P_max)
    res = _finish(scn, table, n, "total", steps=steps + repaired,
                  limiting=None if check.feasible else check.limiting or "transmit-power",
                  feasible_override=check.feasible)
    res.meta["repair_steps"] = repaired
    return res


def exhaustive_oracle(scn: Scenario, objective: str = "total", sol: SolverConfig | None = None,
                      rng: np.random.Generator | None = None, table: PowerTable | None = None,
                      budget: int = 10**6) -> AllocationResult:
    """Global minimum over every integer allocation with ``sum(n) <= N_max``.

    ``objective='total'`` also enforces the transmit cap. Desk-scale only:
    refuses when the enumeration exceeds ``budget`` combinations.
    """
    if objective not in ("transmit", "total"):
        raise InvalidInputError("objective must be 'transmit' or 'total'")
    table = _prepare(scn, sol, rng, table)
    cfg = scn.cfg
    active, n0 = _init(scn)
    idx = np.flatnonzero(active)
    free = cfg.N_max - len(idx)
    if free < 0:
        return _finish(scn, table, n0, objective, limiting="subcarriers", feasible_override=False)
    if (free + 1) ** len(idx) > budget:
        raise OracleBudgetError(f"{(free + 1) ** len(idx)} combinations exceed budget {budget}")
    curves = np.array([table.curve(int(k))[: free + 1] for k in idx])
    best_val, best_n, best_feasible = math.inf, None, False
    fallback_val, fallback_n = math.inf, None
    for combo in itertools.product(range(1, free + 2), repeat=len(idx)):
        s = sum(combo)
        if s > cfg.N_max:
            continue
        p = sum(curves[j, c - 1] for j, c in enumerate(combo))
        if objective == "transmit":
            val, ok = p, p <= cfg.P_max
            if p < best_val:
                best_val, best_n, best_feasible = p, combo, ok
            continue
        val = p / cfg.rho + cfg.P_ca * cfg.N_T * s + cfg.P_0c
        if p <= cfg.P_max:
            if val < best_val:
                best_val, best_n, best_feasible = val, combo, True
        elif p < fallback_val:
            fallback_val, fallback_n = p, combo
    chosen = best_n if best_n is not None else fallback_n
    n = n0.copy()
    if chosen is not None:
        n[idx] = chosen
    res = _finish(scn, table, n, objective, feasible_override=best_feasible)
    res.meta["combinations"] = (free + 1) ** len(idx)
    return res


def qos_residuals(res: AllocationResult) -> np.ndarray:
    """Per-user relative QoS shortfall of a result on its table's frozen pools."""
    table = res.table
    out = []
    for k, u in enumerate(table.scn.users):
        nk = int(res.alloc.n[k])
        if nk == 0 or not u.active:
            out.append(-1.0)
            continue
        out.append(qos_residual(u, nk, float(res.alloc.p[k]), table.pool(k), table.scn.cfg))
    return np.array(out)


# ---------------------------------------------------------------------------
# Condition checks

@dataclass
class ConditionsReport:
    n: np.ndarray
    power: np.ndarray
    delta: np.ndarray
    sigma_delta: np.ndarray
    sigma_second: np.ndarray
    cond1_violations: list
    cond2_violations: list
    n_acute: int | None = None

    @property
    def ok(self) -> bool:
        return not self.cond1_violations and not self.cond2_violations

    def rows(self):
        for i, n in enumerate(self.n):
            d = self.delta[i] if i < len(self.delta) else float("nan")
            yield int(n), float(self.power[i]), float(d)


def _flags(power, delta, sig_d, sig_2, n, tol_sigma):
    c1 = [int(n[i]) for i in range(len(delta)) if -delta[i] > tol_sigma * sig_d[i]]
    c2 = [int(n[i]) for i in range(len(delta) - 1) if delta[i + 1] - delta[i] > tol_sigma * sig_2[i]]
    return c1, c2


def validate_conditions(user: UserSpec, n_range, cfg: SystemConfig, sol: SolverConfig | None = None,
                        rng: np.random.Generator | None = None, draws: int = 10000, groups: int = 10,
                        tol_sigma: float = 3.0, pool=None, closed_form: bool = False) -> ConditionsReport:
    """Tabulate ``P(n)`` and ``dP(n) = P(n) - P(n+1)`` over ``n_range`` and flag Condition 1/2 breaks.

    Differences are taken between consecutive points of ``n_range``, so the
    last point only enters as ``P(n+1)``. Monte Carlo mode estimates the
    standard error of every first and second difference by a delete-a-group
    jackknife over ``groups`` slices of the pool (full-size replicates keep the
    rare deep-fade draws that dominate URLLC estimates); a break counts only
    when it exceeds ``tol_sigma`` standard errors. ``closed_form=True`` uses
    the channel-hardened URLLC expression and flags any break exactly.
    """
    sol = sol or SolverConfig()
    n_vals = np.asarray(list(n_range), dtype=np.int64)
    if n_vals.size < 2 or np.any(n_vals < 1) or np.any(np.diff(n_vals) != 1):
        raise InvalidInputError("n_range must be at least two consecutive integers >= 1")
    n_acute = urllc_closed_form_minimizer(user, cfg) if user.service == URLLC else None
    if closed_form:
        if user.service != URLLC:
            raise InvalidInputError("the closed form exists for URLLC users only")
        from .solver import urllc_closed_form_power

        power = np.array([urllc_closed_form_power(user, int(n), cfg) for n in n_vals])
        delta = power[:-1] - power[1:]
        zeros = np.zeros(len(delta))
        c1, c2 = _flags(power, delta, zeros, zeros, n_vals, tol_sigma)
        return ConditionsReport(n_vals, power, delta, zeros, zeros[:-1], c1, c2, n_acute)
    if n_vals[-1] > cfg.N_max:
        raise InvalidInputError("n_range exceeds N_max")
    if pool is None:
        if rng is None:
            raise InvalidInputError("either rng or pool is required")
        pool = rng.standard_gamma(cfg.N_T, size=(draws, int(n_vals[-1])))
    pool = np.asarray(pool, dtype=float)
    power = min_power_curve(user, n_vals, cfg, pool, sol.rel_width)
    delta = power[:-1] - power[1:]
    if groups < 2:
        raise InvalidInputError("groups must be >= 2")
    g = min(groups, len(pool))
    if g < 2:
        # a single (deterministic) draw has no sampling error
        sig_d, sig_2 = np.zeros(len(delta)), np.zeros(len(delta) - 1)
    else:
        parts = np.array_split(np.arange(len(pool)), g)
        jp = np.array([min_power_curve(user, n_vals, cfg, np.delete(pool, part, axis=0), sol.rel_width)
                       for part in parts])
        jd = jp[:, :-1] - jp[:, 1:]
        j2 = jd[:, 1:] - jd[:, :-1]
        scale = (g - 1) / g
        sig_d = np.sqrt(scale * ((jd - jd.mean(axis=0)) ** 2).sum(axis=0))
        sig_2 = np.sqrt(scale * ((j2 - j2.mean(axis=0)) ** 2).sum(axis=0))
    c1, c2 = _flags(power, delta, sig_d, sig_2, n_vals, tol_sigma)
    return ConditionsReport(n_vals, power, delta, sig_d, sig_2, c1, c2, n_acute)
