"""Accuracy, QoS-violation and power-vs-users metrics, plus plot-data writers.

Every metric is computed against the per-user power curves stored with the
test samples, i.e. the solver's required power ``P_k(n)`` at the predicted
subcarrier count.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .allocator import PowerTable, Scenario, greedy_min_total
from .config import SERVICES, SystemConfig, UserSpec
from .errors import InvalidInputError
from .neural import allocate


@dataclass
class EvalConfig:
    grid: tuple | None = None  # Delta_P * K^xi values in W
    P_req: float = 0.95
    test_samples: int | None = None

    def __post_init__(self):
        if self.grid is not None and any(g < 0 for g in self.grid):
            raise InvalidInputError("margins must be >= 0")
        if not 0 < self.P_req < 1:
            raise InvalidInputError("P_req must lie in (0, 1)")

    def margins(self, system: SystemConfig) -> np.ndarray:
        if self.grid is not None:
            return np.asarray(self.grid, dtype=float)
        return np.linspace(0.0, 0.15 * system.P_max, 16)


class OraclePredictor:
    """Stub model that returns the stored labels of ``samples`` (in order)."""

    def __init__(self, samples):
        self.n = np.array([s.n_star for s in samples])
        self.p = np.array([s.p_star for s in samples])

    def allocate(self, x):
        if len(x) != len(self.n):
            raise InvalidInputError("oracle predictor must be queried with its own samples")
        return self.n.copy(), self.p.copy()


def predict(model, samples, N_max: int) -> tuple:
    if not samples:
        raise InvalidInputError("empty test set")
    x = np.array([s.x for s in samples])
    if hasattr(model, "allocate"):
        return model.allocate(x)
    return allocate(model, x, N_max)


def _required(sample, n: np.ndarray) -> np.ndarray:
    if sample.curves is None:
        raise InvalidInputError("test samples need stored power curves")
    req = np.zeros(len(n))
    for k, nk in enumerate(n):
        if sample.c[k] > 0:
            req[k] = sample.curves[k][nk - 1] if nk >= 1 else math.inf
    return req


def _charged(sample, n, p, system: SystemConfig) -> np.ndarray:
    used = np.maximum(np.where(sample.c > 0, p, 0.0), _required(sample, n))
    return np.minimum(used, system.P_max)


def _p_tot(p, n, system: SystemConfig) -> float:
    return float(np.sum(p) / system.rho + system.P_ca * system.N_T * np.sum(n) + system.P_0c)


def eta_values(n_pred, p_pred, samples, system: SystemConfig) -> np.ndarray:
    """Per-sample ``1 - (P_tot(pred) - P_tot(opt)) / P_tot(opt)``.

    A predicted power below the required power at the predicted count is
    replaced by the required power. No user is charged more than ``P_max``,
    the most the base station can radiate; such users fail their QoS, which
    the violation curve reports.
    """
    out = np.empty(len(samples))
    for i, s in enumerate(samples):
        used = _charged(s, n_pred[i], p_pred[i], system)
        opt = _p_tot(s.p_star, s.n_star, system)
        out[i] = 1.0 - (_p_tot(used, n_pred[i], system) - opt) / opt
    return out


def accuracy_eta(model, samples, system: SystemConfig, N_max: int | None = None) -> float:
    n, p = predict(model, samples, N_max or system.N_max)
    return float(eta_values(n, p, samples, system).mean())


def qos_violation_curve(model, samples, system: SystemConfig, cfg: EvalConfig | None = None) -> dict:
    """Per service: rows ``(Delta_P K^xi, Pr{P_pred + Delta_P < P_req(n_pred)})`` and ``"all"`` pooled.

    ``Delta_P`` is a uniform per-user margin, ``K^xi`` the number of slots of
    the service in the user layout.
    """
    cfg = cfg or EvalConfig()
    if cfg.test_samples is not None:
        samples = samples[: cfg.test_samples]
    n, p = predict(model, samples, system.N_max)
    services = samples[0].services
    grid = cfg.margins(system)
    pred, req, svc = [], [], []
    for i, s in enumerate(samples):
        r = _required(s, n[i])
        for k in np.flatnonzero(s.c > 0):
            pred.append(p[i, k])
            req.append(r[k])
            svc.append(services[k])
    pred, req, svc = np.array(pred), np.array(req), np.array(svc)
    table = {}
    total = {}
    for sv in SERVICES:
        K_xi = sum(1 for s in services if s == sv)
        mask = svc == sv
        if K_xi == 0 or not mask.any():
            continue
        rows = []
        for g in grid:
            viol = pred[mask] + g / K_xi < req[mask]
            rows.append((float(g), float(viol.mean())))
            total.setdefault(float(g), []).append(viol)
        table[sv] = rows
    table["all"] = [(g, float(np.concatenate(v).mean())) for g, v in total.items()]
    for rows in table.values():
        probs = [r[1] for r in rows]
        if any(b > a for a, b in zip(probs, probs[1:])):
            raise AssertionError("violation curve must be nonincreasing in the margin")
    return table


def _interleaved(services) -> list:
    """Slot activation order cycling through services so the mix stays balanced."""
    queues = {sv: [k for k, s in enumerate(services) if s == sv] for sv in SERVICES}
    order = []
    while any(queues.values()):
        for sv in SERVICES:
            if queues[sv]:
                order.append(queues[sv].pop(0))
    return order


def power_vs_users(model, samples, system: SystemConfig, counts=None) -> list:
    """Rows ``(K, mean optimal P_tot, mean model P_tot, mean relative gap)``.

    For ``K`` users the remaining slots are padded with zero traffic features,
    and the optimum is recomputed from the stored per-user curves.
    """
    if not samples:
        raise InvalidInputError("empty test set")
    services = samples[0].services
    width = len(services)
    counts = list(range(width + 1)) if counts is None else list(counts)
    if any(c < 0 or c > width for c in counts):
        raise InvalidInputError(f"user count must lie in [0, {width}]")
    order = _interleaved(services)
    rows = []
    for K in counts:
        keep = np.zeros(width, dtype=bool)
        keep[order[:K]] = True
        opt, mod = [], []
        padded = []
        for s in samples:
            x = s.x.copy()
            x[width:][~keep] = 0.0
            if K == 0:
                opt.append(system.P_0c)
            else:
                users = [UserSpec(sv, s.alpha[k], **_demand(sv, s.c[k] if keep[k] else 0.0))
                         for k, sv in enumerate(services)]
                scn = Scenario(users, system)
                res = greedy_min_total(scn, table=PowerTable.from_curves(scn, s.curves))
                opt.append(res.total_power)
            padded.append(type(s)(x, s.n_star, s.p_star, s.services, s.curves))
        n, p = predict(model, padded, system.N_max)
        for i, s in enumerate(padded):
            mod.append(_p_tot(_charged(s, n[i], p[i], system), n[i], system))
        opt, mod = np.array(opt), np.array(mod)
        rows.append((K, float(opt.mean()), float(mod.mean()), float(np.mean((mod - opt) / opt))))
    return rows


def _demand(service: str, c: float) -> dict:
    """Keyword arguments that mark a padded slot active or idle; curves carry the real requirement."""
    if service == "tolerant":
        return {"arrival_rate": c}
    if service == "sensitive":
        return {"nu_a": 1.0 if c > 0 else 0.0}
    return {"packet_bits": c}


# ---------------------------------------------------------------------------
# plot data

def write_tsv(path, columns, rows, figure: str, note: str = "") -> None:
    lines = [f"# {figure}" + (f": {note}" if note else ""), "\t".join(columns)]
    lines += ["\t".join(_cell(v) for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def write_jsonl(path, columns, rows, figure: str) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps({"figure": figure, **dict(zip(columns, row))}, sort_keys=True) + "\n")


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def violation_rows(table: dict) -> list:
    return [(sv, g, pr) for sv, rows in table.items() for g, pr in rows]
