"""System constants, user descriptors and allocations.

All quantities are SI inside the package (W, Hz, s, bits). Conversions from
dBm, bytes and kilobytes happen only at the configuration boundary, see
:func:`dbm_to_watt` and :func:`load_config_document`.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from .errors import InvalidInputError

TOLERANT = "tolerant"
SENSITIVE = "sensitive"
URLLC = "urllc"
SERVICES = (TOLERANT, SENSITIVE, URLLC)


def dbm_to_watt(dbm: float) -> float:
    return 10.0 ** (dbm / 10.0) / 1e3


def watt_to_dbm(watt: float) -> float:
    return 10.0 * math.log10(watt * 1e3)


@dataclass(frozen=True)
class SystemConfig:
    """Radio and power-consumption constants of one base station.

    ``P_ca`` is the circuit power per antenna per occupied subcarrier. When
    left as ``None`` it is derived as ``0.05 / N_max`` so that one antenna
    occupying the whole band costs 50 mW.
    """

    W: float = 120e3
    T_s: float = 0.125e-3
    T_c: float = 5e-3
    N_T: int = 64
    N_0: float = dbm_to_watt(-174.0)
    snr_gap: float = 2.0
    rho: float = 0.5
    P_ca: float | None = None
    P_0c: float = 0.05
    N_max: int = 256
    P_max: float = dbm_to_watt(46.0)

    def __post_init__(self):
        if self.P_ca is None:
            object.__setattr__(self, "P_ca", 0.05 / self.N_max)
        for name in ("W", "T_s", "T_c", "N_0", "P_0c", "P_max"):
            if not getattr(self, name) > 0:
                raise InvalidInputError(f"{name} must be positive")
        if self.P_ca < 0:
            raise InvalidInputError("P_ca must be nonnegative")
        if not 0 < self.rho <= 1:
            raise InvalidInputError("rho must lie in (0, 1]")
        if self.snr_gap < 1:
            raise InvalidInputError("snr_gap must be >= 1")
        if int(self.N_T) != self.N_T or self.N_T < 1:
            raise InvalidInputError("N_T must be an integer >= 1")
        if int(self.N_max) != self.N_max or self.N_max < 1:
            raise InvalidInputError("N_max must be an integer >= 1")
        object.__setattr__(self, "N_T", int(self.N_T))
        object.__setattr__(self, "N_max", int(self.N_max))

    def with_(self, **changes) -> "SystemConfig":
        """Copy with ``changes``; a derived ``P_ca`` is re-derived for a new ``N_max``."""
        if "N_max" in changes and "P_ca" not in changes and self.P_ca == 0.05 / self.N_max:
            changes["P_ca"] = None
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, default=repr)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class UserSpec:
    """One user: its service class, large-scale gain and traffic descriptor.

    Only the traffic fields of the user's own service are read. A user whose
    demand is zero (``arrival_rate=0``, ``nu_a=0`` or ``packet_bits=0``) is
    *inactive*; this is how absent users are padded into a fixed-width input.
    """

    service: str
    alpha: float
    arrival_rate: float = 0.0  # tolerant, bits/s
    nu_a: float = 0.0  # sensitive, packets/s
    nu_s: float = 1e-3  # sensitive, 1/bits
    delay_bound: float = 0.05  # sensitive, s
    eps_q: float = 1e-2  # sensitive
    packet_bits: float = 0.0  # urllc
    eps_max: float = 5e-8  # urllc

    def __post_init__(self):
        if self.service not in SERVICES:
            raise InvalidInputError(f"unknown service {self.service!r}")
        if not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise InvalidInputError("alpha must be positive")
        if self.service == TOLERANT and self.arrival_rate < 0:
            raise InvalidInputError("arrival_rate must be >= 0")
        if self.service == SENSITIVE:
            if self.nu_a < 0 or self.nu_s <= 0 or self.delay_bound <= 0:
                raise InvalidInputError("nu_a >= 0, nu_s > 0 and delay_bound > 0 required")
            if not 0 < self.eps_q < 1:
                raise InvalidInputError("eps_q must lie in (0, 1)")
        if self.service == URLLC:
            if self.packet_bits < 0:
                raise InvalidInputError("packet_bits must be >= 0")
            if not 0 < self.eps_max < 1:
                raise InvalidInputError("eps_max must lie in (0, 1)")

    @property
    def active(self) -> bool:
        if self.service == TOLERANT:
            return self.arrival_rate > 0
        if self.service == SENSITIVE:
            return self.nu_a > 0
        return self.packet_bits > 0

    @property
    def feature(self) -> float:
        """Traffic feature fed to the networks: mean rate, effective bandwidth or packet bits."""
        if self.service == TOLERANT:
            return self.arrival_rate
        if self.service == SENSITIVE:
            from .qos import effective_bandwidth

            return effective_bandwidth(self) if self.active else 0.0
        return self.packet_bits

    def to_dict(self) -> dict:
        d = {"service": self.service, "alpha": self.alpha}
        keys = {
            TOLERANT: ("arrival_rate",),
            SENSITIVE: ("nu_a", "nu_s", "delay_bound", "eps_q"),
            URLLC: ("packet_bits", "eps_max"),
        }[self.service]
        d.update({k: getattr(self, k) for k in keys})
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UserSpec":
        return cls(**d)


@dataclass
class Allocation:
    n: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        self.n = np.asarray(self.n, dtype=np.int64)
        self.p = np.asarray(self.p, dtype=float)
        if self.n.shape != self.p.shape:
            raise InvalidInputError("n and p must have equal length")
        if np.any(self.n < 0) or np.any(self.p < 0):
            raise InvalidInputError("allocations must be nonnegative")


# ---------------------------------------------------------------------------
# configuration document

@dataclass
class DatasetTemplate:
    """Ranges from which dataset inputs are drawn (SI units).

    ``users`` lists the service of every input slot; ``active_probability``
    below 1 pads slots with inactive users, which trains the networks for
    varying user counts.
    """

    users: tuple = (TOLERANT, TOLERANT, SENSITIVE, SENSITIVE, URLLC, URLLC)
    cell_radius: float = 200.0
    min_distance: float = 10.0
    shadowing_sigma: float = 8.0
    arrival_rate: tuple = (50e3 * 8, 100e3 * 8)
    nu_a: tuple = (100.0, 1000.0)
    packet_size: tuple = (1e3, 20e3)  # 1/nu_s, bits
    delay_bound: float = 0.05
    eps_q: float = 1e-2
    packet_bits: tuple = (20 * 8, 64 * 8)
    eps_max: float = 5e-8
    active_probability: float = 1.0
    draws: int = 200

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetTemplate":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidInputError(f"unknown template keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class Settings:
    system: SystemConfig = field(default_factory=SystemConfig)
    template: DatasetTemplate = field(default_factory=DatasetTemplate)
    solver: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    arch: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    seed: int = 0


# keys of the "system" section that arrive in engineering units
_UNIT_KEYS = {
    "P_max_dBm": ("P_max", dbm_to_watt),
    "N_0_dBm_per_Hz": ("N_0", dbm_to_watt),
    "P_ca_mW": ("P_ca", lambda v: v / 1e3),
    "P_0c_mW": ("P_0c", lambda v: v / 1e3),
    "W_kHz": ("W", lambda v: v * 1e3),
    "T_s_ms": ("T_s", lambda v: v / 1e3),
    "T_c_ms": ("T_c", lambda v: v / 1e3),
}
_TEMPLATE_UNIT_KEYS = {
    "arrival_rate_KBps": ("arrival_rate", lambda v: tuple(x * 8e3 for x in v)),
    "packet_size_kbits": ("packet_size", lambda v: tuple(x * 1e3 for x in v)),
    "packet_bytes": ("packet_bits", lambda v: tuple(x * 8 for x in v)),
    "delay_bound_ms": ("delay_bound", lambda v: v / 1e3),
}


def _convert(section: dict, table: dict) -> dict:
    out = {}
    for k, v in section.items():
        if k in table:
            name, fn = table[k]
            out[name] = fn(v)
        else:
            out[k] = v
    return out


def system_from_dict(d: dict) -> SystemConfig:
    d = _convert(d, _UNIT_KEYS)
    known = {f.name for f in fields(SystemConfig)}
    unknown = set(d) - known
    if unknown:
        raise InvalidInputError(f"unknown system keys: {sorted(unknown)}")
    return SystemConfig(**d)


def load_config_document(path: str | Path | None, overrides: dict[str, Any] | None = None) -> Settings:
    """Read a YAML/JSON key-value document into :class:`Settings`.

    ``overrides`` use dotted keys (``system.N_T``) and win over the file.
    """
    import yaml

    raw: dict = {}
    if path is not None:
        text = Path(path).read_text()
        raw = yaml.safe_load(text) or {}
        if not isinstance(raw, dict):
            raise InvalidInputError("config document must be a mapping")
    for key, value in (overrides or {}).items():
        section, _, name = key.partition(".")
        if not name:
            raw[section] = value
        else:
            raw.setdefault(section, {})[name] = value
    unknown = set(raw) - {"system", "template", "solver", "train", "arch", "eval", "seed"}
    if unknown:
        raise InvalidInputError(f"unknown config sections: {sorted(unknown)}")
    tmpl = _convert(raw.get("template", {}), _TEMPLATE_UNIT_KEYS)
    return Settings(
        system=system_from_dict(raw.get("system", {})),
        template=DatasetTemplate.from_dict(tmpl),
        solver=dict(raw.get("solver", {})),
        train=dict(raw.get("train", {})),
        arch=dict(raw.get("arch", {})),
        eval=dict(raw.get("eval", {})),
        seed=int(raw.get("seed", 0)),
    )
