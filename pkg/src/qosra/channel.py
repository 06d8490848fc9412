"""Large-scale path loss / shadowing and Gamma small-scale gains."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError


@dataclass(frozen=True)
class ChannelParams:
    cell_radius: float = 200.0
    pathloss_intercept: float = 35.3
    pathloss_slope: float = 37.6
    shadowing_sigma: float = 8.0
    N_T: int = 64
    min_distance: float = 10.0

    def __post_init__(self):
        if self.cell_radius <= 0:
            raise InvalidInputError("cell_radius must be positive")
        if self.shadowing_sigma < 0:
            raise InvalidInputError("shadowing_sigma must be nonnegative")
        if self.N_T < 1:
            raise InvalidInputError("N_T must be >= 1")
        if not 0 < self.min_distance <= self.cell_radius:
            raise InvalidInputError("min_distance must lie in (0, cell_radius]")


@dataclass
class ChannelDraw:
    """Small-scale gains with shape ``(n_users, n_draws, n_subcarriers)``.

    Row ``gains[k]`` is the frozen Monte Carlo pool of user ``k``; each of its
    rows is one coherence block and each column one subcarrier.
    """

    gains: np.ndarray

    def __post_init__(self):
        self.gains = np.asarray(self.gains, dtype=float)
        if self.gains.ndim == 2:
            self.gains = self.gains[:, :, None]
        if self.gains.ndim != 3:
            raise InvalidInputError("gains must be (users, draws[, subcarriers])")
        if np.any(self.gains < 0):
            raise InvalidInputError("gains must be nonnegative")

    def user(self, k: int) -> np.ndarray:
        return self.gains[k]


def pathloss_db(distance, params: ChannelParams):
    return params.pathloss_intercept + params.pathloss_slope * np.log10(distance)


def large_scale_gain(distance: float, params: ChannelParams, rng: np.random.Generator | None = None,
                     shadowing_db: float | None = None) -> float:
    """Linear large-scale gain ``10**(-(PL(d) + S)/10)``.

    ``S`` is drawn from ``N(0, shadowing_sigma)`` dB using ``rng`` unless
    ``shadowing_db`` pins it.
    """
    if not distance > 0:
        raise InvalidInputError("distance must be positive")
    if distance > params.cell_radius:
        raise InvalidInputError("distance exceeds cell radius")
    if shadowing_db is None:
        if rng is None:
            raise InvalidInputError("rng required when shadowing is not pinned")
        shadowing_db = rng.normal(0.0, params.shadowing_sigma) if params.shadowing_sigma > 0 else 0.0
    return float(10.0 ** (-(pathloss_db(distance, params) + shadowing_db) / 10.0))


def place_users(n_users: int, params: ChannelParams, rng: np.random.Generator) -> np.ndarray:
    """Distances of users placed uniformly over the annulus [min_distance, cell_radius]."""
    r0, r1 = params.min_distance, params.cell_radius
    u = rng.random(n_users)
    return np.sqrt(r0**2 + u * (r1**2 - r0**2))


def sample_small_scale(n_users: int, n_draws: int, N_T: int, rng: np.random.Generator,
                       n_subcarriers: int = 1) -> ChannelDraw:
    """Gamma(N_T, 1) power gains: MRT over ``N_T`` Rayleigh antennas."""
    if n_users < 1 or n_draws < 1 or n_subcarriers < 1:
        raise InvalidInputError("counts must be >= 1")
    if N_T < 1:
        raise InvalidInputError("N_T must be >= 1")
    return ChannelDraw(rng.standard_gamma(N_T, size=(n_users, n_draws, n_subcarriers)))


def frozen_gains(value: float, n_subcarriers: int = 1, n_users: int = 1) -> ChannelDraw:
    """Deterministic channel: every block and subcarrier has gain ``value``."""
    return ChannelDraw(np.full((n_users, 1, n_subcarriers), float(value)))
