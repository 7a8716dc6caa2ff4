"""UAV/UE kinematics and the near/far-field boundary of a ULA."""
from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractError

SPEED_OF_LIGHT = 299_792_458.0


class Regime(enum.IntEnum):
    # integer values match the on-disk regime byte
    FAR = 0
    NEAR = 1


@dataclass(frozen=True)
class TrajectoryState:
    r_uav: np.ndarray
    r_ue: np.ndarray
    v_uav: float
    v_ue: float
    d_uav: np.ndarray
    d_ue: np.ndarray
    dt: float
    slot: int = 0

    def __post_init__(self):
        for name in ("r_uav", "r_ue", "d_uav", "d_ue"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        for name in ("d_uav", "d_ue"):
            if abs(np.linalg.norm(getattr(self, name)) - 1.0) > 1e-9:
                raise ContractError(f"{name} must be a unit vector")
        if self.v_uav < 0 or self.v_ue < 0:
            raise ContractError("speeds must be non-negative")
        if self.r_uav[2] < 0:
            raise ContractError("UAV altitude must be non-negative")

    @property
    def distance(self) -> float:
        return float(np.linalg.norm(self.r_ue - self.r_uav))

    @property
    def positions(self) -> np.ndarray:
        """The 6-vector [r_U, r_k] in meters."""
        return np.concatenate([self.r_uav, self.r_ue])


def advance_positions(state: TrajectoryState) -> TrajectoryState:
    """Move both nodes one slot along their fixed directions."""
    return replace(
        state,
        r_uav=state.r_uav + state.v_uav * state.dt * state.d_uav,
        r_ue=state.r_ue + state.v_ue * state.dt * state.d_ue,
        slot=state.slot + 1,
    )


@dataclass(frozen=True)
class RegimeBoundary:
    aperture: float
    wavelength: float
    rayleigh: float

    @classmethod
    def for_ula(cls, n_antennas: int, spacing: float, wavelength: float) -> "RegimeBoundary":
        return cls((n_antennas - 1) * spacing, wavelength,
                   rayleigh_distance(n_antennas, spacing, wavelength))


def rayleigh_distance(n_antennas: int, spacing: float, wavelength: float) -> float:
    """2 D^2 / lambda with aperture D = (N - 1) d."""
    if n_antennas < 2 or spacing <= 0 or wavelength <= 0:
        raise ContractError(
            f"rayleigh_distance needs N>=2, d>0, lambda>0 (got {n_antennas}, {spacing}, {wavelength})")
    aperture = (n_antennas - 1) * spacing
    return 2.0 * aperture ** 2 / wavelength


def classify_regime(distance: float, boundary: RegimeBoundary | float) -> Regime:
    """Near strictly inside the Rayleigh distance; a tie counts as Far."""
    if distance <= 0:
        raise ContractError(f"distance must be positive, got {distance}")
    d_f = boundary.rayleigh if isinstance(boundary, RegimeBoundary) else float(boundary)
    return Regime.NEAR if distance < d_f else Regime.FAR
