"""Multipath ULA channels with plane-wave (far) or spherical-wave (near) array responses.

The array is a ULA along the global x-axis centred on the UAV position.
Angles are measured from broadside, so ``sin(theta)`` is the projection of
the unit arrival direction onto the array axis.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .config import SystemConfig
from .errors import ContractError
from .geometry import SPEED_OF_LIGHT, Regime, TrajectoryState

ARRAY_AXIS = np.array([1.0, 0.0, 0.0])


@dataclass(frozen=True)
class Path:
    gain: complex
    angle: float
    distance: float
    is_los: bool


@dataclass(frozen=True)
class PathSet:
    paths: tuple[Path, ...]
    scatterers: np.ndarray          # (L-1, 3), fixed NLoS anchors
    ar_coefficient: float

    def __post_init__(self):
        if len(self.paths) < 1 or sum(p.is_los for p in self.paths) != 1 or not self.paths[0].is_los:
            raise ContractError("a PathSet holds exactly one LoS path, listed first")
        if not 0.0 <= self.ar_coefficient <= 1.0:
            raise ContractError("AR coefficient must lie in [0, 1]")

    def __len__(self):
        return len(self.paths)

    @property
    def gains(self) -> np.ndarray:
        return np.array([p.gain for p in self.paths], dtype=np.complex128)

    def with_gains(self, gains) -> "PathSet":
        paths = tuple(replace(p, gain=complex(g)) for p, g in zip(self.paths, gains))
        return replace(self, paths=paths)


@dataclass(frozen=True)
class ChannelBlock:
    H: np.ndarray                   # (N, Q) complex
    regime: Regime
    slot: int = 0


def steering_far(theta: float, n_antennas: int, spacing: float, wavelength: float) -> np.ndarray:
    n = np.arange(n_antennas)
    return np.exp(-1j * 2 * np.pi * spacing / wavelength * n * np.sin(theta)) / np.sqrt(n_antennas)


def element_offsets(n_antennas: int) -> np.ndarray:
    """Signed element positions along the axis in units of the spacing.

    Element 0 sits at the +axis end so that the near-field phase profile
    tends to the far-field one (which is indexed from element 0) as r grows.
    """
    return (n_antennas - 1) / 2 - np.arange(n_antennas)


def element_distances(theta: float, r: float, n_antennas: int, spacing: float) -> np.ndarray:
    """Exact UE-to-element distances ``sqrt(r^2 + delta^2 d^2 - 2 r sin(theta) delta d)``."""
    delta_d = element_offsets(n_antennas) * spacing
    return np.sqrt(r * r + delta_d ** 2 - 2.0 * r * np.sin(theta) * delta_d)


def steering_near(theta: float, r: float, n_antennas: int, spacing: float,
                  wavelength: float) -> np.ndarray:
    if r <= n_antennas / 2 * spacing:
        raise ContractError(f"near-field distance {r} m lies inside the array half-aperture")
    rn = element_distances(theta, r, n_antennas, spacing)
    # phase referenced to element 0, matching steering_far's first entry of 1/sqrt(N)
    return np.exp(-1j * 2 * np.pi / wavelength * (rn - rn[0])) / np.sqrt(n_antennas)


def angle_and_distance(origin: np.ndarray, point: np.ndarray) -> tuple[float, float]:
    offset = np.asarray(point, dtype=float) - np.asarray(origin, dtype=float)
    r = float(np.linalg.norm(offset))
    if r <= 0:
        raise ContractError("point coincides with the array centre")
    s = float(np.clip(offset @ ARRAY_AXIS / r, -1.0, 1.0))
    return float(np.arcsin(s)), r


def _cn(rng: np.random.Generator, size) -> np.ndarray:
    return (rng.standard_normal(size) + 1j * rng.standard_normal(size)) / np.sqrt(2.0)


def _sample_scatterers(rng, config: SystemConfig, traj: TrajectoryState, count: int) -> np.ndarray:
    centre = 0.5 * (traj.r_uav + traj.r_ue)
    min_distance = 2.0 * config.half_aperture + 1.0
    out = np.empty((count, 3))
    for i in range(count):
        while True:
            xy = centre[:2] + rng.uniform(-config.scatterer_extent, config.scatterer_extent, 2)
            p = np.array([xy[0], xy[1], rng.uniform(0.0, config.scatterer_height)])
            if np.linalg.norm(p - traj.r_uav) > min_distance:
                out[i] = p
                break
    return out


def sample_paths(rng: np.random.Generator, config: SystemConfig, traj: TrajectoryState) -> PathSet:
    """One LoS path from the true geometry plus L-1 scatterer-anchored NLoS paths."""
    theta, r = angle_and_distance(traj.r_uav, traj.r_ue)
    los = Path(complex(np.exp(1j * rng.uniform(0.0, 2 * np.pi))), theta, r, True)
    scatterers = _sample_scatterers(rng, config, traj, config.n_paths - 1)
    gains = _cn(rng, config.n_paths - 1)
    nlos = []
    for p, g in zip(scatterers, gains):
        th, dist = angle_and_distance(traj.r_uav, p)
        nlos.append(Path(complex(g), th, dist, False))
    return PathSet((los, *nlos), scatterers, config.ar_coefficient)


def evolve_paths(paths: PathSet, traj: TrajectoryState, rng: np.random.Generator) -> PathSet:
    """Re-derive geometry for the new slot and step the NLoS gains through AR(1).

    The LoS gain is held fixed; its phase rotation with distance is carried
    by the ``exp(-j 2 pi f r / c)`` term of the synthesised channel.
    """
    rho = paths.ar_coefficient
    theta, r = angle_and_distance(traj.r_uav, traj.r_ue)
    new = [replace(paths.paths[0], angle=theta, distance=r)]
    n_nlos = len(paths) - 1
    if n_nlos:
        w = _cn(rng, n_nlos)
        innovation = np.sqrt(max(0.0, 1.0 - rho * rho))
        for path, anchor, wi in zip(paths.paths[1:], paths.scatterers, w):
            th, dist = angle_and_distance(traj.r_uav, anchor)
            gain = rho * path.gain + innovation * wi if rho < 1.0 else path.gain
            new.append(replace(path, gain=complex(gain), angle=th, distance=dist))
    return replace(paths, paths=tuple(new))


def synthesize_channel(paths: PathSet, regime: Regime, config: SystemConfig,
                       slot: int = 0) -> ChannelBlock:
    """h = sqrt(N/L) sum_l alpha_l exp(-j 2 pi f r_l / c) a_l, replicated over Q pilot columns."""
    n = config.n_antennas
    d, lam = config.element_spacing, config.wavelength
    h = np.zeros(n, dtype=np.complex128)
    for p in paths.paths:
        if regime == Regime.NEAR:
            a = steering_near(p.angle, p.distance, n, d, lam)
        else:
            a = steering_far(p.angle, n, d, lam)
        h += p.gain * np.exp(-1j * 2 * np.pi * config.frequency * p.distance / SPEED_OF_LIGHT) * a
    h *= np.sqrt(n / len(paths))
    H = np.repeat(h[:, None], config.pilot_length, axis=1)
    return ChannelBlock(H, Regime(regime), slot)
