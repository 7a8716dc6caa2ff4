"""Episode simulation, input preprocessing, the 80/20 split and the on-disk format.

Binary layout (little-endian)::

    b"NFCE" | u32 version | u32 episodes | u32 slots | u32 N | u32 Q
    then per slot, episode-major:
        Y      2*N*Q float64   (real plane then imaginary plane, row-major)
        H_true 2*N*Q float64
        r_U, r_k  6 float64
        regime    u8 (0 = Far, 1 = Near)

The metadata sidecar ``<file>.meta.json`` holds ``DatasetMeta``.
"""
from __future__ import annotations

import functools
import json
import logging
import math
import os
import struct
from dataclasses import dataclass, replace

import numpy as np

from . import channel, signal
from .config import SystemConfig, from_dict, to_dict
from .errors import (ContractError, CorruptionError, FormatError, GenerationError,
                     PersistenceError, UnsupportedVersionError)
from .geometry import Regime, RegimeBoundary, TrajectoryState, advance_positions, classify_regime

log = logging.getLogger(__name__)

MAGIC = b"NFCE"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")
VALIDATION_FRACTION = 0.2


@dataclass(frozen=True)
class SlotRecord:
    Y: np.ndarray
    H_true: np.ndarray
    positions: np.ndarray     # [r_U, r_k], meters
    regime: Regime
    slot: int
    noise_variance: float = 0.0

    @property
    def r_uav(self):
        return self.positions[:3]

    @property
    def r_ue(self):
        return self.positions[3:]


@dataclass
class Episode:
    slots: list[SlotRecord]
    seed: int
    snr_db: float
    config: SystemConfig

    def __len__(self):
        return len(self.slots)


# ---------------------------------------------------------------- simulation


def _unit(v):
    return v / np.linalg.norm(v)


def sample_initial_state(rng: np.random.Generator, config: SystemConfig) -> TrajectoryState:
    """Random start: UAV at altitude, UE at a sampled range below it, random headings."""
    lo, hi = config.uav_altitude_range
    ext = config.uav_horizontal_extent
    r_uav = np.array([rng.uniform(-ext, ext), rng.uniform(-ext, ext), rng.uniform(lo, hi)])
    dist = rng.uniform(*config.ue_distance_range)
    # vertical drop limited so the UE stays at or above ground level
    drop = rng.uniform(0.0, min(1.0, r_uav[2] / dist))
    az = rng.uniform(0.0, 2 * np.pi)
    horiz = math.sqrt(max(0.0, 1.0 - drop * drop))
    r_ue = r_uav + dist * np.array([horiz * math.cos(az), horiz * math.sin(az), -drop])
    r_ue[2] = max(r_ue[2], 0.0)

    d_uav = _unit(rng.standard_normal(3))
    travel = config.v_uav * config.slot_interval * config.slots_per_episode
    if r_uav[2] + travel * d_uav[2] < 0:
        d_uav[2] = -d_uav[2]
    phi = rng.uniform(0.0, 2 * np.pi)
    d_ue = np.array([math.cos(phi), math.sin(phi), 0.0])
    return TrajectoryState(r_uav, r_ue, config.v_uav, config.v_ue, d_uav, d_ue,
                           config.slot_interval, 0)


def _streams(seed: int):
    geo, noise, snr = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(geo), np.random.default_rng(noise), np.random.default_rng(snr))


def _simulate_channels(config: SystemConfig, geo_rng, initial_state=None):
    boundary = RegimeBoundary.for_ula(config.n_antennas, config.element_spacing, config.wavelength)
    state = initial_state if initial_state is not None else sample_initial_state(geo_rng, config)
    paths = None
    for t in range(config.slots_per_episode):
        if t:
            state = advance_positions(state)
        if state.distance <= config.half_aperture:
            raise GenerationError(
                f"UE within the array half-aperture at slot {t} (distance {state.distance:.3f} m)")
        paths = channel.sample_paths(geo_rng, config, state) if paths is None else \
            channel.evolve_paths(paths, state, geo_rng)
        regime = classify_regime(state.distance, boundary)
        yield state, channel.synthesize_channel(paths, regime, config, slot=t)


def _calibration_key(config: SystemConfig) -> SystemConfig:
    return replace(config, snr_db=0.0)


@functools.lru_cache(maxsize=64)
def _calibrate(config: SystemConfig) -> float:
    pilots = signal.make_pilots(config.pilot_length, config.energy)
    seeds = np.random.SeedSequence(config.calibration_seed).generate_state(config.calibration_episodes)
    total, count = 0.0, 0
    for s in seeds:
        geo, _, _ = _streams(int(s))
        for _, block in _simulate_channels(config, geo):
            rx = block.H * pilots.symbols[None, :]
            total += float(np.sum(np.abs(rx) ** 2))
            count += rx.size
    return total / count


def calibrate_signal_power(config: SystemConfig) -> float:
    """Average per-antenna received pilot power over noiseless calibration episodes."""
    return _calibrate(_calibration_key(config))


def generate_episode(config: SystemConfig, seed: int, *, signal_power: float | None = None,
                     initial_state: TrajectoryState | None = None) -> Episode:
    """Simulate one trajectory and its received pilot blocks; deterministic per seed.

    Geometry/gains, noise and the SNR draw use independent child streams of
    ``seed`` so changing the SNR leaves the channel realisation untouched.
    """
    geo_rng, noise_rng, snr_rng = _streams(seed)
    if isinstance(config.snr_db, tuple):
        snr_db = float(snr_rng.uniform(*config.snr_db))
    else:
        snr_db = float(config.snr_db)
    power = calibrate_signal_power(config) if signal_power is None else signal_power
    sigma2 = signal.snr_to_sigma(snr_db, power)
    pilots = signal.make_pilots(config.pilot_length, config.energy)
    slots = []
    for state, block in _simulate_channels(config, geo_rng, initial_state):
        rx = signal.receive_block(block.H, pilots, sigma2, noise_rng, snr_db)
        slots.append(SlotRecord(rx.Y, block.H, state.positions, block.regime, block.slot, sigma2))
    return Episode(slots, seed, snr_db, config)


# ---------------------------------------------------------------- dataset container


@dataclass
class DatasetMeta:
    system: SystemConfig
    signal_power: float
    master_seed: int
    episode_seeds: list[int]
    episode_snr_db: list[float]
    train: list[int]
    validation: list[int]
    input_mean: list[float] | None = None     # per plane (real, imag)
    input_scale: list[float] | None = None
    format_version: int = FORMAT_VERSION

    @property
    def finalized(self) -> bool:
        return self.input_mean is not None and self.input_scale is not None

    def to_json(self) -> dict:
        return {
            "format_version": self.format_version,
            "system": to_dict(self.system),
            "signal_power": self.signal_power,
            "master_seed": self.master_seed,
            "episode_seeds": list(self.episode_seeds),
            "episode_snr_db": list(self.episode_snr_db),
            "split": {"train": list(self.train), "validation": list(self.validation)},
            "normalization": {"mean": self.input_mean, "scale": self.input_scale},
        }

    @classmethod
    def from_json(cls, doc: dict) -> "DatasetMeta":
        return cls(
            system=from_dict(SystemConfig, doc["system"], "system"),
            signal_power=doc["signal_power"],
            master_seed=doc["master_seed"],
            episode_seeds=list(doc["episode_seeds"]),
            episode_snr_db=list(doc["episode_snr_db"]),
            train=list(doc["split"]["train"]),
            validation=list(doc["split"]["validation"]),
            input_mean=doc["normalization"]["mean"],
            input_scale=doc["normalization"]["scale"],
            format_version=doc["format_version"],
        )


@dataclass
class Dataset:
    Y: np.ndarray           # (E, T, N, Q) complex
    H: np.ndarray           # (E, T, N, Q) complex
    positions: np.ndarray   # (E, T, 6)
    regime: np.ndarray      # (E, T) uint8
    meta: DatasetMeta

    @property
    def n_episodes(self) -> int:
        return self.Y.shape[0]

    @property
    def slots_per_episode(self) -> int:
        return self.Y.shape[1]

    def noise_variance(self, episode: int) -> float:
        return signal.snr_to_sigma(self.meta.episode_snr_db[episode], self.meta.signal_power)

    def slot(self, episode: int, t: int) -> SlotRecord:
        return SlotRecord(self.Y[episode, t], self.H[episode, t], self.positions[episode, t],
                          Regime(int(self.regime[episode, t])), t, self.noise_variance(episode))

    def subset(self, episodes) -> "Dataset":
        idx = np.asarray(episodes, dtype=int)
        return Dataset(self.Y[idx], self.H[idx], self.positions[idx], self.regime[idx], self.meta)


def split_indices(n_episodes: int, seed: int) -> tuple[list[int], list[int]]:
    """Seeded shuffle at episode granularity; validation gets floor(20%)."""
    if n_episodes < 5:
        raise ContractError("need at least 5 episodes for an 80/20 split")
    n_val = int(math.floor(n_episodes * VALIDATION_FRACTION))
    order = np.random.default_rng(np.random.SeedSequence([seed, 1])).permutation(n_episodes)
    return sorted(int(i) for i in order[n_val:]), sorted(int(i) for i in order[:n_val])


def episode_seeds(master_seed: int, n_episodes: int) -> list[int]:
    state = np.random.SeedSequence([master_seed, 0]).generate_state(n_episodes, dtype=np.uint32)
    return [int(s) for s in state]


def assemble(episodes: list[Episode], meta: DatasetMeta) -> Dataset:
    Y = np.array([[s.Y for s in ep.slots] for ep in episodes])
    H = np.array([[s.H_true for s in ep.slots] for ep in episodes])
    pos = np.array([[s.positions for s in ep.slots] for ep in episodes])
    reg = np.array([[int(s.regime) for s in ep.slots] for ep in episodes], dtype=np.uint8)
    return Dataset(Y, H, pos, reg, meta)


def normalization_stats(Y: np.ndarray) -> tuple[list[float], list[float]]:
    planes = [Y.real, Y.imag]
    mean = [float(p.mean()) for p in planes]
    scale = [float(p.std()) for p in planes]
    if min(scale) <= 0:
        raise ContractError("degenerate training inputs: zero input scale")
    return mean, scale


def build_dataset(config: SystemConfig, n_episodes: int, seed: int,
                  path: str | os.PathLike | None = None) -> Dataset:
    """Generate, split 80/20 by episode, fit input statistics on train, optionally persist."""
    config.validate()
    train, val = split_indices(n_episodes, seed)
    seeds = episode_seeds(seed, n_episodes)
    power = calibrate_signal_power(config)
    episodes = [generate_episode(config, s, signal_power=power) for s in seeds]
    meta = DatasetMeta(config, power, seed, seeds, [ep.snr_db for ep in episodes], train, val)
    ds = assemble(episodes, meta)
    meta.input_mean, meta.input_scale = normalization_stats(ds.Y[train])
    log.info("built %d episodes (%d train / %d val)", n_episodes, len(train), len(val))
    if path is not None:
        write_dataset(path, ds)
    return ds


# ---------------------------------------------------------------- preprocessing


def planes(Z: np.ndarray) -> np.ndarray:
    """(..., N, Q) complex -> (..., 2, N, Q) real with plane 0 = Re, plane 1 = Im."""
    return np.stack([Z.real, Z.imag], axis=-3)


def image(Y: np.ndarray, meta: DatasetMeta) -> np.ndarray:
    if not meta.finalized:
        raise ContractError("dataset normalization statistics are not finalized")
    mean = np.asarray(meta.input_mean).reshape(2, 1, 1)
    scale = np.asarray(meta.input_scale).reshape(2, 1, 1)
    return (planes(Y) - mean) / scale


def target_vector(H: np.ndarray) -> np.ndarray:
    """(..., N, Q) complex -> (..., 2NQ): all real parts row-major, then all imaginary parts."""
    lead = H.shape[:-2]
    return np.concatenate([H.real.reshape(*lead, -1), H.imag.reshape(*lead, -1)], axis=-1)


def from_target_vector(v: np.ndarray, n_antennas: int, pilot_length: int) -> np.ndarray:
    half = n_antennas * pilot_length
    lead = v.shape[:-1]
    if v.shape[-1] != 2 * half:
        raise ContractError(f"vector length {v.shape[-1]} != 2*N*Q = {2 * half}")
    re = v[..., :half].reshape(*lead, n_antennas, pilot_length)
    im = v[..., half:].reshape(*lead, n_antennas, pilot_length)
    return _complex(re, im)


def preprocess(slot: SlotRecord, meta: DatasetMeta):
    """Return (2xNxQ normalized image, 6-vector positions in meters, 2NQ target)."""
    return image(slot.Y, meta), np.asarray(slot.positions, dtype=float), target_vector(slot.H_true)


# ---------------------------------------------------------------- persistence


def _slot_dtype(n: int, q: int) -> np.dtype:
    return np.dtype([("y", "<f8", (2, n, q)), ("h", "<f8", (2, n, q)),
                     ("pos", "<f8", (6,)), ("regime", "u1")])


def meta_path(path) -> str:
    return os.fspath(path) + ".meta.json"


def write_dataset(path, ds: Dataset) -> None:
    E, T, N, Q = ds.Y.shape
    rec = np.empty(E * T, dtype=_slot_dtype(N, Q))
    rec["y"] = planes(ds.Y).reshape(E * T, 2, N, Q)
    rec["h"] = planes(ds.H).reshape(E * T, 2, N, Q)
    rec["pos"] = ds.positions.reshape(E * T, 6)
    rec["regime"] = ds.regime.reshape(E * T)
    try:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, E, T, N, Q))
            fh.write(rec.tobytes())
        with open(meta_path(path), "w", encoding="utf-8") as fh:
            json.dump(ds.meta.to_json(), fh, indent=2)
            fh.write("\n")
    except OSError as exc:
        raise PersistenceError(f"cannot write dataset ({exc.strerror})", path) from exc


def _complex(re: np.ndarray, im: np.ndarray) -> np.ndarray:
    out = np.empty(re.shape, dtype=np.complex128)
    out.real = re
    out.imag = im
    return out


def read_dataset(path) -> Dataset:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
        with open(meta_path(path), encoding="utf-8") as fh:
            meta_doc = json.load(fh)
    except OSError as exc:
        raise PersistenceError(f"cannot read dataset ({exc.strerror})", path) from exc
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise FormatError("not an NFCE dataset (bad magic)", path)
    if len(blob) < _HEADER.size:
        raise CorruptionError("truncated header", path, offset=len(blob))
    _, version, E, T, N, Q = _HEADER.unpack_from(blob)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported dataset version {version}", path)
    dt = _slot_dtype(N, Q)
    expected = _HEADER.size + E * T * dt.itemsize
    if len(blob) < expected:
        whole = (len(blob) - _HEADER.size) // dt.itemsize
        raise CorruptionError(f"truncated payload after {whole} complete slots", path,
                              offset=_HEADER.size + whole * dt.itemsize)
    if len(blob) > expected:
        raise CorruptionError("trailing bytes after payload", path, offset=expected)
    rec = np.frombuffer(blob, dtype=dt, offset=_HEADER.size, count=E * T)
    y = rec["y"].reshape(E, T, 2, N, Q)
    h = rec["h"].reshape(E, T, 2, N, Q)
    meta = DatasetMeta.from_json(meta_doc)
    if meta.format_version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported metadata version {meta.format_version}", path)
    return Dataset(
        Y=_complex(y[:, :, 0], y[:, :, 1]),
        H=_complex(h[:, :, 0], h[:, :, 1]),
        positions=rec["pos"].reshape(E, T, 6).copy(),
        regime=rec["regime"].reshape(E, T).copy(),
        meta=meta,
    )


__all__ = [
    "SlotRecord", "Episode", "DatasetMeta", "Dataset", "generate_episode", "build_dataset",
    "preprocess", "image", "target_vector", "from_target_vector", "write_dataset",
    "read_dataset", "calibrate_signal_power", "sample_initial_state", "split_indices",
]
