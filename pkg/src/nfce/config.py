"""Configuration dataclasses.

``SystemConfig`` defaults reproduce the simulated operating point
(N=16, f=3.5 GHz, lambda=0.0857 m, Q=8, 5 m/s, L=3, learning rate 1e-3).
Every value the source material leaves open (slot interval, sampling
ranges, network widths, epochs, batch size) is an artifact choice and is
marked as such in README.md.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from typing import Any

from .errors import ValidationError

ABLATIONS = ("full", "cnn", "racnn", "cnn_lstm", "no_position")


@dataclass(frozen=True)
class SystemConfig:
    n_antennas: int = 16
    frequency: float = 3.5e9
    wavelength: float = 0.0857
    spacing: float | None = None          # None -> half wavelength
    pilot_length: int = 8
    pilot_energy: float | None = None     # None -> Q (unit power per pilot symbol)
    v_uav: float = 5.0
    v_ue: float = 5.0
    n_paths: int = 3
    slot_interval: float = 5e-4
    slots_per_episode: int = 8
    # float -> fixed SNR; [lo, hi] -> per-episode uniform draw
    snr_db: float | tuple[float, float] = (0.0, 20.0)
    ar_coefficient: float = 0.99
    ue_distance_range: tuple[float, float] = (2.0, 30.0)
    uav_altitude_range: tuple[float, float] = (10.0, 30.0)
    uav_horizontal_extent: float = 20.0
    scatterer_extent: float = 30.0
    scatterer_height: float = 10.0
    calibration_episodes: int = 200
    calibration_seed: int = 0x5EED

    def __post_init__(self):
        for name in ("snr_db", "ue_distance_range", "uav_altitude_range"):
            value = getattr(self, name)
            if isinstance(value, list):
                object.__setattr__(self, name, tuple(float(v) for v in value))

    @property
    def element_spacing(self) -> float:
        return self.wavelength / 2 if self.spacing is None else self.spacing

    @property
    def energy(self) -> float:
        return float(self.pilot_length) if self.pilot_energy is None else self.pilot_energy

    @property
    def half_aperture(self) -> float:
        return self.n_antennas / 2 * self.element_spacing

    def validate(self) -> "SystemConfig":
        checks = [
            (self.n_antennas >= 2, "n_antennas must be >= 2"),
            (self.pilot_length >= 1, "pilot_length must be >= 1"),
            (self.n_paths >= 1, "n_paths must be >= 1"),
            (self.frequency > 0 and self.wavelength > 0, "frequency and wavelength must be positive"),
            (self.element_spacing > 0, "spacing must be positive"),
            (self.energy > 0, "pilot_energy must be positive"),
            (self.v_uav >= 0 and self.v_ue >= 0, "speeds must be non-negative"),
            (self.slot_interval > 0, "slot_interval must be positive"),
            (self.slots_per_episode >= 1, "slots_per_episode must be >= 1"),
            (0.0 <= self.ar_coefficient <= 1.0, "ar_coefficient must lie in [0, 1]"),
            (self.ue_distance_range[0] > self.half_aperture,
             "ue_distance_range lower bound must exceed the array half-aperture"),
            (self.ue_distance_range[0] <= self.ue_distance_range[1], "ue_distance_range must be ordered"),
            (0 <= self.uav_altitude_range[0] <= self.uav_altitude_range[1], "uav_altitude_range invalid"),
            (self.calibration_episodes >= 1, "calibration_episodes must be >= 1"),
        ]
        if isinstance(self.snr_db, tuple):
            checks.append((len(self.snr_db) == 2 and self.snr_db[0] <= self.snr_db[1],
                           "snr_db range must be [lo, hi] with lo <= hi"))
        for ok, message in checks:
            if not ok:
                raise ValidationError(f"system.{message}")
        return self


@dataclass(frozen=True)
class ModelConfig:
    n_antennas: int = 16
    pilot_length: int = 8
    conv_channels: int = 64
    conv_layers: int = 3
    kernel_size: int = 3
    n_heads: int = 4
    hidden_size: int = 128
    position_width: int = 32
    history: int = 6
    dense_hidden: tuple[int, ...] = (256,)
    ablation: str = "full"

    def __post_init__(self):
        if isinstance(self.dense_hidden, list):
            object.__setattr__(self, "dense_hidden", tuple(self.dense_hidden))

    @property
    def output_dim(self) -> int:
        return 2 * self.n_antennas * self.pilot_length

    @property
    def token_width(self) -> int:
        return self.conv_channels * self.n_antennas

    def validate(self) -> "ModelConfig":
        checks = [
            (self.ablation in ABLATIONS, f"ablation must be one of {ABLATIONS}"),
            (self.kernel_size % 2 == 1, "kernel_size must be odd"),
            (self.conv_layers >= 1 and self.conv_channels >= 1, "conv stack must be non-empty"),
            (self.token_width % self.n_heads == 0, "conv_channels * n_antennas must divide by n_heads"),
            (self.history >= 1, "history must be >= 1"),
            (self.hidden_size >= 1, "hidden_size must be >= 1"),
            (self.position_width >= 0, "position_width must be >= 0"),
            (all(h >= 1 for h in self.dense_hidden), "dense_hidden widths must be >= 1"),
        ]
        for ok, message in checks:
            if not ok:
                raise ValidationError(f"model.{message}")
        return self

    def for_system(self, system: SystemConfig) -> "ModelConfig":
        return dataclasses.replace(self, n_antennas=system.n_antennas, pilot_length=system.pilot_length)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    checkpoint_every: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ValidationError("train.epochs must be >= 1")
        if self.batch_size < 2:
            raise ValidationError("train.batch_size must be >= 2 (batch normalization)")
        if self.learning_rate <= 0:
            raise ValidationError("train.learning_rate must be positive")
        if self.checkpoint_every < 1:
            raise ValidationError("train.checkpoint_every must be >= 1")
        return self


def to_dict(cfg) -> dict[str, Any]:
    out = {}
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        out[f.name] = list(value) if isinstance(value, tuple) else value
    return out


def from_dict(cls, data: dict[str, Any], section: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValidationError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ValidationError(f"[{section}]: {exc}") from exc


def config_hash(*cfgs) -> str:
    blob = json.dumps([to_dict(c) for c in cfgs], sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


__all__ = [
    "ABLATIONS", "SystemConfig", "ModelConfig", "TrainConfig",
    "to_dict", "from_dict", "config_hash",
]
