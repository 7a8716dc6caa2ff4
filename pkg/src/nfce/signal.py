"""Pilots, SNR bookkeeping and the noisy received pilot block (identity combining)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError


@dataclass(frozen=True)
class PilotBlock:
    symbols: np.ndarray     # (Q,) complex, one scalar pilot per slot use
    energy: float

    @property
    def S(self) -> np.ndarray:
        """Diagonal Q x Q pilot matrix, so Y = H S + N column by column."""
        return np.diag(self.symbols)

    @property
    def length(self) -> int:
        return self.symbols.size


@dataclass(frozen=True)
class ReceivedBlock:
    Y: np.ndarray
    noise_variance: float
    snr_db: float | None = None


def make_pilots(pilot_length: int, energy: float) -> PilotBlock:
    """Unit-modulus DFT phases exp(-j 2 pi q / Q), scaled so that tr(S S^H) = E_s."""
    if pilot_length < 1 or energy <= 0:
        raise ContractError("need pilot_length >= 1 and energy > 0")
    q = np.arange(pilot_length)
    symbols = np.sqrt(energy / pilot_length) * np.exp(-2j * np.pi * q / pilot_length)
    return PilotBlock(symbols, float(energy))


def snr_to_sigma(snr_db: float, signal_power: float) -> float:
    if signal_power <= 0:
        raise ContractError("signal_power must be positive")
    return signal_power * 10.0 ** (-snr_db / 10.0)


def noise(rng: np.random.Generator, shape, variance: float) -> np.ndarray:
    """Circularly-symmetric complex Gaussian samples with the given variance."""
    re, im = rng.standard_normal((2, *shape))
    return np.sqrt(variance / 2.0) * (re + 1j * im)


def receive_block(H: np.ndarray, pilots: PilotBlock, noise_variance: float,
                  rng: np.random.Generator, snr_db: float | None = None) -> ReceivedBlock:
    H = getattr(H, "H", H)
    if noise_variance < 0:
        raise ContractError("noise variance must be non-negative")
    if H.ndim != 2 or H.shape[1] != pilots.length:
        raise ContractError(f"channel shape {H.shape} does not match {pilots.length} pilots")
    Y = H * pilots.symbols[None, :] + noise(rng, H.shape, noise_variance)
    return ReceivedBlock(Y, float(noise_variance), snr_db)
