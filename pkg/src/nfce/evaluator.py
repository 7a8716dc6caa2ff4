"""NMSE and BER metrics plus the experiment sweeps over system and model axes."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .baselines import CovarianceEstimate, lmmse_estimate, ls_estimate
from .config import ABLATIONS, ModelConfig, SystemConfig, TrainConfig, config_hash, to_dict
from .dataset import Dataset, DatasetMeta, build_dataset, image
from .errors import ContractError, PersistenceError, ValidationError
from .model import ChannelEstimator
from .signal import make_pilots, noise, snr_to_sigma
from .trainer import WindowData, train

log = logging.getLogger(__name__)

AXES = ("snr_db", "pilot_length", "antennas", "speed", "history", "paths")
RETRAIN_AXES = frozenset({"pilot_length", "antennas", "history", "paths"})
BASELINES = ("ls", "lmmse")
PERFECT = "perfect"
Z95 = 1.959963984540054


def per_slot_nmse(H_hat, H) -> np.ndarray:
    H_hat, H = np.asarray(H_hat), np.asarray(H)
    if H_hat.shape != H.shape:
        raise ContractError(f"estimate shape {H_hat.shape} != channel shape {H.shape}")
    H2 = H.reshape(-1, *H.shape[-2:]) if H.ndim >= 2 else H.reshape(1, 1, -1)
    E2 = H_hat.reshape(H2.shape)
    power = np.sum(np.abs(H2) ** 2, axis=(-2, -1))
    if np.any(power == 0):
        raise ContractError("NMSE undefined for an all-zero channel")
    return np.sum(np.abs(E2 - H2) ** 2, axis=(-2, -1)) / power


def nmse(H_hat, H) -> float:
    """Per-slot normalized error, macro-averaged over slots (leading axes)."""
    return float(np.mean(per_slot_nmse(H_hat, H)))


def to_db(value: float) -> float:
    return float(10.0 * np.log10(value)) if value > 0 else float("-inf")


# QPSK, Gray mapped: bit 0 on I, bit 1 on Q, 0 -> +1.
def qpsk_modulate(bits: np.ndarray) -> np.ndarray:
    b = np.asarray(bits, dtype=np.int64).reshape(*np.shape(bits)[:-1], 2)
    return ((1 - 2 * b[..., 0]) + 1j * (1 - 2 * b[..., 1])) / np.sqrt(2.0)


def qpsk_demodulate(z: np.ndarray) -> np.ndarray:
    return np.stack([z.real < 0, z.imag < 0], axis=-1).astype(np.uint8)


@dataclass(frozen=True)
class BerPoint:
    snr_db: float
    estimator: str
    ber: float
    ci_half_width: float
    bits: int


def ber_point(h: np.ndarray, h_hat: np.ndarray, noise_variance: float, n_symbols: int,
              rng: np.random.Generator) -> tuple[float, float, int]:
    """QPSK over each true column h (M, N) with AWGN, MRC-detected with h_hat."""
    h, h_hat = np.atleast_2d(h), np.atleast_2d(h_hat)
    per = -(-n_symbols // h.shape[0])
    bits = rng.integers(0, 2, size=(h.shape[0], per, 2), dtype=np.uint8)
    x = qpsk_modulate(bits)
    y = h[:, None, :] * x[..., None] + noise(rng, (h.shape[0], per, h.shape[1]), noise_variance)
    z = np.einsum("mn,mkn->mk", h_hat.conj(), y)
    errors = int(np.count_nonzero(qpsk_demodulate(z) != bits))
    total = bits.size
    p = errors / total
    return p, Z95 * np.sqrt(max(p * (1 - p), 1.0 / total) / total), total


def ber_curve(source, snr_list, symbols_per_point: int, rng: np.random.Generator,
              signal_power: float) -> list[BerPoint]:
    """BER against SNR for every estimator ``source(snr)`` returns, plus perfect CSI.

    ``source(snr_db)`` yields ``(H, {name: H_hat})`` with arrays shaped (M, N, Q); only the
    first column carries data. All estimators at one SNR share the same bits and noise.
    """
    if symbols_per_point < 10_000:
        raise ContractError("need at least 1e4 symbols per BER point")
    points = []
    for snr in snr_list:
        H, estimates = source(snr)
        h = np.asarray(H)[..., 0]
        sigma2 = snr_to_sigma(snr, signal_power)
        seed = int(rng.integers(2**63))
        for name, H_hat in [(PERFECT, H), *estimates.items()]:
            p, ci, n = ber_point(h, np.asarray(H_hat)[..., 0], sigma2, symbols_per_point,
                                 np.random.default_rng(seed))
            points.append(BerPoint(float(snr), name, p, ci, n))
    return points


@dataclass
class ResultRow:
    axis: str
    value: float
    estimator: str
    nmse: float
    nmse_db: float
    ber: float | None = None
    ci_half_width: float = 0.0


@dataclass
class ResultTable:
    rows: list[ResultRow] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    COLUMNS = ("axis", "value", "estimator", "nmse", "nmse_db", "ber", "ci_half_width")

    def get(self, value, estimator) -> ResultRow:
        for row in self.rows:
            if row.value == value and row.estimator == estimator:
                return row
        raise KeyError((value, estimator))

    def series(self, estimator: str) -> list[ResultRow]:
        return sorted((r for r in self.rows if r.estimator == estimator), key=lambda r: r.value)

    def to_csv(self, path) -> None:
        try:
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(self.COLUMNS)
                for r in self.rows:
                    w.writerow([r.axis, repr(r.value), r.estimator, repr(r.nmse), repr(r.nmse_db),
                                "" if r.ber is None else repr(r.ber), repr(r.ci_half_width)])
            with open(f"{path}.meta.json", "w") as fh:
                json.dump(self.metadata, fh, indent=2, sort_keys=True)
        except OSError as exc:
            raise PersistenceError(f"cannot write results ({exc.strerror})", path) from exc

    @classmethod
    def from_csv(cls, path) -> "ResultTable":
        try:
            with open(path, newline="") as fh:
                rows = [ResultRow(d["axis"], float(d["value"]), d["estimator"], float(d["nmse"]),
                                  float(d["nmse_db"]), float(d["ber"]) if d["ber"] else None,
                                  float(d["ci_half_width"])) for d in csv.DictReader(fh)]
            try:
                with open(f"{path}.meta.json") as fh:
                    meta = json.load(fh)
            except FileNotFoundError:
                meta = {}
        except OSError as exc:
            raise PersistenceError(f"cannot read results ({exc.strerror})", path) from exc
        return cls(rows, meta)

    def to_text(self) -> str:
        lines = [f"{'axis':<12} {'value':>8} {'estimator':<12} {'nmse_db':>9} {'ber':>10}"]
        for r in self.rows:
            ber = "" if r.ber is None else f"{r.ber:.3e}"
            lines.append(f"{r.axis:<12} {r.value:>8g} {r.estimator:<12} {r.nmse_db:>9.3f} {ber:>10}")
        return "\n".join(lines)


# --- evaluation on a dataset -------------------------------------------------


@dataclass
class TrainedModel:
    """A model together with the input normalization of the data it was trained on."""
    estimator: ChannelEstimator
    meta: DatasetMeta


def estimate_all(ds: Dataset, estimators, models: dict[str, TrainedModel], history: int,
                 episodes=None, cov: CovarianceEstimate | None = None):
    """Estimates for every window end slot of ``episodes`` (default: validation split).

    Returns ``(H, {name: H_hat}, window_index)``.
    """
    episodes = ds.meta.validation if episodes is None else episodes
    windows = WindowData.window_index(ds.slots_per_episode, history, episodes)
    e, t = windows[:, 0], windows[:, 1]
    H = ds.H[e, t]
    Y = ds.Y[e, t]
    pilots = make_pilots(ds.meta.system.pilot_length, ds.meta.system.energy)
    out = {}
    for name in estimators:
        if name == "ls":
            out[name] = ls_estimate(Y, pilots)
        elif name == "lmmse":
            if cov is None:
                cov = CovarianceEstimate.from_channels(ds.H[ds.meta.train])
            est = np.empty_like(H)
            sig = np.array([ds.noise_variance(i) for i in e])
            for s in np.unique(sig):
                m = sig == s
                est[m] = lmmse_estimate(Y[m], pilots, cov, float(s))
            out[name] = est
        else:
            tm = models[name]
            steps = t[:, None] + np.arange(-history + 1, 1)[None, :]
            x = image(ds.Y[e[:, None], steps], tm.meta)
            out[name] = tm.estimator.predict(x, ds.positions[e, t])
    return H, out, windows


@dataclass
class SweepSpec:
    axis: str
    values: list
    base: SystemConfig = field(default_factory=SystemConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    estimators: list = field(default_factory=lambda: ["ls", "lmmse", "full"])
    episodes: int = 500
    seed: int = 0
    eval_snr_db: float = 10.0
    ber_symbols: int | None = None

    def validate(self) -> "SweepSpec":
        if self.axis not in AXES:
            raise ValidationError(f"sweep.axis must be one of {AXES}, got {self.axis!r}")
        if not self.values:
            raise ValidationError("sweep.values must be nonempty")
        if list(self.values) != sorted(self.values):
            raise ValidationError("sweep.values must be sorted")
        if not self.estimators:
            raise ValidationError("sweep.estimators must be nonempty")
        for name in self.estimators:
            if name not in BASELINES and name not in ABLATIONS:
                raise ValidationError(f"unknown estimator {name!r}")
        if self.episodes < 5:
            raise ValidationError("sweep.episodes must be >= 5")
        if self.ber_symbols is not None and self.ber_symbols < 10_000:
            raise ValidationError("sweep.ber_symbols must be >= 10000")
        self.base.validate()
        self.train.validate()
        for v in self.values:
            system, model = self.configs(v)
            system.validate()
            model.validate()
            if model.history > system.slots_per_episode:
                raise ValidationError(
                    f"history {model.history} exceeds slots_per_episode {system.slots_per_episode}")
        return self

    def configs(self, value) -> tuple[SystemConfig, ModelConfig]:
        """Training-time system and model configuration for one axis value."""
        system, model = self.base, self.model
        if self.axis == "pilot_length":
            system = dataclasses.replace(system, pilot_length=int(value), pilot_energy=None)
        elif self.axis == "antennas":
            system = dataclasses.replace(system, n_antennas=int(value))
        elif self.axis == "paths":
            system = dataclasses.replace(system, n_paths=int(value))
        elif self.axis == "history":
            model = dataclasses.replace(model, history=int(value))
        return system, model.for_system(system)

    def eval_system(self, value) -> SystemConfig:
        system, _ = self.configs(value)
        if self.axis == "snr_db":
            return dataclasses.replace(system, snr_db=float(value))
        system = dataclasses.replace(system, snr_db=float(self.eval_snr_db))
        if self.axis == "speed":
            system = dataclasses.replace(system, v_ue=float(value))
        return system


def _train_models(spec: SweepSpec, system: SystemConfig, model: ModelConfig, ds=None):
    names = [n for n in spec.estimators if n in ABLATIONS]
    if not names:
        return {}
    ds = ds if ds is not None else build_dataset(system, spec.episodes, spec.seed)
    out = {}
    for name in names:
        log.info("training %s for %s", name, spec.axis)
        est, _ = train(ds, dataclasses.replace(model, ablation=name), spec.train)
        out[name] = TrainedModel(est, ds.meta)
    return out


def sweep(spec: SweepSpec, models: dict[str, TrainedModel] | None = None) -> ResultTable:
    """Evaluate every estimator at every axis value on freshly generated validation episodes.

    Models are retrained per value for antennas, pilot length, paths and history, and
    trained once (or taken from ``models``) for SNR and speed. Episode seeds are shared
    across values, so the comparison is paired.
    """
    spec.validate()
    models = dict(models or {})
    shared = None
    if spec.axis not in RETRAIN_AXES:
        base_system, base_model = spec.configs(spec.values[0])
        missing = [n for n in spec.estimators if n in ABLATIONS and n not in models]
        if missing:
            sub = dataclasses.replace(spec, estimators=missing)
            models.update(_train_models(sub, base_system, base_model))
        shared = models

    table = ResultTable(metadata={
        "axis": spec.axis, "values": list(spec.values), "estimators": list(spec.estimators),
        "seed": spec.seed, "episodes": spec.episodes, "eval_snr_db": spec.eval_snr_db,
        "base": to_dict(spec.base), "model": to_dict(spec.model), "train": to_dict(spec.train),
        "config_hash": config_hash(spec.base, spec.model, spec.train),
    })
    for value in spec.values:
        system, model = spec.configs(value)
        current = shared
        if current is None:
            current = _train_models(spec, system, model)
        eval_ds = build_dataset(spec.eval_system(value), spec.episodes, spec.seed)
        H, est, _ = estimate_all(eval_ds, spec.estimators, current, model.history)
        bers = {}
        if spec.ber_symbols:
            rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xBE5]))
            snr = spec.eval_system(value).snr_db
            points = ber_curve(lambda _snr: (H, est), [snr], spec.ber_symbols, rng,
                               eval_ds.meta.signal_power)
            bers = {p.estimator: p for p in points}
        for name in spec.estimators:
            per = per_slot_nmse(est[name], H)
            m = float(np.mean(per))
            ci = float(Z95 * np.std(per, ddof=1) / np.sqrt(per.size)) if per.size > 1 else 0.0
            ber = bers[name].ber if name in bers else None
            table.rows.append(ResultRow(spec.axis, float(value), name, m, to_db(m), ber, ci))
        if PERFECT in bers:
            p = bers[PERFECT]
            table.rows.append(ResultRow(spec.axis, float(value), PERFECT, 0.0, float("-inf"),
                                        p.ber, p.ci_half_width))
        log.info("%s=%g done", spec.axis, value)
    return table
