"""Command-line entry point: ``nfce {generate,train,eval,sweep,gradcheck,flops}``.

Exit codes: 0 success, 1 invalid input or configuration, 2 numeric failure, 3 I/O error.
Logging verbosity comes from ``NFCE_LOG`` (error, warn, info, debug; default warn).
"""
from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field

from .config import ModelConfig, SystemConfig, TrainConfig, from_dict, to_dict
from .errors import ContractError, NumericError, PersistenceError, ValidationError

log = logging.getLogger("nfce")

SCHEMA_VERSION = 1
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO,
              "debug": logging.DEBUG}
DATASET_FILE = "dataset.nfce"
CHECKPOINT_FILE = "checkpoint.nfckpt"


@dataclass(frozen=True)
class DatasetSection:
    episodes: int = 5000
    seed: int = 0


@dataclass
class RunConfig:
    system: SystemConfig = field(default_factory=SystemConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    sweep: dict | None = None
    schema_version: int = SCHEMA_VERSION

    def validate(self) -> "RunConfig":
        self.system.validate()
        self.model.for_system(self.system).validate()
        self.train.validate()
        if self.dataset.episodes < 5:
            raise ValidationError("dataset.episodes must be >= 5")
        if self.sweep is not None:
            self.sweep_spec().validate()
        return self

    def sweep_spec(self):
        from .evaluator import SweepSpec
        if self.sweep is None:
            raise ValidationError("config has no [sweep] section")
        reserved = {"base", "model", "train"} & set(self.sweep)
        if reserved:
            raise ValidationError(f"[sweep] may not set {sorted(reserved)}; use the top-level sections")
        spec = from_dict(SweepSpec, self.sweep, "sweep")
        return dataclasses.replace(spec, base=self.system, model=self.model, train=self.train)

    def to_json(self) -> dict:
        doc = {"schema_version": self.schema_version, "system": to_dict(self.system),
               "model": to_dict(self.model), "train": to_dict(self.train),
               "dataset": to_dict(self.dataset)}
        if self.sweep is not None:
            doc["sweep"] = self.sweep
        return doc


def parse_run_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ValidationError("config must be a JSON object")
    known = {"schema_version", "system", "model", "train", "dataset", "sweep"}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ValidationError(f"unknown top-level key(s): {', '.join(unknown)}")
    version = doc.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ValidationError(f"schema_version {version} is not supported (expected {SCHEMA_VERSION})")
    return RunConfig(
        system=from_dict(SystemConfig, doc.get("system", {}), "system"),
        model=from_dict(ModelConfig, doc.get("model", {}), "model"),
        train=from_dict(TrainConfig, doc.get("train", {}), "train"),
        dataset=from_dict(DatasetSection, doc.get("dataset", {}), "dataset"),
        sweep=doc.get("sweep"),
    ).validate()


def load_run_config(source: str) -> RunConfig:
    """``default`` gives the built-in operating point; anything else is a JSON file path."""
    if source == "default":
        return RunConfig().validate()
    try:
        with open(source, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{source}: invalid JSON ({exc})") from exc
    except OSError as exc:
        raise PersistenceError(f"cannot read config ({exc.strerror})", source) from exc
    try:
        return parse_run_config(doc)
    except ValidationError as exc:
        raise ValidationError(f"{source}: {exc}") from exc


# ------------------------------------------------------------------ commands


def _out_dir(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


def cmd_generate(args, cfg: RunConfig) -> int:
    from .dataset import build_dataset
    seed = cfg.dataset.seed if args.seed is None else args.seed
    episodes = args.episodes or cfg.dataset.episodes
    path = os.path.join(_out_dir(args), DATASET_FILE)
    ds = build_dataset(cfg.system, episodes, seed, path)
    print(f"wrote {path} ({ds.n_episodes} episodes, {len(ds.meta.train)} train / "
          f"{len(ds.meta.validation)} validation)")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    from .dataset import read_dataset
    from .trainer import train
    train_cfg = cfg.train if args.seed is None else dataclasses.replace(cfg.train, seed=args.seed)
    if args.epochs:
        train_cfg = dataclasses.replace(train_cfg, epochs=args.epochs)
    ds = read_dataset(args.data)
    out = _out_dir(args)
    _, history = train(ds, cfg.model, train_cfg, out_dir=out)
    print(f"best epoch {history.best_epoch}: val loss {history.val_loss[history.best_epoch - 1]:.6g}")
    print(f"wrote {os.path.join(out, CHECKPOINT_FILE)} and {os.path.join(out, 'loss_history.csv')}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    import numpy as np

    from .dataset import read_dataset
    from .evaluator import (ResultRow, ResultTable, TrainedModel, ber_curve, estimate_all,
                            per_slot_nmse, to_db, Z95)
    from .model import read_checkpoint
    ds = read_dataset(args.data)
    est = read_checkpoint(args.checkpoint)
    name = est.config.ablation
    H, estimates, _ = estimate_all(ds, ["ls", "lmmse", name], {name: TrainedModel(est, ds.meta)},
                                   est.config.history)
    snr = ds.meta.system.snr_db
    table = ResultTable(metadata={"data": os.path.abspath(args.data),
                                  "checkpoint": os.path.abspath(args.checkpoint),
                                  "master_seed": ds.meta.master_seed, "snr_db": snr})
    bers = {}
    if args.ber_symbols:
        if isinstance(snr, tuple):
            raise ValidationError("BER needs a dataset generated at a fixed system.snr_db")
        rng = np.random.default_rng(ds.meta.master_seed)
        points = ber_curve(lambda _s: (H, estimates), [snr], args.ber_symbols, rng, ds.meta.signal_power)
        bers = {p.estimator: p.ber for p in points}
    value = float(snr) if not isinstance(snr, tuple) else float("nan")
    for key, H_hat in estimates.items():
        per = per_slot_nmse(H_hat, H)
        m = float(np.mean(per))
        ci = float(Z95 * np.std(per, ddof=1) / np.sqrt(per.size)) if per.size > 1 else 0.0
        table.rows.append(ResultRow("snr_db", value, key, m, to_db(m), bers.get(key), ci))
    path = os.path.join(_out_dir(args), "results.csv")
    table.to_csv(path)
    print(table.to_text())
    print(f"wrote {path}")
    return 0


def cmd_sweep(args, cfg: RunConfig) -> int:
    from .evaluator import sweep
    spec = cfg.sweep_spec()
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    spec.validate()
    table = sweep(spec)
    path = os.path.join(_out_dir(args), f"sweep_{spec.axis}.csv")
    table.to_csv(path)
    print(table.to_text())
    print(f"wrote {path}")
    return 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    from .gradcheck import TOLERANCE, run_all
    results = run_all(0 if args.seed is None else args.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:<22} max rel. error {r.max_rel_error:.3e}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise NumericError(f"gradient check above {TOLERANCE:g}: {', '.join(failed)}")
    return 0


def cmd_flops(args, cfg: RunConfig) -> int:
    from .model import estimate_flops
    model = cfg.model.for_system(cfg.system)
    counts = estimate_flops(model, args.batch, model.n_antennas, model.pilot_length)
    counts["total"] = sum(counts.values())
    print(json.dumps(counts, indent=2))
    return 0


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep,
            "gradcheck": cmd_gradcheck, "flops": cmd_flops}


class _UsageError(Exception):
    def __init__(self, message: str, usage: str):
        super().__init__(message)
        self.usage = usage


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message, self.format_usage())


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", default="default", help="JSON run config or 'default'")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--threads", type=int, default=None, help="cap BLAS threads")
    common.add_argument("--deterministic", action="store_true", help="single-threaded numerics")

    parser = _Parser(prog="nfce", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = sub.add_parser("generate", parents=[common], help="simulate episodes into a dataset file")
    p.add_argument("--episodes", type=int, default=None)
    p = sub.add_parser("train", parents=[common], help="train a model on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p = sub.add_parser("eval", parents=[common], help="NMSE/BER of a checkpoint and the baselines")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ber-symbols", type=int, default=None)
    sub.add_parser("sweep", parents=[common], help="run the config's [sweep] section")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every layer")
    p = sub.add_parser("flops", parents=[common], help="closed-form multiply counts")
    p.add_argument("--batch", type=int, default=1)
    return parser


def _thread_limit(args):
    limit = 1 if args.deterministic else args.threads
    if limit is None:
        return contextlib.nullcontext()
    if limit < 1:
        raise ValidationError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=limit)


def run(argv=None) -> int:
    level = os.environ.get("NFCE_LOG", "warn").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        sys.stderr.write(exc.usage)
        sys.stderr.write(f"error: {exc}\n")
        return 1
    try:
        cfg = load_run_config(args.config)
        with _thread_limit(args):
            return COMMANDS[args.command](args, cfg)
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
