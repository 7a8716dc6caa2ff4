"""Run the NMSE/BER sweeps behind the evaluation figures and write one CSV per axis.

    python scripts/figure_sweeps.py --config configs/desk.json --out results/ snr_db speed

Axes that change the data shape (pilot length, antennas, paths, history) retrain a model
per value and are expensive at desk scale; SNR and speed share one model.
"""
import argparse
import dataclasses
import logging
import os

from nfce import cli
from nfce.evaluator import SweepSpec, sweep

VALUES = {
    "snr_db": [0, 5, 10, 15, 20],
    "speed": [5, 10, 20, 30],
    "pilot_length": [2, 4, 8],
    "antennas": [8, 16, 32],
    "paths": [2, 4, 6, 8],
    "history": [2, 4, 6],
}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("axes", nargs="*", default=["snr_db", "speed"], choices=sorted(VALUES))
    ap.add_argument("--config", default="configs/desk.json")
    ap.add_argument("--out", default="results")
    ap.add_argument("--episodes", type=int, default=1000, help="evaluation episodes per value")
    ap.add_argument("--ber-symbols", type=int, default=100_000)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = cli.load_run_config(args.config)
    os.makedirs(args.out, exist_ok=True)
    shared = None
    for axis in args.axes:
        estimators = ["ls", "lmmse", "full", "cnn"]
        spec = SweepSpec(axis, VALUES[axis], cfg.system, cfg.model, cfg.train, estimators,
                         args.episodes, seed=cfg.dataset.seed, ber_symbols=args.ber_symbols)
        if axis in ("snr_db", "speed") and shared is None:
            from nfce.dataset import build_dataset
            from nfce.evaluator import TrainedModel
            from nfce.trainer import train
            ds = build_dataset(cfg.system, cfg.dataset.episodes, cfg.dataset.seed)
            shared = {name: TrainedModel(train(ds, dataclasses.replace(cfg.model, ablation=name),
                                               cfg.train)[0], ds.meta)
                      for name in ("full", "cnn")}
        table = sweep(spec, models=shared if axis in ("snr_db", "speed") else None)
        path = os.path.join(args.out, f"sweep_{axis}.csv")
        table.to_csv(path)
        print(table.to_text())
        print(f"wrote {path}")


if __name__ == "__main__":
    main()
