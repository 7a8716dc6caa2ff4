"""Train every architecture variant on one desk dataset and compare them at a fixed SNR.

    python scripts/ablations.py --config configs/desk.json --snr 10 --out results/
"""
import argparse
import dataclasses
import logging
import os

from nfce import cli
from nfce.config import ABLATIONS
from nfce.dataset import build_dataset
from nfce.evaluator import ResultRow, ResultTable, TrainedModel, estimate_all, nmse, to_db
from nfce.trainer import train


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/desk.json")
    ap.add_argument("--snr", type=float, default=10.0)
    ap.add_argument("--out", default="results")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = cli.load_run_config(args.config)
    ds = build_dataset(cfg.system, cfg.dataset.episodes, cfg.dataset.seed)
    models = {}
    for name in ABLATIONS:
        est, history = train(ds, dataclasses.replace(cfg.model, ablation=name), cfg.train)
        models[name] = TrainedModel(est, ds.meta)
        os.makedirs(args.out, exist_ok=True)
        history.write_csv(os.path.join(args.out, f"loss_{name}.csv"))

    # same geometry and noise seeds as the validation split, at one fixed SNR
    fixed = build_dataset(dataclasses.replace(cfg.system, snr_db=args.snr), ds.n_episodes,
                          cfg.dataset.seed)
    H, est, _ = estimate_all(fixed, ["ls", "lmmse", *ABLATIONS], models, cfg.model.history)
    table = ResultTable(metadata={"snr_db": args.snr, "config": os.path.abspath(args.config)})
    for name, H_hat in est.items():
        value = nmse(H_hat, H)
        table.rows.append(ResultRow("snr_db", args.snr, name, value, to_db(value)))
    path = os.path.join(args.out, "ablations.csv")
    table.to_csv(path)
    print(table.to_text())
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
