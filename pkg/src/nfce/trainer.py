"""Supervised training loop: sliding windows, MSE loss, Adam, best-validation checkpoint."""
from __future__ import annotations

import copy
import csv
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .config import ModelConfig, TrainConfig
from .dataset import Dataset, image, target_vector
from .errors import ContractError, NumericError, PersistenceError, ValidationError
from .model import ChannelEstimator, write_checkpoint

log = logging.getLogger(__name__)


def mse_loss(pred, target) -> nx.Tensor:
    """Squared Frobenius error on the real 2NQ representation, averaged over the batch."""
    pshape = pred.shape
    tshape = np.shape(nx._data(target))
    if pshape != tshape:
        raise ContractError(f"prediction shape {pshape} != target shape {tshape}")
    d = nx.sub(pred, target)
    batch = pshape[0] if len(pshape) > 1 else 1
    return nx.sum(d * d) * (1.0 / batch)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    best_epoch: int = -1

    def __len__(self):
        return len(self.train_loss)

    def write_csv(self, path) -> None:
        try:
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["epoch", "train_loss", "val_loss", "seconds"])
                for i, row in enumerate(zip(self.train_loss, self.val_loss, self.seconds), start=1):
                    w.writerow([i, repr(row[0]), repr(row[1]), f"{row[2]:.3f}"])
        except OSError as exc:
            raise PersistenceError(f"cannot write loss history ({exc.strerror})", path) from exc


class WindowData:
    """Preprocessed inputs/targets for stride-1 sliding windows ending at each eligible slot."""

    def __init__(self, ds: Dataset, history: int):
        if ds.slots_per_episode < history:
            raise ValidationError(
                f"episodes have {ds.slots_per_episode} slots, fewer than history {history}")
        self.history = history
        self.images = image(ds.Y, ds.meta)
        self.targets = target_vector(ds.H)
        self.positions = ds.positions

    @staticmethod
    def window_index(slots_per_episode: int, history: int, episodes) -> np.ndarray:
        """(episode, end slot) pairs for every stride-1 window, episode-major."""
        ends = np.arange(history - 1, slots_per_episode)
        eps = np.asarray(episodes, dtype=int)
        return np.stack(np.meshgrid(eps, ends, indexing="ij"), axis=-1).reshape(-1, 2)

    def windows(self, episodes) -> np.ndarray:
        return self.window_index(self.images.shape[1], self.history, episodes)

    def batch(self, idx: np.ndarray):
        e, t = idx[:, 0], idx[:, 1]
        steps = t[:, None] + np.arange(-self.history + 1, 1)[None, :]
        return (self.images[e[:, None], steps], self.positions[e, t], self.targets[e, t])


def evaluate_loss(est: ChannelEstimator, data: WindowData, windows: np.ndarray,
                  batch_size: int = 256) -> float:
    """Mean per-window loss with batch norm in eval mode and no parameter updates."""
    total = 0.0
    for start in range(0, len(windows), batch_size):
        x, r, y = data.batch(windows[start:start + batch_size])
        out = est.forward(x, r, train=False)
        total += float(np.sum((out.data - y) ** 2))
    return total / len(windows)


def train(ds: Dataset, model_cfg: ModelConfig, train_cfg: TrainConfig, out_dir=None,
          estimator: ChannelEstimator | None = None) -> tuple[ChannelEstimator, TrainHistory]:
    """Train on the dataset's train split; returns the best-validation model and the history.

    With ``out_dir`` the best checkpoint (``checkpoint.nfckpt``) and ``loss_history.csv``
    are written there.
    """
    train_cfg.validate()
    model_cfg = model_cfg.for_system(ds.meta.system).validate()
    data = WindowData(ds, model_cfg.history)
    train_w = data.windows(ds.meta.train)
    val_w = data.windows(ds.meta.validation)
    if len(train_w) < 2 or len(val_w) < 1:
        raise ValidationError("dataset needs training windows in both splits")

    est = estimator or ChannelEstimator.create(model_cfg, seed=train_cfg.seed)
    state = nx.AdamState(train_cfg.learning_rate, train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps)
    history = TrainHistory()
    best = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    for epoch in range(1, train_cfg.epochs + 1):
        start = time.perf_counter()
        rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, epoch]))
        order = train_w[rng.permutation(len(train_w))]
        losses, counts = [], []
        for b, lo in enumerate(range(0, len(order), train_cfg.batch_size)):
            idx = order[lo:lo + train_cfg.batch_size]
            if len(idx) < 2:   # batch norm needs two samples
                continue
            x, r, y = data.batch(idx)
            tape = nx.Tape()
            loss = mse_loss(est.forward(x, r, train=True, tape=tape), y)
            if not np.isfinite(loss.data).all():
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
            grads = nx.grad(tape, loss)
            est.params, state = nx.adam_step(est.params, grads, state)
            losses.append(float(loss.data))
            counts.append(len(idx))
        train_loss = float(np.average(losses, weights=counts))
        val_loss = evaluate_loss(est, data, val_w)
        history.train_loss.append(train_loss)
        history.val_loss.append(val_loss)
        history.seconds.append(time.perf_counter() - start)
        log.info("epoch %d train %.5g val %.5g (%.1fs)", epoch, train_loss, val_loss, history.seconds[-1])
        if best is None or val_loss < history.val_loss[history.best_epoch - 1]:
            history.best_epoch = epoch
            best = ChannelEstimator(est.config, dict(est.params), copy.deepcopy(est.bn))
            if out_dir is not None and epoch % train_cfg.checkpoint_every == 0:
                write_checkpoint(os.path.join(out_dir, "checkpoint.nfckpt"), best)

    if out_dir is not None:
        write_checkpoint(os.path.join(out_dir, "checkpoint.nfckpt"), best)
        history.write_csv(os.path.join(out_dir, "loss_history.csv"))
    return best, history
