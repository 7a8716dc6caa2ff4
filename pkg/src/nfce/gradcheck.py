"""Finite-difference checks of every layer's backward pass, used by tests and the CLI."""
from __future__ import annotations

import contextlib
import copy
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import model as m
from . import numerics as nx
from .config import ABLATIONS, ModelConfig
from .trainer import mse_loss

TOLERANCE = 1e-4
STEP = 1e-5
KINK_MARGIN = 1e-3


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def check_function(fn: Callable[[dict], nx.Tensor], arrays: dict[str, np.ndarray],
                   rng: np.random.Generator, h: float = STEP) -> float:
    """Worst relative error between tape and central-difference gradients of
    ``sum(fn(arrays) * P)`` for a random projection P, over every entry of ``arrays``."""
    tape = nx.Tape()
    out = fn({k: tape.param(k, v) for k, v in arrays.items()})
    proj = rng.standard_normal(out.shape)
    grads = nx.grad(tape, nx.sum(out * proj))
    worst = 0.0
    for key, value in arrays.items():
        def objective(x, key=key):
            trial = dict(arrays)
            trial[key] = x
            return float(np.sum(fn({k: nx.Tensor(v) for k, v in trial.items()}).data * proj))
        numeric = nx.finite_diff_grad(objective, value, h)
        worst = max(worst, nx.max_rel_error(grads[key], numeric))
    return worst


def tiny_model_config(ablation: str = "full") -> ModelConfig:
    return ModelConfig(n_antennas=4, pilot_length=2, conv_channels=2, conv_layers=2, n_heads=2,
                       hidden_size=2, position_width=2, history=2, dense_hidden=(4,),
                       ablation=ablation)


@contextlib.contextmanager
def _relu_inputs():
    """Collect the smallest |input| of every ReLU evaluated inside the block."""
    seen, original = [], nx.relu

    def probe(a):
        seen.append(float(np.min(np.abs(getattr(a, "data", a)))))
        return original(a)
    nx.relu = probe
    try:
        yield seen
    finally:
        nx.relu = original


def _model_case(ablation: str, rng):
    cfg = tiny_model_config(ablation)
    params, bn = m.init_params(cfg, int(rng.integers(2**31)))
    # perturb so biases and norm affine terms are not at their symmetric init
    params = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in params.items()}
    # a ReLU input within reach of the finite-difference step makes the central
    # difference straddle the kink, so redraw inputs until every one is clear of it
    while True:
        images = rng.standard_normal((3, cfg.history, 2, cfg.n_antennas, cfg.pilot_length))
        positions = rng.standard_normal((3, 6)) * 5.0
        with _relu_inputs() as seen:
            m.model_forward(cfg, params, copy.deepcopy(bn), images, positions, train=True)
        if min(seen, default=1.0) > KINK_MARGIN:
            break

    # input gradients are covered by the per-layer cases; here every parameter is checked
    def fn(a):
        return m.model_forward(cfg, a, copy.deepcopy(bn), images, positions, train=True)
    return fn, params


def layer_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, dict]]:
    n = rng.standard_normal
    dh = 3
    lstm = lambda d: {"W": n((d, 4 * dh)), "U": n((dh, 4 * dh)), "b": n(4 * dh)}
    stats = lambda c: {"mean": n(c), "var": rng.uniform(0.5, 2.0, c)}
    cases = {
        "conv2d": (lambda a: m.conv2d_forward(a["x"], a["w"], a["b"]),
                   {"x": n((2, 4, 3, 2)), "w": n((3, 3, 2, 3)), "b": n(3)}),
        "batchnorm_train": (lambda a: m.batchnorm_forward(a["x"], a["g"], a["b"], stats(3), True),
                            {"x": n((4, 3, 2, 3)), "g": n(3), "b": n(3)}),
        "batchnorm_eval": (lambda a, s=stats(3): m.batchnorm_forward(a["x"], a["g"], a["b"], s, False),
                           {"x": n((4, 3, 2, 3)), "g": n(3), "b": n(3)}),
        "layernorm": (lambda a: m.layernorm(a["x"], a["g"], a["b"]),
                      {"x": n((3, 5)), "g": n(5), "b": n(5)}),
        "mhsa": (lambda a: m.mhsa_forward(a["x"], a["q"], a["k"], a["v"], a["o"], 2),
                 {"x": n((2, 3, 4)), "q": n((4, 4)), "k": n((4, 4)), "v": n((4, 4)), "o": n((4, 4))}),
        "residual_layernorm": (lambda a: m.residual_layernorm(a["x"], a["s"], a["g"], a["b"]),
                               {"x": n((2, 3, 4)), "s": n((2, 3, 4)), "g": n(4), "b": n(4)}),
        "lstm_cell": (lambda a: nx.concat(m.lstm_cell_step(a["x"], a["h"], a["c"], a), axis=-1),
                      {"x": n((2, 4)), "h": n((2, dh)), "c": n((2, dh)), **lstm(4)}),
        "bilstm": (lambda a: m.bilstm_forward(
                       a["xs"], {k: a["f" + k] for k in "WUb"}, {k: a["r" + k] for k in "WUb"}),
                   {"xs": n((2, 3, 4)), **{"f" + k: v for k, v in lstm(4).items()},
                    **{"r" + k: v for k, v in lstm(4).items()}}),
        "position_embed": (lambda a: m.position_embed(a["r"], a),
                           {"r": 5.0 * n((3, 6)), "pos.ln_gamma": n(6), "pos.ln_beta": n(6),
                            "pos.w": n((6, 4)), "pos.b": n(4)}),
        "fuse_and_regress": (lambda a: m.fuse_and_regress(a["h"], a["R"], a, 2),
                             {"h": n((3, 5)), "R": n((3, 4)), "head0.w": n((5, 6)),
                              "head0.w_pos": n((4, 6)), "head0.b": n(6), "head1.w": n((6, 2)),
                              "head1.b": n(2)}),
        "mse_loss": (lambda a: mse_loss(a["p"], a["t"]), {"p": n((3, 8)), "t": n((3, 8))}),
    }
    for ablation in ABLATIONS:
        cases[f"model[{ablation}]"] = _model_case(ablation, rng)
    return cases


def run_all(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    return [CheckResult(name, check_function(fn, arrays, rng))
            for name, (fn, arrays) in layer_cases(rng).items()]
