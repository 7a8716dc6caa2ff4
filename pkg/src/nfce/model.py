"""Residual-attention CNN + BiLSTM channel estimator with a position branch.

Layers are plain functions over ``numerics.Tensor`` values so the same
code serves the full estimator, its ablations and the gradient checks.
Feature maps are channels-last: ``(batch, H=N, W=Q, C)``.

Parameter names (``conv0.w``, ``attn.wq``, ``lstm_f.U``, ``head1.b`` ...)
are the keys used by the checkpoint format.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .config import ModelConfig, from_dict, to_dict
from .dataset import from_target_vector
from .errors import ContractError, CorruptionError, FormatError, PersistenceError, UnsupportedVersionError
from .numerics import Tape, Tensor

BN_MOMENTUM = 0.9
BN_EPS = 1e-5
LN_EPS = 1e-5
POSITION_DIM = 6

# ---------------------------------------------------------------- layers


def pad2d(x: Tensor, pad: int) -> Tensor:
    """Zero-pad the two spatial axes of an (M, H, W, C) map."""
    if pad == 0:
        return x
    M, H, W, C = x.shape
    zh = np.zeros((M, pad, W, C))
    x = nx.concat([zh, x, zh], axis=1)
    zw = np.zeros((M, H + 2 * pad, pad, C))
    return nx.concat([zw, x, zw], axis=2)


def conv2d_forward(x: Tensor, w, b) -> Tensor:
    """Stride-1 same-padded cross-correlation plus per-channel bias.

    x: (M, H, W, C_in); w: (r, r, C_in, C_out); b: (C_out,).
    """
    r, r2, c_in, c_out = nx._data(w).shape
    if r != r2 or r % 2 == 0:
        raise ContractError(f"kernel must be square with odd size, got {r}x{r2}")
    if x.ndim != 4 or x.shape[-1] != c_in:
        raise ContractError(f"input {x.shape} does not match kernel with C_in={c_in}")
    M, H, W, _ = x.shape
    xp = pad2d(x, r // 2)
    cols = [xp[:, i:i + H, j:j + W, :] for i in range(r) for j in range(r)]
    patches = cols[0] if len(cols) == 1 else nx.concat(cols, axis=-1)
    out = patches.reshape(M * H * W, r * r * c_in) @ nx.reshape(w, (r * r * c_in, c_out))
    return out.reshape(M, H, W, c_out) + b


def batchnorm_forward(x: Tensor, gamma, beta, stats: dict, train: bool,
                      momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Per-channel (last axis) batch normalization.

    ``stats`` holds ``mean``/``var`` running estimates and is updated in
    train mode as ``running = momentum * running + (1 - momentum) * batch``.
    Population variance is used for both normalization and running stats.
    """
    axes = tuple(range(x.ndim - 1))
    if train:
        if x.shape[0] < 2:
            raise ContractError("train-mode batch normalization needs a batch of at least 2")
        mu = nx.mean(x, axes, keepdims=True)
        var = nx.var(x, axes, keepdims=True)
        stats["mean"] = momentum * stats["mean"] + (1 - momentum) * mu.data.reshape(-1)
        stats["var"] = momentum * stats["var"] + (1 - momentum) * var.data.reshape(-1)
        xhat = (x - mu) * nx.rsqrt(var + eps)
    else:
        xhat = (x - stats["mean"]) * (1.0 / np.sqrt(stats["var"] + eps))
    return xhat * gamma + beta


def layernorm(x: Tensor, gamma, beta, eps: float = LN_EPS) -> Tensor:
    mu = nx.mean(x, -1, keepdims=True)
    var = nx.var(x, -1, keepdims=True)
    return (x - mu) * nx.rsqrt(var + eps) * gamma + beta


def mhsa_forward(x: Tensor, wq, wk, wv, wo, n_heads: int, return_weights: bool = False):
    """Multi-head scaled dot-product self-attention over an (M, S, D) token batch.

    Head i uses columns [i*d_k, (i+1)*d_k) of each projection.
    """
    M, S, D = x.shape
    if D % n_heads:
        raise ContractError(f"width {D} not divisible by {n_heads} heads")
    for w in (wq, wk, wv, wo):
        if nx._data(w).shape != (D, D):
            raise ContractError(f"projection shape {nx._data(w).shape} != {(D, D)}")
    dk = D // n_heads

    def heads(t):
        return t.reshape(M, S, n_heads, dk).transpose(0, 2, 1, 3)

    q, k, v = heads(x @ wq), heads(x @ wk), heads(x @ wv)
    weights = nx.softmax((q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dk)))
    out = (weights @ v).transpose(0, 2, 1, 3).reshape(M, S, D) @ wo
    return (out, weights) if return_weights else out


def residual_layernorm(x: Tensor, sub_output: Tensor, gamma, beta) -> Tensor:
    if x.shape != sub_output.shape:
        raise ContractError(f"residual shapes differ: {x.shape} vs {sub_output.shape}")
    return layernorm(x + sub_output, gamma, beta)


def _lstm_cell(zx: Tensor, h, c, U, b):
    dh = nx._data(U).shape[0]
    z = zx + b if h is None else zx + h @ U + b
    f = nx.sigmoid(z[:, :dh])
    i = nx.sigmoid(z[:, dh:2 * dh])
    g = nx.tanh(z[:, 2 * dh:3 * dh])
    o = nx.sigmoid(z[:, 3 * dh:])
    c_new = i * g if c is None else f * c + i * g
    return o * nx.tanh(c_new), c_new


def lstm_cell_step(x_t, h_prev, c_prev, p: dict):
    """One LSTM step; gates are packed [forget, input, candidate, output] along the 4*d_h axis.

    The recurrent weights ``U`` multiply the previous hidden state.
    """
    W, U, b = p["W"], p["U"], p["b"]
    dh = nx._data(U).shape[0]
    if nx._data(W).shape[1] != 4 * dh or nx._data(x_t).shape[-1] != nx._data(W).shape[0]:
        raise ContractError("LSTM parameter shapes inconsistent with the input")
    return _lstm_cell(nx.matmul(x_t, W), h_prev, c_prev, U, b)


def lstm_forward(xs: Tensor, p: dict, reverse: bool = False) -> list[Tensor]:
    """Run over (B, T, D); returns hidden states in original time order."""
    B, T, D = xs.shape
    if T < 1:
        raise ContractError("empty sequence")
    zx = xs @ p["W"]
    h = c = None
    hs = [None] * T
    for t in (reversed(range(T)) if reverse else range(T)):
        h, c = _lstm_cell(zx[:, t, :], h, c, p["U"], p["b"])
        hs[t] = h
    return hs


def bilstm_forward(xs: Tensor, p_fwd: dict, p_bwd: dict) -> Tensor:
    """(B, T, D) -> (B, T, 2 d_h): forward state over x_1..x_t next to backward state over x_T..x_t."""
    B, T, _ = xs.shape
    fwd = lstm_forward(xs, p_fwd)
    bwd = lstm_forward(xs, p_bwd, reverse=True)
    steps = [nx.concat([f, r], axis=-1).reshape(B, 1, -1) for f, r in zip(fwd, bwd)]
    return steps[0] if T == 1 else nx.concat(steps, axis=1)


def bilstm_last(xs: Tensor, p_fwd: dict, p_bwd: dict) -> Tensor:
    """``bilstm_forward(xs)[:, -1]`` without running the unused part of the backward pass."""
    h_fwd = lstm_forward(xs, p_fwd)[-1]
    h_bwd, _ = _lstm_cell(xs[:, -1, :] @ p_bwd["W"], None, None, p_bwd["U"], p_bwd["b"])
    return nx.concat([h_fwd, h_bwd], axis=-1)


def position_embed(r, p: dict) -> Tensor:
    """ReLU(W . LayerNorm(r) + b) for r = [r_U, r_k] in meters, shape (B, 6)."""
    return nx.relu(layernorm(r, p["pos.ln_gamma"], p["pos.ln_beta"]) @ p["pos.w"] + p["pos.b"])


def fuse_and_regress(h_t: Tensor, R: Tensor | None, p: dict, n_layers: int) -> Tensor:
    """Dense head over concat(h_t, R), written as h_t W_t + R W_r so the
    temporal block keeps its shape when the position branch is disabled."""
    if nx._data(p["head0.w"]).shape[0] != h_t.shape[-1]:
        raise ContractError(f"head input width {h_t.shape[-1]} != {nx._data(p['head0.w']).shape[0]}")
    z = h_t @ p["head0.w"]
    if R is not None:
        z = z + R @ p["head0.w_pos"]
    z = z + p["head0.b"]
    for i in range(1, n_layers):
        z = nx.relu(z) @ p[f"head{i}.w"] + p[f"head{i}.b"]
    return z


# ---------------------------------------------------------------- parameters


def _uniform(rng, shape, fan_in, gain=1.0):
    limit = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def _uses(cfg: ModelConfig) -> dict[str, bool]:
    a = cfg.ablation
    return {
        "attention": a in ("full", "no_position", "racnn"),
        "temporal": a in ("full", "no_position", "cnn_lstm"),
        "bidirectional": a in ("full", "no_position"),
        "position": a == "full" and cfg.position_width > 0,
    }


def head_input_width(cfg: ModelConfig) -> int:
    use = _uses(cfg)
    if use["temporal"]:
        return cfg.hidden_size * (2 if use["bidirectional"] else 1)
    return cfg.token_width * cfg.pilot_length


def init_params(cfg: ModelConfig, seed: int = 0) -> tuple[dict[str, np.ndarray], dict[str, dict]]:
    """Fan-in uniform initialization, zero output layer, LSTM forget-gate bias 1.

    Returns (params, bn_stats).
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    use = _uses(cfg)
    p: dict[str, np.ndarray] = {}
    bn: dict[str, dict] = {}
    k, C = cfg.kernel_size, cfg.conv_channels
    c_in = 2
    for i in range(cfg.conv_layers):
        p[f"conv{i}.w"] = _uniform(rng, (k, k, c_in, C), k * k * c_in, math.sqrt(2.0))
        p[f"conv{i}.b"] = np.zeros(C)
        p[f"bn{i}.gamma"] = np.ones(C)
        p[f"bn{i}.beta"] = np.zeros(C)
        bn[f"bn{i}"] = {"mean": np.zeros(C), "var": np.ones(C)}
        c_in = C
    D = cfg.token_width
    if use["attention"]:
        for name in ("wq", "wk", "wv", "wo"):
            p[f"attn.{name}"] = _uniform(rng, (D, D), D)
        p["attn.ln_gamma"] = np.ones(D)
        p["attn.ln_beta"] = np.zeros(D)
    if use["temporal"]:
        dh = cfg.hidden_size
        flat = D * cfg.pilot_length
        for direction in (("lstm_f", "lstm_b") if use["bidirectional"] else ("lstm_f",)):
            p[f"{direction}.W"] = _uniform(rng, (flat, 4 * dh), flat)
            p[f"{direction}.U"] = _uniform(rng, (dh, 4 * dh), dh)
            b = np.zeros(4 * dh)
            b[:dh] = 1.0
            p[f"{direction}.b"] = b
    width = head_input_width(cfg)
    dims = [width, *cfg.dense_hidden, cfg.output_dim]
    for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        p[f"head{i}.w"] = _uniform(rng, (d_in, d_out), d_in, math.sqrt(2.0))
        p[f"head{i}.b"] = np.zeros(d_out)
    # start from H_hat = 0: a random output layer makes the first Adam steps shrink the
    # prediction by switching off whole hidden ReLU units, which then never recover
    p[f"head{len(dims) - 2}.w"][:] = 0.0
    if use["position"]:
        R = cfg.position_width
        p["pos.ln_gamma"] = np.ones(POSITION_DIM)
        p["pos.ln_beta"] = np.zeros(POSITION_DIM)
        p["pos.w"] = _uniform(rng, (POSITION_DIM, R), POSITION_DIM, math.sqrt(2.0))
        p["pos.b"] = np.zeros(R)
        p["head0.w_pos"] = _uniform(rng, (R, dims[1]), width + R, math.sqrt(2.0))
    return p, bn


# ---------------------------------------------------------------- assembly


def slot_features(x: Tensor, p: dict, bn: dict, cfg: ModelConfig, train: bool) -> Tensor:
    """Conv stack (+ residual attention) for (M, 2, N, Q) images -> (M, Q * N * C) vectors."""
    M = x.shape[0]
    h = x.transpose(0, 2, 3, 1)
    for i in range(cfg.conv_layers):
        h = conv2d_forward(h, p[f"conv{i}.w"], p[f"conv{i}.b"])
        h = batchnorm_forward(h, p[f"bn{i}.gamma"], p[f"bn{i}.beta"], bn[f"bn{i}"], train)
        h = nx.relu(h)
    # tokens are the Q columns of the feature map, each an N*C vector
    tokens = h.transpose(0, 2, 1, 3).reshape(M, cfg.pilot_length, cfg.token_width)
    if _uses(cfg)["attention"]:
        att = mhsa_forward(tokens, p["attn.wq"], p["attn.wk"], p["attn.wv"], p["attn.wo"], cfg.n_heads)
        tokens = residual_layernorm(tokens, att, p["attn.ln_gamma"], p["attn.ln_beta"])
    return tokens.reshape(M, cfg.pilot_length * cfg.token_width)


def model_forward(cfg: ModelConfig, p: dict, bn: dict, images, positions, train: bool = False) -> Tensor:
    """Map a window of normalized slot images to the current slot's 2NQ channel vector.

    images: (B, T_history, 2, N, Q); positions: (B, 6) at the latest slot.
    Non-temporal ablations only look at the latest slot of the window.
    """
    images = nx._data(images) if not isinstance(images, Tensor) else images
    B, T = images.shape[:2]
    if T != cfg.history:
        raise ContractError(f"window length {T} != configured history {cfg.history}")
    if tuple(images.shape[2:]) != (2, cfg.n_antennas, cfg.pilot_length):
        raise ContractError(f"slot image shape {images.shape[2:]} != (2, N, Q)")
    use = _uses(cfg)
    n_layers = len(cfg.dense_hidden) + 1
    if use["temporal"]:
        flat = slot_features(nx.reshape(images, (B * T, 2, cfg.n_antennas, cfg.pilot_length)),
                             p, bn, cfg, train)
        seq = flat.reshape(B, T, -1)
        if use["bidirectional"]:
            h_t = bilstm_last(seq, {"W": p["lstm_f.W"], "U": p["lstm_f.U"], "b": p["lstm_f.b"]},
                              {"W": p["lstm_b.W"], "U": p["lstm_b.U"], "b": p["lstm_b.b"]})
        else:
            h_t = lstm_forward(seq, {"W": p["lstm_f.W"], "U": p["lstm_f.U"], "b": p["lstm_f.b"]})[-1]
    else:
        h_t = slot_features(nx.getitem(images, (slice(None), -1)), p, bn, cfg, train)
    R = position_embed(positions, p) if use["position"] else None
    return fuse_and_regress(h_t, R, p, n_layers)


@dataclass
class ChannelEstimator:
    config: ModelConfig
    params: dict[str, np.ndarray]
    bn: dict[str, dict] = field(default_factory=dict)

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0) -> "ChannelEstimator":
        params, bn = init_params(config, seed)
        return cls(config, params, bn)

    def forward(self, images, positions, train: bool = False, tape: Tape | None = None):
        """Forward pass; with a tape the parameters are registered on it and the result is differentiable."""
        if tape is None:
            return model_forward(self.config, self.params, self.bn, images, positions, train)
        p = {name: tape.param(name, value) for name, value in self.params.items()}
        return model_forward(self.config, p, self.bn, images, positions, train)

    def predict(self, images, positions, batch_size: int = 256) -> np.ndarray:
        """Eval-mode estimates as complex (B, N, Q)."""
        outs = []
        for start in range(0, len(images), batch_size):
            sl = slice(start, start + batch_size)
            outs.append(self.forward(images[sl], positions[sl]).data)
        v = np.concatenate(outs, axis=0)
        return from_target_vector(v, self.config.n_antennas, self.config.pilot_length)

    def state(self) -> dict[str, np.ndarray]:
        out = dict(self.params)
        for name, stats in self.bn.items():
            out[f"{name}.running_mean"] = stats["mean"]
            out[f"{name}.running_var"] = stats["var"]
        return out


def estimate_flops(cfg: ModelConfig, batch: int, height: int, width: int,
                   seq_len: int | None = None) -> dict[str, int]:
    """Closed-form multiply counts per module.

    conv: sum over layers of B*H*W*C_in*C_out*k^2; attention: B*T^2*d_model;
    bilstm: B*T*d_h^2; dense: sum of B*d_in*d_out over head layers.
    """
    T = cfg.history if seq_len is None else seq_len
    k, C = cfg.kernel_size, cfg.conv_channels
    conv = 0
    c_in = 2
    for _ in range(cfg.conv_layers):
        conv += batch * height * width * c_in * C * k * k
        c_in = C
    d_model = C * height
    width_in = head_input_width(cfg) + (cfg.position_width if _uses(cfg)["position"] else 0)
    dims = [width_in, *cfg.dense_hidden, cfg.output_dim]
    dense = sum(batch * a * b for a, b in zip(dims[:-1], dims[1:]))
    return {
        "conv": conv,
        "attention": batch * T * T * d_model,
        "bilstm": batch * T * cfg.hidden_size ** 2,
        "dense": dense,
    }


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"NFCKPT"
CKPT_VERSION = 1


def write_checkpoint(path, est: ChannelEstimator) -> None:
    """Magic, u32 version, u32-length JSON model config, u32 blob count, then named float64 blobs."""
    cfg_bytes = json.dumps(to_dict(est.config), sort_keys=True).encode("utf-8")
    chunks = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION),
              struct.pack("<I", len(cfg_bytes)), cfg_bytes]
    state = est.state()
    chunks.append(struct.pack("<I", len(state)))
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    try:
        with open(path, "wb") as fh:
            fh.write(b"".join(chunks))
    except OSError as exc:
        raise PersistenceError(f"cannot write checkpoint ({exc.strerror})", path) from exc


def read_checkpoint(path) -> ChannelEstimator:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise PersistenceError(f"cannot read checkpoint ({exc.strerror})", path) from exc
    if blob[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise FormatError("not an NFCKPT checkpoint (bad magic)", path)
    pos = len(CKPT_MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CorruptionError("truncated checkpoint", path, offset=pos)
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    (version,) = struct.unpack("<I", take(4))
    if version != CKPT_VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version}", path)
    (cfg_len,) = struct.unpack("<I", take(4))
    cfg = from_dict(ModelConfig, json.loads(take(cfg_len).decode("utf-8")), "model")
    (count,) = struct.unpack("<I", take(4))
    state = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).copy()
    if pos != len(blob):
        raise CorruptionError("trailing bytes after checkpoint payload", path, offset=pos)
    params, bn = {}, {}
    for name, arr in state.items():
        if name.endswith(".running_mean"):
            bn.setdefault(name[: -len(".running_mean")], {})["mean"] = arr
        elif name.endswith(".running_var"):
            bn.setdefault(name[: -len(".running_var")], {})["var"] = arr
        else:
            params[name] = arr
    return ChannelEstimator(cfg, params, bn)
