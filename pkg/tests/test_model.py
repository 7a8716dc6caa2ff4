import copy
import dataclasses
import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from nfce import model as m
from nfce import numerics as nx
from nfce.config import ABLATIONS, ModelConfig
from nfce.dataset import from_target_vector, target_vector
from nfce.errors import ContractError, CorruptionError, FormatError, UnsupportedVersionError
from nfce.gradcheck import TOLERANCE, check_function, layer_cases, run_all, tiny_model_config

# --- conv -----------------------------------------------------------------


def test_identity_kernel_is_identity(rng):
    x = rng.standard_normal((2, 5, 4, 3))
    w = np.eye(3).reshape(1, 1, 3, 3)
    assert np.array_equal(m.conv2d_forward(nx.Tensor(x), w, np.zeros(3)).data, x)
    w3 = np.zeros((3, 3, 3, 3))
    w3[1, 1] = np.eye(3)
    assert np.array_equal(m.conv2d_forward(nx.Tensor(x), w3, np.zeros(3)).data, x)


def test_all_ones_kernel_counts_neighbours():
    out = m.conv2d_forward(nx.Tensor(np.ones((1, 3, 3, 1))), np.ones((3, 3, 1, 1)), np.zeros(1)).data[0, :, :, 0]
    assert out[1, 1] == 9 and out[0, 0] == 4 and out[0, 1] == 6


def test_bias_passthrough(rng):
    out = m.conv2d_forward(nx.Tensor(rng.standard_normal((2, 4, 4, 2))), np.zeros((3, 3, 2, 3)), np.full(3, 0.7))
    np.testing.assert_array_equal(out.data, 0.7)


def test_conv_rejects_mismatched_channels(rng):
    with pytest.raises(ContractError):
        m.conv2d_forward(nx.Tensor(rng.standard_normal((1, 4, 4, 2))), np.zeros((3, 3, 3, 1)), np.zeros(1))


# --- batch norm ------------------------------------------------------------


def _stats(c):
    return {"mean": np.zeros(c), "var": np.ones(c)}


def test_batchnorm_reference_values():
    x = np.array([1.0, 2.0, 3.0]).reshape(3, 1)
    out = m.batchnorm_forward(nx.Tensor(x), np.ones(1), np.zeros(1), _stats(1), True).data.ravel()
    ref = (np.array([1, 2, 3]) - 2) / math.sqrt(2 / 3 + m.BN_EPS)
    np.testing.assert_allclose(out, ref, rtol=1e-12)
    np.testing.assert_allclose(out, [-1.2247, 0, 1.2247], atol=1e-4)


def test_batchnorm_zero_gamma_gives_beta(rng):
    out = m.batchnorm_forward(nx.Tensor(rng.standard_normal((4, 3))), np.zeros(3), np.full(3, 0.3), _stats(3), True)
    np.testing.assert_array_equal(out.data, 0.3)


def test_batchnorm_updates_running_stats(rng):
    x = rng.standard_normal((50, 2)) * 3 + 1
    stats = _stats(2)
    m.batchnorm_forward(nx.Tensor(x), np.ones(2), np.zeros(2), stats, True)
    np.testing.assert_allclose(stats["mean"], 0.1 * x.mean(0), rtol=1e-12)
    np.testing.assert_allclose(stats["var"], 0.9 + 0.1 * x.var(0), rtol=1e-12)


def test_batchnorm_eval_uses_running_stats():
    stats = {"mean": np.array([1.0]), "var": np.array([4.0])}
    out = m.batchnorm_forward(nx.Tensor(np.array([[5.0]])), np.ones(1), np.zeros(1), stats, False, eps=0.0)
    assert out.data[0, 0] == 2.0


def test_batchnorm_train_needs_two_samples():
    with pytest.raises(ContractError):
        m.batchnorm_forward(nx.Tensor(np.ones((1, 2))), np.ones(2), np.zeros(2), _stats(2), True)


@given(st.integers(0, 2**32 - 1), st.integers(2, 16))
def test_batchnorm_standardizes(seed, batch):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch, 3, 2, 4)) * rng.uniform(0.5, 5) + rng.uniform(-3, 3)
    out = m.batchnorm_forward(nx.Tensor(x), np.ones(4), np.zeros(4), _stats(4), True, eps=0.0).data
    assert np.all(np.abs(out.mean(axis=(0, 1, 2))) < 1e-9)
    assert np.all(np.abs(out.var(axis=(0, 1, 2)) - 1) < 1e-6)


# --- attention -------------------------------------------------------------


def test_zero_query_key_gives_uniform_weights(rng):
    x = rng.standard_normal((2, 5, 4))
    wv, wo = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))
    out, w = m.mhsa_forward(nx.Tensor(x), np.zeros((4, 4)), np.zeros((4, 4)), wv, wo, 2, return_weights=True)
    np.testing.assert_allclose(w.data, 0.2, atol=1e-15)
    expected = np.broadcast_to((x @ wv).mean(axis=1, keepdims=True), x.shape) @ wo
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


def test_single_token_attention_is_value_projection(rng):
    x = rng.standard_normal((3, 1, 4))
    ws = [rng.standard_normal((4, 4)) for _ in range(4)]
    out, w = m.mhsa_forward(nx.Tensor(x), *ws, 2, return_weights=True)
    assert np.all(w.data == 1.0)
    np.testing.assert_allclose(out.data, x @ ws[2] @ ws[3], atol=1e-12)


@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2, 4]))
def test_attention_rows_sum_to_one(seed, heads):
    rng = np.random.default_rng(seed)
    ws = [rng.standard_normal((8, 8)) for _ in range(4)]
    _, w = m.mhsa_forward(nx.Tensor(rng.standard_normal((2, 5, 8))), *ws, heads, return_weights=True)
    np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-9)


def test_softmax_shift_invariance(rng):
    logits = rng.standard_normal((3, 6))
    a = nx.softmax(logits).data
    b = nx.softmax(logits + rng.standard_normal((3, 1)) * 10).data
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_attention_rejects_indivisible_width(rng):
    ws = [np.zeros((6, 6))] * 4
    with pytest.raises(ContractError):
        m.mhsa_forward(nx.Tensor(rng.standard_normal((1, 2, 6))), *ws, 4)


# --- residual layer norm -----------------------------------------------------


def test_residual_cancellation_gives_shift(rng):
    x = rng.standard_normal((2, 3, 5))
    out = m.residual_layernorm(nx.Tensor(x), nx.Tensor(-x), np.ones(5), np.zeros(5))
    np.testing.assert_array_equal(out.data, 0.0)


@given(st.integers(0, 2**32 - 1))
def test_residual_layernorm_mean_zero_and_scale_invariant(seed):
    rng = np.random.default_rng(seed)
    x, s = rng.standard_normal((2, 3, 6)), rng.standard_normal((2, 3, 6))
    assume(np.min((x + s).var(-1)) > 0.05)   # keep the LN epsilon negligible
    one = m.residual_layernorm(nx.Tensor(x), nx.Tensor(s), np.ones(6), np.zeros(6)).data
    two = m.residual_layernorm(nx.Tensor(2 * x), nx.Tensor(2 * s), np.ones(6), np.zeros(6)).data
    assert np.all(np.abs(one.mean(-1)) < 1e-9)
    # only the LN epsilon breaks exact invariance: |diff| <= |xhat| * 3 eps / (8 var)
    np.testing.assert_allclose(one, two, atol=1e-3)


def test_residual_rejects_shape_mismatch():
    with pytest.raises(ContractError):
        m.residual_layernorm(nx.Tensor(np.ones((2, 3))), nx.Tensor(np.ones((3, 2))), np.ones(3), np.zeros(3))


# --- LSTM ------------------------------------------------------------------


def _zero_lstm(d, dh):
    return {"W": np.zeros((d, 4 * dh)), "U": np.zeros((dh, 4 * dh)), "b": np.zeros(4 * dh)}


def test_lstm_zero_parameters_fixed_point():
    h, c = m.lstm_cell_step(np.ones((1, 3)), np.zeros((1, 2)), np.zeros((1, 2)), _zero_lstm(3, 2))
    assert np.all(h.data == 0) and np.all(c.data == 0)


def test_lstm_zero_parameters_unit_cell():
    h, c = m.lstm_cell_step(np.ones((1, 3)), np.zeros((1, 2)), np.ones((1, 2)), _zero_lstm(3, 2))
    np.testing.assert_allclose(c.data, 0.5)
    np.testing.assert_allclose(h.data, 0.5 * math.tanh(0.5))
    assert abs(h.data[0, 0] - 0.2311) < 1e-4


@given(st.integers(0, 2**32 - 1))
def test_lstm_state_bounds(seed):
    rng = np.random.default_rng(seed)
    p = {"W": rng.standard_normal((3, 8)) * 5, "U": rng.standard_normal((2, 8)) * 5, "b": rng.standard_normal(8)}
    c0 = rng.standard_normal((4, 2)) * 3
    h, c = m.lstm_cell_step(rng.standard_normal((4, 3)) * 5, rng.uniform(-1, 1, (4, 2)), c0, p)
    assert np.all(np.abs(c.data) <= np.abs(c0) + 1 + 1e-12)
    assert np.all(np.abs(h.data) < 1)


def _lstm_params(rng, d, dh):
    return {"W": rng.standard_normal((d, 4 * dh)), "U": rng.standard_normal((dh, 4 * dh)),
            "b": rng.standard_normal(4 * dh)}


def test_bilstm_width_and_single_step(rng):
    pf, pb = _lstm_params(rng, 4, 128), _lstm_params(rng, 4, 128)
    x = rng.standard_normal((2, 1, 4))
    out = m.bilstm_forward(nx.Tensor(x), pf, pb).data
    assert out.shape == (2, 1, 256)
    hf, _ = m.lstm_cell_step(x[:, 0], None, None, pf)
    hb, _ = m.lstm_cell_step(x[:, 0], None, None, pb)
    np.testing.assert_allclose(out[:, 0], np.concatenate([hf.data, hb.data], -1), atol=1e-14)


def test_bilstm_reversal_symmetry(rng):
    pf, pb = _lstm_params(rng, 3, 2), _lstm_params(rng, 3, 2)
    x = rng.standard_normal((2, 5, 3))
    out = m.bilstm_forward(nx.Tensor(x), pf, pb).data
    rev = m.bilstm_forward(nx.Tensor(x[:, ::-1].copy()), pb, pf).data
    np.testing.assert_allclose(out[:, :, :2], rev[:, ::-1, 2:], atol=1e-14)
    np.testing.assert_allclose(out[:, :, 2:], rev[:, ::-1, :2], atol=1e-14)


def test_bilstm_last_matches_full_sequence(rng):
    pf, pb = _lstm_params(rng, 3, 2), _lstm_params(rng, 3, 2)
    x = nx.Tensor(rng.standard_normal((2, 4, 3)))
    np.testing.assert_allclose(m.bilstm_last(x, pf, pb).data, m.bilstm_forward(x, pf, pb).data[:, -1], atol=1e-15)


def test_lstm_rejects_empty_sequence():
    with pytest.raises(ContractError):
        m.lstm_forward(nx.Tensor(np.zeros((1, 0, 3))), _zero_lstm(3, 2))


# --- position branch and head ------------------------------------------------


def _pos_params(rng, width=4):
    return {"pos.ln_gamma": np.ones(6), "pos.ln_beta": rng.standard_normal(6),
            "pos.w": rng.standard_normal((6, width)), "pos.b": rng.standard_normal(width)}


def test_zero_dense_gives_zero_embedding(rng):
    p = _pos_params(rng)
    p["pos.w"][:] = 0
    p["pos.b"][:] = 0
    assert not np.any(m.position_embed(rng.standard_normal((3, 6)), p).data)


def test_constant_position_normalizes_to_beta(rng):
    p = _pos_params(rng)
    ln = m.layernorm(nx.Tensor(np.full((1, 6), 7.0)), p["pos.ln_gamma"], p["pos.ln_beta"]).data
    np.testing.assert_array_equal(ln[0], p["pos.ln_beta"])


@given(st.integers(0, 2**32 - 1))
def test_embedding_is_nonnegative(seed):
    rng = np.random.default_rng(seed)
    assert np.all(m.position_embed(rng.standard_normal((5, 6)) * 20, _pos_params(rng)).data >= 0)


def test_zero_head_gives_zero_estimate(rng):
    p = {"head0.w": rng.standard_normal((5, 7)), "head0.b": rng.standard_normal(7),
         "head1.w": np.zeros((7, 256)), "head1.b": np.zeros(256)}
    v = m.fuse_and_regress(nx.Tensor(rng.standard_normal((2, 5))), None, p, 2).data
    H_hat = from_target_vector(v, 16, 8)
    assert H_hat.shape == (2, 16, 8) and not np.any(H_hat)


def test_head_rejects_width_mismatch(rng):
    p = {"head0.w": np.zeros((5, 3)), "head0.b": np.zeros(3)}
    with pytest.raises(ContractError):
        m.fuse_and_regress(nx.Tensor(np.zeros((1, 4))), None, p, 1)


def test_reshape_round_trip(rng):
    v = rng.standard_normal((3, 256))
    assert np.array_equal(target_vector(from_target_vector(v, 16, 8)), v)


# --- full model ------------------------------------------------------------


def _inputs(cfg, rng, batch=3):
    return (rng.standard_normal((batch, cfg.history, 2, cfg.n_antennas, cfg.pilot_length)),
            rng.standard_normal((batch, 6)) * 10)


@pytest.mark.parametrize("ablation", ABLATIONS)
def test_output_shape_for_every_ablation(ablation, rng):
    cfg = dataclasses.replace(tiny_model_config(ablation), n_antennas=16, pilot_length=8)
    est = m.ChannelEstimator.create(cfg, 0)
    H = est.predict(*_inputs(cfg, rng))
    assert H.shape == (3, 16, 8) and H.dtype == np.complex128


def test_forward_is_bit_deterministic(rng):
    est = m.ChannelEstimator.create(tiny_model_config(), 1)
    x, r = _inputs(est.config, rng)
    assert est.forward(x, r).data.tobytes() == est.forward(x, r).data.tobytes()


def test_time_order_matters(rng):
    cfg = dataclasses.replace(tiny_model_config(), history=4)
    est = m.ChannelEstimator.create(cfg, 2)
    est.params = {k: v + 0.3 * rng.standard_normal(v.shape) for k, v in est.params.items()}
    x, r = _inputs(cfg, rng)
    assert not np.allclose(est.forward(x, r).data, est.forward(x[:, ::-1], r).data)


def test_wrong_window_length_is_rejected(rng):
    est = m.ChannelEstimator.create(tiny_model_config(), 0)
    x, r = _inputs(est.config, rng)
    with pytest.raises(ContractError):
        est.forward(x[:, :1], r)


def test_disabling_position_keeps_other_shapes():
    full, _ = m.init_params(tiny_model_config("full"))
    nopos, _ = m.init_params(tiny_model_config("no_position"))
    extra = {k for k in full if k.startswith("pos.")} | {"head0.w_pos"}
    assert set(full) - set(nopos) == extra
    assert all(full[k].shape == nopos[k].shape for k in nopos)


def test_ablation_parameter_groups():
    groups = {a: {k.split(".")[0] for k in m.init_params(tiny_model_config(a))[0]} for a in ABLATIONS}
    assert "attn" not in groups["cnn"] and "lstm_f" not in groups["cnn"]
    assert "attn" in groups["racnn"] and "lstm_f" not in groups["racnn"]
    assert "lstm_f" in groups["cnn_lstm"] and "lstm_b" not in groups["cnn_lstm"] and "attn" not in groups["cnn_lstm"]
    assert {"attn", "lstm_f", "lstm_b", "pos"} <= groups["full"]


def test_forget_bias_starts_at_one():
    p, _ = m.init_params(tiny_model_config())
    dh = tiny_model_config().hidden_size
    np.testing.assert_array_equal(p["lstm_f.b"][:dh], 1.0)
    np.testing.assert_array_equal(p["lstm_f.b"][dh:], 0.0)


# --- gradient checks ---------------------------------------------------------


@pytest.mark.parametrize("seed", range(10))
def test_every_layer_passes_gradient_check(seed):
    failures = {r.name: r.max_rel_error for r in run_all(seed) if not r.passed}
    assert not failures


def test_gradient_check_detects_a_wrong_backward(rng):
    def leaky(a):
        # relu forward with a tape value whose gradient is off by a factor
        out = nx.relu(a["x"])
        return out * 1.0 + nx.Tensor(np.maximum(nx._data(a["x"]), 0.0)) * 0.5
    arrays = {"x": rng.standard_normal(6) + 2.0}
    assert check_function(leaky, arrays, rng) > TOLERANCE


# --- FLOPs -----------------------------------------------------------------


def test_conv_flops_reference():
    cfg = ModelConfig(conv_layers=1)
    assert m.estimate_flops(cfg, 1, 16, 8)["conv"] == 16 * 8 * 2 * 64 * 9 == 147_456


def test_flops_scaling():
    cfg = ModelConfig()
    one, two = m.estimate_flops(cfg, 1, 16, 8), m.estimate_flops(cfg, 2, 16, 8)
    assert all(two[k] == 2 * one[k] for k in one)
    t6, t12 = m.estimate_flops(cfg, 1, 16, 8, 6), m.estimate_flops(cfg, 1, 16, 8, 12)
    assert t12["attention"] == 4 * t6["attention"] and t12["bilstm"] == 2 * t6["bilstm"]


# --- checkpoints -------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, rng):
    est = m.ChannelEstimator.create(tiny_model_config(), 5)
    est.bn["bn0"]["mean"] = rng.standard_normal(2)
    path = tmp_path / "c.nfckpt"
    m.write_checkpoint(path, est)
    back = m.read_checkpoint(path)
    assert back.config == est.config
    assert set(back.params) == set(est.params)
    assert all(back.params[k].tobytes() == est.params[k].tobytes() for k in est.params)
    assert all(back.bn[k][s].tobytes() == est.bn[k][s].tobytes() for k in est.bn for s in ("mean", "var"))


@pytest.mark.parametrize("offset,error", [(0, FormatError), (6, UnsupportedVersionError)])
def test_checkpoint_header_corruption(tmp_path, offset, error):
    path = tmp_path / "c.nfckpt"
    m.write_checkpoint(path, m.ChannelEstimator.create(tiny_model_config(), 0))
    blob = bytearray(path.read_bytes())
    blob[offset] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(error):
        m.read_checkpoint(path)


def test_checkpoint_truncation(tmp_path):
    path = tmp_path / "c.nfckpt"
    m.write_checkpoint(path, m.ChannelEstimator.create(tiny_model_config(), 0))
    blob = path.read_bytes()
    path.write_bytes(blob[:-3])
    with pytest.raises(CorruptionError) as info:
        m.read_checkpoint(path)
    assert 0 < info.value.offset < len(blob)


@pytest.mark.parametrize("ablation", ABLATIONS)
def test_fresh_model_predicts_zero(ablation, rng):
    cfg = tiny_model_config(ablation)
    est = m.ChannelEstimator.create(cfg, 0)
    x = rng.standard_normal((3, cfg.history, 2, cfg.n_antennas, cfg.pilot_length))
    out = est.predict(x, rng.standard_normal((3, 6)))
    assert np.all(out == 0)
