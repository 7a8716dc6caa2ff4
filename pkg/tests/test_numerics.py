import numpy as np
import pytest
from hypothesis import given, strategies as st

from nfce import numerics as nx
from nfce.errors import ContractError, NumericError


def _grad_of(fn, *arrays):
    tape = nx.Tape()
    ts = [tape.param(f"p{i}", a) for i, a in enumerate(arrays)]
    g = nx.grad(tape, fn(*ts))
    return [g[f"p{i}"] for i in range(len(arrays))]


def test_grad_of_sum_is_ones():
    (g,) = _grad_of(lambda p: nx.sum(p), np.array([1.0, -2.0, 3.0]))
    np.testing.assert_array_equal(g, [1.0, 1.0, 1.0])


def test_grad_of_sum_of_squares():
    (g,) = _grad_of(lambda p: nx.sum(p * p), np.array([1.0, 2.0]))
    np.testing.assert_array_equal(g, [2.0, 4.0])


def test_grad_rejects_non_scalar_loss():
    tape = nx.Tape()
    p = tape.param("p", np.ones(3))
    with pytest.raises(ContractError):
        nx.grad(tape, p * 2.0)


def test_grad_names_node_on_nan():
    tape = nx.Tape()
    p = tape.param("p", np.array([1.0, 2.0]))
    loss = nx.sum(p * np.array([np.inf, 1.0]))
    with pytest.raises(NumericError, match="node"):
        nx.grad(tape, loss)


def test_unused_parameter_gets_zero_gradient():
    tape = nx.Tape()
    p = tape.param("p", np.ones(2))
    q = tape.param("q", np.ones(3))
    g = nx.grad(tape, nx.sum(p))
    assert set(g) == {"p", "q"}
    np.testing.assert_array_equal(g["q"], np.zeros(3))


def test_parameter_registered_twice_is_rejected():
    tape = nx.Tape()
    tape.param("w", np.ones(1))
    with pytest.raises(ContractError):
        tape.param("w", np.ones(1))


def test_finite_difference_exact_on_quadratic():
    g = nx.finite_diff_grad(lambda x: float(x[0] ** 2), np.array([3.0]), h=1e-3)
    # exact in real arithmetic; float64 rounding of x +- h leaves ~1e-13
    assert g[0] == pytest.approx(6.0, abs=1e-9)


def test_finite_difference_of_sum_is_ones(rng):
    x = rng.standard_normal(7)
    np.testing.assert_allclose(nx.finite_diff_grad(lambda v: float(np.sum(v)), x), np.ones(7), atol=1e-9)


def test_finite_difference_rejects_bad_step_and_nonfinite():
    with pytest.raises(ContractError):
        nx.finite_diff_grad(lambda v: 0.0, np.zeros(1), h=0.0)
    with pytest.raises(NumericError):
        nx.finite_diff_grad(lambda v: float("nan"), np.zeros(1))


def test_max_rel_error_metric():
    assert nx.max_rel_error(np.array([1.5, 10.0]), np.array([1.0, 11.0])) == pytest.approx(0.5)


# each primitive as (name, function of tensors, input shapes); positive inputs where needed
PRIMITIVES = [
    ("add", lambda a, b: a + b, [(3, 4), (4,)]),
    ("sub", lambda a, b: a - b, [(2, 3), (2, 1)]),
    ("neg", lambda a: -a, [(5,)]),
    ("mul", lambda a, b: a * b, [(3, 4), (3, 4)]),
    ("broadcast_to", lambda a: nx.broadcast_to(a, (2, 3, 4)), [(3, 1)]),
    ("matmul_2d", lambda a, b: a @ b, [(3, 4), (4, 2)]),
    ("matmul_batched", lambda a, b: a @ b, [(2, 3, 4), (2, 4, 5)]),
    ("matmul_shared", lambda a, b: a @ b, [(2, 3, 4), (4, 5)]),
    ("transpose", lambda a: a.transpose(2, 0, 1), [(2, 3, 4)]),
    ("reshape", lambda a: a.reshape(6, 4), [(2, 3, 4)]),
    ("getitem", lambda a: a[:, 1:3], [(3, 4)]),
    ("concat", lambda a, b: nx.concat([a, b], axis=1), [(2, 3), (2, 2)]),
    ("relu", lambda a: nx.relu(a), [(4, 5)]),
    ("tanh", lambda a: nx.tanh(a), [(4, 5)]),
    ("sigmoid", lambda a: nx.sigmoid(a), [(4, 5)]),
    ("softmax", lambda a: nx.softmax(a), [(3, 5)]),
    ("rsqrt", lambda a: nx.rsqrt(a * a + 0.5), [(6,)]),
    ("sum_axis", lambda a: nx.sum(a, axis=1, keepdims=True), [(3, 4)]),
    ("mean", lambda a: nx.mean(a, axis=(0, 2)), [(2, 3, 4)]),
    ("var", lambda a: nx.var(a, axis=-1), [(3, 5)]),
]


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("name,fn,shapes", PRIMITIVES, ids=[p[0] for p in PRIMITIVES])
def test_primitive_matches_finite_differences(name, fn, shapes, seed):
    rng = np.random.default_rng(seed)
    arrays = [rng.standard_normal(s) for s in shapes]
    proj = rng.standard_normal(fn(*[nx.Tensor(a) for a in arrays]).shape)
    grads = _grad_of(lambda *ts: nx.sum(fn(*ts) * proj), *arrays)
    for i, a in enumerate(arrays):
        def f(x, i=i):
            args = [nx.Tensor(v) for v in arrays]
            args[i] = nx.Tensor(x)
            return float(np.sum(fn(*args).data * proj))
        assert nx.max_rel_error(grads[i], nx.finite_diff_grad(f, a)) < 1e-4


def test_sigmoid_is_stable_at_extremes():
    y = nx.sigmoid(np.array([-800.0, 0.0, 800.0])).data
    np.testing.assert_array_equal(y, [0.0, 0.5, 1.0])


def test_softmax_rows_sum_to_one(rng):
    y = nx.softmax(rng.standard_normal((4, 7)) * 50).data
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)


def test_rsqrt_rejects_non_positive():
    with pytest.raises(NumericError):
        nx.rsqrt(np.array([1.0, 0.0]))


def test_forward_is_deterministic(rng):
    x = rng.standard_normal((3, 4))
    w = rng.standard_normal((4, 4))
    a = nx.softmax(nx.tanh(nx.Tensor(x) @ w)).data
    b = nx.softmax(nx.tanh(nx.Tensor(x) @ w)).data
    assert a.tobytes() == b.tobytes()


# --- Adam -------------------------------------------------------------------


def test_adam_zero_gradient_is_fixed_point(rng):
    params = {"w": rng.standard_normal((3, 2))}
    new, state = nx.adam_step(params, {"w": np.zeros((3, 2))}, nx.AdamState())
    assert np.array_equal(new["w"], params["w"])
    assert state.step_count == 1


def test_adam_first_step_reference():
    # by hand: m = 0.1, v = 0.001, m_hat = v_hat = 1, p = -lr * 1 / (1 + eps)
    new, _ = nx.adam_step({"p": np.array(0.0)}, {"p": np.array(1.0)}, nx.AdamState(1e-3, 0.9, 0.999, 1e-8))
    assert abs(float(new["p"]) - (-0.001 / (1 + 1e-8))) < 1e-6
    assert float(new["p"]) == pytest.approx(-0.001, abs=1e-6)


def test_adam_two_steps_keep_decreasing():
    state = nx.AdamState()
    p1, state = nx.adam_step({"p": np.array(0.0)}, {"p": np.array(1.0)}, state)
    p2, state = nx.adam_step(p1, {"p": np.array(1.0)}, state)
    assert float(p2["p"]) < float(p1["p"]) < 0.0
    assert state.step_count == 2


def test_adam_rejects_shape_mismatch():
    with pytest.raises(ContractError):
        nx.adam_step({"w": np.zeros(3)}, {"w": np.zeros(4)}, nx.AdamState())


def test_adam_rejects_non_positive_learning_rate():
    with pytest.raises(ContractError):
        nx.AdamState(learning_rate=0.0)


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6), st.integers(1, 5))
def test_adam_zero_gradients_never_move_parameters(values, steps):
    params = {"w": np.array(values)}
    state = nx.AdamState()
    for _ in range(steps):
        params, state = nx.adam_step(params, {"w": np.zeros(len(values))}, state)
    assert np.array_equal(params["w"], np.array(values))
    assert state.step_count == steps


@given(st.floats(-3, 3), st.floats(0.1, 4))
def test_grad_of_scaled_square_matches_closed_form(x, a):
    (g,) = _grad_of(lambda p: nx.sum(p * p * a), np.array([x]))
    assert g[0] == pytest.approx(2 * a * x, rel=1e-12, abs=1e-12)
