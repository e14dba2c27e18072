import numpy as np
import pytest

from mili.autodiff import (
    AdamState,
    Graph,
    NonFiniteError,
    ShapeError,
    adam_step,
    conv1d_forward,
    finite_difference_grads,
    value_and_grad,
)


def test_relu_value():
    g = Graph()
    x = g.constant([-1.0, 0.0, 2.0])
    y = g.relu(x)
    assert np.array_equal(g.value(y), [0.0, 0.0, 2.0])


def test_conv1d_identity_kernel():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(7, 3))
    w = np.eye(3)[None, :, :]  # single-tap identity kernel
    assert np.allclose(conv1d_forward(x, w), x)
    g = Graph()
    out = g.conv1d(g.constant(x), g.constant(w))
    assert np.allclose(g.value(out), x)


def test_matmul_ones():
    g = Graph()
    out = g.matmul(g.constant(np.ones((2, 3))), g.constant(np.ones((3, 2))))
    assert np.array_equal(g.value(out), np.full((2, 2), 3.0))


def test_conv1d_matches_brute_force():
    rng = np.random.default_rng(1)
    for stride, pad in [(1, 0), (1, 2), (2, 0), (2, 1), (3, 2)]:
        x = rng.normal(size=(11, 2))
        w = rng.normal(size=(3, 2, 4))
        xp = np.pad(x, ((pad, pad), (0, 0)))
        t_out = (xp.shape[0] - 3) // stride + 1
        expect = np.zeros((t_out, 4))
        for i in range(t_out):
            for k in range(3):
                expect[i] += xp[i * stride + k] @ w[k]
        assert np.allclose(conv1d_forward(x, w, stride, pad), expect)


def test_backward_square():
    def build(g, pids):
        return g.sum(g.mul(pids["x"], pids["x"]))

    val, grads = value_and_grad({"x": np.array([3.0])}, build)
    assert val == 9.0
    assert np.allclose(grads["x"], [6.0])


def test_backward_sum_relu_subgradient():
    def build(g, pids):
        return g.sum(g.relu(pids["x"]))

    _, grads = value_and_grad({"x": np.array([-1.0, 2.0])}, build)
    assert np.array_equal(grads["x"], [0.0, 1.0])
    # relu gradient at exactly zero is defined as zero
    _, grads = value_and_grad({"x": np.array([0.0])}, build)
    assert np.array_equal(grads["x"], [0.0])


def test_backward_requires_scalar():
    g = Graph()
    x = g.parameter(np.ones((2, 2)))
    with pytest.raises(ShapeError):
        g.backward(x)


def test_mlp_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    params = {
        "w1": rng.normal(size=(3, 4)) * 0.5,
        "b1": rng.normal(size=(4,)) * 0.1,
        "w2": rng.normal(size=(4, 1)) * 0.5,
    }
    x = rng.normal(size=(5, 3))

    def build(g, pids):
        h = g.relu(g.bias_add(g.matmul(g.constant(x), pids["w1"]), pids["b1"]))
        out = g.matmul(h, pids["w2"])
        return g.sqnorm(out)

    def loss(p):
        return value_and_grad(p, build)[0]

    _, analytic = value_and_grad(params, build)
    numeric = finite_difference_grads(params, loss)
    for name in params:
        err = np.abs(analytic[name] - numeric[name]) / np.maximum(1.0, np.abs(numeric[name]))
        assert err.max() < 1e-4


OP_CASES = [
    ("add", lambda g, p: g.add(p["a2"], p["b2"])),
    ("sub", lambda g, p: g.sub(p["a2"], p["b2"])),
    ("mul", lambda g, p: g.mul(p["a2"], p["b2"])),
    ("smul", lambda g, p: g.smul(p["a2"], -1.7)),
    ("matmul", lambda g, p: g.matmul(p["a2"], p["m"])),
    ("conv1d", lambda g, p: g.conv1d(p["seq"], p["ker"], stride=2, pad=1)),
    ("relu", lambda g, p: g.relu(p["a2"])),
    ("tanh", lambda g, p: g.tanh(p["a2"])),
    ("softplus", lambda g, p: g.softplus(p["a2"])),
    ("exp", lambda g, p: g.exp(p["a2"])),
    ("sum0", lambda g, p: g.sum(p["a2"], axis=0)),
    ("sum1", lambda g, p: g.sum(p["a2"], axis=1)),
    ("mean0", lambda g, p: g.mean(p["a2"], axis=0)),
    ("sqnorm", lambda g, p: g.sqnorm(p["a2"])),
    ("concat", lambda g, p: g.concat([p["a2"], p["b2"]], axis=1)),
    ("slice", lambda g, p: g.slice(p["a2"], (slice(0, 3, 2), slice(None)))),
    ("bias_add", lambda g, p: g.bias_add(p["a2"], p["bias"])),
]


@pytest.mark.parametrize("name,op", OP_CASES, ids=[c[0] for c in OP_CASES])
def test_per_op_gradients_match_finite_differences(name, op):
    rng = np.random.default_rng(hash(name) % 2**32)
    params = {
        "a2": rng.normal(size=(4, 3)),
        "b2": rng.normal(size=(4, 3)),
        "m": rng.normal(size=(3, 2)),
        "seq": rng.normal(size=(9, 2)),
        "ker": rng.normal(size=(3, 2, 2)),
        "bias": rng.normal(size=(3,)),
    }

    probe = Graph()
    out_shape = probe.value(op(probe, {k: probe.constant(v) for k, v in params.items()})).shape
    mixer = rng.normal(size=out_shape)

    def build(g, pids):
        out = op(g, pids)
        if g.value(out).size == 1:
            return out
        return g.sum(g.mul(out, g.constant(mixer)))

    def loss(p):
        return value_and_grad(p, build)[0]

    _, analytic = value_and_grad(params, build)
    numeric = finite_difference_grads(params, loss)
    for pname in params:
        err = np.abs(analytic[pname] - numeric[pname]) / np.maximum(1.0, np.abs(numeric[pname]))
        assert err.max() < 1e-4, f"{name}: gradient mismatch for {pname}"


def test_shape_error_names_op_and_shapes():
    g = Graph()
    a = g.constant(np.ones((2, 3)))
    b = g.constant(np.ones((2, 3)))
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        g.matmul(a, b)


def test_non_finite_output_raises():
    g = Graph()
    x = g.constant(np.array([1000.0]))
    with pytest.raises(NonFiniteError, match="exp"):
        g.exp(x)


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(42)
        params = {"w": rng.normal(size=(6, 6))}
        x = rng.normal(size=(6, 6))

        def build(g, pids):
            return g.sqnorm(g.tanh(g.matmul(g.constant(x), pids["w"])))

        return value_and_grad(params, build)

    v1, g1 = run()
    v2, g2 = run()
    assert v1 == v2
    assert np.array_equal(g1["w"], g2["w"])


def test_forward_backward_leave_inputs_unmodified():
    x = np.array([[1.0, -2.0], [3.0, 4.0]])
    snapshot = x.copy()

    def build(g, pids):
        return g.sqnorm(g.relu(pids["x"]))

    value_and_grad({"x": x}, build)
    assert np.array_equal(x, snapshot)


def test_unused_parameter_gets_zero_gradient():
    def build(g, pids):
        return g.sqnorm(pids["used"])

    _, grads = value_and_grad({"used": np.ones(3), "unused": np.ones(2)}, build)
    assert np.array_equal(grads["unused"], np.zeros(2))


# -- Adam ----------------------------------------------------------------------


def test_adam_zero_gradient_leaves_params():
    params = {"w": np.array([1.0, -2.0])}
    state = AdamState.init(params)
    new_params, new_state = adam_step(params, {"w": np.zeros(2)}, state)
    assert np.array_equal(new_params["w"], params["w"])
    assert new_state.t == 1


def test_adam_single_step_hand_computed():
    # m = 0.1, v = 0.001, m_hat = v_hat = 1 -> step of -lr / (1 + eps)
    params = {"w": np.array([0.0])}
    state = AdamState.init(params, lr=1e-3)
    new_params, new_state = adam_step(params, {"w": np.array([1.0])}, state)
    expect = -1e-3 * 1.0 / (1.0 + 1e-8)
    assert abs(new_params["w"][0] - expect) < 1e-15
    assert new_state.t == 1
    assert np.allclose(new_state.m["w"], [0.1])
    assert np.allclose(new_state.v["w"], [0.001])


def test_adam_constant_gradient_displacement_approaches_lr():
    params = {"w": np.array([0.0])}
    state = AdamState.init(params, lr=1e-3)
    prev = params["w"][0]
    for _ in range(10_000):
        params, state = adam_step(params, {"w": np.array([1.0])}, state)
    displacement = abs(params["w"][0] - prev) / 10_000
    # with g constant, m_hat / sqrt(v_hat) -> 1, so per-step movement -> lr
    assert abs(displacement - 1e-3) < 1e-5
    assert state.t == 10_000
    assert all((v >= 0).all() for v in state.v.values())


def test_adam_rejects_non_finite_gradients_before_mutation():
    params = {"w": np.array([1.0])}
    state = AdamState.init(params)
    with pytest.raises(NonFiniteError):
        adam_step(params, {"w": np.array([np.nan])}, state)
    assert state.t == 0
    assert np.array_equal(params["w"], [1.0])


def test_adam_second_moment_nonnegative_over_random_steps():
    rng = np.random.default_rng(3)
    params = {"w": rng.normal(size=(4,))}
    state = AdamState.init(params, lr=0.01)
    for step in range(200):
        grads = {"w": rng.normal(size=(4,)) * 10}
        params, state = adam_step(params, grads, state)
        assert state.t == step + 1
        assert (state.v["w"] >= 0).all()
