import numpy as np
import pytest

from vadlab.errors import ContractError, FormatError, ValidationError
from vadlab.nn import (
    INIT_HE_UNIFORM,
    INIT_ZERO_LAST_LAYER,
    AdamState,
    MlpParams,
    MlpSpec,
    adam_step,
    init_adam,
    init_mlp,
    input_gradient,
    load_mlp,
    mlp_forward,
    mlp_to_bytes,
    param_gradients,
    penalty_gradients,
    save_mlp,
)


def flatten_params(params):
    return np.concatenate(
        [w.ravel() for w in params.weights] + [b.ravel() for b in params.biases]
    )


def flatten_grads(grads):
    return np.concatenate(
        [w.ravel() for w in grads.weights] + [b.ravel() for b in grads.biases]
    )


def unflatten(params, vec):
    out = params.copy()
    i = 0
    for l, w in enumerate(out.weights):
        out.weights[l] = vec[i : i + w.size].reshape(w.shape).copy()
        i += w.size
    for l, b in enumerate(out.biases):
        out.biases[l] = vec[i : i + b.size].reshape(b.shape).copy()
        i += b.size
    return out


def central_difference(fn, vec, h=1e-4):
    grad = np.zeros_like(vec)
    for i in range(vec.size):
        step = np.zeros_like(vec)
        step[i] = h
        grad[i] = (fn(vec + step) - fn(vec - step)) / (2 * h)
    return grad


def relative_error(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


def random_small_net(rng, scalar_output=False, hidden="leaky_relu"):
    """Random spec with <= 3 layers and widths <= 8, inputs clear of kinks."""
    depth = int(rng.integers(1, 4))
    sizes = [int(rng.integers(2, 9)) for _ in range(depth)]
    sizes.append(1 if scalar_output else int(rng.integers(1, 9)))
    spec = MlpSpec(tuple(sizes), hidden_activation=hidden)
    params = init_mlp(spec, INIT_HE_UNIFORM, seed=int(rng.integers(1 << 30)))
    return spec, params


def batch_away_from_kinks(params, rng, n, margin=0.02):
    """Sample rows whose hidden pre-activations stay clear of the kink at 0,
    so finite differences with h=1e-4 never cross a non-smooth point."""
    from vadlab.nn import forward_trace

    rows = []
    while len(rows) < n:
        x = rng.standard_normal((1, params.spec.in_dim))
        trace = forward_trace(params, x)
        if all(np.abs(p).min() > margin for p in trace.pre[:-1]) or len(trace.pre) == 1:
            rows.append(x[0])
    return np.array(rows)


class TestInit:
    def test_he_uniform_bounds(self):
        for seed in range(10):
            params = init_mlp(MlpSpec((7, 5, 3)), INIT_HE_UNIFORM, seed)
            for w, fan_in in zip(params.weights, (7, 5)):
                assert np.abs(w).max() <= np.sqrt(6.0 / fan_in)
            assert all(not b.any() for b in params.biases)

    def test_zero_last_layer(self):
        params = init_mlp(MlpSpec((4, 4, 4)), INIT_ZERO_LAST_LAYER, seed=1)
        assert not params.weights[-1].any()
        assert not params.biases[-1].any()
        assert params.weights[0].any()

    def test_same_seed_identical(self):
        a = init_mlp(MlpSpec((6, 4, 2)), INIT_HE_UNIFORM, seed=42)
        b = init_mlp(MlpSpec((6, 4, 2)), INIT_HE_UNIFORM, seed=42)
        for wa, wb in zip(a.weights, b.weights):
            assert np.array_equal(wa, wb)

    def test_bad_mode(self):
        with pytest.raises(ValidationError):
            init_mlp(MlpSpec((2, 1)), "xavier", 0)


class TestForward:
    def test_single_linear_layer_exact(self):
        spec = MlpSpec((3, 2))
        w = np.array([[1.0, 2.0, 3.0], [0.5, -1.0, 0.0]])
        b = np.array([0.25, -0.75])
        params = MlpParams(spec=spec, weights=[w], biases=[b])
        x = np.array([[1.0, 1.0, 1.0], [2.0, 0.0, -1.0]])
        assert np.array_equal(mlp_forward(params, x), x @ w.T + b)

    def test_zero_params_zero_output(self):
        spec = MlpSpec((4, 3, 2))
        params = MlpParams(
            spec=spec,
            weights=[np.zeros((3, 4)), np.zeros((2, 3))],
            biases=[np.zeros(3), np.zeros(2)],
        )
        assert not mlp_forward(params, np.ones((5, 4))).any()

    def test_against_naive_reimplementation(self):
        def naive(params, x):
            spec = params.spec
            out = np.zeros((x.shape[0], spec.out_dim))
            for r in range(x.shape[0]):
                z = list(x[r])
                for l, (w, b) in enumerate(zip(params.weights, params.biases)):
                    pre = []
                    for i in range(w.shape[0]):
                        acc = b[i]
                        for j in range(w.shape[1]):
                            acc += w[i, j] * z[j]
                        pre.append(acc)
                    last = l == len(params.weights) - 1
                    if last:
                        if spec.output_activation == "sigmoid":
                            z = [1.0 / (1.0 + np.exp(-p)) for p in pre]
                        else:
                            z = pre
                    else:
                        if spec.hidden_activation == "relu":
                            z = [max(p, 0.0) for p in pre]
                        else:
                            z = [p if p > 0 else spec.leaky_slope * p for p in pre]
                out[r] = z
            return out

        rng = np.random.default_rng(5)
        for _ in range(5):
            _, params = random_small_net(rng)
            x = rng.standard_normal((4, params.spec.in_dim))
            assert relative_error(mlp_forward(params, x), naive(params, x)) < 1e-9

    def test_width_mismatch(self):
        params = init_mlp(MlpSpec((4, 2)), seed=0)
        with pytest.raises(ValidationError):
            mlp_forward(params, np.ones((3, 5)))

    def test_purity_bit_identical(self):
        rng = np.random.default_rng(8)
        _, params = random_small_net(rng)
        x = rng.standard_normal((6, params.spec.in_dim))
        assert mlp_forward(params, x).tobytes() == mlp_forward(params, x).tobytes()


class TestParamGradients:
    def test_linear_layer_closed_form(self):
        spec = MlpSpec((3, 2))
        params = init_mlp(spec, seed=0)
        x = np.random.default_rng(1).standard_normal((5, 3))
        upstream = np.ones((5, 2))
        grads = param_gradients(params, x, upstream)
        assert np.allclose(grads.weights[0], upstream.T @ x)
        assert np.allclose(grads.biases[0], upstream.sum(axis=0))

    def test_zero_upstream_zero_gradients(self):
        params = init_mlp(MlpSpec((4, 3, 2)), seed=2)
        grads = param_gradients(params, np.ones((3, 4)), np.zeros((3, 2)))
        assert not flatten_grads(grads).any()

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_finite_differences(self, seed):
        rng = np.random.default_rng(100 + seed)
        _, params = random_small_net(rng)
        x = batch_away_from_kinks(params, rng, 4)
        upstream = rng.standard_normal((4, params.spec.out_dim))

        def loss(vec):
            return float(np.sum(upstream * mlp_forward(unflatten(params, vec), x)))

        analytic = flatten_grads(param_gradients(params, x, upstream))
        fd = central_difference(loss, flatten_params(params))
        assert relative_error(analytic, fd) < 1e-4


class TestInputGradient:
    def test_linear_critic_gradient_is_weight_vector(self):
        spec = MlpSpec((4, 1))
        w = np.array([[1.0, -2.0, 0.5, 3.0]])
        params = MlpParams(spec=spec, weights=[w], biases=[np.zeros(1)])
        assert np.array_equal(input_gradient(params, np.ones(4)), w[0])

    def test_zero_weights_zero_gradient(self):
        spec = MlpSpec((4, 3, 1))
        params = MlpParams(
            spec=spec,
            weights=[np.zeros((3, 4)), np.zeros((1, 3))],
            biases=[np.zeros(3), np.zeros(1)],
        )
        assert not input_gradient(params, np.ones(4)).any()

    def test_non_scalar_output_rejected(self):
        params = init_mlp(MlpSpec((4, 2)), seed=0)
        with pytest.raises(ContractError):
            input_gradient(params, np.ones(4))

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_finite_differences(self, seed):
        rng = np.random.default_rng(200 + seed)
        _, params = random_small_net(rng, scalar_output=True)
        x = batch_away_from_kinks(params, rng, 1)[0]

        def value(vec):
            return float(mlp_forward(params, vec[None, :])[0, 0])

        analytic = input_gradient(params, x)
        fd = central_difference(value, x.copy())
        assert relative_error(analytic, fd) < 1e-4


class TestPenaltyGradients:
    def test_unit_norm_linear_critic_zero_penalty(self):
        w = np.array([[0.6, 0.8]])
        params = MlpParams(spec=MlpSpec((2, 1)), weights=[w], biases=[np.zeros(1)])
        value, grads = penalty_gradients(params, np.ones((4, 2)), lambda_gp=10.0)
        assert value == pytest.approx(0.0, abs=1e-12)
        assert np.allclose(flatten_grads(grads), 0.0, atol=1e-12)

    def test_linear_critic_closed_form(self):
        # ||w|| = 2, lambda = 1, one sample: value 1, gradient w.r.t. w equals w
        w = np.array([[2.0, 0.0, 0.0]])
        params = MlpParams(spec=MlpSpec((3, 1)), weights=[w], biases=[np.zeros(1)])
        value, grads = penalty_gradients(params, np.ones((1, 3)), lambda_gp=1.0)
        assert value == pytest.approx(1.0)
        assert np.allclose(grads.weights[0], w)
        assert not grads.biases[0].any()

    def test_penalty_constant_for_linear_critic(self):
        rng = np.random.default_rng(3)
        w = rng.standard_normal((1, 5))
        params = MlpParams(spec=MlpSpec((5, 1)), weights=[w], biases=[np.zeros(1)])
        lam = 10.0
        expected = lam * (np.linalg.norm(w) - 1.0) ** 2
        for _ in range(3):
            value, _ = penalty_gradients(params, rng.standard_normal((8, 5)), lam)
            assert value == pytest.approx(expected, rel=1e-12)

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_finite_differences(self, seed):
        rng = np.random.default_rng(300 + seed)
        _, params = random_small_net(rng, scalar_output=True)
        x = batch_away_from_kinks(params, rng, 5)

        def value(vec):
            return penalty_gradients(unflatten(params, vec), x, lambda_gp=10.0)[0]

        _, grads = penalty_gradients(params, x, lambda_gp=10.0)
        fd = central_difference(value, flatten_params(params))
        assert relative_error(flatten_grads(grads), fd) < 1e-4

    def test_requires_identity_output(self):
        params = init_mlp(MlpSpec((3, 2, 1), output_activation="sigmoid"), seed=0)
        with pytest.raises(ContractError):
            penalty_gradients(params, np.ones((2, 3)), 1.0)

    def test_empty_batch_rejected(self):
        params = init_mlp(MlpSpec((3, 1)), seed=0)
        with pytest.raises(ValidationError):
            penalty_gradients(params, np.zeros((0, 3)), 1.0)


class TestAdam:
    def test_first_step_closed_form(self):
        spec = MlpSpec((2, 1))
        params = MlpParams(
            spec=spec, weights=[np.array([[1.0, 2.0]])], biases=[np.array([3.0])]
        )
        grads_w = np.array([[0.5, -0.25]])
        state = init_adam(params, alpha=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
        from vadlab.nn import MlpGrads

        new, _ = adam_step(params, MlpGrads([grads_w], [np.array([0.0])]), state)
        expected = params.weights[0] - 0.1 * grads_w / (np.abs(grads_w) + 1e-8)
        assert np.allclose(new.weights[0], expected)
        assert new.biases[0][0] == pytest.approx(3.0)

    def test_zero_gradient_leaves_params(self):
        params = init_mlp(MlpSpec((3, 2)), seed=1)
        from vadlab.nn import MlpGrads

        zero = MlpGrads([np.zeros((2, 3))], [np.zeros(2)])
        new, state = adam_step(params, zero, init_adam(params))
        assert np.array_equal(new.weights[0], params.weights[0])
        assert state.t == 1

    def test_two_steps_beta1_zero_hand_trace(self):
        # scalar parameter trace: p=1, g1=0.5, g2=-0.2, alpha=0.1, b2=0.9
        spec = MlpSpec((1, 1))
        params = MlpParams(spec=spec, weights=[np.array([[1.0]])], biases=[np.zeros(1)])
        state = init_adam(params, alpha=0.1, beta1=0.0, beta2=0.9, eps=1e-8)
        from vadlab.nn import MlpGrads

        g1, g2 = 0.5, -0.2
        params, state = adam_step(params, MlpGrads([np.array([[g1]])], [np.zeros(1)]), state)
        # t=1: v_hat = g1^2, update = -0.1 * g1/|g1|
        p1 = 1.0 - 0.1 * g1 / (abs(g1) + 1e-8)
        assert params.weights[0][0, 0] == pytest.approx(p1)
        params, state = adam_step(params, MlpGrads([np.array([[g2]])], [np.zeros(1)]), state)
        v2 = 0.9 * (0.1 * g1 * g1) + 0.1 * g2 * g2
        v2_hat = v2 / (1.0 - 0.9**2)
        p2 = p1 - 0.1 * g2 / (np.sqrt(v2_hat) + 1e-8)
        assert params.weights[0][0, 0] == pytest.approx(p2)

    def test_inputs_not_mutated(self):
        params = init_mlp(MlpSpec((3, 2)), seed=1)
        before = flatten_params(params).copy()
        from vadlab.nn import MlpGrads

        grads = MlpGrads([np.ones((2, 3))], [np.ones(2)])
        state = init_adam(params)
        adam_step(params, grads, state)
        assert np.array_equal(flatten_params(params), before)
        assert state.t == 0
        assert not state.v_weights[0].any()

    def test_shape_mismatch(self):
        params = init_mlp(MlpSpec((3, 2)), seed=1)
        from vadlab.nn import MlpGrads

        bad = MlpGrads([np.ones((3, 2))], [np.ones(2)])
        with pytest.raises(ValidationError):
            adam_step(params, bad, init_adam(params))


class TestCheckpoints:
    def test_round_trip(self, tmp_path):
        params = init_mlp(
            MlpSpec((5, 4, 1), hidden_activation="leaky_relu", leaky_slope=0.1),
            seed=7,
        )
        path = tmp_path / "net.mlpw"
        save_mlp(params, path, provenance={"note": "test"})
        loaded, provenance = load_mlp(path)
        assert provenance == {"note": "test"}
        assert loaded.spec == params.spec
        for a, b in zip(loaded.weights, params.weights):
            assert np.array_equal(a, b.astype(np.float32).astype(np.float64))

    def test_bytes_deterministic(self):
        a = init_mlp(MlpSpec((5, 3, 1)), seed=9)
        b = init_mlp(MlpSpec((5, 3, 1)), seed=9)
        assert mlp_to_bytes(a, {"k": 1}) == mlp_to_bytes(b, {"k": 1})

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.mlpw"
        path.write_bytes(b"NOPE" + b"\x00" * 20)
        with pytest.raises(FormatError):
            load_mlp(path)

    def test_truncated_payload(self, tmp_path):
        params = init_mlp(MlpSpec((4, 2)), seed=3)
        path = tmp_path / "net.mlpw"
        save_mlp(params, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-4])
        with pytest.raises(FormatError, match="size"):
            load_mlp(path)


class TestResidualIdentity:
    def test_zero_last_layer_residual_is_identity(self):
        d = 6
        core = init_mlp(MlpSpec((d, d, d)), INIT_ZERO_LAST_LAYER, seed=11)
        x = np.random.default_rng(0).standard_normal((7, d))
        assert np.array_equal(x + mlp_forward(core, x), x)
