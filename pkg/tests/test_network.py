import numpy as np
import pytest

from fracpinn.errors import BadShape
from fracpinn.network import (
    ConstraintWrapper,
    MlpModel,
    flatten_grads,
    flatten_params,
    forward,
    grad_input,
    grad_params,
    grad_params_dirderiv,
    load_model,
    mlp_init,
    save_model,
    set_params,
)
from fracpinn.sampling import RngStream, sample_ball


def tiny_model(d, rng, sizes=(5, 4)):
    return mlp_init((d, *sizes, 1), rng)


def manual_forward(model, x):
    """Reference forward pass written independently of the implementation."""
    h = x
    for i in range(len(model.weights)):
        a = h @ model.weights[i] + model.biases[i]
        h = np.tanh(a) if i < len(model.weights) - 1 else a
    return h[:, 0]


def manual_wrapped(wrapper, x):
    raw = manual_forward(wrapper.model, x)
    if wrapper.kind == "none":
        return raw
    if wrapper.kind == "spatial_ball":
        return np.maximum(1.0 - np.sum(x * x, axis=1), 0.0) * raw
    s = np.maximum(1.0 - np.sum(x[:, :-1] ** 2, axis=1), 0.0)
    return x[:, -1] * s * raw


def fd_param_grad(wrapper, x, upstream, h=1e-5):
    """Central finite differences of sum(upstream * forward) over all params."""
    theta = flatten_params(wrapper.model)
    out = np.zeros_like(theta)
    for j in range(theta.size):
        for sign in (1.0, -1.0):
            bumped = theta.copy()
            bumped[j] += sign * h
            set_params(wrapper.model, bumped)
            out[j] += sign * np.sum(upstream * forward(wrapper, x))
    set_params(wrapper.model, theta)
    return out / (2.0 * h)


class TestMlpInit:
    def test_param_count(self):
        model = mlp_init([3, 128, 128, 128, 1], RngStream(0))
        # 3*128+128 + 2*(128*128+128) + 128+1
        assert model.n_params == 33_665

    def test_deterministic(self):
        a = mlp_init([2, 8, 1], RngStream(5))
        b = mlp_init([2, 8, 1], RngStream(5))
        for wa, wb in zip(a.weights, b.weights):
            assert np.array_equal(wa, wb)

    def test_glorot_bounds_and_zero_biases(self):
        model = mlp_init([7, 16, 9, 1], RngStream(1))
        for w, b in zip(model.weights, model.biases):
            limit = np.sqrt(6.0 / (w.shape[0] + w.shape[1]))
            assert np.all(np.abs(w) < limit)
            assert np.all(b == 0.0)

    def test_zero_width_rejected(self):
        with pytest.raises(BadShape):
            mlp_init([3, 0, 1], RngStream(0))

    def test_single_layer_rejected(self):
        with pytest.raises(BadShape):
            mlp_init([4], RngStream(0))

    def test_inconsistent_arrays_rejected(self):
        with pytest.raises(BadShape):
            MlpModel((2, 3, 1), [np.zeros((2, 3))], [np.zeros(3)])


class TestForward:
    def test_matches_manual_unwrapped(self):
        model = tiny_model(3, RngStream(2))
        wrapper = ConstraintWrapper("none", model)
        x = RngStream(3).generator.normal(size=(17, 3))
        assert np.allclose(forward(wrapper, x), manual_forward(model, x), rtol=1e-14)

    def test_spatial_ball_zero_outside(self):
        wrapper = ConstraintWrapper("spatial_ball", tiny_model(4, RngStream(4)))
        x = np.full((5, 4), 1.2 / 2.0)  # norm 1.2
        assert np.all(forward(wrapper, x) == 0.0)

    def test_spacetime_zero_at_t0(self):
        wrapper = ConstraintWrapper("spacetime_ball", tiny_model(4, RngStream(5)))
        x = np.zeros((6, 4))
        x[:, :3] = sample_ball(3, 6, RngStream(6)) * 0.5
        assert np.all(forward(wrapper, x) == 0.0)

    def test_zero_weights_give_zero(self):
        model = tiny_model(2, RngStream(7))
        for w in model.weights:
            w[...] = 0.0
        wrapper = ConstraintWrapper("spatial_ball", model)
        assert np.all(forward(wrapper, np.zeros((3, 2))) == 0.0)

    def test_exterior_points_exactly_zero(self):
        wrapper = ConstraintWrapper("spatial_ball", tiny_model(5, RngStream(8)))
        gen = RngStream(9).generator
        x = gen.normal(size=(10**4, 5))
        x *= (1.0 + gen.random((10**4, 1))) / np.linalg.norm(x, axis=1, keepdims=True)
        assert np.all(forward(wrapper, x) == 0.0)

    def test_initial_slice_exactly_zero(self):
        wrapper = ConstraintWrapper("spacetime_ball", tiny_model(6, RngStream(10)))
        x = np.zeros((10**4, 6))
        x[:, :5] = sample_ball(5, 10**4, RngStream(11))
        assert np.all(forward(wrapper, x) == 0.0)

    def test_mixed_batch_matches_full_formula(self):
        wrapper = ConstraintWrapper("spatial_ball", tiny_model(3, RngStream(12)))
        gen = RngStream(13).generator
        x = gen.normal(size=(40, 3))  # norms straddle 1
        got = forward(wrapper, x)
        want = manual_wrapped(wrapper, x)
        assert np.allclose(got, want, rtol=1e-13, atol=0.0)
        outside = np.sum(x * x, axis=1) >= 1.0
        assert outside.any() and np.all(got[outside] == 0.0)

    def test_permutation_equivariance(self):
        wrapper = ConstraintWrapper("spatial_ball", tiny_model(4, RngStream(14)))
        x = sample_ball(4, 64, RngStream(15))
        perm = RngStream(16).generator.permutation(64)
        assert np.array_equal(forward(wrapper, x)[perm], forward(wrapper, x[perm]))

    def test_width_mismatch(self):
        wrapper = ConstraintWrapper("none", tiny_model(3, RngStream(17)))
        with pytest.raises(BadShape):
            forward(wrapper, np.zeros((4, 5)))

    def test_nonscalar_output_rejected(self):
        with pytest.raises(BadShape):
            ConstraintWrapper("none", mlp_init([3, 4, 2], RngStream(0)))

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            ConstraintWrapper("cube", tiny_model(2, RngStream(0)))


class TestGradParams:
    def test_zero_upstream(self):
        wrapper = ConstraintWrapper("none", tiny_model(2, RngStream(18)))
        g = grad_params(wrapper, np.zeros((3, 2)), np.zeros(3))
        assert np.all(flatten_grads(g) == 0.0)

    def test_single_linear_layer(self):
        model = MlpModel((3, 1), [np.array([[0.7], [-0.2], [1.1]])], [np.zeros(1)])
        wrapper = ConstraintWrapper("none", model)
        x = np.array([[1.0, 2.0, -3.0]])
        g = grad_params(wrapper, x, np.ones(1))
        assert np.allclose(g.weights[0][:, 0], x[0])
        assert np.allclose(g.biases[0], 1.0)

    @pytest.mark.parametrize("d", [2, 10])
    @pytest.mark.parametrize("kind", ["none", "spatial_ball", "spacetime_ball"])
    def test_finite_differences(self, d, kind):
        for trial in range(17):
            rng = RngStream(100 * d + trial)
            wrapper = ConstraintWrapper(kind, tiny_model(d, rng))
            gen = rng.child(1).generator
            if kind == "spacetime_ball":
                x = np.column_stack(
                    [sample_ball(d - 1, 4, rng.child(2)), gen.random(4) + 0.1]
                )
            else:
                x = sample_ball(d, 4, rng.child(2)) * 0.95
            upstream = gen.normal(size=4)
            got = flatten_grads(grad_params(wrapper, x, upstream))
            want = fd_param_grad(wrapper, x, upstream)
            assert np.allclose(got, want, rtol=1e-5, atol=1e-7)

    def test_zero_rows_skipped_exactly(self):
        wrapper = ConstraintWrapper("spatial_ball", tiny_model(3, RngStream(19)))
        x_out = np.full((4, 3), 1.0)  # norm sqrt(3) > 1
        g = grad_params(wrapper, x_out, np.ones(4))
        assert np.all(flatten_grads(g) == 0.0)


class TestGradInput:
    def test_flat_outside_ball(self):
        wrapper = ConstraintWrapper("spatial_ball", tiny_model(3, RngStream(20)))
        x = np.full((4, 3), 0.9)  # norm > 1
        assert np.all(grad_input(wrapper, x) == 0.0)

    def test_constant_model_product_rule(self):
        model = tiny_model(3, RngStream(21))
        for w in model.weights:
            w[...] = 0.0
        b = 0.8
        model.biases[-1][...] = b
        wrapper = ConstraintWrapper("spatial_ball", model)
        x = sample_ball(3, 11, RngStream(22)) * 0.9
        assert np.allclose(grad_input(wrapper, x), -2.0 * b * x, rtol=1e-14)

    def test_spacetime_constant_model(self):
        model = tiny_model(4, RngStream(23))
        for w in model.weights:
            w[...] = 0.0
        k = -1.3
        model.biases[-1][...] = k
        wrapper = ConstraintWrapper("spacetime_ball", model)
        xs = sample_ball(3, 7, RngStream(24)) * 0.9
        t = RngStream(25).generator.random(7) + 0.2
        x = np.column_stack([xs, t])
        g = grad_input(wrapper, x)
        s = 1.0 - np.sum(xs * xs, axis=1)
        assert np.allclose(g[:, :3], -2.0 * k * t[:, None] * xs, rtol=1e-13)
        assert np.allclose(g[:, 3], k * s, rtol=1e-13)

    def test_time_gradient_survives_t0(self):
        model = tiny_model(3, RngStream(26))
        for w in model.weights:
            w[...] = 0.0
        model.biases[-1][...] = 2.0
        wrapper = ConstraintWrapper("spacetime_ball", model)
        xs = np.array([[0.3, -0.2]])
        x = np.column_stack([xs, [0.0]])
        g = grad_input(wrapper, x)
        assert np.allclose(g[0, 2], 2.0 * (1.0 - np.sum(xs**2)))
        assert np.all(g[0, :2] == 0.0)

    @pytest.mark.parametrize("d", [2, 10])
    @pytest.mark.parametrize("kind", ["none", "spatial_ball", "spacetime_ball"])
    def test_finite_differences(self, d, kind):
        h = 1e-5
        for trial in range(17):
            rng = RngStream(200 * d + trial)
            wrapper = ConstraintWrapper(kind, tiny_model(d, rng))
            if kind == "spacetime_ball":
                x = np.column_stack(
                    [
                        sample_ball(d - 1, 3, rng.child(2)) * 0.9,
                        rng.child(1).generator.random(3) + 0.1,
                    ]
                )
            else:
                x = sample_ball(d, 3, rng.child(2)) * 0.9
            got = grad_input(wrapper, x)
            want = np.zeros_like(x)
            for b in range(x.shape[0]):
                for j in range(d):
                    for sign in (1.0, -1.0):
                        bumped = x.copy()
                        bumped[b, j] += sign * h
                        want[b, j] += sign * forward(wrapper, bumped)[b]
            want /= 2.0 * h
            assert np.allclose(got, want, rtol=1e-5, atol=1e-7)


class TestGradParamsDirDeriv:
    @pytest.mark.parametrize("d", [2, 10])
    @pytest.mark.parametrize("kind", ["none", "spatial_ball", "spacetime_ball"])
    def test_finite_differences(self, d, kind):
        h = 1e-5
        for trial in range(9):
            rng = RngStream(300 * d + trial)
            wrapper = ConstraintWrapper(kind, tiny_model(d, rng))
            gen = rng.child(1).generator
            if kind == "spacetime_ball":
                x = np.column_stack(
                    [sample_ball(d - 1, 3, rng.child(2)) * 0.9, gen.random(3) + 0.1]
                )
                v = np.column_stack([gen.normal(size=(3, d - 1)), np.zeros(3)])
            else:
                x = sample_ball(d, 3, rng.child(2)) * 0.9
                v = gen.normal(size=(3, d))
            upstream = gen.normal(size=3)
            got = flatten_grads(grad_params_dirderiv(wrapper, x, v, upstream))

            theta = flatten_params(wrapper.model)
            want = np.zeros_like(theta)
            for j in range(theta.size):
                for sign in (1.0, -1.0):
                    bumped = theta.copy()
                    bumped[j] += sign * h
                    set_params(wrapper.model, bumped)
                    val = np.sum(upstream * np.sum(v * grad_input(wrapper, x), axis=1))
                    want[j] += sign * val
            set_params(wrapper.model, theta)
            want /= 2.0 * h
            assert np.allclose(got, want, rtol=1e-5, atol=1e-7)

    def test_exterior_rows_contribute_nothing(self):
        wrapper = ConstraintWrapper("spatial_ball", tiny_model(3, RngStream(27)))
        x = np.full((2, 3), 1.0)
        v = np.ones((2, 3))
        g = grad_params_dirderiv(wrapper, x, v, np.ones(2))
        assert np.all(flatten_grads(g) == 0.0)

    def test_direction_shape_checked(self):
        wrapper = ConstraintWrapper("none", tiny_model(3, RngStream(28)))
        with pytest.raises(BadShape):
            grad_params_dirderiv(wrapper, np.zeros((2, 3)), np.zeros((2, 2)), np.ones(2))


class TestParamVector:
    def test_roundtrip(self):
        model = tiny_model(4, RngStream(29))
        vec = flatten_params(model)
        twin = tiny_model(4, RngStream(30))
        set_params(twin, vec)
        assert np.array_equal(flatten_params(twin), vec)

    def test_wrong_length(self):
        model = tiny_model(4, RngStream(31))
        with pytest.raises(BadShape):
            set_params(model, np.zeros(3))


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        wrapper = ConstraintWrapper("spatial_ball", tiny_model(5, RngStream(32)))
        header = {"seed": 7, "alpha": 1.5}
        path = tmp_path / "model.npz"
        save_model(path, wrapper, header)
        loaded, meta = load_model(path)
        assert loaded.kind == "spatial_ball"
        assert meta == header
        assert np.array_equal(flatten_params(loaded.model), flatten_params(wrapper.model))
        x = sample_ball(5, 9, RngStream(33))
        assert np.array_equal(forward(loaded, x), forward(wrapper, x))
