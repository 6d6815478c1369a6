import numpy as np
import pytest

from dynabench.errors import FormatError, NumericError, StructuralError
from dynabench.numerics import (AdamState, MlpParams, Rng, adam_init,
                                adam_update, gaussian, grads_global_norm,
                                mlp_apply, mlp_grad, mlp_init,
                                params_from_bytes, params_to_bytes,
                                zero_grads_like)


def finite_difference_grads(params, x, upstream, eps=1e-5):
    """Central-difference oracle for <upstream, mlp_apply(params, x)>."""
    def f():
        return float(np.dot(upstream, mlp_apply(params, x)))

    num = zero_grads_like(params)
    for p_arr, n_arr in zip(params.arrays(), num.arrays()):
        flat_p = p_arr.ravel()
        flat_n = n_arr.ravel()
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + eps
            hi = f()
            flat_p[i] = orig - eps
            lo = f()
            flat_p[i] = orig
            flat_n[i] = (hi - lo) / (2 * eps)
    return num


def assert_grads_close(analytic, numeric, rtol=1e-4):
    for a, n in zip(analytic.arrays(), numeric.arrays()):
        denom = np.maximum(np.abs(n), 1e-6)
        assert np.max(np.abs(a - n) / denom) < rtol


class TestMlpApply:
    def test_zero_net_maps_to_zero(self):
        p = MlpParams([np.zeros((4, 3)), np.zeros((2, 4))],
                      [np.zeros(4), np.zeros(2)], ("relu",))
        assert np.array_equal(mlp_apply(p, np.array([1.0, -2.0, 3.0])),
                              np.zeros(2))

    def test_single_affine_layer(self):
        p = MlpParams([np.array([[2.0]])], [np.array([1.0])], ())
        assert mlp_apply(p, np.array([3.0])) == pytest.approx(7.0)

    def test_matches_scalar_reevaluation(self):
        # straight-line recomputation of the same arithmetic, no matrices
        rng = Rng(5)
        p = mlp_init(rng, [2, 3, 1], "relu")
        x = np.array([0.7, -1.2])
        hidden = []
        for i in range(3):
            z = sum(p.weights[0][i, j] * x[j] for j in range(2)) + p.biases[0][i]
            hidden.append(max(z, 0.0))
        expected = sum(p.weights[1][0, i] * hidden[i] for i in range(3)) \
            + p.biases[1][0]
        assert mlp_apply(p, x)[0] == pytest.approx(expected, rel=1e-12)

    def test_pure_function_bit_identical(self):
        rng = Rng(6)
        p = mlp_init(rng, [3, 8, 2], "swish")
        x = rng.fork("x").gaussian(3)
        assert np.array_equal(mlp_apply(p, x), mlp_apply(p, x))

    def test_dimension_mismatch(self):
        p = mlp_init(Rng(0), [3, 4, 2])
        with pytest.raises(StructuralError):
            mlp_apply(p, np.zeros(5))

    def test_batched_matches_loop(self):
        rng = Rng(8)
        p = mlp_init(rng, [3, 6, 2], "elu")
        xs = rng.fork("b").gaussian((5, 3))
        batched = mlp_apply(p, xs)
        for i in range(5):
            assert np.allclose(batched[i], mlp_apply(p, xs[i]), atol=1e-14)


class TestMlpGrad:
    def test_zero_upstream(self):
        p = mlp_init(Rng(1), [3, 5, 2], "swish")
        grads, dx = mlp_grad(p, np.ones(3), np.zeros(2))
        assert all(np.all(a == 0) for a in grads.arrays())
        assert np.all(dx == 0)

    def test_single_linear_layer(self):
        p = MlpParams([np.array([[0.5, -1.5]])], [np.array([0.2])], ())
        x = np.array([2.0, 3.0])
        grads, dx = mlp_grad(p, x, np.array([1.0]))
        assert np.allclose(grads.weights[0], x[None, :])
        assert np.allclose(grads.biases[0], [1.0])
        assert np.allclose(dx, p.weights[0][0])

    @pytest.mark.parametrize("activation", ["relu", "elu", "swish"])
    def test_matches_finite_differences(self, activation):
        rng = Rng(42)
        p = mlp_init(rng, [4, 8, 8, 3], activation)
        x = rng.fork("x").gaussian(4)
        up = rng.fork("u").gaussian(3)
        analytic, dx = mlp_grad(p, x, up)
        numeric = finite_difference_grads(p, x, up)
        assert_grads_close(analytic, numeric)

    def test_input_grad_matches_fd(self):
        rng = Rng(43)
        p = mlp_init(rng, [3, 6, 2], "swish")
        x = rng.fork("x").gaussian(3)
        up = rng.fork("u").gaussian(2)
        _, dx = mlp_grad(p, x, up)
        eps = 1e-6
        for i in range(3):
            xp, xm = x.copy(), x.copy()
            xp[i] += eps
            xm[i] -= eps
            num = (np.dot(up, mlp_apply(p, xp))
                   - np.dot(up, mlp_apply(p, xm))) / (2 * eps)
            assert dx[i] == pytest.approx(num, rel=1e-5, abs=1e-9)

    def test_non_finite_upstream(self):
        p = mlp_init(Rng(2), [2, 3, 1])
        with pytest.raises(NumericError):
            mlp_grad(p, np.zeros(2), np.array([np.nan]))


class TestAdam:
    def test_zero_gradient_is_fixed_point(self):
        p = mlp_init(Rng(3), [2, 4, 1])
        state = adam_init(p, lr=1e-3)
        new_p, new_state = adam_update(state, p, zero_grads_like(p))
        for a, b in zip(p.arrays(), new_p.arrays()):
            assert np.array_equal(a, b)
        assert all(np.all(m == 0) for m in new_state.m)
        assert new_state.step == 1

    @pytest.mark.parametrize("g", [1e-4, 0.1, 7.0, -250.0])
    def test_first_step_magnitude(self, g):
        # bias-corrected first step moves by ~lr regardless of |g|
        # (needs |g| >> eps = 1e-8 for the eps term to be negligible)
        p = MlpParams([np.array([[1.0]])], [np.array([0.0])], ())
        state = adam_init(p, lr=5e-4)
        grads = MlpParams([np.array([[g]])], [np.array([0.0])], ())
        new_p, _ = adam_update(state, p, grads)
        delta = abs(new_p.weights[0][0, 0] - 1.0)
        assert delta == pytest.approx(5e-4, rel=1e-3)

    def test_descends_quadratic(self):
        # oracle: run the loop on f(w) = w^2; convex scalar objective
        p = MlpParams([np.array([[1.0]])], [np.array([0.0])], ())
        state = adam_init(p, lr=0.05)
        for _ in range(100):
            w = p.weights[0][0, 0]
            grads = MlpParams([np.array([[2.0 * w]])], [np.array([0.0])], ())
            p, state = adam_update(state, p, grads)
        assert abs(p.weights[0][0, 0]) < 0.5

    def test_lr_zero_is_identity_on_params(self):
        p = mlp_init(Rng(4), [3, 5, 2])
        state = adam_init(p, lr=0.0)
        grads = mlp_init(Rng(5), [3, 5, 2])
        new_p, _ = adam_update(state, p, grads)
        for a, b in zip(p.arrays(), new_p.arrays()):
            assert np.array_equal(a, b)

    def test_non_finite_grads(self):
        p = mlp_init(Rng(6), [2, 3, 1])
        grads = zero_grads_like(p)
        grads.weights[0][0, 0] = np.inf
        with pytest.raises(NumericError):
            adam_update(adam_init(p, 1e-3), p, grads)

    def test_step_counter_increments(self):
        p = mlp_init(Rng(7), [2, 3, 1])
        state = adam_init(p, 1e-3)
        for expect in (1, 2, 3):
            p, state = adam_update(state, p, zero_grads_like(p))
            assert state.step == expect


class TestRng:
    def test_deterministic(self):
        a = gaussian(Rng(123), 16)
        b = gaussian(Rng(123), 16)
        assert np.array_equal(a, b)

    def test_moments(self):
        draws = gaussian(Rng(77), 100_000)
        assert abs(draws.mean()) < 0.02
        assert abs(draws.var() - 1.0) < 0.03

    def test_fork_independence(self):
        root = Rng(55)
        a = root.fork("a").gaussian(100_000)
        b = root.fork("b").gaussian(100_000)
        rho = np.corrcoef(a, b)[0, 1]
        assert abs(rho) < 0.02

    def test_fork_is_address_based(self):
        root = Rng(9)
        before = root.fork("x").gaussian(4)
        root.gaussian(100)  # drawing on the parent must not move the fork
        after = root.fork("x").gaussian(4)
        assert np.array_equal(before, after)

    def test_gaussian_requires_positive_n(self):
        with pytest.raises(StructuralError):
            gaussian(Rng(0), 0)


class TestSerialization:
    def test_round_trip_bit_identical(self):
        p = mlp_init(Rng(11), [5, 16, 16, 4], "elu")
        q = params_from_bytes(params_to_bytes(p))
        assert q.activations == p.activations
        for a, b in zip(p.arrays(), q.arrays()):
            assert np.array_equal(a, b)

    def test_bad_magic(self):
        with pytest.raises(FormatError):
            params_from_bytes(b"NOPE" + b"\x00" * 32)

    def test_truncated(self):
        blob = params_to_bytes(mlp_init(Rng(12), [3, 4, 2]))
        with pytest.raises(FormatError):
            params_from_bytes(blob[:-8])

    def test_trailing_garbage(self):
        blob = params_to_bytes(mlp_init(Rng(13), [3, 4, 2]))
        with pytest.raises(FormatError):
            params_from_bytes(blob + b"\x00")


class TestParamStructure:
    def test_mismatched_layer_dims_rejected(self):
        with pytest.raises(StructuralError):
            MlpParams([np.zeros((4, 3)), np.zeros((2, 5))],
                      [np.zeros(4), np.zeros(2)], ("relu",))

    def test_glorot_bounds(self):
        p = mlp_init(Rng(14), [10, 20, 5], "swish")
        bound = np.sqrt(6.0 / 30.0)
        assert np.all(np.abs(p.weights[0]) <= bound)
        assert np.all(p.biases[0] == 0)

    def test_grads_global_norm(self):
        g = MlpParams([np.array([[3.0]])], [np.array([4.0])], ())
        assert grads_global_norm(g) == pytest.approx(5.0)
