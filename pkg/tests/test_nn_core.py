import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pmbnn.errors import (
    BadBounds,
    InvalidStep,
    NonFiniteGradient,
    OutOfBounds,
)
from pmbnn.nn_core import (
    Gradients,
    MlpParams,
    TrainBatch,
    bounded_inverse,
    bounded_transform,
    gradient_check,
    lambda_from_theta,
    load_checkpoint,
    loss_and_gradients,
    make_gradcheck_case,
    mlp_backward,
    mlp_forward,
    rmsprop_step,
    run_gradcheck,
    save_checkpoint,
    theta_from_lambda,
    xavier_init,
    RmspropState,
)
from pmbnn.physio_model import DEFAULT_INITIAL, LambdaBounds


class TestBoundedTransform:
    def test_midpoint(self):
        assert bounded_transform(0.0, 2.0, 6.0) == pytest.approx(4.0, abs=1e-15)

    def test_saturation(self):
        assert bounded_transform(50.0, 2.0, 6.0) == pytest.approx(6.0, abs=1e-12)

    def test_lambda5_target(self):
        # direct logit arithmetic: theta for 0.44 in (0.1, 0.6)
        theta = bounded_inverse(0.44, 0.1, 0.6)
        assert theta == pytest.approx(math.log(0.68 / 0.32), rel=1e-12)
        assert bounded_transform(theta, 0.1, 0.6) == pytest.approx(0.44, rel=1e-12)

    def test_bad_bounds(self):
        with pytest.raises(BadBounds):
            bounded_transform(0.0, 1.0, 1.0)

    @given(st.floats(-30, 30), st.floats(-5, 5), st.floats(0.1, 10))
    @settings(max_examples=200, deadline=None)
    def test_image_strictly_inside(self, theta, lo, width):
        hi = lo + width
        out = bounded_transform(theta, lo, hi)
        assert lo < out < hi

    @given(st.floats(-25, 25))
    @settings(max_examples=100, deadline=None)
    def test_strictly_monotone(self, theta):
        assert bounded_transform(theta + 1e-3, 0.0, 1.0) > bounded_transform(theta, 0.0, 1.0)


class TestBoundedInverse:
    def test_midpoint_is_zero(self):
        assert bounded_inverse(4.0, 2.0, 6.0) == pytest.approx(0.0, abs=1e-15)

    def test_round_trip(self):
        rng = np.random.default_rng(21)
        for _ in range(100):
            lo = rng.uniform(-3, 3)
            hi = lo + rng.uniform(0.1, 5)
            lam = rng.uniform(lo + 1e-6, hi - 1e-6)
            theta = bounded_inverse(lam, lo, hi)
            assert bounded_transform(theta, lo, hi) == pytest.approx(lam, rel=1e-12)

    def test_boundary_rejected(self):
        with pytest.raises(OutOfBounds):
            bounded_inverse(2.0, 2.0, 6.0)


class TestXavierInit:
    def test_deterministic(self):
        a, b = xavier_init(9), xavier_init(9)
        for x, y in zip(a.arrays(), b.arrays()):
            np.testing.assert_array_equal(x, y)

    def test_theta_maps_to_default_initials(self):
        p = xavier_init(0)
        lam = lambda_from_theta(p.theta, LambdaBounds())
        np.testing.assert_allclose(
            lam.as_array(), DEFAULT_INITIAL.as_array(), rtol=1e-9
        )

    def test_w1_within_xavier_bound(self):
        p = xavier_init(3)
        limit = math.sqrt(6.0 / 65.0)
        assert np.all(np.abs(p.w1) <= limit)
        assert np.all(p.b1 == 0) and np.all(p.b2 == 0) and np.all(p.b3 == 0)


class TestMlpForward:
    def zero_params(self):
        return MlpParams(
            w1=np.zeros((64, 1)), b1=np.zeros(64),
            w2=np.zeros((64, 64)), b2=np.zeros(64),
            w3=np.zeros((1, 64)), b3=np.zeros(1),
            theta=np.zeros(6),
        )

    def test_all_zero_params(self):
        p = self.zero_params()
        assert mlp_forward(p, 1.7) == 0.0

    def test_output_bias_passthrough(self):
        p = self.zero_params()
        p.b3 = np.array([42.5])
        for v in (0.0, 1.3, -2.0):
            assert mlp_forward(p, v) == 42.5

    def test_matches_straight_line_oracle(self):
        p = xavier_init(17)
        x = 1.3
        # independent re-evaluation with plain matrix arithmetic
        a1 = np.tanh(p.w1 @ np.array([[x]]) + p.b1[:, None])
        a2 = np.tanh(p.w2 @ a1 + p.b2[:, None])
        y = (p.w3 @ a2 + p.b3[:, None]).item()
        assert mlp_forward(p, x) == pytest.approx(y, rel=1e-12)

    def test_vector_input(self):
        p = xavier_init(18)
        xs = np.array([0.5, 1.0, 2.5])
        np.testing.assert_allclose(
            mlp_forward(p, xs), [mlp_forward(p, float(x)) for x in xs], rtol=1e-12
        )


def batch_for(p, vo2, hr, w=1e5, bounds=LambdaBounds()):
    n = len(vo2)
    return TrainBatch(
        vo2=np.asarray(vo2, dtype=float),
        hr=np.asarray(hr, dtype=float),
        segment_bounds=((0, n),),
        dt_seconds=1.0,
        bounds=bounds,
        de_weight=w,
    )


class TestBackward:
    def test_zero_residual_batch_gives_zero_gradients(self):
        # constant vo2, targets equal to predictions, l6 == 0: both loss
        # terms sit at the bottom of their quadratics
        p = xavier_init(5)
        p.theta[5] = 0.0  # l6 box is symmetric, so theta 0 -> l6 = 0
        vo2 = np.full(30, 1.2)
        hr = mlp_forward(p, vo2)
        grads = mlp_backward(p, batch_for(p, vo2, hr))
        for arr in grads.arrays():
            np.testing.assert_allclose(arr, 0.0, atol=1e-12)

    def test_full_network_fd_agreement(self):
        p, batch = make_gradcheck_case(123)
        assert gradient_check(p, batch, 1e-5) <= 1e-4

    def test_random_instance_fd_agreement(self):
        # plain random instance with the full composite loss, pinned seed
        rng = np.random.default_rng(0)
        p = xavier_init(0)
        n = 30
        vo2 = np.concatenate([np.linspace(0.4, 1.6, 15), np.linspace(1.8, 3.0, 15)])
        hr = 70 + 30 * rng.uniform(size=n)
        batch = TrainBatch(vo2=vo2, hr=hr, segment_bounds=((0, 15), (15, 30)),
                           dt_seconds=1.0, bounds=LambdaBounds(), de_weight=1e5)
        assert gradient_check(p, batch, 1e-5) <= 1e-4

    def test_theta_gradient_chain_rule_at_midpoint(self):
        # dL/dtheta = dL/dlambda * (hi-lo)/4 when theta sits at 0
        p, batch = make_gradcheck_case(7)
        k = 5  # l6: box (-0.5, 0.5)
        p.theta[k] = 0.0
        lo, hi = batch.bounds.lo_hi_arrays()
        analytic = mlp_backward(p, batch).theta[k]

        from pmbnn.nn_core import loss_only

        h_lam = 1e-7
        mid = 0.5 * (lo[k] + hi[k])
        q = p.copy()
        q.theta[k] = bounded_inverse(mid + h_lam, lo[k], hi[k])
        f_plus = loss_only(q, batch)
        q.theta[k] = bounded_inverse(mid - h_lam, lo[k], hi[k])
        f_minus = loss_only(q, batch)
        lambda_grad = (f_plus - f_minus) / (2 * h_lam)
        assert analytic == pytest.approx(lambda_grad * (hi[k] - lo[k]) / 4.0, rel=1e-5)


class TestRmsprop:
    def test_zero_gradient_is_fixed_point(self):
        p = xavier_init(2)
        st0 = RmspropState.init(p)
        for arr in st0.arrays():
            arr += 0.5  # non-trivial accumulators
        zero = Gradients(*[np.zeros_like(a) for a in p.arrays()])
        p2, st1 = rmsprop_step(p, zero, st0)
        for a, b in zip(p.arrays(), p2.arrays()):
            np.testing.assert_array_equal(a, b)
        for v in st1.arrays():
            np.testing.assert_allclose(v, 0.5 * 0.99, rtol=1e-15)

    def test_first_step_magnitude(self):
        p = xavier_init(2)
        g = Gradients(*[np.zeros_like(a) for a in p.arrays()])
        g.b3 = np.array([0.37])
        p2, _ = rmsprop_step(p, g, RmspropState.init(p))
        expected = -0.01 * 0.37 / (math.sqrt(0.01 * 0.37 ** 2) + 1e-8)
        assert (p2.b3[0] - p.b3[0]) == pytest.approx(expected, rel=1e-6)
        assert expected == pytest.approx(-0.01 / math.sqrt(1 - 0.99), rel=1e-4)

    def test_accumulator_after_two_constant_steps(self):
        p = xavier_init(2)
        g = Gradients(*[np.zeros_like(a) for a in p.arrays()])
        g.b3 = np.array([1.3])
        st0 = RmspropState.init(p)
        p1, st1 = rmsprop_step(p, g, st0)
        _, st2 = rmsprop_step(p1, g, st1)
        rho = 0.99
        assert st2.b3[0] == pytest.approx((1 - rho) * (rho + 1) * 1.3 ** 2, rel=1e-12)

    def test_non_finite_gradient_rejected(self):
        p = xavier_init(2)
        g = Gradients(*[np.zeros_like(a) for a in p.arrays()])
        g.w2[0, 0] = np.nan
        with pytest.raises(NonFiniteGradient):
            rmsprop_step(p, g, RmspropState.init(p))


class TestGradientCheck:
    def test_effectively_linear_network_is_exact(self):
        # zero weights leave only the constant output path: the loss is an
        # exact quadratic in b3 and FD is accurate to round-off
        p = MlpParams(
            w1=np.zeros((64, 1)), b1=np.zeros(64),
            w2=np.zeros((64, 64)), b2=np.zeros(64),
            w3=np.zeros((1, 64)), b3=np.array([5.0]),
            theta=theta_from_lambda(DEFAULT_INITIAL, LambdaBounds()),
        )
        p.theta[5] = 0.0
        vo2 = np.full(20, 1.1)
        hr = np.full(20, 9.0)
        assert gradient_check(p, batch_for(p, vo2, hr, w=1.0), 1e-5) <= 1e-10

    def test_twenty_seeds_below_tolerance(self):
        worst = max(run_gradcheck(seed) for seed in range(5))
        assert worst <= 1e-4

    def test_zero_step_rejected(self):
        p, batch = make_gradcheck_case(0)
        with pytest.raises(InvalidStep):
            gradient_check(p, batch, 0.0)


def test_checkpoint_round_trip(tmp_path):
    p = xavier_init(31)
    path = tmp_path / "ckpt.json"
    save_checkpoint(path, p, LambdaBounds(), 31, "abc123")
    q, bounds, seed, chash = load_checkpoint(path)
    for a, b in zip(p.arrays(), q.arrays()):
        np.testing.assert_array_equal(a, b)
    assert seed == 31 and chash == "abc123"
    assert bounds == LambdaBounds()


def test_loss_and_gradients_breakdown_consistency():
    p, batch = make_gradcheck_case(3)
    l_data, l_de, l_tot, _ = loss_and_gradients(p, batch)
    assert l_tot == pytest.approx(l_data + batch.de_weight * l_de, rel=1e-15)
    assert l_data >= 0 and l_de >= 0
