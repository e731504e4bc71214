import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from diffretrieve import diffmath as dm
from diffretrieve.diffmath import (
    SENTINEL,
    AffineParams,
    DegenerateDistribution,
    GradCheckError,
    GradTape,
    InvalidArgument,
    Tensor,
    affine_forward,
    avg_pool,
    check_gradient,
    grad_check,
    gumbel_noise,
    l2_dist,
    softmax_tau,
    sum_,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def _weights(shape, seed=99):
    return np.random.default_rng(seed).normal(size=shape)


class TestTensorAndTape:
    def test_unwatched_ops_record_nothing(self):
        with GradTape() as tape:
            x = Tensor([1.0, 2.0])
            _ = x * 3.0 + 1.0
        assert tape._records == []

    def test_gradient_of_unused_source_is_zero(self):
        with GradTape() as tape:
            x, y = tape.watch(Tensor([1.0, 2.0]), Tensor(3.0))
            z = sum_(x * x)
        gx, gy = tape.gradient(z, [x, y])
        np.testing.assert_array_equal(gx, [2.0, 4.0])
        assert gy == 0.0

    def test_target_must_be_scalar(self):
        with GradTape() as tape:
            x = tape.watch(Tensor([1.0, 2.0]))
            y = x * 2.0
        with pytest.raises(InvalidArgument):
            tape.gradient(y, [x])

    def test_shared_subexpression_accumulates(self):
        with GradTape() as tape:
            x = tape.watch(Tensor(3.0))
            y = x * x + x * x
        (g,) = tape.gradient(y, [x])
        assert g == 12.0

    def test_independent_tapes_do_not_interfere(self):
        with GradTape() as outer:
            a = outer.watch(Tensor(2.0))
            with GradTape() as inner:
                b = inner.watch(Tensor(5.0))
                c = b * b
            d = a * a
        assert inner.gradient(c, [b])[0] == 10.0
        assert outer.gradient(d, [a])[0] == 4.0


class TestSoftmax:
    @pytest.mark.parametrize(
        "logits, tau, expected",
        [
            ([0.0, 0.0], 1.0, [0.5, 0.5]),
            ([math.log(2.0), 0.0], 1.0, [2 / 3, 1 / 3]),
        ],
    )
    def test_closed_forms(self, logits, tau, expected):
        np.testing.assert_allclose(softmax_tau(logits, tau).value, expected, rtol=1e-15)

    def test_small_temperature_matches_formula(self):
        s = softmax_tau([1.0, 0.0], 0.01).value
        tail = math.exp(-100.0) / (1.0 + math.exp(-100.0))
        assert s.argmax() == 0
        assert s[1] == pytest.approx(tail, rel=1e-12)
        assert s[1] == pytest.approx(3.72e-44, rel=1e-2)

    def test_sentinel_and_neg_inf_get_zero_mass(self):
        s = softmax_tau([SENTINEL, 0.0, -np.inf, 1.0], 0.5).value
        assert s[0] == 0.0 and s[2] == 0.0
        assert s.sum() == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("tau", [0.0, -1.0])
    def test_nonpositive_tau(self, tau):
        with pytest.raises(InvalidArgument):
            softmax_tau([1.0, 2.0], tau)

    def test_all_excluded_is_degenerate(self):
        with pytest.raises(DegenerateDistribution):
            softmax_tau([SENTINEL, -np.inf], 1.0)

    def test_nan_rejected(self):
        with pytest.raises(InvalidArgument):
            softmax_tau([np.nan, 1.0], 1.0)

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, st.integers(1, 12), elements=finite), st.sampled_from([0.01, 0.1, 1.0, 3.0]))
    def test_normalized_and_bounded(self, logits, tau):
        s = softmax_tau(logits, tau).value
        assert abs(s.sum() - 1.0) <= 1e-9
        assert ((s >= 0) & (s <= 1)).all()

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.integers(1, 10), elements=finite), st.sampled_from([0.01, 0.1, 0.7]))
    def test_temperature_rescaling_is_exact(self, logits, tau):
        a = softmax_tau(logits, tau).value
        b = softmax_tau(logits / tau, 1.0).value
        assert a.tobytes() == b.tobytes()

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.integers(1, 10), elements=finite), st.randoms(use_true_random=False))
    def test_permutation_equivariant(self, logits, rnd):
        perm = list(range(len(logits)))
        rnd.shuffle(perm)
        a = softmax_tau(logits, 0.3).value
        b = softmax_tau(logits[perm], 0.3).value
        np.testing.assert_allclose(a[perm], b, rtol=1e-12, atol=1e-300)

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.integers(2, 10), elements=st.floats(-5, 5), unique=True))
    def test_peak_grows_as_temperature_drops(self, logits):
        peaks = [softmax_tau(logits, t).value.max() for t in (1.0, 0.1, 0.01)]
        assert peaks[0] <= peaks[1] <= peaks[2]


class TestGumbel:
    def test_formula_at_half(self):
        assert -math.log(-math.log(0.5)) == pytest.approx(0.3665129205816643, rel=1e-15)

    def test_same_seed_same_draws(self):
        a = gumbel_noise(np.random.default_rng(4), 50)
        b = gumbel_noise(np.random.default_rng(4), 50)
        assert a.tobytes() == b.tobytes()

    def test_empty(self):
        assert gumbel_noise(np.random.default_rng(0), 0).shape == (0,)

    def test_mean_is_euler_gamma(self):
        g = gumbel_noise(np.random.default_rng(11), 100_000)
        assert g.mean() == pytest.approx(0.5772156649, abs=0.02)

    def test_draws_are_finite_at_extremes(self):
        class Edge:
            def random(self, n):
                return np.array([0.0, 1.0, 0.5])

        g = gumbel_noise(Edge(), 3)
        assert np.isfinite(g).all()


class TestDistances:
    def test_identity(self):
        assert l2_dist([1.0, -2.0], [1.0, -2.0]).item() == 0.0

    def test_three_four_five(self):
        assert l2_dist([0.0, 3.0], [4.0, 0.0]).item() == 5.0

    def test_mismatch(self):
        with pytest.raises(InvalidArgument):
            l2_dist([0.0, 1.0], [1.0, 2.0, 3.0])

    def test_gradient_zero_at_coincidence(self):
        with GradTape() as tape:
            a = tape.watch(Tensor([1.0, 1.0]))
            d = l2_dist(a, [1.0, 1.0])
        np.testing.assert_array_equal(tape.gradient(d, [a])[0], [0.0, 0.0])

    def test_random_pair_gradient(self):
        rng = np.random.default_rng(3)
        b = rng.normal(size=8)
        assert grad_check(lambda a: l2_dist(a, b), rng.normal(size=8)) < 1e-6


class TestAffineAndPooling:
    def test_identity_layer(self):
        x = np.array([1.0, -2.0, 3.0])
        out = affine_forward(AffineParams(np.eye(3), np.zeros(3)), x)
        np.testing.assert_array_equal(out.value, x)

    def test_zero_weight_gives_bias(self):
        c = np.array([0.5, -1.5])
        out = affine_forward(AffineParams(np.zeros((2, 3)), c), np.ones(3))
        np.testing.assert_array_equal(out.value, c)

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidArgument):
            affine_forward(AffineParams(np.eye(3), np.zeros(3)), np.ones(4))

    def test_two_layer_gradient(self):
        rng = np.random.default_rng(5)
        l1 = dm.init_affine(rng, 4, 5)
        l2 = dm.init_affine(rng, 5, 2)
        fn = lambda x: sum_(dm.sigmoid(affine_forward(l2, dm.relu(affine_forward(l1, x)))))  # noqa: E731
        assert grad_check(fn, rng.normal(size=4)) < 1e-6

    def test_pool_singleton(self):
        np.testing.assert_array_equal(avg_pool([[1.0, 2.0]]).value, [1.0, 2.0])

    def test_pool_pair(self):
        np.testing.assert_array_equal(avg_pool([[0.0, 2.0], [2.0, 0.0]]).value, [1.0, 1.0])

    def test_pool_empty(self):
        with pytest.raises(InvalidArgument):
            avg_pool([])

    def test_pool_weighted_matches_convex_combination(self):
        rng = np.random.default_rng(8)
        vs = rng.normal(size=(4, 3))
        w = rng.dirichlet(np.ones(4))
        want = [sum(w[i] * vs[i][j] for i in range(4)) for j in range(3)]
        np.testing.assert_allclose(avg_pool(list(vs), w).value, want, rtol=1e-13)

    def test_pool_gradient_is_one_over_n(self):
        with GradTape() as tape:
            vs = [tape.watch(Tensor(np.ones(2) * i)) for i in range(4)]
            y = sum_(avg_pool(vs))
        for g in tape.gradient(y, vs):
            np.testing.assert_allclose(g, [0.25, 0.25])


def _primitive_cases():
    """Scalar test functions of a flat point, one per registered primitive."""
    w6, w3, w4 = _weights(6), _weights(3), _weights(4)
    groups = np.array([0, 0, 1, 2, 2, 2])
    return {
        "add": (lambda x: sum_((x + x[::-1] * 2.0) * w6), 6),
        "sub": (lambda x: sum_((x - x * x) * w6), 6),
        "mul": (lambda x: sum_(x * x[::-1] * w6), 6),
        "div": (lambda x: sum_(x / (x * x + 1.0) * w6), 6),
        "neg": (lambda x: sum_(-x * w6), 6),
        "exp": (lambda x: sum_(dm.exp(x) * w6), 6),
        "log": (lambda x: sum_(dm.log(x * x + 0.5) * w6), 6),
        "sigmoid": (lambda x: sum_(dm.sigmoid(x) * w6), 6),
        "relu": (lambda x: sum_(dm.relu(x) * w6), 6),
        "abs": (lambda x: sum_(dm.abs_(x) * w6), 6),
        "maximum": (lambda x: sum_(dm.maximum(x, 0.1) * w6), 6),
        "sum": (lambda x: sum_(dm.reshape(x, (2, 3)), axis=0)[1] * 3.0, 6),
        "getitem": (lambda x: sum_(x[np.array([0, 2, 2, 5])] * w4), 6),
        "reshape": (lambda x: sum_(dm.reshape(x, (3, 2))[:, 1] * w3), 6),
        "transpose": (lambda x: sum_(dm.transpose(dm.reshape(x, (2, 3)))[2] * _weights(2)), 6),
        "concat": (lambda x: sum_(dm.concat([x[:2], x * 2.0, x[3:]], axis=0) * _weights(11)), 6),
        "stack": (lambda x: sum_(dm.stack([x[:3], x[3:]], axis=1)[1] * _weights(2)), 6),
        "matmul": (lambda x: sum_(dm.matmul(dm.reshape(x, (2, 3)), dm.reshape(x, (3, 2))) * _weights((2, 2))), 6),
        "softmax_tau": (lambda x: sum_(softmax_tau(x, 0.7) * w6), 6),
        "l2_dist": (lambda x: l2_dist(dm.reshape(x, (2, 3)), w3)[0] + l2_dist(x[:3], x[3:]), 6),
        "group_max": (lambda x: sum_(dm.group_max(x, groups, 3) * w3), 6),
    }


def _smooth_point(name, rng):
    x = rng.normal(size=6)
    if name in ("relu", "abs", "maximum"):
        # keep clear of the kink
        x = np.where(np.abs(x - (0.1 if name == "maximum" else 0.0)) < 0.05, x + 0.2, x)
    return x


class TestGradientCheck:
    def test_every_primitive_has_a_case(self):
        assert set(_primitive_cases()) == set(dm.PRIMITIVES)

    @pytest.mark.parametrize("name", sorted(dm.PRIMITIVES))
    def test_primitive_at_100_points(self, name):
        fn, _ = _primitive_cases()[name]
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        worst = max(grad_check(fn, _smooth_point(name, rng)) for _ in range(100))
        assert worst < 1e-5

    def test_quadratic(self):
        assert grad_check(lambda x: sum_(x * x), [1.0, 2.0]) < 1e-8

    def test_softmax_of_distances(self):
        rng = np.random.default_rng(2)
        feats = rng.normal(size=(4, 3))
        w = rng.normal(size=4)
        fn = lambda q: sum_(softmax_tau(-l2_dist(feats, q), 0.5) * w)  # noqa: E731
        assert grad_check(fn, rng.normal(size=3)) < 1e-5

    def test_wrong_gradient_is_flagged(self):
        x0 = [1.0, 2.0]
        err = grad_check(lambda x: sum_(x * x), x0, grad=lambda x: 4.0 * np.asarray(x))
        assert err > 0.4
        with pytest.raises(GradCheckError):
            check_gradient(lambda x: sum_(x * x), x0, tol=1e-6, grad=lambda x: 4.0 * np.asarray(x))

    def test_nonfinite_value_raises(self):
        with pytest.raises(GradCheckError):
            grad_check(lambda x: sum_(dm.log(x - 5.0)), [1.0])

    def test_step_must_be_positive(self):
        with pytest.raises(InvalidArgument):
            grad_check(lambda x: sum_(x), [1.0], step=0.0)
