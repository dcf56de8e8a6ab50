import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from oracles import kl_value_derivative

from fklrl.divergence_core import (
    MAX_EXPONENT,
    OptimalityModel,
    OptimismScheduler,
    bernoulli_forward_kl,
    bernoulli_kl,
    bernoulli_reverse_kl,
    exponent_clamped,
    nonoptimal_ratio,
    optimality_ratios,
    scheduler_update,
    surrogate_td,
    tau_from_eta,
    td_error,
    value_grad_forward,
    value_grad_reverse,
)

# Reference values computed once with mpmath at 30 digits.
FKL_AT_REF = 0.116730571645545815
FKL_GRAD_AT_REF = -0.377540668798145435
RKL_GRAD_AT_REF = -0.358342896598141509
REF = dict(value=-1.0, action_value=-0.5, ceiling=0.0, tau=1.0)

deltas = st.floats(-50, 50, allow_nan=False)
taus = st.floats(0.05, 100)


class TestTdError:
    def test_direct(self):
        assert td_error(1.0, 0.0, 0.0, 0.99) == 1.0

    def test_self_consistent(self):
        assert td_error(0.0, 3.0, 0.9 * 3.0, 0.9) == pytest.approx(0.0, abs=1e-15)

    def test_terminal_ignores_bootstrap(self):
        assert td_error(1.0, 5.0, 0.0, 0.99, terminal=True) == 1.0

    def test_vectorized(self):
        out = td_error(np.ones(3), np.array([1.0, 2.0, 3.0]), np.zeros(3), 0.5,
                       np.array([False, True, False]))
        np.testing.assert_array_equal(out, [1.5, 1.0, 2.5])

    @pytest.mark.parametrize("gamma", [-0.1, 1.0, 1.5])
    def test_bad_gamma(self, gamma):
        with pytest.raises(ValueError):
            td_error(0.0, 0.0, 0.0, gamma)

    def test_non_finite(self):
        with pytest.raises(ValueError):
            td_error(float("nan"), 0.0, 0.0, 0.5)


class TestSurrogate:
    def test_examples(self):
        assert surrogate_td(0.0, 1.0) == 0.0
        assert surrogate_td(1.0, 1.0) == pytest.approx(math.e - 1, rel=1e-15)
        assert surrogate_td(-1.0, 1.0) == pytest.approx(1 / math.e - 1, rel=1e-15)
        assert surrogate_td(-3.0, math.inf) == -3.0

    def test_rejects_non_positive_tau(self):
        for tau in (0.0, -1.0, -math.inf):
            with pytest.raises(ValueError):
                surrogate_td(1.0, tau)

    def test_overflow_clamp(self):
        assert surrogate_td(1e6, 1.0) == pytest.approx(math.expm1(MAX_EXPONENT))
        assert exponent_clamped(31.0, 1.0)
        assert not exponent_clamped(29.0, 1.0)
        assert not exponent_clamped(1e9, math.inf)

    @given(st.floats(-30, 30), taus)
    def test_bounds(self, x, tau):
        # strictness of s > -tau is representable only while exp(delta / tau) is not lost to rounding
        d = x * tau
        s = surrogate_td(d, tau)
        assert s > -tau
        assert s >= d
        assert np.sign(s) == np.sign(d)

    @given(deltas, taus)
    def test_equality_only_at_zero(self, d, tau):
        if d != 0.0 and abs(d / tau) > 1e-6:
            assert surrogate_td(d, tau) > d

    @given(taus)
    def test_increasing_and_convex_on_grid(self, tau):
        grid = np.linspace(-5 * tau, 5 * tau, 401)
        s = surrogate_td(grid, tau)
        assert np.all(np.diff(s) > 0)
        assert np.all(np.diff(s, 2) >= -1e-12 * tau)

    @given(st.floats(-10, -1e-3))
    def test_more_pessimism_bound_for_small_tau(self, d):
        values = [surrogate_td(d, tau) for tau in (10.0, 3.0, 1.0, 0.3, 0.1)]
        # moves toward -tau, i.e. |delta_tilde| shrinks as tau drops
        assert all(abs(a) >= abs(b) for a, b in zip(values, values[1:]))

    def test_large_tau_matches_identity(self):
        d = np.linspace(-10, 10, 201)
        s = surrogate_td(d, 1e6)
        mask = d != 0
        assert np.max(np.abs(s[mask] - d[mask]) / np.abs(d[mask])) <= 1e-5

    @settings(max_examples=200)
    @given(st.lists(st.floats(-20, 20), min_size=2, max_size=100), st.floats(0.1, 10))
    def test_jensen_zero_mean(self, sample, tau):
        x = np.array(sample)
        x = x - x.mean()
        assert np.mean(surrogate_td(x, tau)) >= -1e-12 * max(1.0, np.abs(x).max())


class TestTauFromEta:
    def test_examples(self):
        assert tau_from_eta(1.0, 0.5, 1e-5) == pytest.approx(1 / math.log(2), rel=1e-15)
        assert tau_from_eta(1.0, 1 - math.exp(-1), 1e-5) == pytest.approx(1.0, rel=1e-14)
        tau = tau_from_eta(2.0, 0.9, 1e-5)
        assert tau == pytest.approx(0.868588963806503655, rel=1e-14)
        assert surrogate_td(-2.0, tau) == pytest.approx(-0.781730067425853290, rel=1e-13)

    @pytest.mark.parametrize("eta", [0.0, 1.0, -0.2, 1.5])
    def test_rejects_eta(self, eta):
        with pytest.raises(ValueError):
            tau_from_eta(1.0, eta, 1e-5)

    def test_clamps_scale(self):
        assert tau_from_eta(0.0, 0.5, 1e-3) == tau_from_eta(1e-3, 0.5, 1e-3)
        assert tau_from_eta(1e9, 0.5, 1e-3) == tau_from_eta(1e3, 0.5, 1e-3)

    @given(st.floats(1e-4, 1e4), st.floats(0.01, 0.99))
    def test_defining_identity(self, scale, eta):
        tau = tau_from_eta(scale, eta, 1e-5)
        assert surrogate_td(-scale, tau) == pytest.approx(-eta * tau, rel=1e-12)

    @given(st.floats(1e-3, 1e3), st.floats(0.01, 0.98), st.floats(0.001, 0.01))
    def test_decreasing_in_eta(self, scale, eta, step):
        assert tau_from_eta(scale, eta + step, 1e-5) < tau_from_eta(scale, eta, 1e-5)


class TestScheduler:
    def test_initial_state(self):
        s = OptimismScheduler(0.5, epsilon=1e-5)
        assert s.delta_max == s.delta_scale == pytest.approx(1e5, rel=1e-15)
        assert s.tau == pytest.approx(1e5 / math.log(2))
        # almost no optimism initially
        assert surrogate_td(-1.0, s.tau) == pytest.approx(-1.0, rel=1e-5)

    def test_examples(self):
        s = OptimismScheduler(0.5, beta=0.999, delta_max=1.0, delta_scale=1.0)
        scheduler_update(s, [2.0])
        assert s.delta_max == 2.0
        assert s.delta_scale == pytest.approx(1.001, rel=1e-15)
        s = OptimismScheduler(0.5, beta=0.999, delta_max=1.0, delta_scale=1.0)
        tau = s.update([0.5, 0.1])
        assert s.delta_max == pytest.approx(0.999)
        assert s.delta_scale == pytest.approx(0.999999, rel=1e-15)
        assert tau == tau_from_eta(s.delta_scale, 0.5, s.epsilon)

    def test_empty_batch_noop(self):
        s = OptimismScheduler(0.5, delta_max=3.0, delta_scale=2.0)
        assert s.update([]) == s.tau
        assert (s.delta_max, s.delta_scale) == (3.0, 2.0)

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            OptimismScheduler(0.5).update([-1.0])

    @pytest.mark.parametrize("eta,beta", [(1.0, 0.9), (-0.1, 0.9), (0.5, 1.0), (0.5, 0.0)])
    def test_rejects_parameters(self, eta, beta):
        with pytest.raises(ValueError):
            OptimismScheduler(eta, beta)

    def test_zero_optimism(self):
        s = OptimismScheduler(0.0)
        assert s.zero_optimism and s.tau == math.inf
        assert s.update([3.0]) == math.inf
        assert s.delta_scale < 1e5

    @given(st.lists(st.lists(st.floats(0, 100), max_size=8), min_size=1, max_size=50))
    def test_scale_bounded_by_largest_seen(self, batches):
        s = OptimismScheduler(0.3, beta=0.9, delta_max=5.0, delta_scale=5.0)
        largest = 5.0
        for b in batches:
            s.update(b)
            largest = max([largest, *b])
            assert 0 <= s.delta_max <= largest
            assert 0 <= s.delta_scale <= largest + 1e-12

    def test_scale_can_exceed_decayed_max(self):
        s = OptimismScheduler(0.5, beta=0.9, delta_max=1.0, delta_scale=1.0)
        s.update([0.0])
        assert s.delta_scale == pytest.approx(0.99) and s.delta_max == pytest.approx(0.9)

    @pytest.mark.parametrize("start,level", [(1.0, 4.0), (10.0, 4.0)])
    def test_constant_batches_converge_monotonically(self, start, level):
        s = OptimismScheduler(0.5, beta=0.9, delta_max=start, delta_scale=start)
        history = [s.delta_scale]
        for _ in range(400):
            s.update([level])
            history.append(s.delta_scale)
        steps = np.diff(history)
        assert np.all(steps >= -1e-15) if level > start else np.all(steps[1:] <= 1e-15)
        assert history[-1] == pytest.approx(level, rel=1e-9)

    def test_zero_batches_decay_to_zero(self):
        s = OptimismScheduler(0.5, beta=0.9, delta_max=1.0, delta_scale=1.0)
        for _ in range(500):
            s.update([0.0])
        assert s.delta_scale < 1e-15


class TestOptimalityModel:
    def test_validation(self):
        with pytest.raises(ValueError):
            OptimalityModel(1.0, 0.0, 0.5, 1.0)
        with pytest.raises(ValueError):
            OptimalityModel(-1.0, -1.0, 0.0, 0.0)
        with pytest.raises(ValueError):
            OptimalityModel(0.0, -1.0, 0.0, 1.0)  # p_V == 1

    def test_probabilities(self):
        m = OptimalityModel(**REF)
        assert m.p_value == pytest.approx(math.exp(-1))
        assert m.p_action == pytest.approx(math.exp(-0.5))

    def test_forward_kl_reference(self):
        m = OptimalityModel(**REF)
        assert bernoulli_forward_kl(m) == pytest.approx(FKL_AT_REF, rel=1e-12)
        assert bernoulli_forward_kl(OptimalityModel(-1.0, -1.0, 0.0, 1.0)) == 0.0
        swapped = OptimalityModel(-0.5, -1.0, 0.0, 1.0)
        assert bernoulli_forward_kl(swapped) != pytest.approx(bernoulli_forward_kl(m))
        assert bernoulli_reverse_kl(m) == pytest.approx(bernoulli_kl(m.p_value, m.p_action))

    def test_forward_gradient_reference(self):
        g = value_grad_forward(OptimalityModel(**REF))
        assert g.exact == pytest.approx(FKL_GRAD_AT_REF, rel=1e-12)
        assert g.computable == pytest.approx(-(math.exp(0.5) - 1), rel=1e-14)
        assert g.computable / g.exact == pytest.approx(math.e - 1, rel=1e-12)

    def test_reverse_gradient_reference(self):
        g = value_grad_reverse(OptimalityModel(**REF))
        assert g.exact == pytest.approx(RKL_GRAD_AT_REF, rel=1e-12)
        assert g.computable == -0.5

    def test_equilibrium_zero(self):
        m = OptimalityModel(-1.0, -1.0, 0.0, 1.0)
        for g in (value_grad_forward(m), value_grad_reverse(m)):
            assert g.exact == pytest.approx(0.0, abs=1e-15) and g.computable == 0.0

    @settings(max_examples=300)
    @given(st.floats(-5, -0.05), st.floats(-5, -0.05), st.floats(0.2, 5))
    def test_gradients_match_finite_differences(self, v, q, tau):
        m = OptimalityModel(v, q, 0.0, tau)
        for forward, grad in ((True, value_grad_forward), (False, value_grad_reverse)):
            g = grad(m)
            numeric = kl_value_derivative(v, q, 0.0, tau, forward)
            assert abs(numeric - g.exact) <= 1e-5 * abs(numeric) + 1e-12
            assert np.sign(g.computable) == np.sign(g.exact) or abs(g.exact) < 1e-12

    @settings(max_examples=100)
    @given(st.floats(-5, -0.05), st.floats(-5, -0.05), st.floats(0.2, 5))
    def test_float_finite_differences(self, v, q, tau):
        h = 1e-5
        for kl, grad in ((bernoulli_forward_kl, value_grad_forward), (bernoulli_reverse_kl, value_grad_reverse)):
            fd = (kl(OptimalityModel(v + h, q, 0.0, tau)) - kl(OptimalityModel(v - h, q, 0.0, tau))) / (2 * h)
            assert fd == pytest.approx(grad(OptimalityModel(v, q, 0.0, tau)).exact, rel=1e-4, abs=1e-7)

    @given(st.floats(-5, -0.05), st.floats(-5, -0.05), st.floats(0.2, 5))
    def test_forward_proportionality_factor(self, v, q, tau):
        m = OptimalityModel(v, q, 0.0, tau)
        g = value_grad_forward(m)
        factor = tau ** 2 * (1 - m.p_value) / m.p_value
        assert g.computable == pytest.approx(factor * g.exact, rel=1e-8, abs=1e-12)


class TestRatios:
    def test_examples(self):
        assert optimality_ratios(2.0, 2.0, 1.0) == 1.0
        assert optimality_ratios(0.0, math.log(2), 1.0) == pytest.approx(2.0)
        with pytest.raises(ValueError):
            optimality_ratios(0.0, 1.0, 0.0)

    @given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.1, 10))
    def test_surrogate_identity(self, v, q, tau):
        assume(abs(q - v) / tau <= MAX_EXPONENT)  # the surrogate's exponent is clamped beyond this
        assert surrogate_td(q - v, tau) == pytest.approx(tau * (optimality_ratios(v, q, tau) - 1),
                                                         rel=1e-9, abs=1e-12)

    def test_nonoptimal_ratio_needs_ceiling(self):
        m = OptimalityModel(**REF)
        assert nonoptimal_ratio(m) == pytest.approx((1 - math.exp(-0.5)) / (1 - math.exp(-1)))
