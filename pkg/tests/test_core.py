import math

import numpy as np
import pytest

from sbcg.core import (
    BilevelProblem,
    ConfigurationError,
    CutPlane,
    KtSchedule,
    LeastSquaresOracle,
    NoisyOracle,
    ProblemConstants,
    ReferenceValues,
    UnsupportedMetricError,
    cut_contains,
    evaluate_metrics,
    fw_gap_exact,
    kt_sbcgf,
    kt_sbcgi,
    make_cut_plane,
)
from sbcg.sets import L1Ball


UNIT = ProblemConstants(L_f=1, L_g=1, L_l=1, sigma_f=0, sigma_g=0, sigma_l=0, D=1)


def test_constants_validation():
    with pytest.raises(ValueError):
        ProblemConstants(L_f=0, L_g=1, L_l=1)
    with pytest.raises(ValueError):
        ProblemConstants(L_f=1, L_g=1, L_l=1, sigma_g=-0.1)
    with pytest.raises(ValueError):
        ProblemConstants(L_f=1, L_g=1, L_l=1, D=0)


class TestCutPlane:
    def test_offset_collapses_to_zero(self):
        plane = make_cut_plane(np.array([1.0, 0.0]), 2.0, 2.0, 0.0,
                               np.array([0.0, 0.0]))
        assert plane.offset == 0.0
        assert cut_contains(plane, np.array([-1.0, 5.0]))

    def test_huge_slack_contains_everything(self):
        plane = make_cut_plane(np.array([1.0, 0.0]), 0.0, 0.0, 1e300,
                               np.array([0.0, 0.0]))
        rng = np.random.default_rng(0)
        for _ in range(100):
            assert cut_contains(plane, rng.uniform(-10, 10, 2))

    def test_exact_containment_on_random_convex_quadratics(self):
        # with exact data and any k >= 0 the plane keeps every point whose
        # value does not exceed the anchor-reference value
        rng = np.random.default_rng(7)
        for _ in range(1000):
            d = rng.integers(2, 6)
            root = rng.standard_normal((d, d))
            H = root @ root.T + 0.1 * np.eye(d)
            center = rng.standard_normal(d)
            g = lambda p: 0.5 * (p - center) @ H @ (p - center)
            grad = lambda p: H @ (p - center)
            x_t = rng.standard_normal(d)
            x_0 = rng.standard_normal(d)
            plane = make_cut_plane(grad(x_t), g(x_t), g(x_0), 0.0, x_t)
            z = rng.standard_normal(d)
            if g(z) <= g(x_0):
                assert cut_contains(plane, z, 1e-9)

    def test_nonfinite_inputs_rejected(self):
        with pytest.raises(ValueError):
            make_cut_plane(np.array([np.nan, 0.0]), 0.0, 0.0, 0.0,
                           np.zeros(2))
        with pytest.raises(ValueError):
            make_cut_plane(np.zeros(2), np.inf, 0.0, 0.0, np.zeros(2))
        with pytest.raises(ValueError):
            make_cut_plane(np.zeros(2), 0.0, 0.0, -1.0, np.zeros(2))

    def test_membership_examples(self):
        plane = CutPlane(np.array([1.0, 0.0]), np.zeros(2), 0.0)
        assert cut_contains(plane, np.array([-1.0, 5.0]), 0.0)
        assert cut_contains(plane, np.array([1e-13, 0.0]), 1e-9)
        assert not cut_contains(plane, np.array([0.1, 0.0]), 0.0)
        with pytest.raises(ValueError):
            cut_contains(plane, np.zeros(3))

    def test_naive_plane_fails_under_noise(self):
        # unbiased noisy estimates with zero slack lose the known minimizer
        rng = np.random.default_rng(3)
        center = np.array([0.3, -0.2])
        violations = 0
        for _ in range(1000):
            x_t = rng.uniform(-1, 1, 2)
            grad_est = (x_t - center) + rng.standard_normal(2)
            g_est = 0.5 * np.sum((x_t - center) ** 2) + rng.standard_normal()
            g_x0 = 0.0  # start at the minimizer: g(x0) = g* = 0
            plane = make_cut_plane(grad_est, g_est, g_x0, 0.0, x_t)
            if not cut_contains(plane, center, 0.0):
                violations += 1
        assert violations >= 1


class TestKtSchedules:
    def test_convex_value_matches_hand_formula(self):
        # independent evaluation of the closed form
        t, delta, d = 5, 0.1, 2
        val = (2.0 * math.sqrt(2.0 * math.log(6 * t / delta))
               + 2.0 * math.sqrt(2.0 * math.log(6 * t * d / delta)))
        want = val / math.sqrt(t + 1)
        got = kt_sbcgi(UNIT, t, delta, d, omega=1.0)
        assert got == pytest.approx(want, rel=1e-12)
        assert got == pytest.approx(5.68, abs=5e-3)

    def test_convex_decreasing_and_vanishing(self):
        prev = math.inf
        for t in range(0, 200):
            cur = kt_sbcgi(UNIT, t, 0.1, 4, omega=1.0)
            assert cur < prev
            prev = cur
        assert kt_sbcgi(UNIT, 10 ** 12, 0.1, 4, omega=1.0) < 1e-4

    def test_zero_constant_kills_schedule(self):
        for t in (0, 3, 50):
            assert kt_sbcgi(UNIT, t, 0.1, 2, omega=1.0, abs_const=0.0) == 0.0

    def test_nonconvex_uses_horizon(self):
        a = kt_sbcgi(UNIT, 5, 0.1, 2, omega=2 / 3, horizon=100)
        b = kt_sbcgi(UNIT, 5, 0.1, 2, omega=2 / 3, horizon=10000)
        assert b > a > 0
        seq = [kt_sbcgi(UNIT, t, 0.1, 2, omega=2 / 3, horizon=100)
               for t in range(50)]
        assert all(x > y for x, y in zip(seq, seq[1:]))

    def test_unsupported_omega(self):
        with pytest.raises(ValueError):
            kt_sbcgi(UNIT, 1, 0.1, 2, omega=0.9)

    def test_finite_sum_value_matches_hand_formula(self):
        gamma = math.log(100) / 100
        want = 4.0 * (1 + 1) * math.sqrt(math.log(12 * 100 / 0.1)) * gamma
        got = kt_sbcgf(UNIT, gamma, 0.1, 100)
        assert got == pytest.approx(want, rel=1e-12)
        assert got == pytest.approx(1.13, abs=5e-3)

    def test_finite_sum_linear_in_gamma(self):
        base = kt_sbcgf(UNIT, 1e-3, 0.1, 50)
        assert kt_sbcgf(UNIT, 2e-3, 0.1, 50) == pytest.approx(2 * base)

    def test_finite_sum_quadratic_diameter_dominance(self):
        consts = ProblemConstants(L_f=1, L_g=1, L_l=1e-6, D=10.0)
        doubled = ProblemConstants(L_f=1, L_g=1, L_l=1e-6, D=20.0)
        ratio = kt_sbcgf(doubled, 0.01, 0.1, 50) / kt_sbcgf(consts, 0.01, 0.1, 50)
        assert ratio == pytest.approx(4.0, rel=1e-4)

    def test_schedule_modes(self):
        manual = KtSchedule(mode="manual", kappa=2.0, power=0.5)
        assert manual.for_sbcgi(UNIT, 3, 0.1, 2, 1.0, 10) == pytest.approx(1.0)
        zero = KtSchedule(mode="zero")
        assert zero.for_sbcgf(UNIT, 3, 0.01, 0.1, 10) == 0.0
        with pytest.raises(ValueError):
            KtSchedule(mode="bogus")


class TestFwGap:
    def test_singleton_solution_set(self):
        lmo = lambda c: np.zeros(2)
        assert fw_gap_exact(np.array([1.0, 2.0]), np.array([1.0, 1.0]),
                            lmo) == pytest.approx(3.0)

    def test_nonnegative_inside_solution_set(self):
        verts = np.array([[0.0, 0.0], [1.0, 0.0]])
        lmo = lambda c: verts[int(np.argmin(verts @ c))]
        rng = np.random.default_rng(5)
        for _ in range(50):
            grad = rng.standard_normal(2)
            tau = rng.uniform()
            x = verts[0] + tau * (verts[1] - verts[0])
            assert fw_gap_exact(x, grad, lmo) >= -1e-12

    def test_segment_by_endpoint_enumeration(self):
        # max over the segment of <grad, x - s>: endpoints give 0 and +1
        verts = np.array([[0.0, 0.0], [1.0, 0.0]])
        lmo = lambda c: verts[int(np.argmin(verts @ c))]
        x, grad = np.zeros(2), np.array([-1.0, 0.0])
        want = max(float(grad @ (x - s)) for s in verts)
        got = fw_gap_exact(x, grad, lmo)
        assert got == pytest.approx(want) == pytest.approx(1.0)

    def test_missing_lmo(self):
        with pytest.raises(UnsupportedMetricError):
            fw_gap_exact(np.zeros(2), np.ones(2), None)


class TestOracles:
    def test_finite_sum_component_average(self):
        rng = np.random.default_rng(0)
        A = rng.standard_normal((7, 3))
        b = rng.standard_normal(7)
        oracle = LeastSquaresOracle(A, b)
        x = rng.standard_normal(3)
        vals = [oracle.value_at(x, np.array([i])) for i in range(7)]
        assert np.mean(vals) == pytest.approx(oracle.full_value(x), abs=1e-12)
        grads = np.stack([oracle.grad_at(x, np.array([i])) for i in range(7)])
        np.testing.assert_allclose(grads.mean(axis=0), oracle.full_grad(x),
                                   atol=1e-12)

    def test_batch_estimator_unbiased(self):
        rng = np.random.default_rng(1)
        A = rng.standard_normal((5, 3))
        b = rng.standard_normal(5)
        oracle = LeastSquaresOracle(A, b)
        x = rng.standard_normal(3)
        n_draws = 20000
        vals = [oracle.batch_value(x, rng, 2) for _ in range(n_draws)]
        sigma = np.std(vals)
        assert abs(np.mean(vals) - oracle.full_value(x)) <= 4 * sigma / math.sqrt(n_draws)

    def test_fused_value_and_grad_consistent(self):
        rng = np.random.default_rng(2)
        A = rng.standard_normal((6, 4))
        b = rng.standard_normal(6)
        oracle = LeastSquaresOracle(A, b)
        x = rng.standard_normal(4)
        for batch in (1, 3):
            sample = oracle.draw(rng, batch)
            v, g = oracle.value_and_grad_at(x, sample)
            assert v == pytest.approx(oracle.value_at(x, sample), rel=1e-12)
            np.testing.assert_allclose(g, oracle.grad_at(x, sample), atol=1e-12)

    def test_streaming_zero_noise_exact(self):
        oracle = NoisyOracle(lambda x: float(x @ x), lambda x: 2 * x,
                             dimension=3, sigma_val=0.0, sigma_grad=0.0)
        rng = np.random.default_rng(0)
        x = np.array([1.0, -2.0, 0.5])
        assert oracle.sample_value(x, rng) == pytest.approx(float(x @ x))
        np.testing.assert_allclose(oracle.sample_grad(x, rng), 2 * x)


def _toy_bilevel():
    A = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    b = np.array([0.5, -0.25, 0.25])
    lower = LeastSquaresOracle(A, b)
    upper = LeastSquaresOracle(np.array([[1.0, 1.0]]), np.array([1.0]))
    ball = L1Ball(2.0, 2)
    consts = ProblemConstants(L_f=2, L_g=2, L_l=4, D=4)
    return BilevelProblem(upper=upper, lower=lower, set=ball, constants=consts)


class TestEvaluateMetrics:
    def test_gap_matches_brute_force(self):
        problem = _toy_bilevel()
        refs = ReferenceValues(g_star=0.01, f_star=0.2, tolerance=1e-9,
                               g_x0=1.0)
        x = np.array([0.25, -0.25])
        rec = evaluate_metrics(x, problem, refs)
        direct_g = np.mean([0.5 * (problem.lower.A[i] @ x -
                                   problem.lower.b[i]) ** 2 for i in range(3)])
        assert rec.g_gap == pytest.approx(direct_g - 0.01, abs=1e-12)
        assert rec.f_gap == pytest.approx(
            0.5 * (x.sum() - 1.0) ** 2 - 0.2, abs=1e-12)

    def test_minimizer_has_tiny_gap(self):
        problem = _toy_bilevel()
        lower_opt = np.linalg.lstsq(problem.lower.A, problem.lower.b,
                                    rcond=None)[0]
        g_star = problem.lower.full_value(lower_opt)
        refs = ReferenceValues(g_star=g_star, f_star=0.0, tolerance=1e-9)
        rec = evaluate_metrics(lower_opt, problem, refs)
        assert rec.g_gap <= refs.tolerance

    def test_streaming_needs_budget(self):
        from sbcg.core import StochasticOracle

        class Opaque(StochasticOracle):
            kind = "streaming"
            dimension = 2

            def draw(self, rng, batch=1):
                return rng.standard_normal(batch)

            def value_at(self, x, sample):
                return float(x @ x + np.mean(sample))

            def grad_at(self, x, sample):
                return 2 * x

        oracle = NoisyOracle(lambda x: float(x @ x), lambda x: 2 * x,
                             dimension=2, sigma_val=1.0, sigma_grad=1.0)
        problem = BilevelProblem(upper=oracle, lower=Opaque(),
                                 set=L1Ball(1.0, 2), constants=UNIT)
        refs = ReferenceValues(g_star=0.0, f_star=0.0, tolerance=1.0)
        with pytest.raises(ConfigurationError):
            evaluate_metrics(np.zeros(2), problem, refs)
        rec = evaluate_metrics(np.zeros(2), problem, refs, value_batch=4000,
                               eval_rng=np.random.default_rng(0))
        assert abs(rec.g_gap) < 0.1

    def test_infeasible_point_rejected(self):
        problem = _toy_bilevel()
        refs = ReferenceValues(g_star=0.0, f_star=0.0, tolerance=1.0)
        with pytest.raises(ValueError):
            evaluate_metrics(np.array([5.0, 5.0]), problem, refs)


def test_reference_values_invariant():
    with pytest.raises(ValueError):
        ReferenceValues(g_star=1.0, f_star=0.0, tolerance=1e-6, g_x0=0.5)
    ReferenceValues(g_star=1.0, f_star=0.0, tolerance=1e-6, g_x0=1.5)
