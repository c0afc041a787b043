from types import SimpleNamespace

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from src.measures import FiniteParam, SparseMeasure, total_variation
from src.model import (
    Box, DualState, HyperParams, Kernel, Problem, QuadraticFidelity,
    finite_gap, finite_objective, finite_objective_derivs, objective,
)
from src.search import CandidateCache, SearchConfig, local_ascent
from src.steps import (
    EXACT, LAZY, PositiveCoefState, accept_newton_descent, accept_newton_progress,
    bound_constant, coefficient_step, drop_set, drop_step, lgcg_step, local_merge, lsi,
    lsi_constant, lsi_step, newton_progress_threshold, newton_step, positive_gap,
    solve_positive_coefficients,
)
from tests.problems import make_toy_problem


def kernel_norm_bound(problem, n=20001):
    """sup ||kappa(x)|| over a fine grid, padded for points between nodes."""
    grid = problem.domain.grid(n)
    return 1.01 * float(np.max(np.linalg.norm(problem.kernel.value(grid), axis=1)))


class TestLGCGStep:
    def test_descent_bound_on_random_iterates(self, signal, rng):
        problem, _ = signal
        C_K = kernel_norm_bound(problem)
        cfg = SearchConfig()
        for _ in range(100):
            n = int(rng.integers(0, 4))
            positions = rng.uniform(0.0, 60.0, size=(n, 1))
            weights = rng.uniform(-1.0, 1.0, size=n)
            u = SparseMeasure.from_atoms(positions, weights)
            state = DualState(problem, u)
            M = state.J / problem.alpha
            C = 4.0 * problem.params.L * M ** 2 * C_K ** 2
            eps = 10.0 ** rng.uniform(-4, 1)
            report = lgcg_step(state, eps, C, M, CandidateCache(10, 1), cfg)
            e = report.eps_out
            if M * e <= C:
                bound = -(M * e) ** 2 / (2.0 * C)
            else:
                bound = C / 2.0 - M * e
            change = objective(problem, report.measure) - state.J
            assert change <= bound + 1e-10 * max(1.0, state.J)
            assert report.descent == pytest.approx(-change)
            if report.call_type == LAZY:
                assert e == eps
                assert report.phi >= M * eps - 1e-9 * max(1.0, M)
            else:
                assert e <= eps

    def test_exact_step_reports_gap(self, heat):
        problem, _ = heat
        state = DualState(problem, SparseMeasure.empty(2))
        M = state.J / problem.alpha
        C = bound_constant(problem.params, M)
        report = lgcg_step(state, 1e9, C, M, None, SearchConfig())
        assert report.call_type == EXACT
        assert report.eps_out == pytest.approx(report.phi / (2.0 * M))
        assert report.eta == pytest.approx(min(1.0, report.phi / C))
        assert total_variation(report.direction) == pytest.approx(M)

    def test_rejects_nonpositive_curvature(self, heat):
        state = DualState(heat[0], SparseMeasure.empty(2))
        with pytest.raises(ValueError):
            lgcg_step(state, 1.0, 0.0, 1.0, None, SearchConfig())


class TestDropStep:
    def test_sign_mismatch_is_dropped(self, signal):
        problem, _ = signal
        # the data has +0.7 at 7, so a negative atom there fights the certificate
        state = DualState(problem, SparseMeasure.from_atoms([[7.0]], [-1.0]))
        assert state.p_support[0] > 0
        assert drop_set(state).tolist() == [True]
        assert drop_step(state).is_empty

    def test_drop_set_rules(self):
        problem = SimpleNamespace(alpha=0.1, params=SimpleNamespace(sigma=0.02))
        u = SparseMeasure([[0.0], [1.0], [2.0], [3.0]], [1.0, -1.0, 1.0, 1.0])
        state = SimpleNamespace(problem=problem, u=u, p_support=np.array([0.1, -0.095, 0.085, -0.2]))
        # |p| = alpha with matching sign stays; below alpha - sigma/2 or wrong sign goes
        assert drop_set(state).tolist() == [False, False, True, True]

    def test_never_increases_the_objective(self, signal):
        problem, truth = signal
        state = DualState(problem, truth)
        # p vanishes at the ground truth so every atom is in the drop set
        assert drop_set(state).all()
        assert drop_step(state) is truth

    def test_empty_measure(self, signal):
        u = SparseMeasure.empty(1)
        assert drop_step(DualState(signal[0], u)) is u


class TestCoefficientStep:
    def test_single_atom_soft_threshold(self, signal):
        problem, _ = signal
        x = np.array([[7.0]])
        kappa = problem.kernel.value(x)[0]
        expected = max(kappa @ problem.fidelity.y_dagger - problem.alpha, 0.0) / (kappa @ kappa)
        state = DualState(problem, SparseMeasure.from_atoms(x, [0.3]))
        result = coefficient_step(state, 1e-12, 1.0)
        assert len(result.measure) == 1
        assert_allclose(result.measure.weights[0], expected, rtol=1e-10)
        assert result.certificate <= 1e-11

    def test_infinite_psi_keeps_the_warm_start(self, signal, random_measure):
        problem, _ = signal
        u = random_measure(problem, 3)
        result = coefficient_step(DualState(problem, u), np.inf, 10.0)
        assert_allclose(result.measure.weights, u.weights)
        assert result.iterations == 0

    def test_decreases_objective_and_meets_certificate(self, heat, random_measure):
        problem, _ = heat
        for _ in range(5):
            u = random_measure(problem, 4)
            state = DualState(problem, u)
            M = state.J / problem.alpha
            result = coefficient_step(state, 1e-8, M)
            assert objective(problem, result.measure) <= state.J + 1e-12
            assert result.certificate <= 1e-8 + 1e-12
            # signs are fixed: each remaining atom keeps its sign
            for x, w in zip(result.measure.positions, result.measure.weights):
                j = np.flatnonzero(np.all(u.positions == x, axis=1))[0]
                assert np.sign(w) == np.sign(u.weights[j])

    def test_positive_gap_at_zero_coefficients(self, signal):
        problem, _ = signal
        points = np.array([[3.125], [7.0]])
        w = PositiveCoefState(points, np.array([-1.0, 1.0]), np.zeros(2))
        p = problem.kernel.value(points) @ problem.fidelity.y_dagger
        expected = 2.0 * max(np.max(w.signs * p) - problem.alpha, 0.0)
        assert positive_gap(problem, w, 2.0) == pytest.approx(expected)

    def test_warm_start_with_a_new_point(self, signal):
        problem, truth = signal
        w0 = PositiveCoefState(truth.positions.copy(), np.sign(truth.weights), np.zeros(3))
        w, cert, _ = solve_positive_coefficients(problem, w0, 1e-10, 1.0)
        assert cert <= 1e-10 + 1e-12
        assert_array_equal(np.sign(w.measure().weights), np.sign(truth.weights))

    def test_rejects_nonpositive_psi(self, signal):
        state = DualState(signal[0], SparseMeasure.empty(1))
        with pytest.raises(ValueError):
            coefficient_step(state, 0.0, 1.0)

    def test_certificate_bounds_the_finite_gap(self, toy):
        u = SparseMeasure.from_atoms([[3.2], [3.3], [3.4]], [0.4, 0.5, 0.2])
        state = DualState(toy, u)
        M = state.J / toy.alpha
        Psi = 1e-8
        result = coefficient_step(state, Psi, M)
        plus = DualState(toy, result.measure)
        assert result.certificate <= Psi + 1e-13
        assert finite_gap(plus, result.measure.positions, M) <= result.certificate + 1e-12

    def test_positive_gap_never_exceeds_the_finite_gap(self, toy, random_measure):
        for _ in range(10):
            u = random_measure(toy, 3)
            state = DualState(toy, u)
            M = state.J / toy.alpha
            w = PositiveCoefState.from_measure(u)
            gap_a = finite_gap(state, u.positions, M)
            assert positive_gap(toy, w, M) <= gap_a + 1e-12
            if np.all(np.sign(state.p_support) == np.sign(u.weights)):
                assert positive_gap(toy, w, M) == pytest.approx(gap_a, rel=1e-12, abs=1e-12)

    def test_positive_gap_matches_the_finite_gap_with_consistent_signs(self, toy):
        u = SparseMeasure.from_atoms([[3.2], [3.3], [3.4]], [0.4, 0.5, 0.2])
        state = DualState(toy, u)
        M = state.J / toy.alpha
        result = coefficient_step(state, 1e-8, M)
        plus = DualState(toy, result.measure)
        assert np.all(np.sign(plus.p_support) == np.sign(result.measure.weights))
        w = PositiveCoefState.from_measure(result.measure)
        assert positive_gap(toy, w, M) == pytest.approx(
            finite_gap(plus, result.measure.positions, M), rel=1e-10, abs=1e-12)


class TestLSI:
    @pytest.fixture
    def near_peak(self):
        """Toy problem with a tiny atom just left of a peak of the certificate."""
        problem = make_toy_problem()
        start = DualState(problem, SparseMeasure.empty(1))
        cfg = SearchConfig()
        peak = local_ascent(start, [3.3], cfg)
        u = SparseMeasure.from_atoms(peak[None, :] - 0.02, [1e-8])
        return problem, u, peak, cfg

    def test_nearby_peak_qualifies(self, near_peak):
        problem, u, peak, cfg = near_peak
        state = DualState(problem, u)
        M = state.J / problem.alpha
        improvers = lsi(state, M, cfg)
        assert improvers.shape == (1, 1)
        assert abs(improvers[0, 0] - u.positions[0, 0]) < 2 * problem.params.R
        assert abs(improvers[0, 0] - peak[0]) < 1e-2
        assert abs(state.p(improvers)[0]) > abs(state.p_support[0])

    def test_at_most_one_improver_per_cluster(self, toy):
        u = SparseMeasure.from_atoms([[3.28], [3.31], [8.0]], [0.5, 0.4, 0.1])
        state = DualState(toy, u)
        M = state.J / toy.alpha
        improvers = lsi(state, M, SearchConfig())
        near_source = np.abs(improvers[:, 0] - 3.3) < 0.2
        assert near_source.sum() <= 1

    def test_no_improver_leaves_the_measure_unchanged(self, signal):
        problem, truth = signal
        state = DualState(problem, truth)
        u, improvers = lsi_step(state, 22.0, SearchConfig())
        assert u is truth
        assert improvers.shape[0] == 0

    def test_lsi_step_moves_mass_towards_the_peak(self, toy):
        u = SparseMeasure.from_atoms([[3.27]], [0.5])
        state = DualState(toy, u)
        M = 1.0
        v, improvers = lsi_step(state, M, SearchConfig())
        assert improvers.shape == (1, 1)
        eta = 0.5 / (4.0 * M * toy.params.L * lsi_constant(toy.params, M) ** 2)
        assert len(v) == 2
        moved = v.weights[np.all(v.positions == improvers[0], axis=1)]
        assert moved[0] == pytest.approx(eta * 0.5)
        assert total_variation(v) == pytest.approx(total_variation(u))

    def test_step_size_formula(self):
        params = HyperParams(gamma=2.0, theta=0.2, R=0.05, L=1.5, C_Kp=3.0)
        M = 4.0
        c = lsi_constant(params, M)
        expected = 2 * 3.0 * (2 * 4.0 * np.sqrt(0.05 / 0.2) + 2 * 4.0 * 3.0 * 1.5 / (0.2 * np.sqrt(2.0))
                              + np.sqrt(4.0 / 0.2))
        assert c == pytest.approx(expected)


class TestLocalMerge:
    def test_distant_atoms_are_untouched(self, signal):
        problem, _ = signal
        u = SparseMeasure.from_atoms([[3.0], [7.0]], [1.0, -1.0])
        v = local_merge(DualState(problem, u))
        assert_array_equal(np.sort(v.positions[:, 0]), [3.0, 7.0])

    def test_close_atoms_lump_onto_the_best_certificate(self, signal):
        problem, _ = signal
        u = SparseMeasure.from_atoms([[7.0], [7.05]], [1.0, 1.0])
        state = DualState(problem, u)
        best = u.positions[int(np.argmax(np.abs(state.p_support)))]
        v = local_merge(state)
        assert len(v) == 1
        assert_array_equal(v.positions[0], best)
        assert v.weights[0] == pytest.approx(2.0)

    def test_cancelling_atoms_vanish(self, signal):
        problem, _ = signal
        u = SparseMeasure.from_atoms([[7.0], [7.05]], [1.0, -1.0])
        assert local_merge(DualState(problem, u)).is_empty

    def test_explicit_radius(self, signal):
        problem, _ = signal
        u = SparseMeasure.from_atoms([[7.0], [7.5]], [1.0, 1.0])
        state = DualState(problem, u)
        assert len(local_merge(state)) == 2
        assert len(local_merge(state, R=0.5)) == 1


class FlatKernel(Kernel):
    """Position independent kernel: the Hessian in x vanishes."""

    dim = 1

    def value(self, points):
        return np.ones((np.atleast_2d(points).shape[0], 2))

    def jacobian(self, points):
        return np.zeros((np.atleast_2d(points).shape[0], 1, 2))

    def hessian(self, points):
        return np.zeros((np.atleast_2d(points).shape[0], 1, 1, 2))

    def describe(self):
        return {"type": "flat"}


class TestNewton:
    def test_matches_a_direct_solve(self, heat):
        problem, _ = heat
        z = FiniteParam([[0.3, 0.7], [0.7, 0.5]], [0.9, 0.7])
        grad = finite_objective_derivs(problem, z, order=1)
        hess = finite_objective_derivs(problem, z, order=2)
        expected = z.to_vector() - np.linalg.solve(hess, grad)
        assert_allclose(newton_step(problem, z).to_vector(), expected, rtol=1e-10, atol=1e-12)

    def test_singular_hessian_returns_the_input(self):
        problem = Problem(Box([0.0], [1.0]), FlatKernel(), QuadraticFidelity([1.0, 2.0]), 0.1,
                          HyperParams(sigma=0.01))
        z = FiniteParam([[0.5]], [0.4])
        assert newton_step(problem, z) is z

    def test_local_superlinear_convergence(self, toy):
        z = FiniteParam([[3.29]], [0.95])
        norms = []
        for _ in range(4):
            norms.append(np.linalg.norm(finite_objective_derivs(toy, z, order=1)))
            z = newton_step(toy, z)
        assert norms[1] < norms[0] and norms[2] < norms[1]
        assert norms[3] <= 1e-6 * norms[0]
        assert abs(z.positions[0, 0] - 3.3) < 1e-2

    def test_descent_test(self, toy):
        z = FiniteParam([[3.29]], [0.95])
        grad = finite_objective_derivs(toy, z, order=1)
        z_new = newton_step(toy, z)
        assert accept_newton_descent(grad, z, z_new, 1e-3, 10.0, toy)
        # no movement, no decrease
        assert not accept_newton_descent(grad, z, z, 1e-3, 10.0, toy)
        # weights beyond the norm bound
        assert not accept_newton_descent(grad, z, z_new, 1e-3, 0.5, toy)
        outside = FiniteParam([[11.0]], [0.95])
        assert not accept_newton_descent(grad, z, outside, 1e-3, 10.0, toy)

    def test_descent_decrease_matches_objective(self, toy):
        z = FiniteParam([[3.29]], [0.95])
        z_new = newton_step(toy, z)
        assert finite_objective(toy, z_new) < finite_objective(toy, z)

    def test_progress_threshold_is_continuous(self):
        C, M, m_hi = 4.0, 2.0, 0.1
        eps = C / M
        # one ulp on either side selects each branch of the threshold
        below = newton_progress_threshold(np.nextafter(eps, 0.0), m_hi, C, M)
        above = newton_progress_threshold(np.nextafter(eps, np.inf), m_hi, C, M)
        assert M * np.nextafter(eps, np.inf) > C
        assert below == pytest.approx(above, rel=1e-12)
        assert newton_progress_threshold(eps, m_hi, C, M) == pytest.approx(C / (2 * m_hi))

    def test_progress_test(self):
        C, M, m_hi = 4.0, 2.0, 0.1
        threshold = newton_progress_threshold(0.5, m_hi, C, M)
        assert threshold == pytest.approx(1.0 / (2 * C * m_hi))
        assert accept_newton_progress(threshold, 0.5, m_hi, C, M)
        assert not accept_newton_progress(threshold * 0.99, 0.5, m_hi, C, M)
        assert accept_newton_progress(0.0, 0.0, m_hi, C, M)
        with pytest.raises(ValueError):
            accept_newton_progress(1.0, -1.0, m_hi, C, M)

    def test_bound_constant(self):
        params = HyperParams(L=2.0, C_K=3.0)
        assert bound_constant(params, 5.0) == pytest.approx(4 * 2.0 * 25.0 * 9.0)
