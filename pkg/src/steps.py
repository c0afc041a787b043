"""Single-step primitives shared by the drivers.

Every function here is a pure function of its inputs: a DualState (which
caches Ku and p_u for the current iterate) plus scalar parameters. None of
them mutate the state or the measure they receive.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg

from src.errors import CoefficientStallError
from src.measures import (
    FiniteParam, SparseMeasure, ball_mass, convex_combine, in_ball,
    restrict_mask,
)
from src.model import (
    DualState, finite_gap, finite_objective, finite_objective_derivs,
    objective, pairing_phi,
)
from src.search import ExactResult, ascent_paths, lazy_search

log = logging.getLogger(__name__)

# Hessians with a larger condition number are treated as singular.
NEWTON_COND_LIMIT = 1e14

LAZY = 'Lazy'
EXACT = 'Exact'


@dataclass
class StepReport:
    """Output of one LGCG step."""
    measure: SparseMeasure
    direction: SparseMeasure
    eps_out: float
    call_type: str
    descent: float
    phi: float
    eta: float
    x: Optional[np.ndarray] = None


def lgcg_step(state, eps, C, M, cache, cfg):
    """Lazy generalized conditional gradient step from ``state.u``.

    A lazy hit keeps the threshold and uses eta = min(1, M eps / C). An
    exact call sets eps_out = Phi(u) / (2M) and eta = min(1, Phi(u) / C).

    Args:
        state: DualState of the current iterate
        eps: Lazy threshold, positive
        C: Curvature constant 4 L M^2 C_K^2
        M: Norm bound of the directions
        cache: CandidateCache updated with accepted insertion points
        cfg: SearchConfig

    Returns:
        StepReport
    """
    if C <= 0:
        raise ValueError(f"C must be positive, got {C}")
    u = state.u
    outcome = lazy_search(state, eps, M, u.positions, cache, cfg)
    if isinstance(outcome, ExactResult):
        gap = outcome.gap
        eta = min(1.0, gap / C)
        eps_out = gap / (2.0 * M)
        call_type = EXACT
        x = outcome.xhat
        phi = gap
    else:
        eta = min(1.0, M * eps / C)
        eps_out = eps
        call_type = LAZY
        x = outcome.x
        phi = pairing_phi(state, outcome.direction)
    direction = outcome.direction
    u_plus = convex_combine(u, direction, eta) if eta > 0 else u
    descent = state.J - objective(state.problem, u_plus)
    log.debug("%s step: eta=%.3e eps_out=%.3e descent=%.3e", call_type, eta, eps_out, descent)
    return StepReport(
        measure=u_plus, direction=direction, eps_out=eps_out,
        call_type=call_type, descent=descent, phi=phi, eta=eta, x=x,
    )


def drop_set(state):
    """Mask of support atoms with a sign mismatch or a small certificate."""
    problem = state.problem
    p = state.p_support
    w = state.u.weights
    threshold = problem.alpha - problem.params.sigma / 2.0
    return (np.sign(p) != np.sign(w)) | (np.abs(p) <= threshold)


def drop_step(state):
    """Remove the drop set if that does not increase J."""
    u = state.u
    if u.is_empty:
        return u
    drop = drop_set(state)
    if not drop.any():
        return u
    u_drop = restrict_mask(u, ~drop)
    if objective(state.problem, u_drop) <= state.J:
        log.debug("dropped %d of %d atoms", int(drop.sum()), len(u))
        return u_drop
    return u


@dataclass
class PositiveCoefState:
    """Nonnegative coefficients c_j on fixed points with fixed signs s_j."""
    points: np.ndarray
    signs: np.ndarray
    coefs: np.ndarray

    @classmethod
    def from_measure(cls, u):
        return cls(np.array(u.positions), np.sign(u.weights), np.abs(u.weights))

    def measure(self):
        """v^u_w = sum_j s_j c_j delta_{x_j}, pruned."""
        return SparseMeasure.from_atoms(self.points, self.signs * self.coefs)

    def with_coefs(self, coefs):
        return PositiveCoefState(self.points, self.signs, coefs)


class _SignedProblem:
    """min_{c >= 0} F(B c) + alpha sum(c) with B = [s_j kappa(x_j)]."""

    def __init__(self, problem, w):
        self.problem = problem
        self.fidelity = problem.fidelity
        self.alpha = problem.alpha
        self.B = (problem.kernel.value(w.points) * w.signs[:, None]).T

    def value(self, c):
        return self.fidelity.value(self.B @ c) + self.alpha * float(np.sum(c))

    def gradient(self, c):
        return self.B.T @ self.fidelity.gradient(self.B @ c) + self.alpha

    def hessian(self, c):
        return self.B.T @ self.fidelity.hessian(self.B @ c) @ self.B

    def certificate(self, c, M):
        p = -(self.B.T @ self.fidelity.gradient(self.B @ c))
        gap = M * max(float(np.max(p)) - self.alpha, 0.0) + float(c @ (self.alpha - p))
        return max(gap, 0.0)


def positive_gap(problem, w, M):
    """Phi^u(w) = M (max_j p^u_w(x_j) - alpha)_+ + alpha ||w|| - <p^u_w, w>."""
    if len(w.coefs) == 0:
        return 0.0
    return _SignedProblem(problem, w).certificate(w.coefs, M)


def _free_set_direction(H, g, c, active):
    d = np.zeros_like(c)
    d[active] = -c[active]
    free = ~active
    if free.any():
        rhs = -(g[free] + H[np.ix_(free, active)] @ d[active])
        H_ff = H[np.ix_(free, free)]
        try:
            d[free] = linalg.cho_solve(linalg.cho_factor(H_ff), rhs)
        except linalg.LinAlgError:
            d[free] = np.linalg.lstsq(H_ff, rhs, rcond=None)[0]
    return d


def _projected_search(sub, c, f, g, d, max_halvings=30):
    t = 1.0
    for _ in range(max_halvings):
        c_new = np.maximum(c + t * d, 0.0)
        f_new = sub.value(c_new)
        if f_new <= f + 1e-4 * min(float(g @ (c_new - c)), 0.0):
            return c_new, f_new
        t *= 0.5
    return None, None


def solve_positive_coefficients(problem, w0, Psi, M, max_iters=500):
    """Active-set semismooth Newton on the natural residual min(c, grad).

    Iterates until the certificate drops to ``Psi``. Each iteration tries
    the Newton direction on the free set with a projected Armijo search and
    falls back to a projected gradient step when that search fails. When
    neither makes progress the iterate is accepted if its certificate is
    within rounding of ``Psi``.

    Returns:
        (PositiveCoefState, certificate, iterations)

    Raises:
        CoefficientStallError: no certificate after ``max_iters`` iterations
    """
    if len(w0.coefs) == 0:
        return w0, 0.0, 0
    sub = _SignedProblem(problem, w0)
    c = np.maximum(np.asarray(w0.coefs, dtype=float), 0.0)
    f = sub.value(c)
    cert = sub.certificate(c, M)
    slack = 64.0 * np.finfo(float).eps * max(1.0, abs(f), M)
    for it in range(max_iters):
        if cert <= Psi:
            return w0.with_coefs(c), cert, it
        g = sub.gradient(c)
        H = sub.hessian(c)
        active = c - g <= 0
        d = _free_set_direction(H, g, c, active)
        c_new, f_new = _projected_search(sub, c, f, g, d)
        if c_new is None:
            lipschitz = float(np.linalg.norm(H, 2)) or 1.0
            c_new = np.maximum(c - g / lipschitz, 0.0)
            f_new = sub.value(c_new)
            if not f_new < f:
                if cert <= Psi + slack:
                    return w0.with_coefs(c), cert, it
                raise CoefficientStallError(
                    f"coefficient solver stalled at certificate {cert:.3e} > {Psi:.3e}",
                    certificate=cert, iterations=it,
                )
            log.debug("coefficient solver: projected gradient fallback at iteration %d", it)
        c, f = c_new, f_new
        cert = sub.certificate(c, M)
    if cert <= Psi + slack:
        return w0.with_coefs(c), cert, max_iters
    raise CoefficientStallError(
        f"coefficient solver reached {max_iters} iterations at certificate {cert:.3e} > {Psi:.3e}",
        certificate=cert, iterations=max_iters,
    )


@dataclass
class CoefficientResult:
    measure: SparseMeasure
    w: PositiveCoefState
    certificate: float
    iterations: int = 0


def coefficient_step(state, Psi, M, max_iters=500, w0=None):
    """Sign-fixed coefficient update on the support of ``state.u``.

    ``w0`` overrides the warm start |u|; the drivers use it to add points
    with prescribed signs. Psi = inf accepts the warm start as is.
    """
    if Psi <= 0:
        raise ValueError(f"Psi must be positive, got {Psi}")
    if w0 is None:
        w0 = PositiveCoefState.from_measure(state.u)
    if np.isinf(Psi):
        return CoefficientResult(w0.measure(), w0, positive_gap(state.problem, w0, M))
    w, cert, iterations = solve_positive_coefficients(state.problem, w0, Psi, M, max_iters)
    return CoefficientResult(w.measure(), w, cert, iterations)


def _lsi_targets(state, M, cfg):
    """Improver points with their scores |p(x_LSI)| - max_{A cap B_2R(x)} |p|."""
    problem = state.problem
    u = state.u
    dim = problem.dim
    if u.is_empty:
        return np.zeros((0, dim)), np.zeros(0)
    support = u.positions
    p_abs = np.abs(state.p_support)
    two_r = 2.0 * problem.params.R
    level = problem.alpha - problem.params.sigma / 2.0
    gap_a = finite_gap(state, support, M)

    remaining = np.ones(len(u), dtype=bool)
    points, scores = [], []
    while remaining.any():
        idx = np.flatnonzero(remaining)
        j = idx[int(np.argmax(p_abs[idx]))]
        x = support[j]
        near = in_ball(support, x, two_r)
        local_max = float(np.max(p_abs[near]))
        path = ascent_paths(state, x[None, :], cfg)[:, 0, :]
        pv = np.abs(state.p(path))
        gn = np.linalg.norm(state.grad_p(path), axis=1)
        inside = np.linalg.norm(path - x, axis=1) < two_r
        ok = inside & (pv > level) & (pv - local_max >= two_r * gn) & (gn <= gap_a)
        if ok.any():
            t = int(np.flatnonzero(ok)[0])
            points.append(path[t])
            scores.append(pv[t] - local_max)
        remaining &= ~near
    if not points:
        return np.zeros((0, dim)), np.zeros(0)
    return np.array(points), np.array(scores)


def lsi(state, M, cfg):
    """Local support improvers of ``state.u``, at most one per 2R-cluster."""
    return _lsi_targets(state, M, cfg)[0]


def lsi_constant(params, M):
    """C~ = 2 C_K' (2M sqrt(R/theta) + 2M C_K' L / (theta sqrt(gamma)) + sqrt(M/theta))."""
    return 2.0 * params.C_Kp * (
        2.0 * M * np.sqrt(params.R / params.theta)
        + 2.0 * M * params.C_Kp * params.L / (params.theta * np.sqrt(params.gamma))
        + np.sqrt(M / params.theta)
    )


def lsi_step(state, M, cfg):
    """Move the mass of each 2R-cluster onto its improver.

    Returns:
        (new measure, improver points)
    """
    u = state.u
    problem = state.problem
    params = problem.params
    improvers, scores = _lsi_targets(state, M, cfg)
    if improvers.shape[0] == 0:
        return u, improvers
    two_r = 2.0 * params.R
    masses = np.array([ball_mass(u, b, two_r) for b in improvers])
    j = int(np.argmax(scores))
    mu = abs(masses[j])
    c_tilde = lsi_constant(params, M)
    eta = min(1.0, mu / (4.0 * M * params.L * c_tilde ** 2))
    if eta <= 0:
        return u, improvers
    target = SparseMeasure.from_atoms(improvers, masses)
    return convex_combine(u, target, eta), improvers


def local_merge(state, R=None):
    """Lump the mass of each 2R-ball onto its best certificate point."""
    u = state.u
    if u.is_empty:
        return u
    R = state.problem.params.R if R is None else R
    two_r = 2.0 * R
    p_abs = np.abs(state.p_support)
    remaining = np.ones(len(u), dtype=bool)
    positions, weights = [], []
    while remaining.any():
        idx = np.flatnonzero(remaining)
        j = idx[int(np.argmax(p_abs[idx]))]
        x = u.positions[j]
        positions.append(x)
        weights.append(ball_mass(u, x, two_r))
        remaining &= ~in_ball(u.positions, x, two_r)
    return SparseMeasure.from_atoms(np.array(positions), np.array(weights))


def newton_step(problem, z):
    """z - H^{-1} grad J_N(z), or z itself when the Hessian is singular."""
    grad = finite_objective_derivs(problem, z, order=1)
    hess = finite_objective_derivs(problem, z, order=2)
    if not (np.all(np.isfinite(grad)) and np.all(np.isfinite(hess))):
        return z
    cond = np.linalg.cond(hess)
    if not np.isfinite(cond) or cond > NEWTON_COND_LIMIT:
        log.debug("Newton: singular Hessian (cond=%.3e)", cond)
        return z
    try:
        step = linalg.lu_solve(linalg.lu_factor(hess, check_finite=False), grad)
    except (linalg.LinAlgError, ValueError):
        return z
    return FiniteParam.from_vector(z.to_vector() - step, z.n_atoms, z.dim)


def accept_newton_descent(grad, z, z_plus, m_lo, M, problem):
    """Box, norm and sufficient decrease tests for a Newton iterate."""
    if not np.all(problem.domain.contains(z_plus.positions)):
        return False
    if float(np.sum(np.abs(z_plus.weights))) > M:
        return False
    decrease = finite_objective(problem, z_plus) - finite_objective(problem, z)
    return decrease <= -(m_lo / 8.0) * float(grad @ grad)


def newton_progress_threshold(eps, m_hi, C, M):
    if M * eps <= C:
        return (M * eps) ** 2 / (2.0 * C * m_hi)
    return (2.0 * M * eps - C) / (2.0 * m_hi)


def accept_newton_progress(grad_norm_sq, eps, m_hi, C, M):
    """True iff |grad J_N|^2 is large enough relative to the lazy threshold."""
    if eps < 0:
        raise ValueError(f"eps must be nonnegative, got {eps}")
    return grad_norm_sq >= newton_progress_threshold(eps, m_hi, C, M)


def bound_constant(params, M):
    """C = 4 L M^2 C_K^2."""
    return 4.0 * params.L * M ** 2 * params.C_K ** 2


def refresh(state, u):
    """DualState of ``u``, reusing ``state`` when the measure is unchanged."""
    if u is state.u:
        return state
    return DualState(state.problem, u)
