"""Top-level solvers: PDAP, LGCG, LPDAP and NLGCG.

Each solver is a single-threaded loop over DualStates. Every outer
iteration appends one TraceRecord; LPDAP also records its recompute
attempts and NLGCG its inner Newton steps.
"""

import csv
import logging
import math
import time
from dataclasses import dataclass, field, fields
from typing import Callable, List, Optional

import numpy as np

from src.errors import CoefficientStallError, ConfigError, ReferenceNotConvergedError
from src.measures import SparseMeasure, measure_of, minimal_representer
from src.model import DualState, finite_objective_derivs, global_gap, pairing_phi
from src.search import CandidateCache, SearchConfig, exact_max
from src.steps import (
    EXACT, LAZY, PositiveCoefState, accept_newton_descent, accept_newton_progress,
    bound_constant, coefficient_step, drop_step, lgcg_step, local_merge, lsi_step,
    newton_step, refresh,
)

log = logging.getLogger(__name__)

CONVERGED = 'Converged'
NOT_CONVERGED = 'NotConverged'
INTERRUPTED = 'Interrupted'

# Relative accuracy of PDAP's coefficient minimization.
PDAP_PSI_SCALE = 1e-14

TRACE_COLUMNS = ['k', 's', 'time_s', 'J', 'gap_est', 'residual', 'eps',
                 'support_size', 'call_type', 'M']


@dataclass
class SolverOptions:
    """Termination, threshold and inner-solver settings shared by all drivers.

    ``eps_init`` and ``psi_init`` default to J(u_0)/(2M) and max(1, J(u_0)).
    ``m_beta`` is the divisor of the dynamic norm bound M = J(u)/beta and
    defaults to alpha.
    """
    tol: float = 1e-12
    max_outer: int = 10000
    eps_init: Optional[float] = None
    psi_init: Optional[float] = None
    dynamic_M: bool = True
    m_beta: Optional[float] = None
    search: SearchConfig = field(default_factory=SearchConfig)
    coef_max_iters: int = 500
    max_inner: int = 1000
    max_recomputes: int = 60
    monitor: bool = True
    should_stop: Optional[Callable[[], bool]] = None

    def __post_init__(self):
        if not self.tol > 0:
            raise ConfigError(f"tol must be positive, got {self.tol}")
        if self.max_outer < 1 or self.max_inner < 1 or self.coef_max_iters < 1:
            raise ConfigError("iteration limits must be positive")
        if self.max_recomputes < 0:
            raise ConfigError(f"max_recomputes must be nonnegative, got {self.max_recomputes}")
        for name in ('eps_init', 'psi_init', 'm_beta'):
            value = getattr(self, name)
            if value is not None and not value > 0:
                raise ConfigError(f"{name} must be positive, got {value}")

    @classmethod
    def from_config(cls, config, search=None, **overrides):
        """Build from the ``solver`` section of a Config; overrides that are not None win."""
        section = dict(config.get('solver', {}) or {})
        section.update({k: v for k, v in overrides.items() if v is not None})
        known = {f.name for f in fields(cls)} - {'search', 'should_stop'}
        values = {k: v for k, v in section.items() if k in known}
        if search is None:
            search = SearchConfig.from_config(config)
        return cls(search=search, **values)


@dataclass
class TraceRecord:
    k: int
    s: int
    time_s: float
    J: float
    gap_est: float
    eps: float
    support_size: int
    call_type: str
    M: float
    C: float
    residual: float = math.nan


@dataclass
class Trace:
    """History and outcome of one solver run."""
    solver: str
    records: List[TraceRecord] = field(default_factory=list)
    status: str = NOT_CONVERGED
    message: str = ''
    lazy_calls: int = 0
    exact_calls: int = 0
    recomputes: int = 0
    final: Optional[SparseMeasure] = None
    final_J: float = math.nan
    duration: float = 0.0

    @property
    def converged(self):
        return self.status == CONVERGED

    @property
    def iterations(self):
        return max((r.k for r in self.records), default=0)

    def to_csv(self, path):
        with open(path, 'w', newline='') as f:
            writer = csv.writer(f)
            writer.writerow(TRACE_COLUMNS)
            for r in self.records:
                writer.writerow([
                    r.k, r.s, f"{r.time_s:.6f}", repr(r.J), repr(r.gap_est),
                    repr(r.residual), repr(r.eps), r.support_size, r.call_type, repr(r.M),
                ])

    def summary(self):
        final = self.final
        return {
            'solver': self.solver,
            'converged': self.converged,
            'status': self.status,
            'message': self.message,
            'iters': self.iterations,
            'lazy_calls': self.lazy_calls,
            'exact_calls': self.exact_calls,
            'recomputes': self.recomputes,
            'final_support': final.to_json() if final is not None else [],
            'final_J': self.final_J,
            'time_s': self.duration,
        }


class _Stop(Exception):
    """Raised inside a solver loop when a stop was requested."""


class Solver:
    """Shared bookkeeping: norm bound, trace, monitors and interruption."""

    name = None

    def __init__(self, problem, opts=None):
        self.problem = problem
        self.params = problem.params
        self.opts = opts or SolverOptions()
        self.cfg = self.opts.search
        self.cache = CandidateCache(self.cfg.cache_size, problem.dim)
        self.beta = self.opts.m_beta or problem.alpha
        self.trace = Trace(self.name)
        self.M = None
        self.C = None
        self._t0 = None

    def run(self, u0=None):
        """Run from ``u0`` (the zero measure by default) and return the Trace."""
        u0 = SparseMeasure.empty(self.problem.dim) if u0 is None else u0
        self._t0 = time.perf_counter()
        state = DualState(self.problem, u0)
        self._set_bound(state, initial=True)
        log.info("%s: start J=%.6e M=%.4e", self.name, state.J, self.M)
        try:
            if state.J == 0.0:
                self._finish(state, CONVERGED, "initial iterate has zero objective")
            else:
                self._solve(state)
        except CoefficientStallError as e:
            log.error("%s: %s", self.name, e)
            self._finish(self._last_state, NOT_CONVERGED, str(e))
        except _Stop:
            log.warning("%s: interrupted", self.name)
            self._finish(self._last_state, INTERRUPTED, "stop requested")
        self.trace.duration = self._elapsed()
        return self.trace

    def _solve(self, state):
        raise NotImplementedError

    def _elapsed(self):
        return time.perf_counter() - self._t0

    def _set_bound(self, state, initial=False):
        self._last_state = state
        if initial:
            self.M = self.params.M if self.params.M is not None else state.J / self.beta
        elif self.opts.dynamic_M and state.J > 0:
            self.M = state.J / self.beta
        self.M = max(self.M, np.finfo(float).tiny)
        self.C = bound_constant(self.params, self.M)

    def _check_stop(self):
        if self.opts.should_stop is not None and self.opts.should_stop():
            raise _Stop()

    def _record(self, k, s, state, gap_est, eps, call_type):
        record = TraceRecord(
            k=k, s=s, time_s=self._elapsed(), J=state.J, gap_est=gap_est,
            eps=eps, support_size=len(state.u), call_type=call_type,
            M=self.M, C=self.C,
        )
        self.trace.records.append(record)
        return record

    def _count(self, report, eps):
        if report.call_type == LAZY:
            self.trace.lazy_calls += 1
            if self.opts.monitor and report.phi < self.M * eps - 1e-12 * max(1.0, self.M * eps):
                log.warning("%s: lazy direction below threshold (phi=%.3e < M eps=%.3e)",
                            self.name, report.phi, self.M * eps)
        else:
            self.trace.exact_calls += 1

    def _monitor(self, before, after, where):
        if self.opts.monitor and after.J > before.J + 1e-12 * max(1.0, abs(before.J)):
            log.warning("%s: J increased in %s (%.12e -> %.12e)", self.name, where, before.J, after.J)

    def _finish(self, state, status, message):
        self.trace.status = status
        self.trace.message = message
        self.trace.final = state.u
        self.trace.final_J = state.J
        log.info("%s: %s after %d iterations, J=%.12e, support %d (%s)",
                 self.name, status, self.trace.iterations, state.J, len(state.u), message)

    def _give_up(self, state):
        log.warning("%s: max_outer=%d reached", self.name, self.opts.max_outer)
        self._finish(state, NOT_CONVERGED, f"max_outer={self.opts.max_outer} reached")

    def _log_outer(self, record):
        log.info("%s k=%d J=%.12e gap=%.3e eps=%.3e support=%d %s", self.name,
                 record.k, record.J, record.gap_est, record.eps, record.support_size,
                 record.call_type)


class PDAPSolver(Solver):
    """Exact insertion plus coefficient minimization on the active set."""

    name = 'pdap'

    def _solve(self, state):
        psi = PDAP_PSI_SCALE * max(1.0, state.J)
        for k in range(1, self.opts.max_outer + 1):
            self._check_stop()
            self._last_state = state
            u = state.u
            xhat, _ = exact_max(state, u.positions, self.cfg)
            self.trace.exact_calls += 1
            gap = global_gap(state, xhat, self.M)
            self._log_outer(self._record(k, 0, state, gap, math.nan, EXACT))
            if gap <= self.opts.tol:
                self._finish(state, CONVERGED, f"gap {gap:.3e} <= tol")
                return
            w0 = self._insert(state, xhat)
            result = coefficient_step(state, psi, self.M, self.opts.coef_max_iters, w0=w0)
            new_state = DualState(self.problem, result.measure)
            self._monitor(state, new_state, 'coefficient step')
            state = new_state
            self._set_bound(state)
        self._give_up(state)

    def _insert(self, state, xhat):
        u = state.u
        w = PositiveCoefState.from_measure(u)
        if u.positions.shape[0] and np.any(np.all(u.positions == xhat, axis=1)):
            return w
        sign = np.sign(state.p(xhat[None, :])[0]) or 1.0
        return PositiveCoefState(
            np.vstack([w.points, xhat[None, :]]),
            np.append(w.signs, sign),
            np.append(w.coefs, 0.0),
        )


class LGCGSolver(Solver):
    """Plain lazy GCG; the improvement step is the identity."""

    name = 'lgcg'

    def _solve(self, state):
        eps = self.opts.eps_init or state.J / (2.0 * self.M)
        for k in range(1, self.opts.max_outer + 1):
            self._check_stop()
            self._last_state = state
            report = lgcg_step(state, eps, self.C, self.M, self.cache, self.cfg)
            self._count(report, eps)
            if report.eps_out == 0:
                self._record(k, 0, state, 0.0, 0.0, report.call_type)
                self._finish(state, CONVERGED, "zero gap")
                return
            eps = report.eps_out
            new_state = DualState(self.problem, report.measure)
            self._monitor(state, new_state, 'LGCG step')
            state = new_state
            self._set_bound(state)
            gap_est = 2.0 * self.M * eps
            self._log_outer(self._record(k, 0, state, gap_est, eps, report.call_type))
            if gap_est <= self.opts.tol:
                self._finish(state, CONVERGED, f"2M eps {gap_est:.3e} <= tol")
                return
        self._give_up(state)


class LPDAPSolver(Solver):
    """Lazified PDAP: drop, inexact coefficients, local improvers and lazy GCG."""

    name = 'lpdap'

    def _solve(self, state):
        eps = self.opts.eps_init or state.J / (2.0 * self.M)
        psi = self.opts.psi_init or max(1.0, state.J)
        minus = refresh(state, drop_step(state))
        self._monitor(state, minus, 'drop step')
        for k in range(1, self.opts.max_outer + 1):
            self._check_stop()
            s = 0
            while True:
                coef = coefficient_step(minus, psi, self.M, self.opts.coef_max_iters)
                current = refresh(minus, coef.measure)
                self._last_state = current
                self._monitor(minus, current, 'coefficient step')
                improved, improvers = lsi_step(current, self.M, self.cfg)
                self.cache.extend(improvers)
                report = lgcg_step(current, eps, self.C, self.M, self.cache, self.cfg)
                self._count(report, eps)
                if report.eps_out == 0:
                    self._record(k, s, current, 0.0, 0.0, report.call_type)
                    self._finish(current, CONVERGED, "zero gap")
                    return
                phi = pairing_phi(current, report.direction)
                if coef.certificate <= phi / 2.0:
                    break
                if s >= self.opts.max_recomputes:
                    log.warning("%s k=%d: recompute cap %d reached (certificate %.3e > %.3e)",
                                self.name, k, s, coef.certificate, phi / 2.0)
                    break
                psi /= 2.0
                s += 1
                self.trace.recomputes += 1
                self._record(k, s, current, phi, eps, 'Recompute')
                log.debug("%s k=%d: recompute %d, Psi=%.3e", self.name, k, s, psi)
            eps = report.eps_out
            self._log_outer(self._record(k, s, current, phi, eps, report.call_type))
            if phi <= self.opts.tol:
                self._finish(current, CONVERGED, f"phi {phi:.3e} <= tol")
                return
            candidates = [refresh(current, improved), DualState(self.problem, report.measure)]
            plus = min(candidates, key=lambda st: st.J)
            self._monitor(current, plus, 'LSI/LGCG step')
            minus = refresh(plus, drop_step(plus))
            self._monitor(plus, minus, 'drop step')
            self._set_bound(minus)
        self._give_up(current)


class NLGCGSolver(Solver):
    """Lazy GCG with merging and Newton sliding on positions and weights."""

    name = 'nlgcg'

    def _solve(self, state):
        problem = self.problem
        params = self.params
        tol = self.opts.tol
        eps = self.opts.eps_init or state.J / (2.0 * self.M)
        psi = self.opts.psi_init or max(1.0, state.J)
        for k in range(1, self.opts.max_outer + 1):
            self._check_stop()
            self._last_state = state
            M, C = self.M, self.C
            report = lgcg_step(state, eps, C, M, self.cache, self.cfg)
            self._count(report, eps)
            if report.eps_out == 0:
                self._record(k, 0, state, 0.0, 0.0, report.call_type)
                self._finish(state, CONVERGED, "zero gap")
                return
            eps_next = report.eps_out
            gcg = DualState(problem, report.measure)
            self._monitor(state, gcg, 'LGCG step')
            dropped = refresh(gcg, drop_step(gcg))
            coef = refresh(dropped, coefficient_step(dropped, psi, M, self.opts.coef_max_iters).measure)
            self._monitor(dropped, coef, 'coefficient step')
            current = refresh(coef, local_merge(coef))
            eps_inner = eps_next + (current.J - coef.J) / (2.0 * M)
            self._last_state = current
            self._record(k, 0, current, 2.0 * M * eps_inner, eps_inner, report.call_type)
            if eps_inner <= 0 or 2.0 * M * eps_inner <= tol:
                self._finish(current, CONVERGED, f"2M eps {2.0 * M * eps_inner:.3e} <= tol")
                return

            candidates = [coef, current]
            s = 0
            while not current.u.is_empty and s < self.opts.max_inner:
                s += 1
                self._check_stop()
                z = minimal_representer(current.u)
                z_new = newton_step(problem, z)
                grad = finite_objective_derivs(problem, z, order=1)
                grad_sq = float(grad @ grad)
                gcg_s = current
                if problem.domain.contains(z_new.positions).all():
                    newton = DualState(problem, measure_of(z_new))
                else:
                    newton = current
                stop_inner = False
                if not accept_newton_progress(grad_sq, eps_inner, params.m_hi, C, M):
                    inner = lgcg_step(current, eps_inner, C, M, self.cache, self.cfg)
                    self._count(inner, eps_inner)
                    if inner.eps_out == 0:
                        self._record(k, s, current, 0.0, 0.0, inner.call_type)
                        self._finish(current, CONVERGED, "zero gap")
                        return
                    eps_after = inner.eps_out
                    gcg_s = DualState(problem, inner.measure)
                    stop_inner = not accept_newton_progress(grad_sq, eps_after, params.m_hi, C, M)
                else:
                    eps_after = eps_inner
                if stop_inner or not accept_newton_descent(grad, z, z_new, params.m_lo, M, problem):
                    eps_inner = eps_after
                    candidates += [newton, gcg_s]
                    break
                call_type = 'Newton'
                if s % params.S == 0:
                    dropped_s = refresh(newton, drop_step(newton))
                    nxt = refresh(dropped_s, local_merge(dropped_s))
                    eps_after += (nxt.J - dropped_s.J) / (2.0 * M)
                    call_type = 'Merge'
                else:
                    nxt = newton
                eps_inner = eps_after
                self._last_state = nxt
                self._record(k, s, nxt, 2.0 * M * eps_inner, eps_inner, call_type)
                log.debug("%s k=%d s=%d J=%.12e |grad|^2=%.3e", self.name, k, s, nxt.J, grad_sq)
                if eps_inner <= 0 or 2.0 * M * eps_inner <= tol:
                    self._finish(nxt, CONVERGED, f"inner 2M eps {2.0 * M * eps_inner:.3e} <= tol")
                    return
                current = nxt
            else:
                if s:
                    candidates += [newton, gcg_s, current]

            state = self._select(candidates)
            self._monitor(coef, state, 'final selection')
            psi /= 2.0
            eps = eps_next
            self._set_bound(state)
            gap_est = 2.0 * self.M * eps
            self._log_outer(self._record(k, s, state, gap_est, eps, 'Select'))
            if gap_est <= tol:
                self._finish(state, CONVERGED, f"2M eps {gap_est:.3e} <= tol")
                return
        self._give_up(state)

    def _select(self, candidates):
        """Lowest-objective state among the outer step and inner iterates."""
        return min(candidates, key=lambda st: st.J)


SOLVERS = {
    'pdap': PDAPSolver,
    'lgcg': LGCGSolver,
    'lpdap': LPDAPSolver,
    'nlgcg': NLGCGSolver,
}


def make_solver(name, problem, opts=None):
    try:
        cls = SOLVERS[name]
    except KeyError:
        raise ConfigError(f"unknown solver {name!r}, expected one of {sorted(SOLVERS)}") from None
    return cls(problem, opts)


def run_pdap(problem, opts=None, u0=None):
    return PDAPSolver(problem, opts).run(u0)


def run_lgcg(problem, opts=None, u0=None):
    return LGCGSolver(problem, opts).run(u0)


def run_lpdap(problem, opts=None, u0=None):
    return LPDAPSolver(problem, opts).run(u0)


def run_nlgcg(problem, opts=None, u0=None):
    return NLGCGSolver(problem, opts).run(u0)


def estimate_residual(trace, reference):
    """Residuals max(J - J_ref, 0) per record, also stored on the records.

    ``reference`` is either a reference Trace, which must have converged,
    or a reference objective value.
    """
    if isinstance(reference, Trace):
        if not reference.converged:
            raise ReferenceNotConvergedError(
                f"reference {reference.solver} run did not converge: {reference.message}"
            )
        reference_J = reference.final_J
    else:
        reference_J = float(reference)
    residuals = np.array([max(r.J - reference_J, 0.0) for r in trace.records])
    for r, res in zip(trace.records, residuals):
        r.residual = float(res)
    return residuals
