"""Problem definition, forward operator, dual variable and gap functionals.

The problem is min_u F(Ku) + alpha ||u||_M over sparse measures on a box,
with observations in R^m. Kernels are evaluated in batches: every kernel
method takes an (n, d) array of points and returns one row per point.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, fields

import numpy as np

from src.errors import ConfigError, DegenerateParameterError, DomainError, EmptyMeasureError
from src.measures import SparseMeasure, total_variation

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Box:
    """Axis-aligned box [lo, hi] in R^d."""
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float)).copy()
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float)).copy()
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ConfigError(f"box bounds must be matching vectors, got {lo} and {hi}")
        if np.any(lo >= hi):
            raise ConfigError(f"degenerate box: lo={lo}, hi={hi}")
        lo.flags.writeable = False
        hi.flags.writeable = False
        object.__setattr__(self, 'lo', lo)
        object.__setattr__(self, 'hi', hi)

    @property
    def dim(self):
        return self.lo.shape[0]

    @property
    def widths(self):
        return self.hi - self.lo

    def contains(self, points):
        """Mask of points inside the closed box."""
        points = np.atleast_2d(points)
        return np.all((points >= self.lo) & (points <= self.hi), axis=1)

    def clip(self, points):
        return np.clip(points, self.lo, self.hi)

    def grid(self, n_per_dim):
        """Equally spaced nodes, ``n_per_dim`` per axis, endpoints included."""
        axes = [np.linspace(l, h, n_per_dim) for l, h in zip(self.lo, self.hi)]
        mesh = np.meshgrid(*axes, indexing='ij')
        return np.stack([m.reshape(-1) for m in mesh], axis=1)

    def check(self, points):
        points = np.atleast_2d(points)
        if points.size and not np.all(self.contains(points)):
            outside = points[~self.contains(points)][0]
            raise DomainError(f"point {outside} outside the box [{self.lo}, {self.hi}]")


class Kernel(ABC):
    """Kernel kappa: box -> R^m with first and second derivatives."""

    dim = None

    @abstractmethod
    def value(self, points):
        """(n, d) points -> (n, m) values."""

    @abstractmethod
    def jacobian(self, points):
        """(n, d) points -> (n, d, m) derivatives."""

    @abstractmethod
    def hessian(self, points):
        """(n, d) points -> (n, d, d, m) second derivatives."""

    @abstractmethod
    def describe(self):
        """JSON-ready description used for hashing and configs."""


class HeatKernel(Kernel):
    """Free-space heat kernel observed at fixed sensors after time t.

    kappa_i(x) = (4 pi t)^(-d/2) exp(-|x - x_i|^2 / (4t)); in two dimensions
    the amplitude is 1/(4 t pi).
    """

    def __init__(self, sensors, t):
        self.sensors = np.atleast_2d(np.asarray(sensors, dtype=float))
        if t <= 0:
            raise ConfigError(f"heat kernel time must be positive, got {t}")
        self.t = float(t)
        self.dim = self.sensors.shape[1]
        self.amplitude = (4.0 * np.pi * self.t) ** (-self.dim / 2.0)

    def _diff_and_value(self, points):
        diff = points[:, None, :] - self.sensors[None, :, :]
        sq = np.sum(diff ** 2, axis=2)
        return diff, self.amplitude * np.exp(-sq / (4.0 * self.t))

    def value(self, points):
        return self._diff_and_value(np.atleast_2d(points))[1]

    def jacobian(self, points):
        diff, val = self._diff_and_value(np.atleast_2d(points))
        # (n, m, d) -> (n, d, m)
        return np.transpose(-diff / (2.0 * self.t) * val[:, :, None], (0, 2, 1))

    def hessian(self, points):
        diff, val = self._diff_and_value(np.atleast_2d(points))
        outer = diff[:, :, :, None] * diff[:, :, None, :] / (4.0 * self.t ** 2)
        eye = np.eye(self.dim)[None, None] / (2.0 * self.t)
        hess = (outer - eye) * val[:, :, None, None]
        return np.transpose(hess, (0, 2, 3, 1))

    def describe(self):
        return {"type": "heat", "t": self.t, "sensors": self.sensors.tolist()}


class SineKernel(Kernel):
    """One-dimensional sine kernel kappa_i(x) = sin(2 pi t_i x)."""

    dim = 1

    def __init__(self, times):
        self.times = np.asarray(times, dtype=float).reshape(-1)
        self.freq = 2.0 * np.pi * self.times

    def _phase(self, points):
        return np.atleast_2d(points)[:, :1] * self.freq[None, :]

    def value(self, points):
        return np.sin(self._phase(points))

    def jacobian(self, points):
        return (self.freq * np.cos(self._phase(points)))[:, None, :]

    def hessian(self, points):
        return (-(self.freq ** 2) * np.sin(self._phase(points)))[:, None, None, :]

    def describe(self):
        return {"type": "sine", "times": self.times.tolist()}


class Fidelity(ABC):
    """Smooth, strictly convex, nonnegative data term F: R^m -> R."""

    @abstractmethod
    def value(self, y):
        pass

    @abstractmethod
    def gradient(self, y):
        pass

    @abstractmethod
    def hessian(self, y):
        pass

    @abstractmethod
    def describe(self):
        pass


class QuadraticFidelity(Fidelity):
    """F(y) = 1/2 |y - y_dagger|^2."""

    def __init__(self, y_dagger):
        self.y_dagger = np.asarray(y_dagger, dtype=float).reshape(-1)

    def value(self, y):
        r = y - self.y_dagger
        return 0.5 * float(r @ r)

    def gradient(self, y):
        return y - self.y_dagger

    def hessian(self, y):
        return np.eye(self.y_dagger.shape[0])

    def describe(self):
        return {"type": "quadratic", "y_dagger": self.y_dagger.tolist()}


@dataclass(frozen=True)
class HyperParams:
    """Method constants (gamma, theta, R, sigma, L, C_K, C_K') and Newton bounds.

    ``M`` is an optional starting bound on the norm of iterates; when it is
    None the drivers use J(u_0)/beta.
    """
    gamma: float = 1.0
    theta: float = 0.1
    R: float = 0.01
    sigma: float = 0.002
    L: float = 1.0
    C_K: float = 1.0
    C_Kp: float = 1.0
    m_lo: float = 0.001
    m_hi: float = 0.1
    S: int = 5
    M: float = None

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == 'M' and value is None:
                continue
            if value is None or value <= 0:
                raise ConfigError(f"hyperparameter {f.name} must be positive, got {value}")
        if self.m_lo > self.m_hi:
            raise ConfigError(f"m_lo={self.m_lo} exceeds m_hi={self.m_hi}")

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown hyperparameters: {sorted(unknown)}")
        values = dict(data)
        if 'S' in values:
            values['S'] = int(values['S'])
        return cls(**values)

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True, eq=False)
class Problem:
    """min_u F(Ku) + alpha ||u||_M over sparse measures on ``domain``."""
    domain: Box
    kernel: Kernel
    fidelity: Fidelity
    alpha: float
    params: HyperParams = field(default_factory=HyperParams)
    name: str = "custom"

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if self.params.sigma >= self.alpha:
            raise ConfigError(
                f"sigma={self.params.sigma} must be smaller than alpha={self.alpha}"
            )
        if self.kernel.dim is not None and self.kernel.dim != self.domain.dim:
            raise ConfigError(
                f"kernel dimension {self.kernel.dim} does not match box dimension {self.domain.dim}"
            )

    @property
    def dim(self):
        return self.domain.dim

    def describe(self):
        return {
            "domain": {"lo": self.domain.lo.tolist(), "hi": self.domain.hi.tolist()},
            "kernel": self.kernel.describe(),
            "fidelity": self.fidelity.describe(),
            "alpha": self.alpha,
            "params": self.params.to_dict(),
        }


def forward(problem, u):
    """Ku = sum_j w_j kappa(x_j); zero vector for the empty measure."""
    if u.is_empty:
        return np.zeros(problem.kernel.value(problem.domain.lo[None, :]).shape[1])
    problem.domain.check(u.positions)
    return u.weights @ problem.kernel.value(u.positions)


def objective(problem, u):
    """J(u) = F(Ku) + alpha ||u||_M."""
    return problem.fidelity.value(forward(problem, u)) + problem.alpha * total_variation(u)


class DualState:
    """Cached forward image and dual variable p_u = -K_* grad F(Ku) of one iterate.

    Read-only after construction, so one state may be shared by concurrent
    evaluations.
    """

    def __init__(self, problem, u):
        self.problem = problem
        self.u = u
        self.y = forward(problem, u)
        self.q = problem.fidelity.gradient(self.y)
        self.J = problem.fidelity.value(self.y) + problem.alpha * total_variation(u)
        self.tv = total_variation(u)
        self.p_support = self.p(u.positions) if not u.is_empty else np.zeros(0)
        # <p_u, u>
        self.pairing = float(self.p_support @ u.weights)

    def p(self, points):
        """p_u at an (n, d) batch of points."""
        points = np.atleast_2d(points)
        if points.shape[0] == 0:
            return np.zeros(0)
        return -(self.problem.kernel.value(points) @ self.q)

    def grad_p(self, points):
        return -(self.problem.kernel.jacobian(np.atleast_2d(points)) @ self.q)

    def hess_p(self, points):
        return -(self.problem.kernel.hessian(np.atleast_2d(points)) @ self.q)

    @property
    def base_gap(self):
        """alpha ||u||_M - <p_u, u>, the value of phi(u, 0)."""
        return self.problem.alpha * self.tv - self.pairing

    def phi_at(self, points, M):
        """phi(u, M sign(p_u(x)) delta_x) for a batch of points x."""
        return M * (np.abs(self.p(points)) - self.problem.alpha) + self.base_gap


def dual(state, x, order=0):
    """p_u(x), its gradient (d,) or its Hessian (d, d) at a single point."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    state.problem.domain.check(x)
    if order == 0:
        return float(state.p(x)[0])
    if order == 1:
        return state.grad_p(x)[0]
    if order == 2:
        return state.hess_p(x)[0]
    raise ValueError(f"order must be 0, 1 or 2, got {order}")


def pairing_phi(state, v):
    """phi(u, v) = <p_u, v - u> + alpha ||u||_M - alpha ||v||_M for the state's u."""
    alpha = state.problem.alpha
    pv = float(state.p(v.positions) @ v.weights) if not v.is_empty else 0.0
    return pv - state.pairing + alpha * state.tv - alpha * total_variation(v)


def finite_gap(state, support, M):
    """Phi_A(u) = M (max_A |p_u| - alpha)_+ + alpha ||u||_M - <p_u, u>.

    ``support`` must contain the support of u.
    """
    support = np.asarray(support, dtype=float)
    peak = 0.0
    if support.size:
        peak = float(np.max(np.abs(state.p(support.reshape(-1, state.problem.dim)))))
    gap = M * max(peak - state.problem.alpha, 0.0) + state.base_gap
    return max(gap, 0.0)


def global_gap(state, xhat, M):
    """Phi(u) evaluated at a global maximizer ``xhat`` of |p_u|."""
    peak = abs(float(state.p(np.atleast_2d(xhat))[0]))
    gap = M * max(peak - state.problem.alpha, 0.0) + state.base_gap
    return max(gap, 0.0)


def finite_objective_derivs(problem, z, order=0):
    """J_N(z) = F(K U(z)) + alpha |lambda|_1 and its derivatives in z.

    order 0 returns the value, order 1 the gradient in the
    ``FiniteParam.to_vector`` layout and order 2 the symmetric Hessian.
    """
    x, lam = z.positions, z.weights
    n, d = x.shape
    if n:
        kappa = problem.kernel.value(x)
        y = lam @ kappa
    else:
        y = forward(problem, SparseMeasure.empty(d))
    value = problem.fidelity.value(y) + problem.alpha * float(np.sum(np.abs(lam)))
    if order == 0:
        return value
    if n == 0:
        raise EmptyMeasureError("J_N has no derivatives without atoms")
    if np.any(lam == 0):
        raise DegenerateParameterError("J_N is not differentiable at a zero weight")
    q = problem.fidelity.gradient(y)
    jac = problem.kernel.jacobian(x)
    # Dy: derivative of y with respect to z, shape (m, n*d + n)
    dy_dx = (lam[:, None, None] * jac)              # (n, d, m)
    dy = np.concatenate([dy_dx.reshape(n * d, -1), kappa], axis=0).T
    grad = dy.T @ q
    grad[n * d:] += problem.alpha * np.sign(lam)
    if order == 1:
        return grad
    if order != 2:
        raise ValueError(f"order must be 0, 1 or 2, got {order}")
    hess_F = problem.fidelity.hessian(y)
    hess = dy.T @ hess_F @ dy
    kh = problem.kernel.hessian(x) @ q              # (n, d, d)
    jq = jac @ q                                    # (n, d)
    for j in range(n):
        xs = slice(j * d, (j + 1) * d)
        hess[xs, xs] += lam[j] * kh[j]
        hess[xs, n * d + j] += jq[j]
        hess[n * d + j, xs] += jq[j]
    return 0.5 * (hess + hess.T)


def finite_objective(problem, z):
    return finite_objective_derivs(problem, z, order=0)

