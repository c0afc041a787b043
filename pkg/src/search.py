"""Maximization of |p_u|: local Newton ascent, multistart and the lazy oracle.

All ascents run in batches of starting points. Results never depend on the
batch size apart from where a lazy search stops: starts are processed in
index order and the lowest index wins every tie.
"""

import logging
from collections import deque
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from src.errors import ConfigError
from src.measures import SparseMeasure

log = logging.getLogger(__name__)


# Grid nodes per axis when none is configured; one-dimensional boxes get a
# finer grid since the node count does not multiply.
DEFAULT_GRID_PER_DIM = {1: 240}
FALLBACK_GRID_PER_DIM = 30


@dataclass(frozen=True)
class SearchConfig:
    """Multistart settings."""
    grid_per_dim: Optional[int] = None
    max_local_iters: int = 5
    ascent_tol: float = 1e-10
    cache_size: int = 50
    max_halvings: int = 10
    batch_size: int = 64

    def __post_init__(self):
        if self.grid_per_dim is not None and self.grid_per_dim < 2:
            raise ConfigError(f"grid_per_dim must be at least 2, got {self.grid_per_dim}")
        if self.max_local_iters < 1 or self.batch_size < 1:
            raise ConfigError("max_local_iters and batch_size must be positive")
        if self.cache_size < 0:
            raise ConfigError(f"cache_size must be nonnegative, got {self.cache_size}")

    def grid_size(self, dim):
        if self.grid_per_dim is not None:
            return self.grid_per_dim
        return DEFAULT_GRID_PER_DIM.get(dim, FALLBACK_GRID_PER_DIM)

    @classmethod
    def from_config(cls, config, **overrides):
        """Build from the ``search`` section of a Config, CLI overrides win."""
        section = dict(config.get('search', {}) or {})
        section.update({k: v for k, v in overrides.items() if v is not None})
        known = cls.__dataclass_fields__
        return cls(**{k: v for k, v in section.items() if k in known})


@dataclass
class LazyHit:
    """A lazy direction: phi(u, direction) >= M eps."""
    direction: SparseMeasure
    x: Optional[np.ndarray]
    phi: float
    source: str


@dataclass
class ExactResult:
    """Outcome of a full sweep without a lazy direction."""
    xhat: np.ndarray
    p_abs: float
    gap: float
    direction: SparseMeasure


LazyOutcome = Union[LazyHit, ExactResult]


class CandidateCache:
    """Bounded FIFO of points accepted as insertion points."""

    def __init__(self, size, dim):
        self.dim = dim
        self._points = deque(maxlen=max(size, 0) or None) if size else None

    def add(self, x):
        if self._points is None or x is None:
            return
        x = np.asarray(x, dtype=float).reshape(self.dim)
        for y in self._points:
            if np.array_equal(x, y):
                return
        self._points.append(x.copy())

    def extend(self, points):
        for x in np.asarray(points, dtype=float).reshape(-1, self.dim):
            self.add(x)

    def points(self):
        if not self._points:
            return np.zeros((0, self.dim))
        return np.array(self._points)

    def __len__(self):
        return len(self._points) if self._points else 0


def grid_spacing(domain, cfg):
    """Smallest grid cell width of the multistart grid."""
    return float(np.min(domain.widths) / (cfg.grid_size(domain.dim) - 1))


def ascent_paths(state, starts, cfg):
    """Newton ascent on s * p_u from each start, s = sign(p_u(start)).

    Returns an array of shape (max_local_iters + 1, n, d) holding every
    iterate; rows that converged or stalled repeat their last point.
    The Newton step is used where s * Hessian is negative definite, a
    backtracked gradient step otherwise. All iterates are clipped into
    the box.
    """
    domain = state.problem.domain
    X = domain.clip(np.atleast_2d(np.asarray(starts, dtype=float)))
    n, d = X.shape
    path = np.empty((cfg.max_local_iters + 1, n, d))
    path[0] = X
    if n == 0:
        return path
    s = np.sign(state.p(X))
    s[s == 0] = 1.0
    cell = grid_spacing(domain, cfg)
    active = np.ones(n, dtype=bool)
    for it in range(1, cfg.max_local_iters + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            path[it:] = X
            break
        Xa, sa = X[idx], s[idx]
        f = sa * state.p(Xa)
        g = sa[:, None] * state.grad_p(Xa)
        H = sa[:, None, None] * state.hess_p(Xa)
        gnorm = np.linalg.norm(g, axis=1)
        done = gnorm <= cfg.ascent_tol
        eig = np.linalg.eigvalsh(H)
        newton = (eig[:, -1] < 0) & ~done
        gradient = ~newton & ~done

        step = np.zeros_like(Xa)
        if newton.any():
            step[newton] = -np.linalg.solve(H[newton], g[newton][:, :, None])[:, :, 0]
        stalled = np.zeros(idx.size, dtype=bool)
        if gradient.any():
            step[gradient], ok = _backtracked_gradient_step(
                state, Xa[gradient], sa[gradient], f[gradient], g[gradient],
                eig[gradient], gnorm[gradient], cell, cfg.max_halvings,
            )
            stalled[np.flatnonzero(gradient)[~ok]] = True
        X[idx] = domain.clip(Xa + step)
        active[idx[done | stalled]] = False
        path[it] = X
    return path


def _backtracked_gradient_step(state, X, s, f, g, eig, gnorm, cell, max_halvings):
    """Gradient ascent steps accepting any increase, halving up to ``max_halvings`` times."""
    domain = state.problem.domain
    curvature = np.max(np.abs(eig), axis=1)
    with np.errstate(divide='ignore'):
        length = np.where(curvature > 0, gnorm / curvature, cell)
    length = np.minimum(length, cell)
    trial = g / gnorm[:, None] * length[:, None]
    step = np.zeros_like(X)
    accepted = np.zeros(X.shape[0], dtype=bool)
    for _ in range(max_halvings + 1):
        pending = np.flatnonzero(~accepted)
        if pending.size == 0:
            break
        candidate = domain.clip(X[pending] + trial[pending])
        better = s[pending] * state.p(candidate) > f[pending]
        hit = pending[better]
        step[hit] = candidate[better] - X[hit]
        accepted[hit] = True
        trial[pending[~better]] *= 0.5
    return step, accepted


def _best_on_paths(state, path):
    """Per start: (best |p| over its iterates, iteration index of the best)."""
    T, n, d = path.shape
    values = np.abs(state.p(path.reshape(-1, d))).reshape(T, n)
    best_iter = np.argmax(values, axis=0)
    return values[best_iter, np.arange(n)], best_iter, values


def local_ascent(state, x0, cfg):
    """Best iterate (largest |p_u|) of a Newton ascent from ``x0``."""
    path = ascent_paths(state, np.atleast_2d(x0), cfg)
    _, best_iter, _ = _best_on_paths(state, path)
    return path[best_iter[0], 0].copy()


def multistart_points(state, support, cfg):
    """Grid nodes followed by the given support points."""
    domain = state.problem.domain
    grid = domain.grid(cfg.grid_size(domain.dim))
    support = np.asarray(support, dtype=float).reshape(-1, state.problem.dim)
    return np.vstack([grid, support])


def exact_max(state, support, cfg):
    """Global maximization of |p_u| by multistart ascent from grid and support.

    Returns ``(xhat, |p_u(xhat)|)``; ties go to the lowest start index.
    """
    starts = multistart_points(state, support, cfg)
    best_x, best_val = None, -np.inf
    for lo in range(0, starts.shape[0], cfg.batch_size):
        path = ascent_paths(state, starts[lo:lo + cfg.batch_size], cfg)
        vals, iters, _ = _best_on_paths(state, path)
        j = int(np.argmax(vals))
        if vals[j] > best_val:
            best_val = float(vals[j])
            best_x = path[iters[j], j].copy()
    return best_x, best_val


def _point_direction(state, x, M):
    x = np.asarray(x, dtype=float).reshape(1, -1)
    sign = np.sign(state.p(x)[0])
    return SparseMeasure.from_atoms(x, [M * sign])


def lazy_search(state, eps, M, support, cache, cfg):
    """Find a lazy direction at tolerance ``eps`` or fall back to an exact result.

    Candidates in order: the zero measure, cached points, current support
    points, then multistart ascent iterates from grid nodes and support
    points. A point candidate x stands for v = M sign(p_u(x)) delta_x.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    threshold = M * eps
    dim = state.problem.dim
    zero = SparseMeasure.empty(dim)

    base = state.base_gap
    if base >= threshold:
        return LazyHit(direction=zero, x=None, phi=base, source='zero')

    for source, points in (('cache', cache.points() if cache is not None else None),
                           ('support', support)):
        if points is None or len(points) == 0:
            continue
        points = np.asarray(points, dtype=float).reshape(-1, dim)
        phi = state.phi_at(points, M)
        hits = np.flatnonzero(phi >= threshold)
        if hits.size:
            x = points[hits[0]].copy()
            if cache is not None:
                cache.add(x)
            return LazyHit(_point_direction(state, x, M), x, float(phi[hits[0]]), source)

    starts = multistart_points(state, support, cfg)
    best_x, best_val = None, -np.inf
    for lo in range(0, starts.shape[0], cfg.batch_size):
        path = ascent_paths(state, starts[lo:lo + cfg.batch_size], cfg)
        vals, iters, all_vals = _best_on_paths(state, path)
        phi = M * (all_vals - state.problem.alpha) + base
        hit_starts = np.flatnonzero(np.any(phi >= threshold, axis=0))
        if hit_starts.size:
            j = hit_starts[0]
            t = int(np.flatnonzero(phi[:, j] >= threshold)[0])
            x = path[t, j].copy()
            if cache is not None:
                cache.add(x)
            return LazyHit(_point_direction(state, x, M), x, float(phi[t, j]), 'ascent')
        j = int(np.argmax(vals))
        if vals[j] > best_val:
            best_val = float(vals[j])
            best_x = path[iters[j], j].copy()

    alpha = state.problem.alpha
    if best_val < alpha:
        direction = zero
    else:
        direction = _point_direction(state, best_x, M)
    gap = max(M * max(best_val - alpha, 0.0) + base, 0.0)
    log.debug("exact sweep: |p|max=%.6e gap=%.3e", best_val, gap)
    return ExactResult(xhat=best_x, p_abs=best_val, gap=gap, direction=direction)
