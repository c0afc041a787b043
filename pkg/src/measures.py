"""Sparse Radon measures as finite weighted Dirac sums."""

import json
from dataclasses import dataclass

import numpy as np

from src.errors import EmptyMeasureError

# Weights with smaller magnitude are treated as zero.
WEIGHT_FLOOR = 1e-12


def _readonly(array):
    array.flags.writeable = False
    return array


def _as_positions(positions, n_atoms):
    positions = np.array(positions, dtype=float, copy=True)
    if positions.ndim == 1:
        positions = positions.reshape(n_atoms, -1) if n_atoms else positions.reshape(0, 0)
    return positions


@dataclass(frozen=True, eq=False)
class SparseMeasure:
    """Finite sum of weighted Dirac deltas on a d-dimensional box.

    Positions are stored as an (N, d) array and weights as an (N,) array,
    both read-only. Atom order is insertion order; positions are pairwise
    distinct and no weight is below WEIGHT_FLOOR in magnitude when the
    measure is built through ``from_atoms``.
    """
    positions: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        weights = np.array(self.weights, dtype=float, copy=True).reshape(-1)
        positions = _as_positions(self.positions, len(weights))
        if positions.shape[0] != weights.shape[0]:
            raise ValueError(
                f"{positions.shape[0]} positions but {weights.shape[0]} weights"
            )
        object.__setattr__(self, 'positions', _readonly(positions))
        object.__setattr__(self, 'weights', _readonly(weights))

    @classmethod
    def empty(cls, dim):
        """Zero measure in dimension ``dim``."""
        return cls(np.zeros((0, dim)), np.zeros(0))

    @classmethod
    def from_atoms(cls, positions, weights, floor=WEIGHT_FLOOR):
        """Build a measure, merging identical positions and pruning small weights."""
        weights = np.asarray(weights, dtype=float).reshape(-1)
        positions = _as_positions(positions, len(weights))
        merged_pos, merged_w = merge_atoms(positions, weights)
        keep = np.abs(merged_w) >= floor
        return cls(merged_pos[keep], merged_w[keep])

    @property
    def dim(self):
        return self.positions.shape[1]

    @property
    def is_empty(self):
        return self.weights.shape[0] == 0

    @property
    def support(self):
        """Support points A_u as an (N, d) array."""
        return self.positions

    def __len__(self):
        return self.weights.shape[0]

    def __repr__(self):
        atoms = ', '.join(
            f"({np.array2string(x, precision=4)}, {w:.4g})"
            for x, w in zip(self.positions, self.weights)
        )
        return f"SparseMeasure([{atoms}])"

    def scaled(self, factor):
        """Measure with all weights multiplied by ``factor``, pruned."""
        return SparseMeasure.from_atoms(self.positions, factor * self.weights)

    def to_json(self):
        """JSON-ready list of ``{"x": [...], "w": ...}`` atoms."""
        return [
            {"x": [float(c) for c in x], "w": float(w)}
            for x, w in zip(self.positions, self.weights)
        ]

    @classmethod
    def from_json(cls, atoms, dim=None):
        """Inverse of ``to_json``; accepts a list or a JSON string."""
        if isinstance(atoms, str):
            atoms = json.loads(atoms)
        if not atoms:
            if dim is None:
                raise ValueError("dimension needed to load an empty measure")
            return cls.empty(dim)
        positions = np.array([atom["x"] for atom in atoms], dtype=float)
        weights = np.array([atom["w"] for atom in atoms], dtype=float)
        return cls.from_atoms(positions, weights)


@dataclass(frozen=True, eq=False)
class FiniteParam:
    """Position/weight parametrization z = (x, lambda) of a sparse measure.

    The flat vector layout used by the finite objective is
    ``[x_1, ..., x_N, lambda_1, ..., lambda_N]`` with each x_j of length d.
    """
    positions: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        weights = np.array(self.weights, dtype=float, copy=True).reshape(-1)
        positions = _as_positions(self.positions, len(weights))
        object.__setattr__(self, 'positions', _readonly(positions))
        object.__setattr__(self, 'weights', _readonly(weights))

    @property
    def n_atoms(self):
        return self.weights.shape[0]

    @property
    def dim(self):
        return self.positions.shape[1]

    def to_vector(self):
        return np.concatenate([self.positions.reshape(-1), self.weights])

    @classmethod
    def from_vector(cls, vector, n_atoms, dim):
        vector = np.asarray(vector, dtype=float)
        split = n_atoms * dim
        return cls(vector[:split].reshape(n_atoms, dim), vector[split:])


def merge_atoms(positions, weights):
    """Merge atoms at bitwise-identical positions by adding their weights.

    The first occurrence of a position fixes its place in the output order.
    """
    index = {}
    out_pos = []
    out_w = []
    for x, w in zip(positions, weights):
        key = tuple(x.tolist())
        j = index.get(key)
        if j is None:
            index[key] = len(out_w)
            out_pos.append(x)
            out_w.append(float(w))
        else:
            out_w[j] += float(w)
    dim = positions.shape[1] if positions.ndim == 2 else 0
    if not out_w:
        return np.zeros((0, dim)), np.zeros(0)
    return np.array(out_pos, dtype=float), np.array(out_w, dtype=float)


def prune(u, floor=WEIGHT_FLOOR):
    """Drop atoms whose weight magnitude is below ``floor``."""
    keep = np.abs(u.weights) >= floor
    if keep.all():
        return u
    return SparseMeasure(u.positions[keep], u.weights[keep])


def total_variation(u):
    """Total variation norm ||u||_M, the l1 norm of the weights."""
    return float(np.sum(np.abs(u.weights)))


def restrict(u, keep):
    """Restriction of ``u`` to the atoms whose position satisfies ``keep``."""
    mask = np.array([bool(keep(x)) for x in u.positions], dtype=bool)
    if mask.size == 0:
        return u
    return SparseMeasure(u.positions[mask], u.weights[mask])


def restrict_mask(u, mask):
    """Same as ``restrict`` with a precomputed boolean mask over the atoms."""
    mask = np.asarray(mask, dtype=bool)
    return SparseMeasure(u.positions[mask], u.weights[mask])


def in_ball(positions, center, radius):
    """Mask of positions strictly inside the open Euclidean ball."""
    if positions.shape[0] == 0:
        return np.zeros(0, dtype=bool)
    dist = np.linalg.norm(positions - np.asarray(center, dtype=float), axis=1)
    return dist < radius


def ball_mass(u, center, radius):
    """Signed mass u(B_radius(center)) of the open ball."""
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    return float(np.sum(u.weights[in_ball(u.positions, center, radius)]))


def convex_combine(u, v, eta):
    """(1 - eta) u + eta v with coincident atoms merged and pruned."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    if eta == 0.0:
        return u
    if eta == 1.0:
        return v
    positions = np.vstack([u.positions, v.positions])
    weights = np.concatenate([(1.0 - eta) * u.weights, eta * v.weights])
    return SparseMeasure.from_atoms(positions, weights)


def minimal_representer(u):
    """z = MR(u): positions and weights in stored atom order."""
    if u.is_empty:
        raise EmptyMeasureError("no representer of the zero measure")
    return FiniteParam(u.positions, u.weights)


def measure_of(z):
    """U(z) = sum_j lambda_j delta_{x_j}, merged and pruned."""
    return SparseMeasure.from_atoms(z.positions, z.weights)
