"""Molecule and surface representations.

Molecules are sets of atoms with a position and one of ``K`` feature classes
(element x aromaticity). Molecular surfaces are the boundary of the union of
van der Waals spheres; every surface operation here is analytic so it can be
checked against brute force.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation as _ScipyRotation

from . import kernels

ELEMENTS = ("H", "C", "N", "O", "F", "P", "S", "Cl", "Br", "I")
AROMATIC_ELEMENTS = ("C", "N", "O", "P", "S")

# class index -> (element, aromatic)
FEATURE_CLASSES = tuple((el, False) for el in ELEMENTS) + tuple(
    (el, True) for el in AROMATIC_ELEMENTS
)
NUM_CLASSES = len(FEATURE_CLASSES)  # 15

VDW_RADII = {
    "H": 1.10,
    "C": 1.70,
    "N": 1.55,
    "O": 1.52,
    "F": 1.47,
    "P": 1.80,
    "S": 1.80,
    "Cl": 1.75,
    "Br": 1.85,
    "I": 1.98,
}


def feature_index(element: str, aromatic: bool = False) -> int:
    try:
        return FEATURE_CLASSES.index((element, bool(aromatic)))
    except ValueError:
        kind = "aromatic " if aromatic else ""
        raise ValueError(f"unknown {kind}element {element!r}") from None


@dataclass(frozen=True)
class Atom:
    position: np.ndarray
    feature: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=np.float64)
        feat = np.asarray(self.feature, dtype=np.float64)
        if pos.shape != (3,) or not np.all(np.isfinite(pos)):
            raise ValueError("atom position must be a finite 3-vector")
        if feat.shape != (NUM_CLASSES,) or feat.sum() != 1.0 or np.count_nonzero(feat) != 1:
            raise ValueError("atom feature must be one-hot over the feature classes")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "feature", feat)

    @property
    def type_index(self) -> int:
        return int(np.argmax(self.feature))


@dataclass(frozen=True)
class Molecule:
    """Atom positions (n, 3) in Angstrom plus integer feature classes (n,)."""

    positions: np.ndarray
    types: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        types = np.asarray(self.types, dtype=np.int64).reshape(-1)
        if len(pos) != len(types):
            raise ValueError("positions and types differ in length")
        if not np.all(np.isfinite(pos)):
            raise ValueError("atom positions must be finite")
        if np.any((types < 0) | (types >= NUM_CLASSES)):
            raise ValueError("feature class out of range")
        if len(pos) > 1 and len(np.unique(pos, axis=0)) != len(pos):
            raise ValueError("two atoms share identical positions")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "types", types)

    @classmethod
    def from_atoms(cls, atoms) -> "Molecule":
        atoms = list(atoms)
        pos = np.array([a.position for a in atoms]).reshape(-1, 3)
        return cls(pos, np.array([a.type_index for a in atoms], dtype=np.int64))

    @classmethod
    def from_elements(cls, elements, positions, aromatic=None) -> "Molecule":
        if aromatic is None:
            aromatic = [False] * len(elements)
        types = [feature_index(el, ar) for el, ar in zip(elements, aromatic)]
        return cls(np.asarray(positions, dtype=np.float64), np.array(types, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.types)

    @property
    def atoms(self) -> list[Atom]:
        return [Atom(p, f) for p, f in zip(self.positions, self.one_hot())]

    def one_hot(self) -> np.ndarray:
        return np.eye(NUM_CLASSES)[self.types]

    @property
    def elements(self) -> list[str]:
        return [FEATURE_CLASSES[t][0] for t in self.types]

    @property
    def aromatic(self) -> np.ndarray:
        return np.array([FEATURE_CLASSES[t][1] for t in self.types], dtype=bool)

    @property
    def vdw_radii(self) -> np.ndarray:
        return np.array([VDW_RADII[el] for el in self.elements])

    def translated(self, offset) -> "Molecule":
        return Molecule(self.positions + np.asarray(offset, dtype=np.float64), self.types)

    def rotated(self, rotation: "Rotation | np.ndarray") -> "Molecule":
        R = rotation.matrix if isinstance(rotation, Rotation) else np.asarray(rotation)
        return Molecule(self.positions @ R.T, self.types)


@dataclass(frozen=True)
class PointCloud:
    """Surface points. ``offset`` is what was subtracted to center them."""

    points: np.ndarray
    centered: bool = False
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __len__(self) -> int:
        return len(self.points)

    def center(self) -> "PointCloud":
        mean = self.points.mean(axis=0)
        return PointCloud(self.points - mean, True, self.offset + mean)

    def uncentered(self) -> np.ndarray:
        return self.points + self.offset


@dataclass(frozen=True)
class QuerySample:
    point: np.ndarray
    signed_distance: float


@dataclass(frozen=True)
class QuerySamples:
    """Columnar storage for a set of query samples."""

    points: np.ndarray
    signed_distances: np.ndarray

    def __len__(self) -> int:
        return len(self.points)

    def __iter__(self):
        for p, s in zip(self.points, self.signed_distances):
            yield QuerySample(p, float(s))

    def shifted(self, offset) -> "QuerySamples":
        return QuerySamples(self.points + np.asarray(offset), self.signed_distances)


@dataclass(frozen=True)
class Rotation:
    matrix: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.matrix, dtype=np.float64)
        if R.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-10 or abs(np.linalg.det(R) - 1.0) > 1e-10:
            raise ValueError("matrix is not a proper rotation")
        object.__setattr__(self, "matrix", R)

    def apply(self, points) -> np.ndarray:
        """Rotate row vectors."""
        return np.asarray(points) @ self.matrix.T


def random_rotation(seed) -> Rotation:
    rng = np.random.default_rng(seed)
    return Rotation(_ScipyRotation.random(random_state=rng).as_matrix())


def _unit_vectors(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def build_surface_point_cloud(mol: Molecule, n_points: int, seed) -> PointCloud:
    """Uniform samples on the union-of-spheres boundary, centered to zero mean.

    A sphere is picked with probability proportional to its area, a point is
    drawn uniformly on it and rejected if it lies strictly inside any other
    sphere.
    """
    if len(mol) == 0:
        raise ValueError("empty molecule")
    if n_points < 8:
        raise ValueError("n_points must be at least 8")
    rng = np.random.default_rng(seed)
    centers, radii = mol.positions, mol.vdw_radii
    weights = radii**2 / np.sum(radii**2)
    chunks, have = [], 0
    while have < n_points:
        batch = max(2 * (n_points - have), 64)
        owner = rng.choice(len(radii), size=batch, p=weights)
        pts = centers[owner] + radii[owner, None] * _unit_vectors(rng, batch)
        keep = ~kernels.buried_mask(pts, owner, centers, radii)
        pts = pts[keep]
        chunks.append(pts)
        have += len(pts)
    points = np.concatenate(chunks)[:n_points]
    return PointCloud(points).center()


def signed_distance(mol: Molecule, q) -> float | np.ndarray:
    """Distance to the sphere-union surface, positive inside.

    Accepts a single 3-vector or an (m, 3) array of queries.
    """
    if len(mol) == 0:
        raise ValueError("empty molecule")
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    out = kernels.sphere_sdf(q.reshape(-1, 3), mol.positions, mol.vdw_radii)
    return float(out[0]) if single else out


def bounding_box(mol: Molecule, margin: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Extent of the sphere union extended by ``margin`` on each side."""
    r = mol.vdw_radii[:, None]
    lo = (mol.positions - r).min(axis=0) - margin
    hi = (mol.positions + r).max(axis=0) + margin
    return lo, hi


def sample_query_points(mol: Molecule, k: int, seed) -> QuerySamples:
    """Draw ``k`` labelled query points, at most half of them inside the surface.

    Candidates are drawn ``3k`` at a time in the extended bounding box; if a
    draw yields too few outside points, further draws are added.
    """
    if k < 2 or k % 2:
        raise ValueError("k must be even and at least 2")
    if len(mol) == 0:
        raise ValueError("empty molecule")
    rng = np.random.default_rng(seed)
    lo, hi = bounding_box(mol)
    cand = rng.uniform(lo, hi, size=(3 * k, 3))
    sdf = signed_distance(mol, cand)
    inside = np.flatnonzero(sdf > 0)
    n_in = min(len(inside), k // 2)
    outside = np.flatnonzero(sdf <= 0)
    while len(outside) < k - n_in:
        extra = rng.uniform(lo, hi, size=(3 * k, 3))
        extra_sdf = signed_distance(mol, extra)
        outside = np.concatenate([outside, len(cand) + np.flatnonzero(extra_sdf <= 0)])
        cand = np.concatenate([cand, extra])
        sdf = np.concatenate([sdf, extra_sdf])
    chosen = np.concatenate(
        [
            rng.choice(inside, size=n_in, replace=False),
            rng.choice(outside, size=k - n_in, replace=False),
        ]
    )
    return QuerySamples(cand[chosen], sdf[chosen])


def knn_graph(points, k: int) -> np.ndarray:
    """Directed edges ``(i, j)`` to the ``k`` nearest neighbours of each point.

    Returns an ``(n * k, 2)`` array ordered by source then by distance; equal
    distances keep the lower index first.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if k >= n:
        raise ValueError(f"k={k} must be smaller than the number of points ({n})")
    nbrs = kernels.knn_indices(points.reshape(n, -1), k)
    src = np.repeat(np.arange(n), k)
    return np.stack([src, nbrs.reshape(-1)], axis=1)
