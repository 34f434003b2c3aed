"""Evaluation metrics for generated molecules.

Bonds are perceived from covalent radii and distance bands. Shape similarity
is a Gaussian-overlap Tanimoto after principal-axes alignment; graph
similarity is a Tanimoto over hashed circular atom environments.
"""

from __future__ import annotations

import hashlib
import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from . import kernels
from .geometry import Molecule

COVALENT_RADII = {
    "H": 0.31,
    "C": 0.76,
    "N": 0.71,
    "O": 0.66,
    "F": 0.57,
    "P": 1.07,
    "S": 1.05,
    "Cl": 1.02,
    "Br": 1.20,
    "I": 1.39,
}
BOND_TOLERANCE = 0.4
AROMATIC = 1.5

# carbon-carbon bands, rescaled by (r_i + r_j) / (2 r_C) for other pairs
_CC = 2 * COVALENT_RADII["C"]
_TRIPLE_MAX = 1.27
_DOUBLE_MAX = 1.45
_AROMATIC_BAND = (1.34, 1.45)

GAUSSIAN_HEIGHT = 2.7
FINGERPRINT_BITS = 2048
FINGERPRINT_RADIUS = 2


@dataclass(frozen=True)
class BondGraph:
    n_atoms: int
    edges: tuple[tuple[int, int, float], ...]

    def __post_init__(self):
        for i, j, _ in self.edges:
            if i == j or not (0 <= i < self.n_atoms and 0 <= j < self.n_atoms):
                raise ValueError(f"invalid bond ({i}, {j})")

    def neighbors(self) -> list[list[tuple[int, float]]]:
        out = [[] for _ in range(self.n_atoms)]
        for i, j, order in self.edges:
            out[i].append((j, order))
            out[j].append((i, order))
        return out


def bond_order(el_i: str, el_j: str, aromatic_pair: bool, d: float) -> float:
    if el_i == "H" or el_j == "H":
        return 1
    scale = (COVALENT_RADII[el_i] + COVALENT_RADII[el_j]) / _CC
    lo, hi = _AROMATIC_BAND
    if aromatic_pair and lo * scale <= d <= hi * scale:
        return AROMATIC
    if d < _TRIPLE_MAX * scale:
        return 3
    if d < _DOUBLE_MAX * scale:
        return 2
    return 1


def infer_bonds(mol: Molecule) -> BondGraph:
    els = mol.elements
    arom = mol.aromatic
    radii = np.array([COVALENT_RADII[e] for e in els])
    diff = mol.positions[:, None, :] - mol.positions[None, :, :]
    dist = np.sqrt((diff**2).sum(-1))
    cutoff = radii[:, None] + radii[None, :] + BOND_TOLERANCE
    edges = []
    for i, j in zip(*np.nonzero(np.triu(dist <= cutoff, k=1))):
        d = float(dist[i, j])
        edges.append((int(i), int(j), bond_order(els[i], els[j], bool(arom[i] and arom[j]), d)))
    return BondGraph(len(mol), tuple(edges))


def bond_lengths(mol: Molecule) -> np.ndarray:
    g = infer_bonds(mol)
    return np.array([np.linalg.norm(mol.positions[i] - mol.positions[j]) for i, j, _ in g.edges])


def connectivity(mol: Molecule, graph: BondGraph | None = None) -> bool:
    graph = graph or infer_bonds(mol)
    n = graph.n_atoms
    if n <= 1:
        return True
    rows = [i for i, _, _ in graph.edges]
    cols = [j for _, j, _ in graph.edges]
    adj = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    n_comp, _ = connected_components(adj, directed=False)
    return n_comp == 1


def gaussian_exponents(mol: Molecule, p: float = GAUSSIAN_HEIGHT) -> np.ndarray:
    """Exponents that give each atom Gaussian of height ``p`` its sphere's volume."""
    r = mol.vdw_radii
    return np.pi * (3.0 * p / (4.0 * np.pi * r**3)) ** (2.0 / 3.0)


def overlap_volume(xa, alpha_a, xb, alpha_b, p: float = GAUSSIAN_HEIGHT) -> float:
    return kernels.gaussian_overlap(
        np.ascontiguousarray(xa, dtype=np.float64),
        np.ascontiguousarray(alpha_a, dtype=np.float64),
        np.ascontiguousarray(xb, dtype=np.float64),
        np.ascontiguousarray(alpha_b, dtype=np.float64),
        p,
    )


def principal_frame(positions: np.ndarray) -> np.ndarray:
    """Positions centred on their centroid and expressed in a right-handed principal basis."""
    centered = positions - positions.mean(axis=0)
    _, vecs = np.linalg.eigh(centered.T @ centered)
    if np.linalg.det(vecs) < 0:
        vecs[:, 0] = -vecs[:, 0]
    return centered @ vecs


_PROPER_FLIPS = (
    np.array([1.0, 1.0, 1.0]),
    np.array([1.0, -1.0, -1.0]),
    np.array([-1.0, 1.0, -1.0]),
    np.array([-1.0, -1.0, 1.0]),
)


def shape_tanimoto(xa, alpha_a, xb, alpha_b, p: float = GAUSSIAN_HEIGHT) -> float:
    vab = overlap_volume(xa, alpha_a, xb, alpha_b, p)
    vaa = overlap_volume(xa, alpha_a, xa, alpha_a, p)
    vbb = overlap_volume(xb, alpha_b, xb, alpha_b, p)
    return vab / (vaa + vbb - vab)


def shape_similarity(mol_x: Molecule, mol_y: Molecule, align: bool = True) -> float:
    """Gaussian-overlap Tanimoto in [0, 1].

    With ``align`` both molecules are moved to their principal frames and
    the best of the four proper axis-sign flips of ``mol_y`` is taken;
    otherwise the given coordinates are compared directly.
    """
    if len(mol_x) == 0 or len(mol_y) == 0:
        raise ValueError("empty molecule")
    ax, ay = gaussian_exponents(mol_x), gaussian_exponents(mol_y)
    if not align:
        return shape_tanimoto(mol_x.positions, ax, mol_y.positions, ay)
    px, py = principal_frame(mol_x.positions), principal_frame(mol_y.positions)
    return max(shape_tanimoto(px, ax, py * f, ay) for f in _PROPER_FLIPS)


def _stable_hash(*parts) -> int:
    digest = hashlib.blake2b(repr(parts).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def atom_environments(mol: Molecule, radius: int = FINGERPRINT_RADIUS, graph: BondGraph | None = None) -> set[int]:
    """Identifiers of all circular atom environments up to ``radius`` bonds."""
    graph = graph or infer_bonds(mol)
    nbrs = graph.neighbors()
    ids = [_stable_hash(int(t), len(nbrs[i])) for i, t in enumerate(mol.types)]
    found = set(ids)
    for _ in range(radius):
        ids = [_stable_hash(ids[i], tuple(sorted((o, ids[j]) for j, o in nbrs[i]))) for i in range(len(ids))]
        found.update(ids)
    return found


def fingerprint(mol: Molecule, n_bits: int = FINGERPRINT_BITS, radius: int = FINGERPRINT_RADIUS) -> frozenset[int]:
    return frozenset(h % n_bits for h in atom_environments(mol, radius))


def tanimoto(a: frozenset, b: frozenset) -> float:
    union = len(a | b)
    return len(a & b) / union if union else 1.0


def graph_similarity(mol_x: Molecule, mol_y: Molecule) -> float:
    return tanimoto(fingerprint(mol_x), fingerprint(mol_y))


def diversity(mols) -> float:
    mols = list(mols)
    if len(mols) < 2:
        raise ValueError("diversity needs at least two molecules")
    fps = [fingerprint(m) for m in mols]
    sims = [tanimoto(a, b) for a, b in itertools.combinations(fps, 2)]
    return 1.0 - float(np.mean(sims))


BOND_RANGE = (0.5, 3.0)
BOND_BINS = 100
SMOOTHING = 1e-12


def bond_length_histogram(mols, bins: int = BOND_BINS, value_range=BOND_RANGE) -> np.ndarray:
    lengths = [bond_lengths(m) for m in mols]
    lengths = np.concatenate(lengths) if lengths else np.zeros(0)
    if len(lengths) == 0:
        raise ValueError("no bonds found")
    hist, _ = np.histogram(lengths, bins=bins, range=value_range)
    return hist.astype(np.float64)


def js_divergence(p, q, smoothing: float = SMOOTHING) -> float:
    """Jensen-Shannon divergence (natural log) of two smoothed, normalised histograms."""
    p = np.asarray(p, dtype=np.float64) + smoothing
    q = np.asarray(q, dtype=np.float64) + smoothing
    p, q = p / p.sum(), q / q.sum()
    m = 0.5 * (p + q)
    return float(0.5 * np.sum(p * np.log(p / m)) + 0.5 * np.sum(q * np.log(q / m)))


def js_divergence_bond_lengths(real, gen, bins: int = BOND_BINS, value_range=BOND_RANGE) -> float:
    return js_divergence(bond_length_histogram(real, bins, value_range), bond_length_histogram(gen, bins, value_range))


@dataclass
class MoleculeScore:
    connected: bool
    shape_sim: float
    graph_sim: float


def score_molecules(condition: Molecule, generated) -> list[MoleculeScore]:
    return [
        MoleculeScore(connectivity(m), shape_similarity(condition, m), graph_similarity(condition, m))
        for m in generated
    ]


def summarize(scores: list[MoleculeScore], generated=None) -> dict:
    """Aggregate columns: connectivity rate and avg/max/std of both similarities."""
    if not scores:
        raise ValueError("no scores to summarise")
    ss = np.array([s.shape_sim for s in scores])
    gs = np.array([s.graph_sim for s in scores])
    out = {
        "n": len(scores),
        "connected_frac": float(np.mean([s.connected for s in scores])),
        "avg_shape_sim": float(ss.mean()),
        "max_shape_sim": float(ss.max()),
        "std_shape_sim": float(ss.std()),
        "avg_graph_sim": float(gs.mean()),
        "max_graph_sim": float(gs.max()),
        "std_graph_sim": float(gs.std()),
    }
    if generated is not None and len(generated) >= 2:
        out["diversity"] = diversity(generated)
    else:
        out["diversity"] = math.nan
    return out

