"""Toy molecule templates and the line-per-molecule dataset format."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .geometry import ELEMENTS, Molecule, feature_index, random_rotation

CC_SINGLE = 1.54
CC_AROMATIC = 1.40
RING_SUBSTITUENT = 1.50
TETRAHEDRAL = np.deg2rad(109.47)
HETERO_BOND = {"C": 1.54, "N": 1.47, "O": 1.43}
JITTER = 0.02


def zigzag_chain(n: int, bond: float = CC_SINGLE, angle: float = TETRAHEDRAL) -> np.ndarray:
    """Planar zig-zag backbone with ``n`` atoms."""
    dx = bond * np.sin(angle / 2)
    dy = bond * np.cos(angle / 2)
    return np.array([[k * dx, (k % 2) * dy, 0.0] for k in range(n)])


def _unit(v):
    return v / np.linalg.norm(v)


def tetrahedral_branch(center, a, b, up: bool = True) -> np.ndarray:
    """Direction of a third bond at ``center`` given neighbours ``a`` and ``b``."""
    bisector = _unit(2 * center - a - b)
    normal = _unit(np.cross(a - center, b - center))
    half = TETRAHEDRAL / 2
    return np.cos(half) * bisector + (1 if up else -1) * np.sin(half) * normal


def chain_template(n: int):
    pos = zigzag_chain(n)
    return ["C"] * n, pos, [False] * n


def ring_template(rng: np.random.Generator):
    ang = np.arange(6) * np.pi / 3
    pos = [np.array([CC_AROMATIC * np.cos(a), CC_AROMATIC * np.sin(a), 0.0]) for a in ang]
    els = ["C"] * 6
    if rng.random() < 0.3:
        els[0] = "N"
    arom = [True] * 6
    n_sub = int(rng.integers(0, 3))
    for site in rng.choice(np.arange(1, 6), size=n_sub, replace=False):
        el = str(rng.choice(["C", "N", "O"], p=[0.6, 0.2, 0.2]))
        pos.append(pos[site] * (1 + RING_SUBSTITUENT / CC_AROMATIC))
        els.append(el)
        arom.append(False)
    return els, np.array(pos), arom


def branched_template(rng: np.random.Generator):
    n = int(rng.integers(4, 8))
    els, pos, arom = chain_template(n)
    els, pos, arom = list(els), list(pos), list(arom)
    # heteroatom at one chain end, bond length adjusted along the bond
    if rng.random() < 0.6:
        el = str(rng.choice(["N", "O"]))
        direction = _unit(pos[-1] - pos[-2])
        pos[-1] = pos[-2] + HETERO_BOND[el] * direction
        els[-1] = el
    n_branch = int(rng.integers(1, 3))
    sites = rng.choice(np.arange(1, n - 1), size=min(n_branch, n - 2), replace=False)
    for k, site in enumerate(sites):
        el = str(rng.choice(["C", "N", "O"], p=[0.5, 0.25, 0.25]))
        d = tetrahedral_branch(pos[site], pos[site - 1], pos[site + 1], up=bool(k % 2 == 0))
        pos.append(pos[site] + HETERO_BOND[el] * d)
        els.append(el)
        arom.append(False)
    return els, np.array(pos), arom


def generate_toy_dataset(n: int, seed: int = 0) -> list[Molecule]:
    """Randomly rotated, jittered chains, aromatic rings and branched variants."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        kind = rng.choice(3, p=[0.4, 0.3, 0.3])
        if kind == 0:
            els, pos, arom = chain_template(int(rng.integers(3, 9)))
        elif kind == 1:
            els, pos, arom = ring_template(rng)
        else:
            els, pos, arom = branched_template(rng)
        pos = pos - pos.mean(axis=0)
        pos = random_rotation(rng).apply(pos) + rng.normal(scale=JITTER, size=pos.shape)
        out.append(Molecule.from_elements(els, pos, arom))
    return out


def molecule_to_record(mol: Molecule) -> dict:
    return {
        "atoms": [
            {"el": el, "aromatic": bool(ar), "xyz": [float(c) for c in p]}
            for el, ar, p in zip(mol.elements, mol.aromatic, mol.positions)
        ]
    }


def molecule_from_record(rec: dict) -> Molecule:
    atoms = rec["atoms"]
    if not isinstance(atoms, list) or not atoms:
        raise ValueError("record has no atoms")
    types, pos = [], []
    for a in atoms:
        el = a["el"]
        if el not in ELEMENTS:
            raise ValueError(f"unknown element {el!r}")
        types.append(feature_index(el, bool(a.get("aromatic", False))))
        xyz = a["xyz"]
        if len(xyz) != 3:
            raise ValueError("xyz must have three coordinates")
        pos.append([float(c) for c in xyz])
    return Molecule(np.array(pos), np.array(types))


def save_dataset(mols, path) -> None:
    with open(path, "w") as fh:
        for m in mols:
            fh.write(json.dumps(molecule_to_record(m)) + "\n")


def load_dataset(path) -> list[Molecule]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(molecule_from_record(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return out


def export_xyz(mol: Molecule, path, comment: str = "") -> None:
    lines = [str(len(mol)), comment]
    for el, p in zip(mol.elements, mol.positions):
        lines.append(f"{el} {float(p[0])!r} {float(p[1])!r} {float(p[2])!r}")
    Path(path).write_text("\n".join(lines) + "\n")
