import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.distance import jensenshannon

from shapediff.geometry import Molecule, random_rotation
from shapediff.metrics import (
    AROMATIC,
    BondGraph,
    bond_length_histogram,
    bond_order,
    connectivity,
    diversity,
    fingerprint,
    gaussian_exponents,
    graph_similarity,
    infer_bonds,
    js_divergence,
    js_divergence_bond_lengths,
    score_molecules,
    shape_similarity,
    summarize,
    tanimoto,
)

from conftest import random_molecule


def pair(d, el="C", aromatic=False):
    return Molecule.from_elements([el, el], [[0.0, 0, 0], [d, 0, 0]], [aromatic, aromatic])


def methane():
    s = 1.09 / math.sqrt(3)
    h = [[s, s, s], [s, -s, -s], [-s, s, -s], [-s, -s, s]]
    return Molecule.from_elements(["C"] + ["H"] * 4, [[0, 0, 0]] + h)


def ethane():
    s = 1.09 / math.sqrt(3)
    pos = [[0, 0, 0], [1.54, 0, 0]]
    pos += [[-s, s, s], [-s, -s, -s], [-s, s, -s]]
    pos += [[1.54 + s, s, s], [1.54 + s, -s, -s], [1.54 + s, s, -s]]
    return Molecule.from_elements(["C", "C"] + ["H"] * 6, pos)


def test_bond_examples():
    assert infer_bonds(pair(1.54)).edges == ((0, 1, 1),)
    assert infer_bonds(pair(5.0)).edges == ()
    assert infer_bonds(pair(1.34)).edges == ((0, 1, 2),)
    assert infer_bonds(pair(1.20)).edges == ((0, 1, 3),)
    assert infer_bonds(pair(1.40, aromatic=True)).edges == ((0, 1, AROMATIC),)
    assert infer_bonds(pair(1.40)).edges == ((0, 1, 2),)


def test_bond_cutoff_edge():
    cutoff = 0.76 + 0.76 + 0.4
    assert len(infer_bonds(pair(cutoff - 1e-9)).edges) == 1
    assert len(infer_bonds(pair(cutoff + 1e-9)).edges) == 0


def test_hydrogen_bonds_are_single():
    assert bond_order("C", "H", False, 0.9) == 1


def test_bond_graph_validates():
    with pytest.raises(ValueError):
        BondGraph(2, ((0, 0, 1),))
    with pytest.raises(ValueError):
        BondGraph(2, ((0, 2, 1),))


def test_bonds_invariant_to_rigid_motion(molecule):
    moved = molecule.rotated(random_rotation(3)).translated([1.0, -2.0, 0.5])
    assert infer_bonds(moved).edges == infer_bonds(molecule).edges


def test_connectivity_examples():
    assert connectivity(Molecule.from_elements(["C"], [[0.0, 0, 0]]))
    assert connectivity(pair(1.5))
    assert not connectivity(pair(4.0))


def _union_find_connected(n, edges):
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j, _ in edges:
        parent[find(i)] = find(j)
    return len({find(i) for i in range(n)}) == 1


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_connectivity_matches_union_find(n, seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0, 0.5)
    edges = tuple((i, j, 1) for i, j in itertools.combinations(range(n), 2) if rng.random() < p)
    mol = Molecule(np.arange(3 * n, dtype=float).reshape(n, 3) * 10, np.ones(n, dtype=int))
    assert connectivity(mol, BondGraph(n, edges)) == _union_find_connected(n, edges)


def test_shape_identical_is_one(molecule):
    assert shape_similarity(molecule, molecule) == pytest.approx(1.0, abs=1e-9)


def test_shape_far_atoms_vanish():
    a = Molecule.from_elements(["C"], [[0.0, 0, 0]])
    vals = [shape_similarity(a, a.translated([d, 0, 0]), align=False) for d in (1.0, 3.0, 10.0)]
    assert vals[0] > vals[1] > vals[2]
    assert vals[2] < 1e-12


def test_shape_two_atom_closed_form():
    a = Molecule.from_elements(["C"], [[0.0, 0, 0]])
    assert shape_similarity(a, a.translated([2.0, 0, 0])) == pytest.approx(1.0, abs=1e-12)
    d = 0.8
    alpha = gaussian_exponents(a)[0]
    e = math.exp(-alpha * d * d / 2)
    assert shape_similarity(a, a.translated([d, 0, 0]), align=False) == pytest.approx(e / (2 - e), rel=1e-12)


def test_shape_symmetric_and_rigid_invariant():
    x, y = random_molecule(1, 6), random_molecule(2, 5)
    s = shape_similarity(x, y)
    assert shape_similarity(y, x) == pytest.approx(s, abs=1e-9)
    R = random_rotation(5)
    assert shape_similarity(x.rotated(R).translated([3, 1, 0]), y.rotated(R).translated([3, 1, 0])) == pytest.approx(
        s, abs=1e-9
    )
    assert 0.0 <= s <= 1.0


def test_shape_rejects_empty():
    empty = Molecule(np.zeros((0, 3)), np.zeros(0, dtype=int))
    with pytest.raises(ValueError):
        shape_similarity(empty, pair(1.5))


def _environment_strings(mol, radius=2):
    # nested-tuple identifiers; no hashing, no folding
    g = infer_bonds(mol)
    nbrs = g.neighbors()
    ids = [(int(t), len(nbrs[i])) for i, t in enumerate(mol.types)]
    found = set(ids)
    for _ in range(radius):
        ids = [(ids[i], tuple(sorted((o, ids[j]) for j, o in nbrs[i]))) for i in range(len(ids))]
        found.update(ids)
    return found


def test_graph_similarity_methane_ethane():
    a, b = _environment_strings(methane()), _environment_strings(ethane())
    expect = len(a & b) / len(a | b)
    assert graph_similarity(methane(), ethane()) == pytest.approx(expect, abs=1e-15)
    assert 0 < expect < 1


def test_graph_similarity_trivial_cases():
    assert graph_similarity(ethane(), ethane()) == 1.0
    assert graph_similarity(pair(1.5, "C"), pair(1.4, "N")) == 0.0


def test_graph_similarity_reordering_invariant(molecule):
    perm = np.random.default_rng(0).permutation(len(molecule))
    shuffled = Molecule(molecule.positions[perm], molecule.types[perm])
    assert fingerprint(shuffled) == fingerprint(molecule)


def test_tanimoto_empty_sets():
    assert tanimoto(frozenset(), frozenset()) == 1.0


def test_diversity_loop():
    mols = [methane(), ethane(), pair(1.34)]
    sims = [graph_similarity(a, b) for a, b in itertools.combinations(mols, 2)]
    assert diversity(mols) == pytest.approx(1 - sum(sims) / 3, abs=1e-15)
    assert diversity([ethane(), ethane()]) == 0.0
    assert diversity([pair(1.5, "C"), pair(1.4, "N"), pair(1.4, "O")]) == 1.0
    with pytest.raises(ValueError):
        diversity([ethane()])


def test_js_identical_and_disjoint():
    mols = [ethane(), pair(1.34)]
    assert js_divergence_bond_lengths(mols, mols) == pytest.approx(0.0, abs=1e-15)
    p = np.zeros(100)
    q = np.zeros(100)
    p[10], q[60] = 5, 7
    assert js_divergence(p, q) == pytest.approx(math.log(2), abs=1e-9)


def test_js_matches_scipy(rng):
    real = [random_molecule(s, 6) for s in range(8)]
    gen = [random_molecule(s, 6) for s in range(8, 20)]
    hp, hq = bond_length_histogram(real), bond_length_histogram(gen)
    p, q = hp + 1e-12, hq + 1e-12
    expect = jensenshannon(p / p.sum(), q / q.sum()) ** 2
    assert js_divergence_bond_lengths(real, gen) == pytest.approx(expect, abs=1e-12)


def test_js_needs_bonds():
    with pytest.raises(ValueError):
        js_divergence_bond_lengths([pair(5.0)], [pair(1.5)])


def test_summary_columns():
    mols = [ethane(), methane(), pair(4.0)]
    scores = score_molecules(ethane(), mols)
    out = summarize(scores, mols)
    assert out["n"] == 3
    assert out["connected_frac"] == pytest.approx(2 / 3)
    assert out["max_graph_sim"] == 1.0
    assert out["max_shape_sim"] == pytest.approx(1.0)
    assert math.isnan(summarize(scores[:1], mols[:1])["diversity"])
    with pytest.raises(ValueError):
        summarize([])
