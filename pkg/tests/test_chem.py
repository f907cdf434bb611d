import networkx as nx
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sodade.chem import (AROMATIC, BitFingerprint, MolGraph, SmilesError, ecfp, ecfp_from_smiles,
                         graph_invariant, parse_smiles, tanimoto, tanimoto_matrix, to_smiles)
from sodade.synthetic import _candidate_smiles

from ecfp_reference import MOLECULES, reference_bits

SAMPLES = ["CCCCC", "CCC(C)CC", "c1ccccc1", "CC(=O)O", "CS(C)=O", "C[N+](=O)[O-]", "ClC(Cl)Cl",
           "O=C1CCCN1C", "CN(C)C=O", "c1ccncc1", "C1CC2CCC1CC2", "OCCO", "CC#N", "[NH4+]", "C%10CCCC%10",
           "c1ccc2ccccc2c1", "O=S1(=O)CCCC1", "[O-]C(=O)C", "CC(C)(C)O", "FC(F)(F)C(F)(F)F"]


def to_nx(mol: MolGraph):
    g = nx.Graph()
    for i, a in enumerate(mol.atoms):
        g.add_node(i, el=a.element, ch=a.charge, h=a.hcount, ar=a.aromatic)
    for a, b, o in mol.bonds:
        g.add_edge(a, b, o=o)
    return g


def isomorphic(m1, m2):
    return nx.is_isomorphic(to_nx(m1), to_nx(m2), node_match=lambda x, y: x == y,
                            edge_match=lambda x, y: x == y)


def random_smiles(mol: MolGraph, rng):
    """Bracket-atom SMILES from a randomly rooted, randomly ordered DFS."""
    from sodade.chem import _atom_token, _bond_token

    n = len(mol)
    nb = mol.neighbors()
    order = {}
    for a, b, o in mol.bonds:
        order[(a, b)] = order[(b, a)] = o
    seen, tree = set(), set()

    def dfs(v):
        seen.add(v)
        nbrs = [w for w, _ in nb[v]]
        rng.shuffle(nbrs)
        for w in nbrs:
            if w not in seen:
                tree.add(frozenset((v, w)))
                dfs(w)

    root = int(rng.integers(n))
    dfs(root)
    closures = {k: [] for k in range(n)}
    for lab, (a, b, _) in enumerate([e for e in mol.bonds if frozenset(e[:2]) not in tree], start=1):
        closures[a].append((lab, b))
        closures[b].append((lab, a))
    done = set()

    def write(v, parent):
        done.add(v)
        s = _atom_token(mol.atoms[v])
        for lab, other in closures[v]:
            s += (_bond_token(order[(v, other)], mol.atoms[v], mol.atoms[other]) if other not in done else "")
            s += f"%{lab + 10}"
        kids = [w for w, _ in nb[v] if w != parent and frozenset((v, w)) in tree and w not in done]
        rng.shuffle(kids)
        for k, w in enumerate(kids):
            piece = _bond_token(order[(v, w)], mol.atoms[v], mol.atoms[w]) + write(w, v)
            s += piece if k == len(kids) - 1 else f"({piece})"
        return s

    return write(root, -1)


def test_pentane():
    m = parse_smiles("CCCCC")
    assert [a.element for a in m.atoms] == ["C"] * 5
    assert len(m.bonds) == 4 and all(o == 1 for *_, o in m.bonds)
    assert not any(m.ring)
    assert [a.hcount for a in m.atoms] == [3, 2, 2, 2, 3]


def test_benzene():
    m = parse_smiles("c1ccccc1")
    assert len(m.atoms) == 6 and all(a.aromatic for a in m.atoms)
    assert len(m.bonds) == 6 and all(o == AROMATIC for *_, o in m.bonds)
    assert all(m.ring)
    assert all(a.hcount == 1 for a in m.atoms)


def test_branch_order_isomorphic():
    a, b = parse_smiles("CC(C)CC"), parse_smiles("C(C)(C)CC")
    assert graph_invariant(a) == graph_invariant(b)
    assert isomorphic(a, b)
    assert graph_invariant(a) != graph_invariant(parse_smiles("CCCCC"))


def test_brackets_charges_hydrogens():
    m = parse_smiles("C[N+](=O)[O-]")
    assert [a.charge for a in m.atoms] == [0, 1, 0, -1]
    assert parse_smiles("[NH4+]").atoms[0].hcount == 4
    assert parse_smiles("CS(C)=O").atoms[1].hcount == 0
    assert parse_smiles("Cl").atoms[0].hcount == 1


def test_ring_flags_bicyclic_and_chain():
    assert list(parse_smiles("CC1CCCCC1").ring) == [False] + [True] * 6
    assert list(parse_smiles("C1CC1CC1CC1").ring) == [True] * 3 + [False] + [True] * 3


def test_stereo_and_isotope_warn():
    with pytest.warns(UserWarning):
        m = parse_smiles("F/C=C/F")
    assert len(m.bonds) == 3
    with pytest.warns(UserWarning):
        parse_smiles("[13CH4]")
    with pytest.warns(UserWarning):
        parse_smiles("C[C@H](O)F")


@pytest.mark.parametrize("bad, offset", [("CC(C", 2), ("C1CC", 1), ("CCX", 2), ("C)C", 1), ("", 0)])
def test_parse_errors_carry_offset(bad, offset):
    with pytest.raises(SmilesError) as ei:
        parse_smiles(bad)
    assert ei.value.offset == offset


@pytest.mark.parametrize("smi", SAMPLES)
def test_round_trip_isomorphic(smi):
    m = parse_smiles(smi)
    again = parse_smiles(to_smiles(m))
    assert isomorphic(m, again)


@pytest.mark.parametrize("smi", SAMPLES)
def test_ecfp_invariant_to_random_reordering(smi):
    m = parse_smiles(smi)
    fp = ecfp(m)
    rng = np.random.default_rng(len(smi))
    for _ in range(5):
        alt = parse_smiles(random_smiles(m, rng))
        assert isomorphic(m, alt)
        assert ecfp(alt) == fp


def test_ecfp_methane_radius0():
    assert len(ecfp(parse_smiles("C"), radius=0).on_bits()) == 1


def test_ecfp_deterministic_and_nonempty():
    for smi in SAMPLES:
        a, b = ecfp_from_smiles(smi), ecfp_from_smiles(smi)
        assert a == b and a.bits.sum() >= 1


def test_ecfp_rejects_bad_nbits():
    with pytest.raises(ValueError):
        ecfp(parse_smiles("C"), nbits=1000)


def test_ecfp_golden_file(data_dir):
    lines = (data_dir / "ecfp_golden.tsv").read_text().splitlines()
    assert len(lines) == len(MOLECULES)
    for line in lines:
        smi, bits = line.split("\t")
        golden = [int(b) for b in bits.split()]
        assert list(ecfp_from_smiles(smi).on_bits()) == golden, smi
        atoms, bonds = MOLECULES[smi]
        assert reference_bits(atoms, bonds) == golden, smi


def _fp(bits, n=8):
    v = np.zeros(n, dtype=bool)
    v[list(bits)] = True
    return BitFingerprint(v, 2)


def test_tanimoto_cases():
    x = _fp({1, 2, 5})
    assert tanimoto(x, x) == 1.0
    assert tanimoto(_fp({1}), _fp({2})) == 0.0
    assert tanimoto(_fp({1, 2}), _fp({2, 3})) == pytest.approx(1 / 3, abs=1e-15)
    assert tanimoto(_fp(set()), _fp(set())) == 1.0
    with pytest.raises(ValueError):
        tanimoto(_fp({1}, 8), _fp({1}, 16))


@given(st.sets(st.integers(0, 31)), st.sets(st.integers(0, 31)))
def test_tanimoto_symmetric_bounded(a, b):
    x, y = _fp(a, 32), _fp(b, 32)
    t = tanimoto(x, y)
    assert t == tanimoto(y, x) and 0.0 <= t <= 1.0


def test_gram_matrix_psd_on_solvent_pool():
    smiles = sorted({s for s, *_ in _candidate_smiles()})
    bits = np.stack([ecfp_from_smiles(s).bits for s in smiles])
    K = tanimoto_matrix(bits)
    K = (K + K.T) / 2
    assert np.linalg.eigvalsh(K).min() >= -1e-8
    np.testing.assert_allclose(np.diag(K), 1.0)
