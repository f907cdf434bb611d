"""SMILES parsing, ECFP-style circular fingerprints and Tanimoto similarity.

Aromaticity is read from lowercase atoms; there is no perception step.
"""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

AROMATIC = 1.5  # bond order code for aromatic bonds

ORGANIC = {"B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I"}
AROMATIC_ORGANIC = {"b", "c", "n", "o", "p", "s"}
VALENCES = {
    "B": (3,), "C": (4,), "N": (3,), "O": (2,), "P": (3, 5), "S": (2, 4, 6),
    "F": (1,), "Cl": (1,), "Br": (1,), "I": (1,),
}
# aromatic atoms that donate one electron to the ring and need a slot for it
_PI_ONE = {"B", "C", "N", "P"}
BOND_SYMBOLS = {"-": 1, "=": 2, "#": 3, ":": AROMATIC}

MASK64 = (1 << 64) - 1


class SmilesError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


@dataclass(frozen=True)
class Atom:
    element: str
    charge: int = 0
    hcount: int = 0
    aromatic: bool = False


@dataclass
class MolGraph:
    atoms: list
    bonds: list  # (i, j, order) with i < j
    ring: list  # bool per atom

    def __post_init__(self):
        n = len(self.atoms)
        seen = set()
        for i, j, _ in self.bonds:
            if not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"bond ({i}, {j}) out of range")
            if i == j:
                raise ValueError(f"self-bond on atom {i}")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise ValueError(f"duplicate bond {key}")
            seen.add(key)

    def __len__(self):
        return len(self.atoms)

    def neighbors(self):
        nb = [[] for _ in self.atoms]
        for i, j, o in self.bonds:
            nb[i].append((j, o))
            nb[j].append((i, o))
        return nb

    def degree(self, i):
        return sum(1 for a, b, _ in self.bonds if i in (a, b))


def ring_flags(n_atoms, bonds):
    """Atoms incident to at least one non-bridge bond lie on a cycle."""
    adj = [[] for _ in range(n_atoms)]
    for k, (i, j, _) in enumerate(bonds):
        adj[i].append((j, k))
        adj[j].append((i, k))
    disc = [-1] * n_atoms
    low = [0] * n_atoms
    bridges = set()
    timer = 0
    for root in range(n_atoms):
        if disc[root] != -1:
            continue
        disc[root] = low[root] = timer
        timer += 1
        stack = [(root, -1, iter(adj[root]))]
        while stack:
            v, parent_edge, it = stack[-1]
            advanced = False
            for w, k in it:
                if k == parent_edge:
                    continue
                if disc[w] == -1:
                    disc[w] = low[w] = timer
                    timer += 1
                    stack.append((w, k, iter(adj[w])))
                    advanced = True
                    break
                low[v] = min(low[v], disc[w])
            if advanced:
                continue
            stack.pop()
            if stack:
                u = stack[-1][0]
                low[u] = min(low[u], low[v])
                if low[v] > disc[u]:
                    bridges.add(parent_edge)
    flags = [False] * n_atoms
    for k, (i, j, _) in enumerate(bonds):
        if k not in bridges:
            flags[i] = flags[j] = True
    return flags


# --- parser --------------------------------------------------------------

_TWO_LETTER = {
    "He", "Li", "Be", "Ne", "Na", "Mg", "Al", "Si", "Cl", "Ar", "Ca", "Sc", "Ti", "Cr", "Mn", "Fe",
    "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr", "Zr", "Nb", "Mo", "Ru",
    "Rh", "Pd", "Ag", "Cd", "In", "Sn", "Sb", "Te", "Xe", "Cs", "Ba", "La", "Hf", "Ta", "Re", "Os",
    "Ir", "Pt", "Au", "Hg", "Tl", "Pb", "Bi",
}
_BRACKET_RE = re.compile(
    r"(?P<iso>\d*)(?P<sym>[A-Z][a-z]?|se|as|[bcnops]|\*)(?P<chiral>@(?:@|TH\d|AL\d|SP\d|TB\d+|OH\d+)?)?"
    r"(?P<h>H\d*)?(?P<charge>[+-]\d+|\++|-+)?(?::\d+)?$"
)


def _parse_bracket(s, start):
    """Parse ``[...]`` starting at ``start`` (the '['). Returns (Atom, end)."""
    end = s.find("]", start)
    if end == -1:
        raise SmilesError("unclosed bracket atom", start)
    body = s[start + 1:end]
    m = _BRACKET_RE.match(body)
    if m and m.group("sym")[0].isupper() and len(m.group("sym")) == 2 and m.group("sym") not in _TWO_LETTER:
        m = None
    if not m:
        raise SmilesError(f"unparseable bracket atom [{body}]", start + 1)
    if m.group("iso"):
        warnings.warn(f"isotope {m.group('iso')} ignored in {s!r}", stacklevel=3)
    if m.group("chiral"):
        warnings.warn(f"chirality ignored in {s!r}", stacklevel=3)
    sym = m.group("sym")
    aromatic = sym[0].islower()
    element = sym.capitalize() if aromatic else sym
    h = m.group("h")
    hcount = 0 if not h else (int(h[1:]) if len(h) > 1 else 1)
    ch = m.group("charge") or ""
    if not ch:
        charge = 0
    elif ch[1:].isdigit():
        charge = int(ch)
    else:
        charge = len(ch) if ch[0] == "+" else -len(ch)
    return Atom(element, charge, hcount, aromatic), end + 1


def parse_smiles(s: str) -> MolGraph:
    if not s:
        raise SmilesError("empty SMILES", 0)
    atoms: list = []
    bonds: dict = {}
    bracket = []  # per-atom: hydrogens explicit?
    prev: Optional[int] = None
    pending_bond: Optional[float] = None
    pending_offset = 0
    branch_stack: list = []
    rings: dict = {}
    i = 0
    n = len(s)

    def add_bond(a, b, order, offset):
        key = (min(a, b), max(a, b))
        if a == b:
            raise SmilesError("ring bond to itself", offset)
        if key in bonds:
            raise SmilesError("duplicate bond", offset)
        if order is None:
            order = AROMATIC if atoms[a].aromatic and atoms[b].aromatic else 1
        bonds[key] = order

    while i < n:
        c = s[i]
        start = i
        atom = None
        if c == "[":
            atom, i = _parse_bracket(s, i)
            bracket.append(True)
        elif s.startswith(("Cl", "Br"), i):
            atom = Atom(s[i:i + 2])
            bracket.append(False)
            i += 2
        elif c in ORGANIC:
            atom = Atom(c)
            bracket.append(False)
            i += 1
        elif c in AROMATIC_ORGANIC:
            atom = Atom(c.upper(), aromatic=True)
            bracket.append(False)
            i += 1
        elif c in BOND_SYMBOLS:
            if pending_bond is not None:
                raise SmilesError("two consecutive bond symbols", i)
            pending_bond = BOND_SYMBOLS[c]
            pending_offset = i
            i += 1
            continue
        elif c in "/\\":
            warnings.warn(f"directional bond ignored in {s!r}", stacklevel=2)
            if pending_bond is not None:
                raise SmilesError("two consecutive bond symbols", i)
            pending_bond = 1
            pending_offset = i
            i += 1
            continue
        elif c == ".":
            if pending_bond is not None or prev is None:
                raise SmilesError("misplaced '.'", i)
            prev = None
            i += 1
            continue
        elif c == "(":
            if prev is None:
                raise SmilesError("branch without a preceding atom", i)
            branch_stack.append((prev, i))
            i += 1
            continue
        elif c == ")":
            if not branch_stack:
                raise SmilesError("unbalanced ')'", i)
            if pending_bond is not None:
                raise SmilesError("bond symbol before ')'", pending_offset)
            prev, _ = branch_stack.pop()
            i += 1
            continue
        elif c.isdigit() or c == "%":
            if prev is None:
                raise SmilesError("ring closure without an atom", i)
            if c == "%":
                label = s[i + 1:i + 3]
                if len(label) != 2 or not label.isdigit():
                    raise SmilesError("bad %nn ring label", i)
                num = int(label)
                i += 3
            else:
                num = int(c)
                i += 1
            if num in rings:
                other, order, off = rings.pop(num)
                if order is not None and pending_bond is not None and order != pending_bond:
                    raise SmilesError("conflicting ring bond orders", start)
                add_bond(other, prev, pending_bond if pending_bond is not None else order, start)
            else:
                rings[num] = (prev, pending_bond, start)
            pending_bond = None
            continue
        else:
            raise SmilesError(f"unknown symbol {c!r}", i)

        atoms.append(atom)
        idx = len(atoms) - 1
        if prev is not None:
            add_bond(prev, idx, pending_bond, start)
        elif pending_bond is not None:
            raise SmilesError("bond symbol without a preceding atom", pending_offset)
        pending_bond = None
        prev = idx

    if branch_stack:
        raise SmilesError("unbalanced '('", branch_stack[-1][1])
    if rings:
        num, (_, _, off) = next(iter(sorted(rings.items())))
        raise SmilesError(f"unclosed ring bond {num}", off)
    if pending_bond is not None:
        raise SmilesError("trailing bond symbol", pending_offset)
    if not atoms:
        raise SmilesError("no atoms", 0)

    bond_list = [(a, b, o) for (a, b), o in bonds.items()]
    # implicit hydrogens for organic-subset atoms
    order_sum = [0.0] * len(atoms)
    for a, b, o in bond_list:
        w = 1 if o == AROMATIC else o
        order_sum[a] += w
        order_sum[b] += w
    final = []
    for k, atom in enumerate(atoms):
        if bracket[k]:
            final.append(atom)
            continue
        used = order_sum[k] + (1 if atom.aromatic and atom.element in _PI_ONE else 0)
        h = 0
        for v in VALENCES[atom.element]:
            if v >= used:
                h = int(v - used)
                break
        final.append(Atom(atom.element, 0, h, atom.aromatic))
    return MolGraph(final, bond_list, ring_flags(len(final), bond_list))


# --- hashing / invariants ------------------------------------------------

def _mix64(x):
    """splitmix64 finaliser."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def hash_ints(values):
    h = 0x243F6A8885A308D3
    for v in values:
        h = _mix64(h ^ (v & MASK64))
    return h


def _element_code(sym):
    return hash_ints([ord(ch) for ch in sym])


def _bond_code(order):
    return 4 if order == AROMATIC else int(order)


def atom_invariants(mol: MolGraph):
    """Initial per-atom identifiers: (element, degree, charge, H count, aromatic, in-ring)."""
    deg = [0] * len(mol)
    for a, b, _ in mol.bonds:
        deg[a] += 1
        deg[b] += 1
    return [
        hash_ints([_element_code(at.element), deg[k], at.charge, at.hcount, int(at.aromatic), int(mol.ring[k])])
        for k, at in enumerate(mol.atoms)
    ]


def morgan_identifiers(mol: MolGraph, radius: int):
    """Identifiers of every atom environment for iterations 0..radius."""
    nb = mol.neighbors()
    ids = atom_invariants(mol)
    layers = [list(ids)]
    for it in range(1, radius + 1):
        new = []
        for k in range(len(mol)):
            env = sorted((_bond_code(o), ids[j]) for j, o in nb[k])
            flat = [it, ids[k]]
            for bc, nid in env:
                flat.extend((bc, nid))
            new.append(hash_ints(flat))
        ids = new
        layers.append(list(ids))
    return layers


def graph_invariant(mol: MolGraph, iterations: Optional[int] = None):
    """Sorted multiset of refined atom identifiers; equal for isomorphic graphs."""
    iterations = len(mol) if iterations is None else iterations
    layers = morgan_identifiers(mol, iterations)
    return tuple(sorted(layers[-1])) + (len(mol.bonds),)


# --- fingerprints --------------------------------------------------------

@dataclass
class BitFingerprint:
    bits: np.ndarray  # bool [nbits]
    radius: int

    @property
    def nbits(self):
        return self.bits.size

    def on_bits(self):
        return [int(i) for i in np.flatnonzero(self.bits)]

    def __eq__(self, other):
        return (isinstance(other, BitFingerprint) and self.radius == other.radius
                and np.array_equal(self.bits, other.bits))


def ecfp(mol: MolGraph, radius: int = 2, nbits: int = 2048) -> BitFingerprint:
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if nbits <= 0 or nbits & (nbits - 1):
        raise ValueError("nbits must be a power of two")
    bits = np.zeros(nbits, dtype=bool)
    for layer in morgan_identifiers(mol, radius):
        for ident in layer:
            bits[ident % nbits] = True
    return BitFingerprint(bits, radius)


def ecfp_from_smiles(smiles: str, radius: int = 2, nbits: int = 2048) -> BitFingerprint:
    return ecfp(parse_smiles(smiles), radius, nbits)


def tanimoto(a: BitFingerprint, b: BitFingerprint) -> float:
    if a.nbits != b.nbits:
        raise ValueError(f"fingerprint length mismatch: {a.nbits} vs {b.nbits}")
    union = int(np.count_nonzero(a.bits | b.bits))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(a.bits & b.bits)) / union


def tanimoto_matrix(A, B=None):
    """Pairwise Tanimoto between rows of two boolean matrices."""
    A = np.asarray(A, dtype=np.float64)
    B = A if B is None else np.asarray(B, dtype=np.float64)
    inter = A @ B.T
    union = A.sum(1)[:, None] + B.sum(1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        k = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 1.0)
    return k


# --- serialisation -------------------------------------------------------

def _atom_token(atom: Atom):
    sym = atom.element.lower() if atom.aromatic else atom.element
    h = "" if atom.hcount == 0 else ("H" if atom.hcount == 1 else f"H{atom.hcount}")
    if atom.charge == 0:
        ch = ""
    elif abs(atom.charge) == 1:
        ch = "+" if atom.charge > 0 else "-"
    else:
        ch = f"{'+' if atom.charge > 0 else '-'}{abs(atom.charge)}"
    return f"[{sym}{h}{ch}]"


def _bond_token(order, a: Atom, b: Atom):
    if order == AROMATIC:
        return "" if a.aromatic and b.aromatic else ":"
    if order == 1:
        return "-" if a.aromatic and b.aromatic else ""
    return {2: "=", 3: "#"}[order]


def to_smiles(mol: MolGraph) -> str:
    """Bracket-atom SMILES that re-parses to the same graph.

    Traversal order follows refined atom ranks, so isomorphic inputs give
    the same string in most cases (no full canonicalisation for symmetric ties).
    """
    n = len(mol)
    rank = morgan_identifiers(mol, n)[-1] if n else []
    nb = mol.neighbors()
    order_of = {}
    for a, b, o in mol.bonds:
        order_of[(a, b)] = order_of[(b, a)] = o

    visited = [False] * n
    tree_edges = set()
    # DFS to find tree edges / ring closures
    ring_edges = []
    parts = []
    for root in sorted(range(n), key=lambda k: (rank[k], k)):
        if visited[root]:
            continue
        stack = [(root, -1)]
        while stack:
            v, parent = stack.pop()
            if visited[v]:
                continue
            visited[v] = True
            if parent >= 0:
                tree_edges.add((min(v, parent), max(v, parent)))
            for w, _ in sorted(nb[v], key=lambda t: (-rank[t[0]], -t[0])):
                if not visited[w]:
                    stack.append((w, v))
        parts.append(root)
    for a, b, o in mol.bonds:
        if (min(a, b), max(a, b)) not in tree_edges:
            ring_edges.append((min(a, b), max(a, b)))

    closures = {k: [] for k in range(n)}
    for label, (a, b) in enumerate(ring_edges, start=1):
        closures[a].append((label, b))
        closures[b].append((label, a))

    def ring_label(label):
        return str(label) if label < 10 else f"%{label:02d}"

    emitted = [False] * n

    def write(v, parent):
        emitted[v] = True
        out = [_atom_token(mol.atoms[v])]
        for label, other in closures[v]:
            out.append(_bond_token(order_of[(v, other)], mol.atoms[v], mol.atoms[other]) if not emitted[other] else "")
            out.append(ring_label(label))
        children = [w for w, _ in sorted(nb[v], key=lambda t: (rank[t[0]], t[0]))
                    if w != parent and (min(v, w), max(v, w)) in tree_edges and not emitted[w]]
        for k, w in enumerate(children):
            piece = _bond_token(order_of[(v, w)], mol.atoms[v], mol.atoms[w]) + write(w, v)
            out.append(piece if k == len(children) - 1 else f"({piece})")
        return "".join(out)

    return ".".join(write(root, -1) for root in parts)
