"""Synthetic stand-ins for the solvent property table and the reaction table.

Solvents are small organic molecules built from a handful of families. Three
latent factors per solvent come from simple structural counts plus an
idiosyncratic component; the twelve "properties" are noisy linear functions
of the latents, rescaled to plausible ranges. Reaction outcomes follow a
first-order kinetic model driven by the same latents, so a representation
that recovers the latents from the properties is useful downstream.
"""

from __future__ import annotations

import numpy as np

from .chem import parse_smiles, graph_invariant
from .dataio import N_PROPS, ReactionRecord, SolventRecord, SolventTable, canonical_reaction

# (mean, std) per property in canonical order
PROPERTY_SCALES = (
    (45.0, 8.0), (0.3, 0.35), (0.45, 0.25), (0.6, 0.25), (0.1, 0.2), (0.45, 0.25),
    (0.75, 0.05), (0.5, 0.3), (0.012, 0.004), (1.42, 0.04), (0.25, 0.02), (8.0, 4.0),
)


def _chain(n):
    return "C" * n


def _candidate_smiles():
    """(smiles, type, polarity, donor) for every generated molecule."""
    out = []
    for n in range(3, 13):
        out.append((_chain(n), "alkane", -1.5, 0.0))
    for n in range(1, 9):
        out.append(("CC(C)" + _chain(n), "alkane", -1.5, 0.0))
        out.append(("CC(C)(C)" + _chain(n), "alkane", -1.5, 0.0))
    for r in range(4, 9):
        out.append(("C1" + _chain(r - 1) + "1", "cycloalkane", -1.3, 0.0))
        out.append(("CC1" + _chain(r - 1) + "1", "cycloalkane", -1.3, 0.0))
    for n in range(1, 11):
        out.append((_chain(n) + "O", "alcohol", 1.0, 1.0))
    for n in range(1, 7):
        out.append(("CC(O)" + _chain(n), "alcohol", 0.9, 0.9))
        out.append(("OCC" + _chain(n - 1) + "O", "alcohol", 1.4, 1.6))
    for a in range(1, 6):
        for b in range(a, 7):
            out.append((_chain(a) + "O" + _chain(b), "ether", -0.3, 0.0))
    for r in (4, 5, 6):
        out.append(("C1" + _chain(r - 2) + "O1", "ether", 0.0, 0.0))
        out.append(("CC1" + _chain(r - 2) + "O1", "ether", -0.1, 0.0))
    for a in range(1, 5):
        for b in range(a, 6):
            out.append((_chain(a) + "C(=O)" + _chain(b), "ketone", 0.6, 0.0))
    for a in range(0, 4):
        for b in range(1, 6):
            out.append((_chain(a) + "C(=O)O" + _chain(b), "ester", 0.3, 0.0))
    for n in range(0, 8):
        out.append((_chain(n) + "C#N", "nitrile", 1.1, 0.0))
    for n in range(1, 9):
        out.append((_chain(n) + "Cl", "halogenated", 0.1, 0.0))
        out.append((_chain(n) + "Br", "halogenated", 0.1, 0.0))
    out += [("ClCCl", "halogenated", 0.3, 0.1), ("ClC(Cl)Cl", "halogenated", 0.2, 0.3),
            ("ClC(Cl)(Cl)Cl", "halogenated", -0.8, 0.0), ("ClCCCl", "halogenated", 0.3, 0.0)]
    for sub in ("", "C", "CC", "CCC", "C(C)C", "Cl", "Br", "F", "OC", "C#N", "C(C)(C)C", "CCCC"):
        out.append(("c1ccccc1" + sub, "aromatic", -0.4 + (0.5 if sub in ("C#N", "OC") else 0.0), 0.0))
    for a in (1, 2, 3):
        out.append(("CN(C)C(=O)" + _chain(a), "amide", 1.3, 0.0))
    out += [("CN(C)C=O", "amide", 1.3, 0.0), ("CC(=O)N(C)C", "amide", 1.3, 0.0), ("O=C1CCCN1C", "amide", 1.3, 0.0),
            ("CCN(CC)C=O", "amide", 1.2, 0.0), ("NC=O", "amide", 1.8, 1.4), ("CNC=O", "amide", 1.6, 0.8)]
    for n in range(1, 8):
        out.append((_chain(n) + "N", "amine", 0.4, 0.6))
        out.append((_chain(n) + "N(C)C", "amine", 0.0, 0.0))
    for n in range(0, 6):
        out.append((_chain(n) + "C(=O)O", "acid", 1.5, 1.8))
    for n in range(1, 7):
        out.append((_chain(n) + "I", "halogenated", 0.0, 0.0))
        out.append((_chain(n) + "F", "halogenated", 0.2, 0.0))
    for sub in ("O", "N", "CO", "CCO", "I", "CCl", "C=O", "OCC"):
        out.append(("c1ccccc1" + sub, "aromatic", 0.4 if sub in ("O", "N", "CO", "CCO") else -0.2,
                    0.8 if sub in ("O", "N", "CO", "CCO") else 0.0))
    out += [("CS(C)=O", "sulfoxide", 1.6, 0.0), ("O=S1(=O)CCCC1", "sulfoxide", 1.5, 0.0),
            ("O", "water", 2.2, 2.0), ("C[N+](=O)[O-]", "nitro", 1.2, 0.1), ("CC[N+](=O)[O-]", "nitro", 1.1, 0.1)]
    return out


def _structure_counts(smiles):
    mol = parse_smiles(smiles)
    heavy = len(mol.atoms)
    arom = sum(a.aromatic for a in mol.atoms)
    halo = sum(a.element in ("Cl", "Br", "F", "I") for a in mol.atoms)
    return mol, heavy, arom, halo


def make_solvent_table(n=200, seed=0, missing_rate=0.3, latent_noise=0.35, prop_noise=0.05):
    """Return (table, latents [n, 3]) with ``n`` distinct solvents."""
    rng = np.random.default_rng(seed)
    pool = []
    seen = set()
    for smi, typ, pol, don in _candidate_smiles():
        mol, heavy, arom, halo = _structure_counts(smi)
        key = graph_invariant(mol)
        if key in seen:
            continue
        seen.add(key)
        pool.append((smi, typ, pol, don, heavy, arom, halo))
    if n > len(pool):
        raise ValueError(f"only {len(pool)} distinct synthetic solvents available, asked for {n}")
    pick = np.sort(rng.choice(len(pool), size=n, replace=False))
    rows = [pool[i] for i in pick]

    heavy = np.array([r[4] for r in rows], dtype=float)
    z = np.stack([
        np.array([r[2] for r in rows]) - 0.08 * heavy,
        np.array([r[3] for r in rows]) / np.maximum(1.0, heavy / 4.0),
        0.15 * heavy + 0.5 * np.array([r[5] for r in rows]) / 6.0 + 0.3 * np.array([r[6] for r in rows]),
    ], axis=1)
    z += latent_noise * rng.normal(size=z.shape)
    z = (z - z.mean(0)) / z.std(0)

    A = rng.normal(size=(N_PROPS, 3))
    A /= np.linalg.norm(A, axis=1, keepdims=True)
    std_props = z @ A.T + prop_noise * rng.normal(size=(n, N_PROPS))
    scales = np.array(PROPERTY_SCALES)
    props = std_props * scales[:, 1] + scales[:, 0]

    records = []
    type_counts = {}
    for i, (smi, typ, *_rest) in enumerate(rows):
        vals = [float(v) for v in props[i]]
        type_counts[typ] = type_counts.get(typ, 0) + 1
        # keep the first two of each type complete so splits always succeed
        if type_counts[typ] > 2 and rng.random() < missing_rate:
            k = int(rng.integers(1, 5))
            for j in rng.choice(N_PROPS, size=k, replace=False):
                vals[j] = None
        name = f"syn-{i:03d}-{typ}"
        records.append(SolventRecord(name, typ, smi, tuple(vals)))
    return SolventTable(records), z


def _outcomes(zs, temperature, time_min, rng, noise):
    k = np.exp(-0.6 + 0.7 * zs[0] + 0.35 * zs[2] + 0.04 * (temperature - 200.0))
    sm = np.exp(-k * time_min / 5.0)
    sel = 1.0 / (1.0 + np.exp(-(0.9 * zs[1] - 0.4 * zs[0])))
    conv = 1.0 - sm
    p2 = 0.95 * conv * sel
    p3 = 0.95 * conv * (1.0 - sel)
    out = np.array([sm, p2, p3]) + noise * rng.normal(size=3)
    return np.clip(out, 0.0, 1.0)


def make_reaction_table(table: SolventTable, latents, seed=0, n_solvents=24, n_pairs=13,
                        noise=0.01):
    """Single-solvent runs over a temperature/time grid plus binary mixture ramps."""
    rng = np.random.default_rng(seed + 1)
    complete = [i for i, r in enumerate(table.records) if r.is_complete]
    by_type = {}
    for i in complete:
        by_type.setdefault(table.records[i].solvent_type, []).append(i)
    chosen = []
    types = sorted(by_type)
    while len(chosen) < n_solvents:
        progressed = False
        for t in types:
            left = [i for i in by_type[t] if i not in chosen]
            if left and len(chosen) < n_solvents:
                chosen.append(int(rng.choice(left)))
                progressed = True
        if not progressed:
            break
    names = [table.records[i].name for i in chosen]
    z = {table.records[i].name: latents[i] for i in chosen}

    recs = []
    temps = (175.0, 200.0, 225.0)
    times = (2.0, 5.0, 10.0, 15.0)
    for nm in names:
        for T in temps:
            for t in times:
                sm, p2, p3 = _outcomes(z[nm], T, t, rng, noise)
                recs.append(canonical_reaction(nm, None, 1.0, T, t, sm, p2, p3))
    pairs = set()
    while len(pairs) < n_pairs:
        a, b = sorted(rng.choice(len(names), size=2, replace=False))
        pairs.add((names[a], names[b]))
    for a, b in sorted(pairs):
        for w in np.linspace(0.1, 0.9, 9):
            for T, t in ((175.0, 10.0), (200.0, 5.0), (225.0, 2.0)):
                zm = w * z[a] + (1 - w) * z[b]
                sm, p2, p3 = _outcomes(zm, T, t, rng, noise)
                recs.append(canonical_reaction(a, b, round(float(w), 6), T, t, sm, p2, p3))
    return recs


def benchmark_solvents(reactions) -> list:
    names = set()
    for r in reactions:
        names.add(r.solvent_a)
        if r.solvent_b is not None:
            names.add(r.solvent_b)
    return sorted(names)


__all__ = ["make_solvent_table", "make_reaction_table", "benchmark_solvents", "ReactionRecord"]
