"""Second, deliberately plain implementation of the circular-fingerprint hash.

Molecules are given as hand-written atom/bond tables, not parsed from
SMILES, and ring bonds are found by edge-removal connectivity rather than
bridge finding. Used to build and re-check tests/data/ecfp_golden.tsv.
"""

M64 = (1 << 64) - 1


def splitmix(x):
    x = (x + 0x9E3779B97F4A7C15) % (1 << 64)
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) % (1 << 64)
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) % (1 << 64)
    x ^= x >> 31
    return x


def fold(seq):
    acc = 0x243F6A8885A308D3
    for v in seq:
        acc = splitmix(acc ^ (v % (1 << 64)))
    return acc


# atoms: (element, charge, total H, aromatic); bonds: (i, j, order) with "ar" for aromatic
MOLECULES = {
    "C": ([("C", 0, 4, False)], []),
    "CCO": ([("C", 0, 3, False), ("C", 0, 2, False), ("O", 0, 1, False)], [(0, 1, 1), (1, 2, 1)]),
    "CC(=O)O": ([("C", 0, 3, False), ("C", 0, 0, False), ("O", 0, 0, False), ("O", 0, 1, False)],
                [(0, 1, 1), (1, 2, 2), (1, 3, 1)]),
    "c1ccccc1": ([("C", 0, 1, True)] * 6, [(i, (i + 1) % 6, "ar") for i in range(6)]),
    "c1ccncc1": ([("C", 0, 1, True)] * 3 + [("N", 0, 0, True)] + [("C", 0, 1, True)] * 2,
                 [(i, (i + 1) % 6, "ar") for i in range(6)]),
    "CS(C)=O": ([("C", 0, 3, False), ("S", 0, 0, False), ("C", 0, 3, False), ("O", 0, 0, False)],
                [(0, 1, 1), (1, 2, 1), (1, 3, 2)]),
    "C[N+](=O)[O-]": ([("C", 0, 3, False), ("N", 1, 0, False), ("O", 0, 0, False), ("O", -1, 0, False)],
                      [(0, 1, 1), (1, 2, 2), (1, 3, 1)]),
    "ClC(Cl)Cl": ([("Cl", 0, 0, False), ("C", 0, 1, False), ("Cl", 0, 0, False), ("Cl", 0, 0, False)],
                  [(0, 1, 1), (1, 2, 1), (1, 3, 1)]),
    "CC#N": ([("C", 0, 3, False), ("C", 0, 0, False), ("N", 0, 0, False)], [(0, 1, 1), (1, 2, 3)]),
    "C1CCOC1": ([("C", 0, 2, False)] * 3 + [("O", 0, 0, False), ("C", 0, 2, False)],
                [(i, (i + 1) % 5, 1) for i in range(5)]),
    "CC1CCCCC1": ([("C", 0, 3, False), ("C", 0, 1, False)] + [("C", 0, 2, False)] * 5,
                  [(0, 1, 1)] + [(1 + i, 1 + (i + 1) % 6, 1) for i in range(6)]),
}


def _connected_without(n, bonds, skip):
    adj = {i: set() for i in range(n)}
    for k, (a, b, _) in enumerate(bonds):
        if k != skip:
            adj[a].add(b)
            adj[b].add(a)
    a, b, _ = bonds[skip]
    seen, stack = {a}, [a]
    while stack:
        u = stack.pop()
        for w in adj[u]:
            if w not in seen:
                seen.add(w)
                stack.append(w)
    return b in seen


def reference_bits(atoms, bonds, radius=2, nbits=2048):
    n = len(atoms)
    in_ring = [False] * n
    for k, (a, b, _) in enumerate(bonds):
        if _connected_without(n, bonds, k):
            in_ring[a] = in_ring[b] = True
    nbrs = [[] for _ in range(n)]
    for a, b, order in bonds:
        code = 4 if order == "ar" else order
        nbrs[a].append((code, b))
        nbrs[b].append((code, a))
    ids = []
    for i, (el, chg, h, arom) in enumerate(atoms):
        el_code = fold([ord(c) for c in el])
        ids.append(fold([el_code, len(nbrs[i]), chg, h, 1 if arom else 0, 1 if in_ring[i] else 0]))
    bits = {x % nbits for x in ids}
    for it in range(1, radius + 1):
        nxt = []
        for i in range(n):
            seq = [it, ids[i]]
            for code, nid in sorted((c, ids[j]) for c, j in nbrs[i]):
                seq += [code, nid]
            nxt.append(fold(seq))
        ids = nxt
        bits |= {x % nbits for x in ids}
    return sorted(bits)


def write_golden(path, radius=2, nbits=2048):
    with open(path, "w") as fh:
        for smi, (atoms, bonds) in MOLECULES.items():
            fh.write(smi + "\t" + " ".join(map(str, reference_bits(atoms, bonds, radius, nbits))) + "\n")


if __name__ == "__main__":
    import sys

    write_golden(sys.argv[1] if len(sys.argv) > 1 else "data/ecfp_golden.tsv")
