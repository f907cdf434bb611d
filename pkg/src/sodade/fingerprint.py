"""Learned solvent fingerprints, mixtures, PCA projection and conversion efficiency.

A fingerprint is the final-layer-norm hidden state at the last position of a
solvent's unmasked canonical-order sequence. Missing properties stay in the
sequence with their missing flag, so attention never reads them.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .dataio import DataError, PropertySchema, ReactionRecord, SolventRecord
from .seqgen import MaskedBatch, TypeVocab, collate, unmasked_example


class UndefinedValueError(ValueError):
    """Quantity is mathematically undefined for the given inputs."""


@dataclass(frozen=True)
class Fingerprint:
    solvent: str
    vector: np.ndarray
    source: str = ""

    def __post_init__(self):
        if not np.all(np.isfinite(self.vector)):
            raise ValueError(f"{self.solvent}: non-finite fingerprint")


def checkpoint_id(checkpoint) -> str:
    """Short content hash of a checkpoint's weights."""
    h = hashlib.sha256()
    for name in sorted(checkpoint.weights):
        h.update(name.encode())
        h.update(np.ascontiguousarray(checkpoint.weights[name], dtype="<f4").tobytes())
    return h.hexdigest()[:16]


def fingerprint_batch(records: Sequence[SolventRecord], schema: PropertySchema,
                      vocab: Optional[TypeVocab] = None, permutation=None) -> MaskedBatch:
    """Unmasked sequences for ``records``; canonical order unless ``permutation`` is given."""
    for r in records:
        if r.n_present == 0:
            raise DataError(f"{r.name}: every property is missing; no fingerprint possible")
    return collate([unmasked_example(r, schema, permutation, vocab) for r in records])


class Extractor:
    """Frozen model plus the schema and vocabulary needed to fingerprint records."""

    def __init__(self, checkpoint):
        self.model = checkpoint.model()
        self.schema = checkpoint.schema
        self.vocab = checkpoint.vocab
        self.source = checkpoint_id(checkpoint)

    def vectors(self, records: Sequence[SolventRecord], permutation=None) -> np.ndarray:
        batch = fingerprint_batch(records, self.schema, self.vocab, permutation)
        with ad.no_grad():
            h = self.model.last_hidden(batch).data
        return h.astype(np.float64)

    def __call__(self, record: SolventRecord, permutation=None) -> Fingerprint:
        return Fingerprint(record.name, self.vectors([record], permutation)[0], self.source)

    def all(self, records: Sequence[SolventRecord]) -> list:
        vecs = self.vectors(records)
        return [Fingerprint(r.name, v, self.source) for r, v in zip(records, vecs)]


def extract(checkpoint, record: SolventRecord, permutation=None) -> Fingerprint:
    return Extractor(checkpoint)(record, permutation)


def mix(fp_a, fp_b, w: float):
    """Weighted average ``w * a + (1 - w) * b`` of two fingerprints (or plain vectors)."""
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"mixing weight {w} outside [0, 1]")
    if isinstance(fp_a, Fingerprint):
        if fp_a.source != fp_b.source:
            raise ValueError("fingerprints come from different checkpoints")
        vec = w * fp_a.vector + (1.0 - w) * fp_b.vector
        return Fingerprint(f"{fp_a.solvent}|{fp_b.solvent}@{w!r}", vec, fp_a.source)
    return w * np.asarray(fp_a) + (1.0 - w) * np.asarray(fp_b)


# --- PCA -----------------------------------------------------------------

@dataclass(frozen=True)
class PcaProjection:
    mean: np.ndarray  # [D]
    components: np.ndarray  # [k, D], orthonormal rows
    explained: np.ndarray  # [k] variance fractions

    def project(self, vectors) -> np.ndarray:
        return (np.asarray(vectors, dtype=np.float64) - self.mean) @ self.components.T

    def reconstruct(self, coords) -> np.ndarray:
        return np.asarray(coords) @ self.components + self.mean


def pca_fit_project(vectors, k: int = 2):
    """Fit PCA by SVD of the centred data. Returns (projection, coordinates [N, k]).

    Each component is signed so that its largest-magnitude entry is positive.
    """
    X = np.asarray(vectors, dtype=np.float64)
    n, d = X.shape
    if n < 2:
        raise ValueError("PCA needs at least 2 vectors")
    if k < 1 or k > min(n - 1, d):
        raise ValueError(f"k={k} must be in 1..{min(n - 1, d)} for {n} vectors of dimension {d}")
    mean = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
    comps = vt[:k].copy()
    for i in range(k):
        if comps[i, np.argmax(np.abs(comps[i]))] < 0:
            comps[i] = -comps[i]
    total = float(np.sum(s ** 2))
    explained = (s[:k] ** 2) / total if total > 0 else np.zeros(k)
    proj = PcaProjection(mean, comps, explained)
    return proj, proj.project(X)


# --- conversion efficiency ----------------------------------------------

def conversion_efficiency(p2: float, p3: float, sm: float) -> float:
    """(p2 + p3) / (p2 + p3 + sm)."""
    if min(p2, p3, sm) < 0:
        raise ValueError(f"negative amount in ({p2}, {p3}, {sm})")
    total = p2 + p3 + sm
    if total == 0:
        raise UndefinedValueError("conversion efficiency undefined when all amounts are zero")
    return (p2 + p3) / total


def solvent_efficiencies(reactions: Sequence[ReactionRecord]) -> dict:
    """Per pure solvent: efficiency from its max P2, max P3 and min SM over single-solvent runs."""
    agg = {}
    for r in reactions:
        if r.solvent_b is not None:
            continue
        p2, p3, sm = agg.get(r.solvent_a, (-np.inf, -np.inf, np.inf))
        agg[r.solvent_a] = (max(p2, r.p2), max(p3, r.p3), min(sm, r.sm))
    out = {}
    for name, (p2, p3, sm) in agg.items():
        try:
            out[name] = conversion_efficiency(p2, p3, sm)
        except UndefinedValueError:
            pass
    return out


@dataclass
class TrajectoryRow:
    snapshot: str
    solvent: str
    pc1: float
    pc2: float
    efficiency: Optional[float]


def embedding_trajectory(snapshots: Sequence, records: Sequence[SolventRecord],
                         reactions: Sequence[ReactionRecord] = ()):
    """PCA coordinates of every solvent at every snapshot, on axes fitted to all snapshots pooled.

    ``snapshots`` is a sequence of (label, checkpoint). Returns (rows, projection).
    """
    if not snapshots:
        raise ValueError("no snapshots given")
    eff = solvent_efficiencies(reactions)
    blocks = [Extractor(ckpt).vectors(records) for _, ckpt in snapshots]
    pooled = np.concatenate(blocks)
    proj, coords = pca_fit_project(pooled, 2)
    rows = []
    n = len(records)
    for s, (label, _) in enumerate(snapshots):
        for i, r in enumerate(records):
            c = coords[s * n + i]
            rows.append(TrajectoryRow(str(label), r.name, float(c[0]), float(c[1]), eff.get(r.name)))
    return rows, proj


def write_trajectory(rows: Sequence[TrajectoryRow], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["snapshot", "solvent", "pc1", "pc2", "efficiency"])
        for r in rows:
            w.writerow([r.snapshot, r.solvent, repr(r.pc1), repr(r.pc2),
                        "" if r.efficiency is None else repr(float(r.efficiency))])


def write_fingerprints(fps: Sequence[Fingerprint], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        dim = len(fps[0].vector) if fps else 0
        w.writerow(["solvent"] + [f"f{i}" for i in range(dim)])
        for fp in fps:
            w.writerow([fp.solvent] + [repr(float(x)) for x in fp.vector])
