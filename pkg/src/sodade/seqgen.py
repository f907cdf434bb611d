"""Solvent records -> shuffled, masked training sequences and batches.

Every sequence is the 12 (property, value) items in some order, optionally
preceded by a solvent-type token at position 0. Random streams come from
numpy's Philox counter-based generator keyed by (seed, solvent, epoch, draw),
so a sampler is reproducible across platforms and parallelisable per item.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .dataio import N_PROPS, DataError, PropertySchema, SolventRecord

UNK = "<unk>"


class SkipRecord(DataError):
    """Record cannot produce a training item (fewer than two present properties)."""


class TypeVocab:
    """Solvent-type vocabulary; index 0 is reserved for unknown types."""

    def __init__(self, types: Sequence[str]):
        self.types = (UNK,) + tuple(sorted(set(types) - {UNK}))
        self._index = {t: i for i, t in enumerate(self.types)}

    def __len__(self):
        return len(self.types)

    def __eq__(self, other):
        return isinstance(other, TypeVocab) and self.types == other.types

    def index(self, solvent_type: str) -> int:
        return self._index.get(solvent_type, 0)

    @classmethod
    def from_records(cls, records):
        return cls([r.solvent_type for r in records])


def item_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent Philox stream for a (seed, keys...) tuple."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF, *map(int, keys)])
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class SolventSequence:
    type_token: int
    prop_idx: np.ndarray  # [12] int permutation of 0..11
    values: np.ndarray  # [12] normalised, NaN = missing

    @property
    def missing(self):
        return np.isnan(self.values)


@dataclass(frozen=True)
class MaskedExample:
    type_token: int
    prop_idx: np.ndarray
    values: np.ndarray  # model input; 0 at masked and missing positions
    masked: np.ndarray
    missing: np.ndarray
    target: np.ndarray  # NaN except at masked positions


@dataclass
class MaskedBatch:
    type_token: np.ndarray  # [B]
    prop_idx: np.ndarray  # [B, 12]
    values: np.ndarray  # [B, 12]
    masked: np.ndarray  # [B, 12] bool
    missing: np.ndarray  # [B, 12] bool
    target: np.ndarray  # [B, 12], NaN where not masked

    def __len__(self):
        return self.prop_idx.shape[0]


def build_sequence(record: SolventRecord, schema: PropertySchema, permutation,
                   vocab: Optional[TypeVocab] = None) -> SolventSequence:
    perm = np.asarray(permutation, dtype=np.int64)
    if perm.shape != (N_PROPS,) or sorted(perm.tolist()) != list(range(N_PROPS)):
        raise ValueError(f"not a permutation of 0..{N_PROPS - 1}: {perm.tolist()}")
    z = schema.normalize(record.values)
    tok = vocab.index(record.solvent_type) if vocab is not None else 0
    return SolventSequence(tok, perm, z[perm])


def mask_example(seq: SolventSequence, masked) -> MaskedExample:
    masked = np.asarray(masked, dtype=bool)
    missing = seq.missing
    if np.any(masked & missing):
        raise ValueError("cannot mask a missing position")
    hidden = masked | missing
    values = np.where(hidden, 0.0, seq.values)
    target = np.where(masked, seq.values, np.nan)
    return MaskedExample(seq.type_token, seq.prop_idx, values, masked, missing, target)


def sample_training_item(record: SolventRecord, schema: PropertySchema, rng: np.random.Generator,
                         mask_rate: float = 0.3, vocab: Optional[TypeVocab] = None) -> MaskedExample:
    """Random permutation plus Bernoulli masking of present items (at least one masked)."""
    if record.n_present < 2:
        raise SkipRecord(f"{record.name}: {record.n_present} present properties; need >= 2")
    perm = rng.permutation(N_PROPS)
    seq = build_sequence(record, schema, perm, vocab)
    present = ~seq.missing
    masked = (rng.random(N_PROPS) < mask_rate) & present
    if not masked.any():
        masked[rng.choice(np.flatnonzero(present))] = True
    return mask_example(seq, masked)


def expected_mask_fraction(mask_rate: float, n_present: int = N_PROPS) -> float:
    """Exact expected fraction of present items masked, including the at-least-one floor."""
    from math import comb

    total = 0.0
    for k in range(n_present + 1):
        pk = comb(n_present, k) * mask_rate ** k * (1 - mask_rate) ** (n_present - k)
        total += pk * max(k, 1)
    return total / n_present


def collate(items: Sequence[MaskedExample]) -> MaskedBatch:
    if not items:
        raise ValueError("collate: empty item list")
    return MaskedBatch(
        type_token=np.array([it.type_token for it in items], dtype=np.int64),
        prop_idx=np.stack([it.prop_idx for it in items]).astype(np.int64),
        values=np.stack([it.values for it in items]).astype(np.float64),
        masked=np.stack([it.masked for it in items]),
        missing=np.stack([it.missing for it in items]),
        target=np.stack([it.target for it in items]).astype(np.float64),
    )


def iter_batches(items: Sequence[MaskedExample], batch_size: int):
    if not items:
        raise ValueError("no items to batch")
    for i in range(0, len(items), batch_size):
        yield collate(items[i:i + batch_size])


def sample_epoch(records: Sequence[SolventRecord], schema: PropertySchema, seed: int, epoch: int,
                 samples_per_solvent: int = 10, mask_rate: float = 0.3,
                 vocab: Optional[TypeVocab] = None) -> list:
    """All training items for one epoch, in a seeded shuffled order.

    Item streams are keyed by the record's position in ``records``; records
    with fewer than two present properties are skipped.
    """
    items = []
    for sid, rec in enumerate(records):
        if rec.n_present < 2:
            continue
        for draw in range(samples_per_solvent):
            items.append(sample_training_item(rec, schema, item_rng(seed, sid, epoch, draw), mask_rate, vocab))
    order = item_rng(seed, 0xEB0C, epoch).permutation(len(items))
    return [items[i] for i in order]


def one_out_example(record: SolventRecord, schema: PropertySchema, prop: int,
                    vocab: Optional[TypeVocab] = None) -> MaskedExample:
    """All other properties in canonical order, then ``prop`` masked in the last slot."""
    perm = [j for j in range(N_PROPS) if j != prop] + [prop]
    seq = build_sequence(record, schema, perm, vocab)
    if np.isnan(seq.values[-1]):
        raise DataError(f"{record.name}: property {schema.names[prop]} is missing")
    masked = np.zeros(N_PROPS, dtype=bool)
    masked[-1] = True
    return mask_example(seq, masked)


def unmasked_example(record: SolventRecord, schema: PropertySchema, permutation=None,
                     vocab: Optional[TypeVocab] = None) -> MaskedExample:
    perm = np.arange(N_PROPS) if permutation is None else permutation
    seq = build_sequence(record, schema, perm, vocab)
    return mask_example(seq, np.zeros(N_PROPS, dtype=bool))
