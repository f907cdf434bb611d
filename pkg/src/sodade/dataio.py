"""Loading, validation, normalisation and splitting of the solvent and reaction tables."""

from __future__ import annotations

import csv
import logging
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

PROPERTY_NAMES = (
    "ET30", "alpha", "beta", "pi_star", "SA", "SB", "SP", "SdP",
    "N_density", "n_refractive", "f_n", "delta",
)
N_PROPS = len(PROPERTY_NAMES)
SPANGE_COLUMNS = ("name", "type", "smiles") + PROPERTY_NAMES
CATECHOL_COLUMNS = ("solvent_a", "solvent_b", "frac_a", "temperature_C", "residence_time_min", "sm", "p2", "p3")
ALIAS_COLUMNS = ("from", "to")


class DataError(Exception):
    """Base class for bad input data (CLI exit code 3)."""


class DataFormatError(DataError):
    pass


class DataParseError(DataError):
    pass


class ValidationError(DataError):
    pass


class SplitError(DataError):
    pass


class ResolutionError(DataError):
    pass


@dataclass(frozen=True)
class SolventRecord:
    name: str
    solvent_type: str
    smiles: Optional[str]
    props: tuple  # 12 entries, float or None (missing)

    def __post_init__(self):
        if len(self.props) != N_PROPS:
            raise ValidationError(f"{self.name}: expected {N_PROPS} property slots, got {len(self.props)}")
        for p, v in zip(PROPERTY_NAMES, self.props):
            if v is not None and not math.isfinite(v):
                raise ValidationError(f"{self.name}: property {p} is not finite")
        if not self.solvent_type:
            raise ValidationError(f"{self.name}: empty solvent type")

    @property
    def values(self) -> np.ndarray:
        """Properties as float64 with NaN for missing slots."""
        return np.array([np.nan if v is None else v for v in self.props], dtype=np.float64)

    @property
    def present(self) -> np.ndarray:
        return np.array([v is not None for v in self.props])

    @property
    def n_present(self) -> int:
        return sum(v is not None for v in self.props)

    @property
    def is_complete(self) -> bool:
        return all(v is not None for v in self.props)


class SolventTable:
    """Ordered, name-indexed collection of solvent records."""

    def __init__(self, records: Iterable[SolventRecord]):
        self.records = tuple(records)
        self._index = {}
        for r in self.records:
            if r.name in self._index:
                raise ValidationError(f"duplicate solvent name {r.name!r}")
            self._index[r.name] = r

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __contains__(self, name):
        return name in self._index

    def __getitem__(self, name) -> SolventRecord:
        try:
            return self._index[name]
        except KeyError:
            raise ResolutionError(f"unknown solvent {name!r}") from None

    def __eq__(self, other):
        return isinstance(other, SolventTable) and self.records == other.records

    @property
    def names(self) -> list:
        return [r.name for r in self.records]

    def subset(self, names: Iterable[str]) -> list:
        return [self[n] for n in names]

    def values(self, names: Iterable[str]) -> np.ndarray:
        """[n, 12] float64 matrix with NaN for missing."""
        rows = [self[n].values for n in names]
        return np.array(rows, dtype=np.float64).reshape(len(rows), N_PROPS)


def _fmt(x: Optional[float]) -> str:
    return "" if x is None else repr(float(x))


def load_spange(path) -> SolventTable:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        for i, expected in enumerate(SPANGE_COLUMNS):
            got = header[i] if i < len(header) else "<missing>"
            if got != expected:
                raise DataFormatError(f"{path}: bad header column {i + 1}: expected {expected!r}, got {got!r}")
        if len(header) > len(SPANGE_COLUMNS):
            raise DataFormatError(f"{path}: unexpected extra column {header[len(SPANGE_COLUMNS)]!r}")

        records = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            row = [c.strip() for c in row] + [""] * (len(SPANGE_COLUMNS) - len(row))
            if len(row) > len(SPANGE_COLUMNS):
                raise DataParseError(f"{path}:{lineno}: too many cells")
            props = []
            for col, cell in zip(PROPERTY_NAMES, row[3:]):
                if cell == "":
                    props.append(None)
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise DataParseError(f"{path}:{lineno}: column {col!r}: not a number: {cell!r}") from None
                if not math.isfinite(v):
                    raise DataParseError(f"{path}:{lineno}: column {col!r}: non-finite value {cell!r}")
                props.append(v)
            records.append(SolventRecord(row[0], row[1], row[2] or None, tuple(props)))

    table = SolventTable(records)
    log.info("loaded %d solvents from %s", len(table), path)
    return table


def write_spange(table: SolventTable, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SPANGE_COLUMNS)
        for r in table:
            w.writerow([r.name, r.solvent_type, r.smiles or ""] + [_fmt(v) for v in r.props])


# --- normalisation -------------------------------------------------------

@dataclass(frozen=True)
class PropertySchema:
    names: tuple
    mean: tuple
    std: tuple

    def normalize(self, x):
        x = np.asarray(x, dtype=np.float64)
        return (x - np.asarray(self.mean)) / np.asarray(self.std)

    def denormalize(self, z):
        z = np.asarray(z, dtype=np.float64)
        return z * np.asarray(self.std) + np.asarray(self.mean)

    def to_dict(self):
        return {"names": list(self.names), "mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["names"]), tuple(float(v) for v in d["mean"]), tuple(float(v) for v in d["std"]))


def compute_schema(table: SolventTable, train_ids: Iterable[str]) -> PropertySchema:
    """Per-property mean and population std over present training values."""
    x = table.values(list(train_ids))
    means, stds = [], []
    for j, name in enumerate(PROPERTY_NAMES):
        col = x[:, j]
        col = col[~np.isnan(col)]
        if col.size < 2:
            raise ValidationError(f"property {name!r} has {col.size} present training values; need >= 2")
        mu = float(col.mean())
        sd = float(np.sqrt(np.mean((col - mu) ** 2)))
        if sd == 0.0:
            raise ValidationError(f"property {name!r} has zero variance in the training fold")
        means.append(mu)
        stds.append(sd)
    return PropertySchema(PROPERTY_NAMES, tuple(means), tuple(stds))


# --- splitting -----------------------------------------------------------

@dataclass(frozen=True)
class DataSplit:
    train_ids: tuple
    val_ids: tuple
    test_ids: tuple
    seed: int

    def __post_init__(self):
        a, b, c = set(self.train_ids), set(self.val_ids), set(self.test_ids)
        if a & b or a & c or b & c:
            raise SplitError("train/val/test sets overlap")

    def to_dict(self):
        return {"train": list(self.train_ids), "val": list(self.val_ids), "test": list(self.test_ids), "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["train"]), tuple(d["val"]), tuple(d["test"]), int(d["seed"]))


def split_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed)))


def split_solvents(table: SolventTable, catechol_types: Sequence[str], top_types: Sequence[str],
                   seed: int) -> DataSplit:
    """One random complete solvent per Catechol type for validation, one per
    most-common type for test; everything else trains."""
    rng = split_rng(seed)
    taken: set = set()

    def draw(kind):
        chosen = []
        for t in kind:
            pool = sorted(r.name for r in table if r.solvent_type == t and r.is_complete and r.name not in taken)
            if not pool:
                raise SplitError(f"no available complete solvent of type {t!r}")
            pick = pool[int(rng.integers(len(pool)))]
            taken.add(pick)
            chosen.append(pick)
        return tuple(chosen)

    val = draw(catechol_types)
    test = draw(top_types)
    train = tuple(n for n in table.names if n not in taken)
    return DataSplit(train, val, test, int(seed))


def default_split_types(table: SolventTable, reactions: Optional[Sequence["ReactionRecord"]] = None,
                        n_val: int = 9, n_test: int = 5):
    """Type lists ranked by frequency.

    With a reaction table, frequency counts reaction rows per solvent type
    (both mixture components); otherwise the solvent table itself is used.
    Only types that have a complete solvent are eligible. Ties break by name.
    """
    counts: Counter = Counter()
    if reactions:
        for r in reactions:
            for name in (r.solvent_a, r.solvent_b):
                if name is not None and name in table:
                    counts[table[name].solvent_type] += 1
    else:
        counts.update(r.solvent_type for r in table)
    complete = Counter(r.solvent_type for r in table if r.is_complete)
    ranked = sorted((t for t in counts if complete[t] > 0), key=lambda t: (-counts[t], t))
    val_types = ranked[:n_val]
    # a type needs a second complete solvent to appear in both sets
    test_types = [t for t in val_types if complete[t] >= 2][:n_test]
    return val_types, test_types


# --- reaction table ------------------------------------------------------

@dataclass(frozen=True)
class ReactionRecord:
    solvent_a: str
    solvent_b: Optional[str]
    frac_a: float
    temperature: float
    residence_time: float
    sm: float
    p2: float
    p3: float

    def __post_init__(self):
        if not 0.0 <= self.frac_a <= 1.0:
            raise ValidationError(f"frac_a={self.frac_a} outside [0, 1]")
        if self.solvent_b is None and self.frac_a != 1.0:
            raise ValidationError("single-solvent record must have frac_a = 1")
        for k in ("sm", "p2", "p3"):
            v = getattr(self, k)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{k}={v} outside [0, 1]")

    @property
    def is_single(self):
        return self.solvent_b is None

    @property
    def outcomes(self):
        return (self.sm, self.p2, self.p3)


def load_aliases(path) -> dict:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if tuple(header) != ALIAS_COLUMNS:
            raise DataFormatError(f"{path}: alias header must be 'from,to', got {','.join(header)!r}")
        return {row[0].strip(): row[1].strip() for row in reader if row and row[0].strip()}


def canonical_reaction(a, b, frac_a, temperature, residence_time, sm, p2, p3) -> ReactionRecord:
    if b is not None and (b == a or frac_a == 1.0):
        b = None
        frac_a = 1.0
    elif b is not None and frac_a == 0.0:
        a, b, frac_a = b, None, 1.0
    return ReactionRecord(a, b, float(frac_a), float(temperature), float(residence_time),
                          float(sm), float(p2), float(p3))


def load_catechol(path, solvents: Optional[SolventTable] = None, aliases: Optional[dict] = None,
                  percent: Optional[bool] = None) -> list:
    """Read the reaction table.

    ``percent=None`` auto-detects: if any outcome cell exceeds 1 the outcome
    columns are treated as percentages and divided by 100.
    """
    path = Path(path)
    aliases = aliases or {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        for i, expected in enumerate(CATECHOL_COLUMNS):
            got = header[i] if i < len(header) else "<missing>"
            if got != expected:
                raise DataFormatError(f"{path}: bad header column {i + 1}: expected {expected!r}, got {got!r}")
        raw = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            row = [c.strip() for c in row]
            if len(row) != len(CATECHOL_COLUMNS):
                raise DataParseError(f"{path}:{lineno}: expected {len(CATECHOL_COLUMNS)} cells, got {len(row)}")
            try:
                nums = [float(c) if c != "" else (1.0 if i == 0 else math.nan) for i, c in enumerate(row[2:])]
            except ValueError as exc:
                raise DataParseError(f"{path}:{lineno}: {exc}") from None
            if any(math.isnan(v) for v in nums):
                raise DataParseError(f"{path}:{lineno}: empty numeric cell")
            raw.append((lineno, row[0], row[1] or None, nums))

    if percent is None:
        percent = any(v > 1.0 for _, _, _, nums in raw for v in nums[3:])
    scale = 0.01 if percent else 1.0

    records = []
    for lineno, a, b, (frac, temp, rt, sm, p2, p3) in raw:
        a = aliases.get(a, a)
        b = aliases.get(b, b) if b is not None else None
        if not 0.0 <= frac <= 1.0:
            raise ValidationError(f"{path}:{lineno}: frac_a={frac} outside [0, 1]")
        try:
            records.append(canonical_reaction(a, b, frac, temp, rt, sm * scale, p2 * scale, p3 * scale))
        except ValidationError as exc:
            raise ValidationError(f"{path}:{lineno}: {exc}") from None

    if solvents is not None:
        unknown = sorted({n for r in records for n in (r.solvent_a, r.solvent_b)
                          if n is not None and n not in solvents})
        if unknown:
            raise ResolutionError(f"{path}: solvents not in the solvent table: {', '.join(unknown)}")
    log.info("loaded %d reactions from %s (percent=%s)", len(records), path, percent)
    return records


def write_catechol(records: Sequence[ReactionRecord], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CATECHOL_COLUMNS)
        for r in records:
            w.writerow([r.solvent_a, r.solvent_b or "", repr(r.frac_a), repr(r.temperature),
                        repr(r.residence_time), repr(r.sm), repr(r.p2), repr(r.p3)])
