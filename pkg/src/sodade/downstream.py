"""Reaction-yield heads on top of solvent fingerprints, with cross-validated benchmarking.

The head maps a (possibly mixed) fingerprint through a small MLP, appends the
z-normalised temperature and residence time, and maps that through a second
MLP to (SM, P2, P3). Mixtures are linear in the fingerprints: each row's input
is ``M @ F`` where ``F`` stacks per-solvent fingerprints and ``M`` holds the
mixing weights, which keeps the backbone differentiable when fine-tuning.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from ._alloc import tune_allocator
from .autodiff import Linear, Module, Tensor
from .dataio import ReactionRecord, ResolutionError, SolventRecord, SolventTable
from .fingerprint import fingerprint_batch
from .seqgen import item_rng

log = logging.getLogger(__name__)

TASKS = ("single", "full")
MODES = ("frozen", "finetuned")


@dataclass(frozen=True)
class HeadConfig:
    mlp1: tuple = (64, 64, 32)
    mlp2: tuple = (34, 32, 3)
    lr: float = 1e-3
    backbone_lr_mult: float = 0.1
    epochs: int = 300
    finetune_epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    simplex: bool = False

    def __post_init__(self):
        if self.mlp2[0] != self.mlp1[-1] + 2:
            raise ValueError(f"mlp2 input {self.mlp2[0]} must equal mlp1 output {self.mlp1[-1]} + 2")
        if self.mlp2[-1] != 3:
            raise ValueError("mlp2 must end in 3 outputs (SM, P2, P3)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.finetune_epochs < 0:
            raise ValueError("finetune_epochs must be >= 0")
        if self.backbone_lr_mult < 0:
            raise ValueError("backbone_lr_mult must be >= 0")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("mlp1", "mlp2"):
            if k in d:
                d[k] = tuple(int(x) for x in d[k])
        return cls(**d)


class Mlp(Module):
    """Linear layers with GELU between them (none after the last)."""

    def __init__(self, sizes, rng, dtype=np.float32):
        self.layers = [Linear(a, b, rng, std=1.0 / math.sqrt(a), dtype=dtype) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.gelu(x)
        return x


class YieldHead(Module):
    def __init__(self, cfg: HeadConfig, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.mlp1 = Mlp(cfg.mlp1, rng, dtype)
        self.mlp2 = Mlp(cfg.mlp2, rng, dtype)
        self._simplex = cfg.simplex
        self._dtype = dtype

    def __call__(self, fp, cond):
        """fp [N, d] and cond [N, 2] (Tensors or arrays) -> raw outputs [N, 3]."""
        z = self.mlp1(fp if isinstance(fp, Tensor) else Tensor(np.asarray(fp, dtype=self._dtype)))
        c = cond if isinstance(cond, Tensor) else Tensor(np.asarray(cond, dtype=self._dtype))
        out = self.mlp2(ad.concat([z, c], axis=-1))
        if self._simplex:
            out = ad.softmax(out, axis=-1)
        return out


@dataclass(frozen=True)
class ConditionScaler:
    mean: tuple
    std: tuple

    @classmethod
    def fit(cls, records: Sequence[ReactionRecord]):
        x = np.array([[r.temperature, r.residence_time] for r in records], dtype=np.float64)
        std = x.std(axis=0)
        std[std == 0] = 1.0
        return cls(tuple(x.mean(axis=0)), tuple(std))

    def __call__(self, records: Sequence[ReactionRecord]) -> np.ndarray:
        x = np.array([[r.temperature, r.residence_time] for r in records], dtype=np.float64)
        return (x - np.array(self.mean)) / np.array(self.std)


def mixing_matrix(records: Sequence[ReactionRecord], solvents: Sequence[str]) -> np.ndarray:
    """[N, S] weights so that ``M @ F`` gives each row's (mixed) fingerprint."""
    col = {s: i for i, s in enumerate(solvents)}
    M = np.zeros((len(records), len(solvents)), dtype=np.float32)
    for i, r in enumerate(records):
        M[i, col[r.solvent_a]] += r.frac_a
        if r.solvent_b is not None:
            M[i, col[r.solvent_b]] += 1.0 - r.frac_a
    return M


def targets(records: Sequence[ReactionRecord]) -> np.ndarray:
    return np.array([[r.sm, r.p2, r.p3] for r in records], dtype=np.float64)


def solvents_of(records: Sequence[ReactionRecord]) -> list:
    names = set()
    for r in records:
        names.add(r.solvent_a)
        if r.solvent_b is not None:
            names.add(r.solvent_b)
    return sorted(names)


def resolve(table: SolventTable, names: Sequence[str]) -> list:
    missing = [n for n in names if n not in table]
    if missing:
        raise ResolutionError(f"solvents not in the property table: {', '.join(missing)}")
    return table.subset(names)


class Backbone:
    """Pretrained model wrapper producing fingerprints for a fixed solvent list."""

    def __init__(self, checkpoint):
        self.model = checkpoint.model()
        self.schema = checkpoint.schema
        self.vocab = checkpoint.vocab

    def batch(self, records: Sequence[SolventRecord]):
        return fingerprint_batch(records, self.schema, self.vocab)

    def forward(self, batch) -> Tensor:
        return self.model.last_hidden(batch)

    def vectors(self, batch) -> np.ndarray:
        with ad.no_grad():
            return self.forward(batch).data


@dataclass
class YieldModel:
    """A trained head plus everything needed to predict new reaction records."""

    head: YieldHead
    backbone: Backbone
    scaler: ConditionScaler
    table: SolventTable

    def predict_raw(self, records: Sequence[ReactionRecord]) -> np.ndarray:
        names = solvents_of(records)
        F = self.backbone.vectors(self.backbone.batch(resolve(self.table, names)))
        X = mixing_matrix(records, names) @ F
        with ad.no_grad():
            return self.head(X, self.scaler(records)).data.astype(np.float64)

    def predict(self, records: Sequence[ReactionRecord]) -> np.ndarray:
        return np.clip(self.predict_raw(records), 0.0, 1.0)


def predict_yield(model: YieldModel, record: ReactionRecord) -> tuple:
    """(sm, p2, p3) for one record, clamped to [0, 1]."""
    return tuple(float(x) for x in model.predict([record])[0])


def fit_head(train_records: Sequence[ReactionRecord], table: SolventTable, checkpoint,
             cfg: HeadConfig, mode: str = "frozen", fold: int = 0) -> YieldModel:
    """Train a yield head (and in fine-tuned mode the backbone) on ``train_records``."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    backbone = Backbone(checkpoint)
    head = YieldHead(cfg, seed=int(item_rng(cfg.seed, 0x4EAD, fold).integers(2 ** 32)))
    scaler = ConditionScaler.fit(train_records)
    names = solvents_of(train_records)
    fbatch = backbone.batch(resolve(table, names))
    M = mixing_matrix(train_records, names)
    C = scaler(train_records).astype(np.float32)
    Y = targets(train_records).astype(np.float32)

    tuning = mode == "finetuned"
    F_fixed = backbone.vectors(fbatch)
    # fine-tuning: head-only warm-up, then the last ``finetune_epochs`` train both
    joint_from = max(0, cfg.epochs - cfg.finetune_epochs) if tuning else cfg.epochs
    params = {f"head.{k}": v for k, v in head.named_parameters().items()}
    opt = ad.Adam(params, lr=cfg.lr)

    n = len(train_records)
    for epoch in range(cfg.epochs):
        if epoch == joint_from:
            bparams = backbone.model.named_parameters()
            opt.add_params({f"backbone.{k}": v for k, v in bparams.items()}, lr_scale=cfg.backbone_lr_mult)
        joint = epoch >= joint_from
        order = item_rng(cfg.seed, 0xF01D, fold, epoch).permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            opt.zero_grad()
            if joint:
                X = Tensor(M[idx]) @ backbone.forward(fbatch)
            else:
                X = Tensor(M[idx] @ F_fixed)
            loss = ad.mse(head(X, Tensor(C[idx])), Y[idx])
            loss.backward()
            opt.step()
    return YieldModel(head, backbone, scaler, table)


# --- benchmark -----------------------------------------------------------

def fold_key(record: ReactionRecord, task: str):
    if task == "single":
        return (record.solvent_a,)
    return tuple(sorted((record.solvent_a, record.solvent_b)))


def task_records(reactions: Sequence[ReactionRecord], task: str) -> list:
    """Single task: pure-solvent rows. Full task: binary-mixture rows."""
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}, got {task!r}")
    if task == "single":
        return [r for r in reactions if r.solvent_b is None]
    return [r for r in reactions if r.solvent_b is not None]


def make_folds(records: Sequence[ReactionRecord], task: str) -> list:
    """[(key, held-out row indices)] sorted by key; every row is in exactly one fold."""
    groups = {}
    for i, r in enumerate(records):
        groups.setdefault(fold_key(r, task), []).append(i)
    return [(k, np.array(v)) for k, v in sorted(groups.items())]


@dataclass
class BenchmarkResult:
    task: str
    mode: str
    fold_keys: list
    fold_mse: list
    rows: list = field(default_factory=list)  # (fold index, record, clamped prediction [3])

    @property
    def aggregate(self) -> float:
        return float(np.mean(self.fold_mse))


def _run_fold(args):
    f, key, train_recs, test_recs, table, checkpoint, cfg, mode = args
    model = fit_head(train_recs, table, checkpoint, cfg, mode, fold=f)
    pred = model.predict(test_recs)
    mse = float(np.mean((pred - targets(test_recs)) ** 2))
    log.info("fold %d %s mse %.5f", f, "+".join(key), mse)
    return mse, pred


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("SODADE_THREADS", "1")))
    except ValueError:
        return 1


def run_benchmark(reactions: Sequence[ReactionRecord], table: SolventTable, checkpoint,
                  cfg: Optional[HeadConfig] = None, task: str = "single", mode: str = "frozen",
                  max_folds: Optional[int] = None) -> BenchmarkResult:
    """Leave-one-solvent-out (single) or leave-one-pair-out (full) cross-validation."""
    tune_allocator()
    cfg = cfg or HeadConfig()
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    recs = task_records(reactions, task)
    resolve(table, solvents_of(recs))
    folds = make_folds(recs, task)
    if len(folds) < 2:
        raise ValueError(f"{task} task needs at least 2 folds, found {len(folds)}")
    if max_folds is not None:
        folds = folds[:max_folds]
    jobs = []
    for f, (key, held) in enumerate(folds):
        mask = np.zeros(len(recs), dtype=bool)
        mask[held] = True
        train_recs = [r for r, m in zip(recs, mask) if not m]
        test_recs = [recs[i] for i in held]
        jobs.append((f, key, train_recs, test_recs, table, checkpoint, cfg, mode))
    workers = min(worker_count(), len(jobs))
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(_run_fold, jobs))
    else:
        outputs = [_run_fold(j) for j in jobs]
    result = BenchmarkResult(task, mode, [k for k, _ in folds], [])
    for (f, key, _, test_recs, *_rest), (mse, pred) in zip(jobs, outputs):
        result.fold_mse.append(mse)
        result.rows.extend((f, r, p) for r, p in zip(test_recs, pred))
    return result


PREDICTION_HEADER = ["fold", "solvent_a", "solvent_b", "frac_a", "temperature_C", "residence_time_min",
                     "sm_true", "p2_true", "p3_true", "sm_pred", "p2_pred", "p3_pred"]


def export_predictions(result: BenchmarkResult, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PREDICTION_HEADER)
        for f, r, p in result.rows:
            w.writerow([f, r.solvent_a, r.solvent_b or "", repr(float(r.frac_a)), repr(float(r.temperature)),
                        repr(float(r.residence_time)), repr(float(r.sm)), repr(float(r.p2)), repr(float(r.p3)),
                        *(repr(float(x)) for x in p)])


def mse_from_export(path) -> float:
    """Aggregate (mean over folds of per-fold MSE) recomputed from an exported predictions file."""
    per_fold = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            t = np.array([float(row[k]) for k in ("sm_true", "p2_true", "p3_true")])
            p = np.array([float(row[k]) for k in ("sm_pred", "p2_pred", "p3_pred")])
            per_fold.setdefault(int(row["fold"]), []).append((p - t) ** 2)
    return float(np.mean([np.mean(v) for v in per_fold.values()]))
