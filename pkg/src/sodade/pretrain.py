"""Masked-value pretraining loop, checkpoints and property-prediction evaluation."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from ._alloc import tune_allocator
from .dataio import (
    N_PROPS, PROPERTY_NAMES, DataError, DataSplit, PropertySchema, SolventRecord, SolventTable,
    compute_schema,
)
from .model import ModelConfig, SodadeModel
from .seqgen import TypeVocab, collate, item_rng, iter_batches, one_out_example, sample_epoch

log = logging.getLogger(__name__)

MAGIC = b"SODADE01"
FORMAT_VERSION = 1


class NumericError(RuntimeError):
    """Numerical failure (CLI exit code 4)."""


class TrainingAborted(NumericError):
    def __init__(self, message, checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    lr_init: float = 1e-3
    lr_factor: float = 0.5
    lr_patience: int = 5
    lr_floor: float = 1e-8
    mask_rate: float = 0.3
    batch_size: int = 64
    samples_per_solvent: int = 10
    max_epochs: int = 500
    early_stop_patience: int = 30
    improvement_threshold: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.lr_floor < self.lr_init:
            raise ValueError("need 0 < lr_floor < lr_init")
        if not 0 < self.mask_rate <= 1:
            raise ValueError("need 0 < mask_rate <= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class PlateauScheduler:
    """Multiply the LR by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, lr, factor=0.5, patience=5, floor=1e-8, threshold=1e-6, best=math.inf):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.floor = floor
        self.threshold = threshold
        self.best = best
        self.bad_epochs = 0  # since the last LR change or improvement
        self.since_improvement = 0

    def step(self, metric) -> bool:
        """Record one epoch's metric; returns True if it improved on the best."""
        if metric < self.best - self.threshold:
            self.best = metric
            self.bad_epochs = 0
            self.since_improvement = 0
            return True
        self.bad_epochs += 1
        self.since_improvement += 1
        if self.bad_epochs >= self.patience:
            self.lr = max(self.lr * self.factor, self.floor)
            self.bad_epochs = 0
        return False

    @property
    def at_floor(self):
        return self.lr <= self.floor


# --- checkpoint ----------------------------------------------------------

@dataclass
class Checkpoint:
    model_config: ModelConfig
    schema: PropertySchema
    vocab_types: tuple
    weights: dict  # name -> float32 array
    train_config: Optional[TrainConfig] = None
    split: Optional[DataSplit] = None
    history: list = field(default_factory=list)  # dicts: epoch, train_loss, val_loss, lr
    best_epoch: int = 0
    seed: int = 0
    version: int = FORMAT_VERSION

    @property
    def vocab(self):
        return TypeVocab(self.vocab_types[1:])

    def model(self) -> SodadeModel:
        m = SodadeModel(self.model_config)
        m.load_state_dict(self.weights)
        return m.eval()

    @property
    def best_val(self):
        vals = [h["val_loss"] for h in self.history]
        return min(vals) if vals else math.nan

    def save(self, path) -> None:
        names = sorted(self.weights)
        manifest = []
        offset = 0
        for n in names:
            arr = self.weights[n]
            manifest.append({"name": n, "shape": list(arr.shape), "offset": offset})
            offset += int(np.prod(arr.shape)) * 4
        header = {
            "version": self.version,
            "model_config": self.model_config.to_dict(),
            "train_config": self.train_config.to_dict() if self.train_config else None,
            "schema": self.schema.to_dict(),
            "vocab": list(self.vocab_types),
            "split": self.split.to_dict() if self.split else None,
            "history": self.history,
            "best_epoch": self.best_epoch,
            "seed": self.seed,
            "tensors": manifest,
        }
        blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        with Path(path).open("wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            for n in names:
                fh.write(np.ascontiguousarray(self.weights[n], dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        raw = Path(path).read_bytes()
        if raw[:8] != MAGIC:
            raise DataError(f"{path}: not a checkpoint (bad magic {raw[:8]!r})")
        (hlen,) = struct.unpack("<Q", raw[8:16])
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
        if header["version"] != FORMAT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {header['version']}")
        base = 16 + hlen
        weights = {}
        for t in header["tensors"]:
            count = int(np.prod(t["shape"]))
            start = base + t["offset"]
            weights[t["name"]] = np.frombuffer(raw, dtype="<f4", count=count, offset=start).reshape(t["shape"]).astype(np.float32)
        return cls(
            model_config=ModelConfig.from_dict(header["model_config"]),
            schema=PropertySchema.from_dict(header["schema"]),
            vocab_types=tuple(header["vocab"]),
            weights=weights,
            train_config=TrainConfig.from_dict(header["train_config"]) if header["train_config"] else None,
            split=DataSplit.from_dict(header["split"]) if header["split"] else None,
            history=header["history"],
            best_epoch=header["best_epoch"],
            seed=header["seed"],
        )


def write_history(history, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for h in history:
            w.writerow([h["epoch"], repr(h["train_loss"]), repr(h["val_loss"]), repr(h["lr"])])


# --- evaluation ----------------------------------------------------------

def one_out_batch(records: Sequence[SolventRecord], schema: PropertySchema, vocab=None):
    """Every (solvent, property) pair as a sequence with that property last and masked.

    Returns the batch and the (solvent index, property index) of each row.
    """
    items, keys = [], []
    for i, rec in enumerate(records):
        for p in range(N_PROPS):
            if rec.props[p] is None:
                continue
            items.append(one_out_example(rec, schema, p, vocab))
            keys.append((i, p))
    return collate(items), np.array(keys, dtype=np.int64).reshape(-1, 2)


def _require_complete(records):
    for r in records:
        if not r.is_complete:
            missing = [PROPERTY_NAMES[j] for j, v in enumerate(r.props) if v is None]
            raise DataError(f"evaluation solvent {r.name!r} is missing {', '.join(missing)}")


def evaluate_validation(predictor, records: Sequence[SolventRecord], schema: PropertySchema, vocab=None) -> float:
    """Mean normalised squared error over all (solvent, property) pairs.

    ``predictor`` needs ``predict_last(batch) -> [B]`` normalised predictions.
    """
    _require_complete(records)
    batch, _ = one_out_batch(records, schema, vocab)
    pred = np.asarray(predictor.predict_last(batch), dtype=np.float64)
    target = batch.target[:, -1]
    return float(np.mean((pred - target) ** 2))


def evaluate_test_table(predictor, records: Sequence[SolventRecord], schema: PropertySchema, vocab=None) -> dict:
    """Per-property MSE in original units, plus ``"Average MSE"``."""
    _require_complete(records)
    batch, keys = one_out_batch(records, schema, vocab)
    pred = np.asarray(predictor.predict_last(batch), dtype=np.float64)
    err = (pred - batch.target[:, -1]) * np.asarray(schema.std)[keys[:, 1]]
    table = {}
    for p, name in enumerate(PROPERTY_NAMES):
        sel = keys[:, 1] == p
        table[name] = float(np.mean(err[sel] ** 2))
    table["Average MSE"] = float(np.mean([table[n] for n in PROPERTY_NAMES]))
    return table


# --- training ------------------------------------------------------------

def train(table: SolventTable, split: DataSplit, model_config: ModelConfig = None,
          train_config: TrainConfig = None, snapshot_every: Optional[int] = None,
          on_snapshot: Optional[Callable[[int, "Checkpoint"], None]] = None) -> Checkpoint:
    """Pretrain on the training solvents; checkpoint holds the best-validation weights."""
    tune_allocator()
    tc = train_config or TrainConfig()
    train_recs = [r for r in table.subset(split.train_ids) if r.n_present >= 2]
    if not train_recs:
        raise DataError("empty training set")
    val_recs = table.subset(split.val_ids)
    _require_complete(val_recs)
    schema = compute_schema(table, split.train_ids)
    vocab = TypeVocab.from_records(train_recs)
    mc = model_config or ModelConfig()
    mc = ModelConfig(**{**mc.to_dict(), "type_vocab": len(vocab)})
    model = SodadeModel(mc)
    opt = ad.Adam(model.named_parameters(), lr=tc.lr_init)
    sched = PlateauScheduler(tc.lr_init, tc.lr_factor, tc.lr_patience, tc.lr_floor, tc.improvement_threshold)
    val_batch, _ = one_out_batch(val_recs, schema, vocab)

    def snapshot(weights, history, best_epoch):
        return Checkpoint(mc, schema, vocab.types, weights, tc, split, list(history), best_epoch, tc.seed)

    history = []
    best_state = model.state_dict()
    best_epoch = 0
    for epoch in range(1, tc.max_epochs + 1):
        model.train()
        model.reseed_dropout(int(item_rng(tc.seed, 0xD50, epoch).integers(2 ** 63)))
        items = sample_epoch(train_recs, schema, tc.seed, epoch, tc.samples_per_solvent, tc.mask_rate, vocab)
        total, count = 0.0, 0
        opt.lr = sched.lr
        for batch in iter_batches(items, tc.batch_size):
            opt.zero_grad()
            loss = model.loss(batch)
            n = int(batch.masked.sum())
            total += loss.item() * n
            count += n
            if not math.isfinite(loss.item()):
                break
            loss.backward()
            try:
                opt.step()
            except ad.TrainingError as exc:
                raise TrainingAborted(f"epoch {epoch}: {exc}", snapshot(best_state, history, best_epoch)) from exc
        train_loss = total / max(count, 1)
        model.eval()
        val = float(np.mean((model.predict_last(val_batch) - val_batch.target[:, -1]) ** 2))
        if not (math.isfinite(train_loss) and math.isfinite(val)):
            raise TrainingAborted(f"epoch {epoch}: non-finite loss", snapshot(best_state, history, best_epoch))
        lr_used = sched.lr
        if sched.step(val):
            best_state = model.state_dict()
            best_epoch = epoch
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val, "lr": lr_used})
        log.info("epoch %d train %.4f val %.4f lr %.2e", epoch, train_loss, val, lr_used)
        if snapshot_every and on_snapshot and epoch % snapshot_every == 0:
            on_snapshot(epoch, snapshot(model.state_dict(), history, epoch))
        if sched.since_improvement >= tc.early_stop_patience:
            break
        if sched.at_floor and sched.bad_epochs >= tc.lr_patience:
            break
    return snapshot(best_state, history, best_epoch)


def untrained_checkpoint(table: SolventTable, split: DataSplit, model_config: ModelConfig = None,
                         train_config: TrainConfig = None) -> Checkpoint:
    """Checkpoint of a freshly initialised model (same schema/vocab as ``train``)."""
    tc = train_config or TrainConfig()
    train_recs = [r for r in table.subset(split.train_ids) if r.n_present >= 2]
    schema = compute_schema(table, split.train_ids)
    vocab = TypeVocab.from_records(train_recs)
    mc = model_config or ModelConfig()
    mc = ModelConfig(**{**mc.to_dict(), "type_vocab": len(vocab)})
    return Checkpoint(mc, schema, vocab.types, SodadeModel(mc).state_dict(), tc, split, [], 0, tc.seed)
