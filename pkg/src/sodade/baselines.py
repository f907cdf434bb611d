"""Property-prediction baselines: training-mean predictor and a Tanimoto-kernel GP."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .chem import BitFingerprint, ecfp_from_smiles, tanimoto_matrix
from .dataio import N_PROPS, PROPERTY_NAMES, PropertySchema, SolventRecord
from .pretrain import NumericError

log = logging.getLogger(__name__)

NOISE_GRID = (1e-4, 1e-3, 1e-2, 1e-1)
JITTER_START = 1e-8
JITTER_MAX = 1e-4


def _per_property_table(pred, truth):
    """pred/truth [N, 12] in original units; NaN truth entries are skipped."""
    out = {}
    for p, name in enumerate(PROPERTY_NAMES):
        sel = ~np.isnan(truth[:, p])
        out[name] = float(np.mean((pred[sel, p] - truth[sel, p]) ** 2)) if sel.any() else float("nan")
    out["Average MSE"] = float(np.nanmean([out[n] for n in PROPERTY_NAMES]))
    return out


def avg_fit_predict(schema: PropertySchema, records: Sequence[SolventRecord]) -> dict:
    """Predict every property as its training mean; per-property MSE in original units."""
    truth = np.stack([r.values for r in records])
    pred = np.broadcast_to(np.asarray(schema.mean, dtype=np.float64), truth.shape)
    return _per_property_table(pred, truth)


# --- Gaussian process ----------------------------------------------------

def cholesky_with_jitter(K, start=JITTER_START, max_jitter=JITTER_MAX):
    """Cholesky of K, adding a growing diagonal jitter on failure. Returns (L, jitter)."""
    n = K.shape[0]
    jitter = 0.0
    while True:
        try:
            return np.linalg.cholesky(K + jitter * np.eye(n)), jitter
        except np.linalg.LinAlgError:
            jitter = start if jitter == 0.0 else jitter * 10.0
            if jitter > max_jitter * (1 + 1e-9):
                raise NumericError(f"Cholesky failed with jitter up to {max_jitter:g}") from None


@dataclass
class GpFit:
    """One property's fitted GP over the (kernel) training points in ``index``."""

    index: np.ndarray  # rows of the training set used (target present)
    noise: float
    jitter: float
    chol: np.ndarray
    alpha: np.ndarray
    lml: float


def log_marginal_likelihood(L, alpha, y):
    n = len(y)
    return float(-0.5 * y @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * n * math.log(2 * math.pi))


def fit_single(K, y, noise):
    """Exact GP fit for kernel matrix K, targets y and a fixed noise variance."""
    L, jitter = cholesky_with_jitter(K + noise * np.eye(len(y)))
    alpha = cho_solve((L, True), y)
    return L, jitter, alpha, log_marginal_likelihood(L, alpha, y)


@dataclass
class GpModel:
    train_bits: np.ndarray  # [N, nbits] bool
    targets: np.ndarray  # [N, 12] z-normalised, NaN = missing
    fits: list  # GpFit per property
    schema: Optional[PropertySchema] = None

    def kernel_to(self, bits):
        return tanimoto_matrix(np.atleast_2d(bits), self.train_bits)


def gp_fit(train_bits, targets, noise_grid=NOISE_GRID, schema: Optional[PropertySchema] = None) -> GpModel:
    """Fit one GP per target column; noise variance picked by log marginal likelihood."""
    train_bits = np.asarray(train_bits, dtype=bool)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.ndim == 1:
        targets = targets[:, None]
    if train_bits.shape[0] < 2:
        raise ValueError("gp_fit needs at least 2 training points")
    K_all = tanimoto_matrix(train_bits)
    fits = []
    for p in range(targets.shape[1]):
        idx = np.flatnonzero(~np.isnan(targets[:, p]))
        if len(idx) < 2:
            raise ValueError(f"target column {p} has fewer than 2 present values")
        K = K_all[np.ix_(idx, idx)]
        y = targets[idx, p]
        best = None
        for noise in noise_grid:
            L, jitter, alpha, lml = fit_single(K, y, noise)
            if best is None or lml > best.lml:
                best = GpFit(idx, float(noise), jitter, L, alpha, lml)
        fits.append(best)
    return GpModel(train_bits, targets, fits, schema)


def gp_predict(model: GpModel, test_bits):
    """Posterior (mean, variance), each [M, n_targets], in the fitted (normalised) units."""
    Ks = model.kernel_to(np.asarray(test_bits, dtype=bool))
    M = Ks.shape[0]
    mean = np.zeros((M, len(model.fits)))
    var = np.zeros((M, len(model.fits)))
    for p, fit in enumerate(model.fits):
        k = Ks[:, fit.index]
        mean[:, p] = k @ fit.alpha
        v = solve_triangular(fit.chol, k.T, lower=True)
        # Tanimoto self-similarity is 1
        var[:, p] = np.maximum(1.0 - np.sum(v * v, axis=0), 0.0)
    return mean, var


def fingerprint_bits(records: Sequence[SolventRecord], radius=2, nbits=2048):
    """Stacked ECFP bits plus a mask of records that have SMILES (others get an all-zero row)."""
    rows, ok = [], []
    for r in records:
        if r.smiles:
            fp: BitFingerprint = ecfp_from_smiles(r.smiles, radius, nbits)
            rows.append(fp.bits)
            ok.append(True)
        else:
            rows.append(np.zeros(nbits, dtype=bool))
            ok.append(False)
    return np.stack(rows), np.array(ok)


def gp_fit_predict(schema: PropertySchema, train_records: Sequence[SolventRecord],
                   test_records: Sequence[SolventRecord], radius=2, nbits=2048) -> dict:
    """GP baseline table: per-property MSE in original units on the test records."""
    train_bits, ok = fingerprint_bits(train_records, radius, nbits)
    if not ok.all():
        skipped = [r.name for r, good in zip(train_records, ok) if not good]
        log.warning("GP training skips %d solvents without SMILES: %s", len(skipped), ", ".join(skipped))
    train_z = np.stack([schema.normalize(r.values) for r in train_records])[ok]
    model = gp_fit(train_bits[ok], train_z, schema=schema)
    test_bits, test_ok = fingerprint_bits(test_records, radius, nbits)
    mean_z, _ = gp_predict(model, test_bits)
    if not test_ok.all():
        missing = [r.name for r, good in zip(test_records, test_ok) if not good]
        log.warning("no SMILES for %s; predicting the training mean", ", ".join(missing))
        mean_z[~test_ok] = 0.0
    pred = schema.denormalize(mean_z)
    truth = np.stack([r.values for r in test_records])
    return _per_property_table(pred, truth)


def write_comparison(path, avg: dict, gp: dict, sodade: dict, header_note: Optional[str] = None) -> None:
    """Write ``property,avg_mse,gp_mse,sodade_mse`` rows, one per property plus the average."""
    rows = list(PROPERTY_NAMES) + ["Average MSE"]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if header_note:
            for line in header_note.splitlines():
                fh.write(f"# {line}\n")
        fh.write("property,avg_mse,gp_mse,sodade_mse\n")
        for name in rows:
            vals = [d.get(name, float("nan")) if d is not None else float("nan") for d in (avg, gp, sodade)]
            fh.write(name + "," + ",".join(repr(float(v)) for v in vals) + "\n")


__all__ = [
    "NOISE_GRID", "avg_fit_predict", "cholesky_with_jitter", "log_marginal_likelihood", "GpFit", "GpModel",
    "gp_fit", "gp_predict", "gp_fit_predict", "fingerprint_bits", "write_comparison", "N_PROPS",
]
