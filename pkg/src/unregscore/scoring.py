"""Uniform (D, A, M, L) scoring for trained VAEs and GMMs.

Scores are per input (per patch); aggregating patches into a sample-level
decision happens in :mod:`unregscore.evaluation`.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable

import numpy as np

from . import gmm as _gmm
from . import vae as _vae
from .breakdown import ScoreBreakdown, ScoreKind, select
from .errors import ConfigError, DataError

__all__ = [
    "ScoreBreakdown",
    "ScoreKind",
    "select",
    "score_vae",
    "score_gmm",
    "SCORE_FIELDS",
    "write_scores_csv",
    "read_scores_csv",
]

SCORE_FIELDS = ("sample_id", "patch_row", "patch_col", "D", "A", "M", "L", "label", "cluster_id")


def score_vae(model: _vae.VaeModel, x: np.ndarray, batch_size: int = 512) -> ScoreBreakdown:
    """Breakdown of the negative ELBO at the posterior mean ``z = mu_z``.

    A single image gives float fields; a batch gives arrays.
    """
    if model.mode != "vae":
        raise ConfigError("score_vae needs a model in 'vae' mode")
    single = np.asarray(x).ndim == 2 or (np.asarray(x).ndim == 3 and model.config.n_channels > 1 and np.asarray(x).shape[0] == model.config.n_channels)
    xb = _vae.as_batch(model, x)
    parts = []
    for i in range(0, len(xb), batch_size):
        chunk = xb[i : i + batch_size]
        enc = _vae.encode(model, chunk)
        dec = _vae.decode(model, enc.mu_z)
        parts.append(_vae.negative_elbo(chunk, enc, dec))
    br = ScoreBreakdown(*(np.concatenate([getattr(p, f) for p in parts]) for f in "DAML"))
    return br[0] if single else br


def score_gmm(model: _gmm.GmmModel, x: np.ndarray) -> ScoreBreakdown:
    """Breakdown of ``-log(w_k N(x; mu_k, Sigma_k))`` for the MAP class ``k``."""
    single = np.asarray(x).ndim == 1
    br = _gmm.score(model, x)
    return br[0] if single else br


def score_ae(model: _vae.VaeModel, x: np.ndarray, batch_size: int = 512) -> ScoreBreakdown:
    """Autoencoder baseline in breakdown form: MSE reported as ``L``, other terms zero."""
    xb = _vae.as_batch(model, x)
    mse = np.concatenate([_vae.ae_score(model, xb[i : i + batch_size]) for i in range(0, len(xb), batch_size)])
    zeros = np.zeros_like(mse)
    return ScoreBreakdown(zeros, zeros, zeros, mse)


def write_scores_csv(path: str | Path, rows: Iterable[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SCORE_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            out = dict(r)
            for f in "DAML":
                out[f] = repr(float(out[f]))
            w.writerow(out)


def read_scores_csv(path: str | Path) -> dict[str, np.ndarray]:
    """Column arrays of a score dump; ``sample_id`` stays a string column."""
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames is None or any(f not in rd.fieldnames for f in SCORE_FIELDS):
            raise DataError(f"{path}: score file must have columns {', '.join(SCORE_FIELDS)}")
        rows = list(rd)
    if not rows:
        raise DataError(f"{path}: no scores")
    cols: dict[str, np.ndarray] = {"sample_id": np.array([r["sample_id"] for r in rows])}
    for f in ("patch_row", "patch_col", "label", "cluster_id"):
        cols[f] = np.array([int(r[f]) for r in rows])
    for f in "DAML":
        cols[f] = np.array([float(r[f]) for r in rows])
    return cols
