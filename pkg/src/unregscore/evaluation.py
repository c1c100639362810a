"""ROC/AUC, per-cluster score statistics, patch aggregation and heatmaps."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import PatchGrid, patch_stack, write_image
from .errors import DataError, ShapeError


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def _check_binary(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ShapeError(f"{s.size} scores but {y.size} labels")
    if not np.all(np.isin(y, (0, 1))):
        raise DataError("labels must be 0 (normal) or 1 (anomalous)")
    y = y.astype(bool)
    if y.all() or not y.any():
        raise DataError("ROC analysis needs both normal and anomalous samples")
    return s, y


def roc_auc(scores, labels) -> RocCurve:
    """ROC curve by a descending threshold sweep; tied scores move together.

    A sample is flagged anomalous when its score is ``>=`` the threshold.
    The AUC is the trapezoidal area under the returned points.
    """
    s, y = _check_binary(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last_of_run = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last_of_run]
    fp = (last_of_run + 1) - tp
    tpr = np.r_[0.0, tp / y.sum()]
    fpr = np.r_[0.0, fp / (~y).sum()]
    thresholds = np.r_[np.inf, s[last_of_run]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) * 0.5))
    return RocCurve(fpr, tpr, thresholds, auc)


def auc_pairwise_oracle(scores, labels) -> float:
    """Exact ``P(anomalous > normal) + P(equal) / 2`` over all pairs."""
    s, y = _check_binary(scores, labels)
    pos, neg = s[y], s[~y]
    diff = pos[:, None] - neg[None, :]
    wins = np.count_nonzero(diff > 0) + 0.5 * np.count_nonzero(diff == 0)
    return float(wins / (pos.size * neg.size))


def aggregate_sample_scores(patch_scores: Sequence[Sequence[float]] | Sequence[np.ndarray], rule: str = "max") -> np.ndarray:
    """One score per sample: the maximum over its patches.

    Thresholding the maximum at ``t`` flags a sample exactly when at least
    one patch exceeds ``t``.
    """
    if rule != "max":
        raise ValueError(f"unsupported aggregation rule {rule!r}")
    out = np.empty(len(patch_scores))
    for i, ps in enumerate(patch_scores):
        ps = np.asarray(ps, dtype=np.float64)
        if ps.size == 0:
            raise DataError(f"sample {i} has no patch scores")
        out[i] = ps.max()
    return out


def group_max(sample_ids: Sequence, scores: Sequence[float]) -> tuple[list, np.ndarray]:
    """Max-aggregate a flat per-patch table keyed by sample id (first-seen order)."""
    groups: dict = {}
    for sid, sc in zip(sample_ids, scores):
        groups.setdefault(sid, []).append(sc)
    ids = list(groups)
    return ids, aggregate_sample_scores([groups[i] for i in ids])


STAT_NAMES = ("p5", "q1", "median", "q3", "p95")
_PERCENTILES = (5, 25, 50, 75, 95)


def box_stats(values) -> dict[str, float]:
    """Five-number summary with linearly interpolated percentiles."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise DataError("cannot summarize an empty score set")
    return dict(zip(STAT_NAMES, (float(p) for p in np.percentile(v, _PERCENTILES, method="linear"))))


def cluster_boxstats(scores, labels, cluster_ids, center: str = "none") -> dict[int, dict[str, dict[str, float]]]:
    """Per-cluster box statistics of normal and anomalous scores.

    With ``center="median"`` each cluster's scores are first shifted by the
    median of that cluster's pooled (normal and anomalous) scores.  Returns
    ``{cluster: {"normal": stats, "anomalous": stats}}``; a group with no
    members is omitted.
    """
    if center not in ("none", "median"):
        raise ValueError(f"center must be 'none' or 'median', got {center!r}")
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    c = np.asarray(cluster_ids)
    out: dict[int, dict[str, dict[str, float]]] = {}
    for k in np.unique(c):
        sel = c == k
        vals = s[sel] - (np.median(s[sel]) if center == "median" else 0.0)
        ys = y[sel]
        groups = {}
        for name, lab in (("normal", 0), ("anomalous", 1)):
            if np.any(ys == lab):
                groups[name] = box_stats(vals[ys == lab])
        out[int(k)] = groups
    return out


def cluster_median_spread(scores, labels, cluster_ids) -> float:
    """Range of per-cluster medians over normal samples."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    c = np.asarray(cluster_ids)
    meds = [np.median(s[(c == k) & (y == 0)]) for k in np.unique(c[y == 0])]
    return float(max(meds) - min(meds))


# -- heatmaps --------------------------------------------------------------


@dataclass
class Heatmap:
    raw: np.ndarray
    normalized: np.ndarray
    grid: PatchGrid

    @property
    def argmax_cell(self) -> tuple[int, int]:
        r, c = np.unravel_index(int(np.argmax(self.raw)), self.raw.shape)
        return int(r), int(c)


def normalize_map(raw: np.ndarray) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = raw.min(), raw.max()
    if hi > lo:
        return (raw - lo) / (hi - lo)
    return np.zeros_like(raw)


def render_heatmap(
    pixels: np.ndarray,
    scorer: Callable[[np.ndarray], np.ndarray],
    grid: PatchGrid,
    out_path: str | Path | None = None,
) -> Heatmap:
    """Score every grid patch of ``pixels`` and min-max normalize the map.

    ``scorer`` maps a batch of patches ``(n, ..., P, P)`` to ``n`` scores.
    When ``out_path`` is given the map is written as PGM with brighter
    pixels for lower scores.
    """
    rows, cols = grid.shape(*np.asarray(pixels).shape[-2:])
    scores = np.asarray(scorer(patch_stack(pixels, grid)), dtype=np.float64)
    if scores.shape != (rows * cols,):
        raise ShapeError(f"scorer returned {scores.shape} scores for {rows * cols} patches")
    raw = scores.reshape(rows, cols)
    hm = Heatmap(raw, normalize_map(raw), grid)
    if out_path is not None:
        write_image(out_path, 1.0 - hm.normalized)
    return hm


def cell_overlaps_mask(grid: PatchGrid, cell: tuple[int, int], mask: np.ndarray) -> bool:
    rs, cs = grid.window(*cell)
    return bool(np.any(mask[rs, cs]))


# -- CSV outputs -----------------------------------------------------------


def write_roc_csv(path: str | Path, curves: Mapping[str, RocCurve]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "threshold", "fpr", "tpr"])
        for kind, rc in curves.items():
            for t, f, p in zip(rc.thresholds, rc.fpr, rc.tpr):
                w.writerow([kind, repr(float(t)), repr(float(f)), repr(float(p))])


def write_cluster_stats_csv(path: str | Path, stats_by_kind: Mapping[str, Mapping[int, Mapping[str, Mapping[str, float]]]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "cluster_id", "group", *STAT_NAMES])
        for kind, per_cluster in stats_by_kind.items():
            for k, groups in per_cluster.items():
                for g, st in groups.items():
                    w.writerow([kind, k, g, *(repr(st[n]) for n in STAT_NAMES)])


def gnuplot_roc_script(roc_csv: str | Path, kinds: Sequence[str]) -> str:
    """A gnuplot script plotting the ROC curves stored in ``roc_csv``."""
    lines = [
        "set datafile separator ','",
        "set xlabel 'FPR'",
        "set ylabel 'TPR'",
        "set size square",
        "set key bottom right",
    ]
    plots = [
        f"'{Path(roc_csv).as_posix()}' using (strcol(1) eq '{k}' ? $3 : 1/0):4 every ::1 with lines title '{k}'"
        for k in kinds
    ]
    lines.append("plot " + ", \\\n     ".join(plots + ["x with dots notitle"]))
    return "\n".join(lines) + "\n"
