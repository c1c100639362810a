"""End-to-end pipeline pieces shared by the command line and the acceptance suite.

A "fitted model" here is either a :class:`~unregscore.vae.VaeModel` or a
``(GmmModel, PcaModel)`` pair; :func:`score_patches` hides the difference.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

from . import data, evaluation, gmm, vae
from .breakdown import ScoreBreakdown, select
from .config import ExperimentConfig
from .errors import ConfigError, DataError, ShapeError
from .scoring import score_ae, score_gmm, score_vae

log = logging.getLogger(__name__)

GmmPair = tuple  # (GmmModel, PcaModel)
FittedModel = Union[vae.VaeModel, GmmPair]

# patches drawn per training image when the image is larger than a patch
GMM_PATCHES_PER_IMAGE = 10


def load_split(cfg: ExperimentConfig) -> data.DatasetSplit:
    """Training and test images described by the dataset section."""
    ds = cfg.dataset
    if ds.source == "directory":
        train = data.load_directory(ds.manifest)
        test = data.load_directory(ds.test_manifest) if ds.test_manifest else []
        return data.DatasetSplit(train, test, float("nan"))
    normals = data.generate_synthetic(ds.synth)
    return data.make_split(normals, ds.erase_size, ds.rho_train, ds.synth.seed, ds.n_test)


def model_kind(model: FittedModel) -> str:
    if isinstance(model, vae.VaeModel):
        return model.mode
    return "gmm"


def _stack(images: Sequence[data.LabeledImage]) -> np.ndarray:
    if not images:
        raise DataError("no images")
    shapes = {im.pixels.shape for im in images}
    if len(shapes) != 1:
        raise ShapeError(f"images have mixed shapes {sorted(shapes)}")
    return np.stack([im.pixels for im in images])


def gmm_training_features(images: np.ndarray, patch: int, rng: np.random.Generator) -> np.ndarray:
    """Flattened training patches: the image itself when it is one patch, else random crops."""
    if images.shape[-1] == patch and images.shape[-2] == patch:
        return images.reshape(len(images), -1)
    crops = [data.random_crop(px, patch, rng) for px in images for _ in range(GMM_PATCHES_PER_IMAGE)]
    return np.stack(crops).reshape(len(crops), -1)


def fit(
    cfg: ExperimentConfig,
    train_images: Sequence[data.LabeledImage],
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[FittedModel, list[dict]]:
    """Train the configured model; returns it with its per-epoch or per-iteration trace."""
    m, t = cfg.model, cfg.training
    x = _stack(train_images)
    if m.kind == "gmm":
        rng = np.random.default_rng(t.seed)
        feats = gmm_training_features(x, cfg.eval.patch_size, rng)
        pca = gmm.pca_fit(feats, m.n_h)
        model, trace = gmm.em_fit(gmm.pca_transform(pca, feats), m.n_z, t.seed, t.max_iter, t.tol, t.ridge)
        rows = [{"iteration": i, "nll": v} for i, v in enumerate(trace.nll)]
        log.info("EM finished after %d iterations (converged=%s)", trace.iterations, trace.converged)
        return (model, pca), rows
    channels = x.shape[1] if x.ndim == 4 else 1
    model = vae.build_model(m.vae_config(channels), np.random.default_rng(t.seed))
    model, trace = vae.train(model, x, t.train_config(), on_epoch)
    if m.kind == "ae":
        trace = [{"epoch": r["epoch"], "mse": r["loss"]} for r in trace]
    return model, trace


def score_patches(model: FittedModel, patches: np.ndarray) -> ScoreBreakdown:
    """Breakdown arrays for a stack of patches."""
    kind = model_kind(model)
    if kind == "vae":
        return score_vae(model, patches)
    if kind == "ae":
        return score_ae(model, patches)
    g, pca = model
    flat = patches.reshape(len(patches), -1)
    if flat.shape[1] != pca.mean.shape[0]:
        raise ShapeError(f"patches have {flat.shape[1]} values, the PCA model expects {pca.mean.shape[0]}")
    return score_gmm(g, gmm.pca_transform(pca, flat))


def patch_size_of(model: FittedModel) -> int:
    if isinstance(model, vae.VaeModel):
        return model.config.n_size
    return int(round(np.sqrt(model[1].mean.shape[0])))


def score_images(
    model: FittedModel,
    images: Sequence[data.LabeledImage],
    stride: int,
    ids: Sequence[str] | None = None,
) -> list[dict]:
    """Per-patch score rows for every image, in the score-file layout."""
    grid = data.PatchGrid(patch_size_of(model), stride)
    where, patches = [], []
    for n, img in enumerate(images):
        for r, c, crop in data.sliding_crops(img.pixels, grid):
            where.append((n, r, c))
            patches.append(crop)
    if not patches:
        return []
    br = score_patches(model, np.stack(patches))
    rows = []
    for j, (n, r, c) in enumerate(where):
        img = images[n]
        rows.append(
            dict(
                sample_id=ids[n] if ids is not None else (img.name or str(n)),
                patch_row=r,
                patch_col=c,
                D=float(br.D[j]),
                A=float(br.A[j]),
                M=float(br.M[j]),
                L=float(br.L[j]),
                label=img.label,
                cluster_id=img.cluster_id,
            )
        )
    return rows


@dataclass
class SampleScores:
    """Sample-level (max over patches) scores with labels and cluster ids."""

    ids: list
    scores: dict[str, np.ndarray]
    labels: np.ndarray
    clusters: np.ndarray


def aggregate(cols: dict[str, np.ndarray], kinds: Sequence[str] = ("L", "D", "A", "M")) -> SampleScores:
    """Collapse per-patch columns (as returned by ``read_scores_csv``) to samples."""
    ids, first = [], {}
    for i, sid in enumerate(cols["sample_id"]):
        if sid not in first:
            first[sid] = i
            ids.append(sid)
    idx = np.array([first[s] for s in ids])
    labels = np.asarray(cols["label"])
    # a sample's label must not vary between its patches
    for sid, lab in zip(cols["sample_id"], labels):
        if lab != labels[first[sid]]:
            raise DataError(f"sample {sid} has inconsistent labels across patches")
    scores = {}
    for k in kinds:
        scores[k] = evaluation.group_max(list(cols["sample_id"]), cols[k])[1]
    return SampleScores(ids, scores, labels[idx], np.asarray(cols["cluster_id"])[idx])


def rows_to_columns(rows: Sequence[dict]) -> dict[str, np.ndarray]:
    cols = {"sample_id": np.array([r["sample_id"] for r in rows])}
    for f in ("patch_row", "patch_col", "label", "cluster_id"):
        cols[f] = np.array([int(r[f]) for r in rows])
    for f in "DAML":
        cols[f] = np.array([float(r[f]) for r in rows])
    return cols


def aucs(samples: SampleScores) -> dict[str, evaluation.RocCurve]:
    return {k: evaluation.roc_auc(s, samples.labels) for k, s in samples.scores.items()}


def run_benchmark(cfg: ExperimentConfig) -> dict:
    """Generate (or load), fit and score; returns per-kind AUCs and cluster spreads."""
    split = load_split(cfg)
    if not split.test:
        raise DataError("the benchmark needs a test set")
    model, trace = fit(cfg, split.train)
    rows = score_images(model, split.test, cfg.eval.stride, ids=[str(i) for i in range(len(split.test))])
    samples = aggregate(rows_to_columns(rows))
    curves = aucs(samples)
    out = {"auc": {k: c.auc for k, c in curves.items()}, "trace": trace, "model": model, "samples": samples}
    out["spread"] = {
        k: evaluation.cluster_median_spread(s, samples.labels, samples.clusters) for k, s in samples.scores.items()
    }
    return out


def heatmap(model: FittedModel, pixels: np.ndarray, kind: str, stride: int) -> evaluation.Heatmap:
    """Sliding-window map of one score component over an image."""
    size = patch_size_of(model)
    if min(pixels.shape[-2:]) < size:
        raise ShapeError(f"image {pixels.shape[-2:]} is smaller than the {size}x{size} patch")
    if model_kind(model) == "ae" and kind != "L":
        raise ConfigError("an autoencoder only provides the L (MSE) score")
    grid = data.PatchGrid(size, stride)
    return evaluation.render_heatmap(pixels, lambda p: np.asarray(select(score_patches(model, p), kind)), grid)
