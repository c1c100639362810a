"""Full-covariance Gaussian mixture fitted by EM, plus PCA features.

Covariances are kept together with their Cholesky factors and
log-determinants; every density evaluation goes through the factor, never an
explicit inverse.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from .breakdown import ScoreBreakdown
from .errors import ConfigError, DataError, NumericalError, ShapeError

RIDGE = 1e-6
EMPTY_MASS = 1e-12
_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray

    @property
    def n_components(self) -> int:
        return self.components.shape[0]


def pca_fit(samples: np.ndarray, n_h: int) -> PcaModel:
    """Top-``n_h`` eigenvectors of the sample covariance.

    Each component's sign is chosen so its largest-magnitude entry is
    positive.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"pca_fit expects a 2-D sample matrix, got {x.shape}")
    n, d = x.shape
    if n_h < 1 or n_h > d:
        raise ConfigError(f"n_h={n_h} must lie in [1, {d}]")
    if n <= n_h:
        raise DataError(f"pca_fit needs more than n_h={n_h} samples, got {n}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:n_h]
    comps = evecs[:, order].T
    pivot = np.argmax(np.abs(comps), axis=1)
    comps *= np.sign(comps[np.arange(n_h), pivot])[:, None]
    return PcaModel(mean, comps, np.maximum(evals[order], 0.0))


def pca_transform(model: PcaModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.mean.shape[0]:
        raise ShapeError(f"expected feature dimension {model.mean.shape[0]}, got {x.shape[-1]}")
    return (x - model.mean) @ model.components.T


def pca_inverse(model: PcaModel, f: np.ndarray) -> np.ndarray:
    return np.asarray(f, dtype=np.float64) @ model.components + model.mean


@dataclass
class GmmModel:
    """Mixture parameters with cached Cholesky factors ``chol[k] @ chol[k].T = cov[k]``."""

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    chol: np.ndarray = field(init=False, repr=False)
    log_dets: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.covs = np.asarray(self.covs, dtype=np.float64)
        k, d = self.means.shape
        if self.weights.shape != (k,) or self.covs.shape != (k, d, d):
            raise ShapeError("inconsistent GMM parameter shapes")
        self.refactor()

    def refactor(self) -> None:
        try:
            self.chol = np.linalg.cholesky(self.covs)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("covariance matrix is not positive definite") from exc
        self.log_dets = 2.0 * np.log(np.diagonal(self.chol, axis1=1, axis2=2)).sum(axis=1)

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def permuted(self, perm) -> "GmmModel":
        perm = np.asarray(perm)
        return GmmModel(self.weights[perm], self.means[perm], self.covs[perm])


@dataclass
class EmTrace:
    nll: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    reinitialized: int = 0


def _as_samples(model: GmmModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None]
    if x.ndim != 2 or x.shape[1] != model.dim:
        raise ShapeError(f"expected samples with {model.dim} features, got shape {x.shape}")
    return x


def half_mahalanobis(model: GmmModel, x: np.ndarray) -> np.ndarray:
    """``0.5 * (x - mu_k)^T Sigma_k^{-1} (x - mu_k)`` for every sample and class, ``(n, K)``."""
    x = _as_samples(model, x)
    out = np.empty((x.shape[0], model.n_components))
    for k in range(model.n_components):
        y = solve_triangular(model.chol[k], (x - model.means[k]).T, lower=True, check_finite=False)
        out[:, k] = 0.5 * np.sum(y * y, axis=0)
    return out


def log_normalizers(model: GmmModel) -> np.ndarray:
    """``0.5 * log((2 pi)^d |Sigma_k|)`` per class."""
    return 0.5 * (model.dim * _LOG_2PI + model.log_dets)


def joint_log_prob(model: GmmModel, x: np.ndarray) -> np.ndarray:
    """``log w_k + log N(x; mu_k, Sigma_k)``, shape ``(n, K)``."""
    with np.errstate(divide="ignore"):
        log_w = np.log(model.weights)
    return log_w - log_normalizers(model) - half_mahalanobis(model, x)


def e_step(model: GmmModel, x: np.ndarray) -> np.ndarray:
    """Posterior class responsibilities, computed in log space."""
    lp = joint_log_prob(model, x)
    return np.exp(lp - logsumexp(lp, axis=1, keepdims=True))


def nll(model: GmmModel, x: np.ndarray) -> np.ndarray:
    """Full mixture negative log-likelihood per sample."""
    return -logsumexp(joint_log_prob(model, x), axis=1)


def m_step(x: np.ndarray, resp: np.ndarray, ridge: float = RIDGE) -> GmmModel:
    """Weighted maximum-likelihood update with a ``ridge * I`` covariance floor.

    Classes whose responsibility mass falls below ``EMPTY_MASS`` are not
    handled here; see :func:`em_fit`.
    """
    x = np.asarray(x, dtype=np.float64)
    resp = np.asarray(resp, dtype=np.float64)
    n, d = x.shape
    if resp.ndim != 2 or resp.shape[0] != n:
        raise ShapeError("responsibilities must be an (n_samples, K) matrix")
    mass = resp.sum(axis=0)
    if np.any(mass < EMPTY_MASS):
        raise DataError("m_step received an empty class")
    weights = mass / n
    means = (resp.T @ x) / mass[:, None]
    covs = np.empty((resp.shape[1], d, d))
    for k in range(resp.shape[1]):
        xc = x - means[k]
        c = (resp[:, k, None] * xc).T @ xc / mass[k]
        covs[k] = 0.5 * (c + c.T) + ridge * np.eye(d)
    return GmmModel(weights, means, covs)


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        i = rng.choice(len(x), p=d2 / total) if total > 0 else rng.integers(len(x))
        centers.append(x[i])
        d2 = np.minimum(d2, np.sum((x - x[i]) ** 2, axis=1))
    return np.array(centers)


def init_model(x: np.ndarray, n_z: int, rng: np.random.Generator, ridge: float = RIDGE) -> GmmModel:
    """k-means++ means, global covariance, uniform weights."""
    d = x.shape[1]
    glob = np.cov(x, rowvar=False, bias=True).reshape(d, d)
    cov = 0.5 * (glob + glob.T) + ridge * np.eye(d)
    return GmmModel(np.full(n_z, 1.0 / n_z), _kmeanspp(x, n_z, rng), np.repeat(cov[None], n_z, axis=0))


def em_fit(
    samples: np.ndarray,
    n_z: int,
    seed: int = 0,
    max_iter: int = 200,
    tol: float = 1e-5,
    ridge: float = RIDGE,
) -> tuple[GmmModel, EmTrace]:
    """Fit a ``n_z``-class full-covariance GMM.

    ``trace.nll[0]`` is the mean NLL at initialization and ``trace.nll[t]``
    after the ``t``-th EM iteration.  Iteration stops when the improvement
    drops below ``tol``.  A class that loses all responsibility mass is
    re-seeded on a random sample.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"em_fit expects a 2-D sample matrix, got {x.shape}")
    if n_z < 1:
        raise ConfigError("n_z must be at least 1")
    if len(x) < n_z:
        raise DataError(f"need at least n_z={n_z} samples, got {len(x)}")
    rng = np.random.default_rng(seed)
    model = init_model(x, n_z, rng, ridge)
    trace = EmTrace([float(np.mean(nll(model, x)))])
    for it in range(max_iter):
        resp = e_step(model, x)
        mass = resp.sum(axis=0)
        empty = np.flatnonzero(mass < EMPTY_MASS)
        if empty.size:
            for k in empty:
                resp[:, k] = 0.0
                resp[rng.integers(len(x)), k] = 1.0
            resp /= resp.sum(axis=1, keepdims=True)
            trace.reinitialized += int(empty.size)
        model = m_step(x, resp, ridge)
        trace.nll.append(float(np.mean(nll(model, x))))
        trace.iterations = it + 1
        if trace.nll[-2] - trace.nll[-1] < tol:
            trace.converged = True
            break
    return model, trace


def score(model: GmmModel, x: np.ndarray) -> ScoreBreakdown:
    """``(D, A, M, L)`` of each sample under its MAP class.

    Ties in the posterior go to the lowest class index.  ``L`` is the
    directly evaluated ``-log(w_k N(x; mu_k, Sigma_k))``.
    """
    x = _as_samples(model, x)
    half_m = half_mahalanobis(model, x)
    norm = log_normalizers(model)
    with np.errstate(divide="ignore"):
        log_w = np.log(model.weights)
    lp = log_w - norm - half_m
    k = np.argmax(lp, axis=1)
    rows = np.arange(len(x))
    D = -log_w[k]
    A = norm[k]
    M = half_m[rows, k]
    # independent route for the total: residual solve on the chosen factor
    L = np.empty(len(x))
    for j in np.unique(k):
        sel = k == j
        y = solve_triangular(model.chol[j], (x[sel] - model.means[j]).T, lower=True, check_finite=False)
        log_pdf = -0.5 * np.sum(y * y, axis=0) - np.log(np.diagonal(model.chol[j])).sum() - 0.5 * model.dim * _LOG_2PI
        L[sel] = -(log_w[j] + log_pdf)
    return ScoreBreakdown(D, A, M, L)


# -- persistence -----------------------------------------------------------

_MAGIC = b"USGMMCKP"
_VERSION = 1


def _pack_array(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype="<f8")
    return struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape) + a.tobytes()


def save_gmm(path: str | Path, model: GmmModel, pca: PcaModel | None = None) -> None:
    """Binary checkpoint: magic, version, has-PCA flag, then float64 arrays.

    Array order: weights, means, covariances, and when present PCA mean,
    components, explained variances.  Each array is ``ndim``, shape, data.
    """
    parts = [_MAGIC, struct.pack("<IB", _VERSION, pca is not None)]
    for a in (model.weights, model.means, model.covs):
        parts.append(_pack_array(a))
    if pca is not None:
        for a in (pca.mean, pca.components, pca.explained_variance):
            parts.append(_pack_array(a))
    Path(path).write_bytes(b"".join(parts))


def load_gmm(path: str | Path) -> tuple[GmmModel, PcaModel | None]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise DataError(f"truncated GMM checkpoint at offset {pos}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    def array() -> np.ndarray:
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        return np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)

    if take(8) != _MAGIC:
        raise DataError(f"{path}: not a GMM checkpoint (bad magic bytes at offset 0)")
    version, has_pca = struct.unpack("<IB", take(5))
    if version != _VERSION:
        raise DataError(f"{path}: unsupported GMM checkpoint version {version}")
    model = GmmModel(array(), array(), array())
    pca = PcaModel(array(), array(), array()) if has_pca else None
    return model, pca
