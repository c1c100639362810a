"""Synthetic heterogeneous-complexity images, erasure anomalies, patches, I/O.

Images are float64 arrays with values in [0, 1], shape ``(H, W)`` for
grayscale or ``(3, H, W)`` when the RGB switch is on.  Every random draw
comes from a generator derived from an explicit seed; per-image generators
mix the seed with the cluster and image index so output never depends on
generation order.
"""

from __future__ import annotations

import configparser
import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError, ShapeError

ERASE_FILL = 0.5
NORMAL = 0
ANOMALOUS = 1


@dataclass
class LabeledImage:
    pixels: np.ndarray
    label: int = NORMAL
    cluster_id: int = 0
    mask: np.ndarray | None = None
    name: str = ""

    @property
    def spatial_shape(self) -> tuple[int, int]:
        return self.pixels.shape[-2:]


@dataclass(frozen=True)
class ClusterSpec:
    """Appearance parameters of one complexity cluster.

    An image is ``level + sum_k amp_k * sin(2*pi*(fx_k*u + fy_k*v) + phase_k)``
    plus iid Gaussian pixel noise, clipped to [0, 1]; ``u, v`` run over
    ``[0, 1)``.  ``level`` jitters by ``level_jitter`` (std), each amplitude
    by a uniform factor in ``[1 - amplitude_jitter, 1 + amplitude_jitter]``
    and each phase by ``phase_jitter * U(-pi, pi)``.
    """

    n_samples: int
    level: float = 0.5
    level_jitter: float = 0.0
    frequencies: tuple[tuple[float, float], ...] = ()
    amplitude: float = 0.0
    amplitude_jitter: float = 0.0
    phase_jitter: float = 0.0
    noise: float = 0.0


def default_clusters(n_per_cluster: int) -> tuple[ClusterSpec, ...]:
    """A nearly flat cluster and a noisy two-frequency texture cluster.

    Per-pixel variance differs by roughly 14x between the two.  Most of the
    textured cluster's variability is pixel noise, which a Gaussian decoder
    can represent through its variance head.
    """
    simple = ClusterSpec(
        n_samples=n_per_cluster,
        level=0.35,
        level_jitter=0.01,
        frequencies=((0.5, 0.0),),
        amplitude=0.01,
        amplitude_jitter=0.5,
        phase_jitter=0.25,
        noise=0.025,
    )
    textured = ClusterSpec(
        n_samples=n_per_cluster,
        level=0.78,
        level_jitter=0.02,
        frequencies=((2.0, 1.0), (-1.0, 3.0)),
        amplitude=0.06,
        amplitude_jitter=0.5,
        phase_jitter=1.0,
        noise=0.085,
    )
    return (simple, textured)


@dataclass(frozen=True)
class SynthSpec:
    image_size: int = 32
    clusters: tuple[ClusterSpec, ...] = field(default_factory=lambda: default_clusters(3000))
    seed: int = 0
    rgb: bool = False

    def __post_init__(self):
        if not self.clusters:
            raise ConfigError("synthetic spec needs at least one cluster")
        if self.image_size < 1:
            raise ConfigError("image_size must be positive")
        if any(c.n_samples < 0 for c in self.clusters):
            raise ConfigError("cluster sample counts must be non-negative")


def _image_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def render_cluster_image(cs: ClusterSpec, size: int, rng: np.random.Generator, channels: int = 1) -> np.ndarray:
    """Draw one image of cluster ``cs``."""
    u = np.arange(size) / size
    vv, uu = np.meshgrid(u, u, indexing="ij")
    img = np.full((size, size), cs.level + cs.level_jitter * rng.standard_normal())
    for fx, fy in cs.frequencies:
        amp = cs.amplitude * (1.0 + cs.amplitude_jitter * rng.uniform(-1.0, 1.0))
        phase = cs.phase_jitter * rng.uniform(-np.pi, np.pi)
        img += amp * np.sin(2 * np.pi * (fx * uu + fy * vv) + phase)
    if channels > 1:
        img = np.repeat(img[None], channels, axis=0)
    img = img + cs.noise * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(spec: SynthSpec) -> list[LabeledImage]:
    """All-normal images, cluster by cluster, deterministic in ``spec.seed``."""
    channels = 3 if spec.rgb else 1
    out = []
    for k, cs in enumerate(spec.clusters):
        for i in range(cs.n_samples):
            px = render_cluster_image(cs, spec.image_size, _image_rng(spec.seed, k, i), channels)
            out.append(LabeledImage(px, NORMAL, k, None, f"c{k}_{i:06d}"))
    return out


def inject_erasure(
    img: LabeledImage, k: int = 4, seed: int | np.random.Generator = 0, fill: float = ERASE_FILL
) -> LabeledImage:
    """Copy of ``img`` with a uniformly placed ``k x k`` block set to ``fill``.

    The block always lies fully inside the image.
    """
    h, w = img.spatial_shape
    if k < 1 or k > min(h, w):
        raise ShapeError(f"erasure size {k} does not fit a {h}x{w} image")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    r = int(rng.integers(0, h - k + 1))
    c = int(rng.integers(0, w - k + 1))
    px = img.pixels.copy()
    px[..., r : r + k, c : c + k] = fill
    mask = np.zeros((h, w), dtype=bool) if img.mask is None else img.mask.copy()
    mask[r : r + k, c : c + k] = True
    return LabeledImage(px, ANOMALOUS, img.cluster_id, mask, img.name)


@dataclass
class DatasetSplit:
    train: list[LabeledImage]
    test: list[LabeledImage]
    contamination: float = 0.0


def make_split(
    normals: Sequence[LabeledImage],
    k: int = 4,
    rho_train: float = 0.01,
    seed: int = 0,
    n_test: int | None = None,
) -> DatasetSplit:
    """Split normals into a contaminated train set and a paired test set.

    ``n_test`` normals (default: a fifth) are held out; each is duplicated and
    one copy erased, so the test set is exactly half anomalous.  Of the
    remaining training images ``floor(n_train * rho_train)`` are erased.
    """
    if not 0.0 <= rho_train <= 0.5:
        raise ConfigError(f"rho_train must lie in [0, 0.5], got {rho_train}")
    n = len(normals)
    if n_test is None:
        n_test = n // 5
    if n_test < 1 or n - n_test < 1:
        raise DataError(f"insufficient samples: {n} normals cannot provide {n_test} test and >=1 train")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    order = rng.permutation(n)
    test_idx, train_idx = order[:n_test], order[n_test:]

    n_train = len(train_idx)
    n_bad = math.floor(n_train * rho_train)
    bad = set(rng.choice(n_train, size=n_bad, replace=False).tolist()) if n_bad else set()
    train = []
    for j, i in enumerate(train_idx):
        img = normals[i]
        train.append(inject_erasure(img, k, rng) if j in bad else img)

    test = []
    for i in test_idx:
        test.append(normals[i])
        test.append(inject_erasure(normals[i], k, rng))
    return DatasetSplit(train, test, rho_train)


# -- patches ---------------------------------------------------------------


@dataclass(frozen=True)
class PatchGrid:
    size: int
    stride: int = 16
    origin: tuple[int, int] = (0, 0)

    def shape(self, h: int, w: int) -> tuple[int, int]:
        """Number of patch rows and columns on an ``h x w`` image."""
        r0, c0 = self.origin
        if self.stride < 1:
            raise ShapeError("stride must be >= 1")
        if self.size < 1 or self.size > min(h - r0, w - c0):
            raise ShapeError(f"patch size {self.size} does not fit a {h}x{w} image at origin {self.origin}")
        return (h - r0 - self.size) // self.stride + 1, (w - c0 - self.size) // self.stride + 1

    def window(self, row: int, col: int) -> tuple[slice, slice]:
        r = self.origin[0] + row * self.stride
        c = self.origin[1] + col * self.stride
        return slice(r, r + self.size), slice(c, c + self.size)


def random_crop(pixels: np.ndarray, size: int, seed: int | np.random.Generator = 0) -> np.ndarray:
    """Uniformly placed ``size x size`` crop."""
    h, w = pixels.shape[-2:]
    if size < 1 or size > min(h, w):
        raise ShapeError(f"crop size {size} exceeds image size {h}x{w}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    r = int(rng.integers(0, h - size + 1))
    c = int(rng.integers(0, w - size + 1))
    return pixels[..., r : r + size, c : c + size].copy()


def sliding_crops(pixels: np.ndarray, grid: PatchGrid) -> list[tuple[int, int, np.ndarray]]:
    """Row-major ``(row, col, patch)`` list over the grid."""
    rows, cols = grid.shape(*pixels.shape[-2:])
    out = []
    for r in range(rows):
        for c in range(cols):
            rs, cs = grid.window(r, c)
            out.append((r, c, pixels[..., rs, cs]))
    return out


def patch_stack(pixels: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """All grid patches as one array, row-major, shape ``(n, ..., P, P)``."""
    return np.stack([p for _, _, p in sliding_crops(pixels, grid)])


# -- PGM and manifests -----------------------------------------------------


def write_image(path: str | Path, pixels: np.ndarray, maxval: int = 255) -> None:
    """Write a grayscale image in [0, 1] as binary PGM (P5)."""
    px = np.asarray(pixels, dtype=np.float64)
    if px.ndim == 3 and px.shape[0] == 1:
        px = px[0]
    if px.ndim != 2:
        raise ShapeError(f"PGM output needs a 2-D grayscale image, got {px.shape}")
    if maxval not in (255, 65535):
        raise ValueError("maxval must be 255 or 65535")
    q = np.rint(np.clip(px, 0.0, 1.0) * maxval)
    h, w = px.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    body = q.astype(">u2" if maxval > 255 else np.uint8).tobytes()
    Path(path).write_bytes(header + body)


def read_image(path: str | Path) -> np.ndarray:
    """Read a binary PGM (8- or 16-bit) into a float array in [0, 1]."""
    buf = Path(path).read_bytes()
    return decode_pgm(buf, str(path))


def decode_pgm(buf: bytes, name: str = "<bytes>") -> np.ndarray:
    if buf[:2] != b"P5":
        raise DataError(f"{name}: not a binary PGM (magic {buf[:2]!r} at offset 0)")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise DataError(f"{name}: malformed PGM header at offset {pos}")
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise DataError(f"{name}: malformed PGM header at offset {pos}")
    pos += 1
    w, h, maxval = fields
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise DataError(f"{name}: invalid PGM dimensions or maxval in header ending at offset {pos}")
    itemsize = 1 if maxval < 256 else 2
    need = w * h * itemsize
    if len(buf) - pos < need:
        raise DataError(f"{name}: truncated PGM payload at offset {pos}: need {need} bytes, have {len(buf) - pos}")
    raw = np.frombuffer(buf, dtype=np.uint8 if itemsize == 1 else ">u2", count=w * h, offset=pos)
    return raw.reshape(h, w).astype(np.float64) / maxval


MANIFEST_FIELDS = ("path", "label", "cluster_id")


def write_manifest(path: str | Path, rows: Sequence[tuple[str, int, int]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for p, label, cluster in rows:
            w.writerow([Path(p).as_posix(), int(label), int(cluster)])


def read_manifest(path: str | Path) -> list[tuple[str, int, int]]:
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames is None or any(f not in rd.fieldnames for f in MANIFEST_FIELDS):
            raise DataError(f"{path}: manifest must have columns {', '.join(MANIFEST_FIELDS)}")
        return [(r["path"], int(r["label"]), int(r["cluster_id"])) for r in rd]


def save_images(root: str | Path, subdir: str, images: Sequence[LabeledImage]) -> Path:
    """Write ``images`` as PGM under ``root/subdir`` plus ``root/subdir.csv``.

    Ground-truth erasure masks are stored next to anomalous images as
    ``<name>.mask.pgm``.
    """
    root = Path(root)
    (root / subdir).mkdir(parents=True, exist_ok=True)
    rows = []
    for i, img in enumerate(images):
        stem = f"{i:06d}"
        rel = f"{subdir}/{stem}.pgm"
        write_image(root / rel, img.pixels)
        if img.mask is not None:
            write_image(root / f"{subdir}/{stem}.mask.pgm", img.mask.astype(np.float64))
        rows.append((rel, img.label, img.cluster_id))
    manifest = root / f"{subdir}.csv"
    write_manifest(manifest, rows)
    return manifest


def load_directory(manifest: str | Path) -> list[LabeledImage]:
    """Load the PGM images listed in a manifest (paths relative to it)."""
    manifest = Path(manifest)
    if not manifest.exists():
        raise DataError(f"manifest {manifest} does not exist")
    out = []
    for rel, label, cluster in read_manifest(manifest):
        p = manifest.parent / rel
        if not p.exists():
            raise DataError(f"image {p} listed in {manifest} does not exist")
        mask_p = p.with_name(p.stem + ".mask.pgm")
        mask = read_image(mask_p) > 0.5 if mask_p.exists() else None
        out.append(LabeledImage(read_image(p), label, cluster, mask, rel))
    return out


def iter_pixels(images: Sequence[LabeledImage]) -> Iterator[np.ndarray]:
    for img in images:
        yield img.pixels


# -- SynthSpec config ------------------------------------------------------


def synth_spec_from_config(cp: configparser.ConfigParser, section: str = "dataset") -> SynthSpec:
    """Read a :class:`SynthSpec` from an INI section.

    Keys: ``image_size``, ``seed``, ``rgb``, ``samples_per_cluster`` and
    optional per-cluster overrides in sections ``[<section>.cluster<k>]``.
    """
    if not cp.has_section(section):
        return SynthSpec()
    sec = cp[section]
    n = sec.getint("samples_per_cluster", 3000)
    clusters = list(default_clusters(n))
    k = 0
    while cp.has_section(f"{section}.cluster{k}"):
        cs = cp[f"{section}.cluster{k}"]
        base = clusters[k] if k < len(clusters) else ClusterSpec(n)
        freqs = base.frequencies
        if "frequencies" in cs:
            freqs = tuple(
                tuple(float(v) for v in pair.split(":")) for pair in cs["frequencies"].split() if pair
            )
        upd = replace(
            base,
            n_samples=cs.getint("n_samples", n),
            level=cs.getfloat("level", base.level),
            level_jitter=cs.getfloat("level_jitter", base.level_jitter),
            frequencies=freqs,
            amplitude=cs.getfloat("amplitude", base.amplitude),
            amplitude_jitter=cs.getfloat("amplitude_jitter", base.amplitude_jitter),
            phase_jitter=cs.getfloat("phase_jitter", base.phase_jitter),
            noise=cs.getfloat("noise", base.noise),
        )
        if k < len(clusters):
            clusters[k] = upd
        else:
            clusters.append(upd)
        k += 1
    return SynthSpec(
        image_size=sec.getint("image_size", 32),
        clusters=tuple(clusters),
        seed=sec.getint("seed", 0),
        rgb=sec.getboolean("rgb", False),
    )
