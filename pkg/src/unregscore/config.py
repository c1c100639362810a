"""Experiment configuration read from an INI file.

Four sections are recognized.  Every key has a default matching the 32x32
toy configuration except ``[training] seed``, which must be given in the
file or on the command line::

    [dataset]
    source = synthetic          ; or "directory"
    manifest =                  ; train manifest when source = directory
    test_manifest =
    image_size = 32
    samples_per_cluster = 3000
    rho_train = 0.01
    erase_size = 4
    n_test = 1000

    [model]
    kind = vae                  ; vae | ae | gmm
    arch = conv                 ; conv | dense
    n_size = 32
    n_conv = 4
    n_c = 32
    n_z = 20
    hidden = 256,128
    n_h = 20                    ; PCA feature size for gmm

    [training]
    seed = 0
    epochs = 30
    batch_size = 32
    alpha = 0.001
    beta1 = 0.9
    beta2 = 0.999
    weight_decay = 0.0001
    max_iter = 200
    tol = 1e-5
    ridge = 1e-6

    [eval]
    kinds = L,D,A,M
    patch_size = 32
    stride = 16
    heatmap_stride = 4
    out_dir = runs
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .breakdown import ScoreKind
from .data import SynthSpec, synth_spec_from_config
from .errors import ConfigError
from .vae import TrainConfig, VaeConfig

MODEL_KINDS = ("vae", "ae", "gmm")


@dataclass(frozen=True)
class DatasetConfig:
    source: str = "synthetic"
    manifest: str = ""
    test_manifest: str = ""
    synth: SynthSpec = field(default_factory=SynthSpec)
    rho_train: float = 0.01
    erase_size: int = 4
    n_test: int = 1000


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "vae"
    arch: str = "conv"
    n_size: int = 32
    n_conv: int = 4
    n_c: int = 32
    n_z: int = 20
    hidden: tuple[int, ...] = (256, 128)
    n_h: int = 20

    def vae_config(self, n_channels: int = 1) -> VaeConfig:
        return VaeConfig(
            n_size=self.n_size,
            n_channels=n_channels,
            n_z=self.n_z,
            n_c=self.n_c,
            n_conv=self.n_conv,
            mode="ae" if self.kind == "ae" else "vae",
            arch=self.arch,
            hidden=self.hidden,
        )


@dataclass(frozen=True)
class TrainingConfig:
    seed: int
    epochs: int = 30
    batch_size: int = 32
    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    max_iter: int = 200
    tol: float = 1e-5
    ridge: float = 1e-6

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.seed,
            alpha=self.alpha,
            beta1=self.beta1,
            beta2=self.beta2,
            weight_decay=self.weight_decay,
        )


@dataclass(frozen=True)
class EvalConfig:
    kinds: tuple[str, ...] = ("L", "D", "A", "M")
    patch_size: int = 32
    stride: int = 16
    heatmap_stride: int = 4
    out_dir: str = "runs"


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig
    model: ModelConfig
    training: TrainingConfig
    eval: EvalConfig

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(
            self,
            training=replace(self.training, seed=seed),
            dataset=replace(self.dataset, synth=replace(self.dataset.synth, seed=seed)),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"]["hidden"] = list(self.model.hidden)
        d["eval"]["kinds"] = list(self.eval.kinds)
        return d

    def digest(self) -> str:
        """Stable hash of the resolved configuration."""
        return hashlib.sha256(repr(sorted(_flatten(self.to_dict()))).encode()).hexdigest()[:16]


def _flatten(d, prefix=""):
    for k, v in d.items():
        if isinstance(v, dict):
            yield from _flatten(v, f"{prefix}{k}.")
        else:
            yield f"{prefix}{k}", repr(v)


def _int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(" ", "").split(",") if t)


def _get(sec, key, conv, default):
    if sec is None or key not in sec:
        return default
    try:
        return conv(sec[key])
    except ValueError as exc:
        raise ConfigError(f"[{sec.name}] {key} = {sec[key]!r}: {exc}") from None


def parse_config(cp: configparser.ConfigParser, seed: int | None = None, base_dir: str | Path = ".") -> ExperimentConfig:
    """Build an :class:`ExperimentConfig` from a parsed INI file.

    ``seed`` overrides ``[training] seed``; one of the two is required.
    Relative manifest paths resolve against ``base_dir``.
    """
    known = {"dataset", "model", "training", "eval"}
    for name in cp.sections():
        if name.split(".")[0] not in known:
            raise ConfigError(f"unknown config section [{name}]")
    ds = cp["dataset"] if cp.has_section("dataset") else None
    md = cp["model"] if cp.has_section("model") else None
    tr = cp["training"] if cp.has_section("training") else None
    ev = cp["eval"] if cp.has_section("eval") else None

    file_seed = _get(tr, "seed", int, None)
    if seed is None:
        seed = file_seed
    if seed is None:
        raise ConfigError("a seed is required: set [training] seed or pass --seed")

    kind = _get(md, "kind", str.strip, "vae")
    if kind not in MODEL_KINDS:
        raise ConfigError(f"[model] kind must be one of {', '.join(MODEL_KINDS)}, got {kind!r}")
    n_size = _get(md, "n_size", int, 32)
    model = ModelConfig(
        kind=kind,
        arch=_get(md, "arch", str.strip, "conv"),
        n_size=n_size,
        n_conv=_get(md, "n_conv", int, 4),
        n_c=_get(md, "n_c", int, 32),
        n_z=_get(md, "n_z", int, 20),
        hidden=_get(md, "hidden", _int_tuple, (256, 128)),
        n_h=_get(md, "n_h", int, 20),
    )
    if kind != "gmm":
        model.vae_config()  # validates geometry early
    if min(model.n_z, model.n_h) < 1:
        raise ConfigError("[model] n_z and n_h must be positive")

    source = _get(ds, "source", str.strip, "synthetic")
    if source not in ("synthetic", "directory"):
        raise ConfigError(f"[dataset] source must be 'synthetic' or 'directory', got {source!r}")
    base_dir = Path(base_dir)

    def resolve(p: str) -> str:
        return str(base_dir / p) if p and not Path(p).is_absolute() else p

    synth = replace(synth_spec_from_config(cp, "dataset"), seed=seed)
    dataset = DatasetConfig(
        source=source,
        manifest=resolve(_get(ds, "manifest", str.strip, "")),
        test_manifest=resolve(_get(ds, "test_manifest", str.strip, "")),
        synth=synth,
        rho_train=_get(ds, "rho_train", float, 0.01),
        erase_size=_get(ds, "erase_size", int, 4),
        n_test=_get(ds, "n_test", int, 1000),
    )
    if source == "directory" and not dataset.manifest:
        raise ConfigError("[dataset] source = directory needs a manifest")

    training = TrainingConfig(
        seed=seed,
        epochs=_get(tr, "epochs", int, 30),
        batch_size=_get(tr, "batch_size", int, 32),
        alpha=_get(tr, "alpha", float, 1e-3),
        beta1=_get(tr, "beta1", float, 0.9),
        beta2=_get(tr, "beta2", float, 0.999),
        weight_decay=_get(tr, "weight_decay", float, 1e-4),
        max_iter=_get(tr, "max_iter", int, 200),
        tol=_get(tr, "tol", float, 1e-5),
        ridge=_get(tr, "ridge", float, 1e-6),
    )
    training.train_config()

    kinds = tuple(k.strip() for k in _get(ev, "kinds", str, "L,D,A,M").split(",") if k.strip())
    for k in kinds:
        try:
            ScoreKind(k)
        except ValueError:
            raise ConfigError(f"[eval] unknown score kind {k!r}") from None
    evc = EvalConfig(
        kinds=kinds,
        patch_size=_get(ev, "patch_size", int, n_size),
        stride=_get(ev, "stride", int, 16),
        heatmap_stride=_get(ev, "heatmap_stride", int, 4),
        out_dir=_get(ev, "out_dir", str.strip, "runs"),
    )
    if evc.patch_size != n_size and kind != "gmm":
        raise ConfigError(f"[eval] patch_size {evc.patch_size} must equal [model] n_size {n_size}")
    if min(evc.stride, evc.heatmap_stride) < 1:
        raise ConfigError("[eval] strides must be positive")
    return ExperimentConfig(dataset, model, training, evc)


def load_config(path: str | Path | None, seed: int | None = None) -> ExperimentConfig:
    """Read and validate an experiment config; ``None`` means all defaults."""
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    base = Path(".")
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        base = path.parent
    return parse_config(cp, seed=seed, base_dir=base)
