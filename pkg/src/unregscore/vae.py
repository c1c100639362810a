"""Gaussian-output variational autoencoder and plain autoencoder baseline.

The encoder emits ``(mu_z, log_var_z)``; the decoder emits a per-pixel mean
and log-variance image.  Training minimizes the mean negative ELBO with one
latent sample per example per step; scoring always decodes the posterior
mean.  In ``ae`` mode the encoder emits a point code, the decoder a single
reconstruction channel, and the loss is the per-pixel mean squared error.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nn
from .breakdown import ScoreBreakdown
from .errors import ConfigError, DataError, NumericalError, ShapeError

log = logging.getLogger(__name__)

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0
_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class VaeConfig:
    """Architecture hyperparameters.

    ``arch="conv"`` is the convolutional encoder/decoder (``n_conv`` stride-2
    4x4 convolutions with ``n_c * 2**n`` channels, each followed by batchnorm
    and ReLU); ``arch="dense"`` is the two-hidden-layer fallback.
    """

    n_size: int = 32
    n_channels: int = 1
    n_z: int = 20
    n_c: int = 32
    n_conv: int = 4
    mode: str = "vae"
    arch: str = "conv"
    hidden: tuple[int, ...] = (256, 128)

    def __post_init__(self):
        if self.mode not in ("vae", "ae"):
            raise ConfigError(f"mode must be 'vae' or 'ae', got {self.mode!r}")
        if self.arch not in ("conv", "dense"):
            raise ConfigError(f"arch must be 'conv' or 'dense', got {self.arch!r}")
        if min(self.n_size, self.n_channels, self.n_z, self.n_c) <= 0:
            raise ConfigError("n_size, n_channels, n_z and n_c must be positive")
        if self.arch == "conv" and (self.n_conv < 1 or self.n_size % (2**self.n_conv)):
            raise ConfigError(f"n_size={self.n_size} is not divisible by 2**n_conv={2**self.n_conv}")

    @property
    def n_x(self) -> int:
        return self.n_channels * self.n_size * self.n_size

    @property
    def head_width(self) -> int:
        return 2 * self.n_z if self.mode == "vae" else self.n_z

    @property
    def out_channels(self) -> int:
        return 2 * self.n_channels if self.mode == "vae" else self.n_channels


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    crop: int | None = None

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ConfigError("epochs and batch_size must be positive")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")


@dataclass
class VaeModel:
    config: VaeConfig
    encoder: list[nn.LayerSpec]
    decoder: list[nn.LayerSpec]
    enc_params: nn.ParamStore
    dec_params: nn.ParamStore
    normalization: dict[str, float] = field(default_factory=lambda: {"scale": 1.0, "offset": 0.0})

    @property
    def mode(self) -> str:
        return self.config.mode


@dataclass
class EncoderOutput:
    mu_z: np.ndarray
    log_var_z: np.ndarray | None = None


@dataclass
class DecoderOutput:
    mu_x: np.ndarray
    log_var_x: np.ndarray | None = None


def build_stacks(cfg: VaeConfig) -> tuple[list[nn.LayerSpec], list[nn.LayerSpec]]:
    if cfg.arch == "dense":
        enc = [nn.reshape(cfg.n_x)]
        width = cfg.n_x
        for h in cfg.hidden:
            enc += [nn.dense(width, h), nn.relu()]
            width = h
        enc.append(nn.dense(width, cfg.head_width))
        dec = []
        width = cfg.n_z
        for h in reversed(cfg.hidden):
            dec += [nn.dense(width, h), nn.relu()]
            width = h
        dec += [
            nn.dense(width, cfg.out_channels * cfg.n_size * cfg.n_size),
            nn.reshape(cfg.out_channels, cfg.n_size, cfg.n_size),
        ]
        return enc, dec

    chans = [cfg.n_c * 2**n for n in range(cfg.n_conv)]
    side = cfg.n_size // 2**cfg.n_conv
    flat = chans[-1] * side * side
    enc = []
    c_in = cfg.n_channels
    for c in chans:
        enc += [nn.conv2d(c_in, c), nn.batchnorm(c), nn.relu()]
        c_in = c
    enc += [nn.reshape(flat), nn.dense(flat, cfg.head_width)]

    dec = [nn.dense(cfg.n_z, flat), nn.relu(), nn.reshape(chans[-1], side, side)]
    for c_hi, c_lo in zip(chans[::-1], chans[-2::-1]):
        dec += [nn.deconv2d(c_hi, c_lo), nn.batchnorm(c_lo), nn.relu()]
    dec.append(nn.deconv2d(chans[0], cfg.out_channels))
    return enc, dec


def build_model(cfg: VaeConfig, rng: np.random.Generator) -> VaeModel:
    enc, dec = build_stacks(cfg)
    return VaeModel(cfg, enc, dec, nn.init_params(enc, rng), nn.init_params(dec, rng))


def as_batch(model: VaeModel, x: np.ndarray) -> np.ndarray:
    """Coerce ``x`` to a ``(B, C, N_size, N_size)`` float64 batch."""
    cfg = model.config
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[None] if (cfg.n_channels > 1 and x.shape[0] == cfg.n_channels) else x[:, None]
    if x.ndim != 4 or x.shape[1:] != (cfg.n_channels, cfg.n_size, cfg.n_size):
        raise ShapeError(
            f"expected input of shape (B, {cfg.n_channels}, {cfg.n_size}, {cfg.n_size}), got {x.shape}"
        )
    return x


def _split_head(model: VaeModel, h: np.ndarray) -> EncoderOutput:
    if model.mode == "ae":
        return EncoderOutput(h)
    n_z = model.config.n_z
    return EncoderOutput(h[:, :n_z], np.clip(h[:, n_z:], LOG_VAR_MIN, LOG_VAR_MAX))


def _split_image(model: VaeModel, out: np.ndarray) -> DecoderOutput:
    if model.mode == "ae":
        return DecoderOutput(out)
    c = model.config.n_channels
    return DecoderOutput(out[:, :c], np.clip(out[:, c:], LOG_VAR_MIN, LOG_VAR_MAX))


def encode(model: VaeModel, x: np.ndarray) -> EncoderOutput:
    """Eval-mode encoder pass on a batch (or a single image)."""
    h, _ = nn.forward(model.encoder, model.enc_params, as_batch(model, x), mode="eval")
    return _split_head(model, h)


def reparameterize(enc: EncoderOutput, noise: np.ndarray) -> np.ndarray:
    """``z = mu_z + exp(log_var_z / 2) * noise``."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != enc.mu_z.shape:
        raise ShapeError(f"noise shape {noise.shape} does not match latent shape {enc.mu_z.shape}")
    if enc.log_var_z is None:
        return enc.mu_z + noise
    return enc.mu_z + np.exp(0.5 * enc.log_var_z) * noise


def decode(model: VaeModel, z: np.ndarray) -> DecoderOutput:
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[1] != model.config.n_z:
        raise ShapeError(f"latent must have {model.config.n_z} units, got {z.shape[1]}")
    out, _ = nn.forward(model.decoder, model.dec_params, z, mode="eval")
    return _split_image(model, out)


def negative_elbo(x: np.ndarray, enc: EncoderOutput, dec: DecoderOutput) -> ScoreBreakdown:
    """Per-sample ``(D, A, M, L)`` for a batch.

    ``L`` is evaluated separately as KL plus the Gaussian negative
    log-density of ``x`` so that ``L == D + A + M`` is a real check rather
    than a definition.
    """
    x = np.asarray(x, dtype=np.float64)
    mu_z, lv_z = enc.mu_z, enc.log_var_z
    mu_x, lv_x = dec.mu_x, dec.log_var_x
    if lv_z is None or lv_x is None:
        raise ConfigError("negative_elbo needs variance heads (vae mode)")
    if x.shape != mu_x.shape:
        raise ShapeError(f"input shape {x.shape} does not match reconstruction {mu_x.shape}")
    axes = tuple(range(1, x.ndim))
    D = 0.5 * np.sum(-lv_z - 1.0 + np.exp(lv_z) + mu_z * mu_z, axis=1)
    A = 0.5 * np.sum(_LOG_2PI + lv_x, axis=axes)
    resid = mu_x - x
    M = 0.5 * np.sum(resid * resid * np.exp(-lv_x), axis=axes)
    sd = np.exp(0.5 * lv_x)
    log_density = -0.5 * ((x - mu_x) / sd) ** 2 - np.log(sd) - 0.5 * _LOG_2PI
    L = D - np.sum(log_density, axis=axes)
    if not (np.all(np.isfinite(D)) and np.all(np.isfinite(A)) and np.all(np.isfinite(M))):
        raise NumericalError("non-finite term in negative ELBO")
    return ScoreBreakdown(D, A, M, L)


def noise_residual(x: np.ndarray, dec: DecoderOutput) -> np.ndarray:
    """Standardized residual ``(x - mu_x) / sigma_x``."""
    return (np.asarray(x, dtype=np.float64) - dec.mu_x) / np.exp(0.5 * dec.log_var_x)


def mse(x: np.ndarray, recon: np.ndarray) -> np.ndarray:
    """Per-sample mean squared error over all pixels."""
    d = np.asarray(x, dtype=np.float64) - recon
    return np.mean(d * d, axis=tuple(range(1, d.ndim)))


def ae_score(model: VaeModel, x: np.ndarray) -> np.ndarray:
    """Mean squared reconstruction error of the autoencoder baseline."""
    if model.mode != "ae":
        raise ConfigError("ae_score requires a model in 'ae' mode")
    xb = as_batch(model, x)
    return mse(xb, decode(model, encode(model, xb).mu_z).mu_x)


# -- training --------------------------------------------------------------


def loss_and_grads(
    model: VaeModel, x: np.ndarray, noise: np.ndarray | None = None, update_stats: bool = True
) -> tuple[float, ScoreBreakdown | None, list[dict], list[dict]]:
    """Mean batch loss and its exact gradients.

    For a VAE ``noise`` supplies the standard-normal draws of the
    reparameterization; the returned breakdown is evaluated at the sampled
    latent.  For an AE the loss is the mean squared error and the breakdown
    is ``None``.
    """
    x = as_batch(model, x)
    b = x.shape[0]
    h, enc_cache = nn.forward(model.encoder, model.enc_params, x, mode="train", update_stats=update_stats)
    enc = _split_head(model, h)
    if model.mode == "ae":
        z = enc.mu_z
    else:
        if noise is None:
            raise ConfigError("vae training needs reparameterization noise")
        z = reparameterize(enc, noise)
    out, dec_cache = nn.forward(model.decoder, model.dec_params, z, mode="train", update_stats=update_stats)
    dec = _split_image(model, out)

    if model.mode == "ae":
        per = mse(x, dec.mu_x)
        loss = float(per.mean())
        g_out = 2.0 * (dec.mu_x - x) / (model.config.n_x * b)
        g_z, dec_grads = nn.backward(dec_cache, g_out)
        _, enc_grads = nn.backward(enc_cache, g_z)
        return loss, None, enc_grads, dec_grads

    br = negative_elbo(x, enc, dec)
    loss = float(np.mean(br.L))
    if not np.isfinite(loss):
        raise NumericalError("non-finite training loss")
    c = model.config.n_channels
    inv_var = np.exp(-dec.log_var_x)
    resid = dec.mu_x - x
    g_mu_x = resid * inv_var / b
    g_lv_x = (0.5 - 0.5 * resid * resid * inv_var) / b
    g_lv_x *= (out[:, c:] > LOG_VAR_MIN) & (out[:, c:] < LOG_VAR_MAX)
    g_z, dec_grads = nn.backward(dec_cache, np.concatenate([g_mu_x, g_lv_x], axis=1))

    n_z = model.config.n_z
    lv_z = enc.log_var_z
    std_z = np.exp(0.5 * lv_z)
    g_mu_z = enc.mu_z / b + g_z
    g_lv_z = 0.5 * (np.exp(lv_z) - 1.0) / b + g_z * noise * 0.5 * std_z
    g_lv_z *= (h[:, n_z:] > LOG_VAR_MIN) & (h[:, n_z:] < LOG_VAR_MAX)
    _, enc_grads = nn.backward(enc_cache, np.concatenate([g_mu_z, g_lv_z], axis=1))
    return loss, br, enc_grads, dec_grads


def crop_batch(images: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """Independent uniformly placed ``size x size`` crops of an NCHW batch."""
    n, _, h, w = images.shape
    if size > h or size > w:
        raise ShapeError(f"crop size {size} exceeds image size {h}x{w}")
    if size == h and size == w:
        return images
    rows = rng.integers(0, h - size + 1, size=n)
    cols = rng.integers(0, w - size + 1, size=n)
    return np.stack([images[i, :, r : r + size, c : c + size] for i, (r, c) in enumerate(zip(rows, cols))])


def _as_nchw(images: np.ndarray | Sequence[np.ndarray], channels: int) -> np.ndarray:
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[:, None]
    if arr.ndim != 4 or arr.shape[1] != channels:
        raise ShapeError(f"training images must be (N, H, W) or (N, {channels}, H, W), got {arr.shape}")
    return arr


def train(
    model: VaeModel,
    images: np.ndarray | Sequence[np.ndarray],
    config: TrainConfig,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[VaeModel, list[dict]]:
    """Minimize the mean training loss with Adam over random crops.

    Returns the model (mutated in place, finally in eval mode with batchnorm
    statistics recalibrated over the training data) and a per-epoch trace of
    mean loss and, for a VAE, the mean D/A/M terms.
    """
    cfg = model.config
    data = _as_nchw(images, cfg.n_channels)
    if len(data) < 2:
        raise DataError("need at least two training images")
    crop = config.crop or cfg.n_size
    if crop != cfg.n_size:
        raise ConfigError(f"crop size {crop} must equal the model input size {cfg.n_size}")
    rng = np.random.default_rng(config.seed)
    enc_state = nn.AdamState(config.alpha, config.beta1, config.beta2, weight_decay=config.weight_decay)
    dec_state = nn.AdamState(config.alpha, config.beta1, config.beta2, weight_decay=config.weight_decay)
    bs = min(config.batch_size, len(data))
    trace = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(data))
        sums = {"loss": 0.0, "D": 0.0, "A": 0.0, "M": 0.0}
        seen = 0
        for start in range(0, len(order), bs):
            idx = order[start : start + bs]
            if len(idx) < 2:
                continue
            xb = crop_batch(data[idx], cfg.n_size, rng)
            noise = rng.standard_normal((len(idx), cfg.n_z)) if cfg.mode == "vae" else None
            try:
                loss, br, g_enc, g_dec = loss_and_grads(model, xb, noise)
            except NumericalError as exc:
                raise NumericalError(f"training diverged at epoch {epoch + 1}, batch {start // bs}: {exc}") from exc
            nn.adam_step(model.encoder, model.enc_params, g_enc, enc_state)
            nn.adam_step(model.decoder, model.dec_params, g_dec, dec_state)
            sums["loss"] += loss * len(idx)
            if br is not None:
                for k in ("D", "A", "M"):
                    sums[k] += float(np.sum(getattr(br, k)))
            seen += len(idx)
        row = {"epoch": epoch + 1, "loss": sums["loss"] / seen}
        if cfg.mode == "vae":
            row.update({k: sums[k] / seen for k in ("D", "A", "M")})
        trace.append(row)
        log.info("epoch %d loss %.6g", epoch + 1, row["loss"])
        if on_epoch is not None:
            on_epoch(row)
    finalize_batchnorm(model, data, rng, bs)
    return model, trace


def finalize_batchnorm(model: VaeModel, data: np.ndarray, rng: np.random.Generator, batch_size: int) -> None:
    """Set running batchnorm statistics to their average over the training data."""
    if not (nn.has_batchnorm(model.encoder) or nn.has_batchnorm(model.decoder)):
        return
    batches = [
        crop_batch(data[i : i + batch_size], model.config.n_size, rng)
        for i in range(0, len(data), batch_size)
        if len(data[i : i + batch_size]) > 1
    ]
    nn.recalibrate_batchnorm(model.encoder, model.enc_params, batches)
    if model.mode == "ae":
        codes = [nn.forward(model.encoder, model.enc_params, xb)[0] for xb in batches]
    else:
        codes = [encode(model, xb).mu_z for xb in batches]
    nn.recalibrate_batchnorm(model.decoder, model.dec_params, codes)


# -- persistence -----------------------------------------------------------


def save_model(path: str | Path, model: VaeModel) -> Path:
    """Write ``<path>`` (parameters) and ``<path>.json`` (hyperparameters)."""
    path = Path(path)
    stack = model.encoder + model.decoder
    params = nn.ParamStore(model.enc_params.layers + model.dec_params.layers)
    nn.save_params(path, stack, params)
    cfg = asdict(model.config)
    cfg["hidden"] = list(cfg["hidden"])
    sidecar = {
        "model": "vae" if model.mode == "vae" else "ae",
        "config": cfg,
        "encoder_layers": len(model.encoder),
        "normalization": model.normalization,
    }
    side = path.with_name(path.name + ".json")
    side.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return side


def load_model(path: str | Path) -> VaeModel:
    path = Path(path)
    side = path.with_name(path.name + ".json")
    if not side.exists():
        raise DataError(f"missing hyperparameter sidecar {side}")
    meta = json.loads(side.read_text())
    cfg_d = dict(meta["config"])
    cfg_d["hidden"] = tuple(cfg_d["hidden"])
    cfg = VaeConfig(**cfg_d)
    enc, dec = build_stacks(cfg)
    _, params = nn.load_params(path, enc + dec)
    n_enc = meta["encoder_layers"]
    return VaeModel(
        cfg,
        enc,
        dec,
        nn.ParamStore(params.layers[:n_enc]),
        nn.ParamStore(params.layers[n_enc:]),
        dict(meta.get("normalization", {"scale": 1.0, "offset": 0.0})),
    )
