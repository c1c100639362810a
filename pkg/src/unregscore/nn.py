"""Minimal deterministic neural-network core.

Layers are described by :class:`LayerSpec` records and evaluated by the
module-level :func:`forward` / :func:`backward` pair.  Parameters live in a
:class:`ParamStore` separate from the layer descriptions so the same stack can
be evaluated with perturbed parameters (finite differences) or shared
read-only across threads in eval mode.

Tensors are plain ``float64`` numpy arrays with the batch axis first.
Convolutions use NCHW layout.

Checkpoint layout (all integers little-endian)::

    magic      8 bytes   b"USNNCKPT"
    version    uint32    currently 1
    n_layers   uint32
    per layer:
      kind     uint8     index into LAYER_KINDS
      n_tensor uint32
      per tensor:
        name_len uint8, name (ascii)
        ndim     uint32, shape uint32 * ndim
        data     float64 * prod(shape), row-major

Reading a file written by :func:`save_params` reproduces every array
bit-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import DataError, NumericalError, ShapeError, StaleCacheError

LAYER_KINDS = ("dense", "conv2d", "deconv2d", "batchnorm", "relu", "reshape")

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_MAGIC = b"USNNCKPT"
_FORMAT_VERSION = 1

_TRAINABLE = {
    "dense": ("W", "b"),
    "conv2d": ("W", "b"),
    "deconv2d": ("W", "b"),
    "batchnorm": ("gamma", "beta"),
}
_BUFFERS = {"batchnorm": ("running_mean", "running_var")}


@dataclass(frozen=True)
class LayerSpec:
    """Static description of one layer.

    ``dense``: ``n_in -> n_out`` features.
    ``conv2d`` / ``deconv2d``: ``n_in -> n_out`` channels with a square
    kernel; ``deconv2d`` is the transposed convolution used by decoders.
    ``batchnorm``: ``n_in`` features (2-D input) or channels (4-D input).
    ``reshape``: reshapes the non-batch axes to ``shape``.
    """

    kind: str
    n_in: int = 0
    n_out: int = 0
    kernel: int = 4
    stride: int = 2
    padding: int = 1
    shape: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ShapeError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("dense", "conv2d", "deconv2d") and (self.n_in <= 0 or self.n_out <= 0):
            raise ShapeError(f"{self.kind} layer needs positive dims, got {self.n_in}->{self.n_out}")
        if self.kind == "batchnorm" and self.n_in <= 0:
            raise ShapeError("batchnorm layer needs a positive feature count")
        if self.kind in ("conv2d", "deconv2d") and (self.kernel < 1 or self.stride < 1 or self.padding < 0):
            raise ShapeError("invalid convolution geometry")

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        """Spatial output size of a (de)convolution for an ``h x w`` input."""
        k, s, p = self.kernel, self.stride, self.padding
        if self.kind == "conv2d":
            if (h + 2 * p - k) % s or (w + 2 * p - k) % s:
                raise ShapeError(f"conv geometry k={k} s={s} p={p} does not tile a {h}x{w} input")
            return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
        if self.kind == "deconv2d":
            return (h - 1) * s - 2 * p + k, (w - 1) * s - 2 * p + k
        raise ShapeError(f"{self.kind} has no spatial geometry")


def dense(n_in: int, n_out: int) -> LayerSpec:
    return LayerSpec("dense", n_in, n_out)


def conv2d(n_in: int, n_out: int, kernel: int = 4, stride: int = 2, padding: int = 1) -> LayerSpec:
    return LayerSpec("conv2d", n_in, n_out, kernel, stride, padding)


def deconv2d(n_in: int, n_out: int, kernel: int = 4, stride: int = 2, padding: int = 1) -> LayerSpec:
    return LayerSpec("deconv2d", n_in, n_out, kernel, stride, padding)


def batchnorm(n: int) -> LayerSpec:
    return LayerSpec("batchnorm", n)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def reshape(*shape: int) -> LayerSpec:
    return LayerSpec("reshape", shape=tuple(shape))


@dataclass
class ParamStore:
    """Per-layer parameter and buffer arrays for one stack.

    ``version`` increases on every trainable-parameter mutation made through
    :meth:`bump`; forward caches remember the version they were built with.
    """

    layers: list[dict[str, np.ndarray]]
    version: int = 0

    def bump(self) -> None:
        self.version += 1

    def trainable(self, stack: Sequence[LayerSpec]) -> Iterable[tuple[int, str, np.ndarray]]:
        for i, spec in enumerate(stack):
            for name in _TRAINABLE.get(spec.kind, ()):
                yield i, name, self.layers[i][name]

    def n_trainable(self, stack: Sequence[LayerSpec]) -> int:
        return sum(a.size for _, _, a in self.trainable(stack))

    def copy(self) -> "ParamStore":
        return ParamStore([{k: v.copy() for k, v in d.items()} for d in self.layers], self.version)


def init_params(stack: Sequence[LayerSpec], rng: np.random.Generator) -> ParamStore:
    """Glorot-uniform weights, zero biases, unit batchnorm scale."""
    layers = []
    for spec in stack:
        d: dict[str, np.ndarray] = {}
        if spec.kind == "dense":
            a = np.sqrt(6.0 / (spec.n_in + spec.n_out))
            d["W"] = rng.uniform(-a, a, size=(spec.n_out, spec.n_in))
            d["b"] = np.zeros(spec.n_out)
        elif spec.kind in ("conv2d", "deconv2d"):
            k2 = spec.kernel * spec.kernel
            a = np.sqrt(6.0 / (spec.n_in * k2 + spec.n_out * k2))
            shape = (spec.n_out, spec.n_in) if spec.kind == "conv2d" else (spec.n_in, spec.n_out)
            d["W"] = rng.uniform(-a, a, size=shape + (spec.kernel, spec.kernel))
            d["b"] = np.zeros(spec.n_out)
        elif spec.kind == "batchnorm":
            d["gamma"] = np.ones(spec.n_in)
            d["beta"] = np.zeros(spec.n_in)
            d["running_mean"] = np.zeros(spec.n_in)
            d["running_var"] = np.ones(spec.n_in)
        layers.append(d)
    return ParamStore(layers)


def output_shape(stack: Sequence[LayerSpec], in_shape: tuple[int, ...]) -> tuple[int, ...]:
    """Per-sample output shape of ``stack`` for per-sample input ``in_shape``."""
    shape = tuple(in_shape)
    for spec in stack:
        _check_input(spec, shape)
        if spec.kind == "dense":
            shape = (spec.n_out,)
        elif spec.kind in ("conv2d", "deconv2d"):
            shape = (spec.n_out,) + spec.out_hw(shape[1], shape[2])
        elif spec.kind == "reshape":
            shape = spec.shape
    return shape


def _check_input(spec: LayerSpec, shape: tuple[int, ...]) -> None:
    if spec.kind == "dense" and shape != (spec.n_in,):
        raise ShapeError(f"dense layer expects ({spec.n_in},) per sample, got {shape}")
    if spec.kind in ("conv2d", "deconv2d") and (len(shape) != 3 or shape[0] != spec.n_in):
        raise ShapeError(f"{spec.kind} layer expects ({spec.n_in}, H, W) per sample, got {shape}")
    if spec.kind == "batchnorm" and (len(shape) not in (1, 3) or shape[0] != spec.n_in):
        raise ShapeError(f"batchnorm layer expects {spec.n_in} features/channels, got {shape}")
    if spec.kind == "reshape" and int(np.prod(shape)) != int(np.prod(spec.shape)):
        raise ShapeError(f"cannot reshape {shape} to {spec.shape}")


# -- convolution helpers ---------------------------------------------------


def _im2col(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    """Patches of padded input ``xp`` as a ``(B*ho*wo, C*k*k)`` matrix."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : s * (ho - 1) + 1 : s, : s * (wo - 1) + 1 : s]
    b, c = xp.shape[:2]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)


def _col2im(cols: np.ndarray, shape: tuple[int, ...], k: int, s: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patch columns into ``shape``."""
    b, c = shape[:2]
    cols = cols.reshape(b, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros(shape)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + s * ho : s, j : j + s * wo : s] += cols[:, :, i, j]
    return out


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _unpad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return x[:, :, p:-p, p:-p]


# -- forward / backward ----------------------------------------------------


@dataclass
class Cache:
    """Activation record produced by :func:`forward` in train mode."""

    stack: tuple[LayerSpec, ...]
    params: ParamStore
    version: int
    records: list[Any] = field(default_factory=list)


def forward(
    stack: Sequence[LayerSpec],
    params: ParamStore,
    x: np.ndarray,
    mode: str = "eval",
    update_stats: bool = True,
    momentum: float = BN_MOMENTUM,
) -> tuple[np.ndarray, Cache | None]:
    """Evaluate ``stack`` on a batch ``x``.

    In ``"train"`` mode batchnorm normalizes with batch statistics (and, when
    ``update_stats`` is set, moves the running averages in ``params`` toward
    the batch statistics by ``momentum``) and a
    :class:`Cache` for :func:`backward` is returned.  ``"eval"`` mode is a pure
    function of ``(params, x)`` and returns ``None`` for the cache.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train"
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2:
        raise ShapeError("forward expects a batch axis")
    cache = Cache(tuple(stack), params, params.version) if train else None
    for i, spec in enumerate(stack):
        _check_input(spec, x.shape[1:])
        p = params.layers[i]
        rec: Any = None
        if spec.kind == "dense":
            rec = x
            x = x @ p["W"].T + p["b"]
        elif spec.kind == "relu":
            mask = x > 0
            rec = mask
            x = x * mask
        elif spec.kind == "reshape":
            rec = x.shape
            x = x.reshape((x.shape[0],) + spec.shape)
        elif spec.kind == "conv2d":
            k, s = spec.kernel, spec.stride
            ho, wo = spec.out_hw(x.shape[2], x.shape[3])
            xp = _pad(x, spec.padding)
            cols = _im2col(xp, k, s, ho, wo)
            out = cols @ p["W"].reshape(spec.n_out, -1).T + p["b"]
            rec = (cols, xp.shape)
            x = out.reshape(x.shape[0], ho, wo, spec.n_out).transpose(0, 3, 1, 2)
        elif spec.kind == "deconv2d":
            k, s = spec.kernel, spec.stride
            b, _, h, w = x.shape
            ho, wo = spec.out_hw(h, w)
            xm = x.transpose(0, 2, 3, 1).reshape(b * h * w, spec.n_in)
            cols = xm @ p["W"].reshape(spec.n_in, -1)
            full = (b, spec.n_out, ho + 2 * spec.padding, wo + 2 * spec.padding)
            out = _unpad(_col2im(cols, full, k, s, h, w), spec.padding)
            rec = (xm, x.shape, full)
            x = out + p["b"][None, :, None, None]
        elif spec.kind == "batchnorm":
            axes = (0,) if x.ndim == 2 else (0, 2, 3)
            bshape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
            if train:
                mean = x.mean(axis=axes)
                var = x.var(axis=axes)
                if update_stats:
                    n = x.size // spec.n_in
                    unbiased = var * n / max(n - 1, 1)
                    p["running_mean"] *= 1 - momentum
                    p["running_mean"] += momentum * mean
                    p["running_var"] *= 1 - momentum
                    p["running_var"] += momentum * unbiased
            else:
                mean, var = p["running_mean"], p["running_var"]
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
            rec = (xhat, inv_std, axes, bshape)
            x = xhat * p["gamma"].reshape(bshape) + p["beta"].reshape(bshape)
        if train:
            cache.records.append(rec)
    if not np.all(np.isfinite(x)):
        raise NumericalError("non-finite activation in forward pass")
    return x, cache


def backward(cache: Cache, grad_output: np.ndarray) -> tuple[np.ndarray, list[dict[str, np.ndarray]]]:
    """Reverse-mode gradient of the stack recorded in ``cache``.

    Returns the gradient with respect to the stack input and a list (one dict
    per layer) of gradients for the trainable parameters.
    """
    if cache is None:
        raise ValueError("backward needs a cache from a train-mode forward call")
    if cache.params.version != cache.version:
        raise StaleCacheError("parameters changed since the forward pass that built this cache")
    g = np.asarray(grad_output, dtype=np.float64)
    grads: list[dict[str, np.ndarray]] = [{} for _ in cache.stack]
    for i in range(len(cache.stack) - 1, -1, -1):
        spec, rec, p = cache.stack[i], cache.records[i], cache.params.layers[i]
        if spec.kind == "dense":
            grads[i]["W"] = g.T @ rec
            grads[i]["b"] = g.sum(axis=0)
            g = g @ p["W"]
        elif spec.kind == "relu":
            g = g * rec
        elif spec.kind == "reshape":
            g = g.reshape(rec)
        elif spec.kind == "conv2d":
            cols, xp_shape = rec
            b, _, ho, wo = g.shape
            gm = g.transpose(0, 2, 3, 1).reshape(b * ho * wo, spec.n_out)
            grads[i]["W"] = (gm.T @ cols).reshape(p["W"].shape)
            grads[i]["b"] = gm.sum(axis=0)
            dcols = gm @ p["W"].reshape(spec.n_out, -1)
            g = _unpad(_col2im(dcols, xp_shape, spec.kernel, spec.stride, ho, wo), spec.padding)
        elif spec.kind == "deconv2d":
            xm, x_shape, full = rec
            b, _, h, w = x_shape
            grads[i]["b"] = g.sum(axis=(0, 2, 3))
            gp = _pad(g, spec.padding)
            dcols = _im2col(gp, spec.kernel, spec.stride, h, w)
            grads[i]["W"] = (xm.T @ dcols).reshape(p["W"].shape)
            g = (dcols @ p["W"].reshape(spec.n_in, -1).T).reshape(b, h, w, spec.n_in).transpose(0, 3, 1, 2)
        elif spec.kind == "batchnorm":
            xhat, inv_std, axes, bshape = rec
            grads[i]["gamma"] = (g * xhat).sum(axis=axes)
            grads[i]["beta"] = g.sum(axis=axes)
            gx = g * p["gamma"].reshape(bshape)
            g = inv_std.reshape(bshape) * (
                gx - gx.mean(axis=axes, keepdims=True) - xhat * (gx * xhat).mean(axis=axes, keepdims=True)
            )
    return g, grads


def has_batchnorm(stack: Sequence[LayerSpec]) -> bool:
    return any(s.kind == "batchnorm" for s in stack)


def recalibrate_batchnorm(stack: Sequence[LayerSpec], params: ParamStore, batches: Iterable[np.ndarray]) -> None:
    """Replace running statistics by their plain average over ``batches``."""
    for t, xb in enumerate(batches):
        forward(stack, params, xb, mode="train", momentum=1.0 / (t + 1))


# -- optimizer -------------------------------------------------------------


@dataclass
class AdamState:
    """Moment accumulators for :func:`adam_step`, keyed by ``(layer, name)``."""

    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    t: int = 0
    m: dict[tuple[int, str], np.ndarray] = field(default_factory=dict)
    v: dict[tuple[int, str], np.ndarray] = field(default_factory=dict)


def adam_step(
    stack: Sequence[LayerSpec],
    params: ParamStore,
    grads: Sequence[dict[str, np.ndarray]],
    state: AdamState,
) -> None:
    """One in-place Adam update with bias correction.

    Weight decay is the classic L2 form: ``weight_decay * param`` is added to
    the gradient before the moment updates.
    """
    for _, name, g in ((i, n, grads[i][n]) for i, n, _ in params.trainable(stack)):
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for i, name, w in params.trainable(stack):
        g = grads[i][name]
        if g.shape != w.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {w.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * w
        key = (i, name)
        m = state.m.setdefault(key, np.zeros_like(w))
        v = state.v.setdefault(key, np.zeros_like(w))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        w -= state.alpha * (m / c1) / (np.sqrt(v / c2) + state.eps)
    params.bump()


# -- checkpoints -----------------------------------------------------------


def save_params(path: str | Path, stack: Sequence[LayerSpec], params: ParamStore) -> None:
    """Write ``params`` in the self-describing binary checkpoint format."""
    Path(path).write_bytes(params_to_bytes(stack, params))


def params_to_bytes(stack: Sequence[LayerSpec], params: ParamStore) -> bytes:
    out = [_MAGIC, struct.pack("<II", _FORMAT_VERSION, len(stack))]
    for spec, d in zip(stack, params.layers):
        names = _TRAINABLE.get(spec.kind, ()) + _BUFFERS.get(spec.kind, ())
        out.append(struct.pack("<BI", LAYER_KINDS.index(spec.kind), len(names)))
        for name in names:
            a = np.ascontiguousarray(d[name], dtype="<f8")
            enc = name.encode("ascii")
            out.append(struct.pack("<B", len(enc)) + enc)
            out.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
            out.append(a.tobytes())
    return b"".join(out)


def load_params(path: str | Path, stack: Sequence[LayerSpec] | None = None) -> tuple[list[str], ParamStore]:
    """Read a checkpoint; returns the per-layer kind tags and the parameters.

    When ``stack`` is given, kinds and parameter shapes are validated against
    it.
    """
    return params_from_bytes(Path(path).read_bytes(), stack)


def params_from_bytes(buf: bytes, stack: Sequence[LayerSpec] | None = None) -> tuple[list[str], ParamStore]:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise DataError(f"truncated checkpoint: need {n} bytes at offset {pos}, have {len(buf) - pos}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(8) != _MAGIC:
        raise DataError("not a parameter checkpoint (bad magic bytes at offset 0)")
    version, n_layers = struct.unpack("<II", take(8))
    if version != _FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    kinds: list[str] = []
    layers: list[dict[str, np.ndarray]] = []
    for _ in range(n_layers):
        tag, n_tensor = struct.unpack("<BI", take(5))
        if tag >= len(LAYER_KINDS):
            raise DataError(f"unknown layer kind tag {tag} at offset {pos - 5}")
        kinds.append(LAYER_KINDS[tag])
        d = {}
        for _ in range(n_tensor):
            (name_len,) = struct.unpack("<B", take(1))
            name = take(name_len).decode("ascii")
            (ndim,) = struct.unpack("<I", take(4))
            shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            d[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
        layers.append(d)
    if pos != len(buf):
        raise DataError(f"trailing bytes after checkpoint payload at offset {pos}")
    params = ParamStore(layers)
    if stack is not None:
        _validate(stack, kinds, params)
    return kinds, params


def _validate(stack: Sequence[LayerSpec], kinds: list[str], params: ParamStore) -> None:
    if [s.kind for s in stack] != kinds:
        raise DataError("checkpoint layer kinds do not match the model architecture")
    expected = init_params(stack, np.random.default_rng(0))
    for i, (want, got) in enumerate(zip(expected.layers, params.layers)):
        for name, arr in want.items():
            if name not in got or got[name].shape != arr.shape:
                raise DataError(f"layer {i} parameter {name!r} missing or misshapen in checkpoint")
