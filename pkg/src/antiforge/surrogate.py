"""Differentiable conditional generators used as stand-ins for face-editing GANs.

Every generator maps images in [-1, 1] with shape ``(..., H, W, 3)`` and an
integer attribute label to an image of the same shape, and exposes the
input vector-Jacobian product needed by the attacks.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence, runtime_checkable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .transforms import blur_linear, blur_linear_vjp

DEFAULT_LABELS = ("black_hair", "blond_hair", "brown_hair", "male", "young")
NORM_EPS = 1e-5


@runtime_checkable
class ConditionalGenerator(Protocol):
    n_labels: int

    def forward(self, x: np.ndarray, label: int) -> np.ndarray: ...

    def input_vjp(self, x: np.ndarray, label: int, upstream: np.ndarray) -> np.ndarray: ...


def forward_with_pullback(model: ConditionalGenerator, x: np.ndarray, label: int):
    """``(y, pullback)`` using the model's fused pass when it has one."""
    fused = getattr(model, "forward_with_pullback", None)
    if fused is not None:
        return fused(x, label)
    return model.forward(x, label), lambda g: model.input_vjp(x, label, g)


def _check_label(label, n_labels: int) -> int:
    if isinstance(label, (bool, np.bool_)) or not isinstance(label, (int, np.integer)):
        raise ValueError(f"attribute label must be an integer, got {label!r}")
    if not 0 <= int(label) < n_labels:
        raise ValueError(f"attribute label {label} out of range [0, {n_labels})")
    return int(label)


def _check_image(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 3 or x.shape[-1] != 3:
        raise ValueError(f"generator input must have shape (..., H, W, 3), got {x.shape}")
    return x


class IdentityGenerator:
    """G(x, c) = x. Useful to read off input-space perturbation energy."""

    def __init__(self, n_labels: int = 2):
        if n_labels < 2:
            raise ValueError("a label set needs at least two labels")
        self.n_labels = n_labels

    def forward(self, x, label):
        _check_label(label, self.n_labels)
        return _check_image(x).copy()

    def input_vjp(self, x, label, upstream):
        _check_label(label, self.n_labels)
        return np.asarray(upstream, dtype=np.float64).copy()


# -- analytic toy generator ------------------------------------------------------------


@dataclass(frozen=True)
class ToyGeneratorParams:
    """Per-label colour mixes ``A[c]`` (3x3) and biases ``b[c]``, plus pre-blur."""

    A: np.ndarray
    b: np.ndarray
    sigma0: float = 0.0
    seed: int | None = None

    def __post_init__(self) -> None:
        A = np.asarray(self.A, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        if A.ndim != 3 or A.shape[1:] != (3, 3):
            raise ValueError(f"A must have shape (n_labels, 3, 3), got {A.shape}")
        if b.shape != (A.shape[0], 3):
            raise ValueError(f"b must have shape ({A.shape[0]}, 3), got {b.shape}")
        if A.shape[0] < 2:
            raise ValueError("a label set needs at least two labels")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
            raise ValueError("toy generator parameters must be finite")
        if self.sigma0 < 0:
            raise ValueError(f"sigma0 must be >= 0, got {self.sigma0}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @property
    def n_labels(self) -> int:
        return self.A.shape[0]

    @classmethod
    def from_seed(
        cls,
        seed: int,
        n_labels: int = len(DEFAULT_LABELS),
        gain: float = 8.0,
        sigma0: float = 1.5,
    ) -> "ToyGeneratorParams":
        """Draw a reproducible generator.

        Each label gets a mild colour edit plus a ``gain``-scaled random
        rotation of the chroma plane, mimicking generators that react
        strongly to colour shifts while mostly preserving luminance.
        """
        rng = np.random.default_rng(seed)
        chroma = np.eye(3) - np.full((3, 3), 1.0 / 3.0)
        A = np.empty((n_labels, 3, 3))
        for c in range(n_labels):
            edit = np.eye(3) + 0.15 * rng.standard_normal((3, 3))
            q, r = np.linalg.qr(rng.standard_normal((3, 3)))
            q = q * np.sign(np.diag(r))
            A[c] = 0.8 * edit + gain * q @ chroma
        b = 0.1 * rng.standard_normal((n_labels, 3))
        return cls(A, b, sigma0, seed)


class ToyGenerator:
    """y = tanh(A_c . blur_sigma0(x) + b_c), applied per pixel."""

    def __init__(self, params: ToyGeneratorParams):
        self.params = params
        self.n_labels = params.n_labels

    def _pre(self, x, c):
        p = self.params
        return blur_linear(x, p.sigma0) @ p.A[c].T + p.b[c]

    def forward(self, x, label):
        c = _check_label(label, self.n_labels)
        return np.tanh(self._pre(_check_image(x), c))

    def forward_with_pullback(self, x, label):
        c = _check_label(label, self.n_labels)
        y = np.tanh(self._pre(_check_image(x), c))
        slope = 1.0 - y * y

        def pullback(upstream):
            g = (np.asarray(upstream, dtype=np.float64) * slope) @ self.params.A[c]
            return blur_linear_vjp(g, self.params.sigma0)

        return y, pullback

    def input_vjp(self, x, label, upstream):
        return self.forward_with_pullback(x, label)[1](upstream)


def toy_forward(x, c, p: ToyGeneratorParams):
    return ToyGenerator(p).forward(x, c)


def toy_input_vjp(x, c, p: ToyGeneratorParams, upstream):
    return ToyGenerator(p).input_vjp(x, c, upstream)


# -- minimal convolutional runtime -----------------------------------------------------

LAYER_KINDS = ("conv", "instance_norm", "relu", "tanh")


@dataclass
class Layer:
    kind: str
    weight: np.ndarray | None = None  # conv: (out, in, 3, 3); norm: gamma (C,)
    bias: np.ndarray | None = None  # conv: (out,); norm: beta (C,)

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv", "instance_norm"):
            self.weight = np.asarray(self.weight, dtype=np.float64)
            self.bias = np.asarray(self.bias, dtype=np.float64)


@dataclass
class ConvNetSpec:
    """Ordered layers; the input is RGB plus one constant plane per label."""

    layers: list[Layer]
    n_labels: int
    channels: list[int] = field(init=False)

    def __post_init__(self) -> None:
        if self.n_labels < 2:
            raise ValueError("a label set needs at least two labels")
        ch = 3 + self.n_labels
        chans = [ch]
        for i, layer in enumerate(self.layers):
            where = f"layer {i} ({layer.kind})"
            if layer.kind == "conv":
                w, b = layer.weight, layer.bias
                if w.ndim != 4 or w.shape[2:] != (3, 3):
                    raise ValueError(f"{where}: weight must be (out, in, 3, 3), got {w.shape}")
                if w.shape[1] != ch:
                    raise ValueError(f"{where}: expects {w.shape[1]} input channels but receives {ch}")
                if b.shape != (w.shape[0],):
                    raise ValueError(f"{where}: bias must be ({w.shape[0]},), got {b.shape}")
                ch = w.shape[0]
            elif layer.kind == "instance_norm":
                if layer.weight.shape != (ch,) or layer.bias.shape != (ch,):
                    raise ValueError(
                        f"{where}: gamma/beta must be ({ch},), got {layer.weight.shape}/{layer.bias.shape}"
                    )
            chans.append(ch)
        if ch != 3:
            raise ValueError(f"network output has {ch} channels; expected 3")
        self.channels = chans


def _conv2d(x, w, b):
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))
    return np.einsum("nchwij,ocij->nohw", win, w, optimize=True) + b[None, :, None, None]


def _conv2d_input_vjp(g, w):
    gp = np.pad(g, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(gp, (3, 3), axis=(2, 3))
    return np.einsum("nohwij,ocij->nchw", win, w[:, :, ::-1, ::-1], optimize=True)


class ConvNetGenerator:
    """Forward and manual backward of a small conditional convnet."""

    def __init__(self, spec: ConvNetSpec):
        self.spec = spec
        self.n_labels = spec.n_labels

    def _input(self, x, c):
        x = _check_image(x)
        lead = x.shape[:-3]
        h, w = x.shape[-3:-1]
        xb = np.moveaxis(x.reshape((-1, h, w, 3)), -1, 1)
        planes = np.zeros((xb.shape[0], self.n_labels, h, w))
        planes[:, c] = 1.0
        return np.concatenate([xb, planes], axis=1), lead

    def _run(self, x, c):
        h, lead = self._input(x, c)
        cache = []
        for i, layer in enumerate(self.spec.layers):
            if h.shape[1] != self.spec.channels[i]:
                raise ValueError(f"layer {i} ({layer.kind}): got {h.shape[1]} channels, expected {self.spec.channels[i]}")
            if layer.kind == "conv":
                cache.append(None)
                h = _conv2d(h, layer.weight, layer.bias)
            elif layer.kind == "instance_norm":
                mu = h.mean(axis=(2, 3), keepdims=True)
                inv = 1.0 / np.sqrt(h.var(axis=(2, 3), keepdims=True) + NORM_EPS)
                xhat = (h - mu) * inv
                cache.append((xhat, inv))
                h = xhat * layer.weight[None, :, None, None] + layer.bias[None, :, None, None]
            elif layer.kind == "relu":
                cache.append(h > 0)
                h = np.maximum(h, 0.0)
            else:
                h = np.tanh(h)
                cache.append(h)
        return h, cache, lead

    @staticmethod
    def _to_hwc(h, lead):
        return np.moveaxis(h, 1, -1).reshape(lead + h.shape[2:] + (3,))

    def forward(self, x, label):
        c = _check_label(label, self.n_labels)
        h, _, lead = self._run(x, c)
        return self._to_hwc(h, lead)

    def input_vjp(self, x, label, upstream):
        return self.forward_with_pullback(x, label)[1](upstream)

    def forward_with_pullback(self, x, label):
        c = _check_label(label, self.n_labels)
        h, cache, lead = self._run(x, c)
        return self._to_hwc(h, lead), lambda g: self._backward(g, cache, lead, h.shape[2:])

    def _backward(self, upstream, cache, lead, hw):
        hh, ww = hw
        g = np.moveaxis(np.asarray(upstream, dtype=np.float64).reshape((-1, hh, ww, 3)), -1, 1)
        for layer, saved in zip(reversed(self.spec.layers), reversed(cache)):
            if layer.kind == "conv":
                g = _conv2d_input_vjp(g, layer.weight)
            elif layer.kind == "instance_norm":
                xhat, inv = saved
                gx = g * layer.weight[None, :, None, None]
                g = inv * (
                    gx
                    - gx.mean(axis=(2, 3), keepdims=True)
                    - xhat * (gx * xhat).mean(axis=(2, 3), keepdims=True)
                )
            elif layer.kind == "relu":
                g = g * saved
            else:
                g = g * (1.0 - saved * saved)
        # drop the label planes
        return self._to_hwc(g[:, :3], lead)


def convnet_forward(x, c, spec: ConvNetSpec):
    return ConvNetGenerator(spec).forward(x, c)


def convnet_input_vjp(x, c, spec: ConvNetSpec, upstream):
    return ConvNetGenerator(spec).input_vjp(x, c, upstream)


def random_convnet(
    seed: int,
    n_labels: int = len(DEFAULT_LABELS),
    hidden: Sequence[int] = (16, 16),
    residual_gain: float = 1.0,
) -> ConvNetSpec:
    """He-initialised conv/IN/ReLU stack ending in conv + tanh."""
    rng = np.random.default_rng(seed)
    layers: list[Layer] = []
    ch = 3 + n_labels
    for width in hidden:
        std = np.sqrt(2.0 / (ch * 9))
        layers.append(Layer("conv", rng.normal(0.0, std, (width, ch, 3, 3)), np.zeros(width)))
        layers.append(Layer("instance_norm", np.ones(width), np.zeros(width)))
        layers.append(Layer("relu"))
        ch = width
    std = residual_gain * np.sqrt(1.0 / (ch * 9))
    layers.append(Layer("conv", rng.normal(0.0, std, (3, ch, 3, 3)), np.zeros(3)))
    layers.append(Layer("tanh"))
    return ConvNetSpec(layers, n_labels)


# -- weight files ("AFW1") ---------------------------------------------------------------
#
# magic "AFW1" | u32 n_layers | per layer: u32 kind, u32 ndim, ndim x u32 dims
# | float32 parameters, row-major, in layer order (conv: weight, bias;
# instance_norm: gamma, beta). All little-endian.

MAGIC = b"AFW1"
_KIND_CODES = {"conv": 1, "instance_norm": 2, "relu": 3, "tanh": 4}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


class WeightFileError(ValueError):
    pass


def save_weights(spec: ConvNetSpec, path: "str | Path") -> None:
    table = [MAGIC, struct.pack("<I", len(spec.layers))]
    params = []
    for layer in spec.layers:
        if layer.kind == "conv":
            shape = layer.weight.shape
            params += [layer.weight, layer.bias]
        elif layer.kind == "instance_norm":
            shape = layer.weight.shape
            params += [layer.weight, layer.bias]
        else:
            shape = ()
        table.append(struct.pack("<II", _KIND_CODES[layer.kind], len(shape)))
        table.append(struct.pack(f"<{len(shape)}I", *shape))
    blob = b"".join(np.ascontiguousarray(p, dtype="<f4").tobytes() for p in params)
    Path(path).write_bytes(b"".join(table) + blob)


def load_weights(path: "str | Path") -> ConvNetSpec:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise WeightFileError(f"{path}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise WeightFileError(f"{path}: truncated layer table")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    (n_layers,) = take("<I")
    table = []
    for _ in range(n_layers):
        code, ndim = take("<II")
        if code not in _CODE_KINDS:
            raise WeightFileError(f"{path}: unknown layer kind code {code}")
        table.append((_CODE_KINDS[code], take(f"<{ndim}I")))

    def floats(n):
        nonlocal pos
        if pos + 4 * n > len(data):
            raise WeightFileError(f"{path}: truncated parameter block")
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).astype(np.float64)
        pos += 4 * n
        return arr

    layers = []
    for kind, shape in table:
        if kind == "conv":
            if len(shape) != 4:
                raise WeightFileError(f"{path}: conv layer needs 4 shape integers, got {shape}")
            w = floats(int(np.prod(shape))).reshape(shape)
            layers.append(Layer(kind, w, floats(shape[0])))
        elif kind == "instance_norm":
            if len(shape) != 1:
                raise WeightFileError(f"{path}: instance_norm needs 1 shape integer, got {shape}")
            layers.append(Layer(kind, floats(shape[0]), floats(shape[0])))
        else:
            layers.append(Layer(kind))
    if pos != len(data):
        raise WeightFileError(f"{path}: {len(data) - pos} trailing bytes after parameters")
    first = next((l for l in layers if l.kind == "conv"), None)
    if first is None:
        raise WeightFileError(f"{path}: no conv layer")
    return ConvNetSpec(layers, first.weight.shape[1] - 3)
