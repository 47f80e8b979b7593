"""Adversary-side input transformations: JPEG, blur, squeezing, reconstruction.

Images are float arrays in [0, 1] with shape ``(..., H, W, 3)``.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image, features

KINDS = ("jpeg", "gaussian_blur", "bit_quantize", "median_filter", "chain")

# Pinned so results match across machines with the same codec build.
JPEG_SUBSAMPLING = 2  # 4:2:0


def codec_metadata() -> dict[str, str]:
    return {
        "pillow": Image.__version__,
        "libjpeg": str(features.version("jpg")),
        "jpeg_subsampling": "4:2:0",
        "jpeg_mode": "baseline",
    }


# -- Gaussian blur ----------------------------------------------------------------


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Sampled Gaussian with radius ceil(3 sigma), normalized to sum 1."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = int(math.ceil(3.0 * sigma))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    with np.errstate(over="ignore"):  # tiny sigma: off-centre taps underflow to 0
        k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def _reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    # Mirror without repeating the edge sample (d c b | a b c d | c b a).
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


@lru_cache(maxsize=64)
def _blur_matrix_cached(n: int, sigma: float) -> np.ndarray:
    kernel = gaussian_kernel1d(sigma)
    radius = len(kernel) // 2
    mat = np.zeros((n, n))
    rows = np.arange(n)
    for offset, w in zip(range(-radius, radius + 1), kernel):
        np.add.at(mat, (rows, _reflect_index(rows + offset, n)), w)
    mat.setflags(write=False)
    return mat


def blur_matrix(n: int, sigma: float) -> np.ndarray:
    """Dense n x n operator for 1-D reflect-padded Gaussian filtering."""
    return _blur_matrix_cached(int(n), float(sigma))


def _apply_separable(img: np.ndarray, mh: np.ndarray, mw: np.ndarray) -> np.ndarray:
    h, w = img.shape[-3], img.shape[-2]
    out = (mh @ img.reshape(img.shape[:-3] + (h, w * 3))).reshape(img.shape)
    return mw @ out


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflect padding over the H and W axes."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[-3], img.shape[-2]
    return np.clip(_apply_separable(img, blur_matrix(h, sigma), blur_matrix(w, sigma)), 0.0, 1.0)


def blur_linear(img: np.ndarray, sigma: float) -> np.ndarray:
    """Blur without the output clamp (range agnostic, e.g. for [-1, 1] data)."""
    if sigma == 0:
        return np.asarray(img, dtype=np.float64)
    h, w = img.shape[-3], img.shape[-2]
    return _apply_separable(img, blur_matrix(h, sigma), blur_matrix(w, sigma))


def blur_linear_vjp(upstream: np.ndarray, sigma: float) -> np.ndarray:
    """Exact adjoint of :func:`blur_linear`, reflect boundary included."""
    if sigma == 0:
        return np.asarray(upstream, dtype=np.float64)
    h, w = upstream.shape[-3], upstream.shape[-2]
    return _apply_separable(upstream, blur_matrix(h, sigma).T, blur_matrix(w, sigma).T)


# -- JPEG ---------------------------------------------------------------------------


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def _jpeg_single(img: np.ndarray, quality: int) -> np.ndarray:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(img), mode="RGB").save(
        buf, format="JPEG", quality=int(quality), subsampling=JPEG_SUBSAMPLING,
        optimize=False, progressive=False,
    )
    buf.seek(0)
    with Image.open(buf) as decoded:
        return np.asarray(decoded.convert("RGB"), dtype=np.float64) / 255.0


def jpeg_roundtrip(img: np.ndarray, quality: int = 75) -> np.ndarray:
    """Encode to baseline JFIF at ``quality`` (4:2:0) and decode."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim < 3 or img.shape[-1] != 3 or img.shape[-3] < 1 or img.shape[-2] < 1:
        raise ValueError(f"jpeg_roundtrip needs (..., H, W, 3) with H, W >= 1, got {img.shape}")
    if not 1 <= quality <= 100:
        raise ValueError(f"JPEG quality must be in [1, 100], got {quality}")
    flat = img.reshape((-1,) + img.shape[-3:])
    out = np.stack([_jpeg_single(im, quality) for im in flat])
    return out.reshape(img.shape)


# -- squeezing filters -------------------------------------------------------------


def bit_quantize(img: np.ndarray, bits: int) -> np.ndarray:
    if not 1 <= bits <= 8:
        raise ValueError(f"bits must be in [1, 8], got {bits}")
    levels = 2**bits - 1
    return np.round(np.clip(img, 0.0, 1.0) * levels) / levels


def median_filter(img: np.ndarray, k: int = 3) -> np.ndarray:
    """k x k median per channel with reflect padding."""
    if k < 1 or k % 2 == 0:
        raise ValueError(f"median window must be odd and positive, got {k}")
    img = np.asarray(img, dtype=np.float64)
    if k == 1:
        return img.copy()
    r = k // 2
    pad = [(0, 0)] * (img.ndim - 3) + [(r, r), (r, r), (0, 0)]
    mode = "reflect" if min(img.shape[-3], img.shape[-2]) > r else "edge"
    padded = np.pad(img, pad, mode=mode)
    win = sliding_window_view(padded, (k, k), axis=(-3, -2))
    return np.median(win.reshape(win.shape[:-2] + (k * k,)), axis=-1)


def reconstruct(img: np.ndarray) -> np.ndarray:
    """Classical restoration chain: 3x3 median, 5-bit squeeze, JPEG q=75."""
    return jpeg_roundtrip(bit_quantize(median_filter(img, 3), 5), 75)


# -- specs and chains ---------------------------------------------------------------


@dataclass(frozen=True)
class TransformSpec:
    kind: str
    params: Mapping[str, Any] = field(default_factory=dict)
    children: tuple["TransformSpec", ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}; expected one of {KINDS}")
        p = self.params
        if self.kind == "jpeg":
            q = p.get("quality", 75)
            if not (isinstance(q, int) and 1 <= q <= 100):
                raise ValueError(f"jpeg quality must be an integer in [1, 100], got {q!r}")
        elif self.kind == "gaussian_blur":
            if not float(p.get("sigma", 0)) > 0:
                raise ValueError(f"gaussian_blur sigma must be > 0, got {p.get('sigma')!r}")
        elif self.kind == "bit_quantize":
            b = p.get("bits")
            if not (isinstance(b, int) and 1 <= b <= 8):
                raise ValueError(f"bit_quantize bits must be an integer in [1, 8], got {b!r}")
        elif self.kind == "median_filter":
            k = p.get("k", 3)
            if not (isinstance(k, int) and k >= 1 and k % 2 == 1):
                raise ValueError(f"median_filter k must be an odd positive integer, got {k!r}")
        elif self.kind == "chain":
            for child in self.children:
                if not isinstance(child, TransformSpec):
                    raise ValueError(f"chain children must be TransformSpec, got {type(child).__name__}")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TransformSpec":
        if not isinstance(d, Mapping) or "kind" not in d:
            raise ValueError(f"transform spec must be a mapping with a 'kind' key, got {d!r}")
        kind = d["kind"]
        if kind == "chain":
            steps = d.get("steps", [])
            if not isinstance(steps, Sequence):
                raise ValueError("chain 'steps' must be a list")
            return cls("chain", {}, tuple(cls.from_dict(s) for s in steps))
        params = {k: v for k, v in d.items() if k != "kind"}
        return cls(kind, params)

    def to_dict(self) -> dict[str, Any]:
        if self.kind == "chain":
            return {"kind": "chain", "steps": [c.to_dict() for c in self.children]}
        return {"kind": self.kind, **dict(self.params)}

    @property
    def label(self) -> str:
        if self.kind == "chain":
            return "+".join(c.label for c in self.children) or "identity"
        if self.kind == "jpeg":
            return f"jpeg_q{self.params.get('quality', 75)}"
        if self.kind == "gaussian_blur":
            return f"blur_s{self.params['sigma']:g}"
        if self.kind == "bit_quantize":
            return f"quant_{self.params['bits']}bit"
        return f"median_k{self.params.get('k', 3)}"


IDENTITY = TransformSpec("chain")


def apply_chain(img: np.ndarray, spec: TransformSpec) -> np.ndarray:
    """Apply ``spec``; chains run left to right and the empty chain is identity."""
    if not isinstance(spec, TransformSpec):
        raise ValueError(f"expected a TransformSpec, got {type(spec).__name__}")
    img = np.asarray(img, dtype=np.float64)
    p = spec.params
    if spec.kind == "chain":
        for child in spec.children:
            img = apply_chain(img, child)
        return img
    if spec.kind == "jpeg":
        return jpeg_roundtrip(img, p.get("quality", 75))
    if spec.kind == "gaussian_blur":
        return gaussian_blur(img, float(p["sigma"]))
    if spec.kind == "bit_quantize":
        return bit_quantize(img, p["bits"])
    return median_filter(img, p.get("k", 3))


# -- differentiable transforms (for expectation over transformation) -------------


class DifferentiableTransform:
    """A linear-or-smooth transform exposing ``forward`` and ``vjp``."""

    differentiable = True
    name = "transform"

    def forward(self, img: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def vjp(self, img: np.ndarray, upstream: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class IdentityTransform(DifferentiableTransform):
    name = "identity"

    def forward(self, img):
        return img

    def vjp(self, img, upstream):
        return upstream


class BlurTransform(DifferentiableTransform):
    def __init__(self, sigma: float):
        if sigma <= 0:
            raise ValueError(f"sigma must be positive, got {sigma}")
        self.sigma = float(sigma)
        self.name = f"blur_s{sigma:g}"

    # No output clamp: blur of [0, 1] data stays in [0, 1], and the
    # attack pipeline needs an exact linear adjoint.
    def forward(self, img):
        return blur_linear(img, self.sigma)

    def vjp(self, img, upstream):
        return blur_linear_vjp(upstream, self.sigma)


class IdentitySampler:
    differentiable = True

    def __call__(self, rng: np.random.Generator) -> DifferentiableTransform:
        return IdentityTransform()


class BlurSampler:
    """Draws a Gaussian blur with sigma chosen uniformly from ``sigmas``."""

    differentiable = True

    def __init__(self, sigmas: Sequence[float] = (1.0, 2.0, 3.0)):
        if not sigmas or any(s <= 0 for s in sigmas):
            raise ValueError(f"sigmas must be a non-empty list of positive values, got {sigmas!r}")
        self.sigmas = tuple(float(s) for s in sigmas)

    def __call__(self, rng: np.random.Generator) -> DifferentiableTransform:
        return BlurTransform(self.sigmas[int(rng.integers(len(self.sigmas)))])
