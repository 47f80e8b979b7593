"""Differentiable conversions between sRGB and CIELAB, HSV and CMYK.

All array functions operate on trailing channel axes, so ``(H, W, 3)``
images and ``(N, H, W, 3)`` batches are handled alike. RGB arrays are in
[0, 1]. Lab uses CIE 1976 with a D65 white point; L in [0, 100], a and b
in [-128, 127].
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

# sRGB primaries, D65 (IEC 61966-2-1).
XYZ_FROM_RGB = np.array(
    [
        [0.412453, 0.357580, 0.180423],
        [0.212671, 0.715160, 0.072169],
        [0.019334, 0.119193, 0.950227],
    ]
)
RGB_FROM_XYZ = np.linalg.inv(XYZ_FROM_RGB)
# Row sums, so that RGB white maps to a = b = 0 exactly.
WHITE_D65 = XYZ_FROM_RGB.sum(axis=1)

_DELTA = 6.0 / 29.0
_GAMMA_THRESHOLD = 0.04045
_LINEAR_THRESHOLD = 0.0031308

AB_SCALE = 128.0
CLAMP_TOL = 1e-9


class InvalidInputError(ValueError):
    """Raised for non-finite or malformed pixel data."""


class ColorSpaceTag(str, enum.Enum):
    RGB = "RGB"
    LAB = "Lab"
    HSV = "HSV"
    CMYK = "CMYK"

    @classmethod
    def parse(cls, value: "str | ColorSpaceTag") -> "ColorSpaceTag":
        if isinstance(value, cls):
            return value
        for tag in cls:
            if tag.value.lower() == str(value).lower():
                return tag
        raise ValueError(f"unknown color space tag: {value!r}")


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{what} contains non-finite values")


def _check_channels(arr: np.ndarray, n: int, what: str) -> None:
    if arr.ndim < 1 or arr.shape[-1] != n:
        raise InvalidInputError(f"{what} must have a trailing axis of size {n}, got shape {arr.shape}")


@dataclass
class RGBImage:
    """An H x W x 3 image with a declared value range.

    Pixels are clamped into ``value_range`` on construction; the number of
    values that actually moved is kept in ``clamped``.
    """

    pixels: np.ndarray
    value_range: tuple[float, float] = (0.0, 1.0)
    clamped: int = field(default=0, compare=False)

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[-1] != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise InvalidInputError(f"RGBImage expects shape (H, W, 3) with H, W >= 1, got {px.shape}")
        if tuple(self.value_range) not in ((0.0, 1.0), (-1.0, 1.0)):
            raise ValueError(f"value_range must be (0, 1) or (-1, 1), got {self.value_range}")
        _check_finite(px, "RGBImage")
        lo, hi = self.value_range
        self.clamped += int(np.count_nonzero((px < lo - CLAMP_TOL) | (px > hi + CLAMP_TOL)))
        self.pixels = np.clip(px, lo, hi)
        self.value_range = (float(lo), float(hi))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.pixels.shape

    def unit(self) -> np.ndarray:
        """Pixels rescaled to [0, 1]."""
        if self.value_range == (0.0, 1.0):
            return self.pixels
        return (self.pixels + 1.0) / 2.0

    def signed(self) -> np.ndarray:
        """Pixels rescaled to [-1, 1]."""
        if self.value_range == (-1.0, 1.0):
            return self.pixels
        return self.pixels * 2.0 - 1.0


@dataclass
class LabImage:
    L: np.ndarray
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self) -> None:
        self.L = np.asarray(self.L, dtype=np.float64)
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if not (self.L.shape == self.a.shape == self.b.shape):
            raise InvalidInputError("L, a and b channels must share a shape")

    def stack(self) -> np.ndarray:
        return np.stack([self.L, self.a, self.b], axis=-1)

    @classmethod
    def from_array(cls, lab: np.ndarray) -> "LabImage":
        lab = np.asarray(lab, dtype=np.float64)
        _check_channels(lab, 3, "Lab array")
        return cls(lab[..., 0], lab[..., 1], lab[..., 2])


def _as_unit_rgb(img: "RGBImage | np.ndarray") -> np.ndarray:
    if isinstance(img, RGBImage):
        return img.unit()
    arr = np.asarray(img, dtype=np.float64)
    _check_channels(arr, 3, "RGB array")
    _check_finite(arr, "RGB array")
    return arr


def _as_lab_array(lab: "LabImage | np.ndarray") -> np.ndarray:
    arr = lab.stack() if isinstance(lab, LabImage) else np.asarray(lab, dtype=np.float64)
    _check_channels(arr, 3, "Lab array")
    _check_finite(arr, "Lab array")
    return arr


# -- sRGB transfer curve ------------------------------------------------------


def srgb_to_linear(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    hi = ((np.maximum(c, _GAMMA_THRESHOLD) + 0.055) / 1.055) ** 2.4
    return np.where(c > _GAMMA_THRESHOLD, hi, c / 12.92)


def linear_to_srgb(c: np.ndarray) -> np.ndarray:
    return _linear_to_srgb_with_grad(np.asarray(c, dtype=np.float64))[0]


def _linear_to_srgb_with_grad(c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    cc = np.maximum(c, _LINEAR_THRESHOLD)
    p = cc ** (1.0 / 2.4)
    hi = c > _LINEAR_THRESHOLD
    value = np.where(hi, 1.055 * p - 0.055, 12.92 * c)
    grad = np.where(hi, (1.055 / 2.4) * p / cc, 12.92)
    return value, grad


# -- CIELAB companding --------------------------------------------------------


def _f(t: np.ndarray) -> np.ndarray:
    cube = np.cbrt(t)
    return np.where(t > _DELTA**3, cube, t / (3 * _DELTA**2) + 4.0 / 29.0)


def _finv(t: np.ndarray) -> np.ndarray:
    # Boundary point takes the linear branch (and its derivative).
    return np.where(t > _DELTA, t * t * t, 3 * _DELTA**2 * (t - 4.0 / 29.0))


def _finv_grad(t: np.ndarray) -> np.ndarray:
    return np.where(t > _DELTA, 3 * t * t, 3 * _DELTA**2)


# -- Lab <-> RGB arrays -------------------------------------------------------


def rgb_to_lab_array(rgb: np.ndarray) -> np.ndarray:
    rgb = _as_unit_rgb(rgb)
    xyz = srgb_to_linear(rgb) @ XYZ_FROM_RGB.T
    fx, fy, fz = np.moveaxis(_f(xyz / WHITE_D65), -1, 0)
    return np.stack([116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)], axis=-1)


def _lab_to_linear(lab: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    fxyz = np.stack([fx, fy, fz], axis=-1)
    xyz = _finv(fxyz) * WHITE_D65
    return xyz @ RGB_FROM_XYZ.T, fxyz


def lab_to_rgb_with_pullback(lab: np.ndarray):
    """Lab to clamped sRGB plus the clamp count and a pullback for VJPs.

    ``pullback(upstream)`` returns ``upstream^T J`` with the same shape as
    ``lab``; gradients pass the final clamp only inside [0, 1].
    """
    lin, fxyz = _lab_to_linear(lab)
    rgb, gamma_grad = _linear_to_srgb_with_grad(lin)
    outside = (rgb < 0.0) | (rgb > 1.0)
    n = int(np.count_nonzero((rgb < -CLAMP_TOL) | (rgb > 1.0 + CLAMP_TOL)))
    out = np.clip(rgb, 0.0, 1.0)

    def pullback(upstream: np.ndarray) -> np.ndarray:
        g = np.where(outside, 0.0, upstream) * gamma_grad
        g = (g @ RGB_FROM_XYZ) * WHITE_D65 * _finv_grad(fxyz)
        gx, gy, gz = g[..., 0], g[..., 1], g[..., 2]
        return np.stack([(gx + gy + gz) / 116.0, gx / 500.0, -gz / 200.0], axis=-1)

    return out, n, pullback


def _in_gamut(lab: np.ndarray, tol: float) -> np.ndarray:
    lin, _ = _lab_to_linear(lab)
    return np.all((lin >= -tol) & (lin <= 1.0 + tol), axis=-1)


def ab_gamut_scale(lab: np.ndarray, delta_ab: np.ndarray, steps: int = 40, tol: float = 1e-12) -> np.ndarray:
    """Largest s in [0, 1] (per pixel, by bisection) keeping lab + s * (0, da, db) in gamut.

    The base ``lab`` is assumed in gamut, so s = 0 is always feasible. Moving
    only along a/b keeps L fixed, unlike an RGB clamp.
    """
    lab = np.asarray(lab, dtype=np.float64)
    delta_ab = np.asarray(delta_ab, dtype=np.float64)
    shifted = lab.copy()
    shifted[..., 1:] += delta_ab
    scale = np.ones(lab.shape[:-1])
    bad = ~_in_gamut(shifted, tol)
    if not bad.any():
        return scale
    base, d = lab[bad], delta_ab[bad]
    lo = np.zeros(len(base))
    hi = np.ones(len(base))
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        probe = base.copy()
        probe[:, 1:] += mid[:, None] * d
        ok = _in_gamut(probe, tol)
        lo = np.where(ok, mid, lo)
        hi = np.where(ok, hi, mid)
    scale[bad] = lo
    return scale


def lab_to_rgb_array(lab: np.ndarray, return_clamped: bool = False):
    """Lab to sRGB in [0, 1]; out-of-gamut values are clamped.

    With ``return_clamped`` also returns the number of clamped values.
    """
    out, n, _ = lab_to_rgb_with_pullback(_as_lab_array(lab))
    return (out, n) if return_clamped else out


def lab_to_rgb_vjp_array(lab: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Return ``upstream^T J`` for ``J = d lab_to_rgb / d lab``, shape (..., 3)."""
    lab = _as_lab_array(lab)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != lab.shape:
        raise InvalidInputError(f"upstream shape {upstream.shape} does not match lab shape {lab.shape}")
    return lab_to_rgb_with_pullback(lab)[2](upstream)


def rgb_to_lab(img: "RGBImage | np.ndarray") -> LabImage:
    return LabImage.from_array(rgb_to_lab_array(img))


def lab_to_rgb(lab: "LabImage | np.ndarray") -> RGBImage:
    """Lab to an RGBImage in [0, 1]; ``result.clamped`` counts gamut clamps."""
    rgb, n = lab_to_rgb_array(lab, return_clamped=True)
    return RGBImage(rgb, (0.0, 1.0), clamped=n)


def lab_to_rgb_vjp(lab: "LabImage | np.ndarray", upstream: np.ndarray):
    g = lab_to_rgb_vjp_array(_as_lab_array(lab), upstream)
    return g[..., 0], g[..., 1], g[..., 2]


def normalize_ab(lab: LabImage) -> LabImage:
    """Rescale a and b to [-1, 1) with the symmetric divisor 128."""
    return LabImage(lab.L.copy(), lab.a / AB_SCALE, lab.b / AB_SCALE)


def denormalize_ab(lab: LabImage) -> LabImage:
    return LabImage(lab.L.copy(), lab.a * AB_SCALE, lab.b * AB_SCALE)


# -- HSV ----------------------------------------------------------------------


def rgb_to_hsv_array(rgb: np.ndarray) -> np.ndarray:
    """H in degrees [0, 360), S and V in [0, 1]. Achromatic pixels get H = 0."""
    rgb = _as_unit_rgb(rgb)
    r, g, b = np.moveaxis(rgb, -1, 0)
    v = rgb.max(axis=-1)
    c = v - rgb.min(axis=-1)
    safe_c = np.where(c > 0, c, 1.0)
    h = np.where(
        v == r,
        ((g - b) / safe_c) % 6.0,
        np.where(v == g, (b - r) / safe_c + 2.0, (r - g) / safe_c + 4.0),
    )
    h = np.where(c > 0, 60.0 * h, 0.0)
    s = np.where(v > 0, c / np.where(v > 0, v, 1.0), 0.0)
    return np.stack([h, s, v], axis=-1)


def _hsv_weights(h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # channel = V - V*S*m(k), k = (n + H/60) mod 6, n = 5, 3, 1 for R, G, B
    k = (np.array([5.0, 3.0, 1.0]) + (h[..., None] / 60.0)) % 6.0
    m = np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0)
    dm = np.where((k > 0) & (k < 1), 1.0, np.where((k > 3) & (k < 4), -1.0, 0.0)) / 60.0
    return m, dm


def hsv_to_rgb_array(hsv: np.ndarray) -> np.ndarray:
    hsv = np.asarray(hsv, dtype=np.float64)
    _check_channels(hsv, 3, "HSV array")
    _check_finite(hsv, "HSV array")
    h, s, v = np.moveaxis(hsv, -1, 0)
    m, _ = _hsv_weights(h)
    return v[..., None] * (1.0 - s[..., None] * m)


def hsv_to_rgb_vjp_array(hsv: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    hsv = np.asarray(hsv, dtype=np.float64)
    h, s, v = np.moveaxis(hsv, -1, 0)
    m, dm = _hsv_weights(h)
    s_, v_ = s[..., None], v[..., None]
    dh = (upstream * (-v_ * s_ * dm)).sum(axis=-1)
    ds = (upstream * (-v_ * m)).sum(axis=-1)
    dv = (upstream * (1.0 - s_ * m)).sum(axis=-1)
    return np.stack([dh, ds, dv], axis=-1)


# -- CMYK ---------------------------------------------------------------------


def rgb_to_cmyk_array(rgb: np.ndarray) -> np.ndarray:
    rgb = _as_unit_rgb(rgb)
    k = 1.0 - rgb.max(axis=-1)
    denom = np.where(k < 1.0, 1.0 - k, 1.0)[..., None]
    cmy = np.where((k < 1.0)[..., None], (1.0 - rgb - k[..., None]) / denom, 0.0)
    return np.concatenate([cmy, k[..., None]], axis=-1)


def cmyk_to_rgb_array(cmyk: np.ndarray) -> np.ndarray:
    cmyk = np.asarray(cmyk, dtype=np.float64)
    _check_channels(cmyk, 4, "CMYK array")
    _check_finite(cmyk, "CMYK array")
    return (1.0 - cmyk[..., :3]) * (1.0 - cmyk[..., 3:4])


def cmyk_to_rgb_vjp_array(cmyk: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    cmyk = np.asarray(cmyk, dtype=np.float64)
    cmy, k = cmyk[..., :3], cmyk[..., 3:4]
    dcmy = -upstream * (1.0 - k)
    dk = -(upstream * (1.0 - cmy)).sum(axis=-1, keepdims=True)
    return np.concatenate([dcmy, dk], axis=-1)


# -- generic dispatch ---------------------------------------------------------

_FORWARD = {
    ColorSpaceTag.LAB: rgb_to_lab_array,
    ColorSpaceTag.HSV: rgb_to_hsv_array,
    ColorSpaceTag.CMYK: rgb_to_cmyk_array,
}
_INVERSE = {
    ColorSpaceTag.LAB: lab_to_rgb_array,
    ColorSpaceTag.HSV: hsv_to_rgb_array,
    ColorSpaceTag.CMYK: cmyk_to_rgb_array,
}
_INVERSE_VJP = {
    ColorSpaceTag.LAB: lab_to_rgb_vjp_array,
    ColorSpaceTag.HSV: hsv_to_rgb_vjp_array,
    ColorSpaceTag.CMYK: cmyk_to_rgb_vjp_array,
}


def _tag_for(target, table) -> ColorSpaceTag:
    tag = ColorSpaceTag.parse(target)
    if tag not in table:
        raise ValueError(f"conversion target must be one of Lab, HSV, CMYK; got {tag.value}")
    return tag


def convert(img: "RGBImage | np.ndarray", target: "ColorSpaceTag | str") -> np.ndarray:
    """RGB to a channel stack in ``target`` (3 channels, or 4 for CMYK)."""
    return _FORWARD[_tag_for(target, _FORWARD)](_as_unit_rgb(img))


def inverse_convert(channels: np.ndarray, source: "ColorSpaceTag | str") -> np.ndarray:
    """Channel stack in ``source`` back to RGB in [0, 1]."""
    tag = _tag_for(source, _INVERSE)
    return np.clip(_INVERSE[tag](channels), 0.0, 1.0)


def inverse_convert_vjp(channels: np.ndarray, source: "ColorSpaceTag | str", upstream: np.ndarray) -> np.ndarray:
    """VJP of :func:`inverse_convert`, including the final [0, 1] clamp."""
    tag = _tag_for(source, _INVERSE)
    channels = np.asarray(channels, dtype=np.float64)
    if tag is ColorSpaceTag.LAB:
        return lab_to_rgb_vjp_array(channels, upstream)
    raw = _INVERSE[tag](channels)
    upstream = np.where((raw >= 0.0) & (raw <= 1.0), upstream, 0.0)
    return _INVERSE_VJP[tag](channels, upstream)
