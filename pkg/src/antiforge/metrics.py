"""Similarity, disruption and detection measurements."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields
from typing import Iterable, Sequence

import numpy as np

ASR_THRESHOLD = 0.05
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
LUMA_601 = np.array([0.299, 0.587, 0.114])


def _same_shape(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _same_shape(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(peak**2 / err)


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    t = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (t / sigma) ** 2)
    return g / g.sum()


def _valid_filter(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = len(g)
    h, w = img.shape
    rows = np.zeros((h - n + 1, h))
    cols = np.zeros((w - n + 1, w))
    for i in range(h - n + 1):
        rows[i, i : i + n] = g
    for j in range(w - n + 1):
        cols[j, j : j + n] = g
    return rows @ img @ cols.T


def to_luma(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[-1] == 3:
        return img @ LUMA_601
    if img.ndim == 2:
        return img
    raise ValueError(f"expected (H, W) or (H, W, 3) image, got {img.shape}")


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows (sigma 1.5), on Rec.601 luma."""
    a, b = _same_shape(a, b)
    x, y = to_luma(a), to_luma(b)
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"image {x.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    g = _gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my = _valid_filter(x, g), _valid_filter(y, g)
    sxx = _valid_filter(x * x, g) - mx * mx
    syy = _valid_filter(y * y, g) - my * my
    sxy = _valid_filter(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def l2_distortion(y_clean, y_adv) -> float:
    """Mean squared difference of generator outputs on their [-1, 1] scale."""
    return mse(y_clean, y_adv)


def asr(distortions: Sequence[float], threshold: float = ASR_THRESHOLD) -> float:
    """Percentage of distortions at or above ``threshold``."""
    d = np.asarray(list(distortions), dtype=np.float64)
    if d.size == 0:
        raise ValueError("asr needs at least one distortion value")
    return 100.0 * np.count_nonzero(d >= threshold) / d.size


# -- spectrum ------------------------------------------------------------------


def spectrum(img) -> np.ndarray:
    """Centred log-magnitude spectrum of the channel mean, scaled to [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    gray = img.mean(axis=-1) if img.ndim == 3 else img
    mag = np.log1p(np.abs(np.fft.fftshift(np.fft.fft2(gray))))
    lo, hi = mag.min(), mag.max()
    if hi == lo:
        return np.zeros_like(mag)
    return (mag - lo) / (hi - lo)


def high_frequency_ratio(img, cutoff: float = 0.25) -> float:
    """Share of non-DC spectral power at radial frequency above ``cutoff`` (cycles/pixel)."""
    img = np.asarray(img, dtype=np.float64)
    gray = img.mean(axis=-1) if img.ndim == 3 else img
    power = np.abs(np.fft.fft2(gray - gray.mean())) ** 2
    fy = np.fft.fftfreq(gray.shape[0])[:, None]
    fx = np.fft.fftfreq(gray.shape[1])[None, :]
    total = power.sum()
    if total == 0.0:
        return 0.0
    return float(power[np.hypot(fy, fx) > cutoff].sum() / total)


# -- LID and AUC ---------------------------------------------------------------


def lid_estimate(query, reference_set, k: int = 20) -> float:
    """Maximum-likelihood local intrinsic dimensionality of ``query``.

    Uses the k nearest Euclidean distances from ``query`` to the rows of
    ``reference_set``.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    refs = np.asarray(reference_set, dtype=np.float64).reshape(len(reference_set), -1)
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if refs.shape[0] <= k:
        raise ValueError(f"reference set of size {refs.shape[0]} must exceed k={k}")
    if refs.shape[1] != q.size:
        raise ValueError(f"feature size mismatch: query {q.size}, references {refs.shape[1]}")
    d = np.sqrt(np.sum((refs - q) ** 2, axis=1))
    r = np.partition(d, k - 1)[:k]
    r.sort()
    if r[0] == 0.0:
        raise ValueError("query coincides with a reference point (zero neighbour distance)")
    return float(-1.0 / np.mean(np.log(r / r[-1])))


def lid_scores(queries, reference_set, k: int = 20, exclude: Iterable[int] | None = None) -> np.ndarray:
    """LID for each query; ``exclude[i]`` drops reference row i for query i."""
    refs = np.asarray(reference_set, dtype=np.float64).reshape(len(reference_set), -1)
    qs = np.asarray(queries, dtype=np.float64).reshape(len(queries), -1)
    excl = list(exclude) if exclude is not None else [None] * len(qs)
    out = np.empty(len(qs))
    for i, q in enumerate(qs):
        r = refs if excl[i] is None else np.delete(refs, excl[i], axis=0)
        out[i] = lid_estimate(q, r, k)
    return out


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """ROC AUC by pairwise counting; ties count one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels must have the same length")
    pos, neg = s[y], s[~y]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("auc needs at least one positive and one negative")
    diff = pos[:, None] - neg[None, :]
    return float((np.count_nonzero(diff > 0) + 0.5 * np.count_nonzero(diff == 0)) / diff.size)


# -- report --------------------------------------------------------------------


@dataclass(frozen=True)
class MetricsReport:
    l2: float
    psnr: float
    ssim: float
    mse: float
    asr: float

    FIELDS = ("l2", "psnr", "ssim", "mse", "asr")

    def __post_init__(self) -> None:
        if (self.psnr == math.inf) != (self.mse == 0.0):
            raise ValueError("psnr is +inf exactly when mse is 0")
        if self.ssim > 1.0 + 1e-12:
            raise ValueError(f"ssim must be <= 1, got {self.ssim}")

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def csv_row(self) -> list[str]:
        return [format_float(getattr(self, name)) for name in self.FIELDS]

    def to_json(self) -> str:
        return json.dumps({k: (None if math.isinf(v) else v) for k, v in self.as_dict().items()})


def format_float(v: float) -> str:
    if math.isinf(v):
        return "inf"
    return f"{v:.6f}"


def output_report(clean_outputs, adv_outputs, threshold: float = ASR_THRESHOLD) -> tuple[MetricsReport, list[dict]]:
    """Aggregate metrics between paired generator outputs in [-1, 1].

    PSNR, SSIM and MSE are taken on the 8-bit scale of the outputs mapped to
    [0, 255]; L2 stays on [-1, 1]. Returns the report and per-image rows.
    """
    rows = []
    for yc, ya in zip(clean_outputs, adv_outputs):
        c8 = (np.asarray(yc) + 1.0) * 127.5
        a8 = (np.asarray(ya) + 1.0) * 127.5
        rows.append(
            {
                "l2": l2_distortion(yc, ya),
                "psnr": psnr(c8, a8, 255.0),
                "ssim": ssim(c8, a8, 255.0),
                "mse": mse(c8, a8),
            }
        )
    return summarize(rows, threshold), rows


def image_report(clean, adv) -> tuple[dict, list[dict]]:
    """Input-side PSNR/SSIM/MSE between images in [0, 1] on the 8-bit scale."""
    rows = []
    for xc, xa in zip(clean, adv):
        c8, a8 = np.asarray(xc) * 255.0, np.asarray(xa) * 255.0
        rows.append({"psnr": psnr(c8, a8, 255.0), "ssim": ssim(c8, a8, 255.0), "mse": mse(c8, a8)})
    agg = {k: float(np.mean([r[k] for r in rows])) for k in ("ssim", "mse")}
    agg["psnr"] = math.inf if agg["mse"] == 0.0 else 10.0 * math.log10(255.0**2 / agg["mse"])
    return agg, rows


def summarize(rows: list[dict], threshold: float = ASR_THRESHOLD) -> MetricsReport:
    if not rows:
        raise ValueError("no rows to summarize")
    mean = {k: float(np.mean([r[k] for r in rows])) for k in ("l2", "ssim", "mse")}
    # PSNR of the mean MSE, so identical pairs cannot turn the average into inf.
    agg_psnr = math.inf if mean["mse"] == 0.0 else 10.0 * math.log10(255.0**2 / mean["mse"])
    return MetricsReport(
        l2=mean["l2"],
        psnr=agg_psnr,
        ssim=mean["ssim"],
        mse=mean["mse"],
        asr=asr([r["l2"] for r in rows], threshold),
    )
