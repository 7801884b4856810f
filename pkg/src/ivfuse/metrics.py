"""No-reference and source-correlation quality metrics for fused images.

All functions take 2-D numpy arrays.  ``entropy`` expects values in [0, 1]
and quantizes them to 256 levels; the gradient metrics (SF, AG) work on the
values as given, so multiply by 255 first for figures on the 8-bit scale.
"""

from __future__ import annotations

import csv
import math
from dataclasses import astuple, dataclass, fields

import numpy as np

from .errors import DimensionMismatchError, ImageTooSmallError


@dataclass(frozen=True)
class MetricReport:
    en: float
    sf: float
    ag: float
    cc: float


def _as_2d(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {arr.shape}")
    return arr


def quantize(img) -> np.ndarray:
    return np.clip(np.round(_as_2d(img) * 255.0), 0, 255).astype(np.uint8)


def entropy(img) -> float:
    """Shannon entropy in bits of the 256-level histogram."""
    counts = np.bincount(quantize(img).ravel(), minlength=256)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log2(p)).sum()) + 0.0


def spatial_frequency(img) -> float:
    """sqrt(RF^2 + CF^2); RF/CF are RMS horizontal/vertical forward differences."""
    arr = _as_2d(img)
    if arr.shape[0] < 2 or arr.shape[1] < 2:
        raise ImageTooSmallError(f"spatial frequency needs >= 2x2, got {arr.shape}")
    rf2 = np.mean(np.diff(arr, axis=1) ** 2)
    cf2 = np.mean(np.diff(arr, axis=0) ** 2)
    return float(math.sqrt(rf2 + cf2))


def average_gradient(img) -> float:
    arr = _as_2d(img)
    if arr.shape[0] < 2 or arr.shape[1] < 2:
        raise ImageTooSmallError(f"average gradient needs >= 2x2, got {arr.shape}")
    dx = arr[:-1, 1:] - arr[:-1, :-1]
    dy = arr[1:, :-1] - arr[:-1, :-1]
    return float(np.mean(np.sqrt((dx ** 2 + dy ** 2) / 2.0)))


def _pearson(a, b) -> float:
    # test constancy directly: mean subtraction can leave rounding residue
    if a.min() == a.max() or b.min() == b.max():
        return 0.0
    a = a.ravel() - a.mean()
    b = b.ravel() - b.mean()
    denom = math.sqrt(float(a @ a) * float(b @ b))
    if denom == 0.0:
        return 0.0
    return float(a @ b) / denom


def correlation_coefficient(f, vi, ir) -> float:
    """Mean of the Pearson correlations of ``f`` with each source.

    A constant image has no defined correlation; that term counts as 0.
    """
    f, vi, ir = _as_2d(f), _as_2d(vi), _as_2d(ir)
    if not (f.shape == vi.shape == ir.shape):
        raise DimensionMismatchError(f"{f.shape}, {vi.shape}, {ir.shape}")
    return 0.5 * (_pearson(f, vi) + _pearson(f, ir))


def evaluate(f, vi, ir, *, gradient_scale: float = 1.0) -> MetricReport:
    """All four metrics; SF and AG are computed on ``f * gradient_scale``."""
    f = _as_2d(f)
    return MetricReport(
        en=entropy(f),
        sf=spatial_frequency(f * gradient_scale),
        ag=average_gradient(f * gradient_scale),
        cc=correlation_coefficient(f, vi, ir),
    )


def write_metrics_csv(path, rows) -> MetricReport | None:
    """Write ``(image_id, MetricReport | None)`` rows plus a mean row.

    ``None`` marks a missing image: its row is flagged and left out of the
    mean.  Returns the mean report (None if no row was valid).
    """
    names = [f.name for f in fields(MetricReport)]
    valid = [r for _, r in rows if r is not None]
    mean = MetricReport(*np.mean([astuple(r) for r in valid], axis=0)) if valid else None
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image_id", *names, "status"])
        for image_id, report in rows:
            if report is None:
                writer.writerow([image_id, *[""] * len(names), "missing"])
            else:
                writer.writerow([image_id, *(f"{v:.6f}" for v in astuple(report)), "ok"])
        if mean is not None:
            writer.writerow(["mean", *(f"{v:.6f}" for v in astuple(mean)), f"n={len(valid)}"])
        else:
            writer.writerow(["mean", *[""] * len(names), "n=0"])
    return mean
