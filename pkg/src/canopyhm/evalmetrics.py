"""Pixel-wise CHM evaluation (bias, MAE, RMSE, R^2) and axis profiles.

R^2 here is the squared Pearson correlation between prediction and
reference. The coefficient of determination (1 - SSE/SST) is available
separately and is always labeled distinctly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .raster import RasterGrid

X_AXIS = "X"
Y_AXIS = "Y"


@dataclass
class MetricsReport:
    bias: float
    mae: float
    rmse: float
    r2: float | None
    n_pixels: int

    def to_dict(self) -> dict:
        return {"bias": self.bias, "mae": self.mae, "rmse": self.rmse,
                "r2": self.r2, "n": self.n_pixels}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


@dataclass
class Profile:
    """Per-column (X) or per-row (Y) mean height; NaN marks lines with no
    valid cells."""

    axis: str
    values: np.ndarray

    def __post_init__(self):
        if self.axis not in (X_AXIS, Y_AXIS):
            raise ValueError(f"axis must be 'X' or 'Y', got {self.axis!r}")
        self.values = np.asarray(self.values, dtype=float)

    @property
    def valid(self) -> np.ndarray:
        return ~np.isnan(self.values)


def _default_mask(pred: RasterGrid, ref: RasterGrid) -> np.ndarray:
    return pred.valid_mask() & ref.valid_mask()


def _pearson(a: np.ndarray, b: np.ndarray) -> float | None:
    am = a - a.mean()
    bm = b - b.mean()
    va = (am * am).sum()
    vb = (bm * bm).sum()
    if va == 0.0 or vb == 0.0:
        return None
    return float((am * bm).sum() / np.sqrt(va * vb))


def compute_metrics(pred: RasterGrid, ref: RasterGrid,
                    mask: np.ndarray | None = None) -> MetricsReport:
    """Bias / MAE / RMSE / Pearson-squared R^2 over masked cells.

    Zero variance in either input leaves R^2 undefined (None), never 0.
    """
    if pred.values.shape != ref.values.shape:
        raise ValueError(
            f"grid mismatch: {pred.values.shape} vs {ref.values.shape}")
    m = _default_mask(pred, ref) if mask is None else np.asarray(mask, dtype=bool)
    if m.shape != pred.values.shape:
        raise ValueError(f"mask shape {m.shape} != raster {pred.values.shape}")
    m = m & _default_mask(pred, ref)
    n = int(m.sum())
    if n == 0:
        raise ValueError("no valid cells under the mask")
    p = pred.values[m].astype(np.float64)
    r = ref.values[m].astype(np.float64)
    d = p - r
    pearson = _pearson(p, r)
    return MetricsReport(
        bias=float(d.mean()),
        mae=float(np.abs(d).mean()),
        rmse=float(np.sqrt((d * d).mean())),
        r2=None if pearson is None else pearson ** 2,
        n_pixels=n,
    )


def coefficient_of_determination(pred: RasterGrid, ref: RasterGrid,
                                 mask: np.ndarray | None = None) -> float | None:
    """1 - SSE/SST with the reference mean as baseline (can be negative)."""
    m = _default_mask(pred, ref) if mask is None else np.asarray(mask, dtype=bool)
    m = m & _default_mask(pred, ref)
    p = pred.values[m].astype(np.float64)
    r = ref.values[m].astype(np.float64)
    sst = ((r - r.mean()) ** 2).sum()
    if sst == 0.0:
        return None
    sse = ((p - r) ** 2).sum()
    return float(1.0 - sse / sst)


def profile(chm: RasterGrid, axis: str) -> Profile:
    """X profile: per-column mean over valid cells; Y profile: per-row mean."""
    if chm.values.size == 0:
        raise ValueError("empty raster")
    valid = chm.valid_mask()
    values = np.where(valid, chm.values, 0.0).astype(np.float64)
    red_axis = 0 if axis == X_AXIS else 1
    counts = valid.sum(axis=red_axis)
    sums = values.sum(axis=red_axis)
    with np.errstate(invalid="ignore"):
        means = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return Profile(axis=axis, values=means)


def profile_correlation(a: Profile, b: Profile) -> float | None:
    """Pearson r between two profiles over mutually valid entries."""
    if a.axis != b.axis:
        raise ValueError(f"axis mismatch: {a.axis} vs {b.axis}")
    if len(a.values) != len(b.values):
        raise ValueError(
            f"length mismatch: {len(a.values)} vs {len(b.values)}")
    m = a.valid & b.valid
    if m.sum() < 2:
        return None
    return _pearson(a.values[m], b.values[m])
