"""Image MSE, ROI statistics and ensemble bias/SD over noise realisations."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class RoiMask:
    name: str
    indices: np.ndarray
    source: str = "phantom"

    def __post_init__(self):
        idx = np.unique(np.asarray(self.indices, dtype=np.int64))
        if idx.size == 0:
            raise MetricError(f"ROI {self.name!r} is empty")
        if idx[0] < 0:
            raise MetricError(f"ROI {self.name!r} has negative pixel indices")
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    @classmethod
    def from_mask(cls, name: str, mask, source: str = "phantom") -> "RoiMask":
        return cls(name, np.flatnonzero(np.asarray(mask).ravel()), source)

    def check(self, n_pixels: int) -> None:
        if self.indices[-1] >= n_pixels:
            raise MetricError(f"ROI {self.name!r} indexes past the {n_pixels}-pixel image")


@dataclass(frozen=True)
class EnsembleResult:
    means: tuple[float, ...]
    c_true: float
    bias: float
    sd: float

    @property
    def n_realizations(self) -> int:
        return len(self.means)


def image_mse_db(xhat, xtrue) -> float:
    """10 log10(|xhat - x|^2 / |x|^2); -inf when the images are identical."""
    xhat, xtrue = np.asarray(xhat, dtype=np.float64), np.asarray(xtrue, dtype=np.float64)
    if xhat.shape != xtrue.shape:
        raise MetricError("image shapes differ")
    ref = float(xtrue.ravel() @ xtrue.ravel())
    if ref == 0:
        raise MetricError("reference image is all zero")
    d = (xhat - xtrue).ravel()
    err = float(d @ d)
    return float("-inf") if err == 0 else 10.0 * np.log10(err / ref)


def roi_mean(x, roi: RoiMask) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    roi.check(x.size)
    return float(x[roi.indices].mean())


def ensemble_bias_sd(c_list: Sequence[float], c_true: float) -> EnsembleResult:
    """Normalised ensemble bias |mean - c_true| / c_true and sample SD / c_true."""
    c = np.asarray(c_list, dtype=np.float64)
    if c.size < 2:
        raise MetricError("need at least two realisations")
    if not c_true > 0:
        raise MetricError("true ROI value must be > 0")
    cbar = c.mean()
    sd = np.sqrt(np.sum((c - cbar) ** 2) / (c.size - 1)) / c_true
    return EnsembleResult(tuple(map(float, c)), float(c_true), float(abs(cbar - c_true) / c_true), float(sd))


def noise_sd_background(x, roi: RoiMask) -> float:
    """Spatial coefficient of variation inside a background ROI."""
    x = np.asarray(x, dtype=np.float64).ravel()
    roi.check(x.size)
    if roi.indices.size < 2:
        raise MetricError("background ROI needs at least two pixels")
    vals = x[roi.indices]
    mean = vals.mean()
    if mean <= 0:
        raise MetricError("background ROI mean must be > 0")
    return float(vals.std(ddof=1) / mean)


MSE_COLUMNS = ("method", "frame", "iteration", "mse_db")
BIAS_SD_COLUMNS = ("method", "frame", "roi", "bias", "sd", "iteration")


def write_table(path: str | Path, columns: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(columns)
        for row in rows:
            out.writerow([_fmt(v) for v in row])
    return path


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return "-inf" if v == float("-inf") else repr(float(v))
    return v
