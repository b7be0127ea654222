"""Sparse kernel matrix from prior-image features (kNN + radial Gaussian)."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .tomo import SparseMatrix


class KernelError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSet:
    features: np.ndarray          # (J, C) standardised
    mean: np.ndarray              # (C,) over retained channels
    std: np.ndarray
    channels: tuple[int, ...]     # indices of retained input channels

    @property
    def n_pixels(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class KernelModel:
    K: SparseMatrix
    k: int
    sigma: float
    window: tuple[int, ...] | None = None
    row_normalized: bool = False
    feature_mean: tuple[float, ...] = ()
    feature_std: tuple[float, ...] = ()

    def metadata(self) -> dict:
        return {
            "k": self.k,
            "sigma": self.sigma,
            "window": list(self.window) if self.window else None,
            "row_normalized": self.row_normalized,
            "feature_mean": list(self.feature_mean),
            "feature_std": list(self.feature_std),
        }


def extract_features(composites) -> FeatureSet:
    """Per-pixel vectors of composite intensities, z-scored per channel.

    Zero-variance channels are dropped with a warning.
    """
    z = np.atleast_2d(np.asarray(composites, dtype=np.float64))
    if z.ndim != 2 or z.shape[0] < 1:
        raise KernelError("need at least one composite channel")
    if not np.all(np.isfinite(z)):
        raise KernelError("composite images must be finite")
    mean = z.mean(axis=1)
    std = z.std(axis=1)
    keep = [c for c in range(z.shape[0]) if std[c] > 1e-12 * max(1.0, abs(mean[c]))]
    if len(keep) < z.shape[0]:
        warnings.warn(f"dropping zero-variance feature channels {sorted(set(range(z.shape[0])) - set(keep))}")
    if not keep:
        raise KernelError("no usable feature channels (all constant)")
    f = (z[keep] - mean[keep, None]) / std[keep, None]
    return FeatureSet(np.ascontiguousarray(f.T), mean[keep], std[keep], tuple(keep))


def _select_k(dist: np.ndarray, cand: np.ndarray, k: int) -> np.ndarray:
    """Per row, the k candidates with smallest distance, ties to lower index."""
    # lexsort uses the last key as primary
    order = np.lexsort((cand, dist), axis=-1)[:, :k]
    return np.take_along_axis(cand, order, axis=-1)


def knn_search(features: FeatureSet, k: int, window: tuple[int, ...] | None = None,
               shape: tuple[int, ...] | None = None, chunk: int = 256) -> np.ndarray:
    """Indices (J, k) of each pixel's k nearest other pixels in feature space.

    Distances are squared Euclidean computed from explicit differences so equal
    feature vectors tie exactly; ties go to the lower pixel index. With
    ``window`` (odd box side per image axis) only pixels inside the box around
    each pixel are candidates; ``shape`` is then the image array shape.
    """
    f = features.features
    J = f.shape[0]
    if k < 0:
        raise KernelError("k must be >= 0")
    if k == 0:
        return np.zeros((J, 0), dtype=np.int64)
    if window is None:
        if k >= J:
            raise KernelError(f"k={k} needs more than {J - 1} candidates")
        out = np.empty((J, k), dtype=np.int64)
        all_idx = np.arange(J)
        for lo in range(0, J, chunk):
            hi = min(lo + chunk, J)
            d = ((f[lo:hi, None, :] - f[None, :, :]) ** 2).sum(axis=-1)
            d[np.arange(hi - lo), np.arange(lo, hi)] = np.inf
            cand = np.broadcast_to(all_idx, d.shape)
            out[lo:hi] = _select_k(d, cand, k)
        return out
    return _knn_windowed(f, k, tuple(window), tuple(shape) if shape else None, chunk)


def _knn_windowed(f, k, window, shape, chunk):
    if shape is None or int(np.prod(shape)) != f.shape[0]:
        raise KernelError("windowed search needs the image shape")
    if len(window) != len(shape) or any(w < 1 or w % 2 == 0 for w in window):
        raise KernelError("window must give one odd side length per image axis")
    box = int(np.prod([min(w, s) for w, s in zip(window, shape)])) - 1
    if k > box:
        raise KernelError(f"k={k} exceeds the {box} candidates in a {window} window")
    J = f.shape[0]
    coords = np.stack(np.unravel_index(np.arange(J), shape), axis=-1)
    rng = [np.arange(-(w // 2), w // 2 + 1) for w in window]
    offsets = np.stack(np.meshgrid(*rng, indexing="ij"), axis=-1).reshape(-1, len(shape))
    offsets = offsets[np.any(offsets != 0, axis=1)]
    out = np.empty((J, k), dtype=np.int64)
    strides = np.array([int(np.prod(shape[i + 1:])) for i in range(len(shape))])
    for lo in range(0, J, chunk):
        hi = min(lo + chunk, J)
        nb = coords[lo:hi, None, :] + offsets[None, :, :]
        valid = np.all((nb >= 0) & (nb < np.array(shape)), axis=-1)
        if np.any(valid.sum(axis=1) < k):
            raise KernelError("a window holds fewer than k candidates")
        cand = np.where(valid, (np.clip(nb, 0, np.array(shape) - 1) * strides).sum(axis=-1), J)
        d = np.where(valid, ((f[lo:hi, None, :] - f[np.minimum(cand, J - 1)]) ** 2).sum(axis=-1), np.inf)
        out[lo:hi] = _select_k(d, cand, k)
    return out


def build_kernel(features: FeatureSet, neighbors: np.ndarray, sigma: float = 1.0,
                 row_normalize: bool = False, window: tuple[int, ...] | None = None) -> KernelModel:
    """K[j, l] = exp(-|f_j - f_l|^2 / (2 sigma^2)) for l in the neighbours of j and l = j."""
    if not sigma > 0:
        raise KernelError("sigma must be > 0")
    f = features.features
    J = f.shape[0]
    neighbors = np.asarray(neighbors, dtype=np.int64).reshape(J, -1)
    k = neighbors.shape[1]
    cols = np.concatenate([np.arange(J)[:, None], neighbors], axis=1)
    d2 = ((f[:, None, :] - f[cols]) ** 2).sum(axis=-1)
    vals = np.exp(-d2 / (2.0 * sigma**2))
    if row_normalize:
        vals = vals / vals.sum(axis=1, keepdims=True)
    order = np.argsort(cols, axis=1, kind="stable")
    cols = np.take_along_axis(cols, order, axis=1)
    vals = np.take_along_axis(vals, order, axis=1)
    K = SparseMatrix(J, J, np.arange(J + 1) * (k + 1), cols.ravel(), vals.ravel())
    return KernelModel(K, k, float(sigma), window, row_normalize,
                       tuple(map(float, features.mean)), tuple(map(float, features.std)))


def identity_kernel(n: int) -> KernelModel:
    return KernelModel(SparseMatrix.identity(n), 0, 1.0)


def apply_K(model: KernelModel, v: np.ndarray) -> np.ndarray:
    return model.K.matvec(v)


def apply_Kt(model: KernelModel, v: np.ndarray) -> np.ndarray:
    return model.K.rmatvec(v)


def combined_weight(model: KernelModel, s: np.ndarray) -> np.ndarray:
    """w = K^T s with s the sensitivity image P^T 1."""
    return model.K.rmatvec(s)


def kernel_from_composites(composites, k: int = 48, sigma: float = 1.0, window=None, shape=None,
                           row_normalize: bool = False) -> KernelModel:
    feats = extract_features(composites)
    nbrs = knn_search(feats, k, window=window, shape=shape)
    return build_kernel(feats, nbrs, sigma, row_normalize, window)
