"""Unconditional density of a signal: Gaussian KDE prior and entropy estimation.

The prior is an equal-weight Gaussian mixture centered at the training values,
with one shared bandwidth selected by validation likelihood. Entropy is the
mean negative log-density over held-out values, which upper-bounds the true
differential entropy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .conditional import LOG_SQRT_2PI

# Kernel terms farther than (nearest distance + 40 bandwidths) from an
# evaluation point underflow to exactly 0.0 after the max shift, so windowed
# evaluation matches the dense computation while skipping dead kernels.
_TRUNC_BANDWIDTHS = 40.0

DEFAULT_GRID_SIZE = 24
DEFAULT_GRID_LO = 1e-3
DEFAULT_GRID_HI = 1.0


class KdeFitError(Exception):
    """Bandwidth selection failed (no candidate gave a finite likelihood)."""


@dataclass(frozen=True)
class KdeModel:
    """Fitted kernel density: sorted center values and one bandwidth."""

    centers: np.ndarray
    bandwidth: float
    val_loglik: float = math.nan
    subsample_seed: int | None = None
    subsample_size: int | None = None

    def __post_init__(self):
        if self.centers.size == 0:
            raise ValueError("centers must be non-empty")
        if not (self.bandwidth > 0):
            raise ValueError(f"bandwidth must be > 0, got {self.bandwidth}")


@dataclass(frozen=True)
class EntropyEstimate:
    """Mean of per-sample negative log-density, in nats, with its SEM."""

    value: float
    sem: float
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.sem < 0:
            raise ValueError("sem must be >= 0")


def default_bandwidth_grid(
    train,
    size: int = DEFAULT_GRID_SIZE,
    lo_factor: float = DEFAULT_GRID_LO,
    hi_factor: float = DEFAULT_GRID_HI,
) -> np.ndarray:
    """Log-spaced candidates scaled by the training standard deviation."""
    scale = float(np.std(np.asarray(train, dtype=np.float64)))
    if scale == 0.0:
        scale = 1.0
    return scale * np.logspace(math.log10(lo_factor), math.log10(hi_factor), size)


def _nearest_distance(centers_sorted: np.ndarray, ys: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(centers_sorted, ys)
    left = np.clip(idx - 1, 0, centers_sorted.size - 1)
    right = np.clip(idx, 0, centers_sorted.size - 1)
    return np.minimum(np.abs(ys - centers_sorted[left]), np.abs(centers_sorted[right] - ys))


def _logpdf_sorted(centers_sorted: np.ndarray, bandwidth: float, ys: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Log mixture density at `ys`. Evaluation order is sorted by value, so the
    result is independent of the input permutation."""
    n = centers_sorted.size
    order = np.argsort(ys, kind="stable")
    ys_sorted = ys[order]
    dmin = _nearest_distance(centers_sorted, ys_sorted)
    out_sorted = np.empty(ys.size)
    const = -math.log(n) - math.log(bandwidth) - LOG_SQRT_2PI
    # extreme value/bandwidth combinations may overflow to non-finite log
    # densities; fit_kde turns an all-non-finite outcome into KdeFitError
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(0, ys.size, chunk):
            yc = ys_sorted[i:i + chunk]
            radius = float(dmin[i:i + chunk].max()) + _TRUNC_BANDWIDTHS * bandwidth
            lo = int(np.searchsorted(centers_sorted, yc[0] - radius))
            hi = int(np.searchsorted(centers_sorted, yc[-1] + radius))
            d = (yc[:, None] - centers_sorted[None, lo:hi]) / bandwidth
            z = -0.5 * d * d
            m = z.max(axis=1)
            out_sorted[i:i + chunk] = m + np.log(np.exp(z - m[:, None]).sum(axis=1)) + const
    out = np.empty_like(out_sorted)
    out[order] = out_sorted
    return out


def kde_logpdf(model: KdeModel, y: float) -> float:
    return float(_logpdf_sorted(model.centers, model.bandwidth, np.asarray([y], dtype=np.float64))[0])


def kde_logpdf_many(model: KdeModel, ys) -> np.ndarray:
    return _logpdf_sorted(model.centers, model.bandwidth, np.asarray(ys, dtype=np.float64))


def fit_kde(
    train,
    val,
    grid=None,
    *,
    max_centers: int | None = None,
    subsample_seed: int = 0,
) -> KdeModel:
    """Select the bandwidth with the highest mean validation log-likelihood.

    Ties break toward the larger bandwidth. With `max_centers` set, centers
    are uniformly subsampled (seeded) before fitting and the subsampling is
    recorded on the model.
    """
    train = np.asarray(train, dtype=np.float64)
    val = np.asarray(val, dtype=np.float64)
    if train.size == 0 or val.size == 0:
        raise ValueError("train and validation sets must be non-empty")
    if grid is None:
        grid = default_bandwidth_grid(train)
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0 or np.any(grid <= 0):
        raise ValueError("bandwidth grid must be non-empty and positive")

    sub_size = None
    if max_centers is not None and train.size > max_centers:
        rng = np.random.default_rng(subsample_seed)
        keep = rng.choice(train.size, size=max_centers, replace=False)
        train = train[np.sort(keep)]
        sub_size = max_centers

    centers = np.sort(train)
    mean_lls = np.empty(grid.size)
    for k, bw in enumerate(grid):
        lls = _logpdf_sorted(centers, float(bw), val)
        mean_lls[k] = float(np.mean(lls))
    if not np.any(np.isfinite(mean_lls)):
        raise KdeFitError("every bandwidth candidate yielded a non-finite validation likelihood")

    best = int(np.nanargmax(mean_lls))
    for k in range(grid.size - 1, best, -1):
        if mean_lls[k] == mean_lls[best]:
            best = k
            break
    return KdeModel(
        centers=centers,
        bandwidth=float(grid[best]),
        val_loglik=float(mean_lls[best]),
        subsample_seed=subsample_seed if sub_size is not None else None,
        subsample_size=sub_size,
    )


def estimate_entropy(model: KdeModel, test) -> EntropyEstimate:
    """Cross-entropy of the KDE on held-out values: mean and SEM of the
    per-sample negative log-density."""
    test = np.asarray(test, dtype=np.float64)
    if test.size == 0:
        raise ValueError("test set must be non-empty")
    # Sort before reducing so the estimate is exactly permutation-invariant.
    neg_lp = -kde_logpdf_many(model, np.sort(test))
    value = float(np.mean(neg_lp))
    sem = float(np.std(neg_lp, ddof=1) / math.sqrt(neg_lp.size)) if neg_lp.size > 1 else 0.0
    return EntropyEstimate(value=value, sem=sem, n=int(neg_lp.size))


def save_kde(model: KdeModel, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(
        path,
        centers=model.centers,
        bandwidth=model.bandwidth,
        val_loglik=model.val_loglik,
        subsample_seed=-1 if model.subsample_seed is None else model.subsample_seed,
        subsample_size=-1 if model.subsample_size is None else model.subsample_size,
    )


def load_kde(path) -> KdeModel:
    data = np.load(path)
    seed = int(data["subsample_seed"])
    size = int(data["subsample_size"])
    return KdeModel(
        centers=data["centers"],
        bandwidth=float(data["bandwidth"]),
        val_loglik=float(data["val_loglik"]),
        subsample_seed=None if seed < 0 else seed,
        subsample_size=None if size < 0 else size,
    )
