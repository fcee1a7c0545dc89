"""Parametric output families (Gaussian, Gamma, Laplace) and their log-densities.

Predictors emit two unconstrained reals per position; `constrain` maps them
into the family's valid parameter region with a softplus floor so training
never sees an invalid scale.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import digamma, gammaln

SCALE_FLOOR = 1e-6
LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class SupportError(ValueError):
    """A value outside the family's support. Deliberately a hard error
    rather than -inf: fitting Gamma to data with nonpositive values is a
    configuration bug that must not be absorbed into the estimates."""


class DistFamily(enum.Enum):
    GAUSSIAN = "gaussian"
    GAMMA = "gamma"
    LAPLACE = "laplace"

    @property
    def positive_support(self) -> bool:
        return self is DistFamily.GAMMA


# Deterministic tie-break order for family selection.
_FAMILY_ORDER = (DistFamily.GAUSSIAN, DistFamily.LAPLACE, DistFamily.GAMMA)


@dataclass(frozen=True)
class DistParams:
    """Constrained parameters. p1 is the Gaussian mean / Laplace location /
    Gamma shape; p2 is the Gaussian stddev / Laplace scale / Gamma rate."""

    family: DistFamily
    p1: float
    p2: float

    def __post_init__(self):
        if not (self.p2 > 0):
            raise ValueError(f"p2 must be > 0, got {self.p2}")
        if self.family is DistFamily.GAMMA and not (self.p1 > 0):
            raise ValueError(f"gamma shape must be > 0, got {self.p1}")


def softplus(x):
    """ln(1 + e^x), overflow-safe for large |x|."""
    return np.logaddexp(0.0, x)


def inv_softplus(y: float) -> float:
    """Inverse of softplus for y > 0; used to seed raw scale outputs."""
    if y <= 0:
        raise ValueError("inv_softplus requires y > 0")
    return y + math.log(-math.expm1(-y)) if y > 30 else math.log(math.expm1(y))


def constrain(raw: tuple[float, float] | Sequence[float], family: DistFamily) -> DistParams:
    """Map two unconstrained reals to valid parameters.

    p2 always goes through softplus + floor; p1 does too for Gamma, and
    passes through unchanged for Gaussian/Laplace.
    """
    r1, r2 = float(raw[0]), float(raw[1])
    p2 = float(softplus(r2)) + SCALE_FLOOR
    p1 = float(softplus(r1)) + SCALE_FLOOR if family is DistFamily.GAMMA else r1
    return DistParams(family=family, p1=p1, p2=p2)


def constrain_arrays(raw: np.ndarray, family: DistFamily) -> tuple[np.ndarray, np.ndarray]:
    """Vector form of `constrain`. `raw` has shape (..., 2)."""
    r1 = raw[..., 0]
    p2 = softplus(raw[..., 1]) + SCALE_FLOOR
    p1 = softplus(r1) + SCALE_FLOOR if family is DistFamily.GAMMA else r1
    return p1, p2


def logpdf_arrays(family: DistFamily, p1, p2, y) -> np.ndarray:
    """Exact log-density, vectorized. Raises SupportError for Gamma y <= 0."""
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if family is DistFamily.GAUSSIAN:
        return -LOG_SQRT_2PI - np.log(p2) - 0.5 * ((y - p1) / p2) ** 2
    if family is DistFamily.LAPLACE:
        return -np.log(2.0 * p2) - np.abs(y - p1) / p2
    if family is DistFamily.GAMMA:
        if np.any(y <= 0):
            bad = np.asarray(y)[np.asarray(y) <= 0]
            raise SupportError(f"gamma log-density requires y > 0, got {bad.flat[0]}")
        return p1 * np.log(p2) - gammaln(p1) + (p1 - 1.0) * np.log(y) - p2 * y
    raise ValueError(f"unknown family {family}")


def logpdf(params: DistParams, y: float) -> float:
    return float(logpdf_arrays(params.family, params.p1, params.p2, y))


def nll_param_grads(family: DistFamily, p1, p2, y) -> tuple[np.ndarray, np.ndarray]:
    """d(-logpdf)/dp1 and d(-logpdf)/dp2 for the constrained parameters.

    For Laplace the location derivative uses the sign subgradient at y == p1.
    """
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if family is DistFamily.GAUSSIAN:
        d1 = -(y - p1) / p2**2
        d2 = 1.0 / p2 - (y - p1) ** 2 / p2**3
        return d1, d2
    if family is DistFamily.LAPLACE:
        d1 = -np.sign(y - p1) / p2
        d2 = 1.0 / p2 - np.abs(y - p1) / p2**2
        return d1, d2
    if family is DistFamily.GAMMA:
        if np.any(y <= 0):
            raise SupportError("gamma gradients require y > 0")
        d1 = -(np.log(p2) - digamma(p1) + np.log(y))
        d2 = -(p1 / p2 - y)
        return d1, d2
    raise ValueError(f"unknown family {family}")


def mean_nll(params_seq: Sequence[DistParams], values: Sequence[float]) -> float:
    """Mean negative log-density over (params, value) pairs."""
    if len(params_seq) != len(values):
        raise ValueError(f"length mismatch: {len(params_seq)} params vs {len(values)} values")
    if not params_seq:
        raise ValueError("empty batch")
    total = 0.0
    for p, y in zip(params_seq, values):
        total += -logpdf(p, y)
    return total / len(params_seq)


def candidate_families(values, requested: Iterable[DistFamily]) -> list[DistFamily]:
    """Drop families whose support excludes any observed value."""
    values = np.asarray(values, dtype=np.float64)
    out = []
    excluded = []
    for fam in requested:
        if fam.positive_support and values.size and float(values.min()) <= 0:
            excluded.append(fam)
            continue
        out.append(fam)
    if excluded:
        import logging

        logging.getLogger(__name__).info(
            "excluded %s: data contains nonpositive values",
            ", ".join(f.value for f in excluded),
        )
    return out


def select_family(cross_entropies: Mapping[DistFamily, float]) -> DistFamily:
    """Family with the lowest validation cross-entropy; ties resolve in the
    order Gaussian, Laplace, Gamma."""
    if not cross_entropies:
        raise ValueError("no candidate families to select from")
    best = None
    best_ce = math.inf
    for fam in _FAMILY_ORDER:
        if fam in cross_entropies and cross_entropies[fam] < best_ce:
            best, best_ce = fam, cross_entropies[fam]
    if best is None:
        raise ValueError(f"no known family among candidates: {list(cross_entropies)}")
    return best
