"""Power-series design matrices for the partially linear mean model.

Columns are ordered intercept, linear (dummy) block, then powers ``1..l`` of
each continuous covariate. No cross products.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import Dataset
from .errors import ConfigurationError

MAX_POWER = 8


@dataclass(frozen=True)
class BasisSpec:
    h: int
    s: int
    l: int
    include_intercept: bool = True

    def __post_init__(self):
        if self.h < 0 or self.s < 0:
            raise ConfigurationError("h and s must be non-negative")
        if not 0 <= self.l <= MAX_POWER:
            raise ConfigurationError(f"maximum power l={self.l} outside 0..{MAX_POWER}")
        if not self.include_intercept:
            raise ConfigurationError("an intercept is always included")

    @property
    def k(self) -> int:
        """Number of basis terms, ``1 + h + s * l``."""
        return 1 + self.h + self.s * self.l

    @classmethod
    def for_dataset(cls, d: Dataset, l: int) -> "BasisSpec":
        return cls(h=d.h, s=d.s, l=l)

    def with_l(self, l: int) -> "BasisSpec":
        return BasisSpec(self.h, self.s, l)


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    values: np.ndarray
    column_labels: tuple
    spec: BasisSpec
    scaling: Optional[np.ndarray] = None


def continuous_scales(xc) -> np.ndarray:
    """Sample standard deviation per continuous column (1 where constant)."""
    xc = np.asarray(xc, dtype=float)
    sd = xc.std(axis=-2, ddof=1) if xc.shape[-2] > 1 else np.ones(xc.shape[-1])
    return np.where(sd > 0, sd, 1.0)


def power_design(xd, xc, l: int, scaling=None) -> np.ndarray:
    """Array-level design builder.

    Accepts leading batch dimensions: ``xd`` is ``(..., n, h)`` and ``xc`` is
    ``(..., n, s)``; returns ``(..., n, 1 + h + s*l)``.
    """
    xd = np.asarray(xd, dtype=float)
    xc = np.asarray(xc, dtype=float)
    if scaling is not None:
        xc = xc / np.asarray(scaling, dtype=float)
    s = xc.shape[-1]
    out = np.empty(xc.shape[:-1] + (1 + xd.shape[-1] + s * l,))
    out[..., 0] = 1.0
    h = xd.shape[-1]
    out[..., 1:1 + h] = xd
    col = 1 + h
    for c in range(s):
        x = xc[..., c]
        p = x
        for _ in range(l):
            out[..., col] = p
            p = p * x
            col += 1
    return out


def column_labels(d: Dataset, l: int) -> tuple:
    labels = [("intercept", 0)] + [(name, 1) for name in d.discrete_names]
    for name in d.continuous_names:
        labels += [(name, p) for p in range(1, l + 1)]
    return tuple(labels)


def build_design(d: Dataset, spec: BasisSpec, scaling=None) -> DesignMatrix:
    """Design matrix ``P_k(X)`` for ``d`` under ``spec``.

    When ``scaling`` is given, continuous covariate ``c`` is divided by
    ``scaling[c]`` before it is raised to each power.
    """
    if spec.h != d.h or spec.s != d.s:
        raise ConfigurationError(
            f"basis expects h={spec.h}, s={spec.s}; dataset has h={d.h}, s={d.s}"
        )
    if spec.l == 0 and spec.s >= 1:
        raise ConfigurationError("l=0 drops every continuous covariate; use l >= 1")
    if scaling is not None:
        scaling = np.asarray(scaling, dtype=float)
        if scaling.shape != (d.s,) or np.any(scaling <= 0):
            raise ConfigurationError("scaling needs one positive factor per continuous covariate")
    values = power_design(d.covariates_discrete, d.covariates_continuous, spec.l, scaling)
    values.setflags(write=False)
    return DesignMatrix(values, column_labels(d, spec.l), spec, scaling)
