"""Rank-size machinery for the common power law.

If Pr(S > s) ~ c * s**-a and n units are ranked largest first, the unit at
rank i has size roughly (n*c/i)**(1/a).  Normalizing those sizes over the
top m ranks removes n and c, which gives the pseudo-label shares used to
calibrate municipality aggregates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

PRESETS = {
    "rule_80_20": math.log(5) / math.log(4),
    "rule_90_10": math.log(10) / math.log(9),
    "rule_100_0": 1.0,
}


@dataclass(frozen=True)
class ParetoShape:
    a: float

    def __post_init__(self):
        if not (math.isfinite(self.a) and self.a > 0):
            raise ConfigError(f"Pareto shape must be a positive finite number, got {self.a!r}")


@dataclass(frozen=True)
class ShareTarget:
    m: int
    shares: np.ndarray


def preset_shape(name: str) -> ParetoShape:
    try:
        return ParetoShape(PRESETS[name])
    except KeyError:
        raise ConfigError(
            f"unknown shape preset {name!r}; expected one of {', '.join(PRESETS)}"
        ) from None


def parse_shape(value) -> ParetoShape:
    """Accept a preset name, a number, or a ParetoShape."""
    if isinstance(value, ParetoShape):
        return value
    if isinstance(value, str) and value in PRESETS:
        return preset_shape(value)
    try:
        return ParetoShape(float(value))
    except (TypeError, ValueError):
        raise ConfigError(
            f"shape must be a preset ({', '.join(PRESETS)}) or a positive number, got {value!r}"
        ) from None


def expected_size(i: int, n: int, c: float, shape: ParetoShape) -> float:
    if not 1 <= i <= n:
        raise ConfigError(f"rank {i} outside 1..{n}")
    if c <= 0:
        raise ConfigError(f"c must be positive, got {c}")
    return (n * c / i) ** (1.0 / shape.a)


def share_targets(m: int, shape: ParetoShape) -> ShareTarget:
    if m < 1:
        raise ConfigError(f"m must be >= 1, got {m}")
    ranks = np.arange(1, m + 1, dtype=float)
    weights = (1.0 / ranks) ** (1.0 / shape.a)
    return ShareTarget(m, weights / math.fsum(weights))


def fit_shape(sizes) -> float:
    """Estimate the shape exponent from a sample of unit sizes.

    Sizes are ranked in descending order and log(rank) is regressed on
    log(size) by ordinary least squares; the estimate is minus the slope.
    Constant sizes carry no slope information and give 0.

    Returns a plain float since noisy or degenerate data can produce a
    non-positive estimate, which is not a valid ParetoShape.
    """
    x = np.asarray(sizes, dtype=float)
    if x.ndim != 1 or x.size < 3:
        raise ConfigError("fit_shape needs at least 3 sizes")
    if not np.all(np.isfinite(x)) or np.any(x <= 0):
        raise ValueError("fit_shape requires strictly positive finite sizes")
    log_size = np.log(np.sort(x)[::-1])
    log_rank = np.log(np.arange(1, x.size + 1, dtype=float))
    dx = log_size - log_size.mean()
    sxx = float(dx @ dx)
    if sxx == 0.0:
        return 0.0
    slope = float(dx @ (log_rank - log_rank.mean())) / sxx
    return -slope
