"""Synthetic fractal countries whose municipality sizes follow the rank-size law."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .powerlaw import ParetoShape, expected_size, parse_shape, preset_shape
from .regions import RegionHierarchy, Tile
from .scorer import ORDINAL_CLASSES


@dataclass(frozen=True)
class SynthConfig:
    n_districts: int = 12
    municipalities_per_district: tuple[int, int] = (8, 15)
    tiles_per_municipality: tuple[int, int] = (6, 20)
    shape: ParetoShape = field(default_factory=lambda: preset_shape("rule_90_10"))
    district_scale_range: tuple[float, float] = (20.0, 500.0)
    powerlaw_noise_sigma: float = 0.15
    feature_dim: int = 4
    feature_noise_sigma: float = 0.2
    seed: int = 42
    min_municipalities: int = 7

    def __post_init__(self):
        if self.n_districts < 2:
            raise ConfigError(f"n_districts must be >= 2 (neighbor losses need a pair), got {self.n_districts}")
        for name in ("municipalities_per_district", "tiles_per_municipality", "district_scale_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ConfigError(f"{name}: empty range ({lo}, {hi})")
        if self.tiles_per_municipality[0] < 1:
            raise ConfigError("tiles_per_municipality must start at >= 1")
        if self.municipalities_per_district[0] < max(1, self.min_municipalities):
            raise ConfigError(
                f"municipalities_per_district starts at {self.municipalities_per_district[0]}, "
                f"below min_municipalities={self.min_municipalities} (set min_municipalities to override)"
            )
        if not self.district_scale_range[0] > 0:
            raise ConfigError("district_scale_range must be positive")
        if self.powerlaw_noise_sigma < 0 or self.feature_noise_sigma < 0:
            raise ConfigError("noise levels must be nonnegative")
        if self.feature_dim < 0:
            raise ConfigError("feature_dim must be >= 0")

    def replace(self, **changes) -> SynthConfig:
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, data: dict) -> SynthConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown synth config key(s): {', '.join(sorted(unknown))}")
        kw = dict(data)
        if "shape" in kw:
            kw["shape"] = parse_shape(kw["shape"])
        for key in ("municipalities_per_district", "tiles_per_municipality", "district_scale_range"):
            if key in kw:
                value = kw[key]
                if not isinstance(value, (list, tuple)) or len(value) != 2:
                    raise ConfigError(f"{key} must be a [low, high] pair")
                kw[key] = tuple(value)
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def benchmark_default() -> SynthConfig:
    """The fixed-seed instance the acceptance suite runs on."""
    return SynthConfig()


def _width(n):
    return max(2, len(str(n - 1)))


def generate_country(cfg: SynthConfig) -> RegionHierarchy:
    rng = np.random.default_rng(cfg.seed)
    dw = _width(cfg.n_districts)
    ground_truth: dict[str, float] = {}
    muni_district: dict[str, str] = {}
    muni_truth: dict[str, float] = {}
    tiles: list[Tile] = []
    log_lo, log_hi = (math.log(x) for x in cfg.district_scale_range)

    for d in range(cfg.n_districts):
        did = f"D{d:0{dw}d}"
        n = int(rng.integers(cfg.municipalities_per_district[0], cfg.municipalities_per_district[1] + 1))
        scale = math.exp(rng.uniform(log_lo, log_hi))
        base = np.array([expected_size(i, n, 1.0, cfg.shape) for i in range(1, n + 1)])
        noise = rng.normal(0.0, cfg.powerlaw_noise_sigma, size=n) if cfg.powerlaw_noise_sigma > 0 else 0.0
        sizes = base * np.exp(noise)
        # c is pinned so the municipality sizes integrate to the district scale
        sizes *= scale / math.fsum(sizes)

        mw = _width(n)
        district_tiles = []
        for j in range(n):
            mid = f"{did}-M{j:0{mw}d}"
            k = int(rng.integers(cfg.tiles_per_municipality[0], cfg.tiles_per_municipality[1] + 1))
            values = sizes[j] * rng.dirichlet(np.ones(k))
            muni_district[mid] = did
            muni_truth[mid] = math.fsum(values)
            tw = _width(k)
            district_tiles += [(f"{mid}-T{t:0{tw}d}", mid, float(v)) for t, v in enumerate(values)]

        values = np.array([v for _, _, v in district_tiles])
        median = float(np.median(values))
        feats = np.empty((len(values), cfg.feature_dim))
        channels = [np.log1p(values), (values > median).astype(float)]
        for c in range(cfg.feature_dim):
            signal = channels[c] if c < len(channels) else rng.standard_normal(len(values))
            feats[:, c] = signal
        if cfg.feature_noise_sigma > 0 and cfg.feature_dim:
            feats += rng.normal(0.0, cfg.feature_noise_sigma, size=feats.shape)
        for (tid, mid, v), f in zip(district_tiles, feats):
            tiles.append(Tile(tid, mid, tuple(float(x) for x in f), v))
        ground_truth[did] = math.fsum(values)

    return RegionHierarchy.build(ground_truth, muni_district, tiles, cfg.feature_dim, muni_truth)


def label_sample(h: RegionHierarchy, n: int, seed: int, district_ids=None) -> list[tuple[str, str]]:
    """Simulated annotation: a random tile sample labeled by truth tercile.

    The lowest third of sampled true values is ``uninhabited``, the middle
    ``rural``, the top ``urban``.  Only tiles of ``district_ids`` are drawn.
    """
    pool = [
        tid for tid in h.tile_ids
        if district_ids is None or h.municipalities[h.tiles[tid].municipality_id].district_id in district_ids
    ]
    if not pool:
        raise ConfigError("no tiles available to label")
    rng = np.random.default_rng(seed)
    picked = sorted(rng.choice(len(pool), size=min(n, len(pool)), replace=False))
    ids = [pool[i] for i in picked]
    truth = np.array([np.nan if h.tiles[t].true_value is None else h.tiles[t].true_value for t in ids])
    if np.any(np.isnan(truth)):
        raise ConfigError("labeling needs true values on the sampled tiles")
    cuts = np.quantile(truth, [1 / 3, 2 / 3])
    classes = np.searchsorted(cuts, truth, side="right")
    return [(t, ORDINAL_CLASSES[int(c)]) for t, c in zip(ids, classes)]
