"""Evaluation protocol: per-district L1 normalization, then R^2 at grid and
municipality granularity, averaged over districts or pooled country-wide."""

from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, DegenerateError, EmptyEvaluationError, ParseError
from .regions import RegionHierarchy

log = logging.getLogger(__name__)

GRANULARITIES = ("grid", "municipality")
SCOPES = ("district_avg", "country")
MIN_UNITS = 3


def _scores(scores, h):
    if isinstance(scores, dict):
        return np.array([scores[t] for t in h.tile_ids], dtype=float)
    return np.asarray(scores, dtype=float)


def l1_normalize(scores, h: RegionHierarchy) -> np.ndarray:
    """Rescale scores so each district's tiles sum to its ground truth."""
    s = _scores(scores, h)
    sums = np.bincount(h.tile_district, weights=s, minlength=len(h.districts))
    zero = np.flatnonzero(~(sums > 0))
    if zero.size:
        did = h.district_ids[zero[0]]
        raise DegenerateError(f"district {did!r} has zero score sum; cannot normalize", did)
    return s * (h.ground_truth / sums)[h.tile_district]


def r_squared(pred, truth) -> float:
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape or pred.ndim != 1 or pred.size == 0:
        raise ValueError("pred and truth must be 1-d and of equal nonzero length")
    dev = truth - truth.mean()
    sst = float(dev @ dev)
    if sst == 0.0:
        raise ValueError("truth has zero variance; R^2 undefined")
    res = pred - truth
    return 1.0 - float(res @ res) / sst


def rmse(pred, truth) -> float:
    res = np.asarray(pred, dtype=float) - np.asarray(truth, dtype=float)
    return math.sqrt(float(res @ res) / res.size)


def _units(norm, h, granularity):
    """(pred, truth, district index) per evaluation unit."""
    if granularity == "grid":
        truth = h.tile_truth
        if np.any(np.isnan(truth)):
            raise DataError("grid evaluation needs true_value on every tile")
        return norm, truth, h.tile_district
    if granularity == "municipality":
        truth = h.municipality_truth
        if np.any(np.isnan(truth)):
            raise DataError("municipality evaluation needs true_value on every municipality")
        pred = np.bincount(h.tile_municipality, weights=norm, minlength=len(h.municipalities))
        return pred, truth, h.municipality_district
    raise ConfigError(f"granularity must be one of {GRANULARITIES}, got {granularity!r}")


@dataclass
class DistrictMetrics:
    grid_r2: float
    municipality_r2: float
    grid_rmse: float
    municipality_rmse: float


@dataclass
class EvalReport:
    district_level_grid_r2: float
    district_level_municipality_r2: float
    country_grid_r2: float
    country_municipality_r2: float
    per_district: dict[str, DistrictMetrics] = field(default_factory=dict)
    excluded_grid: list[str] = field(default_factory=list)
    excluded_municipality: list[str] = field(default_factory=list)
    model: str = ""

    def headline(self) -> dict[str, float]:
        return {
            "district_grid_r2": self.district_level_grid_r2,
            "district_municipality_r2": self.district_level_municipality_r2,
            "country_grid_r2": self.country_grid_r2,
            "country_municipality_r2": self.country_municipality_r2,
        }


def _per_district(pred, truth, owner, n_districts):
    r2 = np.full(n_districts, np.nan)
    err = np.full(n_districts, np.nan)
    for k in range(n_districts):
        sel = owner == k
        if not sel.any():
            continue
        p, t = pred[sel], truth[sel]
        err[k] = rmse(p, t)
        if p.size >= MIN_UNITS and np.ptp(t) > 0:
            r2[k] = r_squared(p, t)
    return r2, err


def evaluate(scores, h: RegionHierarchy, granularity: str, scope: str) -> float:
    """One headline R^2 value; scores are L1-normalized internally."""
    norm = l1_normalize(scores, h)
    pred, truth, owner = _units(norm, h, granularity)
    if scope == "country":
        return r_squared(pred, truth)
    if scope != "district_avg":
        raise ConfigError(f"scope must be one of {SCOPES}, got {scope!r}")
    r2, _ = _per_district(pred, truth, owner, len(h.districts))
    excluded = [h.district_ids[k] for k in np.flatnonzero(np.isnan(r2))]
    if excluded:
        log.warning("%s R^2: excluded %d district(s) with < %d units or constant truth",
                    granularity, len(excluded), MIN_UNITS)
    if len(excluded) == len(h.districts):
        raise EmptyEvaluationError(f"no district eligible for {granularity} R^2")
    return float(np.nanmean(r2))


def evaluate_report(scores, h: RegionHierarchy, model: str = "") -> EvalReport:
    norm = l1_normalize(scores, h)
    n = len(h.districts)
    per_r2, per_rmse, excluded, avg, country = {}, {}, {}, {}, {}
    for gran in GRANULARITIES:
        pred, truth, owner = _units(norm, h, gran)
        r2, err = _per_district(pred, truth, owner, n)
        per_r2[gran], per_rmse[gran] = r2, err
        excluded[gran] = [h.district_ids[k] for k in np.flatnonzero(np.isnan(r2))]
        if len(excluded[gran]) == n:
            raise EmptyEvaluationError(f"no district eligible for {gran} R^2")
        avg[gran] = float(np.nanmean(r2))
        country[gran] = r_squared(pred, truth)
    per = {
        d: DistrictMetrics(
            float(per_r2["grid"][k]),
            float(per_r2["municipality"][k]),
            float(per_rmse["grid"][k]),
            float(per_rmse["municipality"][k]),
        )
        for k, d in enumerate(h.district_ids)
    }
    return EvalReport(
        avg["grid"], avg["municipality"], country["grid"], country["municipality"],
        per, excluded["grid"], excluded["municipality"], model,
    )


# ---------------------------------------------------------------- train/test split


def split_districts(h: RegionHierarchy, test_frac: float, seed: int) -> tuple[list[str], list[str]]:
    """Seeded district-level split -> (train ids, test ids), both sorted.

    ``test_frac == 0`` puts every district in both partitions.
    """
    if not 0 <= test_frac < 1:
        raise ConfigError(f"test_frac must be in [0, 1), got {test_frac}")
    ids = list(h.district_ids)
    if test_frac == 0:
        return ids, ids
    n_test = max(1, int(round(test_frac * len(ids))))
    if len(ids) - n_test < 2:
        raise ConfigError(f"{len(ids)} districts cannot leave 2 for training at test_frac={test_frac}")
    order = np.random.default_rng(seed).permutation(len(ids))
    test = sorted(ids[i] for i in order[:n_test])
    train = sorted(ids[i] for i in order[n_test:])
    return train, test


# ---------------------------------------------------------------- report io

_HEADLINE_LABELS = [
    ("district_grid_r2", "district-averaged R2, grid"),
    ("district_municipality_r2", "district-averaged R2, municipality"),
    ("country_grid_r2", "country R2, grid"),
    ("country_municipality_r2", "country R2, municipality"),
]


def format_report(report: EvalReport) -> str:
    buf = io.StringIO()
    head = report.headline()
    buf.write("# powercal evaluation report\n")
    buf.write(f"# model: {report.model or '-'}\n#\n")
    for key, label in _HEADLINE_LABELS:
        buf.write(f"#   {label:<36s} {head[key]:.4f}\n")
    buf.write(f"#   excluded (grid / municipality): {len(report.excluded_grid)} / "
              f"{len(report.excluded_municipality)}\n")
    buf.write("[headline]\nkey,value\n")
    buf.write(f"model,{report.model}\n")
    for key, _ in _HEADLINE_LABELS:
        buf.write(f"{key},{head[key]!r}\n")
    buf.write(f"excluded_grid,{' '.join(report.excluded_grid)}\n")
    buf.write(f"excluded_municipality,{' '.join(report.excluded_municipality)}\n")
    buf.write("[per_district]\ndistrict_id,grid_r2,municipality_r2,grid_rmse,municipality_rmse\n")
    for did, m in report.per_district.items():
        buf.write(f"{did},{m.grid_r2!r},{m.municipality_r2!r},{m.grid_rmse!r},{m.municipality_rmse!r}\n")
    return buf.getvalue()


def emit_report(report: EvalReport, path) -> None:
    Path(path).write_text(format_report(report), encoding="utf-8")


def parse_report(path) -> EvalReport:
    path = Path(path)
    section = None
    head: dict[str, str] = {}
    per = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        if line.startswith("["):
            section = line.strip()
            continue
        if section == "[headline]":
            if line == "key,value":
                continue
            key, _, value = line.partition(",")
            head[key] = value
        elif section == "[per_district]":
            if line.startswith("district_id,"):
                continue
            cells = line.split(",")
            if len(cells) != 5:
                raise ParseError(path, lineno, "per-district row needs 5 fields")
            per[cells[0]] = DistrictMetrics(*(float(c) for c in cells[1:]))
        else:
            raise ParseError(path, lineno, "record outside a known section")
    try:
        values = [float(head[k]) for k, _ in _HEADLINE_LABELS]
    except (KeyError, ValueError):
        raise ParseError(path, 0, "missing or malformed headline values") from None
    return EvalReport(
        *values,
        per_district=per,
        excluded_grid=head.get("excluded_grid", "").split(),
        excluded_municipality=head.get("excluded_municipality", "").split(),
        model=head.get("model", ""),
    )


def write_diff_csv(scores, h: RegionHierarchy, path) -> None:
    """Per-tile normalized prediction minus truth, for external mapping."""
    norm = l1_normalize(scores, h)
    truth = h.tile_truth
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("tile_id,municipality_id,district_id,prediction,truth,difference\n")
        for k, tid in enumerate(h.tile_ids):
            t = h.tiles[tid]
            did = h.municipalities[t.municipality_id].district_id
            tv = truth[k]
            diff = "" if np.isnan(tv) else repr(float(norm[k] - tv))
            tv_s = "" if np.isnan(tv) else repr(float(tv))
            fh.write(f"{tid},{t.municipality_id},{did},{float(norm[k])!r},{tv_s},{diff}\n")
