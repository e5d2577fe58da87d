"""Distributional calibration of tile scores.

Two loss families drive the scorer:

* intra-district: within each eligible district, rank municipalities by
  their current score sums, take the top m, normalize their sums to shares
  and compare them (squared error) to the power-law pseudo-label shares;
* inter-district: for each district pick the districts whose ground truth
  is nearest below and above, and penalize the squared gap between
  ground-truth ratios and score-sum ratios.

Both are averaged per district and added.  Gradients are analytic; the
rank selection is treated as locally constant.
"""

from __future__ import annotations

import bisect
import logging
import math
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, DegenerateError, DivergenceError
from .optim import make_optimizer
from .powerlaw import ParetoShape, ShareTarget, preset_shape, share_targets
from .regions import RegionHierarchy, eligible_districts
from .scorer import ScorerParams, score, score_jacobian_apply

log = logging.getLogger(__name__)

ABLATIONS = {
    "full": (1.0, 1.0),
    "intra": (1.0, 0.0),
    "inter": (0.0, 1.0),
    "none": (0.0, 0.0),
}


@dataclass
class DistrictAggregate:
    district_id: str
    municipality_sums: dict[str, float]
    district_sum: float


@dataclass(frozen=True)
class NeighborPair:
    district_id: str
    lower_id: str | None
    upper_id: str | None


@dataclass
class LossReport:
    l_intra: float
    l_inter: float
    l_total: float
    grad: np.ndarray
    per_district_breakdown: dict[str, tuple[float, float]]
    skipped_districts: list[str] = field(default_factory=list)


@dataclass
class TrainConfig:
    shape: ParetoShape = field(default_factory=lambda: preset_shape("rule_90_10"))
    top_m: int = 7
    min_municipalities: int = 7
    learning_rate: float = 1e-2
    max_iters: int = 2000
    convergence_tol: float = 1e-8
    seed: int = 0
    optimizer: str = "adam"
    intra_weight: float = 1.0
    inter_weight: float = 1.0
    window: int = 10
    loss_floor: float = 1e-12
    workers: int = 1
    deterministic: bool = True

    def __post_init__(self):
        if self.top_m < 1:
            raise ConfigError("top_m must be >= 1")
        if self.top_m > self.min_municipalities:
            raise ConfigError(
                f"top_m ({self.top_m}) must not exceed min_municipalities ({self.min_municipalities})"
            )
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.max_iters < 0:
            raise ConfigError("max_iters must be >= 0")
        if not self.convergence_tol > 0:
            raise ConfigError("convergence_tol must be positive")
        if self.intra_weight < 0 or self.inter_weight < 0:
            raise ConfigError("loss weights must be nonnegative")

    @classmethod
    def for_ablation(cls, ablate, **kw):
        try:
            wi, we = ABLATIONS[ablate]
        except KeyError:
            raise ConfigError(f"unknown ablation {ablate!r}; expected one of {', '.join(ABLATIONS)}") from None
        we *= kw.pop("inter_weight", 1.0)
        return cls(intra_weight=wi, inter_weight=we, **kw)


# ---------------------------------------------------------------- aggregation


def _sums(scores, h):
    # bincount accumulates in array order, i.e. sorted tile id
    muni = np.bincount(h.tile_municipality, weights=scores, minlength=len(h.municipalities))
    dist = np.bincount(h.municipality_district, weights=muni, minlength=len(h.districts))
    return muni, dist


def _as_array(scores, h):
    if isinstance(scores, dict):
        missing = [t for t in h.tile_ids if t not in scores]
        if missing:
            raise DataError(f"no score for tile {missing[0]!r}")
        return np.array([scores[t] for t in h.tile_ids], dtype=float)
    scores = np.asarray(scores, dtype=float)
    if scores.shape != (h.n_tiles,):
        raise DataError(f"score vector has shape {scores.shape}, expected ({h.n_tiles},)")
    return scores


def aggregate(scores, h: RegionHierarchy) -> dict[str, DistrictAggregate]:
    scores = _as_array(scores, h)
    muni, dist = _sums(scores, h)
    out = {}
    for k, d in enumerate(h.districts):
        idx = h.district_municipalities[k]
        out[d.district_id] = DistrictAggregate(
            d.district_id,
            {h.municipality_ids[j]: float(muni[j]) for j in idx},
            float(dist[k]),
        )
    return out


# ---------------------------------------------------------------- intra-district loss


def _intra(sums, q, district_id=None):
    """Loss and d loss / d sums for one district; ``sums`` in id order."""
    m = len(q)
    if len(sums) < m:
        raise ConfigError(f"district {district_id!r} has {len(sums)} municipalities, fewer than top_m={m}")
    # stable sort on -sum keeps id order among ties
    top = np.argsort(-sums, kind="stable")[:m]
    s = sums[top]
    total = s.sum()
    if not total > 0:
        raise DegenerateError(f"district {district_id!r}: top-{m} municipality sums are all zero", district_id)
    p = s / total
    r = p - q
    value = float(r @ r)
    # d/dS_k sum_i (p_i - q_i)^2 = 2 (r_k - r.p) / total
    grad = np.zeros_like(sums)
    grad[top] = 2.0 * (r - r @ p) / total
    return value, grad


def intra_loss(agg: DistrictAggregate, target: ShareTarget, top_m: int):
    """Squared error between top-m municipality shares and pseudo-label shares.

    Returns ``(value, {municipality_id: partial})``; municipalities outside
    the top m get partial 0.
    """
    if target.m != top_m:
        raise ConfigError(f"target has m={target.m}, top_m={top_m}")
    ids = sorted(agg.municipality_sums)
    sums = np.array([agg.municipality_sums[i] for i in ids], dtype=float)
    value, grad = _intra(sums, target.shares, agg.district_id)
    return value, dict(zip(ids, grad.tolist()))


# ---------------------------------------------------------------- neighbors


def select_neighbors(h: RegionHierarchy) -> dict[str, NeighborPair]:
    """Nearest district strictly below and strictly above in ground truth.

    Ties in G go to the smallest district id.
    """
    if len(h.districts) < 2:
        raise ConfigError("neighbor selection needs at least 2 districts")
    ranked = sorted(h.districts, key=lambda d: (d.ground_truth, d.district_id))
    gs = [d.ground_truth for d in ranked]
    out = {}
    for d in h.districts:
        g = d.ground_truth
        lo = bisect.bisect_left(gs, g)
        hi = bisect.bisect_right(gs, g)
        lower = upper = None
        if lo > 0:
            g_low = gs[lo - 1]
            lower = ranked[bisect.bisect_left(gs, g_low)].district_id
        if hi < len(gs):
            upper = ranked[hi].district_id
        out[d.district_id] = NeighborPair(d.district_id, lower, upper)
    return out


def _neighbor_arrays(h, pairs):
    idx = h.district_index
    lower = np.array([-1 if pairs[d].lower_id is None else idx[pairs[d].lower_id] for d in h.district_ids])
    upper = np.array([-1 if pairs[d].upper_id is None else idx[pairs[d].upper_id] for d in h.district_ids])
    return lower, upper


# ---------------------------------------------------------------- inter-district loss


def _inter(t, g, lower, upper, district_ids):
    """Per-district loss terms and d loss / d district sums."""
    n = len(t)
    per = np.zeros(n)
    grad = np.zeros(n)
    for i in range(n):
        lo, up = lower[i], upper[i]
        if lo >= 0:
            if t[i] == 0:
                raise DegenerateError(f"district {district_ids[i]!r} has zero score sum", district_ids[i])
            r = g[lo] / g[i] - t[lo] / t[i]
            per[i] += r * r
            grad[lo] += -2.0 * r / t[i]
            grad[i] += 2.0 * r * t[lo] / (t[i] * t[i])
        if up >= 0:
            if t[up] == 0:
                raise DegenerateError(f"district {district_ids[up]!r} has zero score sum", district_ids[up])
            r = g[i] / g[up] - t[i] / t[up]
            per[i] += r * r
            grad[i] += -2.0 * r / t[up]
            grad[up] += 2.0 * r * t[i] / (t[up] * t[up])
    return per, grad


def inter_loss(aggs: dict[str, DistrictAggregate], h: RegionHierarchy, pairs=None):
    """Sum over districts of the lower- and upper-neighbor ratio terms.

    Returns ``(value, {district_id: partial})``.
    """
    if pairs is None:
        pairs = select_neighbors(h)
    t = np.array([aggs[d].district_sum for d in h.district_ids], dtype=float)
    lower, upper = _neighbor_arrays(h, pairs)
    per, grad = _inter(t, h.ground_truth, lower, upper, h.district_ids)
    return float(per.sum()), dict(zip(h.district_ids, grad.tolist()))


# ---------------------------------------------------------------- composite


class _Problem:
    """Per-hierarchy constants reused across iterations."""

    def __init__(self, h, cfg):
        self.h = h
        self.cfg = cfg
        self.target = share_targets(cfg.top_m, cfg.shape).shares
        eligible = set(eligible_districts(h, cfg.min_municipalities))
        self.eligible = [k for k, d in enumerate(h.district_ids) if d in eligible]
        self.lower, self.upper = _neighbor_arrays(h, select_neighbors(h))
        self.has_neighbor = (self.lower >= 0) | (self.upper >= 0)
        self.executor = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None

    def close(self):
        if self.executor is not None:
            self.executor.shutdown()

    def _intra_one(self, k, muni):
        idx = self.h.district_municipalities[k]
        try:
            return k, idx, _intra(muni[idx], self.target, self.h.district_ids[k])
        except DegenerateError:
            return k, idx, None

    def _intra_all(self, muni):
        if self.executor is None:
            return [self._intra_one(k, muni) for k in self.eligible]
        futures = [self.executor.submit(self._intra_one, k, muni) for k in self.eligible]
        if self.cfg.deterministic:
            return [f.result() for f in futures]
        return [f.result() for f in as_completed(futures)]

    def evaluate(self, params):
        h, cfg = self.h, self.cfg
        s = score(params, h)
        muni, dist = _sums(s, h)

        n_d = len(h.districts)
        intra_per = np.zeros(n_d)
        g_muni = np.zeros(len(muni))
        skipped = []
        used = 0
        for k, idx, res in self._intra_all(muni):
            if res is None:
                skipped.append(h.district_ids[k])
                continue
            value, g = res
            intra_per[k] = value
            g_muni[idx] += g
            used += 1
        if skipped:
            log.warning("skipped %d degenerate district(s) in intra loss: %s", len(skipped), ", ".join(skipped))
        l_intra = float(intra_per.sum()) / used if used else 0.0
        if used:
            g_muni /= used

        inter_per, g_dist = _inter(dist, h.ground_truth, self.lower, self.upper, h.district_ids)
        n_pairs = int(self.has_neighbor.sum())
        l_inter = float(inter_per.sum()) / n_pairs if n_pairs else 0.0
        if n_pairs:
            g_dist /= n_pairs

        upstream = (
            cfg.intra_weight * g_muni[h.tile_municipality]
            + cfg.inter_weight * g_dist[h.tile_district]
        )
        grad = score_jacobian_apply(params, h, upstream)
        breakdown = {
            d: (float(intra_per[k]), float(inter_per[k])) for k, d in enumerate(h.district_ids)
        }
        l_total = cfg.intra_weight * l_intra + cfg.inter_weight * l_inter
        return LossReport(l_intra, l_inter, l_total, grad, breakdown, skipped)


def composite_loss(params: ScorerParams, h: RegionHierarchy, cfg: TrainConfig) -> LossReport:
    """Weighted sum of the district-averaged intra and inter losses, with gradient.

    ``l_intra`` and ``l_inter`` are always reported unweighted; ``l_total``
    and ``grad`` use the config's loss weights (both 1 by default).
    """
    problem = _Problem(h, cfg)
    try:
        return problem.evaluate(params)
    finally:
        problem.close()


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TraceRow:
    iter: int
    l_intra: float
    l_inter: float
    l_total: float
    grad_norm: float


@dataclass
class TrainResult:
    params: ScorerParams
    trace: list[TraceRow]
    converged: bool
    reason: str


def write_trace(trace, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("iter,l_intra,l_inter,l_total,grad_norm\n")
        for r in trace:
            fh.write(f"{r.iter},{r.l_intra!r},{r.l_inter!r},{r.l_total!r},{r.grad_norm!r}\n")


def read_trace(path) -> list[TraceRow]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            it, a, b, c, g = line.strip().split(",")
            rows.append(TraceRow(int(it), float(a), float(b), float(c), float(g)))
    return rows


def train(params0: ScorerParams, h: RegionHierarchy, cfg: TrainConfig, callback=None) -> TrainResult:
    """Minimize the composite loss from ``params0``.

    Stops at ``max_iters``, when the loss drops to ``loss_floor``, or when
    the relative loss change over the last ``window`` iterations falls
    below ``convergence_tol``.  Non-finite values raise DivergenceError
    carrying the last finite iterate.
    """
    problem = _Problem(h, cfg)
    opt = make_optimizer(cfg.optimizer, cfg.learning_rate)
    params = params0.copy()
    last_finite = params
    trace: list[TraceRow] = []
    reason = "max_iters"
    converged = False
    try:
        for it in range(cfg.max_iters + 1):
            try:
                rep = problem.evaluate(params)
            except DegenerateError as exc:
                raise DivergenceError(
                    f"iteration {it}: {exc}; last finite iterate is from iteration {it - 1}",
                    it,
                    last_finite,
                ) from exc
            gnorm = float(np.linalg.norm(rep.grad))
            if not (math.isfinite(rep.l_total) and math.isfinite(gnorm)):
                raise DivergenceError(
                    f"iteration {it}: non-finite loss or gradient (l_total={rep.l_total}, "
                    f"grad_norm={gnorm})",
                    it,
                    last_finite,
                )
            last_finite = params
            row = TraceRow(it, rep.l_intra, rep.l_inter, rep.l_total, gnorm)
            trace.append(row)
            if callback is not None:
                callback(row)
            if rep.l_total <= cfg.loss_floor:
                reason, converged = "loss_floor", True
                break
            if it >= cfg.window:
                prev = trace[it - cfg.window].l_total
                if abs(rep.l_total - prev) / max(rep.l_total, 1e-12) < cfg.convergence_tol:
                    reason, converged = "tolerance", True
                    break
            if it == cfg.max_iters:
                break
            theta = opt.step(params.theta, rep.grad)
            if not np.all(np.isfinite(theta)):
                raise DivergenceError(f"iteration {it}: parameters became non-finite", it, last_finite)
            params = params.copy(theta)
    finally:
        problem.close()
    log.info("training stopped after %d iterations (%s), l_total=%.6g", trace[-1].iter, reason, trace[-1].l_total)
    return TrainResult(params, trace, converged, reason)
