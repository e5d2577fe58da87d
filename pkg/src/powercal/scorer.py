"""Nonnegative per-tile score function and its initializations.

Scores are ``softplus(raw)`` where ``raw`` is either one free parameter per
tile or an affine function of the tile's feature vector.  Score vectors are
numpy arrays aligned with ``RegionHierarchy.tile_ids``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import ConfigError, DataError, DegenerateError, IntegrityError, ParseError, ShapeError
from .optim import Adam

log = logging.getLogger(__name__)

FREE_PER_TILE = "free_per_tile"
LINEAR_FEATURES = "linear_features"
KINDS = (FREE_PER_TILE, LINEAR_FEATURES)

ORDINAL_CLASSES = ("uninhabited", "rural", "urban")
SCORE_FLOOR = 1e-12


def softplus(x):
    return np.logaddexp(0.0, x)


def inverse_softplus(y):
    """Inverse of softplus; targets below SCORE_FLOOR are clamped to it."""
    y = np.maximum(np.asarray(y, dtype=float), SCORE_FLOOR)
    # log(exp(y) - 1) written to stay finite for both tiny and large y
    return y + np.log(-np.expm1(-y))


@dataclass
class ScorerParams:
    kind: str
    theta: np.ndarray

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown scorer kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        self.theta = np.array(self.theta, dtype=float).reshape(-1)
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("scorer parameters must be finite")

    def copy(self, theta=None):
        return ScorerParams(self.kind, self.theta.copy() if theta is None else theta)

    def __eq__(self, other):
        return (
            isinstance(other, ScorerParams)
            and self.kind == other.kind
            and np.array_equal(self.theta, other.theta)
        )


def expected_dim(kind, h):
    return h.n_tiles if kind == FREE_PER_TILE else h.feature_dim + 1


def _check_dim(params, h):
    want = expected_dim(params.kind, h)
    if params.theta.size != want:
        raise ShapeError(f"{params.kind} scorer needs {want} parameters, got {params.theta.size}")


def _design(h):
    return np.hstack([np.ones((h.n_tiles, 1)), h.features])


def raw_scores(params: ScorerParams, h) -> np.ndarray:
    _check_dim(params, h)
    if params.kind == FREE_PER_TILE:
        return params.theta.copy()
    return _design(h) @ params.theta


def score(params: ScorerParams, h) -> np.ndarray:
    return softplus(raw_scores(params, h))


def score_map(params: ScorerParams, h) -> dict[str, float]:
    return dict(zip(h.tile_ids, score(params, h).tolist()))


def score_jacobian_apply(params: ScorerParams, h, upstream) -> np.ndarray:
    """Vector-Jacobian product: sum_x upstream[x] * d score(x) / d theta."""
    if isinstance(upstream, dict):
        upstream = np.array([upstream[t] for t in h.tile_ids], dtype=float)
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != (h.n_tiles,):
        raise ShapeError(f"upstream has shape {upstream.shape}, expected ({h.n_tiles},)")
    local = upstream * expit(raw_scores(params, h))
    if params.kind == FREE_PER_TILE:
        return local
    return _design(h).T @ local


# ---------------------------------------------------------------- inits


def init_uniform(h, kind=FREE_PER_TILE) -> ScorerParams:
    """Every tile scores softplus(0); the flat baseline."""
    return ScorerParams(kind, np.zeros(expected_dim(kind, h)))


def init_noisy_proxy(h, noise_sigma, seed) -> ScorerParams:
    """Free per-tile scores equal to true values times lognormal noise.

    Stands in for an initial scorer of known quality on synthetic data.
    """
    truth = h.tile_truth
    if np.any(np.isnan(truth)):
        missing = h.tile_ids[int(np.flatnonzero(np.isnan(truth))[0])]
        raise DataError(f"tile {missing!r} has no true_value; noisy proxy needs synthetic truth")
    if noise_sigma < 0:
        raise ConfigError("noise_sigma must be nonnegative")
    rng = np.random.default_rng(seed)
    eps = rng.normal(0.0, noise_sigma, size=h.n_tiles) if noise_sigma > 0 else np.zeros(h.n_tiles)
    return ScorerParams(FREE_PER_TILE, inverse_softplus(truth * np.exp(eps)))


def _class_index(label):
    if isinstance(label, (int, np.integer)) and 0 <= label < len(ORDINAL_CLASSES):
        return int(label)
    try:
        return ORDINAL_CLASSES.index(label)
    except ValueError:
        raise ConfigError(f"unknown ordinal class {label!r}; expected one of {ORDINAL_CLASSES}") from None


def _ordinal_nll(w, tau1, delta, x, y, ridge):
    """Cumulative-logit negative log-likelihood with two ordered cut points.

    P(y <= k) = sigmoid(cut_k - x.w), cut_1 = tau1, cut_2 = tau1 + exp(delta).
    Returns (mean nll, grad_w, grad_tau1, grad_delta).
    """
    eta = x @ w
    gap = np.exp(delta)
    cut1, cut2 = tau1, tau1 + gap
    s1 = expit(cut1 - eta)
    s2 = expit(cut2 - eta)
    tiny = 1e-300
    n = len(y)
    # per-class probability and its partials w.r.t. (eta, cut1, cut2)
    p = np.where(y == 0, s1, np.where(y == 1, s2 - s1, 1.0 - s2))
    p = np.maximum(p, tiny)
    d1 = s1 * (1 - s1)
    d2 = s2 * (1 - s2)
    dp_dcut1 = np.where(y == 0, d1, np.where(y == 1, -d1, 0.0))
    dp_dcut2 = np.where(y == 0, 0.0, np.where(y == 1, d2, -d2))
    dp_deta = -(dp_dcut1 + dp_dcut2)
    nll = -np.log(p).sum() / n + 0.5 * ridge * (w @ w)
    coef = -1.0 / (p * n)
    g_eta = coef * dp_deta
    g_cut1 = float(np.sum(coef * dp_dcut1))
    g_cut2 = float(np.sum(coef * dp_dcut2))
    grad_w = x.T @ g_eta + ridge * w
    return nll, grad_w, g_cut1 + g_cut2, g_cut2 * gap


def init_ordinal(h, labeled_sample, seed, *, max_iters=3000, lr=0.05, ridge=1e-4) -> ScorerParams:
    """Fit a linear ordinal scorer on tile features from a small labeled sample.

    ``labeled_sample`` is a list of ``(tile_id, class)`` with classes
    uninhabited < rural < urban (names or 0/1/2).  The latent ``x.w`` is
    fitted with a two-cut-point cumulative logit model by Adam; the scorer's
    raw value is ``x.w - cut_1``, so tiles above the uninhabited cut point
    get raw > 0.
    """
    if not labeled_sample:
        raise ConfigError("labeled sample is empty")
    idx, y = [], []
    for tid, label in labeled_sample:
        if tid not in h.tile_index:
            raise IntegrityError(f"labeled tile {tid!r} not in hierarchy")
        idx.append(h.tile_index[tid])
        y.append(_class_index(label))
    y = np.array(y)
    if len(np.unique(y)) < 2:
        raise DegenerateError(f"labeled sample has a single class ({ORDINAL_CLASSES[y[0]]})")
    x = h.features[np.array(idx)]
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd[sd == 0] = 1.0
    z = (x - mu) / sd

    rng = np.random.default_rng(seed)
    params = np.concatenate([rng.normal(0.0, 0.01, size=h.feature_dim), [-1.0, np.log(2.0)]])
    opt = Adam(lr)
    f = h.feature_dim
    for _ in range(max_iters):
        _, gw, gt, gd = _ordinal_nll(params[:f], params[f], params[f + 1], z, y, ridge)
        params = opt.step(params, np.concatenate([gw, [gt, gd]]))
    nll, *_ = _ordinal_nll(params[:f], params[f], params[f + 1], z, y, ridge)
    log.debug("ordinal init: nll %.6f after %d iterations", nll, max_iters)

    w_std, tau1 = params[:f], params[f]
    # undo standardization: z.w = x.(w/sd) - mu.(w/sd)
    w = w_std / sd
    bias = -float(mu @ w) - tau1
    return ScorerParams(LINEAR_FEATURES, np.concatenate([[bias], w]))


# ---------------------------------------------------------------- checkpoint io

PARAMS_MAGIC = "# powercal scorer params v1"


def save_params(params: ScorerParams, path) -> None:
    lines = [PARAMS_MAGIC, f"kind={params.kind}", f"n={params.theta.size}"]
    lines += [repr(float(v)) for v in params.theta]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_params(path) -> ScorerParams:
    path = Path(path)
    lines = [ln.strip() for ln in path.read_text(encoding="utf-8").splitlines()]
    if not lines or lines[0] != PARAMS_MAGIC:
        raise ParseError(path, 1, "not a powercal parameter checkpoint")
    header = {}
    for lineno in (2, 3):
        if lineno > len(lines) or "=" not in lines[lineno - 1]:
            raise ParseError(path, lineno, "expected key=value header")
        k, v = lines[lineno - 1].split("=", 1)
        header[k] = v
    try:
        n = int(header["n"])
        kind = header["kind"]
    except (KeyError, ValueError):
        raise ParseError(path, 2, "header needs kind= and n=") from None
    values = []
    for lineno, text in enumerate(lines[3:], start=4):
        if not text:
            continue
        try:
            values.append(float(text))
        except ValueError:
            raise ParseError(path, lineno, f"cannot parse {text!r}") from None
    if len(values) != n:
        raise ParseError(path, len(lines), f"expected {n} values, got {len(values)}")
    return ScorerParams(kind, np.array(values))
