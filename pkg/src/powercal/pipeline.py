"""Init -> calibrate -> evaluate, as run by the ``pipeline`` command."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .calibration import TrainConfig, TraceRow, train
from .errors import ConfigError
from .evaluation import EvalReport, evaluate_report, split_districts
from .regions import RegionHierarchy
from .scorer import (
    FREE_PER_TILE,
    LINEAR_FEATURES,
    ScorerParams,
    init_noisy_proxy,
    init_ordinal,
    init_uniform,
    score,
)
from .synth import label_sample

log = logging.getLogger(__name__)

INITS = ("ordinal", "noisy", "uniform")


def restrict(params: ScorerParams, h: RegionHierarchy, sub: RegionHierarchy) -> ScorerParams:
    """Parameters of ``params`` that apply to the sub-hierarchy ``sub``."""
    if params.kind == LINEAR_FEATURES:
        return params.copy()
    idx = np.array([h.tile_index[t] for t in sub.tile_ids], dtype=np.intp)
    return ScorerParams(FREE_PER_TILE, params.theta[idx])


def merge(params: ScorerParams, h: RegionHierarchy, sub_params: ScorerParams, sub: RegionHierarchy) -> ScorerParams:
    """Write parameters trained on ``sub`` back into full-hierarchy params."""
    if params.kind == LINEAR_FEATURES:
        return sub_params.copy()
    theta = params.theta.copy()
    idx = np.array([h.tile_index[t] for t in sub.tile_ids], dtype=np.intp)
    theta[idx] = sub_params.theta
    return ScorerParams(FREE_PER_TILE, theta)


def initial_params(h, init, seed, train_ids=None, noise_sigma=0.5, label_count=1000):
    """Initial scorer for ``h``; ordinal labels are drawn from training districts only."""
    if init == "noisy":
        return init_noisy_proxy(h, noise_sigma, seed)
    if init == "uniform":
        return init_uniform(h, FREE_PER_TILE)
    if init == "ordinal":
        sample = label_sample(h, label_count, seed, set(train_ids) if train_ids is not None else None)
        return init_ordinal(h.without_truth(), sample, seed)
    raise ConfigError(f"unknown init {init!r}; expected one of {', '.join(INITS)}")


@dataclass
class PipelineResult:
    initial: ScorerParams
    params: ScorerParams
    trace: list[TraceRow] | None
    report: EvalReport
    train_ids: list[str]
    test_ids: list[str]


def run_pipeline(
    h: RegionHierarchy,
    cfg: TrainConfig,
    *,
    ablate="full",
    init="ordinal",
    seed=0,
    test_frac=0.2,
    split_seed=None,
    noise_sigma=0.5,
    label_count=1000,
    params0: ScorerParams | None = None,
) -> PipelineResult:
    """Split districts, initialize, train on the training districts (with
    held-out values stripped) and evaluate on the test districts.

    ``ablate='none'`` skips training and evaluates the initial scorer.
    """
    train_ids, test_ids = split_districts(h, test_frac, seed if split_seed is None else split_seed)
    h_train = h.subset(train_ids).without_truth()
    h_test = h.subset(test_ids)
    p0 = params0 if params0 is not None else initial_params(h, init, seed, train_ids, noise_sigma, label_count)

    trace = None
    params = p0
    if ablate != "none":
        result = train(restrict(p0, h, h_train), h_train, cfg)
        params = merge(p0, h, result.params, h_train)
        trace = result.trace
    report = evaluate_report(score(restrict(params, h, h_test), h_test), h_test, model=ablate)
    return PipelineResult(p0, params, trace, report, train_ids, test_ids)
