"""Power-law calibration of per-tile scores over administrative hierarchies."""

from .calibration import (
    TrainConfig,
    aggregate,
    composite_loss,
    inter_loss,
    intra_loss,
    select_neighbors,
    train,
)
from .evaluation import evaluate, evaluate_report, l1_normalize, r_squared
from .powerlaw import ParetoShape, expected_size, fit_shape, preset_shape, share_targets
from .regions import RegionHierarchy, eligible_districts, load_hierarchy, save_hierarchy
from .scorer import ScorerParams, init_noisy_proxy, init_ordinal, score
from .synth import SynthConfig, benchmark_default, generate_country

__version__ = "0.1.0"
