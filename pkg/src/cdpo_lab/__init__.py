"""Doubly-robust meta-learners for conditional distributions of potential
outcomes.

The package provides: synthetic and enumerable benchmark data (``data``),
four conditional generative families behind one API (``genmodels``),
stage-1 nuisance estimation (``nuisance``), the four meta-learner batch
risks (``losses``), two-stage training with EMA smoothing (``train``), an
exact numerical verification bench for the estimator theory
(``orthocheck``), transport and log-probability metrics (``metrics``),
and a command-line harness (``cli``).
"""

from .data import (
    DiscreteToyDGP,
    MoonsConfig,
    ObservationalSample,
    PODataset,
    apply_v_mask,
    enumerate_toy_dgp,
    generate_moons_dataset,
    load_tabular_dataset,
    random_discrete_dgp,
    save_tabular_dataset,
)
from .errors import (
    CapabilityError,
    FrozenModelError,
    NumericalGuardError,
    TrainingDivergedError,
)
from .freezing import freeze
from .genmodels import ArchConfig, GenerativeModel, build_model
from .losses import (
    Batch,
    BatchLossValue,
    LossKind,
    gdr_loss,
    iptw_equivalence_check,
    iptw_loss,
    plugin_loss,
    ra_loss,
)
from .metrics import EvalResult, aggregate_runs, avg_log_prob, empirical_w2, evaluate_w2
from .nuisance import (
    NuisanceConfig,
    NuisanceEstimates,
    bce_loss,
    fit_nuisance,
    predict_propensity,
    sample_pseudo_outcome,
)
from .train import (
    EMAState,
    TrainConfig,
    TrainResult,
    default_train_config,
    ema_update,
    random_grid,
    train_two_stage,
)

__version__ = "0.1.0"
