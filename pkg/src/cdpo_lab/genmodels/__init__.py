"""Four conditional generative families behind one hypernetwork-conditioned
API: sampling plus the per-sample log-generative term every meta-learner
loss consumes."""

from .base import ArchConfig, GenerativeModel, LogGenTerm
from .cdm import CDMModel, DiffusionSchedule
from .cgan import CGANModel, adversarial_step
from .cnf import CNFModel, cnf_log_density
from .conditioner import FULL, LINEAR, Conditioner
from .cvae import CVAEModel
from .checkpoints import load_checkpoint, save_checkpoint

FAMILIES = {
    "cnf": CNFModel,
    "cgan": CGANModel,
    "cvae": CVAEModel,
    "cdm": CDMModel,
}


def build_model(
    family: str,
    cond_dim: int,
    d_y: int,
    arch: ArchConfig | None = None,
    seed: int = 0,
) -> GenerativeModel:
    """Construct a conditional generative model of the given family."""
    try:
        cls = FAMILIES[family]
    except KeyError:
        raise ValueError(f"unknown family {family!r}; expected one of {sorted(FAMILIES)}") from None
    return cls(cond_dim, d_y, arch if arch is not None else ArchConfig(), seed=seed)


def log_gen_term(model: GenerativeModel, y, v, a, n_mc: int = 1) -> LogGenTerm:
    """Per-sample log-generative term for one (outcome, conditioning) pair."""
    return model.log_gen_term(y, v, a, n_mc=n_mc)


def gm_sample(model: GenerativeModel, v, a, count: int):
    """Draw outcomes from the model's conditional law given v."""
    return model.sample(v, a, count)


def condition(model: GenerativeModel, x_or_v, a):
    """Head parameters produced by the conditioning hypernetwork."""
    return model.condition(x_or_v, a)


__all__ = [
    "ArchConfig",
    "GenerativeModel",
    "LogGenTerm",
    "CNFModel",
    "CGANModel",
    "CVAEModel",
    "CDMModel",
    "DiffusionSchedule",
    "Conditioner",
    "FULL",
    "LINEAR",
    "FAMILIES",
    "adversarial_step",
    "build_model",
    "cnf_log_density",
    "condition",
    "gm_sample",
    "log_gen_term",
    "load_checkpoint",
    "save_checkpoint",
]
