"""Two-stage training orchestration.

Stage 1 fits the nuisance pair (skipped or reduced for the single-stage
learners); stage 2 trains the target generative model on the chosen
meta-learner risk, jointly for both arms, with an exponential moving
average of the target weights used for evaluation. The optional "linear"
restriction collapses the target's conditioning trunk to one affine layer
while the nuisance trunk stays unrestricted.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import torch

from .data import PODataset
from .errors import NumericalGuardError, TrainingDivergedError
from .freezing import Frozen, freeze
from .genmodels import ArchConfig, GenerativeModel, build_model
from .genmodels.cgan import CGANModel, adversarial_step
from .losses import Batch, LossKind, batch_loss
from .nuisance import (
    NuisanceConfig,
    NuisanceEstimates,
    fit_nuisance,
    fit_propensity_only,
)

__all__ = [
    "EMAState",
    "TrainConfig",
    "TrainResult",
    "default_train_config",
    "ema_update",
    "freeze",
    "random_grid",
    "train_two_stage",
]


@dataclass(frozen=True)
class EMAState:
    """Exponential moving average of a flat parameter vector."""

    shadow: torch.Tensor
    decay: float

    def __post_init__(self):
        if not 0.0 <= self.decay < 1.0:
            raise ValueError("decay must lie in [0, 1)")


def ema_update(state: EMAState, live_params: torch.Tensor) -> EMAState:
    """shadow <- decay * shadow + (1 - decay) * live, elementwise."""
    live = torch.as_tensor(live_params, dtype=torch.float64).reshape(-1)
    if live.shape != state.shadow.shape:
        raise ValueError(
            f"parameter dimension mismatch: shadow {tuple(state.shadow.shape)}, "
            f"live {tuple(live.shape)}"
        )
    shadow = state.decay * state.shadow + (1.0 - state.decay) * live
    return EMAState(shadow=shadow, decay=state.decay)


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for both stages.

    Defaults mirror the tuning-table values for the synthetic scale; the
    nuisance (stage-1) architecture is configured separately from the
    target so the nuisance class can be richer than the target class.
    """

    stage1: NuisanceConfig = field(default_factory=NuisanceConfig)
    target_arch: ArchConfig = field(default_factory=ArchConfig)
    stage2_optimizer: str = "adamw"
    stage2_lr: float = 1e-3
    stage2_batch_size: int = 64
    stage2_epochs: int = 100
    ema_lambda: float = 0.995
    n_mc: int = 1
    seed: int = 0
    target_restriction: str = "full"
    cross_fitting: bool = False

    def __post_init__(self):
        if not 0.0 <= self.ema_lambda < 1.0:
            raise ValueError("ema_lambda must lie in [0, 1)")
        if self.stage2_epochs <= 0 or self.stage1.epochs <= 0:
            raise ValueError("epoch counts must be positive")
        if self.n_mc < 1:
            raise ValueError("n_mc must be >= 1")


_STAGE2_DEFAULTS = {
    # family: (optimizer, lr, target-arch overrides)
    "cnf": ("adamw", 1e-3, {"noise_reg_y": 0.01}),
    "cgan": ("adamw", 1e-4, {"gan_hidden": 5}),
    "cvae": ("sgd", 1e-3, {"d_z": 3, "vae_hidden": 10}),
    "cdm": ("sgd", 5e-3, {"n_steps": 100, "eps_hidden": 10}),
}


def default_train_config(
    family: str,
    seed: int = 0,
    epochs: int = 100,
    restriction: str = "full",
    clip_floor: float = 0.1,
) -> TrainConfig:
    """Tuning-table defaults for one generative family at the synthetic scale."""
    if family not in _STAGE2_DEFAULTS:
        raise ValueError(f"unknown family {family!r}")
    opt, lr, overrides = _STAGE2_DEFAULTS[family]
    stage1 = NuisanceConfig(
        family=family,
        arch=ArchConfig(),
        epochs=epochs,
        batch_size=64,
        lr=1e-3,
        momentum=0.9,
        optimizer="sgd",
        clip_floor=clip_floor,
        seed=seed,
    )
    return TrainConfig(
        stage1=stage1,
        target_arch=replace(ArchConfig(), **overrides),
        stage2_optimizer=opt,
        stage2_lr=lr,
        stage2_batch_size=64,
        stage2_epochs=epochs,
        seed=seed,
        target_restriction=restriction,
    )


@dataclass
class TrainResult:
    nuisance: NuisanceEstimates
    target: GenerativeModel  # evaluation model (EMA weights loaded)
    ema_params: torch.Tensor
    final_params: torch.Tensor
    history: list[float]


def _check_class_nesting(nuis: NuisanceEstimates, target: GenerativeModel) -> None:
    """Structural form of the target-within-nuisance heuristic: when both
    stages share a family, the target trunk must not be strictly more
    expressive than the nuisance trunk."""
    outcome = nuis.outcome_model
    if outcome is None or getattr(outcome, "family", None) != target.family:
        return
    nuis_restriction = getattr(outcome._conditioner, "restriction", "full")
    tgt_restriction = getattr(target._conditioner, "restriction", "full")
    if isinstance(target, CGANModel):
        tgt_restriction = target.cond_gen.restriction
        nuis_restriction = outcome.cond_gen.restriction
    if nuis_restriction == "linear" and tgt_restriction == "full":
        raise ValueError(
            "target conditioning trunk is more expressive than the nuisance trunk; "
            "the target class must stay within the nuisance class"
        )


def _cgan_stage2_step(
    model: CGANModel,
    nuis: NuisanceEstimates,
    batch: Batch,
    learner: LossKind,
    n_mc: int,
    opt_disc,
    opt_gen,
) -> float:
    """Weighted adversarial step for one batch, jointly over both arms.

    Each sample's factual term carries its learner weight; the pseudo term
    (when the learner has one) is appended as an extra row with the
    complement weight and the same conditioning input.
    """
    total = 0.0
    cond = batch.x if learner is LossKind.PLUG_IN else batch.v
    for a in (0, 1):
        ind = (batch.a_obs == float(a)).to(torch.float64)
        ys, vs, ws = [batch.y], [cond], []
        if learner is LossKind.PLUG_IN:
            ws.append(ind)
        elif learner is LossKind.IPTW:
            with torch.no_grad():
                pi = nuis.propensity(batch.x.numpy(), a)
            ws.append(ind / pi)
        elif learner in (LossKind.RA, LossKind.GDR):
            if learner is LossKind.GDR:
                with torch.no_grad():
                    pi = nuis.propensity(batch.x.numpy(), a)
                w = ind / pi
                pseudo_w = 1.0 - w
            else:
                w = ind
                pseudo_w = 1.0 - ind
            ws.append(w)
            draws = nuis.sample_outcomes(batch.x.numpy(), a, n_mc)
            ys.append(draws.reshape(batch.n * n_mc, -1))
            vs.append(cond.repeat_interleave(n_mc, dim=0))
            ws.append(pseudo_w.repeat_interleave(n_mc) / n_mc)
        y_all = torch.cat(ys)
        v_all = torch.cat(vs)
        w_all = torch.cat(ws)
        d_val, _ = adversarial_step(model, y_all, v_all, a, w_all, opt_disc, opt_gen)
        total += d_val
    return total


def train_two_stage(
    ds: PODataset,
    learner: LossKind,
    family: str,
    cfg: TrainConfig,
    progress: Optional[Callable[[int, float], None]] = None,
) -> TrainResult:
    """Run the full two-stage pipeline for one learner/family pair.

    The plug-in and propensity-weighted learners are single-stage: no
    outcome nuisance is fitted (the latter still fits a propensity head).
    The adjusted and bias-corrected learners fit the full nuisance pair on
    the same training data, freeze it, and train the target against the
    chosen risk. Evaluation uses the EMA weights.
    """
    if len(np.unique(ds.a)) < 2:
        raise ValueError("both treatment arms must be present")
    torch.manual_seed(cfg.seed)

    stage1 = replace(cfg.stage1, family=cfg.stage1.family or family, seed=cfg.seed)
    fit_rng = np.random.default_rng(cfg.seed + 3)

    def fit_stage1(subset: PODataset) -> NuisanceEstimates:
        if learner is LossKind.PLUG_IN:
            return NuisanceEstimates(None, None, clip_floor=stage1.clip_floor)
        if learner is LossKind.IPTW:
            return fit_propensity_only(subset, stage1)
        return fit_nuisance(subset, stage1)

    # fold -> (row indices the fold's nuisance serves, its estimates);
    # same-data two-stage fitting by default, two-fold cross-fitting as an
    # ablation (each fold's nuisance is fitted on the complement)
    if cfg.cross_fitting and learner is not LossKind.PLUG_IN:
        perm = fit_rng.permutation(ds.n)
        fold_rows = [perm[: ds.n // 2], perm[ds.n // 2 :]]
        folds = [
            (fold_rows[0], fit_stage1(ds.subset(fold_rows[1]))),
            (fold_rows[1], fit_stage1(ds.subset(fold_rows[0]))),
        ]
    else:
        folds = [(np.arange(ds.n), fit_stage1(ds))]
    nuis = folds[0][1]

    # plug-in conditions on the full covariates; the others condition on V
    cond_dim = ds.d_x if learner is LossKind.PLUG_IN else ds.d_v
    target_arch = replace(cfg.target_arch, restriction=cfg.target_restriction)
    target = build_model(family, cond_dim, ds.d_y, target_arch, seed=cfg.seed + 1)
    if learner.needs_outcome_nuisance:
        _check_class_nesting(nuis, target)

    if isinstance(target, CGANModel):
        opt_disc = _stage2_optimizer(target.cond_disc.parameters(), cfg)
        opt_gen = _stage2_optimizer(target.cond_gen.parameters(), cfg)
    else:
        opt = _stage2_optimizer(target.parameters(), cfg)

    ema = EMAState(shadow=target.flat_params(), decay=cfg.ema_lambda)
    rng = np.random.default_rng(cfg.seed + 2)
    stage1_hashes = [_nuisance_hashes(f[1]) for f in folds]
    history: list[float] = []

    target.train()
    for epoch in range(cfg.stage2_epochs):
        # batches never mix folds, so each batch sees its own fold's nuisance
        jobs: list[tuple[np.ndarray, NuisanceEstimates]] = []
        for rows, fold_nuis in folds:
            order = rows[rng.permutation(rows.size)]
            for start in range(0, rows.size, cfg.stage2_batch_size):
                jobs.append((order[start : start + cfg.stage2_batch_size], fold_nuis))
        if len(folds) > 1:
            jobs = [jobs[i] for i in rng.permutation(len(jobs))]
        epoch_value = 0.0
        for idx, fold_nuis in jobs:
            batch = Batch.from_dataset(ds, idx)
            try:
                if isinstance(target, CGANModel):
                    value = _cgan_stage2_step(
                        target, fold_nuis, batch, learner, cfg.n_mc, opt_disc, opt_gen
                    )
                else:
                    total = torch.zeros((), dtype=torch.float64)
                    for a in (0, 1):
                        total = total + batch_loss(
                            learner, target, fold_nuis, batch, a, n_mc=cfg.n_mc
                        ).value
                    opt.zero_grad()
                    (-total).backward()
                    opt.step()
                    value = float(total.detach())
            except NumericalGuardError as exc:
                raise TrainingDivergedError(epoch, f"epoch {epoch}: {exc}") from exc
            ema = ema_update(ema, target.flat_params())
            epoch_value += value * len(idx)
        epoch_value /= ds.n
        if not math.isfinite(epoch_value):
            raise TrainingDivergedError(epoch)
        history.append(epoch_value)
        if progress is not None:
            progress(epoch, epoch_value)

    if [_nuisance_hashes(f[1]) for f in folds] != stage1_hashes:
        raise RuntimeError("stage-2 training modified stage-1 parameters")

    final_params = target.flat_params()
    target.load_flat_params(ema.shadow)
    target.eval()
    return TrainResult(
        nuisance=nuis,
        target=target,
        ema_params=ema.shadow.clone(),
        final_params=final_params,
        history=history,
    )


def _stage2_optimizer(params, cfg: TrainConfig):
    params = list(params)
    if cfg.stage2_optimizer == "adamw":
        return torch.optim.AdamW(params, lr=cfg.stage2_lr)
    if cfg.stage2_optimizer == "sgd":
        return torch.optim.SGD(params, lr=cfg.stage2_lr, momentum=0.9)
    raise ValueError(f"unknown optimizer {cfg.stage2_optimizer!r}")


def _nuisance_hashes(nuis: NuisanceEstimates) -> tuple:
    hashes = []
    for component in (nuis.outcome_model, nuis.propensity_model):
        if isinstance(component, Frozen):
            hashes.append(component.frozen_hash())
    return tuple(hashes)


def random_grid(space: dict[str, list], n_runs: int, seed: int = 0) -> list[dict]:
    """Random draw of hyperparameter combinations from declared ranges.

    Draws without replacement from the full grid when it is small enough,
    uniformly with replacement otherwise.
    """
    keys = sorted(space)
    combos = list(itertools.product(*(space[k] for k in keys)))
    rng = np.random.default_rng(seed)
    if len(combos) <= n_runs:
        chosen = combos
    else:
        idx = rng.choice(len(combos), size=n_runs, replace=False)
        chosen = [combos[i] for i in idx]
    return [dict(zip(keys, c)) for c in chosen]
