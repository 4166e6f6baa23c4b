"""Stage-1 nuisance estimation: a conditional outcome model (any of the
four generative families, trained with the factual log-generative loss
jointly for both arms) plus a propensity classifier trained with binary
cross-entropy, co-trained as separate heads on a shared trunk where the
family allows it.

Tabular nuisance models over finite supports are also provided; they fit by
exact frequency counting and are the substrate for convergence oracles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .data import PODataset
from .errors import NumericalGuardError, TrainingDivergedError
from .freezing import Frozen, freeze
from .genmodels import ArchConfig, build_model
from .genmodels.cgan import CGANModel, adversarial_step

_LOGIT_CLAMP = 30.0


def bce_loss(probabilities, labels) -> torch.Tensor:
    """Mean binary cross-entropy -[y log p + (1-y) log(1-p)].

    Probabilities exactly at 0 or 1 with a mismatched label trip a
    numerical guard instead of silently returning infinity.
    """
    p = torch.as_tensor(probabilities, dtype=torch.float64).reshape(-1)
    y = torch.as_tensor(labels, dtype=torch.float64).reshape(-1)
    if p.shape != y.shape:
        raise ValueError("probabilities and labels must have equal length")
    if torch.any((p <= 0.0) & (y > 0.5)) or torch.any((p >= 1.0) & (y < 0.5)):
        raise NumericalGuardError("probability at {0,1} with mismatched label")
    eps = torch.finfo(torch.float64).tiny
    term = y * torch.log(p.clamp_min(eps)) + (1.0 - y) * torch.log((1.0 - p).clamp_min(eps))
    return -term.mean()


class PropensityModel(nn.Module):
    """Classifier x -> P(A=1 | x).

    When a conditioning trunk is supplied, the classifier head consumes the
    trunk's covariate embedding (co-training regularizes both); otherwise it
    owns a small fully-connected network on x.
    """

    def __init__(self, d_x: int, d_h: int = 15, n_hidden: int = 1, trunk=None):
        super().__init__()
        self.d_x = d_x
        self.trunk = trunk
        d_in = d_h if trunk is not None else d_x
        layers: list[nn.Module] = []
        d = d_in
        for _ in range(n_hidden):
            layers += [nn.Linear(d, d_h, dtype=torch.float64), nn.ELU()]
            d = d_h
        layers.append(nn.Linear(d, 1, dtype=torch.float64))
        self.net = nn.Sequential(*layers)

    def head_parameters(self):
        return self.net.parameters()

    def forward(self, x) -> torch.Tensor:
        x = torch.as_tensor(x, dtype=torch.float64).reshape(-1, self.d_x)
        feats = self.trunk.embed(x) if self.trunk is not None else x
        logit = self.net(feats).squeeze(-1)
        return torch.sigmoid(logit.clamp(-_LOGIT_CLAMP, _LOGIT_CLAMP))

    def predict(self, x) -> torch.Tensor:
        self.eval()
        with torch.no_grad():
            return self.forward(x)


@dataclass(frozen=True)
class NuisanceEstimates:
    """Frozen stage-1 pair: outcome-distribution model and propensity model.

    Either component may be absent for the single-stage learners. Clipping
    floors the predicted propensity at prediction time only, so the raw
    calibration stays inspectable through the underlying model.
    """

    outcome_model: Optional[Frozen]
    propensity_model: Optional[Frozen]
    clip_floor: float = 0.1

    def propensity(self, x, a: int) -> torch.Tensor:
        """Clipped propensity max(pi_hat_a(x), clip_floor), shape (B,)."""
        if self.propensity_model is None:
            raise ValueError("no propensity model was fitted")
        p1 = self.propensity_model.predict(x)
        p = p1 if a == 1 else 1.0 - p1
        return torch.clamp(p, min=self.clip_floor)

    def sample_outcomes(
        self, x, a: int, count: int, generator: Optional[torch.Generator] = None
    ) -> torch.Tensor:
        """Fresh draws from xi_hat_a(. | x), shape (B, count, d_y)."""
        if self.outcome_model is None:
            raise ValueError("no outcome nuisance model was fitted")
        if count == 0:
            x_arr = np.atleast_2d(np.asarray(x, dtype=np.float64))
            return torch.empty((x_arr.shape[0], 0, self.outcome_model.d_y), dtype=torch.float64)
        with torch.no_grad():
            return self.outcome_model.sample(x, a, count, generator=generator)


def predict_propensity(est: NuisanceEstimates, x, a: int) -> torch.Tensor:
    """Clipped propensity of arm ``a``; the arm complement is formed before
    clipping."""
    return est.propensity(x, a)


def sample_pseudo_outcome(
    est: NuisanceEstimates, x, a: int, count: int, generator: Optional[torch.Generator] = None
) -> torch.Tensor:
    """Draws from the fitted conditional outcome law (the inner-integral
    Monte Carlo mechanism of the two-stage losses)."""
    return est.sample_outcomes(x, a, count, generator=generator)


# ---------------------------------------------------------------------------
# Neural stage-1 fitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NuisanceConfig:
    """Stage-1 hyperparameters (optimizer defaults follow the stage-1 row of
    the tuning table: SGD with momentum 0.9).

    ``family=None`` defers to the target family at training time."""

    family: Optional[str] = None
    arch: ArchConfig = field(default_factory=ArchConfig)
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    momentum: float = 0.9
    optimizer: str = "sgd"  # "sgd" | "adamw"
    clip_floor: float = 0.1
    bce_weight: float = 1.0
    share_trunk: Optional[bool] = None  # default: share except for adversarial models
    seed: int = 0


def _make_optimizer(params, cfg_opt: str, lr: float, momentum: float):
    params = list(params)
    if cfg_opt == "sgd":
        return torch.optim.SGD(params, lr=lr, momentum=momentum)
    if cfg_opt == "adamw":
        return torch.optim.AdamW(params, lr=lr)
    raise ValueError(f"unknown optimizer {cfg_opt!r}")


def fit_nuisance(ds: PODataset, cfg: NuisanceConfig, progress=None) -> NuisanceEstimates:
    """Fit the stage-1 pair on the full covariates.

    The outcome model is trained on the factual log-generative loss jointly
    for both arms (each sample contributes its own-arm term); the propensity
    head minimizes binary cross-entropy on the same batches. Returns frozen
    estimates.
    """
    if ds.n == 0:
        raise ValueError("dataset is empty")
    if len(np.unique(ds.a)) < 2:
        raise ValueError("single-arm dataset: both treatment arms must be present")
    if cfg.family is None:
        raise ValueError("nuisance family must be set before fitting")

    torch.manual_seed(cfg.seed)
    model = build_model(cfg.family, ds.d_x, ds.d_y, cfg.arch, seed=cfg.seed)
    share = cfg.share_trunk
    if share is None:
        share = cfg.family != "cgan" and cfg.arch.restriction == "full"
    trunk = None
    if share:
        trunk = model.cond_gen if isinstance(model, CGANModel) else model._conditioner
    prop = PropensityModel(ds.d_x, d_h=cfg.arch.d_h, n_hidden=cfg.arch.n_hidden, trunk=trunk)

    x_all = torch.as_tensor(np.array(ds.x), dtype=torch.float64)
    y_all = torch.as_tensor(np.array(ds.y), dtype=torch.float64)
    a_all = torch.as_tensor(np.array(ds.a), dtype=torch.float64)

    rng = np.random.default_rng(cfg.seed)
    model.train()
    prop.train()

    if isinstance(model, CGANModel):
        opt_disc = _make_optimizer(model.cond_disc.parameters(), cfg.optimizer, cfg.lr, cfg.momentum)
        opt_gen = _make_optimizer(model.cond_gen.parameters(), cfg.optimizer, cfg.lr, cfg.momentum)
        opt_prop = _make_optimizer(prop.head_parameters(), cfg.optimizer, cfg.lr, cfg.momentum)
    else:
        opt = _make_optimizer(
            list(model.parameters()) + list(prop.head_parameters()),
            cfg.optimizer,
            cfg.lr,
            cfg.momentum,
        )

    n = ds.n
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb, yb, ab = x_all[idx], y_all[idx], a_all[idx]
            bce = bce_loss(prop(xb), ab)
            if isinstance(model, CGANModel):
                w = torch.ones(len(idx), dtype=torch.float64)
                d_val, _ = adversarial_step(model, yb, xb, ab, w, opt_disc, opt_gen)
                opt_prop.zero_grad()
                (cfg.bce_weight * bce).backward()
                opt_prop.step()
                batch_loss = -d_val + float(bce.detach())
            else:
                fit_term = model.log_gen_terms(yb, xb, ab, n_mc=1).mean()
                loss = -fit_term + cfg.bce_weight * bce
                opt.zero_grad()
                loss.backward()
                opt.step()
                batch_loss = float(loss.detach())
            epoch_loss += batch_loss * len(idx)
        if not math.isfinite(epoch_loss):
            raise TrainingDivergedError(epoch)
        if progress is not None:
            progress(epoch, epoch_loss / n)

    model.eval()
    prop.eval()
    return NuisanceEstimates(
        outcome_model=freeze(model),
        propensity_model=freeze(prop),
        clip_floor=cfg.clip_floor,
    )


def fit_propensity_only(ds: PODataset, cfg: NuisanceConfig) -> NuisanceEstimates:
    """Stage-1 for the propensity-weighted single-stage learner: only the
    classifier is fitted."""
    if len(np.unique(ds.a)) < 2:
        raise ValueError("single-arm dataset: both treatment arms must be present")
    torch.manual_seed(cfg.seed + 1)
    prop = PropensityModel(ds.d_x, d_h=cfg.arch.d_h, n_hidden=cfg.arch.n_hidden)
    opt = _make_optimizer(prop.parameters(), cfg.optimizer, cfg.lr, cfg.momentum)
    x_all = torch.as_tensor(np.array(ds.x), dtype=torch.float64)
    a_all = torch.as_tensor(np.array(ds.a), dtype=torch.float64)
    rng = np.random.default_rng(cfg.seed + 1)
    prop.train()
    for epoch in range(cfg.epochs):
        order = rng.permutation(ds.n)
        for start in range(0, ds.n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss = bce_loss(prop(x_all[idx]), a_all[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            if not math.isfinite(float(loss.detach())):
                raise TrainingDivergedError(epoch)
    prop.eval()
    return NuisanceEstimates(outcome_model=None, propensity_model=freeze(prop), clip_floor=cfg.clip_floor)


# ---------------------------------------------------------------------------
# Tabular nuisance models on finite supports
# ---------------------------------------------------------------------------


def _atom_index(support: np.ndarray, rows: np.ndarray) -> np.ndarray:
    lookup = {tuple(row): k for k, row in enumerate(np.atleast_2d(support))}
    try:
        return np.array([lookup[tuple(r)] for r in np.atleast_2d(rows)], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"row {exc.args[0]} is not an atom of the support") from None


class TabularPropensity(nn.Module):
    """Lookup-table propensity over a finite covariate support."""

    def __init__(self, x_support: np.ndarray, p1: np.ndarray):
        super().__init__()
        self.x_support = np.array(np.atleast_2d(x_support), dtype=np.float64)
        self.register_buffer("p1", torch.as_tensor(np.array(p1), dtype=torch.float64))

    @classmethod
    def fit(cls, ds: PODataset, x_support: np.ndarray) -> "TabularPropensity":
        """Empirical per-atom treatment frequencies (0.5 for unseen atoms)."""
        idx = _atom_index(x_support, ds.x)
        n_x = np.atleast_2d(x_support).shape[0]
        p1 = np.full(n_x, 0.5)
        for k in range(n_x):
            sel = idx == k
            if sel.any():
                p1[k] = float(ds.a[sel].mean())
        return cls(x_support, p1)

    @classmethod
    def from_table(cls, x_support: np.ndarray, p1: np.ndarray) -> "TabularPropensity":
        return cls(x_support, p1)

    def predict(self, x) -> torch.Tensor:
        idx = _atom_index(self.x_support, np.asarray(x, dtype=np.float64))
        return self.p1[torch.as_tensor(idx)]

    forward = predict


class TabularConditionalModel(nn.Module):
    """Lookup-table conditional outcome law over finite supports.

    Serves both as an exact nuisance (built from a DGP's tables) and as a
    frequency-fitted estimator. Exposes the same sampling / log-term API as
    the neural families plus exact inner sums for enumeration oracles.
    """

    family = "tabular"
    has_exact_density = True

    def __init__(self, x_support, y_support, table):
        super().__init__()
        self.x_support = np.array(np.atleast_2d(x_support), dtype=np.float64)
        self.y_support = np.array(np.atleast_2d(y_support), dtype=np.float64)
        table = np.asarray(table, dtype=np.float64)
        if table.shape != (self.x_support.shape[0], 2, self.y_support.shape[0]):
            raise ValueError("table must be (n_x, 2, n_y)")
        if np.any(table < 0) or np.max(np.abs(table.sum(axis=2) - 1.0)) > 1e-9:
            raise ValueError("conditional table must be normalized and nonnegative")
        self.register_buffer("table", torch.as_tensor(table))
        self.d_y = self.y_support.shape[1]
        self.cond_dim = self.x_support.shape[1]

    @classmethod
    def from_dgp(cls, dgp) -> "TabularConditionalModel":
        return cls(dgp.x_support, dgp.y_support, dgp.xi)

    @classmethod
    def fit(cls, ds: PODataset, x_support, y_support) -> "TabularConditionalModel":
        """Per-(x, a) empirical outcome frequencies (uniform if unseen)."""
        xi = _atom_index(x_support, ds.x)
        yi = _atom_index(y_support, ds.y)
        n_x = np.atleast_2d(x_support).shape[0]
        n_y = np.atleast_2d(y_support).shape[0]
        counts = np.zeros((n_x, 2, n_y))
        np.add.at(counts, (xi, ds.a, yi), 1.0)
        totals = counts.sum(axis=2, keepdims=True)
        table = np.where(totals > 0, counts / np.maximum(totals, 1.0), 1.0 / n_y)
        return cls(x_support, y_support, table)

    def probs(self, x, a) -> torch.Tensor:
        idx = torch.as_tensor(_atom_index(self.x_support, np.asarray(x, dtype=np.float64)))
        if isinstance(a, (int, np.integer)):
            arm = torch.full_like(idx, int(a))
        else:
            arm = torch.as_tensor(np.asarray(a), dtype=torch.long).reshape(-1)
        return self.table[idx, arm, :]

    def support_and_probs(self, x, a) -> tuple[np.ndarray, torch.Tensor]:
        """Enumerable inner-sum data: (y_support, per-row probabilities)."""
        return self.y_support, self.probs(x, a)

    def log_gen_terms(self, y, v, a, n_mc: int = 1, generator=None) -> torch.Tensor:
        p = self.probs(v, a)
        yi = _atom_index(self.y_support, np.asarray(y, dtype=np.float64))
        chosen = p[torch.arange(len(yi)), torch.as_tensor(yi)]
        return torch.log(chosen.clamp_min(torch.finfo(torch.float64).tiny))

    def log_density(self, y, v, a) -> torch.Tensor:
        return self.log_gen_terms(y, v, a)

    def sample(self, v, a, count: int, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        if count <= 0:
            raise ValueError("sample count must be positive")
        p = self.probs(v, a)
        gen = generator
        draws = torch.multinomial(p, count, replacement=True, generator=gen)
        support = torch.as_tensor(self.y_support)
        return support[draws]

    def total_variation_to(self, table: np.ndarray) -> float:
        """Max per-(x, a) total-variation distance to a reference table."""
        diff = np.abs(self.table.numpy() - np.asarray(table))
        return float(0.5 * diff.sum(axis=2).max())


def tabular_nuisance(
    dgp,
    exact: bool = True,
    ds: Optional[PODataset] = None,
    clip_floor: float = 0.1,
) -> NuisanceEstimates:
    """Nuisance estimates over a finite-support DGP: exact tables or
    frequency fits from a sample."""
    if exact:
        outcome = TabularConditionalModel.from_dgp(dgp)
        prop = TabularPropensity.from_table(dgp.x_support, dgp.propensity[:, 1])
    else:
        if ds is None:
            raise ValueError("frequency fitting needs a dataset")
        outcome = TabularConditionalModel.fit(ds, dgp.x_support, dgp.y_support)
        prop = TabularPropensity.fit(ds, dgp.x_support)
    return NuisanceEstimates(
        outcome_model=freeze(outcome), propensity_model=freeze(prop), clip_floor=clip_floor
    )
