"""Batch estimators of the four meta-learner risks.

All four losses are reported in "maximize" orientation for the explicit-
density and evidence-bound families; the adversarial family splits the same
weighted terms into discriminator/generator objectives at the optimizer
layer. Propensity weights use clipped values everywhere, one weight per
row; pseudo-outcomes are resampled freshly on every call and never carry
gradients into nuisance parameters.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .data import PODataset
from .errors import CapabilityError


class LossKind(enum.Enum):
    PLUG_IN = "plugin"
    RA = "ra"
    IPTW = "iptw"
    GDR = "gdr"

    @property
    def needs_outcome_nuisance(self) -> bool:
        return self in (LossKind.RA, LossKind.GDR)

    @property
    def needs_propensity_nuisance(self) -> bool:
        return self in (LossKind.IPTW, LossKind.GDR)

    @classmethod
    def parse(cls, name: str) -> "LossKind":
        for kind in cls:
            if kind.value == name.lower():
                return kind
        raise ValueError(f"unknown learner {name!r}; expected one of "
                         f"{[k.value for k in cls]}")


def optimization_direction(family: str) -> str:
    """Whether a family maximizes the risk or plays the adversarial game."""
    return "min-max" if family == "cgan" else "maximize"


@dataclass(frozen=True)
class Batch:
    """One minibatch of observational rows as float64 tensors.

    ``row_weights`` reweights the empirical average (uniform when None);
    enumeration oracles pass exact atom probabilities here.
    """

    x: torch.Tensor  # (B, d_x) nuisance-side covariates
    v: torch.Tensor  # (B, d_v) target-side conditioning inputs
    a_obs: torch.Tensor  # (B,)
    y: torch.Tensor  # (B, d_y)
    row_weights: Optional[torch.Tensor] = None

    @classmethod
    def from_dataset(cls, ds: PODataset, idx: Optional[np.ndarray] = None) -> "Batch":
        if idx is None:
            idx = np.arange(ds.n)
        return cls(
            x=torch.as_tensor(ds.x[idx], dtype=torch.float64),
            v=torch.as_tensor(ds.v[idx], dtype=torch.float64),
            a_obs=torch.as_tensor(ds.a[idx], dtype=torch.float64),
            y=torch.as_tensor(ds.y[idx], dtype=torch.float64),
        )

    @property
    def n(self) -> int:
        return self.y.shape[0]

    def omega(self) -> torch.Tensor:
        if self.row_weights is not None:
            return torch.as_tensor(self.row_weights, dtype=torch.float64).reshape(-1)
        return torch.full((self.n,), 1.0 / self.n, dtype=torch.float64)


@dataclass(frozen=True)
class BatchLossValue:
    """Scalar batch risk (maximize orientation) plus the per-row weights and
    the pseudo-outcome draws that produced it."""

    value: torch.Tensor
    weights: torch.Tensor
    pseudo_outcomes: Optional[torch.Tensor] = None

    def __float__(self) -> float:
        return float(self.value.detach())


def _indicator(batch: Batch, a: int) -> torch.Tensor:
    return (batch.a_obs == float(a)).to(torch.float64)


def _pseudo_terms(
    model,
    nuis,
    batch: Batch,
    a: int,
    n_mc: int,
    generator: Optional[torch.Generator],
    exact_inner: bool,
) -> tuple[torch.Tensor, Optional[torch.Tensor]]:
    """Per-row estimate of the inner integral of the log-generative term
    against the fitted outcome law.

    Monte Carlo with fresh draws by default; the exact inner sum when the
    nuisance exposes an enumerable support.
    """
    if exact_inner:
        outcome = nuis.outcome_model
        if not hasattr(outcome, "support_and_probs"):
            raise CapabilityError("exact inner sums need an enumerable outcome nuisance")
        support, probs = outcome.support_and_probs(batch.x.numpy(), a)
        n_y = support.shape[0]
        y_rep = torch.as_tensor(support, dtype=torch.float64).repeat(batch.n, 1)
        v_rep = batch.v.repeat_interleave(n_y, dim=0)
        a_rep = torch.full((batch.n * n_y,), float(a), dtype=torch.float64)
        terms = model.log_gen_terms(y_rep, v_rep, a_rep, n_mc=n_mc, generator=generator)
        return (probs * terms.reshape(batch.n, n_y)).sum(dim=1), None

    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    draws = nuis.sample_outcomes(batch.x.numpy(), a, n_mc, generator=generator)
    y_rep = draws.reshape(batch.n * n_mc, -1)
    v_rep = batch.v.repeat_interleave(n_mc, dim=0)
    a_rep = torch.full((batch.n * n_mc,), float(a), dtype=torch.float64)
    terms = model.log_gen_terms(y_rep, v_rep, a_rep, n_mc=1, generator=generator)
    return terms.reshape(batch.n, n_mc).mean(dim=1), draws


def plugin_loss(
    model,
    batch: Batch,
    a: int,
    n_mc: int = 1,
    generator: Optional[torch.Generator] = None,
) -> BatchLossValue:
    """Factual-only risk: own-arm log-generative terms conditioned on the
    full covariates."""
    ind = _indicator(batch, a)
    omega = batch.omega()
    if ind.sum() == 0:
        return BatchLossValue(value=torch.zeros((), dtype=torch.float64), weights=ind)
    terms = model.log_gen_terms(batch.y, batch.x, a, n_mc=n_mc, generator=generator)
    value = (omega * ind * terms).sum()
    return BatchLossValue(value=value, weights=ind)


def iptw_loss(
    model,
    nuis,
    batch: Batch,
    a: int,
    n_mc: int = 1,
    generator: Optional[torch.Generator] = None,
) -> BatchLossValue:
    """Propensity-weighted factual risk with clipped weights."""
    ind = _indicator(batch, a)
    omega = batch.omega()
    with torch.no_grad():
        pi = nuis.propensity(batch.x.numpy(), a)
    w = ind / pi
    terms = model.log_gen_terms(batch.y, batch.v, a, n_mc=n_mc, generator=generator)
    value = (omega * w * terms).sum()
    return BatchLossValue(value=value, weights=w)


def ra_loss(
    model,
    nuis,
    batch: Batch,
    a: int,
    n_mc: int = 1,
    generator: Optional[torch.Generator] = None,
    exact_inner: bool = False,
) -> BatchLossValue:
    """Two-stage adjusted risk: factual terms on own-arm rows plus fitted
    outcome-law integrals on opposite-arm rows."""
    ind = _indicator(batch, a)
    omega = batch.omega()
    terms = model.log_gen_terms(batch.y, batch.v, a, n_mc=n_mc, generator=generator)
    pseudo, draws = _pseudo_terms(model, nuis, batch, a, n_mc, generator, exact_inner)
    value = (omega * (ind * terms + (1.0 - ind) * pseudo)).sum()
    return BatchLossValue(value=value, weights=ind, pseudo_outcomes=draws)


def gdr_loss(
    model,
    nuis,
    batch: Batch,
    a: int,
    n_mc: int = 1,
    generator: Optional[torch.Generator] = None,
    exact_inner: bool = False,
) -> BatchLossValue:
    """One-step bias-corrected risk: propensity-weighted factual terms plus
    complement-weighted outcome-law integrals, one clipped weight per row.

    Nuisance parameters receive no gradients: weights and pseudo-outcomes
    are produced by frozen models under no-grad.
    """
    ind = _indicator(batch, a)
    omega = batch.omega()
    with torch.no_grad():
        pi = nuis.propensity(batch.x.numpy(), a)
    w = ind / pi
    terms = model.log_gen_terms(batch.y, batch.v, a, n_mc=n_mc, generator=generator)
    pseudo, draws = _pseudo_terms(model, nuis, batch, a, n_mc, generator, exact_inner)
    value = (omega * (w * terms + (1.0 - w) * pseudo)).sum()
    return BatchLossValue(value=value, weights=w, pseudo_outcomes=draws)


def batch_loss(
    kind: LossKind,
    model,
    nuis,
    batch: Batch,
    a: int,
    n_mc: int = 1,
    generator: Optional[torch.Generator] = None,
) -> BatchLossValue:
    """Dispatch a meta-learner risk by kind."""
    if kind is LossKind.PLUG_IN:
        return plugin_loss(model, batch, a, n_mc=n_mc, generator=generator)
    if kind is LossKind.IPTW:
        return iptw_loss(model, nuis, batch, a, n_mc=n_mc, generator=generator)
    if kind is LossKind.RA:
        return ra_loss(model, nuis, batch, a, n_mc=n_mc, generator=generator)
    if kind is LossKind.GDR:
        return gdr_loss(model, nuis, batch, a, n_mc=n_mc, generator=generator)
    raise ValueError(f"unknown loss kind {kind!r}")


# ---------------------------------------------------------------------------
# Equivalence of the bias-corrected and propensity-weighted learners at the
# nuisance fixed point
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EquivalenceReport:
    relative_gradient_diff: float
    equivalent: bool
    tolerance: float
    iptw_gradient_norm: float


def _gauss_legendre_panels(boundaries: torch.Tensor, n_nodes: int):
    """Per-row Gauss-Legendre nodes/weights on consecutive panels.

    boundaries: (B, n_b) ascending per row. Returns nodes and weights of
    shape (B, (n_b - 1) * n_nodes).
    """
    xi, wgl = np.polynomial.legendre.leggauss(n_nodes)
    xi_t = torch.as_tensor(xi, dtype=torch.float64)
    w_t = torch.as_tensor(wgl, dtype=torch.float64)
    lo = boundaries[:, :-1].unsqueeze(-1)
    hi = boundaries[:, 1:].unsqueeze(-1)
    half = 0.5 * (hi - lo)
    nodes = lo + half * (xi_t + 1.0)
    weights = half * w_t
    return nodes.reshape(boundaries.shape[0], -1), weights.reshape(boundaries.shape[0], -1)


def _flow_outcome_quadrature(
    outcome_model,
    x: torch.Tensor,
    a: int,
    n_nodes: int = 16,
    n_tail_panels: int = 4,
    z_max: float = 9.0,
):
    """Quadrature of integrals against a 1-D flow nuisance density.

    Returns outcome nodes (B, M, 1) and weights (B, M) such that
    sum_k W[i, k] h(y[i, k]) integrates h against xi_hat(. | x_i) to
    near machine precision (panels are aligned with the spline knots).
    """
    from .genmodels import splines

    head = outcome_model.head
    if head.d_y != 1:
        raise CapabilityError("flow quadrature supports 1-D outcomes")
    with torch.no_grad():
        theta = outcome_model.condition(x, a)
        params0 = head.layout.get(theta, "dim0")
        raw = params0[..., : head.spline_size]
        kx, _, _ = splines._knots(raw, head.n_knots, head.bound)
        b = x.shape[0]
        lo_tail = torch.linspace(-z_max, -head.bound, n_tail_panels + 1, dtype=torch.float64)
        hi_tail = torch.linspace(head.bound, z_max, n_tail_panels + 1, dtype=torch.float64)
        boundaries = torch.cat(
            [lo_tail[:-1].expand(b, -1), kx, hi_tail[1:].expand(b, -1)], dim=1
        )
        z_nodes, w_nodes = _gauss_legendre_panels(boundaries, n_nodes)
        phi = torch.exp(-0.5 * z_nodes**2) / np.sqrt(2.0 * np.pi)
        weights = w_nodes * phi
        m = z_nodes.shape[1]
        theta_rep = theta.unsqueeze(1).expand(b, m, theta.shape[1]).reshape(b * m, -1)
        y_nodes = head.transform(theta_rep, z_nodes.reshape(b * m, 1)).reshape(b, m, 1)
    return y_nodes, weights


def _flat_grad(value: torch.Tensor, params: list[torch.Tensor]) -> torch.Tensor:
    grads = torch.autograd.grad(value, params, allow_unused=True)
    flat = []
    for p, g in zip(params, grads):
        flat.append(torch.zeros_like(p).reshape(-1) if g is None else g.reshape(-1))
    return torch.cat(flat)


def iptw_equivalence_check(
    nuis,
    batch: Batch,
    a: int,
    target=None,
    tol: float = 1e-6,
    n_mc_unused: int = 1,
) -> EquivalenceReport:
    """Verify that the bias-corrected and propensity-weighted risks have
    identical target-parameter gradients when the target equals the frozen
    outcome nuisance and V = X.

    The complement-weighted term is integrated exactly (knot-aligned
    quadrature against the nuisance flow), under which its gradient
    vanishes at the nuisance fixed point; with any other target the report
    comes back non-equivalent.
    """
    if batch.v.shape != batch.x.shape or not torch.equal(batch.v, batch.x):
        raise ValueError("the equivalence check requires V = X")
    outcome = nuis.outcome_model
    if outcome is None or getattr(outcome, "family", None) != "cnf":
        raise CapabilityError("the equivalence check needs a flow outcome nuisance")
    if target is None:
        target = outcome.clone_unfrozen()
    target.eval()
    params = [p for p in target.parameters() if p.requires_grad]

    ind = _indicator(batch, a)
    omega = batch.omega()
    with torch.no_grad():
        pi = nuis.propensity(batch.x.numpy(), a)
    w = ind / pi

    terms = target.log_gen_terms(batch.y, batch.v, a, n_mc=1)
    value_iptw = (omega * w * terms).sum()
    grad_iptw = _flat_grad(value_iptw, params)

    y_nodes, q_weights = _flow_outcome_quadrature(outcome, batch.x, a)
    m = y_nodes.shape[1]
    v_rep = batch.v.repeat_interleave(m, dim=0)
    a_rep = torch.full((batch.n * m,), float(a), dtype=torch.float64)
    logp = target.log_gen_terms(y_nodes.reshape(batch.n * m, 1), v_rep, a_rep, n_mc=1)
    pseudo = (q_weights * logp.reshape(batch.n, m)).sum(dim=1)

    terms2 = target.log_gen_terms(batch.y, batch.v, a, n_mc=1)
    value_gdr = (omega * (w * terms2 + (1.0 - w) * pseudo)).sum()
    grad_gdr = _flat_grad(value_gdr, params)

    denom = float(grad_iptw.norm())
    rel = float((grad_gdr - grad_iptw).norm()) / max(denom, 1e-300)
    return EquivalenceReport(
        relative_gradient_diff=rel,
        equivalent=rel <= tol,
        tolerance=tol,
        iptw_gradient_norm=denom,
    )
