"""Conditional normalizing flow with an invertible spline head.

Each outcome dimension is transformed by a monotone rational-quadratic
spline followed by an affine map; for d_y > 1 the spline parameters of
dimension j depend autoregressively on the preceding outcome dimensions
through a small per-sample network whose weights also come from the
conditioner. The base latent is standard normal, so the exact conditional
log-density follows from the change-of-variables formula.
"""

from __future__ import annotations

from typing import Optional

import torch

from ..errors import NumericalGuardError
from .base import (
    ArchConfig,
    GenerativeModel,
    ThetaLayout,
    add_linear,
    std_normal_logpdf,
    theta_linear,
    to_f64,
)
from .conditioner import Conditioner
from . import splines


class CNFHead:
    """Stateless spline-flow head operating on flat parameter vectors."""

    def __init__(self, d_y: int, n_knots: int, bound: float, ar_hidden: int):
        if n_knots < 2:
            raise ValueError("a spline needs at least 2 knots")
        if bound <= 0:
            raise ValueError("the spline box must have positive extent")
        self.d_y = d_y
        self.n_knots = n_knots
        self.bound = bound
        self.ar_hidden = ar_hidden
        self.spline_size = splines.param_size(n_knots)
        layout = ThetaLayout()
        layout.add("dim0", self.spline_size + 2)
        for j in range(1, d_y):
            add_linear(layout, f"ar{j}.in", j, ar_hidden)
            add_linear(layout, f"ar{j}.out", ar_hidden, self.spline_size + 2)
        self.layout = layout
        self.param_count = layout.size

    def _dim_params(self, theta: torch.Tensor, j: int, y_prev: torch.Tensor) -> torch.Tensor:
        if j == 0:
            return self.layout.get(theta, "dim0")
        h = torch.nn.functional.elu(theta_linear(theta, self.layout, f"ar{j}.in", y_prev, self.ar_hidden))
        return theta_linear(theta, self.layout, f"ar{j}.out", h, self.spline_size + 2)

    def _split(self, params: torch.Tensor):
        raw = params[..., : self.spline_size]
        log_scale = params[..., self.spline_size]
        shift = params[..., self.spline_size + 1]
        return raw, log_scale, shift

    def inverse(self, theta: torch.Tensor, y: torch.Tensor):
        """Map outcomes to base latents; returns (z, log|det dz/dy|)."""
        z_dims = []
        logdet = torch.zeros(y.shape[:-1], dtype=y.dtype)
        for j in range(self.d_y):
            params = self._dim_params(theta, j, y[..., :j])
            raw, log_scale, shift = self._split(params)
            u = (y[..., j] - shift) * torch.exp(-log_scale)
            z_j, ld = splines.rq_spline(u, raw, self.n_knots, self.bound, inverse=True)
            z_dims.append(z_j)
            logdet = logdet + ld - log_scale
        return torch.stack(z_dims, dim=-1), logdet

    def transform(self, theta: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        """Generative direction: push base latents through the flow."""
        y_dims: list[torch.Tensor] = []
        for j in range(self.d_y):
            y_prev = (
                torch.stack(y_dims, dim=-1)
                if y_dims
                else z[..., :0]
            )
            params = self._dim_params(theta, j, y_prev)
            raw, log_scale, shift = self._split(params)
            u, _ = splines.rq_spline(z[..., j], raw, self.n_knots, self.bound, inverse=False)
            y_dims.append(u * torch.exp(log_scale) + shift)
        return torch.stack(y_dims, dim=-1)

    def log_density(self, theta: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        z, logdet = self.inverse(theta, y)
        return std_normal_logpdf(z) + logdet


class CNFModel(GenerativeModel):
    family = "cnf"
    has_exact_density = True

    def __init__(self, cond_dim: int, d_y: int, arch: ArchConfig, seed: int = 0):
        super().__init__(cond_dim, d_y, arch, seed)
        self.head = CNFHead(d_y, arch.n_knots, arch.y_bound, arch.ar_hidden)
        self._conditioner = Conditioner(
            cond_dim,
            self.head.param_count,
            d_hidden=arch.d_h,
            n_hidden=arch.n_hidden,
            noise_reg_x=arch.noise_reg_x,
            restriction=arch.restriction,
        )

    def log_density(self, y, v, a) -> torch.Tensor:
        """Exact conditional log-density log p_a(y | v), shape (B,)."""
        y_t = to_f64(y).reshape(-1, self.d_y)
        theta = self.condition(v, a)
        if theta.shape[0] == 1 and y_t.shape[0] > 1:
            theta = theta.expand(y_t.shape[0], -1)
        out = self.head.log_density(theta, y_t)
        if not torch.isfinite(out).all():
            raise NumericalGuardError("cnf log-density is not finite")
        return out

    def log_gen_terms(
        self, y, v, a, n_mc: int = 1, generator: Optional[torch.Generator] = None
    ) -> torch.Tensor:
        # exact log-density; no latent marginalization is needed for flows
        y_t = to_f64(y).reshape(-1, self.d_y)
        if self.training and self.arch.noise_reg_y > 0.0:
            y_t = y_t + self.arch.noise_reg_y**0.5 * self._draw(y_t.shape, generator)
        return self.log_density(y_t, v, a)

    def sample(self, v, a, count: int, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        if count <= 0:
            raise ValueError("sample count must be positive")
        theta = self.condition(v, a)
        b = theta.shape[0]
        z = self._draw((b, count, self.d_y), generator)
        theta_rep = theta.unsqueeze(1).expand(b, count, theta.shape[1])
        with torch.no_grad():
            return self.head.transform(theta_rep.reshape(b * count, -1), z.reshape(b * count, -1)).reshape(
                b, count, self.d_y
            )


def cnf_log_density(model: CNFModel, y, v, a=0) -> torch.Tensor:
    """Exact change-of-variables log-density of a flow model."""
    return model.log_density(y, v, a)
