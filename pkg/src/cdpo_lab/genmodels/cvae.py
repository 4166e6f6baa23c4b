"""Conditional VAE: Gaussian encoder and decoder around a standard-normal
latent prior.

The per-sample log-generative term is the single-sample evidence bound
``log p(y | z, v) + log h(z) - log q(z | y, v)`` with the latent drawn from
the encoder by reparameterization, averaged over ``n_mc`` draws.
"""

from __future__ import annotations

from typing import Optional

import torch

from .base import (
    ArchConfig,
    GenerativeModel,
    ThetaLayout,
    add_linear,
    diag_normal_logpdf,
    head_activation,
    std_normal_logpdf,
    theta_linear,
    to_f64,
)
from .conditioner import Conditioner


class CVAEHead:
    def __init__(
        self,
        d_y: int,
        d_z: int,
        hidden: int,
        activation: str,
        min_logvar: float,
        max_logvar: float,
    ):
        self.d_y, self.d_z, self.hidden = d_y, d_z, hidden
        self.act = head_activation(activation)
        self.min_logvar, self.max_logvar = min_logvar, max_logvar
        layout = ThetaLayout()
        add_linear(layout, "enc.w1", d_y, hidden)
        add_linear(layout, "enc.w2", hidden, 2 * d_z)
        add_linear(layout, "dec.w1", d_z, hidden)
        add_linear(layout, "dec.w2", hidden, 2 * d_y)
        self.layout = layout
        self.param_count = layout.size

    def _gaussian(self, theta, prefix, inp, d_out):
        h = self.act(theta_linear(theta, self.layout, f"{prefix}.w1", inp, self.hidden))
        out = theta_linear(theta, self.layout, f"{prefix}.w2", h, 2 * d_out)
        mean, logvar = out[..., :d_out], out[..., d_out:]
        return mean, logvar.clamp(self.min_logvar, self.max_logvar)

    def encode(self, theta, y):
        return self._gaussian(theta, "enc", y, self.d_z)

    def decode(self, theta, z):
        return self._gaussian(theta, "dec", z, self.d_y)

    def elbo_terms(self, theta: torch.Tensor, y: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
        """log p(y, z | v) - log q(z | y, v) with z reparameterized from eps."""
        mu_q, logvar_q = self.encode(theta, y)
        z = mu_q + torch.exp(0.5 * logvar_q) * eps
        mu_y, logvar_y = self.decode(theta, z)
        return (
            diag_normal_logpdf(y, mu_y, logvar_y)
            + std_normal_logpdf(z)
            - diag_normal_logpdf(z, mu_q, logvar_q)
        )


class CVAEModel(GenerativeModel):
    family = "cvae"
    has_exact_density = False

    def __init__(self, cond_dim: int, d_y: int, arch: ArchConfig, seed: int = 0):
        super().__init__(cond_dim, d_y, arch, seed)
        self.d_z = arch.d_z if arch.d_z is not None else 3
        self.head = CVAEHead(
            d_y,
            self.d_z,
            arch.vae_hidden,
            arch.head_activation,
            arch.min_logvar,
            arch.max_logvar,
        )
        self._conditioner = Conditioner(
            cond_dim,
            self.head.param_count,
            d_hidden=arch.d_h,
            n_hidden=arch.n_hidden,
            noise_reg_x=arch.noise_reg_x,
            restriction=arch.restriction,
        )

    def log_gen_terms(
        self, y, v, a, n_mc: int = 1, generator: Optional[torch.Generator] = None
    ) -> torch.Tensor:
        y_t = to_f64(y).reshape(-1, self.d_y)
        theta = self.condition(v, a)
        total = torch.zeros(y_t.shape[0], dtype=torch.float64)
        for _ in range(n_mc):
            eps = self._draw((y_t.shape[0], self.d_z), generator)
            total = total + self.head.elbo_terms(theta, y_t, eps)
        return total / n_mc

    def sample(self, v, a, count: int, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        if count <= 0:
            raise ValueError("sample count must be positive")
        theta = self.condition(v, a)
        b = theta.shape[0]
        theta_rep = theta.unsqueeze(1).expand(b, count, theta.shape[1]).reshape(b * count, -1)
        with torch.no_grad():
            z = self._draw((b * count, self.d_z), generator)
            mu_y, logvar_y = self.head.decode(theta_rep, z)
            eps = self._draw((b * count, self.d_y), generator)
            out = mu_y + torch.exp(0.5 * logvar_y) * eps
        return out.reshape(b, count, self.d_y)
