"""Conditional denoising diffusion model over tabular outcomes.

A fixed Gaussian forward process maps the outcome to (approximately)
standard normal noise over ``n_steps`` steps; a conditional denoiser with a
sinusoidal time embedding reverses it. The per-sample log-generative term
is an unbiased one-draw estimate of the discrete-time evidence bound: a
uniformly sampled step contributes its reconstruction or KL component
scaled by the step count, plus the analytic terminal-prior KL.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch

from .base import (
    ArchConfig,
    GenerativeModel,
    ThetaLayout,
    add_linear,
    diag_normal_logpdf,
    theta_linear,
    to_f64,
)
from .conditioner import Conditioner


@dataclass(frozen=True)
class DiffusionSchedule:
    """Precomputed forward-process coefficients (linear beta ramp)."""

    betas: torch.Tensor  # (T,)
    alphas: torch.Tensor
    alpha_bars: torch.Tensor
    alpha_bars_prev: torch.Tensor
    posterior_var: torch.Tensor
    posterior_coef_x0: torch.Tensor
    posterior_coef_zt: torch.Tensor

    @classmethod
    def linear(cls, n_steps: int, beta_start: float, beta_end: float) -> "DiffusionSchedule":
        if n_steps < 1:
            raise ValueError("need at least one diffusion step")
        if not (0.0 < beta_start <= beta_end <= 1.0):
            raise ValueError("betas must satisfy 0 < beta_start <= beta_end <= 1")
        if n_steps == 1:
            betas = torch.tensor([beta_start], dtype=torch.float64)
        else:
            betas = torch.linspace(beta_start, beta_end, n_steps, dtype=torch.float64)
        alphas = 1.0 - betas
        alpha_bars = torch.cumprod(alphas, dim=0)
        alpha_bars_prev = torch.cat([torch.ones(1, dtype=torch.float64), alpha_bars[:-1]])
        posterior_var = betas * (1.0 - alpha_bars_prev) / (1.0 - alpha_bars)
        coef_x0 = betas * torch.sqrt(alpha_bars_prev) / (1.0 - alpha_bars)
        coef_zt = (1.0 - alpha_bars_prev) * torch.sqrt(alphas) / (1.0 - alpha_bars)
        return cls(
            betas=betas,
            alphas=alphas,
            alpha_bars=alpha_bars,
            alpha_bars_prev=alpha_bars_prev,
            posterior_var=posterior_var,
            posterior_coef_x0=coef_x0,
            posterior_coef_zt=coef_zt,
        )

    @property
    def n_steps(self) -> int:
        return self.betas.shape[0]


def time_embedding(t: torch.Tensor, dim: int, n_steps: int) -> torch.Tensor:
    """Sinusoidal embedding of integer steps, shape (..., dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10_000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1)
    )
    angles = t.to(torch.float64).unsqueeze(-1) * freqs
    emb = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)
    if dim % 2 == 1:
        emb = torch.nn.functional.pad(emb, (0, 1))
    return emb


class CDMHead:
    def __init__(self, d_y: int, hidden: int, t_embed_dim: int, schedule: DiffusionSchedule, predict: str):
        if predict not in ("eps", "x0"):
            raise ValueError("predict must be 'eps' or 'x0'")
        self.d_y, self.hidden, self.t_embed_dim = d_y, hidden, t_embed_dim
        self.schedule = schedule
        self.predict = predict
        layout = ThetaLayout()
        add_linear(layout, "w1", d_y + t_embed_dim, hidden)
        add_linear(layout, "w2", hidden, d_y)
        self.layout = layout
        self.param_count = layout.size

    def net(self, theta: torch.Tensor, z_t: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        emb = time_embedding(t, self.t_embed_dim, self.schedule.n_steps)
        inp = torch.cat([z_t, emb], dim=-1)
        h = torch.nn.functional.elu(theta_linear(theta, self.layout, "w1", inp, self.hidden))
        return theta_linear(theta, self.layout, "w2", h, self.d_y)

    def predict_x0(self, theta: torch.Tensor, z_t: torch.Tensor, t_idx: torch.Tensor) -> torch.Tensor:
        """Denoised outcome estimate at (0-based) step index t_idx."""
        out = self.net(theta, z_t, t_idx + 1)
        if self.predict == "x0":
            return out
        abar = self.schedule.alpha_bars[t_idx].unsqueeze(-1)
        return (z_t - torch.sqrt(1.0 - abar) * out) / torch.sqrt(abar.clamp_min(1e-12))

    def elbo_terms(
        self, theta: torch.Tensor, y: torch.Tensor, t_idx: torch.Tensor, eps: torch.Tensor
    ) -> torch.Tensor:
        """One-draw evidence-bound estimate per sample.

        t_idx is the 0-based uniformly drawn step; eps the forward noise.
        """
        sched = self.schedule
        n = sched.n_steps
        abar = sched.alpha_bars[t_idx].unsqueeze(-1)
        z_t = torch.sqrt(abar) * y + torch.sqrt(1.0 - abar) * eps
        x0_hat = self.predict_x0(theta, z_t, t_idx)

        coef_x0 = sched.posterior_coef_x0[t_idx].unsqueeze(-1)
        coef_zt = sched.posterior_coef_zt[t_idx].unsqueeze(-1)
        mu_q = coef_x0 * y + coef_zt * z_t
        mu_p = coef_x0 * x0_hat + coef_zt * z_t

        # t == 1 (index 0): Gaussian reconstruction with variance beta_1
        recon_logvar = torch.log(sched.betas[0]).expand(self.d_y)
        recon = diag_normal_logpdf(y, x0_hat, recon_logvar)

        post_var = sched.posterior_var[t_idx].clamp_min(1e-12).unsqueeze(-1)
        kl = ((mu_q - mu_p).pow(2) / (2.0 * post_var)).sum(dim=-1)

        step_term = torch.where(t_idx == 0, recon, -kl)

        abar_last = sched.alpha_bars[-1]
        prior_kl = 0.5 * (abar_last * (y.pow(2) - 1.0) - torch.log1p(-abar_last)).sum(dim=-1)
        return float(n) * step_term - prior_kl


class CDMModel(GenerativeModel):
    family = "cdm"
    has_exact_density = False

    def __init__(self, cond_dim: int, d_y: int, arch: ArchConfig, seed: int = 0):
        super().__init__(cond_dim, d_y, arch, seed)
        schedule = DiffusionSchedule.linear(arch.n_steps, arch.beta_start, arch.beta_end)
        self.head = CDMHead(d_y, arch.eps_hidden, arch.t_embed_dim, schedule, arch.predict)
        self._conditioner = Conditioner(
            cond_dim,
            self.head.param_count,
            d_hidden=arch.d_h,
            n_hidden=arch.n_hidden,
            noise_reg_x=arch.noise_reg_x,
            restriction=arch.restriction,
        )

    @property
    def schedule(self) -> DiffusionSchedule:
        return self.head.schedule

    def log_gen_terms(
        self, y, v, a, n_mc: int = 1, generator: Optional[torch.Generator] = None
    ) -> torch.Tensor:
        y_t = to_f64(y).reshape(-1, self.d_y)
        theta = self.condition(v, a)
        gen = generator if generator is not None else self.rng
        total = torch.zeros(y_t.shape[0], dtype=torch.float64)
        for _ in range(n_mc):
            t_idx = torch.randint(
                0, self.schedule.n_steps, (y_t.shape[0],), generator=gen
            )
            eps = self._draw(y_t.shape, generator)
            total = total + self.head.elbo_terms(theta, y_t, t_idx, eps)
        return total / n_mc

    def sample(self, v, a, count: int, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        if count <= 0:
            raise ValueError("sample count must be positive")
        theta = self.condition(v, a)
        b = theta.shape[0]
        theta_rep = theta.unsqueeze(1).expand(b, count, theta.shape[1]).reshape(b * count, -1)
        sched = self.schedule
        with torch.no_grad():
            z = self._draw((b * count, self.d_y), generator)
            for step in reversed(range(sched.n_steps)):
                t_idx = torch.full((b * count,), step, dtype=torch.int64)
                x0_hat = self.head.predict_x0(theta_rep, z, t_idx)
                mu = (
                    sched.posterior_coef_x0[step] * x0_hat
                    + sched.posterior_coef_zt[step] * z
                )
                if step > 0:
                    noise = self._draw(z.shape, generator)
                    z = mu + torch.sqrt(sched.posterior_var[step]) * noise
                else:
                    z = mu
        return z.reshape(b, count, self.d_y)

    def forward_marginal(
        self, y: torch.Tensor, generator: Optional[torch.Generator] = None
    ) -> torch.Tensor:
        """Terminal latent z_T of the forward noising process for given y."""
        y_t = to_f64(y).reshape(-1, self.d_y)
        abar = self.schedule.alpha_bars[-1]
        eps = self._draw(y_t.shape, generator)
        return torch.sqrt(abar) * y_t + torch.sqrt(1.0 - abar) * eps
