"""Hypernetwork conditioning trunk shared by all four generative families.

Two stacked fully-connected blocks: FC1 embeds the covariates, FC2 maps the
embedding plus the treatment indicator to the flat parameter vector of the
wrapped generative head. Gaussian noise of variance ``noise_reg_x`` is
injected after FC1 in training mode only. One trunk serves both treatment
arms (the arm enters FC2 as an input).

The "linear" restriction replaces the whole trunk by a single affine layer
on (covariates, treatment).
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn

FULL = "full"
LINEAR = "linear"


def _mlp(d_in: int, d_hidden: int, n_hidden: int, d_out: int | None) -> nn.Sequential:
    layers: list[nn.Module] = []
    d = d_in
    for _ in range(n_hidden):
        layers += [nn.Linear(d, d_hidden, dtype=torch.float64), nn.ELU()]
        d = d_hidden
    if d_out is not None:
        layers.append(nn.Linear(d, d_out, dtype=torch.float64))
    return nn.Sequential(*layers)


class Conditioner(nn.Module):
    def __init__(
        self,
        cond_dim: int,
        out_dim: int,
        d_hidden: int = 15,
        n_hidden: int = 1,
        noise_reg_x: float = 0.0,
        restriction: str = FULL,
    ):
        super().__init__()
        if restriction not in (FULL, LINEAR):
            raise ValueError(f"unknown restriction {restriction!r}")
        self.cond_dim = cond_dim
        self.out_dim = out_dim
        self.noise_reg_x = noise_reg_x
        self.restriction = restriction
        if restriction == LINEAR:
            self.affine = nn.Linear(cond_dim + 1, out_dim, dtype=torch.float64)
        else:
            self.fc1 = _mlp(cond_dim, d_hidden, n_hidden, None)
            self.fc2 = _mlp(d_hidden + 1, d_hidden, n_hidden, out_dim)
        self._scale_output_layer()

    def _scale_output_layer(self):
        # keep initial head parameters small so every family starts near a
        # benign configuration (near-identity spline, moderate variances)
        last = self.affine if self.restriction == LINEAR else self.fc2[-1]
        with torch.no_grad():
            last.weight.mul_(0.1)
            last.bias.mul_(0.1)

    def forward(
        self,
        x: torch.Tensor,
        a: torch.Tensor,
        generator: torch.Generator | None = None,
    ) -> torch.Tensor:
        """Map (covariates, treatment) to head parameters, (B, out_dim)."""
        if x.dim() != 2 or x.shape[1] != self.cond_dim:
            raise ValueError(f"expected conditioning input of shape (B, {self.cond_dim})")
        a_col = a.to(x.dtype).reshape(-1, 1)
        if a_col.shape[0] != x.shape[0]:
            raise ValueError("treatment indicator batch does not match covariates")
        if self.restriction == LINEAR:
            return self.affine(torch.cat([x, a_col], dim=1))
        h = self.fc1(x)
        if self.training and self.noise_reg_x > 0.0:
            noise = torch.empty_like(h).normal_(
                0.0, math.sqrt(self.noise_reg_x), generator=generator
            )
            h = h + noise
        return self.fc2(torch.cat([h, a_col], dim=1))

    def embed(self, x: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
        """Treatment-free FC1 embedding (shared with the propensity head)."""
        if self.restriction == LINEAR:
            raise ValueError("the linear trunk has no covariate embedding")
        h = self.fc1(x)
        if self.training and self.noise_reg_x > 0.0:
            noise = torch.empty_like(h).normal_(
                0.0, math.sqrt(self.noise_reg_x), generator=generator
            )
            h = h + noise
        return h
