"""Conditional GAN: a latent-to-outcome generator plus a discriminator,
each with its own hypernetwork trunk.

The per-sample log-generative term is
``log d(y | v) + log(1 - d(f(z | v) | v))`` with the latent drawn from a
standard normal prior, matching the adversarial objective the family
optimizes: the discriminator ascends it, the generator descends its fake
part. Meta-learner weights multiply the whole per-sample term, so a
pseudo-outcome's fake term carries the same weight as its conditioning
sample.
"""

from __future__ import annotations

import logging
from typing import Optional

import torch

from .base import ArchConfig, GenerativeModel, ThetaLayout, add_linear, theta_linear, to_f64
from .conditioner import Conditioner

logger = logging.getLogger(__name__)

_LOGIT_CLAMP = 30.0  # keeps discriminator outputs strictly inside (0, 1)
_SATURATION_EPS = 1e-6


class GeneratorHead:
    def __init__(self, d_y: int, d_z: int, hidden: int):
        self.d_y, self.d_z, self.hidden = d_y, d_z, hidden
        layout = ThetaLayout()
        add_linear(layout, "w1", d_z, hidden)
        add_linear(layout, "w2", hidden, d_y)
        self.layout = layout
        self.param_count = layout.size

    def forward(self, theta: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        h = torch.nn.functional.elu(theta_linear(theta, self.layout, "w1", z, self.hidden))
        return theta_linear(theta, self.layout, "w2", h, self.d_y)


class DiscriminatorHead:
    def __init__(self, d_y: int, hidden: int):
        self.d_y, self.hidden = d_y, hidden
        layout = ThetaLayout()
        add_linear(layout, "w1", d_y, hidden)
        add_linear(layout, "w2", hidden, 1)
        self.layout = layout
        self.param_count = layout.size

    def prob(self, theta: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        h = torch.nn.functional.elu(theta_linear(theta, self.layout, "w1", y, self.hidden))
        logit = theta_linear(theta, self.layout, "w2", h, 1).squeeze(-1)
        return torch.sigmoid(logit.clamp(-_LOGIT_CLAMP, _LOGIT_CLAMP))


class CGANModel(GenerativeModel):
    family = "cgan"
    has_exact_density = False

    def __init__(self, cond_dim: int, d_y: int, arch: ArchConfig, seed: int = 0):
        super().__init__(cond_dim, d_y, arch, seed)
        self.d_z = arch.d_z if arch.d_z is not None else d_y
        self.gen_head = GeneratorHead(d_y, self.d_z, arch.gan_hidden)
        self.disc_head = DiscriminatorHead(d_y, arch.gan_hidden)
        kwargs = dict(
            d_hidden=arch.d_h,
            n_hidden=arch.n_hidden,
            noise_reg_x=arch.noise_reg_x,
            restriction=arch.restriction,
        )
        self.cond_gen = Conditioner(cond_dim, self.gen_head.param_count, **kwargs)
        self.cond_disc = Conditioner(cond_dim, self.disc_head.param_count, **kwargs)
        self._conditioner = self.cond_gen  # condition() reports the generating part

    def discriminate(self, y, v, a) -> torch.Tensor:
        from .base import _as_2d, _as_arm

        y_t = to_f64(y).reshape(-1, self.d_y)
        x = _as_2d(v, self.cond_dim, "conditioning input")
        theta_d = self.cond_disc(x, _as_arm(a, x.shape[0]), generator=self.rng)
        return self.disc_head.prob(theta_d, y_t)

    def generate(self, v, a, z: torch.Tensor) -> torch.Tensor:
        theta_g = self.condition(v, a)
        return self.gen_head.forward(theta_g, z)

    def log_gen_terms(
        self, y, v, a, n_mc: int = 1, generator: Optional[torch.Generator] = None
    ) -> torch.Tensor:
        from .base import _as_2d, _as_arm

        y_t = to_f64(y).reshape(-1, self.d_y)
        x = _as_2d(v, self.cond_dim, "conditioning input")
        a_t = _as_arm(a, x.shape[0])
        theta_d = self.cond_disc(x, a_t, generator=self.rng)
        theta_g = self.cond_gen(x, a_t, generator=self.rng)
        d_real = self.disc_head.prob(theta_d, y_t)
        term = torch.log(d_real)
        fake_part = torch.zeros_like(term)
        for _ in range(n_mc):
            z = self._draw((x.shape[0], self.d_z), generator)
            fake = self.gen_head.forward(theta_g, z)
            fake_part = fake_part + torch.log1p(-self.disc_head.prob(theta_d, fake))
        return term + fake_part / n_mc

    def sample(self, v, a, count: int, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        if count <= 0:
            raise ValueError("sample count must be positive")
        theta_g = self.condition(v, a)
        b = theta_g.shape[0]
        z = self._draw((b, count, self.d_z), generator)
        theta_rep = theta_g.unsqueeze(1).expand(b, count, theta_g.shape[1])
        with torch.no_grad():
            out = self.gen_head.forward(
                theta_rep.reshape(b * count, -1), z.reshape(b * count, -1)
            )
        return out.reshape(b, count, self.d_y)


def adversarial_step(
    model: CGANModel,
    y: torch.Tensor,
    v: torch.Tensor,
    a,
    weights: torch.Tensor,
    opt_disc: torch.optim.Optimizer,
    opt_gen: torch.optim.Optimizer,
    generator: Optional[torch.Generator] = None,
) -> tuple[float, float]:
    """One weighted adversarial update: discriminator ascent, generator descent.

    ``weights`` multiply the per-sample log-generative terms; the fake term
    of each sample carries the same weight as its real/pseudo counterpart.
    Returns the (discriminator, generator) objective values after the step.
    """
    from .base import _as_2d, _as_arm

    y_t = to_f64(y).reshape(-1, model.d_y)
    x = _as_2d(v, model.cond_dim, "conditioning input")
    a_t = _as_arm(a, x.shape[0])
    w = to_f64(weights).reshape(-1)
    if not torch.isfinite(w).all():
        raise ValueError("per-sample weights must be finite")

    # discriminator ascent on w * [log d(y) + log(1 - d(fake))]
    opt_disc.zero_grad()
    theta_d = model.cond_disc(x, a_t, generator=model.rng)
    with torch.no_grad():
        theta_g = model.cond_gen(x, a_t, generator=model.rng)
        z = model._draw((x.shape[0], model.d_z), generator)
        fake = model.gen_head.forward(theta_g, z)
    d_real = model.disc_head.prob(theta_d, y_t)
    d_fake = model.disc_head.prob(theta_d, fake)
    if bool(
        (d_real.min() < _SATURATION_EPS)
        or (d_real.max() > 1.0 - _SATURATION_EPS)
        or (d_fake.max() > 1.0 - _SATURATION_EPS)
        or (d_fake.min() < _SATURATION_EPS)
    ):
        logger.warning("cgan discriminator saturated (output within 1e-6 of {0, 1})")
    disc_value = (w * (torch.log(d_real) + torch.log1p(-d_fake))).mean()
    (-disc_value).backward()
    opt_disc.step()

    # generator descent on w * log(1 - d(fake))
    opt_gen.zero_grad()
    theta_g = model.cond_gen(x, a_t, generator=model.rng)
    with torch.no_grad():
        theta_d_frozen = model.cond_disc(x, a_t, generator=model.rng)
    z = model._draw((x.shape[0], model.d_z), generator)
    fake = model.gen_head.forward(theta_g, z)
    gen_value = (w * torch.log1p(-model.disc_head.prob(theta_d_frozen, fake))).mean()
    gen_value.backward()
    opt_gen.step()

    return float(disc_value.detach()), float(gen_value.detach())
