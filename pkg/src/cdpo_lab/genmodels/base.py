"""Shared infrastructure for the conditional generative families: the
architecture config, the flat head-parameter layout, and the common model
API (conditioning, sampling, per-sample log-generative terms)."""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from ..errors import CapabilityError, NumericalGuardError
from .conditioner import FULL, Conditioner

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ArchConfig:
    """Architecture hyperparameters for one conditional generative model.

    Trunk fields apply to every family; the remaining blocks configure the
    wrapped head of the matching family and are ignored otherwise.
    """

    d_h: int = 15
    n_hidden: int = 1
    noise_reg_x: float = 0.01**2
    restriction: str = FULL
    # normalizing flow head
    n_knots: int = 10
    y_bound: float = 5.0
    ar_hidden: int = 8
    noise_reg_y: float = 0.01**2
    # adversarial head
    gan_hidden: int = 10
    # latent dimension (generator input / autoencoder latent)
    d_z: Optional[int] = None
    # autoencoder head
    vae_hidden: int = 10
    head_activation: str = "elu"
    min_logvar: float = -40.0
    max_logvar: float = 15.0
    # diffusion head
    n_steps: int = 100
    eps_hidden: int = 10
    t_embed_dim: int = 20
    beta_start: float = 0.004
    beta_end: float = 0.30
    predict: str = "eps"  # "eps" | "x0"

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LogGenTerm:
    """Scalar log-generative term for one (outcome, conditioning) pair."""

    value: float
    exact: bool  # exact log-density (flows) vs single-sample MC estimate


class ThetaLayout:
    """Named slices into a flat head-parameter vector."""

    def __init__(self):
        self._slices: dict[str, tuple[int, int]] = {}
        self.size = 0

    def add(self, name: str, n: int) -> None:
        self._slices[name] = (self.size, self.size + n)
        self.size += n

    def get(self, theta: torch.Tensor, name: str) -> torch.Tensor:
        lo, hi = self._slices[name]
        return theta[..., lo:hi]


def theta_linear(
    theta: torch.Tensor, layout: ThetaLayout, name: str, x: torch.Tensor, d_out: int
) -> torch.Tensor:
    """Per-sample affine layer with weights read from the theta vector."""
    block = layout.get(theta, name)
    d_in = x.shape[-1]
    w = block[..., : d_out * d_in].reshape(*block.shape[:-1], d_out, d_in)
    b = block[..., d_out * d_in :]
    return torch.einsum("...oi,...i->...o", w, x) + b


def add_linear(layout: ThetaLayout, name: str, d_in: int, d_out: int) -> None:
    layout.add(name, d_out * d_in + d_out)


def head_activation(name: str):
    if name == "elu":
        return nn.functional.elu
    if name == "identity":
        return lambda t: t
    raise ValueError(f"unknown head activation {name!r}")


def std_normal_logpdf(z: torch.Tensor) -> torch.Tensor:
    """Log density of N(0, I) summed over the last axis."""
    return -0.5 * (z.pow(2) + LOG_2PI).sum(dim=-1)


def diag_normal_logpdf(x: torch.Tensor, mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    return -0.5 * ((x - mean).pow(2) / logvar.exp() + logvar + LOG_2PI).sum(dim=-1)


def to_f64(t) -> torch.Tensor:
    """Tensor conversion that tolerates read-only numpy inputs."""
    if isinstance(t, np.ndarray) and not t.flags.writeable:
        t = t.copy()
    return torch.as_tensor(t, dtype=torch.float64)


def _as_2d(t: torch.Tensor, d: int, what: str) -> torch.Tensor:
    t = to_f64(t)
    if t.dim() == 1:
        t = t.reshape(1, -1)
    if t.dim() != 2 or t.shape[1] != d:
        raise ValueError(f"{what} must have shape (B, {d}), got {tuple(t.shape)}")
    return t


def _as_arm(a, batch: int) -> torch.Tensor:
    if isinstance(a, int):
        return torch.full((batch,), float(a), dtype=torch.float64)
    a = torch.as_tensor(a, dtype=torch.float64).reshape(-1)
    if a.shape[0] != batch:
        raise ValueError("treatment batch size mismatch")
    return a


class GenerativeModel(nn.Module):
    """A conditional model over outcomes given conditioning inputs.

    Subclasses implement sampling and the per-sample log-generative term
    that every meta-learner loss consumes. Heads are stateless functions of
    a flat parameter vector produced by the hypernetwork conditioner, so
    gradients with respect to head parameters are directly accessible.
    """

    family: str = "?"
    has_exact_density: bool = False

    def __init__(self, cond_dim: int, d_y: int, arch: ArchConfig, seed: int = 0):
        super().__init__()
        self.cond_dim = cond_dim
        self.d_y = d_y
        self.arch = arch
        self.seed = seed
        self.rng = torch.Generator().manual_seed(seed)

    # -- conditioning -------------------------------------------------------

    def condition(self, x_or_v, a) -> torch.Tensor:
        """Head parameters theta for each (conditioning input, arm) pair.

        Deterministic in evaluation mode; training mode injects trunk noise.
        """
        x = _as_2d(x_or_v, self.cond_dim, "conditioning input")
        a_t = _as_arm(a, x.shape[0])
        return self._conditioner(x, a_t, generator=self.rng)

    # -- family API ---------------------------------------------------------

    def log_gen_terms(
        self, y, v, a, n_mc: int = 1, generator: Optional[torch.Generator] = None
    ) -> torch.Tensor:
        """Per-sample E_(Z)[log g_a(y, Z | v)] estimates, shape (B,)."""
        raise NotImplementedError

    def sample(
        self, v, a, count: int, generator: Optional[torch.Generator] = None
    ) -> torch.Tensor:
        """Draw ``count`` outcomes per conditioning row, (B, count, d_y)."""
        raise NotImplementedError

    def log_density(self, y, v, a) -> torch.Tensor:
        raise CapabilityError(
            f"family {self.family!r} has no exact conditional density"
        )

    # -- convenience --------------------------------------------------------

    def log_gen_term(self, y, v, a, n_mc: int = 1) -> LogGenTerm:
        """Log-generative term for a single (y, v) pair."""
        if n_mc < 1:
            raise ValueError("n_mc must be >= 1")
        val = self.log_gen_terms(y, v, a, n_mc=n_mc)
        scalar = float(val.reshape(-1)[0])
        if not math.isfinite(scalar):
            raise NumericalGuardError(
                f"{self.family} log-generative term is not finite"
            )
        return LogGenTerm(value=scalar, exact=self.has_exact_density)

    def sample_numpy(self, v_row, a: int, count: int, rng: Optional[np.random.Generator] = None):
        """Single-row sampling with a numpy-facing interface."""
        gen = None
        if rng is not None:
            gen = torch.Generator().manual_seed(int(rng.integers(0, 2**63 - 1)))
        with torch.no_grad():
            out = self.sample(np.atleast_2d(v_row), a, count, generator=gen)
        return out[0].numpy()

    def log_density_numpy(self, y, v, a: int):
        with torch.no_grad():
            return self.log_density(y, v, a).numpy()

    # -- parameter plumbing ---------------------------------------------------

    def flat_params(self) -> torch.Tensor:
        return torch.cat([p.detach().reshape(-1) for p in self.parameters()])

    def load_flat_params(self, vec: torch.Tensor) -> None:
        vec = torch.as_tensor(vec, dtype=torch.float64).reshape(-1)
        total = sum(p.numel() for p in self.parameters())
        if vec.numel() != total:
            raise ValueError(f"expected {total} parameters, got {vec.numel()}")
        offset = 0
        with torch.no_grad():
            for p in self.parameters():
                n = p.numel()
                p.copy_(vec[offset : offset + n].reshape(p.shape))
                offset += n

    def param_hash(self) -> str:
        return hashlib.sha256(self.flat_params().numpy().tobytes()).hexdigest()

    def _draw(self, shape, generator: Optional[torch.Generator]) -> torch.Tensor:
        gen = generator if generator is not None else self.rng
        return torch.empty(*shape, dtype=torch.float64).normal_(0.0, 1.0, generator=gen)
