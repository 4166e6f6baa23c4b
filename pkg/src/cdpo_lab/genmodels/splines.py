"""Batched monotone rational-quadratic splines with identity tails.

A spline is parameterized per element by an unconstrained vector of length
``3 * n_bins - 1`` (bin-width logits, bin-height logits, interior derivative
logits). The transform maps [-bound, bound] onto itself, is the identity
outside that box (boundary derivatives are pinned to one so the map is C^1),
and is analytically invertible with an exact log-derivative. Keeping the
tails linear keeps log-densities finite for outcomes that land outside the
training box.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

MIN_BIN_FRACTION = 1e-3
MIN_DERIVATIVE = 1e-3
# softplus(x + _DERIV_OFFSET) + MIN_DERIVATIVE == 1 at x == 0, so an
# all-zero parameter vector yields the exact identity transform
_DERIV_OFFSET = float(np.log(np.expm1(1.0 - MIN_DERIVATIVE)))


def param_size(n_bins: int) -> int:
    return 3 * n_bins - 1


def _knots(raw: torch.Tensor, n_bins: int, bound: float):
    """Split raw parameters into knot positions and derivatives.

    raw: (..., 3*n_bins - 1). Returns x-knots, y-knots (..., n_bins + 1)
    and derivatives (..., n_bins + 1) with endpoint derivatives fixed at 1.
    """
    w_logits = raw[..., :n_bins]
    h_logits = raw[..., n_bins : 2 * n_bins]
    d_logits = raw[..., 2 * n_bins :]

    def knot_positions(logits: torch.Tensor) -> torch.Tensor:
        fracs = F.softmax(logits, dim=-1)
        fracs = MIN_BIN_FRACTION + (1.0 - MIN_BIN_FRACTION * n_bins) * fracs
        cum = torch.cumsum(fracs, dim=-1)
        cum = cum / cum[..., -1:]  # pin the last knot exactly to the bound
        cum = F.pad(cum, (1, 0), value=0.0)
        return 2.0 * bound * cum - bound

    kx = knot_positions(w_logits)
    ky = knot_positions(h_logits)

    inner = MIN_DERIVATIVE + F.softplus(d_logits + _DERIV_OFFSET)
    ones = torch.ones_like(inner[..., :1])
    derivs = torch.cat([ones, inner, ones], dim=-1)
    return kx, ky, derivs


def rq_spline(
    inputs: torch.Tensor,
    raw_params: torch.Tensor,
    n_bins: int,
    bound: float,
    inverse: bool = False,
):
    """Apply the spline elementwise.

    Parameters
    ----------
    inputs : (...,) points
    raw_params : (..., 3*n_bins - 1) unconstrained parameters per point
    inverse : map y -> z when True, z -> y otherwise

    Returns
    -------
    outputs : (...,) transformed points
    logabsdet : (...,) log |d outputs / d inputs|
    """
    if raw_params.shape[-1] != param_size(n_bins):
        raise ValueError(
            f"expected parameter size {param_size(n_bins)}, got {raw_params.shape[-1]}"
        )
    kx, ky, derivs = _knots(raw_params, n_bins, bound)

    inside = (inputs > -bound) & (inputs < bound)
    x_in = torch.where(inside, inputs, torch.zeros_like(inputs))

    ref = ky if inverse else kx
    idx = torch.searchsorted(ref.detach(), x_in.unsqueeze(-1).detach(), right=True) - 1
    idx = idx.clamp(0, n_bins - 1)

    def take(t, i):
        return t.gather(-1, i).squeeze(-1)

    x_k = take(kx, idx)
    x_k1 = take(kx, idx + 1)
    y_k = take(ky, idx)
    y_k1 = take(ky, idx + 1)
    d_k = take(derivs, idx)
    d_k1 = take(derivs, idx + 1)

    w = x_k1 - x_k
    h = y_k1 - y_k
    s = h / w

    if inverse:
        dy = x_in - y_k
        two_s = d_k1 + d_k - 2.0 * s
        a = h * (s - d_k) + dy * two_s
        b = h * d_k - dy * two_s
        c = -s * dy
        disc = b.pow(2) - 4.0 * a * c
        disc = disc.clamp_min(0.0)
        xi = (2.0 * c) / (-b - disc.sqrt())
        xi = xi.clamp(0.0, 1.0)
        out_in = x_k + xi * w
    else:
        xi = (x_in - x_k) / w
        xi = xi.clamp(0.0, 1.0)
        two_s = d_k1 + d_k - 2.0 * s
        num = h * (s * xi.pow(2) + d_k * xi * (1.0 - xi))
        den = s + two_s * xi * (1.0 - xi)
        out_in = y_k + num / den

    den = s + (d_k1 + d_k - 2.0 * s) * xi * (1.0 - xi)
    deriv_num = s.pow(2) * (d_k1 * xi.pow(2) + 2.0 * s * xi * (1.0 - xi) + d_k * (1.0 - xi).pow(2))
    log_deriv = torch.log(deriv_num) - 2.0 * torch.log(den)
    if inverse:
        log_deriv = -log_deriv

    outputs = torch.where(inside, out_in, inputs)
    logabsdet = torch.where(inside, log_deriv, torch.zeros_like(log_deriv))
    return outputs, logabsdet
