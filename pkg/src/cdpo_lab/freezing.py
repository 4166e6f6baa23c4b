"""Read-only handles around trained models.

Freezing disables every parameter-mutating entry point while leaving reads
(sampling, density queries, conditioning) available. A parameter hash taken
at freeze time lets later stages prove they never touched stage-1 weights.
"""

from __future__ import annotations

import copy

import torch

from .errors import FrozenModelError


class Frozen:
    def __init__(self, module: torch.nn.Module):
        module.eval()
        for p in module.parameters():
            p.requires_grad_(False)
        object.__setattr__(self, "_module", module)
        object.__setattr__(self, "_hash", _module_hash(module))

    # -- denied mutations ---------------------------------------------------

    def parameters(self, *args, **kwargs):
        raise FrozenModelError("cannot enumerate parameters of a frozen model for optimization")

    def train(self, mode: bool = True):
        raise FrozenModelError("cannot switch a frozen model to training mode")

    def load_flat_params(self, *args, **kwargs):
        raise FrozenModelError("cannot overwrite parameters of a frozen model")

    def __setattr__(self, name, value):
        raise FrozenModelError("frozen models are read-only")

    # -- permitted reads ------------------------------------------------------

    @property
    def module(self) -> torch.nn.Module:
        return self._module

    def frozen_hash(self) -> str:
        return self._hash

    def assert_unchanged(self) -> None:
        if _module_hash(self._module) != self._hash:
            raise FrozenModelError("frozen parameters changed after freeze")

    def clone_unfrozen(self) -> torch.nn.Module:
        """Deep copy with gradients re-enabled (reads are always permitted)."""
        clone = copy.deepcopy(self._module)
        for p in clone.parameters():
            p.requires_grad_(True)
        return clone

    def __getattr__(self, name):
        return getattr(self._module, name)


def freeze(model) -> Frozen:
    """Freeze a trained model: mutations raise, reads are allowed."""
    if isinstance(model, Frozen):
        return model
    return Frozen(model)


def _module_hash(module: torch.nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for p in module.parameters():
        h.update(p.detach().numpy().tobytes())
    for b in module.buffers():
        h.update(b.detach().numpy().tobytes())
    return h.hexdigest()
