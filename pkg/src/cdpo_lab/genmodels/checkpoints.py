"""Self-describing model checkpoints.

One ``.npz`` file per model: a JSON metadata record (family tag,
architecture config, conditioning dimension, schema version) plus the flat
parameter vector and, when present, the EMA parameter vector and extra
named parameter blocks (e.g. a propensity head).
"""

from __future__ import annotations

import json
from typing import Optional

import numpy as np
import torch

SCHEMA_VERSION = 1


def save_checkpoint(
    model,
    path,
    ema_params: Optional[torch.Tensor] = None,
    extra_blocks: Optional[dict[str, np.ndarray]] = None,
    extra_meta: Optional[dict] = None,
) -> None:
    meta = {
        "schema_version": SCHEMA_VERSION,
        "family": model.family,
        "cond_dim": model.cond_dim,
        "d_y": model.d_y,
        "seed": model.seed,
        "arch": model.arch.as_dict(),
    }
    if extra_meta:
        meta.update(extra_meta)
    arrays = {
        "meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
        "params": model.flat_params().numpy(),
    }
    if ema_params is not None:
        arrays["ema_params"] = np.asarray(ema_params, dtype=np.float64)
    for name, block in (extra_blocks or {}).items():
        arrays[f"block_{name}"] = np.asarray(block, dtype=np.float64)
    np.savez(path, **arrays)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"].tobytes()).decode())
        if meta.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported checkpoint schema {meta.get('schema_version')}")
        arrays = {k: data[k] for k in data.files if k != "meta"}
    return meta, arrays


def load_checkpoint(path, use_ema: bool = True):
    """Rebuild a generative model from a checkpoint file.

    Loads the EMA parameter vector when present and ``use_ema`` is set,
    the raw final parameters otherwise.
    """
    from . import build_model
    from .base import ArchConfig

    meta, arrays = read_checkpoint(path)
    arch = ArchConfig(**meta["arch"])
    model = build_model(meta["family"], meta["cond_dim"], meta["d_y"], arch, seed=meta["seed"])
    vec = arrays["ema_params"] if (use_ema and "ema_params" in arrays) else arrays["params"]
    model.load_flat_params(torch.as_tensor(vec))
    model.eval()
    return model, meta, arrays
