"""Self-describing model checkpoints stored with joblib."""

import logging
from pathlib import Path
from typing import Any, Dict, Mapping

import joblib
import numpy as np
import torch
from torch import nn

from stegpurify._util import CheckpointError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
KINDS = {"hiding_pair", "noise_autoencoder", "ebra_ensemble", "diagnostic"}


def module_state(module: nn.Module) -> Dict[str, np.ndarray]:
    """Parameters and buffers of a module as numpy arrays."""
    return {name: t.detach().cpu().numpy().copy() for name, t in module.state_dict().items()}


def restore_module(module: nn.Module, state: Mapping[str, np.ndarray]) -> nn.Module:
    """Load numpy arrays written by module_state back into a module."""
    try:
        module.load_state_dict({name: torch.from_numpy(np.asarray(a)) for name, a in state.items()})
    except RuntimeError as exc:
        raise CheckpointError(f"State does not fit {type(module).__name__}: {exc}") from exc
    return module


def save_checkpoint(
    path: Path,
    kind: str,
    hparams: Dict[str, Any],
    modules: Dict[str, nn.Module],
    config: Dict[str, Any] | None = None,
    log: Dict[str, Any] | None = None,
) -> Path:
    """Write a checkpoint dict and return its path."""
    if kind not in KINDS:
        raise CheckpointError(f"Unknown checkpoint kind: {kind}")
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "hparams": dict(hparams),
        "config": dict(config or {}),
        "state": {name: module_state(m) for name, m in modules.items()},
        "log": dict(log or {}),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    joblib.dump(payload, path)
    logger.info("Wrote %s checkpoint %s", kind, path)
    return path


def load_checkpoint(path: Path, kind: str) -> Dict[str, Any]:
    """Read a checkpoint, checking its kind and format version."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint {path} does not exist")
    try:
        payload = joblib.load(path)
    except Exception as exc:  # pylint: disable=broad-exception-caught
        raise CheckpointError(f"Unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"{path} is not a stegpurify checkpoint")
    if payload["format_version"] != FORMAT_VERSION:
        raise CheckpointError(
            f"{path} has format version {payload['format_version']}, expected {FORMAT_VERSION}"
        )
    if payload.get("kind") != kind:
        raise CheckpointError(f"{path} holds a {payload.get('kind')} checkpoint, expected {kind}")
    return payload
