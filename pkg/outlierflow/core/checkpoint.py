"""Versioned checkpoint files."""

import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

import torch

from outlierflow.core.errors import CheckpointError, FormatError

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
KINDS = ("classifier", "flow", "gan", "joint")


def save_checkpoint(
    path: Union[str, Path],
    kind: str,
    state: Dict[str, Any],
    config: Optional[dict] = None,
) -> Path:
    """Write ``state`` with a version tag, its kind and the resolved config."""
    if kind not in KINDS:
        raise CheckpointError(f"Unknown checkpoint kind {kind!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"version": CHECKPOINT_VERSION, "kind": kind, "config": config or {}, "state": state}, path)
    logger.info("Saved %s checkpoint to %s", kind, path)
    return path


def load_checkpoint(path: Union[str, Path], kind: str) -> Dict[str, Any]:
    """Read a checkpoint, refusing other versions or kinds. Returns the full payload."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise FormatError(f"{path}: unreadable checkpoint ({e})") from e
    if not isinstance(payload, dict) or "version" not in payload:
        raise FormatError(f"{path}: not an outlierflow checkpoint")
    if payload["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {payload['version']} != supported {CHECKPOINT_VERSION}"
        )
    if payload.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {payload.get('kind')!r}")
    return payload


def save_model(model: torch.nn.Module, path: Union[str, Path], kind: str, config: Optional[dict] = None) -> Path:
    return save_checkpoint(path, kind, {"model": model.state_dict()}, config)


def load_model(model: torch.nn.Module, path: Union[str, Path], kind: str) -> torch.nn.Module:
    payload = load_checkpoint(path, kind)
    try:
        model.load_state_dict(payload["state"]["model"])
    except (KeyError, RuntimeError) as e:
        raise CheckpointError(f"{path}: parameters do not fit the model ({e})") from e
    return model
