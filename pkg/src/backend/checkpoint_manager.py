"""
Checkpoint Manager for the BASEN toolkit
Handles saving and loading model checkpoints together with the full model and
selector configuration, and validates configurations on load.
"""

import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import torch

from src.backend.basen import BASEN, ModelConfig, SparseBasen, build_selector
from src.backend.errors import CheckpointError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
REQUIRED_KEYS = ("format_version", "model_config", "selector_config", "state_dict", "method", "stage", "epoch", "val_loss")


def _wrapper_settings(model: SparseBasen) -> Dict[str, Any]:
    settings = {
        "mode": model.mode,
        "residual": model.residual,
        "residual_weight": model.residual_weight,
        "placement": model.placement,
    }
    if model.selector is not None and hasattr(model.selector, "hard"):
        settings["hard"] = bool(model.selector.hard)
        settings["tau"] = float(model.selector.tau)
    return settings


def save_checkpoint(
    model: SparseBasen,
    path: Union[str, Path],
    method: str,
    stage: str,
    epoch: int,
    val_loss: float,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """
    Save a model with everything needed to rebuild it.

    Args:
        model: wrapped network to save
        path: destination file
        method: training pipeline that produced the model
        stage: pipeline stage label
        epoch: last completed epoch
        val_loss: validation objective at save time
        extra: additional JSON-compatible metadata
    """
    path = Path(path)
    os.makedirs(path.parent, exist_ok=True)
    selector_config = model.selector.config() if model.selector is not None else {}
    checkpoint = {
        "format_version": FORMAT_VERSION,
        "model_config": model.basen.cfg.to_dict(),
        "selector_config": selector_config,
        "state_dict": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "method": method,
        "stage": stage,
        "epoch": int(epoch),
        "val_loss": float(val_loss),
        "extra": {"wrapper": _wrapper_settings(model), **(extra or {})},
    }
    tmp_path = path.with_suffix(path.suffix + ".tmp")
    torch.save(checkpoint, tmp_path)
    os.replace(tmp_path, path)
    logger.info("Saved checkpoint to %s (method %s, stage %s, epoch %d, val_loss %.4f)",
                path, method, stage, epoch, val_loss)
    return path


def read_checkpoint(path: Union[str, Path]) -> Dict[str, Any]:
    """Load the raw checkpoint dict and check its required keys."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"Checkpoint not found: {path}")
    try:
        checkpoint = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"Failed to read checkpoint {path}: {e}")
    if not isinstance(checkpoint, dict):
        raise CheckpointError(f"Checkpoint {path} is not a dictionary")
    missing = [key for key in REQUIRED_KEYS if key not in checkpoint]
    if missing:
        raise CheckpointError(f"Checkpoint {path} is missing {missing}", keys=missing)
    if checkpoint["format_version"] != FORMAT_VERSION:
        raise CheckpointError(
            f"Checkpoint {path} has format version {checkpoint['format_version']}, expected {FORMAT_VERSION}",
            keys=["format_version"],
        )
    return checkpoint


def config_mismatches(stored: Dict[str, Any], expected: Dict[str, Any]) -> list:
    """Dotted keys whose stored value differs from the expected one."""
    keys = sorted(set(stored) | set(expected))
    return [f"model.{key}" for key in keys if stored.get(key) != expected.get(key)]


def load_checkpoint(
    path: Union[str, Path],
    expected_config: Optional[ModelConfig] = None,
    device: Union[str, torch.device] = "cpu",
) -> Tuple[SparseBasen, Dict[str, Any]]:
    """
    Rebuild the wrapped network stored at `path`.

    Raises:
        CheckpointError: unreadable file, or stored config incompatible with `expected_config`
    """
    checkpoint = read_checkpoint(path)
    stored = ModelConfig.from_dict(checkpoint["model_config"]).to_dict()
    if expected_config is not None:
        mismatched = config_mismatches(stored, expected_config.to_dict())
        if mismatched:
            raise CheckpointError(f"Checkpoint {path} is incompatible with the expected model config", keys=mismatched)

    wrapper = checkpoint.get("extra", {}).get("wrapper", {})
    try:
        basen = BASEN(ModelConfig.from_dict(stored))
        selector = build_selector(checkpoint["selector_config"])
        model = SparseBasen(
            basen,
            selector,
            mode=wrapper.get("mode", "none" if selector is None else checkpoint["method"]),
            residual_weight=wrapper.get("residual_weight", 0.1),
            placement=wrapper.get("placement", "leading"),
        )
        model.residual = wrapper.get("residual", True)
        if selector is not None and "hard" in wrapper:
            selector.hard = wrapper["hard"]
            selector.tau = wrapper.get("tau", selector.tau)
        model.load_state_dict(checkpoint["state_dict"])
    except (ValueError, KeyError, RuntimeError) as e:
        raise CheckpointError(f"Failed to rebuild model from {path}: {e}")

    model.to(device)
    model.eval()
    logger.info("Loaded checkpoint from %s (method %s, stage %s, epoch %d)",
                path, checkpoint["method"], checkpoint["stage"], checkpoint["epoch"])
    return model, checkpoint


class CheckpointManager:
    """Names and tracks checkpoints inside one run directory."""

    def __init__(self, run_dir: Union[str, Path]):
        """Initialize the manager for a run directory."""
        self.run_dir = Path(run_dir)
        self.checkpoint_dir = self.run_dir / "checkpoints"
        self.last_good: Optional[Path] = None

    def path_for(self, name: str) -> Path:
        return self.checkpoint_dir / f"{name}.pt"

    def save(self, model: SparseBasen, name: str, method: str, stage: str, epoch: int,
             val_loss: float, extra: Optional[Dict[str, Any]] = None) -> Path:
        """Save a checkpoint and remember it as the last good one."""
        path = save_checkpoint(model, self.path_for(name), method, stage, epoch, val_loss, extra)
        self.last_good = path
        return path

    def load(self, name: str, expected_config: Optional[ModelConfig] = None,
             device: Union[str, torch.device] = "cpu") -> Tuple[SparseBasen, Dict[str, Any]]:
        return load_checkpoint(self.path_for(name), expected_config, device)

    def exists(self, name: str) -> bool:
        return self.path_for(name).is_file()
