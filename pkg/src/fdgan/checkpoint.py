"""Single-file training checkpoints.

Layout (a ``torch.save`` archive of one dict):

    format        "fdgan-checkpoint"
    version       CHECKPOINT_VERSION
    stage         1, 2 or 3
    epoch         last epoch touched
    iteration     iterations completed within the stage
    model_config  ModelConfig as a dict
    loss_weights  LossWeights as a dict
    weights       {group: state_dict} for E, G, V, D_id, D_pd (stage 1: E, V)
    optimizers    {block: optimizer state_dict}
    rng           numpy bit-generator state
    running       running loss averages
    stats         saturation counters
"""

from __future__ import annotations

import hashlib
import io
from pathlib import Path

import torch

FORMAT = "fdgan-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(payload, path):
    payload = {"format": FORMAT, "version": CHECKPOINT_VERSION, **payload}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(payload, buf)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)
    return path


def load_checkpoint(path, stages=None):
    """Load and validate a checkpoint; ``stages`` restricts accepted stage tags."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not an FD-GAN checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {payload.get('version')} != supported {CHECKPOINT_VERSION}")
    if stages is not None and payload.get("stage") not in stages:
        raise CheckpointError(
            f"{path}: stage-{payload.get('stage')} checkpoint where stage {sorted(stages)} was required")
    return payload


def state_digest(module):
    """SHA-256 over every parameter and buffer of ``module``."""
    h = hashlib.sha256()
    if module is None:
        return h.hexdigest()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
