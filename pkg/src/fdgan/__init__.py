"""Pose-invariant person re-identification via a Siamese encoder trained with
pose-guided image generation."""

__version__ = "0.1.0"

from .losses import LossReport, LossWeights, TrainingDivergence  # noqa: E402
from .models import FDGAN, ModelConfig  # noqa: E402

__all__ = ["FDGAN", "ModelConfig", "LossWeights", "LossReport", "TrainingDivergence", "__version__"]
