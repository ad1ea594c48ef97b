"""Verification, adversarial, reconstruction and same-pose losses.

All probability-based losses clamp their inputs to ``[NUM_EPS, 1 - NUM_EPS]``
and, when a ``stats`` counter is supplied, record how many scores needed
clamping.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, fields

import torch

NUM_EPS = 1e-7


class TrainingDivergence(RuntimeError):
    """A loss term became NaN or infinite."""

    def __init__(self, term, value):
        super().__init__(f"loss term {term} is not finite ({value})")
        self.term = term


@dataclass(frozen=True)
class LossWeights:
    lambda_id: float = 0.1
    lambda_pd: float = 0.1
    lambda_r: float = 10.0
    lambda_sp: float = 1.0
    label_smoothing: float = 0.1
    lambda_v: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{f.name} must be a finite non-negative number, got {v}")
        if self.label_smoothing >= 0.5:
            raise ValueError("label_smoothing must be in [0, 0.5)")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown loss config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


TERMS = ("L_v", "L_id_D", "L_id_G", "L_pd_D", "L_pd_G", "L_r", "L_sp", "total")


@dataclass
class LossReport:
    L_v: float = 0.0
    L_id_D: float = 0.0
    L_id_G: float = 0.0
    L_pd_D: float = 0.0
    L_pd_G: float = 0.0
    L_r: float = 0.0
    L_sp: float = 0.0
    total: float = 0.0

    def to_dict(self):
        return {k: float(v) for k, v in asdict(self).items()}

    def to_json(self, **extra):
        return json.dumps({**extra, "losses": self.to_dict()}, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: float(d[k]) for k in TERMS if k in d})


def _clamp(p, stats, name):
    if stats is not None:
        stats[name] += int(((p < NUM_EPS) | (p > 1 - NUM_EPS)).sum())
    return p.clamp(NUM_EPS, 1 - NUM_EPS)


def _as_branches(scores):
    if isinstance(scores, torch.Tensor):
        return [scores]
    return list(scores)


def _per_sample(scores):
    # patch maps reduce to one score per sample before the log
    return scores.reshape(scores.shape[0], -1).mean(dim=1) if scores.dim() > 1 else scores


def verification_loss(d, same, stats=None):
    """Binary cross-entropy between same-person probability ``d`` and labels."""
    d = _clamp(d, stats, "verification")
    same = same.to(d.dtype)
    return -(same * torch.log(d) + (1 - same) * torch.log1p(-d)).mean()


def adversarial_discriminator_loss(real_scores, fake_scores, smoothing=0.1, stats=None):
    """Discriminator-side adversarial loss, summed over branches.

    ``real_scores`` and ``fake_scores`` are tensors (or one tensor per branch)
    of per-sample scores or patch maps. Real samples use the one-sided
    smoothed target ``1 - smoothing``; fakes use target 0.
    """
    real, fake = _as_branches(real_scores), _as_branches(fake_scores)
    if not real or not fake or any(t.numel() == 0 for t in real + fake):
        raise ValueError("adversarial loss needs non-empty real and fake scores")
    target = 1.0 - smoothing
    total = 0.0
    for r in real:
        r = _clamp(_per_sample(r), stats, "adversarial")
        total = total - (target * torch.log(r) + smoothing * torch.log1p(-r)).mean()
    for f in fake:
        f = _clamp(_per_sample(f), stats, "adversarial")
        total = total - torch.log1p(-f).mean()
    return total


def adversarial_generator_loss(fake_scores, stats=None):
    """Non-saturating generator loss ``-log D(fake)``, summed over branches."""
    fake = _as_branches(fake_scores)
    if not fake or any(t.numel() == 0 for t in fake):
        raise ValueError("adversarial loss needs non-empty fake scores")
    total = 0.0
    for f in fake:
        f = _clamp(_per_sample(f), stats, "adversarial")
        total = total - torch.log(f).mean()
    return total


def reconstruction_loss(generated, truth, valid=None):
    """Mean absolute error over all pixels and channels.

    With a boolean ``valid`` mask only those samples contribute; if none are
    valid the loss is an exact zero that still carries a graph.
    """
    if generated.shape != truth.shape:
        raise ValueError(f"shape mismatch {tuple(generated.shape)} vs {tuple(truth.shape)}")
    if valid is None:
        return (generated - truth).abs().mean()
    valid = valid.to(torch.bool)
    if not bool(valid.any()):
        return generated.sum() * 0.0
    return (generated[valid] - truth[valid]).abs().mean()


def same_pose_loss(generated_1, generated_2, same=None):
    """Mean absolute difference between the two branches' generations.

    ``same`` (if given) must mark every row as a positive pair.
    """
    if same is not None and not bool((same > 0.5).all()):
        raise ValueError("same-pose loss is only defined on positive pairs")
    if generated_1.shape != generated_2.shape:
        raise ValueError("branch outputs differ in shape")
    return (generated_1 - generated_2).abs().mean()


def total_objective(parts, weights):
    """Weighted sum of the generator-side terms.

    ``parts`` maps term names (``L_v``, ``L_id_G``, ``L_pd_G``, ``L_r``,
    ``L_sp``) to tensors or floats; missing terms count as zero.
    """
    if isinstance(parts, LossReport):
        parts = parts.to_dict()
    for name, value in parts.items():
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(v):
            raise TrainingDivergence(name, v)
    get = lambda k: parts.get(k, 0.0)
    return (weights.lambda_v * get("L_v")
            + weights.lambda_id * get("L_id_G")
            + weights.lambda_pd * get("L_pd_G")
            + weights.lambda_r * get("L_r")
            + weights.lambda_sp * get("L_sp"))


def new_stats():
    return Counter()
