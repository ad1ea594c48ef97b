"""Siamese pair batches with target-pose assignment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..pose import DEFAULT_BANDWIDTH_RANGE, render_heatmaps, sample_bandwidth


@dataclass
class PairBatch:
    """A batch of ``B`` image pairs in NCHW tensors.

    ``target_pose`` is shared by both branches of a pair. ``truth1`` is always
    present; ``truth2`` is only meaningful where ``has_truth2`` is true (the
    positive pairs), otherwise it holds zeros.
    """

    x1: torch.Tensor
    x2: torch.Tensor
    same: torch.Tensor  # float {0, 1}
    target_pose: torch.Tensor  # B x 18 x H x W
    truth1: torch.Tensor
    truth2: torch.Tensor
    has_truth1: torch.Tensor  # bool
    has_truth2: torch.Tensor  # bool
    noise: torch.Tensor  # B x d_z
    bandwidths: np.ndarray
    index1: np.ndarray
    index2: np.ndarray
    target_index: np.ndarray

    def __len__(self):
        return len(self.index1)

    @property
    def positive(self):
        return self.same > 0.5


def to_nchw(images):
    return torch.from_numpy(np.ascontiguousarray(np.asarray(images, dtype=np.float32).transpose(0, 3, 1, 2)))


class PairSampler:
    """Draws :class:`PairBatch` objects from one dataset.

    Positive pair: three distinct images of one identity; the third supplies
    the target pose and serves as ground truth for both branches. Negative
    pair: two distinct images of identity ``a`` and one of identity ``b``;
    the second ``a`` image supplies the target pose and branch-1 ground
    truth, branch 2 has none. Only images with landmarks are used as pose
    targets or inputs.
    """

    def __init__(self, dataset, noise_dim, bandwidth_range=DEFAULT_BANDWIDTH_RANGE,
                 pose_augmentation=True):
        self.dataset = dataset
        self.noise_dim = noise_dim
        self.bandwidth_range = tuple(bandwidth_range)
        self.pose_augmentation = pose_augmentation
        # validates the range up front
        sample_bandwidth(np.random.default_rng(0), self.bandwidth_range)
        by_id = dataset.identity_index(require_landmarks=True)
        self.by_id = by_id
        self.pos_ids = np.array([k for k, v in by_id.items() if len(v) >= 3], dtype=np.int64)
        self.anchor_ids = np.array([k for k, v in by_id.items() if len(v) >= 2], dtype=np.int64)
        self.all_ids = np.array(list(by_id), dtype=np.int64)

    def _bandwidths(self, rng, n):
        if self.pose_augmentation:
            return np.asarray(sample_bandwidth(rng, self.bandwidth_range, size=n), dtype=np.float64).reshape(n)
        lo, hi = self.bandwidth_range
        return np.full(n, (lo + hi) / 2.0)

    def sample(self, batch_pairs, positive_pairs, rng, render=True):
        """``render=False`` skips heatmap rendering (``target_pose`` is None)."""
        if not 0 <= positive_pairs <= batch_pairs or batch_pairs < 1:
            raise ValueError(f"need 0 <= positive_pairs ({positive_pairs}) <= batch_pairs ({batch_pairs})")
        if positive_pairs and len(self.pos_ids) == 0:
            raise ValueError("no identity has 3 annotated images; cannot form positive pairs")
        if positive_pairs < batch_pairs and (len(self.anchor_ids) == 0 or len(self.all_ids) < 2):
            raise ValueError("need >= 2 identities (one with 2 annotated images) for negative pairs")

        i1 = np.empty(batch_pairs, dtype=np.int64)
        i2 = np.empty(batch_pairs, dtype=np.int64)
        it = np.empty(batch_pairs, dtype=np.int64)
        for b in range(positive_pairs):
            pid = self.pos_ids[rng.integers(len(self.pos_ids))]
            i1[b], i2[b], it[b] = rng.choice(self.by_id[int(pid)], size=3, replace=False)
        for b in range(positive_pairs, batch_pairs):
            a = self.anchor_ids[rng.integers(len(self.anchor_ids))]
            others = self.all_ids[self.all_ids != a]
            other = others[rng.integers(len(others))]
            i1[b], it[b] = rng.choice(self.by_id[int(a)], size=2, replace=False)
            i2[b] = self.by_id[int(other)][rng.integers(len(self.by_id[int(other)]))]

        ds = self.dataset
        h, w = ds.image_size
        sigma = self._bandwidths(rng, batch_pairs)
        poses = None
        if render:
            poses = torch.from_numpy(
                render_heatmaps(ds.landmarks_xy[it], ds.landmarks_visible[it], sigma, h, w))
        noise = rng.standard_normal((batch_pairs, self.noise_dim)).astype(np.float32)

        same = np.zeros(batch_pairs, dtype=np.float32)
        same[:positive_pairs] = 1.0
        truth = to_nchw(ds.images[it])
        has2 = same > 0.5
        truth2 = truth * torch.from_numpy(has2.astype(np.float32))[:, None, None, None]
        return PairBatch(
            x1=to_nchw(ds.images[i1]),
            x2=to_nchw(ds.images[i2]),
            same=torch.from_numpy(same),
            target_pose=poses,
            truth1=truth,
            truth2=truth2,
            has_truth1=torch.ones(batch_pairs, dtype=torch.bool),
            has_truth2=torch.from_numpy(has2),
            noise=torch.from_numpy(noise),
            bandwidths=sigma,
            index1=i1, index2=i2, target_index=it,
        )


def sample_pair_batch(dataset, batch_pairs=128, positive_pairs=32, rng=None, noise_dim=256,
                      bandwidth_range=DEFAULT_BANDWIDTH_RANGE, pose_augmentation=True):
    rng = rng if rng is not None else np.random.default_rng()
    sampler = PairSampler(dataset, noise_dim, bandwidth_range, pose_augmentation)
    return sampler.sample(batch_pairs, positive_pairs, rng)
