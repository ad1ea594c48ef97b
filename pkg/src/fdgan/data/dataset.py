from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..pose import NUM_JOINTS, PoseLandmarks

SPLITS = ("train", "query", "gallery")


@dataclass(frozen=True, eq=False)
class PersonSample:
    image: np.ndarray  # H x W x 3, values in [-1, 1]
    identity: int
    camera: int
    landmarks: Optional[PoseLandmarks]
    split: str = "train"
    name: str = ""

    def __post_init__(self):
        if self.identity < 0 or self.camera < 0:
            raise ValueError(f"negative label in sample {self.name!r}")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")


class ReidDataset:
    """Immutable column store of person samples sharing one image size.

    Images live in a single ``(N, H, W, 3)`` float32 array. Landmarks are
    kept as ``(N, 18, 2)`` coordinates plus ``(N, 18)`` visibility, with
    ``has_landmarks`` flagging rows whose pose is known at all.
    """

    def __init__(self, images, identities, cameras, names=None, splits=None,
                 landmarks_xy=None, landmarks_visible=None, has_landmarks=None):
        images = np.asarray(images, dtype=np.float32)
        if images.ndim != 4 or images.shape[-1] != 3:
            if images.size == 0:
                images = images.reshape(0, 1, 1, 3)
            else:
                raise ValueError(f"images must be N x H x W x 3, got {images.shape}")
        n = len(images)
        self.images = images
        self.identities = np.asarray(identities, dtype=np.int64).reshape(n)
        self.cameras = np.asarray(cameras, dtype=np.int64).reshape(n)
        if n and (self.identities.min() < 0 or self.cameras.min() < 0):
            raise ValueError("identity and camera labels must be non-negative")
        self.names = tuple(names) if names is not None else tuple(f"{i:06d}" for i in range(n))
        self.splits = tuple(splits) if splits is not None else ("train",) * n
        if landmarks_xy is None:
            landmarks_xy = np.full((n, NUM_JOINTS, 2), -1.0)
            landmarks_visible = np.zeros((n, NUM_JOINTS), dtype=bool)
            has_landmarks = np.zeros(n, dtype=bool)
        self.landmarks_xy = np.asarray(landmarks_xy, dtype=np.float64).reshape(n, NUM_JOINTS, 2)
        self.landmarks_visible = np.asarray(landmarks_visible, dtype=bool).reshape(n, NUM_JOINTS)
        if has_landmarks is None:
            has_landmarks = np.ones(n, dtype=bool)
        self.has_landmarks = np.asarray(has_landmarks, dtype=bool).reshape(n)
        if len(self.names) != n or len(self.splits) != n:
            raise ValueError("names/splits length does not match image count")
        for arr in (self.images, self.identities, self.cameras, self.landmarks_xy,
                    self.landmarks_visible, self.has_landmarks):
            arr.setflags(write=False)

    @classmethod
    def from_samples(cls, samples):
        samples = list(samples)
        if not samples:
            return cls(np.zeros((0, 1, 1, 3)), [], [])
        xy = np.full((len(samples), NUM_JOINTS, 2), -1.0)
        vis = np.zeros((len(samples), NUM_JOINTS), dtype=bool)
        has = np.zeros(len(samples), dtype=bool)
        for i, s in enumerate(samples):
            if s.landmarks is not None:
                xy[i], vis[i], has[i] = s.landmarks.xy, s.landmarks.visible, True
        return cls(
            np.stack([s.image for s in samples]),
            [s.identity for s in samples],
            [s.camera for s in samples],
            names=[s.name for s in samples],
            splits=[s.split for s in samples],
            landmarks_xy=xy, landmarks_visible=vis, has_landmarks=has,
        )

    def __len__(self):
        return len(self.images)

    @property
    def image_size(self):
        return self.images.shape[1:3]

    def landmarks(self, index):
        if not self.has_landmarks[index]:
            return None
        h, w = self.image_size
        return PoseLandmarks(self.landmarks_xy[index], self.landmarks_visible[index], h, w)

    def __getitem__(self, index):
        return PersonSample(
            image=self.images[index],
            identity=int(self.identities[index]),
            camera=int(self.cameras[index]),
            landmarks=self.landmarks(index),
            split=self.splits[index],
            name=self.names[index],
        )

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def subset(self, indices):
        idx = np.asarray(indices, dtype=np.int64)
        return ReidDataset(
            self.images[idx], self.identities[idx], self.cameras[idx],
            names=[self.names[i] for i in idx], splits=[self.splits[i] for i in idx],
            landmarks_xy=self.landmarks_xy[idx], landmarks_visible=self.landmarks_visible[idx],
            has_landmarks=self.has_landmarks[idx],
        )

    def split(self, name):
        return self.subset([i for i, s in enumerate(self.splits) if s == name])

    def without_landmarks(self):
        """Same images and labels with every pose annotation dropped."""
        return ReidDataset(self.images, self.identities, self.cameras,
                           names=self.names, splits=self.splits)

    def identity_index(self, require_landmarks=False):
        """Map identity -> sorted array of row indices."""
        index = {}
        for i, pid in enumerate(self.identities):
            if require_landmarks and not self.has_landmarks[i]:
                continue
            index.setdefault(int(pid), []).append(i)
        return {k: np.array(v, dtype=np.int64) for k, v in sorted(index.items())}


def concat_datasets(*datasets):
    datasets = [d for d in datasets if len(d)]
    if not datasets:
        return ReidDataset(np.zeros((0, 1, 1, 3)), [], [])
    return ReidDataset(
        np.concatenate([d.images for d in datasets]),
        np.concatenate([d.identities for d in datasets]),
        np.concatenate([d.cameras for d in datasets]),
        names=[n for d in datasets for n in d.names],
        splits=[s for d in datasets for s in d.splits],
        landmarks_xy=np.concatenate([d.landmarks_xy for d in datasets]),
        landmarks_visible=np.concatenate([d.landmarks_visible for d in datasets]),
        has_landmarks=np.concatenate([d.has_landmarks for d in datasets]),
    )
