"""Pose landmarks and Gaussian heatmap rendering.

Joints follow the 18-point OpenPose/COCO ordering:

    idx  joint            idx  joint
    0    nose             9    right_knee
    1    neck             10   right_ankle
    2    right_shoulder   11   left_hip
    3    right_elbow      12   left_knee
    4    right_wrist      13   left_ankle
    5    left_shoulder    14   right_eye
    6    left_elbow       15   left_eye
    7    left_wrist       16   right_ear
    8    right_hip        17   left_ear

Coordinates are in pixels, ``x`` along the width axis and ``y`` along the
height axis, with pixel ``(u, v)`` centred on integer coordinates.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

JOINT_NAMES = (
    "nose", "neck",
    "right_shoulder", "right_elbow", "right_wrist",
    "left_shoulder", "left_elbow", "left_wrist",
    "right_hip", "right_knee", "right_ankle",
    "left_hip", "left_knee", "left_ankle",
    "right_eye", "left_eye", "right_ear", "left_ear",
)
NUM_JOINTS = len(JOINT_NAMES)

# (joint_a, joint_b) pairs used for drawing skeletons
LIMBS = (
    (1, 2), (1, 5), (2, 3), (3, 4), (5, 6), (6, 7),
    (1, 8), (8, 9), (9, 10), (1, 11), (11, 12), (12, 13),
    (1, 0), (0, 14), (14, 16), (0, 15), (15, 17),
)

DEFAULT_BANDWIDTH_RANGE = (4.0, 6.0)


@dataclass(frozen=True, eq=False)
class PoseLandmarks:
    """18 body keypoints inside a ``height x width`` frame.

    Landmarks that fall outside the frame are marked invisible on
    construction, so ``visible`` always implies an in-frame coordinate.
    """

    xy: np.ndarray
    visible: np.ndarray
    height: int
    width: int

    def __post_init__(self):
        xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        visible = np.asarray(self.visible, dtype=bool).reshape(-1)
        if xy.shape != (NUM_JOINTS, 2) or visible.shape != (NUM_JOINTS,):
            raise ValueError(f"expected {NUM_JOINTS} landmarks, got {xy.shape[0]}")
        if self.height <= 0 or self.width <= 0:
            raise ValueError(f"empty frame {self.height}x{self.width}")
        inside = (
            np.isfinite(xy).all(axis=1)
            & (xy[:, 0] >= 0) & (xy[:, 0] < self.width)
            & (xy[:, 1] >= 0) & (xy[:, 1] < self.height)
        )
        visible = visible & inside
        xy = np.where(visible[:, None], xy, -1.0)
        xy.setflags(write=False)
        visible.setflags(write=False)
        object.__setattr__(self, "xy", xy)
        object.__setattr__(self, "visible", visible)

    @classmethod
    def from_triples(cls, triples, height, width):
        arr = np.asarray(triples, dtype=np.float64).reshape(NUM_JOINTS, 3)
        return cls(arr[:, :2], arr[:, 2] > 0, height, width)

    def to_triples(self):
        return np.concatenate([self.xy, self.visible[:, None].astype(np.float64)], axis=1)

    def rescaled(self, height, width):
        """Map the landmarks into a ``height x width`` frame."""
        scale = np.array([width / self.width, height / self.height])
        return PoseLandmarks(self.xy * scale, self.visible, height, width)

    def __eq__(self, other):
        if not isinstance(other, PoseLandmarks):
            return NotImplemented
        return (
            (self.height, self.width) == (other.height, other.width)
            and np.array_equal(self.visible, other.visible)
            and np.array_equal(self.xy, other.xy)
        )


@dataclass(frozen=True, eq=False)
class PoseMap:
    """``18 x H x W`` heatmap stack and the bandwidth it was rendered with."""

    channels: np.ndarray
    bandwidth: float

    @property
    def shape(self):
        return self.channels.shape


def render_heatmaps(xy, visible, bandwidth, height, width, dtype=np.float32):
    """Vectorised renderer over a leading batch axis.

    ``xy`` is ``(..., 18, 2)``, ``visible`` is ``(..., 18)`` and ``bandwidth``
    broadcasts against the leading axes. Returns ``(..., 18, height, width)``.
    Joints outside the grid render as empty channels.
    """
    if height <= 0 or width <= 0:
        raise ValueError(f"empty output size {height}x{width}")
    xy = np.asarray(xy, dtype=np.float64)
    visible = np.asarray(visible, dtype=bool)
    sigma = np.asarray(bandwidth, dtype=np.float64)
    if np.any(sigma <= 0) or not np.all(np.isfinite(sigma)):
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    lead = xy.shape[:-2]
    sigma = np.broadcast_to(sigma, lead)[..., None, None, None]

    x = xy[..., 0]
    y = xy[..., 1]
    inside = visible & (x >= 0) & (x < width) & (y >= 0) & (y < height)
    x = np.where(inside, x, 0.0)[..., None, None]
    y = np.where(inside, y, 0.0)[..., None, None]

    u = np.arange(width, dtype=np.float64)
    v = np.arange(height, dtype=np.float64)[:, None]
    dx2 = (u - x) ** 2
    dy2 = (v - y) ** 2
    maps = np.exp(-(dx2 + dy2) / (2.0 * sigma ** 2))
    maps *= inside[..., None, None]
    return maps.astype(dtype, copy=False)


def render_pose_map(landmarks, bandwidth, out_size=None):
    """Render one amplitude-1 Gaussian per visible landmark.

    ``out_size`` defaults to the landmark frame. Callers rescale the
    landmarks beforehand when the output size differs.
    """
    height, width = out_size if out_size is not None else (landmarks.height, landmarks.width)
    channels = render_heatmaps(landmarks.xy, landmarks.visible, bandwidth, height, width)
    return PoseMap(channels, float(bandwidth))


def sample_bandwidth(rng, bandwidth_range=DEFAULT_BANDWIDTH_RANGE, size=None):
    lo, hi = bandwidth_range
    if lo > hi:
        raise ValueError(f"empty bandwidth range [{lo}, {hi}]")
    if lo <= 0:
        raise ValueError(f"bandwidth must be positive, got lower bound {lo}")
    if lo == hi:
        return float(lo) if size is None else np.full(size, float(lo))
    return rng.uniform(lo, hi, size=size)


# ---------------------------------------------------------------------------
# landmark files

_SPLIT = re.compile(r"[,\s]+")


def read_landmark_file(path):
    """Parse ``name x0 y0 v0 ... x17 y17 v17`` records.

    Comma and whitespace delimiters are both accepted. Lines starting with
    ``#`` and a non-numeric header row are ignored. Returns a dict mapping
    image name to an ``(18, 3)`` array of ``(x, y, visible)`` triples.
    """
    records = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = _SPLIT.split(line)
            try:
                values = np.array([float(f) for f in fields[1:]])
            except ValueError:
                if lineno == 1:
                    continue
                raise ValueError(f"{path}:{lineno}: non-numeric landmark field") from None
            if values.size != 3 * NUM_JOINTS:
                raise ValueError(
                    f"{path}:{lineno}: expected {3 * NUM_JOINTS} values after the "
                    f"image name (x, y, v per joint), got {values.size}"
                )
            records[fields[0]] = values.reshape(NUM_JOINTS, 3)
    return records


def write_landmark_file(path, records):
    """Write ``{name: (18, 3) triples}`` as CSV with a header row."""
    header = ["name"] + [f"{j}_{c}" for j in JOINT_NAMES for c in ("x", "y", "v")]
    lines = [",".join(header)]
    for name, triples in records.items():
        triples = np.asarray(triples, dtype=np.float64).reshape(NUM_JOINTS, 3)
        cells = []
        for x, y, v in triples:
            if v > 0:
                cells += [f"{x:.3f}", f"{y:.3f}", "1"]
            else:
                cells += ["-1", "-1", "0"]
        lines.append(",".join([name] + cells))
    Path(path).write_text("\n".join(lines) + "\n")
