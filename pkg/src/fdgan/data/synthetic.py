"""Procedural stick-figure pedestrians with ground-truth landmarks.

Identity fixes clothing colours, skin and hair tone, body proportions and
whether the person carries a backpack. Each image draws a fresh pose
(limb angles, lean, facing direction), background and camera jitter, so two
images of one identity differ only in nuisance factors.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field, replace

import numpy as np

from ..pose import NUM_JOINTS
from .dataset import ReidDataset

_SPLIT_CODES = {"train": 0, "query": 1, "gallery": 2}

SKIN_TONES = (
    (0.96, 0.80, 0.69), (0.87, 0.67, 0.52), (0.72, 0.53, 0.38),
    (0.55, 0.38, 0.26), (0.38, 0.26, 0.18),
)
HAIR_TONES = ((0.08, 0.06, 0.05), (0.30, 0.20, 0.10), (0.55, 0.40, 0.20), (0.75, 0.70, 0.60))
BACKGROUNDS = (
    (0.78, 0.78, 0.76), (0.72, 0.74, 0.78), (0.80, 0.76, 0.70),
    (0.70, 0.73, 0.70), (0.84, 0.83, 0.80), (0.74, 0.70, 0.68),
)


@dataclass(frozen=True)
class SynthSpec:
    n_identities: int = 8
    images_per_identity: int = 10
    n_cameras: int = 6
    height: int = 64
    width: int = 32
    seed: int = 0
    identity_offset: int = 0
    split: str = "train"
    pose_variation: float = 1.0
    color_saturation: tuple = (0.45, 1.0)
    color_value: tuple = (0.25, 0.95)
    body_scale: tuple = (0.82, 1.0)
    backpack_prob: float = 0.4
    background_palette: tuple = field(default=BACKGROUNDS)
    noise_std: float = 0.02

    def __post_init__(self):
        for name in ("n_identities", "images_per_identity", "n_cameras", "height", "width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.identity_offset < 0:
            raise ValueError("identity_offset must be >= 0")
        if self.split not in _SPLIT_CODES:
            raise ValueError(f"unknown split {self.split!r}")
        if self.pose_variation < 0:
            raise ValueError("pose_variation must be >= 0")
        for name in ("color_saturation", "color_value", "body_scale"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is empty: {lo} > {hi}")
        if not self.background_palette:
            raise ValueError("background_palette is empty")


@dataclass(frozen=True)
class Appearance:
    torso: tuple
    legs: tuple
    skin: tuple
    hair: tuple
    shoes: tuple
    scale: float
    build: float
    long_sleeves: bool
    backpack: tuple | None


def _rng(*keys):
    return np.random.default_rng([int(k) for k in keys])


def _hsv(rng, spec):
    h = rng.uniform()
    s = rng.uniform(*spec.color_saturation)
    v = rng.uniform(*spec.color_value)
    return colorsys.hsv_to_rgb(h, s, v)


def identity_appearance(identity, spec):
    """Appearance attributes as a pure function of ``(seed, identity)``."""
    rng = _rng(spec.seed, 0xA77, identity)
    torso = _hsv(rng, spec)
    legs = _hsv(rng, spec)
    skin = SKIN_TONES[rng.integers(len(SKIN_TONES))]
    hair = HAIR_TONES[rng.integers(len(HAIR_TONES))]
    shoes = tuple(rng.uniform(0.05, 0.5) * np.ones(3))
    scale = rng.uniform(*spec.body_scale)
    build = rng.uniform(0.85, 1.2)
    long_sleeves = bool(rng.uniform() < 0.5)
    backpack = _hsv(rng, spec) if rng.uniform() < spec.backpack_prob else None
    return Appearance(torso, legs, skin, hair, shoes, scale, build, long_sleeves, backpack)


def camera_gain(camera, spec):
    rng = _rng(spec.seed, 0xCA7, camera)
    return rng.uniform(0.9, 1.1, size=3) * rng.uniform(0.92, 1.05)


def sample_pose(rng, appearance, height, width, pose_variation=1.0):
    """Draw an 18-joint skeleton. Returns ``(xy, visible, facing_back)``."""
    pv = pose_variation
    s = appearance.scale * height * rng.uniform(0.95, 1.05)
    build = appearance.build
    facing_back = bool(rng.uniform() < 0.5)

    # limb lengths in pixels
    torso, neck = 0.30 * s, 0.075 * s
    shoulder, hip = 0.085 * s * build, 0.055 * s * build
    upper_arm, forearm = 0.15 * s, 0.13 * s
    thigh, shin = 0.21 * s, 0.20 * s

    cx = width / 2.0 + rng.uniform(-1.5, 1.5) * width / 32
    hip_y = height * 0.95 - (thigh + shin) * rng.uniform(0.97, 1.0)
    lean = np.deg2rad(rng.uniform(-8, 8) * pv)
    up = np.array([np.sin(lean), -np.cos(lean)])
    across = np.array([np.cos(lean), np.sin(lean)])

    xy = np.zeros((NUM_JOINTS, 2))
    hip_c = np.array([cx, hip_y])
    neck_p = hip_c + up * torso
    xy[1] = neck_p
    # image-left is the person's right when facing the camera
    left_img, right_img = (2, 5), (5, 2)
    r_sh, l_sh = left_img if not facing_back else right_img
    xy[r_sh] = neck_p - across * shoulder
    xy[l_sh] = neck_p + across * shoulder
    r_hip, l_hip = (8, 11) if not facing_back else (11, 8)
    xy[r_hip] = hip_c - across * hip
    xy[l_hip] = hip_c + across * hip

    def limb(origin, side, angle, length):
        # angle from straight down, positive swings outward
        d = np.array([side * np.sin(angle), np.cos(angle)])
        return origin + d * length

    arms = ((r_sh, 3 if not facing_back else 6, 4 if not facing_back else 7, -1),
            (l_sh, 6 if not facing_back else 3, 7 if not facing_back else 4, +1))
    for sh, el, wr, side in arms:
        a1 = np.deg2rad(rng.uniform(4, 4 + 70 * pv))
        a2 = a1 + np.deg2rad(rng.uniform(-60 * pv, 60 * pv))
        xy[el] = limb(xy[sh], side, a1, upper_arm)
        xy[wr] = limb(xy[el], side, a2, forearm)
    legs = ((r_hip, 9 if not facing_back else 12, 10 if not facing_back else 13, -1),
            (l_hip, 12 if not facing_back else 9, 13 if not facing_back else 10, +1))
    for hp, kn, an, side in legs:
        a1 = np.deg2rad(rng.uniform(-3, 3 + 22 * pv))
        a2 = a1 + np.deg2rad(rng.uniform(-25 * pv, 25 * pv))
        xy[kn] = limb(xy[hp], side, a1, thigh)
        xy[an] = limb(xy[kn], side, a2, shin)

    head_c = neck_p + up * neck + across * rng.uniform(-0.01, 0.01) * s
    xy[0] = head_c
    eye_dx, eye_dy = 0.022 * s, -0.018 * s
    ear_dx = 0.045 * s
    sgn = 1 if not facing_back else -1
    xy[14] = head_c + np.array([-sgn * eye_dx, eye_dy])
    xy[15] = head_c + np.array([sgn * eye_dx, eye_dy])
    xy[16] = head_c + np.array([-sgn * ear_dx, 0.0])
    xy[17] = head_c + np.array([sgn * ear_dx, 0.0])

    visible = np.ones(NUM_JOINTS, dtype=bool)
    if facing_back:
        visible[[0, 14, 15]] = False
    inside = (xy[:, 0] >= 0) & (xy[:, 0] < width) & (xy[:, 1] >= 0) & (xy[:, 1] < height)
    return xy, visible & inside, facing_back


class _Canvas:
    """Supersampled RGB canvas addressed in output-pixel coordinates."""

    def __init__(self, height, width, background, ss=4):
        self.ss = ss
        self.rgb = np.empty((height * ss, width * ss, 3))
        self.rgb[:] = background
        self.gx = (np.arange(width * ss) + 0.5) / ss - 0.5
        self.gy = ((np.arange(height * ss) + 0.5) / ss - 0.5)[:, None]

    def capsule(self, a, b, radius, color):
        ab = b - a
        denom = float(ab @ ab)
        px, py = self.gx - a[0], self.gy - a[1]
        if denom == 0.0:
            t = 0.0
        else:
            t = np.clip((px * ab[0] + py * ab[1]) / denom, 0.0, 1.0)
        dx, dy = px - t * ab[0], py - t * ab[1]
        mask = dx * dx + dy * dy <= radius * radius
        self.rgb[mask] = color

    def disc(self, c, radius, color, upper_only=False):
        dx, dy = self.gx - c[0], self.gy - c[1]
        mask = dx * dx + dy * dy <= radius * radius
        if upper_only:
            mask &= dy <= -0.15 * radius
        self.rgb[mask] = color

    def rect(self, x0, y0, x1, y1, color):
        mask = (self.gx >= x0) & (self.gx <= x1) & (self.gy >= y0) & (self.gy <= y1)
        self.rgb[mask] = color

    def resolve(self):
        h, w = self.rgb.shape[0] // self.ss, self.rgb.shape[1] // self.ss
        return self.rgb.reshape(h, self.ss, w, self.ss, 3).mean(axis=(1, 3))


def render_person(appearance, xy, facing_back, height, width, background):
    """Rasterise one figure; returns an ``H x W x 3`` image in ``[0, 1]``."""
    c = _Canvas(height, width, background)
    s = appearance.scale * height
    limb_r = 0.032 * s * appearance.build
    hip_c = (xy[8] + xy[11]) / 2

    # legs, then torso, arms and head
    for hp, kn, an in ((8, 9, 10), (11, 12, 13)):
        c.capsule(xy[hp], xy[kn], limb_r * 1.1, appearance.legs)
        c.capsule(xy[kn], xy[an], limb_r, appearance.legs)
        c.disc(xy[an] + np.array([0, 0.01 * s]), limb_r * 1.2, appearance.shoes)
    c.capsule(xy[8], xy[11], limb_r * 1.4, appearance.legs)
    shoulder_w = float(np.linalg.norm(xy[2] - xy[5])) / 2
    c.capsule(xy[1] + (hip_c - xy[1]) * 0.15, hip_c, shoulder_w * 0.95, appearance.torso)
    c.capsule(xy[2], xy[5], limb_r * 1.2, appearance.torso)
    if appearance.backpack is not None:
        if facing_back:
            top = xy[1][1] + 0.04 * s
            c.rect(hip_c[0] - shoulder_w * 0.7, top, hip_c[0] + shoulder_w * 0.7,
                   top + 0.19 * s, appearance.backpack)
        else:
            for sh in (2, 5):
                c.capsule(xy[sh], xy[sh] + (hip_c - xy[1]) * 0.55, limb_r * 0.45, appearance.backpack)
    sleeve = appearance.torso if appearance.long_sleeves else appearance.skin
    for sh, el, wr in ((2, 3, 4), (5, 6, 7)):
        c.capsule(xy[sh], xy[el], limb_r * 0.9, appearance.torso)
        c.capsule(xy[el], xy[wr], limb_r * 0.75, sleeve)
        c.disc(xy[wr], limb_r * 0.9, appearance.skin)
    head_r = 0.058 * s
    c.capsule(xy[1], xy[0], limb_r * 0.7, appearance.skin)
    c.disc(xy[0], head_r, appearance.skin)
    if facing_back:
        c.disc(xy[0], head_r, appearance.hair)
    else:
        c.disc(xy[0], head_r * 1.02, appearance.hair, upper_only=True)
    return c.resolve()


def _image_name(identity, camera, index):
    return f"{identity:04d}_c{camera}s1_{index:06d}_01"


def generate_synthetic_dataset(spec):
    """Render ``n_identities x images_per_identity`` samples, fully seeded."""
    if not isinstance(spec, SynthSpec):
        raise TypeError("expected a SynthSpec")
    h, w = spec.height, spec.width
    n = spec.n_identities * spec.images_per_identity
    images = np.empty((n, h, w, 3), dtype=np.float32)
    xy = np.empty((n, NUM_JOINTS, 2))
    vis = np.empty((n, NUM_JOINTS), dtype=bool)
    identities, cameras, names = [], [], []
    split_code = _SPLIT_CODES[spec.split]
    row = 0
    for i in range(spec.n_identities):
        pid = spec.identity_offset + i
        look = identity_appearance(pid, spec)
        for j in range(spec.images_per_identity):
            cam = j % spec.n_cameras + 1
            rng = _rng(spec.seed, pid, split_code, j)
            joints, visible, back = sample_pose(rng, look, h, w, spec.pose_variation)
            palette = spec.background_palette
            bg = np.asarray(palette[rng.integers(len(palette))]) * rng.uniform(0.95, 1.05)
            img = render_person(look, joints, back, h, w, bg)
            # vertical shading and camera response
            img = img * (1.0 + 0.06 * (np.linspace(-1, 1, h)[:, None, None] * rng.uniform(-1, 1)))
            img = img * camera_gain(cam, spec)
            if spec.noise_std > 0:
                img = img + rng.normal(0.0, spec.noise_std, size=img.shape)
            images[row] = np.clip(img, 0.0, 1.0) * 2.0 - 1.0
            xy[row], vis[row] = joints, visible
            identities.append(pid)
            cameras.append(cam)
            names.append(_image_name(pid, cam, split_code * 100000 + j))
            row += 1
    return ReidDataset(
        images, identities, cameras, names=names, splits=[spec.split] * n,
        landmarks_xy=xy, landmarks_visible=vis, has_landmarks=np.ones(n, dtype=bool),
    )


def generate_heldout_split(spec, queries_per_identity=1, query_pose_variation=0.25,
                           gallery_pose_variation=1.6):
    """Query/gallery sets for unseen identities with a deliberate pose gap.

    Queries are drawn with near-canonical poses and gallery images with wide
    pose variation, so ranking must bridge large pose differences.
    """
    query = generate_synthetic_dataset(replace(
        spec, split="query", images_per_identity=queries_per_identity,
        pose_variation=query_pose_variation))
    gallery = generate_synthetic_dataset(replace(
        spec, split="gallery", pose_variation=gallery_pose_variation))
    return query, gallery
