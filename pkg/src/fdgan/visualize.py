"""Image grids for inspecting generations: input | pose | generated | truth."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .pose import LIMBS, NUM_JOINTS

PAD = 2


def to_uint8_hwc(image):
    """[-1, 1] image (HWC or CHW, numpy or torch) -> uint8 HWC."""
    a = image.detach().cpu().numpy() if hasattr(image, "detach") else np.asarray(image)
    if a.ndim == 3 and a.shape[0] == 3 and a.shape[-1] != 3:
        a = a.transpose(1, 2, 0)
    return np.clip(np.round((a + 1.0) * 127.5), 0, 255).astype(np.uint8)


def skeleton_image(xy, visible, height, width, scale=1):
    """Stick-figure drawing of 18 joints on a black canvas."""
    img = Image.new("RGB", (width * scale, height * scale))
    draw = ImageDraw.Draw(img)
    xy = np.asarray(xy, dtype=np.float64) * scale
    visible = np.asarray(visible, dtype=bool)
    for k, (a, b) in enumerate(LIMBS):
        if visible[a] and visible[b]:
            hue = k / len(LIMBS)
            color = tuple(int(255 * c) for c in _hue_rgb(hue))
            draw.line([tuple(xy[a]), tuple(xy[b])], fill=color, width=max(1, scale))
    for j in range(NUM_JOINTS):
        if visible[j]:
            x, y = xy[j]
            draw.ellipse([x - scale, y - scale, x + scale, y + scale], fill=(255, 255, 255))
    return np.asarray(img)


def heatmap_image(pose_map):
    """Max over joint channels, shown in grey."""
    a = pose_map.detach().cpu().numpy() if hasattr(pose_map, "detach") else np.asarray(pose_map)
    m = np.clip(a.max(axis=0), 0.0, 1.0)
    return np.repeat((m * 255).astype(np.uint8)[..., None], 3, axis=2)


def _hue_rgb(h):
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    return [(1, f, 0), (1 - f, 1, 0), (0, 1, f), (0, 1 - f, 1), (f, 0, 1), (1, 0, 1 - f)][i]


def compose_grid(rows, pad=PAD, background=255):
    """Tile a list of rows (each a list of equal-size uint8 HWC panels)."""
    if not rows or not rows[0]:
        raise ValueError("empty grid")
    h, w = rows[0][0].shape[:2]
    ncol = max(len(r) for r in rows)
    grid = np.full((len(rows) * (h + pad) + pad, ncol * (w + pad) + pad, 3), background, np.uint8)
    for i, row in enumerate(rows):
        for j, panel in enumerate(row):
            if panel.shape[:2] != (h, w):
                raise ValueError(f"panel {i},{j} has shape {panel.shape}, expected {(h, w)}")
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            grid[y:y + h, x:x + w] = panel
    return grid


def save_grid(grid, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(grid).save(path, format="PNG")
    return path


def training_grid(batch, generated, landmarks_xy, landmarks_visible, max_rows=8):
    """One row per pair branch 1: input | target skeleton | generated | truth."""
    h, w = batch.x1.shape[2:]
    rows = []
    for i in range(min(max_rows, len(batch))):
        rows.append([
            to_uint8_hwc(batch.x1[i]),
            skeleton_image(landmarks_xy[i], landmarks_visible[i], h, w),
            to_uint8_hwc(generated[i]),
            to_uint8_hwc(batch.truth1[i]),
        ])
    return compose_grid(rows)
