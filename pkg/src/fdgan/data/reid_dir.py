"""Market-1501 style directories: ``<4-digit id>_c<cam>...`` image files."""

from __future__ import annotations

import logging
import re
from pathlib import Path

import numpy as np
from PIL import Image

from ..pose import NUM_JOINTS, PoseLandmarks, read_landmark_file, write_landmark_file
from .dataset import ReidDataset

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png", ".bmp"}
FILENAME_RE = re.compile(r"^(\d{4})_c(\d)")

# Market-1501 subdirectory -> split tag
MARKET_SPLITS = {
    "bounding_box_train": "train",
    "query": "query",
    "bounding_box_test": "gallery",
}


def parse_filename(name):
    """``0186_c3s1_039526_01.jpg`` -> ``(186, 3)``; ``None`` if unparseable."""
    m = FILENAME_RE.match(Path(name).name)
    if m is None:
        return None
    return int(m.group(1)), int(m.group(2))


def _lookup(records, path):
    for key in (path.name, path.stem):
        if key in records:
            return records[key]
    return None


def load_reid_directory(path, landmark_file=None, size=(64, 32), split="train"):
    """Load every parseable image under ``path``.

    Images are resized to ``size`` (height, width) and mapped to [-1, 1];
    landmarks are rescaled from the original frame. Unparseable filenames
    are skipped and counted in ``dataset.skipped``; images without a
    landmark record are kept with ``has_landmarks`` false.
    """
    path = Path(path)
    height, width = size
    records = read_landmark_file(landmark_file) if landmark_file else {}
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES) if path.is_dir() else []

    images, ids, cams, names = [], [], [], []
    xy, vis, has = [], [], []
    skipped = 0
    for f in files:
        parsed = parse_filename(f.name)
        if parsed is None:
            skipped += 1
            continue
        with Image.open(f) as im:
            im = im.convert("RGB")
            orig_w, orig_h = im.size
            if (orig_h, orig_w) != (height, width):
                im = im.resize((width, height), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 127.5 - 1.0
        images.append(arr)
        ids.append(parsed[0])
        cams.append(parsed[1])
        names.append(f.stem)
        triples = _lookup(records, f)
        if triples is None:
            xy.append(np.full((NUM_JOINTS, 2), -1.0))
            vis.append(np.zeros(NUM_JOINTS, dtype=bool))
            has.append(False)
        else:
            lm = PoseLandmarks.from_triples(triples, orig_h, orig_w).rescaled(height, width)
            xy.append(lm.xy)
            vis.append(lm.visible)
            has.append(True)
    if skipped:
        log.warning("skipped %d files with unparseable names in %s", skipped, path)

    if not images:
        ds = ReidDataset(np.zeros((0, height, width, 3)), [], [])
    else:
        ds = ReidDataset(
            np.stack(images), ids, cams, names=names, splits=[split] * len(images),
            landmarks_xy=np.stack(xy), landmarks_visible=np.stack(vis),
            has_landmarks=np.array(has),
        )
    ds.skipped = skipped
    return ds


def load_market_layout(root, landmark_file=None, size=(64, 32)):
    """Load ``{split: dataset}`` from the three Market-1501 subdirectories."""
    root = Path(root)
    if landmark_file is None and (root / "landmarks.csv").exists():
        landmark_file = root / "landmarks.csv"
    return {
        split: load_reid_directory(root / sub, landmark_file, size=size, split=split)
        for sub, split in MARKET_SPLITS.items()
    }


def to_uint8(image):
    return np.clip(np.rint((np.asarray(image) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def write_reid_directory(root, datasets, landmark_name="landmarks.csv"):
    """Write split datasets as PNG files in the Market-1501 layout.

    ``datasets`` maps a split tag to a :class:`ReidDataset`. One landmark
    CSV at ``root/landmark_name`` covers every written image.
    """
    root = Path(root)
    subdir = {v: k for k, v in MARKET_SPLITS.items()}
    records = {}
    for split, ds in datasets.items():
        out = root / subdir[split]
        out.mkdir(parents=True, exist_ok=True)
        for i in range(len(ds)):
            fname = f"{ds.names[i]}.png"
            Image.fromarray(to_uint8(ds.images[i])).save(out / fname, optimize=False)
            if ds.has_landmarks[i]:
                records[fname] = np.concatenate(
                    [ds.landmarks_xy[i], ds.landmarks_visible[i][:, None]], axis=1)
    write_landmark_file(root / landmark_name, records)
    return root / landmark_name
