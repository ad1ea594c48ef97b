import numpy as np
import pytest
import torch

from fdgan.data import PairSampler, SynthSpec, generate_synthetic_dataset
from fdgan.visualize import compose_grid, heatmap_image, save_grid, skeleton_image, to_uint8_hwc, training_grid


def test_to_uint8_accepts_chw_tensor():
    img = to_uint8_hwc(torch.ones(3, 8, 4))
    assert img.shape == (8, 4, 3) and img.dtype == np.uint8 and (img == 255).all()
    assert (to_uint8_hwc(-np.ones((8, 4, 3))) == 0).all()


def test_skeleton_and_heatmap_panels():
    xy = np.tile([[10.0, 20.0]], (18, 1)) + np.arange(18)[:, None]
    vis = np.ones(18, dtype=bool)
    sk = skeleton_image(xy, vis, 64, 32)
    assert sk.shape == (64, 32, 3) and sk.any()
    assert not skeleton_image(xy, np.zeros(18, bool), 64, 32).any()
    hm = heatmap_image(np.zeros((18, 64, 32)))
    assert hm.shape == (64, 32, 3)


def test_grid_layout(tmp_path):
    panel = np.zeros((8, 4, 3), np.uint8)
    grid = compose_grid([[panel] * 3, [panel] * 3])
    assert grid.shape[0] > 16 and grid.shape[1] > 12
    with pytest.raises(ValueError):
        compose_grid([])
    assert save_grid(grid, tmp_path / "g" / "x.png").exists()


def test_training_grid_rows():
    ds = generate_synthetic_dataset(SynthSpec(n_identities=3, images_per_identity=4))
    batch = PairSampler(ds, 8).sample(5, 2, np.random.default_rng(0))
    idx = batch.target_index
    grid = training_grid(batch, batch.truth1, ds.landmarks_xy[idx], ds.landmarks_visible[idx], max_rows=3)
    ref = training_grid(batch, batch.truth1, ds.landmarks_xy[idx], ds.landmarks_visible[idx], max_rows=1)
    assert grid.shape[1] == ref.shape[1] and grid.shape[0] > 2 * ref.shape[0]
