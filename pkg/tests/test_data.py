import numpy as np
import pytest

from fdgan.data import (
    PairSampler,
    ReidDataset,
    SynthSpec,
    concat_datasets,
    generate_heldout_split,
    generate_synthetic_dataset,
    load_market_layout,
    load_reid_directory,
    parse_filename,
    write_reid_directory,
)


@pytest.fixture(scope="module")
def small():
    return generate_synthetic_dataset(SynthSpec(n_identities=4, images_per_identity=5, seed=3))


def test_synthetic_counts_and_ranges(small):
    assert len(small) == 20
    assert small.images.shape == (20, 64, 32, 3)
    assert small.images.min() >= -1 and small.images.max() <= 1
    assert sorted(set(small.identities.tolist())) == [0, 1, 2, 3]
    assert small.has_landmarks.all()
    assert set(small.cameras.tolist()) <= set(range(1, 7))


def test_synthetic_deterministic(small):
    again = generate_synthetic_dataset(SynthSpec(n_identities=4, images_per_identity=5, seed=3))
    assert np.array_equal(small.images, again.images)
    other = generate_synthetic_dataset(SynthSpec(n_identities=4, images_per_identity=5, seed=4))
    assert not np.array_equal(small.images, other.images)


def test_heldout_split_disjoint():
    spec = SynthSpec(n_identities=3, images_per_identity=4, seed=1, identity_offset=100)
    q, g = generate_heldout_split(spec, queries_per_identity=2)
    assert len(q) == 6 and len(g) == 12
    assert set(q.identities) == set(g.identities) == {100, 101, 102}
    assert set(q.names).isdisjoint(g.names)


def test_spec_validation():
    with pytest.raises(ValueError):
        SynthSpec(n_identities=0)
    with pytest.raises(ValueError):
        SynthSpec(split="val")


def test_dataset_subset_and_concat(small):
    sub = small.subset([0, 5])
    assert len(sub) == 2 and sub.names == (small.names[0], small.names[5])
    both = concat_datasets(sub, sub)
    assert len(both) == 4
    assert small.without_landmarks().landmarks(0) is None
    with pytest.raises(ValueError):
        ReidDataset(np.zeros((1, 4, 4, 3)), [-1], [0])


@pytest.mark.parametrize("name,parsed", [
    ("0186_c3s1_039526_01.jpg", (186, 3)), ("0002_c1s1_000451_03.png", (2, 1)), ("readme.txt", None),
])
def test_parse_filename(name, parsed):
    assert parse_filename(name) == parsed


def test_directory_roundtrip(tmp_path, small):
    write_reid_directory(tmp_path, {"train": small})
    (tmp_path / "bounding_box_train" / "junk.png").write_bytes(
        (tmp_path / "bounding_box_train" / f"{small.names[0]}.png").read_bytes())
    splits = load_market_layout(tmp_path)
    back = splits["train"]
    assert len(back) == 20 and back.skipped == 1
    assert np.array_equal(back.identities, small.identities)
    assert np.abs(back.images - small.images).max() <= 1 / 127.5 + 1e-6
    np.testing.assert_allclose(back.landmarks_xy[back.landmarks_visible],
                               small.landmarks_xy[small.landmarks_visible], atol=1e-3)
    bare = load_reid_directory(tmp_path / "bounding_box_train", None)
    assert not bare.has_landmarks.any()


def test_pair_sampler_structure(small):
    rng = np.random.default_rng(0)
    batch = PairSampler(small, 16, (1.0, 1.5)).sample(10, 4, rng)
    ids = small.identities
    assert (ids[batch.index1[:4]] == ids[batch.index2[:4]]).all()
    assert (ids[batch.index1[4:]] != ids[batch.index2[4:]]).all()
    assert (ids[batch.target_index] == ids[batch.index1]).all()
    assert (batch.target_index != batch.index1).all()
    assert batch.target_pose.shape == (10, 18, 64, 32)
    assert batch.has_truth2.tolist() == [True] * 4 + [False] * 6
    assert not batch.truth2[4:].any()
    assert ((batch.bandwidths >= 1.0) & (batch.bandwidths < 1.5)).all()
    assert batch.noise.shape == (10, 16)


def test_pair_sampler_errors(small):
    s = PairSampler(small, 8)
    with pytest.raises(ValueError):
        s.sample(4, 5, np.random.default_rng(0))
    one = small.subset(range(5))
    with pytest.raises(ValueError):
        PairSampler(one, 8).sample(4, 2, np.random.default_rng(0))
