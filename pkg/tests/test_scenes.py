import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from picnet.scenes import (Scene, SceneDatabase, SceneError, downsample, load_database,
                           normalize_cloud, pair_by_timestamp, read_cloud, read_image,
                           save_database, split_by_spacing, write_cloud, write_image)


def brute_force_pairs(t_images, t_clouds):
    pairs = []
    for k, tc in enumerate(t_clouds):
        best = None
        for i, ti in enumerate(t_images):
            if best is None or abs(ti - tc) < abs(t_images[best] - tc):
                best = i
        pairs.append((best, k))
    return pairs


def make_scene(i, x, y=0.0):
    rng = np.random.default_rng(i)
    return Scene(i, rng.uniform(0, 1, (4, 4, 3)), rng.normal(size=(5, 3)), (x, y))


def test_pair_nearest_timestamp():
    images = [(0.0, "a"), (1.0, "b"), (2.0, "c")]
    assert pair_by_timestamp(images, [(0.9, None)]) == [(1, 0)]


def test_pair_single_candidate():
    assert pair_by_timestamp([(5.0, None)], [(100.0, None)]) == [(0, 0)]


def test_pair_tie_goes_to_lower_index():
    images = [(2.0, None), (0.0, None), (2.0, None)]
    assert pair_by_timestamp(images, [(1.0, None)]) == [(0, 0)]
    assert pair_by_timestamp(images, [(0.9, None)]) == [(1, 0)]
    assert pair_by_timestamp(images, [(3.0, None)]) == [(0, 0)]


def test_pair_empty_raises():
    with pytest.raises(SceneError, match="no candidates"):
        pair_by_timestamp([], [(1.0, None)])
    with pytest.raises(SceneError, match="no candidates"):
        pair_by_timestamp([(1.0, None)], [])


@pytest.mark.parametrize("seed", range(5))
def test_pair_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    ti = rng.uniform(0, 100, 50)
    tc = rng.uniform(0, 100, 50)
    got = pair_by_timestamp([(t, None) for t in ti], [(t, None) for t in tc])
    assert got == brute_force_pairs(ti, tc)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 20), min_size=1, max_size=12),
       st.lists(st.integers(0, 20), min_size=1, max_size=12))
def test_pair_matches_brute_force_with_ties(ti, tc):
    # integer grids force plenty of exact ties
    ti = [t / 2 for t in ti]
    tc = [t / 2 + 0.25 * (t % 3 == 0) for t in tc]
    got = pair_by_timestamp([(t, None) for t in ti], [(t, None) for t in tc])
    assert got == brute_force_pairs(ti, tc)


def test_downsample_equal_size_is_permutation():
    pts = np.arange(30, dtype=float).reshape(10, 3)
    out = downsample(pts, 10, seed=3)
    assert sorted(map(tuple, out)) == sorted(map(tuple, pts))


def test_downsample_single_point_repeats():
    out = downsample(np.array([[1.0, 2.0, 3.0]]), 4, seed=0)
    np.testing.assert_array_equal(out, np.tile([1.0, 2.0, 3.0], (4, 1)))


def test_downsample_membership_and_determinism():
    pts = np.random.default_rng(0).normal(size=(1000, 3))
    a = downsample(pts, 128, seed=11)
    b = downsample(pts, 128, seed=11)
    assert a.tobytes() == b.tobytes()
    rows = {tuple(r) for r in pts}
    assert all(tuple(r) in rows for r in a)
    assert len({tuple(r) for r in a}) == 128


def test_normalize_symmetric_example():
    out = normalize_cloud(np.array([[2.0, 0, 0], [-2.0, 0, 0], [0.0, 0, 0]]))
    np.testing.assert_allclose(out, [[1, 0, 0], [-1, 0, 0], [0, 0, 0]])


def test_normalize_degenerate():
    with pytest.raises(SceneError, match="degenerate cloud"):
        normalize_cloud(np.ones((7, 3)))


@pytest.mark.parametrize("seed", range(5))
def test_normalize_random_cloud(seed):
    pts = np.random.default_rng(seed).normal(3.0, 5.0, size=(128, 3))
    out = normalize_cloud(pts)
    centered = pts - pts.mean(axis=0)
    np.testing.assert_allclose(out, centered / np.abs(centered).max(), rtol=0, atol=1e-15)
    assert np.all(np.abs(out) <= 1.0)
    assert abs(np.abs(out).max() - 1.0) <= 1e-12
    np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-12)


def test_split_collinear_test_spacing():
    scenes = [make_scene(i, 10.0 * i) for i in range(4)]
    train, test = split_by_spacing(scenes, 10.0, 25.0)
    assert [s.id for s in test] == [0, 3]
    assert [s.id for s in train] == [1, 2]


def test_split_needs_two_scenes():
    with pytest.raises(SceneError):
        split_by_spacing([make_scene(0, 0.0)], 10.0, 25.0)


def test_split_random_scenes_pairwise_scan():
    rng = np.random.default_rng(4)
    xy = np.cumsum(rng.uniform(0, 8, size=(200, 2)), axis=0)
    scenes = [make_scene(i, *xy[i]) for i in range(200)]
    train, test = split_by_spacing(scenes, 10.0, 25.0)
    train_ids, test_ids = set(train.ids), set(test.ids)
    assert not train_ids & test_ids
    assert train_ids | test_ids <= set(range(200))
    c = test.coords
    for i in range(len(c)):
        for j in range(i + 1, len(c)):
            assert np.linalg.norm(c[i] - c[j]) >= 25.0
    # consecutive kept train scenes stay within the overlap unless the input gap forces more
    rest = [s for s in scenes if s.id not in test_ids]
    kept = list(train)
    for a, b in zip(kept, kept[1:]):
        gap = np.linalg.norm(a.coord - b.coord)
        if gap > 10.0:
            between = [s for s in rest if a.id < s.id <= b.id]
            assert np.linalg.norm(between[0].coord - a.coord) > 10.0


def test_database_rejects_duplicate_ids():
    with pytest.raises(SceneError):
        SceneDatabase((make_scene(1, 0.0), make_scene(1, 5.0)))


def test_scene_validates_image_range():
    with pytest.raises(SceneError):
        Scene(0, np.full((2, 2, 3), 1.5), np.zeros((3, 3)), (0, 0))


def test_binary_formats(tmp_path):
    cloud = np.random.default_rng(0).normal(size=(17, 3))
    write_cloud(tmp_path / "c.bin", cloud)
    raw = (tmp_path / "c.bin").read_bytes()
    assert int.from_bytes(raw[:4], "little") == 17 and len(raw) == 4 + 17 * 24
    assert read_cloud(tmp_path / "c.bin").tobytes() == cloud.tobytes()

    image = np.random.default_rng(1).uniform(size=(4, 6, 3))
    write_image(tmp_path / "i.bin", image)
    raw = (tmp_path / "i.bin").read_bytes()
    assert [int.from_bytes(raw[i:i + 4], "little") for i in (0, 4, 8)] == [4, 6, 3]
    assert read_image(tmp_path / "i.bin").tobytes() == image.tobytes()


def test_database_round_trip(tmp_path):
    scenes = tuple(make_scene(i, 3.0 * i, -1.0) for i in range(6))
    db = SceneDatabase(scenes, "train")
    save_database(db, tmp_path / "db")
    back = load_database(tmp_path / "db")
    assert back.split_tag == "train"
    assert back.ids == db.ids
    for a, b in zip(db, back):
        assert a.image.tobytes() == b.image.tobytes()
        assert a.cloud.tobytes() == b.cloud.tobytes()
        assert a.coord.tobytes() == b.coord.tobytes()
        assert (a.t_image, a.t_cloud, a.night) == (b.t_image, b.t_cloud, b.night)
