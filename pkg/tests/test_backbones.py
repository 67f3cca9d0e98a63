import numpy as np
import pytest

from picnet.backbones import (MlpParams, ShapeError, image_backbone, init_mlp, load_checkpoint,
                              patchify, point_backbone, save_checkpoint, unpatchify)


def zero_mlp(dims):
    return MlpParams([np.zeros((a, b)) for a, b in zip(dims[:-1], dims[1:])],
                     [np.zeros(b) for b in dims[1:]])


def test_zero_params_give_zero_features():
    cloud = np.random.default_rng(0).normal(size=(10, 3))
    out = point_backbone(cloud, zero_mlp([3, 64, 32]))
    assert out.shape == (10, 32)
    np.testing.assert_array_equal(out, 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_point_backbone_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    params = init_mlp([3, 64, 32], rng)
    cloud = rng.normal(size=(128, 3))
    perm = rng.permutation(128)
    np.testing.assert_array_equal(point_backbone(cloud[perm], params),
                                  point_backbone(cloud, params)[perm])


def test_point_backbone_rejects_wrong_width():
    rng = np.random.default_rng(0)
    with pytest.raises(ShapeError):
        point_backbone(rng.normal(size=(5, 3)), init_mlp([4, 8, 2], rng))
    with pytest.raises(ShapeError):
        point_backbone(rng.normal(size=(5, 2)), init_mlp([3, 8, 2], rng))


def test_mlp_params_validate_chain():
    with pytest.raises(ShapeError):
        MlpParams([np.zeros((3, 4)), np.zeros((5, 2))], [np.zeros(4), np.zeros(2)])


def test_uniform_image_gives_equal_rows():
    rng = np.random.default_rng(1)
    params = init_mlp([4 * 4 * 3, 64, 32], rng)
    out = image_backbone(np.full((32, 32, 3), 0.4), params, 4)
    assert out.shape == (64, 32)
    np.testing.assert_array_equal(out, np.broadcast_to(out[0], out.shape))


def test_single_patch():
    rng = np.random.default_rng(2)
    params = init_mlp([8 * 8 * 3, 16, 4], rng)
    assert image_backbone(rng.uniform(size=(8, 8, 3)), params, 8).shape == (1, 4)


def test_indivisible_patch_rejected():
    rng = np.random.default_rng(2)
    with pytest.raises(ShapeError):
        image_backbone(rng.uniform(size=(10, 8, 3)), init_mlp([48, 8, 4], rng), 4)


def test_patchify_layout_and_inverse():
    image = np.arange(4 * 6 * 2, dtype=float).reshape(4, 6, 2)
    p = patchify(image, 2)
    assert p.shape == (6, 8)
    # second patch covers rows 0-1, columns 2-3
    np.testing.assert_array_equal(p[1], image[0:2, 2:4].reshape(-1))
    np.testing.assert_array_equal(unpatchify(p, image.shape, 2), image)


def test_glorot_bounds():
    params = init_mlp([3, 64, 32], np.random.default_rng(0))
    assert np.abs(params.weights[0]).max() <= np.sqrt(6 / 67)
    assert np.abs(params.weights[1]).max() <= np.sqrt(6 / 96)
    np.testing.assert_array_equal(params.biases[0], 0.0)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"b": rng.normal(size=(3, 4)), "a": rng.normal(size=5), "s": np.array([2.5])}
    save_checkpoint(tmp_path / "m.ckpt", tensors, {"config": {"k": 1}})
    back, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert meta == {"config": {"k": 1}}
    assert set(back) == set(tensors)
    for k in tensors:
        assert back[k].tobytes() == tensors[k].tobytes()
    save_checkpoint(tmp_path / "m2.ckpt", dict(reversed(list(tensors.items()))), {"config": {"k": 1}})
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"not a checkpoint")
    with pytest.raises(ShapeError):
        load_checkpoint(tmp_path / "x.ckpt")
