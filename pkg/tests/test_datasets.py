import json

import numpy as np
import pytest
import torch
from PIL import Image

from dasnet.datasets import (AugmentationConfig, AugParams, Sample, SceneSpec, apply_aug_params, augment,
                             generate_scene, load_dataset, random_specs, rescale_batch, resize_sample,
                             resolve_spec, sample_aug_params, synthetic_dataset, write_dataset,
                             write_sample, _footprint, _draw_params)


def test_single_ellipse_mask_is_its_footprint():
    spec = SceneSpec(seed=7, canvas=(128, 128), n_objects=1, kinds=("ellipse",))
    s = generate_scene(spec)
    g = _draw_params(spec)["geoms"][0]
    yy, xx = np.mgrid[0:128, 0:128].astype(float) + 0.5
    np.testing.assert_array_equal(s.mask, _footprint("ellipse", g, yy, xx).astype(np.uint8))
    assert s.mask.sum() > 0


def test_generation_is_deterministic():
    spec = SceneSpec(seed=7, canvas=(64, 96), n_objects=3)
    a, b = generate_scene(spec), generate_scene(spec)
    assert a.rgb.tobytes() == b.rgb.tobytes()
    assert a.depth.tobytes() == b.depth.tobytes()
    assert a.mask.tobytes() == b.mask.tobytes()


def test_different_seeds_differ():
    a = generate_scene(SceneSpec(seed=7, canvas=(64, 64)))
    b = generate_scene(SceneSpec(seed=8, canvas=(64, 64)))
    assert np.count_nonzero(a.rgb != b.rgb) >= 1


@pytest.mark.parametrize("seed", range(20))
def test_scene_invariants(seed):
    spec = SceneSpec(seed=seed, canvas=(48, 64), n_objects=1 + seed % 3)
    s = generate_scene(spec)
    full = resolve_spec(spec)
    assert s.rgb.shape == (48, 64, 3) and s.depth.shape == s.mask.shape == (48, 64)
    assert s.rgb.min() >= 0 and s.rgb.max() <= 1
    assert set(np.unique(s.mask)) <= {0, 1} and s.mask.sum() > 0
    assert s.depth.min() > 0 and s.depth.max() <= 1
    # salient object is the nearest one, and nearer than the background on average
    assert full.depths[-1] == min(full.depths)
    assert s.depth[s.mask == 1].mean() < s.depth[s.mask == 0].mean()
    np.testing.assert_allclose(s.depth[s.mask == 1], full.depths[-1], rtol=1e-6)


def test_overridden_fields_are_honoured():
    spec = SceneSpec(seed=3, canvas=(64, 64), n_objects=2, kinds=("rectangle", "blob"), depths=(0.5, 0.2))
    full = resolve_spec(spec)
    assert full.kinds == ("rectangle", "blob") and full.depths == (0.5, 0.2)
    s = generate_scene(spec)
    np.testing.assert_allclose(s.depth[s.mask == 1], 0.2, rtol=1e-6)


@pytest.mark.parametrize("kw", [dict(canvas=(16, 64)), dict(n_objects=0), dict(n_objects=4),
                                dict(n_objects=2, depths=(0.2, 0.5))])
def test_invalid_specs_rejected(kw):
    with pytest.raises(ValueError):
        generate_scene(SceneSpec(seed=1, **kw))


def test_spec_round_trips_through_dict():
    full = resolve_spec(SceneSpec(seed=11, canvas=(64, 64), n_objects=3))
    assert SceneSpec.from_dict(json.loads(json.dumps(full.to_dict()))) == full


# ------------------------------------------------------------------ disk

def test_write_and_load_triplets(tmp_path):
    specs = random_specs(5, 3, canvas=(32, 32))
    write_dataset(tmp_path / "d", specs)
    samples = load_dataset(tmp_path / "d")
    assert [s.id for s in samples] == ["00000", "00001", "00002"]
    ref = [generate_scene(sp) for sp in specs]
    for s, r in zip(samples, ref):
        np.testing.assert_array_equal(s.mask, r.mask)
        assert np.abs(s.rgb - r.rgb).max() <= 0.5 / 255 + 1e-6
        assert np.abs(s.depth - r.depth).max() <= 0.5 / 65535 + 1e-6
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert [e["spec"]["seed"] for e in manifest["samples"]] == [sp.seed for sp in specs]


def test_load_with_split_and_without_depth(tmp_path):
    s = generate_scene(SceneSpec(seed=1, canvas=(32, 32)))
    write_sample(tmp_path / "train", Sample(id="a", rgb=s.rgb, mask=s.mask))
    loaded = load_dataset(tmp_path, "train")
    assert len(loaded) == 1 and loaded[0].depth is None


def test_missing_mask_lists_stem(tmp_path):
    s = generate_scene(SceneSpec(seed=1, canvas=(32, 32)))
    write_sample(tmp_path, s, "keep")
    write_sample(tmp_path, s, "orphan")
    (tmp_path / "mask" / "orphan.png").unlink()
    with pytest.raises(FileNotFoundError, match="orphan"):
        load_dataset(tmp_path)


def test_missized_depth_names_file(tmp_path):
    s = generate_scene(SceneSpec(seed=1, canvas=(64, 64)))
    write_sample(tmp_path, s, "x")
    Image.fromarray(np.full((32, 32), 30000, np.uint16)).save(tmp_path / "depth" / "x.png")
    with pytest.raises(ValueError, match="depth/x.png"):
        load_dataset(tmp_path)


def test_write_refuses_non_empty_target(tmp_path):
    (tmp_path / "junk").write_text("x")
    with pytest.raises(FileExistsError):
        write_dataset(tmp_path, random_specs(1, 1, (32, 32)))


# ---------------------------------------------------------- augmentation

def _asym_sample():
    s = generate_scene(SceneSpec(seed=21, canvas=(40, 56), n_objects=2))
    assert not np.array_equal(s.mask, s.mask[:, ::-1])
    return s


def test_flip_is_an_involution():
    s = _asym_sample()
    cfg = AugmentationConfig(horizontal_flip_prob=1.0, crop_fraction=(1.0, 1.0), target_size=s.shape)
    once = augment(s, cfg, np.random.default_rng(0))
    np.testing.assert_array_equal(once.mask, s.mask[:, ::-1])
    np.testing.assert_allclose(once.rgb, s.rgb[:, ::-1], atol=1e-6)
    np.testing.assert_allclose(once.depth, s.depth[:, ::-1], atol=1e-6)
    twice = augment(once, cfg, np.random.default_rng(1))
    np.testing.assert_array_equal(twice.mask, s.mask)
    np.testing.assert_allclose(twice.rgb, s.rgb, atol=1e-6)


def test_identity_settings_equal_plain_resize():
    s = _asym_sample()
    cfg = AugmentationConfig(horizontal_flip_prob=0.0, crop_fraction=(1.0, 1.0), multiscale=(1.0,))
    out = augment(s, cfg, np.random.default_rng(0))
    ref = resize_sample(s, (352, 352))
    assert out.shape == (352, 352)
    np.testing.assert_array_equal(out.rgb, ref.rgb)
    np.testing.assert_array_equal(out.depth, ref.depth)
    np.testing.assert_array_equal(out.mask, ref.mask)


@pytest.mark.parametrize("seed", range(10))
def test_augmented_mask_binary_and_geometrically_consistent(seed):
    s = _asym_sample()
    cfg = AugmentationConfig(crop_fraction=(0.5, 1.0), target_size=(64, 64))
    params = sample_aug_params(s.shape, cfg, np.random.default_rng(seed))
    out = apply_aug_params(s, params, cfg.target_size)
    assert set(np.unique(out.mask)) <= {0, 1}
    assert out.depth.min() > 0
    # independent nearest-neighbour index map: output pixel -> source pixel
    src = s.mask[:, ::-1] if params.flip else s.mask
    H, W = cfg.target_size
    rows = params.top + np.floor((np.arange(H) + 0.5) * params.height / H).astype(int)
    cols = params.left + np.floor((np.arange(W) + 0.5) * params.width / W).astype(int)
    np.testing.assert_array_equal(out.mask, src[np.ix_(rows, cols)])


def test_augment_deterministic_given_rng():
    s = _asym_sample()
    cfg = AugmentationConfig(target_size=(32, 32))
    a = augment(s, cfg, np.random.default_rng(5))
    b = augment(s, cfg, np.random.default_rng(5))
    assert a.rgb.tobytes() == b.rgb.tobytes() and a.mask.tobytes() == b.mask.tobytes()


def test_tiny_crop_rejected():
    s = generate_scene(SceneSpec(seed=1, canvas=(32, 32)))
    cfg = AugmentationConfig(crop_fraction=(0.1, 0.1), target_size=(32, 32))
    with pytest.raises(ValueError, match="8 px"):
        augment(s, cfg, np.random.default_rng(0))


def test_rescale_batch_snaps_to_multiple():
    rgb = torch.rand(2, 3, 64, 64)
    mask = (torch.rand(2, 1, 64, 64) > 0.5).float()
    depth = torch.rand(2, 1, 64, 64) + 0.01
    r, m, d = rescale_batch(rgb, mask, depth, 1.5, 32)
    assert r.shape[-2:] == (96, 96) and m.shape[-2:] == (96, 96) and d.shape[-2:] == (96, 96)
    assert set(m.unique().tolist()) <= {0.0, 1.0}
    r, _, _ = rescale_batch(rgb, mask, depth, 0.75, 16)
    assert r.shape[-2:] == (48, 48)
    assert rescale_batch(rgb, mask, depth, 1.0, 32)[0] is rgb
