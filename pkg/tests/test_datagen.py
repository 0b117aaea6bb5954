import numpy as np
import pytest
from PIL import Image

from seggrasp.datagen import (background_pool, gen_background, gen_composed_dataset, gen_domain_randomized_dataset,
                              generate_dataset, load_dataset_dir, render_sample, sample_seed, save_dataset_dir)
from seggrasp.kinematics import reference_chain
from seggrasp.pnm import read_pnm, write_pgm, write_ppm
from seggrasp.render import MASK_INTRINSICS, SPHERE_ID, Scene, SphereSolid, TableSolid, render_mask, render_rgb
from seggrasp.simenv import SimConfig

from test_render import look_at, oracle

CHAIN = reference_chain()
CFG = SimConfig()


def test_pnm_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    rgb = rng.integers(0, 256, (7, 5, 3), dtype=np.uint8)
    gray = rng.integers(0, 256, (4, 9), dtype=np.uint8)
    write_ppm(tmp_path / "a.ppm", rgb)
    write_pgm(tmp_path / "a.pgm", gray)
    np.testing.assert_array_equal(read_pnm(tmp_path / "a.ppm"), rgb)
    np.testing.assert_array_equal(read_pnm(tmp_path / "a.pgm"), gray)
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n5 7\n255\n")


def test_pnm_rejects_garbage(tmp_path):
    (tmp_path / "x.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(ValueError):
        read_pnm(tmp_path / "x.ppm")


def test_gradient_background_fixed_per_seed():
    a, b = gen_background("gradient", 3), gen_background("gradient", 3)
    corners = lambda im: im[[0, 0, -1, -1], [0, -1, 0, -1]]
    np.testing.assert_array_equal(corners(a), corners(b))
    assert not np.array_equal(corners(a), corners(gen_background("gradient", 4)))


@pytest.mark.parametrize("kind", ["gradient", "noise", "shapes"])
def test_backgrounds_in_range(kind):
    img = gen_background(kind, 1)
    assert img.shape == (400, 400, 3)
    assert img.min() >= 0 and img.max() <= 1


def test_photo_dir_round_trip_and_errors(tmp_path):
    Image.new("RGB", (640, 480), (200, 40, 10)).save(tmp_path / "solid.png")
    img = gen_background("photo-dir", 0, photo_dir=tmp_path)
    assert img.shape == (400, 400, 3)
    np.testing.assert_allclose(img, np.broadcast_to(np.array([200, 40, 10]) / 255, img.shape), atol=1e-12)
    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(ValueError):
        gen_background("photo-dir", 0, photo_dir=empty)
    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / "broken.png").write_bytes(b"not an image")
    with pytest.raises(ValueError, match="broken.png"):
        gen_background("photo-dir", 0, photo_dir=bad)


@pytest.mark.parametrize("kind", ["composed", "flat", "flat-bg", "dr", "held-out"])
def test_sample_label_exact(kind):
    pool = background_pool(3, 0)
    for i in range(2):
        img, mask, camera, scene = render_sample(kind, sample_seed(0, kind, i), CHAIN, CFG, pool, True)
        assert img.shape == (400, 400, 3) and 0 <= img.min() and img.max() <= 1
        np.testing.assert_array_equal(mask, render_mask(camera, scene))
        if not scene.distractors:
            np.testing.assert_array_equal(mask, oracle(camera, scene))


def test_yellow_distractor_never_labelled():
    target = SphereSolid(np.array([0.0, 0, 0.01]), 0.01)
    twin = SphereSolid(np.array([0.03, 0, 0.01]), 0.01)  # same colour, not the target
    scene = Scene(target, TableSolid(0.0), distractors=[twin])
    camera = look_at((0.015, 0, 0.2), (0.015, 0, 0), up=(1, 0, 0))
    mask = render_mask(camera, scene)
    _, ids = render_rgb(camera, scene, K=MASK_INTRINSICS)
    assert (ids == 3).any()
    np.testing.assert_array_equal(mask.astype(bool), ids == SPHERE_ID)


def test_datasets_deterministic():
    a = gen_composed_dataset(3, seed=7, n_backgrounds=4)
    b = gen_composed_dataset(3, seed=7, n_backgrounds=4)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.masks, b.masks)
    c = gen_domain_randomized_dataset(2, seed=1)
    d = gen_domain_randomized_dataset(2, seed=1)
    np.testing.assert_array_equal(c.images, d.images)
    assert a.masks.max() == 1 and set(np.unique(a.masks)) <= {0, 1}


def test_dataset_dir_round_trip(tmp_path):
    data = generate_dataset("flat", 3, seed=2)
    manifest = save_dataset_dir(tmp_path / "d", data)
    lines = manifest.read_text().splitlines()
    assert lines[0] == "# kind flat"
    idx, ppm, pgm, seed = lines[1].split()
    assert idx == "0" and ppm.endswith(".ppm") and pgm.endswith(".pgm") and int(seed) == data.seeds[0]
    back = load_dataset_dir(tmp_path / "d")
    np.testing.assert_array_equal(back.images, data.images)
    np.testing.assert_array_equal(back.masks, data.masks)
    assert back.seeds == data.seeds and back.kind == "flat"


def test_invalid_requests():
    with pytest.raises(ValueError):
        generate_dataset("composed", 0)
    with pytest.raises(ValueError):
        generate_dataset("bogus", 1)
    with pytest.raises(ValueError):
        gen_background("bogus", 0)
