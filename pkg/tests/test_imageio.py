import json

import numpy as np
import pytest
from PIL import Image

from granatt.imageio import (
    NOISE_PRESETS,
    ImageFormatError,
    UnreachableNoiseError,
    add_depth_noise,
    list_images,
    load_image,
    noise_stats,
    save_map,
)


def write_pgm(path, rows):
    a = np.asarray(rows, dtype=np.uint8)
    path.write_bytes(b"P5\n%d %d\n255\n" % (a.shape[1], a.shape[0]) + a.tobytes())


def test_all_255_pgm_loads_as_ones(tmp_path):
    p = tmp_path / "w.pgm"
    write_pgm(p, np.full((3, 5), 255))
    img = load_image(p)
    assert img.shape == (1, 3, 5) and img.dtype == np.float64
    np.testing.assert_array_equal(img, 1.0)


def test_known_bytes_pgm(tmp_path):
    p = tmp_path / "k.pgm"
    write_pgm(p, [[0, 51], [128, 255]])
    np.testing.assert_array_equal(load_image(p)[0], [[0.0, 0.2], [128 / 255, 1.0]])


def test_color_ppm_has_three_channels(tmp_path):
    p = tmp_path / "c.ppm"
    arr = np.random.default_rng(0).integers(0, 256, (4, 6, 3), dtype=np.uint8)
    Image.fromarray(arr, "RGB").save(p)
    img = load_image(p)
    assert img.shape == (3, 4, 6)
    np.testing.assert_array_equal(img, arr.transpose(2, 0, 1) / 255)


@pytest.mark.parametrize("suffix", [".png", ".pgm"])
def test_save_load_round_trip_on_quantized_values(tmp_path, suffix):
    v = np.random.default_rng(1).integers(0, 256, (7, 9)) / 255
    p = tmp_path / f"m{suffix}"
    save_map(v[None], p)
    np.testing.assert_array_equal(load_image(p)[0], v)
    save_map(load_image(p), tmp_path / f"again{suffix}")
    assert (tmp_path / f"again{suffix}").read_bytes() == p.read_bytes()


def test_png_and_pgm_agree(tmp_path):
    v = np.random.default_rng(2).random((5, 5))
    save_map(v, tmp_path / "a.png")
    save_map(v, tmp_path / "a.pgm")
    np.testing.assert_array_equal(load_image(tmp_path / "a.png"), load_image(tmp_path / "a.pgm"))


def test_save_rounding_and_extremes(tmp_path):
    save_map(np.zeros((2, 3)), tmp_path / "z.png")
    save_map(np.ones((2, 3)), tmp_path / "o.png")
    assert not np.asarray(Image.open(tmp_path / "z.png")).any()
    assert np.all(np.asarray(Image.open(tmp_path / "o.png")) == 255)
    save_map(np.array([[0.5 / 255, 1.49 / 255, 1.5 / 255]]), tmp_path / "r.png")
    assert np.asarray(Image.open(tmp_path / "r.png")).tolist() == [[1, 1, 2]]


def test_save_rejects_out_of_range(tmp_path):
    with pytest.raises(ValueError):
        save_map(np.full((2, 2), 1.2), tmp_path / "x.png")
    with pytest.raises(ValueError):
        save_map(np.ones((2, 2, 2)), tmp_path / "x.png")


def test_bad_files_name_the_path(tmp_path):
    bad = tmp_path / "broken.png"
    bad.write_bytes(b"not an image")
    with pytest.raises(ImageFormatError, match="broken.png"):
        load_image(bad)
    with pytest.raises(ImageFormatError, match="unsupported"):
        load_image(tmp_path / "x.jpg")


def test_list_images_by_stem(tmp_path):
    save_map(np.zeros((2, 2)), tmp_path / "b.png")
    save_map(np.zeros((2, 2)), tmp_path / "a.pgm")
    (tmp_path / "notes.txt").write_text("x")
    assert list(list_images(tmp_path)) == ["a", "b"]
    with pytest.raises(NotADirectoryError):
        list_images(tmp_path / "missing")


# -- noise ---------------------------------------------------------------------


def test_noise_stats_identity():
    x = np.random.default_rng(3).random((6, 6))
    assert noise_stats(x, x) == (0.0, 0.0)


def test_noise_stats_ratio_above_threshold():
    a = np.random.default_rng(4).uniform(0.1, 0.7, (5, 5))
    assert noise_stats(a, 1.3 * a)[1] == 1.0
    assert noise_stats(a, 1.2 * a)[1] == 0.0


def test_noise_stats_against_summation():
    rng = np.random.default_rng(5)
    a, b = rng.random((8, 8)), rng.random((8, 8))
    a[0, 0] = 0.0  # outside the ratio guard
    rmse = np.sqrt(sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / 64)
    kept = [(x, y) for x, y in zip(a.ravel(), b.ravel()) if x > 1e-3 and y > 1e-3]
    delta = sum(1 for x, y in kept if max(x / y, y / x) > 1.25) / len(kept)
    r, d = noise_stats(a, b)
    assert r == pytest.approx(rmse, abs=1e-15) and d == pytest.approx(delta, abs=1e-15)


@pytest.mark.parametrize("target", [0.0, 1.0, -0.1])
def test_noise_target_domain(target):
    with pytest.raises(ValueError):
        add_depth_noise(np.full((4, 4), 0.5), target)


def test_noise_calibrates_constant_map():
    noisy, spec = add_depth_noise(np.full((64, 64), 0.5), 0.1, seed=7)
    measured, _ = noise_stats(np.full((64, 64), 0.5), noisy)
    assert abs(measured - 0.1) <= 0.05 * 0.1
    assert spec.achieved_rmse == measured and spec.iterations <= 20
    assert noisy.min() >= 0 and noisy.max() <= 1


def test_noise_is_deterministic():
    d = np.random.default_rng(8).random((32, 32))
    a, sa = add_depth_noise(d, 0.2, seed=3)
    b, sb = add_depth_noise(d, 0.2, seed=3)
    assert a.tobytes() == b.tobytes() and sa == sb
    c, _ = add_depth_noise(d, 0.2, seed=4)
    assert not np.array_equal(a, c)


def test_unreachable_target_reports_ceiling():
    with pytest.raises(UnreachableNoiseError) as exc:
        add_depth_noise(np.full((16, 16), 0.5), 0.9)
    assert exc.value.ceiling == pytest.approx(0.5)
    assert "0.5000" in str(exc.value)


@pytest.mark.parametrize("name", sorted(NOISE_PRESETS))
def test_presets_are_reachable_on_mid_depth(name):
    target, _ = NOISE_PRESETS[name]
    d = np.random.default_rng(9).uniform(0.2, 0.8, (48, 48))
    _, spec = add_depth_noise(d, target)
    assert abs(spec.achieved_rmse - target) <= 0.05 * target
    assert 0 <= spec.achieved_delta1 <= 1
    assert "1.25" in json.dumps(spec.to_json())


def test_preset_targets():
    assert {k: v[0] for k, v in NOISE_PRESETS.items()} == {"des": 0.261, "nlpr": 0.259, "nju2k": 0.236}
