import logging
import os

import numpy as np
import pytest

from psfcn.data import NormalMap, Sample
from psfcn.dataset_io import (
    decode_image,
    decode_mask_png,
    decode_normal_png,
    encode_image_8bit,
    encode_mask_png,
    encode_normal_png,
    encode_rgb8_png,
    load_diligent_dir,
    load_native_dataset,
    load_native_sample,
    write_diligent_dir,
    write_native_sample,
)
from psfcn.errors import DataError
from psfcn.render import brdf_grid, make_blobby, render_sample, sample_lights


def _sample(q=4, seed=0):
    shape = make_blobby(seed, 3, 32)
    return render_sample(shape, brdf_grid()[37], sample_lights(np.random.default_rng(seed), q), f"s{seed}")


def test_8bit_images_round_trip_exactly():
    rng = np.random.default_rng(0)
    img = (rng.integers(0, 256, size=(5, 7, 3)) / 255.0).astype(np.float32)
    np.testing.assert_array_equal(decode_image(encode_image_8bit(img)), img)
    clipped = decode_image(encode_image_8bit(np.full((2, 2, 3), 1.7)))
    assert np.all(clipped == 1.0)


def test_channel_order_is_rgb():
    img = np.zeros((1, 1, 3), np.float32)
    img[..., 0] = 1.0
    assert decode_image(encode_image_8bit(img))[0, 0].tolist() == [1.0, 0.0, 0.0]
    rgb = np.array([[[10, 20, 30]]], np.uint8)
    assert (decode_image(encode_rgb8_png(rgb)) * 255).round()[0, 0].tolist() == [10, 20, 30]


def test_normal_png_precision_and_background():
    s = _sample()
    nm = NormalMap(s.normals, s.mask)
    back = decode_normal_png(encode_normal_png(nm))
    assert np.array_equal(back.mask, nm.mask)
    # chord length equals the angle to first order and has no arccos precision floor
    chord = np.linalg.norm(back.normals[nm.mask].astype(np.float64) - nm.normals[nm.mask], axis=1)
    assert np.degrees(chord).max() < 5e-3
    assert np.all(back.normals[~nm.mask] == 0)


def test_normal_png_rejects_8bit():
    with pytest.raises(DataError):
        decode_normal_png(encode_mask_png(np.ones((2, 2), bool)))


def test_mask_round_trip_and_malformed_png():
    m = np.random.default_rng(1).random((6, 5)) > 0.5
    assert np.array_equal(decode_mask_png(encode_mask_png(m)), m)
    with pytest.raises(DataError, match="malformed"):
        decode_image(b"not a png")


def test_native_round_trip(tmp_path):
    s = _sample(5)
    write_native_sample(s, tmp_path / "s0")
    back = load_native_sample(str(tmp_path / "s0"))
    np.testing.assert_array_equal(back.images, s.images)
    np.testing.assert_allclose(back.lights, s.lights, atol=1e-6)
    assert np.array_equal(back.mask, s.mask)
    assert back.name == "s0"
    write_native_sample(_sample(3, 1), tmp_path / "s1")
    assert [x.name for x in load_native_dataset(str(tmp_path))] == ["s0", "s1"]
    assert len(load_native_dataset(str(tmp_path), limit=1)) == 1


def test_native_errors(tmp_path):
    s = _sample(4)
    d = tmp_path / "s"
    write_native_sample(s, d)
    with open(d / "lights.txt", "a") as fh:
        fh.write("0 0 1\n")
    with pytest.raises(DataError, match="count mismatch"):
        load_native_sample(str(d))
    os.remove(d / "mask.png")
    with pytest.raises(DataError, match="mask.png"):
        load_native_sample(str(d))
    with pytest.raises(DataError):
        load_native_dataset(str(tmp_path / "empty"))


def test_non_unit_lights_are_renormalised_with_warning(tmp_path, caplog):
    s = _sample(3)
    d = tmp_path / "s"
    write_native_sample(s, d)
    (d / "lights.txt").write_text("".join(f"{2*a} {2*b} {2*c}\n" for a, b, c in s.lights))
    with caplog.at_level(logging.WARNING):
        back = load_native_sample(str(d))
    assert "renormalising" in caplog.text
    np.testing.assert_allclose(np.linalg.norm(back.lights, axis=1), 1.0)


def test_diligent_round_trip_with_rgb_and_scalar_intensities(tmp_path):
    s = _sample(4)
    rgb = np.array([[1.0, 0.9, 0.8], [1.2, 1.1, 1.0], [0.7, 0.7, 0.7], [1.0, 1.0, 1.0]])
    write_diligent_dir(s, tmp_path / "rgb", rgb)
    back = load_diligent_dir(str(tmp_path / "rgb"))
    np.testing.assert_allclose(back.intensities, rgb, atol=1e-6)
    # 16-bit storage keeps the normalised images within half a 16-bit step (clipped highlights aside)
    unclipped = (s.images * rgb[:, None, None, :]) <= 1.0
    err = np.abs(back.images - s.images)[unclipped]
    assert err.max() < 1e-4
    write_diligent_dir(s, tmp_path / "scalar", np.array([0.5, 0.8, 0.9, 0.6]))
    (tmp_path / "scalar" / "light_intensities.txt").write_text("0.5\n0.8\n0.9\n0.6\n")
    back2 = load_diligent_dir(str(tmp_path / "scalar"))
    assert back2.intensities.shape == (4, 3)
    assert np.abs(back2.images - s.images).max() < 1e-4


def test_diligent_errors(tmp_path):
    s = _sample(3)
    d = tmp_path / "obj"
    write_diligent_dir(s, d)
    os.remove(d / "002.png")
    with pytest.raises(DataError, match="002.png"):
        load_diligent_dir(str(d))
    write_diligent_dir(s, d)
    (d / "light_intensities.txt").write_text("1 1\n1 1\n1 1\n")
    with pytest.raises(DataError, match="expected 1 or 3"):
        load_diligent_dir(str(d))
    write_diligent_dir(s, d)
    (d / "light_directions.txt").write_text("0 0 1\n")
    with pytest.raises(DataError, match="count mismatch"):
        load_diligent_dir(str(d))
    os.remove(d / "filenames.txt")
    with pytest.raises(DataError, match="filenames.txt"):
        load_diligent_dir(str(d))
