"""Manifest loading, cropping, resizing and u8/tensor conversion."""

import numpy as np
import numpy.testing as npt
import pytest

from cleardr import ingest as I, synthetic
from cleardr.errors import ManifestError, ShapeError


def _write_tree(tmp_path, names):
    image_dir = tmp_path / "images"
    image_dir.mkdir()
    rng = np.random.default_rng(0)
    for name in names:
        img = (rng.random((8, 8, 3)) * 255).astype(np.uint8)
        I.write_png(image_dir / f"{name}.png", img)
    return image_dir


def _write_csv(tmp_path, rows, header="image,level"):
    path = tmp_path / "labels.csv"
    path.write_text("\n".join([header] + rows) + "\n")
    return path


# --------------------------------------------------------------- manifest

@pytest.mark.parametrize("laterality,expect", [("right", 2), ("left", 2), ("all", 4)])
def test_manifest_filters(tmp_path, laterality, expect):
    names = ["10_right", "10_left", "11_right", "11_left"]
    image_dir = _write_tree(tmp_path, names)
    csv_path = _write_csv(tmp_path, [f"{n},{i % 3}" for i, n in enumerate(names)])
    manifest = I.load_manifest(csv_path, image_dir, laterality, grade_count=5)
    assert len(manifest) == expect
    if laterality != "all":
        assert all(e.stem.endswith(f"_{laterality}") for e in manifest.entries)


def test_manifest_preserves_csv_order(tmp_path):
    names = ["c_right", "a_right", "b_right"]
    image_dir = _write_tree(tmp_path, names)
    csv_path = _write_csv(tmp_path, [f"{n},0" for n in names])
    manifest = I.load_manifest(csv_path, image_dir, "all")
    assert [e.stem for e in manifest.entries] == names


def test_manifest_out_of_range_level_names_line(tmp_path):
    image_dir = _write_tree(tmp_path, ["x_right", "y_right"])
    csv_path = _write_csv(tmp_path, ["x_right,0", "y_right,7"])
    with pytest.raises(ManifestError) as err:
        I.load_manifest(csv_path, image_dir, "all", grade_count=5)
    assert ":3:" in str(err.value)  # header is line 1


def test_manifest_missing_image_named(tmp_path):
    image_dir = _write_tree(tmp_path, ["x_right"])
    csv_path = _write_csv(tmp_path, ["x_right,0", "ghost_right,1"])
    with pytest.raises(ManifestError) as err:
        I.load_manifest(csv_path, image_dir, "all")
    assert "ghost_right" in str(err.value)


def test_manifest_bad_header_and_bad_level(tmp_path):
    image_dir = _write_tree(tmp_path, ["x_right"])
    bad_header = _write_csv(tmp_path, ["x_right,0"], header="file,grade")
    with pytest.raises(ManifestError):
        I.load_manifest(bad_header, image_dir, "all")
    bad_level = _write_csv(tmp_path, ["x_right,abc"])
    with pytest.raises(ManifestError) as err:
        I.load_manifest(bad_level, image_dir, "all")
    assert ":2:" in str(err.value)


def test_manifest_missing_csv_names_path(tmp_path):
    image_dir = _write_tree(tmp_path, ["x_right"])
    with pytest.raises(ManifestError) as err:
        I.load_manifest(tmp_path / "nope.csv", image_dir, "all")
    assert "nope.csv" in str(err.value)


def test_manifest_resolves_extensionless_names(tmp_path):
    image_dir = _write_tree(tmp_path, ["10_left"])
    csv_path = _write_csv(tmp_path, ["10_left,2"])
    manifest = I.load_manifest(csv_path, image_dir, "all")
    assert manifest.entries[0].path.name == "10_left.png"
    assert manifest.entries[0].grade == 2


# ------------------------------------------------------------------- crop

def test_selective_crop_finds_bright_disc():
    img = np.zeros((20, 20, 3), dtype=np.uint8)
    img[5:12, 7:15] = 200
    out = I.selective_crop(img, 10.0)
    assert out.shape == (7, 8, 3)
    npt.assert_array_equal(out, img[5:12, 7:15])


def test_selective_crop_all_black_unchanged():
    img = np.zeros((6, 6, 3), dtype=np.uint8)
    npt.assert_array_equal(I.selective_crop(img, 10.0), img)


def test_selective_crop_idempotent():
    rng = np.random.default_rng(1)
    img = np.zeros((16, 16, 3), dtype=np.uint8)
    img[3:10, 4:9] = (rng.random((7, 5, 3)) * 200 + 55).astype(np.uint8)
    once = I.selective_crop(img, 10.0)
    twice = I.selective_crop(once, 10.0)
    npt.assert_array_equal(once, twice)


def test_luminance_uses_rec601_weights():
    img = np.zeros((1, 3, 3), dtype=np.uint8)
    img[0, 0] = (255, 0, 0)
    img[0, 1] = (0, 255, 0)
    img[0, 2] = (0, 0, 255)
    lum = I.luminance(img)
    npt.assert_allclose(lum[0], [255 * 0.299, 255 * 0.587, 255 * 0.114], rtol=1e-6)


# ----------------------------------------------------------------- resize

def test_resize_same_size_identity():
    rng = np.random.default_rng(2)
    img = (rng.random((9, 7, 3)) * 255).astype(np.uint8)
    npt.assert_array_equal(I.resize(img, 9, 7), img)


def test_resize_constant_stays_constant():
    img = np.full((5, 5, 3), 123, dtype=np.uint8)
    for th, tw in [(3, 3), (10, 4), (1, 1)]:
        out = I.resize(img, th, tw)
        npt.assert_array_equal(out, np.full((th, tw, 3), 123, dtype=np.uint8))


def test_resize_checkerboard_to_single_pixel_averages():
    img = np.zeros((2, 2, 3), dtype=np.uint8)
    img[0, 0] = img[1, 1] = 255
    out = I.resize(img, 1, 1)
    # midpoint sample blends all four pixels equally: (2*255 + 2*0) / 4
    npt.assert_array_equal(out, np.full((1, 1, 3), 128, dtype=np.uint8))


# ------------------------------------------------------------- conversion

def test_tensor_scaling_endpoints():
    img = np.zeros((2, 2, 3), dtype=np.uint8)
    img[0, 0] = 255
    tensor = I.to_tensor(img)
    assert tensor.shape == (1, 3, 2, 2)
    assert tensor.dtype == np.float32
    assert tensor[0, 0, 0, 0] == 1.0
    assert tensor[0, 0, 1, 1] == 0.0


def test_u8_tensor_round_trip_is_exact():
    rng = np.random.default_rng(3)
    img = (rng.random((6, 5, 3)) * 255).astype(np.uint8)
    npt.assert_array_equal(I.from_map(I.to_tensor(img)), img)


def test_float_round_trip_bounded_by_quantization():
    rng = np.random.default_rng(4)
    arr = rng.random((4, 4, 3)).astype(np.float32)
    back = I.from_map(arr).astype(np.float32) / 255.0
    assert np.abs(back - arr).max() <= 1 / 255 + 1e-7


def test_from_map_accepts_tensor_layouts():
    rng = np.random.default_rng(5)
    hwc = rng.random((4, 6, 3)).astype(np.float32)
    chw = hwc.transpose(2, 0, 1)
    npt.assert_array_equal(I.from_map(hwc), I.from_map(chw))
    npt.assert_array_equal(I.from_map(hwc), I.from_map(chw[None]))
    gray = I.from_map(hwc[:, :, 0])
    assert gray.shape == (4, 6, 3)
    with pytest.raises(ShapeError):
        I.from_map(rng.random((4, 6, 2)).astype(np.float32))


def test_png_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    img = (rng.random((12, 9, 3)) * 255).astype(np.uint8)
    path = tmp_path / "img.png"
    I.write_png(path, img)
    npt.assert_array_equal(I.read_image(path), img)


# ---------------------------------------------------------- load_dataset

def test_load_dataset_from_fixture_tree(tmp_path):
    synthetic.write_fixture_tree(tmp_path, count=9, size=32, seed=1)
    manifest = I.load_manifest(tmp_path / "labels.csv", tmp_path / "images",
                              "all", grade_count=3)
    ds = I.load_dataset(manifest, size=32, crop_threshold=0.0)
    assert ds.images.shape == (9, 3, 32, 32)
    assert ds.grades.count == 3
    npt.assert_array_equal(ds.labels, np.arange(9) % 3)
    assert ds.refs[0] == "blob_00000"
