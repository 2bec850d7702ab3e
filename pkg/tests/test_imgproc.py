import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from proxydepth import imgproc
from proxydepth.imgproc import CameraRig, RasterIOError


def test_camera_rig_rejects_non_positive():
    CameraRig(0.5, 100.0)
    with pytest.raises(ValueError):
        CameraRig(0.0, 100.0)
    with pytest.raises(ValueError):
        CameraRig(0.5, -1.0)


def test_validators():
    img = imgproc.as_image(np.full((2, 3), 0.5))
    assert img.shape == (2, 3, 1) and not img.flags.writeable
    with pytest.raises(ValueError):
        imgproc.as_image(np.full((2, 3, 3), 1.5))
    with pytest.raises(ValueError):
        imgproc.as_image(np.zeros((2, 3, 2)))
    with pytest.raises(ValueError):
        imgproc.as_disparity(np.array([[0.0, 5.0]]))  # >= width
    with pytest.raises(ValueError):
        imgproc.as_disparity(np.array([[-1.0, 0.0]]))
    with pytest.raises(ValueError):
        imgproc.as_mask(np.array([[0.5, 1.0]]), binary=True)
    assert imgproc.as_mask(np.array([[0.5, 1.0]])).max() == 1.0


# ---------------------------------------------------------------------------
# PPM / PNG
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("suffix", [".ppm", ".png"])
def test_rgb_round_trip_within_quantisation(tmp_path, suffix):
    rng = np.random.default_rng(0)
    img = rng.random((4, 4, 3))
    path = tmp_path / f"img{suffix}"
    imgproc.save_image(img, path)
    back = imgproc.load_image(path)
    assert back.shape == (4, 4, 3)
    assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12


def test_p5_single_white_pixel(tmp_path):
    path = tmp_path / "one.pgm"
    path.write_bytes(b"P5\n1 1\n255\n\xff")
    img = imgproc.load_image(path)
    assert img.shape == (1, 1, 1)
    assert img[0, 0, 0] == 1.0


def test_header_comments_are_skipped(tmp_path):
    path = tmp_path / "c.ppm"
    path.write_bytes(b"P6\n# made by hand\n2 1\n255\n" + bytes([0, 51, 255, 255, 0, 0]))
    img = imgproc.load_image(path)
    np.testing.assert_array_equal(img[0, 0], [0, 0.2, 1.0])


@pytest.mark.parametrize(
    "payload, reason",
    [
        (b"P6\n4 4\n255\n" + b"\x00" * 10, "truncated"),
        (b"P6\n4 4\n65535\n" + b"\x00" * 96, "bit depth"),
        (b"P6\n4", "header"),
        (b"GIF89a....", "signature"),
    ],
)
def test_decode_errors_name_path_and_reason(tmp_path, payload, reason):
    path = tmp_path / "bad.ppm"
    path.write_bytes(payload)
    with pytest.raises(RasterIOError) as info:
        imgproc.load_image(path)
    assert str(path) in str(info.value)
    assert reason in info.value.reason


def test_missing_file(tmp_path):
    with pytest.raises(RasterIOError, match="no such file"):
        imgproc.load_image(tmp_path / "nope.png")


def test_png_gray_and_mask(tmp_path):
    mask = np.array([[0.0, 1.0], [1.0, 0.0]])
    path = tmp_path / "m.png"
    imgproc.save_mask_png(mask, path)
    back = imgproc.load_image(path)
    np.testing.assert_array_equal(back[..., 0], mask)


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.uint8, st.tuples(st.integers(1, 6), st.integers(1, 6), st.sampled_from([1, 3]))))
def test_ppm_round_trip_is_lossless_at_8_bits(tmp_path_factory, q):
    img = q.astype(np.float64) / 255.0
    path = tmp_path_factory.mktemp("ppm") / "x.ppm"
    imgproc.save_image(img, path)
    np.testing.assert_array_equal(imgproc.load_image(path), img)


# ---------------------------------------------------------------------------
# PFM
# ---------------------------------------------------------------------------

def test_pfm_round_trip_example(tmp_path):
    disp = np.array([[1.5, 2.0], [0.0, 63.75]])
    path = tmp_path / "d.pfm"
    imgproc.pfm_io(disp, path, "write")
    np.testing.assert_array_equal(imgproc.pfm_io(None, path, "read"), disp)


def _handmade_pfm(values, big_endian: bool) -> bytes:
    """Byte-level PFM construction independent of write_pfm."""
    h, w = values.shape
    fmt = ">" if big_endian else "<"
    scale = b"1.0" if big_endian else b"-1.0"
    body = b"".join(struct.pack(f"{fmt}{w}f", *row) for row in values[::-1])
    return b"Pf\n%d %d\n%s\n" % (w, h, scale) + body


def test_pfm_big_and_little_endian_twins(tmp_path):
    values = np.array([[0.25, 7.0, 3.5], [12.125, 0.0, 1.0]], dtype=np.float32)
    big, little = tmp_path / "big.pfm", tmp_path / "little.pfm"
    big.write_bytes(_handmade_pfm(values, True))
    little.write_bytes(_handmade_pfm(values, False))
    a, b = imgproc.read_pfm(big), imgproc.read_pfm(little)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a, values)


def test_pfm_rows_are_bottom_up(tmp_path):
    values = np.array([[1.0], [2.0]], dtype=np.float32)
    path = tmp_path / "rows.pfm"
    imgproc.write_pfm(values, path)
    raw = path.read_bytes()
    # first stored row is the bottom one
    assert struct.unpack("<f", raw[-8:-4])[0] == 2.0


def test_pfm_rejects_nan_and_color(tmp_path):
    with pytest.raises(RasterIOError, match="non-finite"):
        imgproc.write_pfm(np.array([[1.0, np.nan]]), tmp_path / "n.pfm")
    color = tmp_path / "c.pfm"
    color.write_bytes(b"PF\n1 1\n-1.0\n" + b"\x00" * 12)
    with pytest.raises(RasterIOError, match="color"):
        imgproc.read_pfm(color)


def test_pfm_truncated(tmp_path):
    path = tmp_path / "t.pfm"
    path.write_bytes(b"Pf\n4 4\n-1.0\n" + b"\x00" * 8)
    with pytest.raises(RasterIOError, match="truncated"):
        imgproc.read_pfm(path)


@settings(max_examples=40, deadline=None)
@given(
    hnp.arrays(np.float32, st.tuples(st.integers(1, 8), st.integers(1, 8)),
               elements=st.floats(0, 1e6, width=32)),
    st.sampled_from(["<", ">"]),
)
def test_pfm_round_trip_property(tmp_path_factory, disp, order):
    path = tmp_path_factory.mktemp("pfm") / "d.pfm"
    imgproc.write_pfm(disp, path, byteorder=order)
    back = imgproc.read_pfm(path)
    assert back.tobytes() == disp.astype(np.float64).tobytes()


# ---------------------------------------------------------------------------
# resize
# ---------------------------------------------------------------------------

def test_resize_identity():
    a = np.random.default_rng(1).random((5, 7, 3))
    np.testing.assert_array_equal(imgproc.resize_bilinear(a, 1.0), a)


def test_resize_constant_disparity_halved():
    out = imgproc.resize_bilinear(np.full((8, 16), 8.0), 0.5, is_disparity=True)
    assert out.shape == (4, 8)
    np.testing.assert_array_equal(out, 4.0)


def test_resize_two_by_two_upscale():
    out = imgproc.resize_bilinear(np.array([[0.0, 1.0], [0.0, 1.0]]), 2.0)
    # half-pixel centres: columns sample at -0.25, 0.25, 0.75, 1.25 (edge-clamped)
    np.testing.assert_allclose(out, [[0.0, 0.25, 0.75, 1.0]] * 4, atol=0, rtol=0)
    # the two interpolated columns sit symmetrically about the midpoint 0.5
    assert (out[0, 1] + out[0, 2]) / 2 == 0.5


def test_resize_rejects_non_positive_scale():
    with pytest.raises(ValueError):
        imgproc.resize_bilinear(np.zeros((2, 2)), 0.0)
    with pytest.raises(ValueError):
        imgproc.resize_bilinear(np.zeros((2, 2)), -1.0)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 1.0), st.sampled_from([0.5, 0.8, 1.25, 2.0, 3.0]),
       st.integers(2, 12), st.integers(2, 12))
def test_resize_there_and_back_keeps_constants(value, s, h, w):
    a = np.full((h, w), value)
    back = imgproc.resize_to(imgproc.resize_bilinear(a, s), h, w)
    np.testing.assert_array_equal(back, value)
