import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rgbtfuse.autodiff import ContractError, DimensionError
from rgbtfuse.imaging import (
    ImagePlane,
    block_mask_pixels,
    block_mask_rgb,
    quantize,
    read_image,
    read_netpbm,
    replicate_channels,
    write_netpbm,
    write_tnsr_image,
)


def test_replicate_small_plane():
    th = ImagePlane(np.array([[0.1, 0.2], [0.3, 0.4]]))
    out = replicate_channels(th)
    assert out.channels == 3
    for c in range(3):
        assert np.array_equal(out.pixels[:, :, c], th.pixels[:, :, 0])


@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 1000))
def test_replicate_channels_identical(h, w, seed):
    px = np.random.default_rng(seed).random((h, w))
    out = replicate_channels(ImagePlane(px)).pixels
    assert np.array_equal(out[..., 0], out[..., 1]) and np.array_equal(out[..., 1], out[..., 2])


def test_replicate_rejects_rgb():
    with pytest.raises(ContractError):
        replicate_channels(ImagePlane(np.zeros((2, 2, 3))))


@pytest.mark.parametrize("bad", [np.full((2, 2), 1.5), np.full((2, 2), -0.1), np.full((2, 2), np.nan)])
def test_image_plane_range(bad):
    with pytest.raises(ContractError):
        ImagePlane(bad)


def test_image_plane_channel_count():
    with pytest.raises(DimensionError):
        ImagePlane(np.zeros((2, 2, 2)))


def test_block_mask_exact_count_at_224():
    img = ImagePlane(np.full((224, 224, 3), 0.5))
    out = block_mask_rgb(img, 0.10, seed=3)
    masked = (out.pixels == 0).all(axis=2)
    assert masked.sum() == 5018 == round(0.10 * 224 * 224)
    # masked pixels are zero on every channel, the rest untouched
    assert np.array_equal(out.pixels[~masked], img.pixels[~masked])


@given(st.integers(8, 64), st.integers(8, 64), st.floats(0.0, 0.95), st.integers(0, 2**32))
def test_block_mask_coverage_is_exact(h, w, rho, seed):
    covered = block_mask_pixels(h, w, rho, np.random.default_rng(seed))
    assert covered.sum() == int(np.floor(rho * h * w + 0.5))


def test_block_mask_rho_zero_is_identity(rng):
    img = ImagePlane(rng.random((28, 28, 3)))
    assert np.array_equal(block_mask_rgb(img, 0.0, seed=1).pixels, img.pixels)


def test_block_mask_deterministic(rng):
    img = ImagePlane(rng.random((56, 56, 3)))
    a = block_mask_rgb(img, 0.1, seed=7).pixels
    b = block_mask_rgb(img, 0.1, seed=7).pixels
    assert np.array_equal(a, b)
    assert not np.array_equal(a, block_mask_rgb(img, 0.1, seed=8).pixels)


@pytest.mark.parametrize("rho", [1.0, 1.5, -0.1])
def test_block_mask_rejects_bad_ratio(rho):
    with pytest.raises(ContractError):
        block_mask_rgb(ImagePlane(np.zeros((8, 8, 3))), rho, seed=0)


def test_block_mask_rejects_thermal():
    with pytest.raises(ContractError):
        block_mask_rgb(ImagePlane(np.zeros((8, 8))), 0.1, seed=0)


def test_input_image_not_modified(rng):
    px = rng.random((32, 32, 3))
    img = ImagePlane(px.copy())
    block_mask_rgb(img, 0.3, seed=0)
    assert np.array_equal(img.pixels, px)


@pytest.mark.parametrize("channels,suffix", [(1, ".pgm"), (3, ".ppm")])
def test_netpbm_round_trip(tmp_path, rng, channels, suffix):
    img = quantize(ImagePlane(rng.random((5, 7, channels))))
    write_netpbm(tmp_path / f"x{suffix}", img)
    back = read_netpbm(tmp_path / f"x{suffix}")
    assert back.pixels.shape == (5, 7, channels)
    assert np.array_equal(back.pixels, img.pixels)
    assert (tmp_path / f"x{suffix}").read_bytes()[:2] == (b"P5" if channels == 1 else b"P6")


def test_tnsr_image_round_trip(tmp_path, rng):
    img = ImagePlane(rng.random((4, 4, 3)))
    write_tnsr_image(tmp_path / "x.tnsr", img)
    assert np.array_equal(read_image(tmp_path / "x.tnsr").pixels, img.pixels)


def test_netpbm_rejects_other_maxval(tmp_path):
    (tmp_path / "x.pgm").write_bytes(b"P5\n1 1\n65535\n\0\0")
    with pytest.raises(ValueError):
        read_netpbm(tmp_path / "x.pgm")
