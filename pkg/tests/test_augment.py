import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gandetect.augment import (DCT8, AugmentConfig, Perturbation, add_gaussian_noise, augment_chain, center_crop,
                               color_jitter, cutout, gaussian_blur, gaussian_kernel1d, jpeg_roundtrip,
                               make_views, quality_table, JPEG_LUMA_TABLE, random_crop, resize_bilinear,
                               to_grayscale)
from gandetect.datagen import SceneSpec, synth_real
from gandetect.tensorcore import ContractError, RngStream

MID_GRAY = 128 / 255


def rand_img(seed=0, h=24, w=20):
    return np.random.default_rng(seed).random((h, w, 3))


def psnr(a, b):
    mse = np.mean((a - b) ** 2)
    return np.inf if mse == 0 else 10 * np.log10(1.0 / mse)


@pytest.fixture(scope="module")
def natural():
    spec = SceneSpec(size=64, spectral_exponent=1.5, palette=[(0.2, 0.3, 0.7), (0.9, 0.8, 0.3), (0.4, 0.6, 0.2)],
                     n_gradients=1, n_shapes=2)
    return synth_real(spec, RngStream(5))


# --- JPEG ----------------------------------------------------------------

def test_dct_is_orthonormal():
    np.testing.assert_allclose(DCT8 @ DCT8.T, np.eye(8), atol=1e-14)


def test_quality_table_scaling():
    np.testing.assert_array_equal(quality_table(JPEG_LUMA_TABLE, 50), JPEG_LUMA_TABLE)
    assert quality_table(JPEG_LUMA_TABLE, 100).max() == 1
    assert (quality_table(JPEG_LUMA_TABLE, 10) >= quality_table(JPEG_LUMA_TABLE, 90)).all()


@pytest.mark.parametrize("q", [1, 10, 50, 75, 100])
def test_jpeg_mid_gray_is_exact(q):
    img = np.full((20, 13, 3), MID_GRAY)
    np.testing.assert_array_equal(jpeg_roundtrip(img, q), img)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 255), st.integers(1, 100))
def test_jpeg_constant_stays_flat(level, q):
    # only the DC term is nonzero, so the output is constant per channel
    out = jpeg_roundtrip(np.full((16, 16, 3), level / 255), q)
    assert np.ptp(out[..., 0]) < 1e-12
    # DC = 8 (v - 128); a half-step DC error moves every pixel by step / 16
    step = quality_table(JPEG_LUMA_TABLE, q)[0, 0]
    assert np.abs(out - level / 255).max() <= step / 16 / 255 + 1e-12


def test_jpeg_q100_psnr(natural):
    # regression anchor measured on this image: about 50 dB
    assert psnr(jpeg_roundtrip(natural, 100), natural) >= 35


def test_jpeg_psnr_monotone(natural):
    values = [psnr(jpeg_roundtrip(natural, q), natural) for q in (95, 75, 50, 25, 10)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_jpeg_rejects_bad_quality():
    for q in (0, 101, 50.5):
        with pytest.raises(ContractError):
            jpeg_roundtrip(rand_img(), q)


def test_jpeg_handles_non_block_sizes():
    assert jpeg_roundtrip(rand_img(h=9, w=17), 80).shape == (9, 17, 3)


# --- blur --------------------------------------------------------------------

def test_blur_sigma_zero_identity():
    img = rand_img()
    np.testing.assert_array_equal(gaussian_blur(img, 0.0), img)


@pytest.mark.parametrize("sigma", [0.5, 1.0, 2.7])
def test_blur_constant(sigma):
    out = gaussian_blur(np.full((16, 16, 3), 0.37), sigma)
    np.testing.assert_allclose(out, 0.37, atol=1e-14)


def test_blur_impulse_response():
    img = np.zeros((21, 21, 3))
    img[10, 10] = 1.0
    out = gaussian_blur(img, 1.0)
    r = np.arange(-3, 4)
    k = np.exp(-0.5 * r ** 2)
    expected = np.outer(k, k) / k.sum() ** 2
    np.testing.assert_allclose(out[7:14, 7:14, 0], expected, atol=1e-15)
    assert out[:7].sum() == 0 and out[14:].sum() == 0


def test_kernel_radius():
    assert len(gaussian_kernel1d(1.0)) == 7
    assert len(gaussian_kernel1d(0.4)) == 5


# --- color -----------------------------------------------------------------

def test_jitter_identity():
    img = rand_img(1)
    np.testing.assert_array_equal(color_jitter(img, 1.0, 1.0, 1.0, 0.0), img)


def test_jitter_brightness_zero_is_black():
    np.testing.assert_array_equal(color_jitter(rand_img(2), brightness=0.0), np.zeros((24, 20, 3)))


def test_saturation_zero_is_grayscale():
    img = rand_img(3)
    np.testing.assert_allclose(color_jitter(img, saturation=0.0), to_grayscale(img), atol=1e-15)


def test_hue_full_turn_is_identity():
    img = rand_img(4)
    np.testing.assert_allclose(color_jitter(img, hue=360.0), img, atol=1e-12)


def test_grayscale_examples():
    gray = np.repeat(np.random.default_rng(5).random((6, 6, 1)), 3, axis=2)
    np.testing.assert_allclose(to_grayscale(gray), gray, atol=1e-15)
    red = np.zeros((2, 2, 3))
    red[..., 0] = 1.0
    np.testing.assert_allclose(to_grayscale(red), 0.299, atol=1e-15)
    out = to_grayscale(rand_img(6))
    assert (out[..., 0] == out[..., 1]).all() and (out[..., 1] == out[..., 2]).all()


# --- noise -------------------------------------------------------------------

def test_noise_sigma_zero_identity():
    img = rand_img()
    np.testing.assert_array_equal(add_gaussian_noise(img, 0.0, RngStream(1)), img)


def test_noise_std():
    img = np.full((200, 200, 3), 0.5)
    out = add_gaussian_noise(img, 0.05, RngStream(9))
    assert 0.045 <= (out - img).std() <= 0.055
    assert out.min() >= 0 and out.max() <= 1


def test_noise_clamps():
    out = add_gaussian_noise(np.full((30, 30, 3), 0.98), 0.5, RngStream(2))
    assert out.min() >= 0 and out.max() <= 1


# --- cutout ------------------------------------------------------------------

def test_cutout_whole_image():
    np.testing.assert_array_equal(cutout(rand_img(), (0, 0, 20, 24), fill=0.5), np.full((24, 20, 3), 0.5))


def test_cutout_zero_area():
    img = rand_img()
    np.testing.assert_array_equal(cutout(img, (3, 4, 0, 5)), img)


def test_cutout_boundary():
    img = rand_img()
    out = cutout(img, (5, 6, 4, 3), fill=0.25)
    assert (out[6, 5] == 0.25).all() and (out[8, 8] == 0.25).all()
    np.testing.assert_array_equal(out[9, 8], img[9, 8])
    np.testing.assert_array_equal(out[6, 9], img[6, 9])
    np.testing.assert_array_equal(out[5, 5], img[5, 5])


def test_cutout_clips_to_image():
    out = cutout(rand_img(), (15, 20, 50, 50), fill=0.0)
    assert (out[20:, 15:] == 0).all()


# --- crops --------------------------------------------------------------------

def test_crop_exact_size_identity():
    img = rand_img(h=16, w=16)
    np.testing.assert_array_equal(random_crop(img, 16, RngStream(1)), img)


def test_crop_is_source_subregion():
    img = rand_img(h=40, w=30)
    rng = RngStream(8)
    gen = rng.generator()
    oy, ox = int(gen.integers(0, 40 - 12 + 1)), int(gen.integers(0, 30 - 12 + 1))
    np.testing.assert_array_equal(random_crop(img, 12, rng), img[oy:oy + 12, ox:ox + 12])


def test_crop_offsets_uniform():
    # 100x100 source, 91x91 crops: 10x10 offsets; encode the offset in pixel values
    ys, xs = np.meshgrid(np.arange(100), np.arange(100), indexing="ij")
    img = np.stack([ys / 255, xs / 255, np.zeros_like(ys, dtype=float)], axis=-1)
    counts = np.zeros((10, 10))
    root = RngStream(3)
    for i in range(10_000):
        c = random_crop(img, 91, root.child(i))
        counts[int(round(c[0, 0, 0] * 255)), int(round(c[0, 0, 1] * 255))] += 1
    chi2 = ((counts - 100) ** 2 / 100).sum()
    # 99 degrees of freedom; 0.999 quantile is about 148
    assert chi2 < 148
    assert (counts > 0).all()


def test_center_crop_and_padding():
    img = rand_img(h=10, w=12)
    np.testing.assert_array_equal(center_crop(img, 4), img[3:7, 4:8])
    assert center_crop(img, 16).shape == (16, 16, 3)
    assert random_crop(img, 16, RngStream(0)).shape == (16, 16, 3)


# --- resize ------------------------------------------------------------------

def test_resize_identity():
    img = rand_img()
    np.testing.assert_array_equal(resize_bilinear(img, 1.0), img)


@pytest.mark.parametrize("scale", [0.3, 0.7, 1.5, 2.0])
def test_resize_constant(scale):
    out = resize_bilinear(np.full((20, 20, 3), 0.61), scale)
    assert out.shape == (round(20 * scale), round(20 * scale), 3)
    np.testing.assert_allclose(out, 0.61, atol=1e-15)


def test_resize_ramp_stays_linear():
    ramp = np.tile((np.arange(16) / 20.0)[None, :, None], (4, 1, 3))
    out = resize_bilinear(ramp, 2.0)[0, :, 0]
    # half-pixel centres clamp at the two borders; the interior is exactly affine
    interior = out[1:-1]
    np.testing.assert_allclose(np.diff(interior), np.diff(interior)[0], atol=1e-6)
    np.testing.assert_allclose(np.diff(interior)[0], 1 / 40, atol=1e-12)


# --- views -------------------------------------------------------------------

def test_views_without_augmentation_are_plain_crops():
    img = rand_img(h=40, w=40)
    cfg = AugmentConfig(crop_size=16).disabled()
    a, b = make_views(img, cfg, RngStream(4))
    assert a.shape == b.shape == (16, 16, 3)
    for v in (a, b):
        found = any(np.array_equal(v, img[y:y + 16, x:x + 16]) for y in range(25) for x in range(25))
        assert found


def test_views_are_deterministic():
    img = rand_img(h=40, w=40)
    cfg = AugmentConfig(crop_size=16)
    a1, b1 = make_views(img, cfg, RngStream(7))
    a2, b2 = make_views(img, cfg, RngStream(7))
    np.testing.assert_array_equal(a1, a2)
    np.testing.assert_array_equal(b1, b2)
    assert not np.array_equal(a1, b1)


def test_default_view_size():
    a, b = make_views(np.random.default_rng(0).random((128, 128, 3)), AugmentConfig(), RngStream(1))
    assert a.shape == b.shape == (96, 96, 3)


def test_chain_output_in_range():
    cfg = AugmentConfig(p_jpeg=1, p_blur=1, p_color=1, p_grayscale=1, p_noise=1, p_cutout=1, crop_size=16)
    out = augment_chain(rand_img(h=32, w=32), cfg, RngStream(2))
    assert out.shape == (32, 32, 3) and out.min() >= 0 and out.max() <= 1


def test_config_validation_and_roundtrip():
    with pytest.raises(ContractError):
        AugmentConfig(p_blur=1.5)
    with pytest.raises(ContractError):
        AugmentConfig(jpeg_quality=(90, 30))
    cfg = AugmentConfig(crop_size=32)
    assert AugmentConfig.from_dict(cfg.to_dict()) == cfg
    assert all(getattr(cfg.disabled(), p) == 0 for p in AugmentConfig.PROBS)


# --- perturbations ------------------------------------------------------------

def test_perturbation_parse_and_apply():
    assert Perturbation.parse("none") == Perturbation()
    p = Perturbation.parse("jpeg:50")
    assert p == Perturbation("jpeg", 50) and str(p) == "jpeg:50"
    r = Perturbation.parse("rescale:0.7")
    assert r.apply(np.zeros((20, 20, 3))).shape == (14, 14, 3)
    with pytest.raises(ContractError):
        Perturbation("blur", 1.0)
    with pytest.raises(ContractError):
        Perturbation("jpeg", 0)
