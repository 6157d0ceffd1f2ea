import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mincam import autodiff as ad
from mincam.errors import ConfigError, DimensionError
from mincam.network import MlpConfig, forward, init_network
from mincam.sensor import (HARDWARE, PHOTODETECTOR, Geometry, MaskBank, Optics, SensorConfig, blur_kernel,
                           box_mask_bank, build_vignette, export_masks, leaky_clip, mask_transmittance,
                           pixel_forward, preset, read_pgm, sample_noise)

IDEAL = HARDWARE.ideal()


def random_bank(rng, k, h, w, mask_range=(0.01, 0.67)):
    return MaskBank(rng.normal(size=(k, h, w)), mask_range)


def _between_middle(values):
    """A clip threshold midway between two central values, so no sample sits
    on the kink."""
    v = np.sort(values.ravel())
    i = len(v) // 2
    return float((v[i - 1] + v[i]) / 2)


# ------------------------------------------------------------ transmittance


def test_transmittance_examples():
    assert mask_transmittance(ad.Tensor(0.0), (0.01, 0.67)).item() == pytest.approx(0.34, abs=1e-15)
    assert abs(mask_transmittance(ad.Tensor(50.0), (0.01, 0.67)).item() - 0.67) < 1e-9
    assert mask_transmittance(ad.Tensor(0.0), (0.0, 1.0)).item() == 0.5


def test_transmittance_bad_range():
    with pytest.raises(ConfigError):
        mask_transmittance(ad.Tensor(0.0), (0.5, 0.5))


@settings(max_examples=100, deadline=None)
@given(st.floats(-1e6, 1e6), st.floats(0.0, 0.5), st.floats(0.01, 0.5))
def test_transmittance_stays_in_range(m_t, lo, width):
    hi = lo + width
    m = mask_transmittance(ad.Tensor(m_t), (lo, hi)).item()
    assert lo <= m <= hi


def test_transmittance_extremes_saturate():
    m = mask_transmittance(ad.Tensor(np.array([-1e4, -60.0, 60.0, 1e4])), (0.01, 0.67)).values
    np.testing.assert_allclose(m, [0.01, 0.01, 0.67, 0.67], atol=1e-12)


def test_from_transmittance_inverts():
    u = np.random.default_rng(0).uniform(0.05, 0.6, size=(3, 4, 4))
    bank = MaskBank.from_transmittance(u, (0.01, 0.67))
    np.testing.assert_allclose(bank.values(), u, atol=1e-12)


# ------------------------------------------------------------------ vignette


def test_vignette_examples():
    geom = Geometry()
    np.testing.assert_array_equal(build_vignette(32, 32, geom, 0), np.ones((32, 32)))
    odd = build_vignette(33, 33, geom, 4)
    assert odd[16, 16] == 1.0
    corner = build_vignette(32, 32, geom, 1)[0, 0]
    expected = math.cos(math.atan(8 * math.sqrt(2) / 11.4))
    assert corner == pytest.approx(expected, rel=1e-12)
    assert corner == pytest.approx(0.710, abs=5e-4)


def test_vignette_symmetric_and_peaked():
    v = build_vignette(32, 32, Geometry(), 4)
    np.testing.assert_allclose(v, v[::-1], rtol=0, atol=1e-15)
    np.testing.assert_allclose(v, v.T, rtol=0, atol=1e-15)
    assert v.max() <= 1.0 and v[15, 15] == v.max()


def test_blur_width_from_geometry():
    # 0.88 mm detector over 0.5 mm cells -> 3 cells
    assert HARDWARE.blur_cells(32) == 3
    assert HARDWARE.blur_cells(8) == 1
    assert dataclasses.replace(HARDWARE, blur_width=5).blur_cells(32) == 5


def test_blur_kernel_normalized():
    k = blur_kernel(3)
    assert k.shape == (3, 3) and k.sum() == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ConfigError):
        blur_kernel(2)


# --------------------------------------------------------------- leaky clip


def test_leaky_clip_examples():
    assert leaky_clip(ad.Tensor(1.0), 3.2, 0.01).item() == 1.0
    assert leaky_clip(ad.Tensor(4.2), 3.2, 0.01).item() == pytest.approx(3.21, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.floats(-10, 10), st.floats(0, 5), st.floats(0.1, 5), st.floats(0.001, 0.2))
def test_leaky_clip_monotone_and_exact_slope(x, dx, p_max, alpha):
    a = leaky_clip(ad.Tensor(x), p_max, alpha).item()
    b = leaky_clip(ad.Tensor(x + dx), p_max, alpha).item()
    assert b >= a
    if x >= p_max:
        assert a == pytest.approx(p_max + alpha * (x - p_max), abs=1e-12)
        assert b - a == pytest.approx(alpha * dx, abs=1e-12)
    elif x + dx <= p_max:
        assert b - a == pytest.approx(dx, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.1, 5), st.floats(0.001, 0.2))
def test_leaky_clip_continuous_at_threshold(p_max, alpha):
    eps = 1e-9
    lo = leaky_clip(ad.Tensor(p_max - eps), p_max, alpha).item()
    hi = leaky_clip(ad.Tensor(p_max + eps), p_max, alpha).item()
    assert abs(hi - lo) < 3 * eps
    assert leaky_clip(ad.Tensor(p_max), p_max, alpha).item() == pytest.approx(p_max)


def test_leaky_clip_gradient():
    x = ad.Tensor(np.array([1.0, 4.0]), requires_grad=True)
    ad.backward(ad.sum(leaky_clip(x, 3.2, 0.01)))
    np.testing.assert_allclose(x.grad, [1.0, 0.01])


# --------------------------------------------------------------------- noise


@pytest.mark.parametrize("bits, sigma_r", [(16, 400e-6), (8, 400e-6), (4, 0.0)])
def test_noise_moments(bits, sigma_r):
    cfg = dataclasses.replace(HARDWARE, adc_bits=bits, sigma_r=sigma_r)
    n = 100_000
    x = sample_noise(np.random.default_rng(1234), n, cfg)
    mean = cfg.p_lsb / 2
    var = sigma_r ** 2 + cfg.p_lsb ** 2 / 12
    # standard error of the mean and of the sample variance
    se_mean = math.sqrt(var / n)
    mu4 = 3 * sigma_r ** 4 + 6 * sigma_r ** 2 * cfg.p_lsb ** 2 / 12 + cfg.p_lsb ** 4 / 80
    se_var = math.sqrt((mu4 - var ** 2) / n)
    assert abs(x.mean() - mean) < 5 * se_mean
    assert abs(x.var(ddof=1) - var) < 5 * se_var


def test_p_lsb():
    assert HARDWARE.p_lsb == pytest.approx(3.2 / 65535)


# ----------------------------------------------------------- pixel forward


def test_pixel_forward_normalization_example():
    cfg = IDEAL
    bank = MaskBank(np.full((1, 8, 8), 50.0), (0.01, 0.67))
    p = pixel_forward(np.ones((1, 8, 8)), bank, cfg).values
    assert p[0, 0] == pytest.approx(0.67, abs=1e-9)


def test_pixel_forward_zero_scene():
    cfg = dataclasses.replace(HARDWARE, noise_enabled=False)
    bank = random_bank(np.random.default_rng(0), 3, 32, 32)
    assert not np.any(pixel_forward(np.zeros((2, 32, 32)), bank, cfg).values)


@pytest.mark.parametrize("seed", range(20))
def test_pixel_forward_is_linear(seed):
    rng = np.random.default_rng(seed)
    cfg = dataclasses.replace(HARDWARE, noise_enabled=False, clip_enabled=False)
    bank = random_bank(rng, 4, 16, 16)
    a, b = rng.random((3, 16, 16)), rng.random((3, 16, 16))
    s, t = rng.normal(size=2)
    pa = pixel_forward(a, bank, cfg).values
    pb = pixel_forward(b, bank, cfg).values
    pab = pixel_forward(s * a + t * b, bank, cfg).values
    np.testing.assert_allclose(pab, s * pa + t * pb, rtol=0, atol=1e-10)
    np.testing.assert_array_equal(pixel_forward(2 * a, bank, cfg).values, 2 * pa)


def test_pixel_forward_resolution_mismatch():
    bank = random_bank(np.random.default_rng(0), 2, 8, 8)
    with pytest.raises(DimensionError):
        pixel_forward(np.zeros((1, 16, 16)), bank, IDEAL)


def test_pixel_forward_noise_needs_source():
    bank = random_bank(np.random.default_rng(0), 2, 8, 8)
    with pytest.raises(ConfigError):
        pixel_forward(np.zeros((1, 8, 8)), bank, HARDWARE)


def test_explicit_noise_is_added():
    rng = np.random.default_rng(3)
    bank = random_bank(rng, 2, 8, 8)
    cfg = dataclasses.replace(HARDWARE, clip_enabled=False)
    scene = rng.random((4, 8, 8))
    noise = rng.normal(size=(4, 2)) * 1e-3
    clean = pixel_forward(scene, bank, dataclasses.replace(cfg, noise_enabled=False)).values
    np.testing.assert_allclose(pixel_forward(scene, bank, cfg, noise=noise).values, clean + noise, atol=1e-15)


def test_keep_zeroes_pixels():
    rng = np.random.default_rng(4)
    bank = random_bank(rng, 3, 8, 8)
    cfg = dataclasses.replace(HARDWARE, noise_enabled=False)
    scene = rng.random((2, 8, 8))
    full = pixel_forward(scene, bank, cfg).values
    kept = pixel_forward(scene, bank, cfg, keep=[1, 0, 1]).values
    np.testing.assert_array_equal(kept[:, [0, 2]], full[:, [0, 2]])
    assert not np.any(kept[:, 1])


def test_vignette_and_blur_hand_computed():
    # single pixel, uniform mask: p = G * dA * sum(blur(I) * d * m)
    cfg = dataclasses.replace(HARDWARE, noise_enabled=False, clip_enabled=False, blur_width=3)
    bank = MaskBank(fixed=np.full((1, 6, 6), 0.5), mask_range=(0.01, 0.67))
    scene = np.random.default_rng(5).random((6, 6))
    padded = np.pad(scene, 1)
    blurred = sum(padded[i:i + 6, j:j + 6] for i in range(3) for j in range(3)) / 9
    d = build_vignette(6, 6, cfg.geometry, 4)
    expected = cfg.gain / 36 * np.sum(blurred * d * 0.5)
    assert pixel_forward(scene, bank, cfg).item() == pytest.approx(expected, rel=1e-12)


# ------------------------------------------------------------- box baseline


def test_box_bank_partition():
    one = box_mask_bank(1, 32, 32, 0.67)
    assert one.k == 1 and np.all(one.values() == 0.67)
    bank = box_mask_bank(2, 32, 32, 0.67)
    m = bank.values()
    assert m.shape == (4, 32, 32)
    support = m > 0
    assert np.all(support.sum(axis=0) == 1)
    assert all(support[i].sum() == 256 for i in range(4))
    assert not bank.trainable


def test_box_bank_single_cells():
    m = box_mask_bank(32, 32, 32, 0.67).values()
    assert m.shape == (1024, 32, 32)
    assert np.all((m > 0).sum(axis=(1, 2)) == 1)


def test_box_bank_non_divisible():
    with pytest.raises(ConfigError):
        box_mask_bank(3, 32, 32, 0.67)


@pytest.mark.parametrize("r", [1, 2, 4, 8])
@pytest.mark.parametrize("seed", range(3))
def test_box_bank_equals_average_pooling(r, seed):
    scenes = np.random.default_rng(seed).random((5, 32, 32))
    t_hi = 0.67
    p = pixel_forward(scenes, box_mask_bank(r, 32, 32, t_hi), IDEAL).values
    b = 32 // r
    pooled = scenes.reshape(5, r, b, r, b).mean(axis=(2, 4)).reshape(5, r * r)
    scale = t_hi * (1 / 1024) * b * b
    np.testing.assert_allclose(p, scale * pooled, rtol=0, atol=1e-9)


# ------------------------------------------------------------- full pipeline


@pytest.mark.parametrize("seed", range(20))
def test_pipeline_gradients_match_finite_differences(seed):
    """Masks -> blur -> vignette -> gain -> leaky clip -> MLP -> loss."""
    rng = np.random.default_rng(seed)
    h = w = 8
    k = 4
    cfg = dataclasses.replace(HARDWARE, noise_enabled=False, blur_width=3,
                              photocurrent_per_unit=rng.uniform(2e-8, 6e-8))
    scenes = rng.random((6, h, w))
    mcfg = MlpConfig(input_width=k, hidden=(5, 4), leak=0.1, num_classes=11)
    net = init_network(mcfg, rng)
    net.biases = [ad.Tensor(rng.normal(size=b.shape) * 0.1, requires_grad=True) for b in net.biases]
    bank = random_bank(rng, k, h, w)
    clean = pixel_forward(scenes, bank, dataclasses.replace(cfg, clip_enabled=False)).values
    # clip threshold inside the signal range so both branches are exercised
    cfg = dataclasses.replace(cfg, p_max=_between_middle(clean), alpha=0.05)
    net.set_standardization(clean)
    labels = rng.integers(0, 11, size=6)
    optics = Optics(h, w, cfg)

    def loss():
        x = pixel_forward(scenes, bank, cfg, optics=optics)
        return ad.softmax_cross_entropy(forward(net, x), labels)

    params = {"masks": bank.params, **net.parameters()}
    ad.backward(loss())
    for name, p in params.items():
        num = ad.numerical_grad(lambda: loss().item(), p.values, 1e-6)
        err = ad.rel_error(p.grad, num)
        assert err < 1e-4, f"{name}: {err:.2e}"


# -------------------------------------------------------------- presets etc


def test_presets():
    assert preset("hardware") is HARDWARE
    assert preset("photodetector") is PHOTODETECTOR
    assert HARDWARE.mask_range == (0.01, 0.67) and HARDWARE.sigma_r == 400e-6
    assert HARDWARE.adc_bits == 16 and HARDWARE.p_max == 3.2 and HARDWARE.transimpedance == 1e7
    with pytest.raises(ConfigError):
        preset("nope")


@pytest.mark.parametrize("bad", [dict(mask_range=(0.5, 0.2)), dict(alpha=0.0), dict(sigma_r=-1.0),
                                 dict(adc_bits=0), dict(blur_width=2), dict(vignette_exponent=-1)])
def test_sensor_config_validation(bad):
    with pytest.raises(ConfigError):
        dataclasses.replace(HARDWARE, **bad)


def test_sensor_config_dict_roundtrip():
    assert SensorConfig.from_dict(HARDWARE.to_dict()) == HARDWARE


def test_export_masks_roundtrip(tmp_path):
    u = np.random.default_rng(0).uniform(0.01, 0.67, size=(3, 5, 7))
    bank = MaskBank.from_transmittance(u, (0.01, 0.67))
    paths = export_masks(bank, tmp_path, experiment_id="exp", seed=9)
    assert [p.name for p in paths] == ["mask_000.pgm", "mask_001.pgm", "mask_002.pgm"]
    for j, p in enumerate(paths):
        img = read_pgm(p)
        assert img.shape == (5, 7)
        expected = np.round(255 * (u[j] - 0.01) / 0.66)
        assert np.max(np.abs(img - expected)) <= 1
    manifest = (tmp_path / "masks.txt").read_text()
    assert "experiment: \"exp\"" in manifest and "seed: 9" in manifest
