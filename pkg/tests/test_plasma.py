import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bhflow import plasma
from bhflow.errors import ArgumentError, DegenerateInputError
from bhflow.synthgen import FlowParams, generate
from bhflow.tensorio import Movie, gaussian_blur_px

R = 16.0


def ring_movie(**kw):
    p = FlowParams(**kw)
    return generate(p, 60)[0], p


def test_constant_movie_plot():
    cp = plasma.cylinder_plot(np.full((3, 64, 64), 2.0), R)
    np.testing.assert_allclose(cp.values, 2.0, rtol=1e-15)
    assert np.max(np.abs(cp.normalized)) < 1e-12


def test_plot_grand_mean_zero():
    m, _ = ring_movie()
    assert abs(plasma.cylinder_plot(m, R).normalized.mean()) < 1e-10


def test_blob_at_quarter_turn():
    img = np.zeros((1, 64, 64))
    c = 31.5
    yy, xx = np.mgrid[0:64, 0:64]
    img[0] = np.exp(-((yy - (c + R)) ** 2 + (xx - c) ** 2) / 4.0)
    cp = plasma.cylinder_plot(img, R, 180)
    assert abs(int(np.argmax(cp.values[0])) - 45) <= 1


def test_plot_radius_checked():
    with pytest.raises(ArgumentError):
        plasma.cylinder_plot(np.ones((2, 64, 64)), 31.5)
    with pytest.raises(ArgumentError):
        plasma.cylinder_plot(np.ones((2, 64, 64)), R, 16)


def test_autocorrelation_matches_bruteforce():
    z = np.random.default_rng(0).normal(size=(8, 8))
    np.testing.assert_allclose(plasma.autocorrelation(z), plasma.autocorrelation_bruteforce(z), rtol=0, atol=1e-8)
    assert plasma.autocorrelation(z)[0, 0] == pytest.approx(1.0, abs=1e-6)


def test_autocorrelation_zero_variance():
    with pytest.raises(DegenerateInputError):
        plasma.autocorrelation(np.zeros((8, 8)))


def test_white_noise_autocorrelation_small():
    n = 60 * 180
    peaks = []
    for seed in range(10):
        xi = plasma.autocorrelation(np.random.default_rng(seed).normal(size=(60, 180)))
        xi[0, 0] = 0.0
        peaks.append(np.max(np.abs(xi)))
    assert np.mean(peaks) < 5 / math.sqrt(n)


def test_static_movie_speed_zero():
    m, _ = ring_movie(omega_p=0.0)
    assert abs(plasma.pattern_speed(plasma.cylinder_plot(m, R))) < 1e-6


def test_solid_rotation_speed():
    m, _ = ring_movie(omega_p=0.1, rotation_slope=0.0)
    assert 0.095 <= plasma.pattern_speed(plasma.cylinder_plot(m, R)) <= 0.105


def test_time_reversal_negates_speed():
    m, _ = ring_movie(omega_p=0.07, rotation_slope=-0.5)
    fwd = plasma.pattern_speed(plasma.cylinder_plot(m, R))
    back = plasma.pattern_speed(plasma.cylinder_plot(m.reversed(), R))
    assert back == pytest.approx(-fwd, rel=1e-12)


def test_speed_degenerate_window():
    cp = plasma.cylinder_plot(ring_movie()[0].data[:3], R)
    with pytest.raises(DegenerateInputError):
        plasma.pattern_speed(cp)


def test_radius_factors():
    assert plasma.RADIUS_FACTORS == (0.75, 0.9375, 1.0, 1.125, 1.3125, 1.5)


def test_rigid_rotation_flat_curve():
    m, _ = ring_movie(omega_p=0.07, rotation_slope=0.0)
    assert abs(plasma.rotation_curve_slope(m, R)) < 0.05
    assert abs(plasma.rotation_curve_slope(m, R, method="linear")) < 0.05


def test_negative_slope_sign():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        m, _ = ring_movie(omega_p=0.07, rotation_slope=-1.0, spiral_phase=rng.uniform(0, 6.28), seed=seed)
        assert plasma.rotation_curve_slope(m, R) < 0


def test_slope_needs_radii():
    with pytest.raises(ArgumentError):
        plasma.rotation_curve_slope(ring_movie()[0], 25.0)
    with pytest.raises(ArgumentError):
        plasma.rotation_curve_slope(ring_movie()[0], R, method="cubic")


def test_pitch_of_radial_pattern_is_zero():
    # spokes: intensity depends on angle only
    yy, xx = np.mgrid[0:64, 0:64] - 31.5
    th = np.arctan2(yy, xx)
    frames = np.stack([2.0 + np.cos(2 * (th - 0.05 * t)) for t in range(20)])
    assert plasma.pitch_angle(frames, R) == pytest.approx(0.0, abs=1e-3)


def test_pitch_arctan_identity():
    assert math.atan(math.log(1.1) / math.log1p(0.1)) == pytest.approx(math.pi / 4)


def test_pitch_closure():
    m, p = ring_movie(pitch_angle=0.5)
    assert plasma.pitch_angle(m, R) == pytest.approx(0.5, abs=0.05)
    with pytest.raises(ArgumentError):
        plasma.pitch_angle(m, R, delta_r_frac=0.0)


def test_asymmetry_examples():
    th = 2 * np.pi * np.arange(180) / 180
    assert plasma.asymmetry_of_profile(np.ones(180)) == pytest.approx(0.0, abs=1e-12)
    p = 1 + 0.4 * np.cos(th - 1.0)
    ratio, phase = plasma.asymmetry_of_profile(p, return_phase=True)
    assert ratio == pytest.approx(0.4, abs=1e-6)
    assert phase == pytest.approx(-1.0, abs=1e-6)
    assert plasma.asymmetry_of_profile(7.5 * p) == pytest.approx(ratio, rel=1e-12)
    with pytest.raises(DegenerateInputError):
        plasma.asymmetry_of_profile(-p)


def grid_fit(profile):
    """Least-squares fit of A cos(theta + theta0) + C by scanning theta0."""
    th = 2 * np.pi * np.arange(profile.size) / profile.size
    best = None
    for theta0 in np.linspace(-np.pi, np.pi, 20001):
        basis = np.stack([np.cos(th + theta0), np.ones_like(th)], axis=1)
        coef, res, *_ = np.linalg.lstsq(basis, profile, rcond=None)
        err = np.sum((basis @ coef - profile) ** 2)
        if coef[0] >= 0 and (best is None or err < best[0]):
            best = (err, coef[0] / coef[1], theta0)
    return best[1], best[2]


def test_asymmetry_matches_grid_search():
    rng = np.random.default_rng(1)
    th = 2 * np.pi * np.arange(90) / 90
    p = 3.0 + 0.7 * np.cos(th + 2.2) + 0.1 * rng.normal(size=90)
    ratio, phase = plasma.asymmetry_of_profile(p, return_phase=True)
    g_ratio, g_phase = grid_fit(p)
    assert ratio == pytest.approx(g_ratio, abs=1e-4)
    assert phase == pytest.approx(g_phase, abs=1e-3)


def test_radial_psd_examples():
    assert np.all(plasma.radial_psd(np.full((32, 32), 4.0)) == 0)
    yy, xx = np.mgrid[0:64, 0:64]
    f = np.cos(2 * np.pi * (3 * xx + 4 * yy) / 64)
    psd = plasma.radial_psd(f)
    assert psd.size == 32
    k = int(np.argmax(psd)) + 1
    assert k == 5
    others = np.delete(psd, 4)
    assert psd[4] >= 100 * others.max()


def test_blur_lowers_high_frequency_psd():
    img = np.random.default_rng(2).random((64, 64))
    a = plasma.radial_psd(img)
    b = plasma.radial_psd(gaussian_blur_px(img, 2.0))
    assert np.all(b[16:] < a[16:])


def test_log_psd_distance():
    a = np.array([1.0, 2.0, 4.0, 8.0])
    assert plasma.log_psd_distance(a, a) == 0.0
    assert plasma.log_psd_distance(a, a * math.e) == pytest.approx(math.sqrt(2))
    assert plasma.log_psd_distance(a, a * math.e, upper_half=False) == pytest.approx(2.0)


def test_extract_features_closure():
    m, p = ring_movie(omega_p=-0.06, pitch_angle=0.8, asymmetry_ratio=0.3, rotation_slope=-0.8)
    f = plasma.extract_features(m, R)
    assert all(f.flags.values())
    assert f.pattern_speed == pytest.approx(-0.06, rel=0.05)
    assert f.pitch_angle == pytest.approx(-0.8, rel=0.10)
    assert f.asymmetry == pytest.approx(0.3 / 1.001, rel=0.05)
    assert f.rotation_slope == pytest.approx(-0.8, rel=0.15)


def test_extract_features_constant_movie():
    f = plasma.extract_features(Movie(np.full((60, 64, 64), 0.3)), R)
    assert f.pattern_speed == 0.0 and f.asymmetry == pytest.approx(0.0, abs=1e-12)
    assert f.flags["omega_p"] and f.flags["asym"]
    assert not f.flags["pitch"] and not f.flags["slope"]
    assert math.isnan(f.pitch_angle) and math.isnan(f.rotation_slope)


def test_features_csv_round_trip(tmp_path):
    f = plasma.PlasmaFeatures(0.07, 0.5, 0.2, -0.7)
    f.flags = {"omega_p": True, "pitch": False, "asym": True, "slope": True}
    plasma.write_features_csv(tmp_path / "f.csv", [("m0", f)])
    names, feats = plasma.read_features_csv(tmp_path / "f.csv")
    assert names == ["m0"]
    assert np.array_equal(feats[0].as_array(), f.as_array())
    assert feats[0].flags == f.flags


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000), st.sampled_from([0.25, 0.5, 2.0, 8.0, 1024.0]))
def test_power_of_two_scaling_bit_stable(seed, k):
    rng = np.random.default_rng(seed)
    p = FlowParams(omega_p=rng.uniform(0.05, 0.09), seed=seed)
    m = generate(p, 30)[0]
    a = plasma.extract_features(m, R).as_array()
    b = plasma.extract_features(Movie(m.data * k), R).as_array()
    assert a.tobytes() == b.tobytes()


@settings(max_examples=10, deadline=None)
@given(st.floats(0.1, 100.0))
def test_general_scaling_stable(k):
    m = generate(FlowParams(), 30)[0]
    a = plasma.extract_features(m, R).as_array()
    b = plasma.extract_features(Movie(m.data * k), R).as_array()
    np.testing.assert_allclose(b, a, rtol=1e-9, atol=1e-12)


def test_rotation_changes_only_phase():
    p = FlowParams(omega_p=0.07, rotation_slope=-0.5, asymmetry_ratio=0.3)
    theta0 = 0.7
    m0 = generate(p, 60)[0]
    m1 = generate(replace(p, bright_angle=p.bright_angle + theta0, spiral_phase=p.spiral_phase + theta0), 60)[0]
    f0, f1 = plasma.extract_features(m0, R), plasma.extract_features(m1, R)
    assert f1.pattern_speed == pytest.approx(f0.pattern_speed, abs=1e-3)
    assert f1.pitch_angle == pytest.approx(f0.pitch_angle, abs=1e-2)
    assert f1.asymmetry == pytest.approx(f0.asymmetry, abs=1e-3)
    assert f1.rotation_slope == pytest.approx(f0.rotation_slope, abs=1e-2)
    _, ph0 = plasma.asymmetry(m0, R, return_phase=True)
    _, ph1 = plasma.asymmetry(m1, R, return_phase=True)
    # bright side moves from theta_b to theta_b + theta0, so theta0 in
    # A cos(theta + theta0) decreases by the same amount
    assert np.angle(np.exp(1j * (ph1 - ph0 + theta0))) == pytest.approx(0.0, abs=1e-2)
