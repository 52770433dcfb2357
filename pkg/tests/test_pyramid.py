import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bhflow.errors import ArgumentError
from bhflow.pyramid import (
    LossSpec,
    build_pyramid,
    downscale,
    loss_terms,
    mean_flux,
    multiscale_loss,
    upscale,
)
from bhflow.tensorio import NormalizedFrame


def pool_loop(img):
    h, w = img.shape
    out = np.zeros((h // 2, w // 2))
    for i in range(h // 2):
        for j in range(w // 2):
            out[i, j] = (img[2 * i, 2 * j] + img[2 * i + 1, 2 * j] + img[2 * i, 2 * j + 1] + img[2 * i + 1, 2 * j + 1]) / 4
    return out


def bilinear_point(img, y, x):
    h, w = img.shape
    y = min(max(y, 0.0), h - 1.0)
    x = min(max(x, 0.0), w - 1.0)
    y0, x0 = int(math.floor(y)), int(math.floor(x))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    fy, fx = y - y0, x - x0
    return (
        img[y0, x0] * (1 - fy) * (1 - fx)
        + img[y1, x0] * fy * (1 - fx)
        + img[y0, x1] * (1 - fy) * fx
        + img[y1, x1] * fy * fx
    )


def test_downscale_examples():
    np.testing.assert_array_equal(downscale(np.array([[1.0, 2.0], [3.0, 4.0]])), [[2.5]])
    np.testing.assert_array_equal(downscale(np.full((6, 4), 2.0)), np.full((3, 2), 2.0))
    img = np.random.default_rng(0).random((8, 8))
    np.testing.assert_allclose(downscale(img), pool_loop(img), rtol=0, atol=1e-15)
    with pytest.raises(ArgumentError):
        downscale(np.zeros((3, 4)))


def test_upscale_examples():
    np.testing.assert_allclose(upscale(np.full((3, 5), 1.5)), np.full((6, 10), 1.5), atol=1e-15)
    np.testing.assert_allclose(upscale(np.array([[2.0]])), np.full((2, 2), 2.0))
    ramp = np.add.outer(np.arange(4.0), 10 * np.arange(4.0))
    up = upscale(ramp)
    for i in range(8):
        for j in range(8):
            assert up[i, j] == pytest.approx(bilinear_point(ramp, (i + 0.5) / 2 - 0.5, (j + 0.5) / 2 - 0.5), abs=1e-6)


def test_mean_preserved_by_downscale():
    img = np.random.default_rng(1).random((32, 24))
    g = img
    for _ in range(3):
        g = downscale(g)
        assert g.mean() == pytest.approx(img.mean(), rel=1e-12)


def test_constant_frame_pyramid():
    st_ = build_pyramid(np.full((16, 16), 3.0))
    assert st_.mean_flux == 3.0
    for band in st_.laplacians.values():
        assert np.max(np.abs(band)) < 1e-12


def test_reconstruction_identity_on_padded_100px():
    img = np.random.default_rng(2).normal(size=(100, 100))
    st_ = build_pyramid(img, (0, 1, 2), pad_to=(128, 128))
    assert st_.gaussians[0].shape == (128, 128)
    np.testing.assert_array_equal(st_.gaussians[0][:100, :100], img)
    for k in (0, 1, 2):
        resid = st_.gaussians[k] - upscale(st_.gaussians[k + 1]) - st_.laplacians[k]
        assert np.max(np.abs(resid)) < 1e-6 * np.max(np.abs(st_.gaussians[k]))
    with pytest.raises(ArgumentError):
        build_pyramid(img, (0, 1, 2), pad_to=(100, 100))


def test_impulse_energy_decreases_with_level():
    img = np.zeros((64, 64))
    img[30, 33] = 1.0
    st_ = build_pyramid(img)
    e = [np.sum(st_.laplacians[k] ** 2) for k in (0, 1, 2)]
    assert e[0] > e[1] > e[2]


def test_mean_flux_examples():
    assert mean_flux(np.full((3, 3), 2.5)) == 2.5
    assert mean_flux(np.array([[0.0, 2.0], [4.0, 6.0]])) == 3.0
    img = np.random.default_rng(3).random((50, 70)) * 1e3
    total, comp = 0.0, 0.0
    for v in img.ravel():
        y = v - comp
        t = total + y
        comp = (t - total) - y
        total = t
    assert mean_flux(img) == pytest.approx(total / img.size, rel=1e-12)


def test_default_loss_weights():
    spec = LossSpec()
    assert spec.levels == (0, 1, 2)
    assert spec.level_weights == (1.0, 0.5, 0.25)
    assert spec.flux_weight == 0.125


def test_loss_zero_on_identical():
    x = np.random.default_rng(4).normal(size=(32, 32))
    loss, grad = multiscale_loss(NormalizedFrame(x), NormalizedFrame(x.copy()))
    assert loss == 0.0 and np.all(grad == 0)


def test_loss_shape_mismatch():
    with pytest.raises(ArgumentError):
        multiscale_loss(np.zeros((8, 8)), np.zeros((8, 10)))


def test_each_term_isolable():
    # a constant offset lives only in the flux term
    c = 0.3
    pred = np.full((32, 32), c)
    target = np.zeros((32, 32))
    total, terms, _ = loss_terms(pred, target)
    assert terms["lap0"] == pytest.approx(0, abs=1e-15)
    assert terms["lap2"] == pytest.approx(0, abs=1e-15)
    assert terms["flux"] == pytest.approx(0.5 * c + 0.5 * c * c)
    assert total == pytest.approx(0.125 * (0.5 * c + 0.5 * c * c))
    # a checkerboard is removed by the first pooling: only Lap_0 sees it
    a = 0.2
    cb = a * (-1.0) ** np.add.outer(np.arange(32), np.arange(32))
    total, terms, _ = loss_terms(cb, target)
    assert terms["lap1"] == pytest.approx(0, abs=1e-15)
    assert terms["flux"] == pytest.approx(0, abs=1e-15)
    assert terms["lap0"] == pytest.approx(0.5 * a + 0.5 * a * a)
    assert total == pytest.approx(1.0 * (0.5 * a + 0.5 * a * a))


def test_term_weights_from_random_pair():
    rng = np.random.default_rng(5)
    p, t = rng.normal(size=(32, 32)), rng.normal(size=(32, 32))
    total, terms, _ = loss_terms(p, t)
    expect = terms["lap0"] + 0.5 * terms["lap1"] + 0.25 * terms["lap2"] + 0.125 * terms["flux"]
    assert total == pytest.approx(expect, rel=1e-14)
    # per-level combination is an equal-weight mean of l1 and l2
    d = p - t
    flux = d.mean()
    assert terms["flux"] == pytest.approx(0.5 * abs(flux) + 0.5 * flux**2)


def central_fd(fn, x, h):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = fn(x)
        x[idx] = old - h
        fm = fn(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


@pytest.mark.parametrize("seed", range(3))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    p, t = rng.normal(size=(32, 32)), rng.normal(size=(32, 32))
    _, grad = multiscale_loss(p, t)
    fd = central_fd(lambda x: multiscale_loss(x, t)[0], p.copy(), 1e-4)
    mask = np.abs(fd) > 1e-6
    assert np.max(np.abs(fd - grad)[mask] / np.abs(fd[mask])) < 1e-4


def test_flux_weight_scales_gradient_linearly():
    pred, target = np.full((16, 16), 0.4), np.zeros((16, 16))
    _, g1 = multiscale_loss(pred, target, LossSpec(flux_weight=0.125))
    _, g2 = multiscale_loss(pred, target, LossSpec(flux_weight=0.25))
    np.testing.assert_allclose(g2, 2 * g1, rtol=1e-12)


def test_ablation_specs():
    l2 = LossSpec.l2_only()
    rng = np.random.default_rng(6)
    p, t = rng.normal(size=(8, 8)), rng.normal(size=(8, 8))
    assert multiscale_loss(p, t, l2)[0] == pytest.approx(np.mean((p - t) ** 2))
    assert LossSpec.no_flux().flux_weight == 0.0
    with pytest.raises(ArgumentError):
        LossSpec(levels=(0, 1), level_weights=(1.0, -1.0))


def test_loss_spec_file_round_trip(tmp_path):
    spec = LossSpec(levels=(0, 2), level_weights=(1.0, 0.3), flux_weight=0.5)
    spec.save(tmp_path / "loss.cfg")
    text = (tmp_path / "loss.cfg").read_text()
    assert "levels = 0, 2" in text and "flux_weight = 0.5" in text
    assert LossSpec.load(tmp_path / "loss.cfg") == spec


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 10), st.integers(2, 10))
def test_loss_symmetric_and_positive(seed, h2, w2):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(2 * h2, 2 * w2)), rng.normal(size=(2 * h2, 2 * w2))
    lxy = multiscale_loss(x, y)[0]
    assert lxy > 0
    assert lxy == pytest.approx(multiscale_loss(y, x)[0], rel=1e-12)
    assert multiscale_loss(x, x)[0] == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 40), st.integers(1, 40))
def test_reconstruction_identity_property(seed, h, w):
    img = np.random.default_rng(seed).normal(size=(h, w))
    st_ = build_pyramid(img)
    for k in (0, 1, 2):
        resid = st_.gaussians[k] - upscale(st_.gaussians[k + 1]) - st_.laplacians[k]
        assert np.max(np.abs(resid)) <= 1e-6 * np.max(np.abs(st_.gaussians[k]))
    for g in st_.gaussians[1:]:
        assert mean_flux(g) == pytest.approx(mean_flux(st_.gaussians[0]), rel=1e-12, abs=1e-12)
