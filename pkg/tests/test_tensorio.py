import math

import numpy as np
import pytest

from bhflow.errors import ArgumentError, DataError, FormatError, TruncationError
from bhflow.tensorio import (
    DegradeSpec,
    Frame,
    Movie,
    blur_gaussian,
    degrade,
    denormalize,
    normalize,
    read_movie,
    write_movie,
)

# Hand-assembled file: 2 frames of 4x4, dt_M = 5, pixel scale 0.5, frame 0
# all 1.5 and frame 1 all 0.25.
HEADER_HEX = (
    "42484d56"  # BHMV
    "01000000" "02000000" "04000000" "04000000"
    "0000000000001440"  # 5.0
    "000000000000e03f"  # 0.5
)
FRAME0_HEX = "0000c03f" * 16
FRAME1_HEX = "0000803e" * 16


def test_read_hand_written_bytes(tmp_path):
    path = tmp_path / "hand.bhmv"
    path.write_bytes(bytes.fromhex(HEADER_HEX + FRAME0_HEX + FRAME1_HEX))
    m = read_movie(path)
    assert m.n_frames == 2 and (m.height, m.width) == (4, 4)
    assert m.dt_M == 5.0 and m.pixel_scale_uas == 0.5
    assert np.all(m.data[0] == 1.5) and np.all(m.data[1] == 0.25)


def test_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(1)
    m = Movie(rng.random((3, 6, 5)).astype(np.float32), dt_M=2.5, pixel_scale_uas=0.7)
    write_movie(m, tmp_path / "m.bhmv")
    back = read_movie(tmp_path / "m.bhmv")
    assert back == m
    write_movie(back, tmp_path / "m2.bhmv")
    assert (tmp_path / "m.bhmv").read_bytes() == (tmp_path / "m2.bhmv").read_bytes()


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.bhmv"
    path.write_bytes(b"XXXX" + bytes.fromhex(HEADER_HEX)[4:] + bytes.fromhex(FRAME0_HEX * 2))
    with pytest.raises(FormatError):
        read_movie(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "short.bhmv"
    path.write_bytes(bytes.fromhex(HEADER_HEX + FRAME0_HEX))
    with pytest.raises(TruncationError):
        read_movie(path)


def test_non_finite_pixel(tmp_path):
    path = tmp_path / "nan.bhmv"
    path.write_bytes(bytes.fromhex(HEADER_HEX + FRAME0_HEX + "0000c07f" + FRAME1_HEX[8:]))
    with pytest.raises(DataError):
        read_movie(path)


def test_movie_invariants():
    with pytest.raises(ArgumentError):
        Movie(np.zeros((1, 4, 4)), dt_M=0)
    with pytest.raises(ArgumentError):
        Movie.from_frames([Frame(np.zeros((4, 4))), Frame(np.zeros((4, 5)))])
    m = Movie.from_frames([Frame(np.ones((4, 4))), Frame(np.zeros((4, 4)))])
    assert len(m) == 2 and m[0] == Frame(np.ones((4, 4)))
    assert np.array_equal(m.reversed().data[0], np.zeros((4, 4)))


def test_normalize_examples():
    nf = normalize(Frame(np.full((3, 3), math.e)))
    np.testing.assert_allclose(nf.pixels, 1.0, rtol=0, atol=1e-15)
    assert normalize(Frame(np.zeros((2, 2))), 1e-8).pixels[0, 0] == math.log(1e-8)
    rng = np.random.default_rng(2)
    px = 10 ** rng.uniform(-6, -1, (16, 16))
    px[0, 0], px[0, 1] = 1e-6, 1e-1
    out = normalize(Frame(px)).pixels
    assert out.min() == pytest.approx(math.log(1e-6)) and out.max() == pytest.approx(math.log(1e-1))
    for v, o in zip(px.ravel()[:50], out.ravel()[:50]):
        assert o == math.log(v)


def test_normalize_rejects_non_finite():
    with pytest.raises(DataError):
        normalize(Frame(np.array([[1.0, np.inf]])))


def test_denormalize_round_trip():
    rng = np.random.default_rng(3)
    px = rng.uniform(1e-8, 5.0, (20, 20))
    back = denormalize(normalize(Frame(px))).pixels
    np.testing.assert_allclose(back, px, rtol=1e-6)
    for v, b in zip(px.ravel()[:40], back.ravel()[:40]):
        assert b == pytest.approx(math.exp(math.log(v)), rel=1e-12)
    from bhflow.tensorio import NormalizedFrame

    assert np.all(denormalize(NormalizedFrame(np.zeros((3, 3)))).pixels == 1.0)


def test_normalize_strictly_monotone():
    x = np.sort(np.random.default_rng(4).uniform(1e-7, 1.0, 500))
    y = normalize(Frame(x[None, :])).pixels[0]
    assert np.all(np.diff(y) > 0)


def test_blur_delta_matches_analytic_gaussian():
    n = 161
    px = np.zeros((n, n))
    c = n // 2
    px[c, c] = 1.0
    out = blur_gaussian(Frame(px, 0.5), 20.0).pixels
    sigma = 40.0 / (2 * math.sqrt(2 * math.log(2)))
    assert sigma == pytest.approx(16.99, abs=0.01)
    for r in range(0, int(2 * sigma) + 1, 3):
        analytic = math.exp(-r * r / (2 * sigma**2)) / (2 * math.pi * sigma**2)
        assert out[c, c + r] == pytest.approx(analytic, rel=0.01)


def test_blur_conserves_flux_on_interior_frame():
    yy, xx = np.mgrid[0:96, 0:96]
    px = np.exp(-((yy - 47.5) ** 2 + (xx - 47.5) ** 2) / (2 * 8.0**2))
    out = blur_gaussian(Frame(px, 0.5), 4.0).pixels
    assert out.sum() == pytest.approx(px.sum(), rel=1e-4)


def test_blur_small_sigma_and_constant():
    # sigma_px about 0.2: the kernel is nearly a delta
    rng = np.random.default_rng(5)
    yy, xx = np.mgrid[0:32, 0:32]
    smooth = np.sin(xx / 5.0) + np.cos(yy / 7.0) + 2.0
    out = blur_gaussian(Frame(smooth, 1.0), 0.2 * 2 * math.sqrt(2 * math.log(2))).pixels
    assert np.max(np.abs(out - smooth)) < 1e-3
    const = np.full((16, 16), 3.25)
    np.testing.assert_allclose(blur_gaussian(Frame(const), 7.0).pixels, const, rtol=1e-12)
    with pytest.raises(ArgumentError):
        blur_gaussian(Frame(rng.random((4, 4))), 0.0)


def test_blur_commutes_with_transpose():
    px = np.random.default_rng(6).random((40, 40))
    a = blur_gaussian(Frame(px.T, 0.5), 6.0).pixels
    b = blur_gaussian(Frame(px, 0.5), 6.0).pixels.T
    assert np.max(np.abs(a - b)) < 1e-6


def test_salt_pepper_counts():
    px = np.random.default_rng(7).uniform(0.2, 0.8, (100, 100))
    out = degrade(Frame(px), DegradeSpec.salt_pepper(0.01, seed=11)).pixels
    changed = out != px
    assert changed.sum() == 100
    assert set(np.unique(out[changed])) <= {px.min(), px.max()}
    assert np.array_equal(degrade(Frame(px), DegradeSpec.salt_pepper(0.0)).pixels, px)


def test_salt_pepper_deterministic_and_validated():
    px = np.random.default_rng(8).random((30, 30))
    a = degrade(Frame(px), DegradeSpec.salt_pepper(0.2, seed=3)).pixels
    b = degrade(Frame(px), DegradeSpec.salt_pepper(0.2, seed=3)).pixels
    assert a.tobytes() == b.tobytes()
    with pytest.raises(ArgumentError):
        DegradeSpec.salt_pepper(1.5)


def test_translate_x():
    px = np.random.default_rng(9).uniform(1.0, 2.0, (10, 100))
    out = degrade(Frame(px), DegradeSpec.translate_x(0.05)).pixels
    assert np.all(out[:, :5] == 0) and np.all(out[:, 5:] > 0)
    assert np.array_equal(out[:, 5:], px[:, :95])
    back = degrade(Frame(px), DegradeSpec.translate_x(-0.05)).pixels
    assert np.all(back[:, -5:] == 0)
