"""Non-learned oracle forecaster: PSF calibration, Wiener deconvolution,
a static mean optical-flow field and flow-warp rollout."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ArgumentError, FormatError, IoError, TruncationError
from .tensorio import Frame, Movie, gaussian_blur_px

DEFAULT_SIGMA_GRID = tuple(np.linspace(0.5, 6.0, 23))
NSR_MIN, NSR_MAX = 1e-6, 1e3
MAX_CALIB_SAMPLES = 50
FLOW_LEVELS = 3
FLOW_WINDOW = 25
FLOW_ITERATIONS = 3
FLOW_REG = 1e-3  # Tikhonov term on the local structure tensor, relative to its scale

MAGIC = b"BHOC"
VERSION = 1


@dataclass
class OracleCalib:
    psf_sigma_px: float
    nsr: float
    mean_flow: np.ndarray  # (H, W, 2) displacement per frame, (d_row, d_col)

    def __eq__(self, other):
        return (
            isinstance(other, OracleCalib)
            and self.psf_sigma_px == other.psf_sigma_px
            and self.nsr == other.nsr
            and np.array_equal(self.mean_flow, other.mean_flow)
        )


def _sample_indices(n, k=MAX_CALIB_SAMPLES):
    if n <= k:
        return np.arange(n)
    return np.unique(np.linspace(0, n - 1, k).round().astype(int))


def estimate_psf(unblurred, blurred, grid=DEFAULT_SIGMA_GRID):
    """Grid-search ``sigma`` minimising ``MSE(blur(unblurred, sigma), blurred)``.

    Returns ``(sigma, nsr)``; the noise-to-signal ratio is the residual power
    over the power of the re-blurred frames, clamped to ``[1e-6, 1e3]``.
    """
    grid = [float(s) for s in grid]
    if not grid:
        raise ArgumentError("sigma grid is empty")
    u = np.asarray(unblurred, dtype=np.float64)
    b = np.asarray(blurred, dtype=np.float64)
    if u.shape != b.shape:
        raise ArgumentError(f"movies not aligned: {u.shape} vs {b.shape}")
    idx = _sample_indices(u.shape[0])
    u, b = u[idx], b[idx]
    errs = [float(np.mean((gaussian_blur_px(u, s) - b) ** 2)) for s in grid]
    best = int(np.argmin(errs))
    sigma = grid[best]
    ref = gaussian_blur_px(u, sigma)
    signal = float(np.mean(ref**2))
    nsr = float(np.mean((b - ref) ** 2)) / signal if signal > 0 else NSR_MAX
    return sigma, float(np.clip(nsr, NSR_MIN, NSR_MAX))


def calibrate(train_unblurred: Movie, train_blurred: Movie, grid=DEFAULT_SIGMA_GRID) -> OracleCalib:
    ud = train_unblurred.data if isinstance(train_unblurred, Movie) else np.asarray(train_unblurred)
    bd = train_blurred.data if isinstance(train_blurred, Movie) else np.asarray(train_blurred)
    sigma, nsr = estimate_psf(ud, bd, grid)
    return OracleCalib(sigma, nsr, mean_flow(ud))


# ---------------------------------------------------------------------------
# Wiener deconvolution


def gaussian_otf(shape, sigma):
    """FFT of a unit-sum Gaussian PSF embedded periodically with its centre at
    the origin."""
    h, w = shape
    dy = np.minimum(np.arange(h), h - np.arange(h))
    dx = np.minimum(np.arange(w), w - np.arange(w))
    psf = np.exp(-(dy[:, None] ** 2 + dx[None, :] ** 2) / (2.0 * sigma * sigma))
    psf /= psf.sum()
    return np.fft.fft2(psf)


def wiener_filter(pixels, sigma, nsr):
    """``conj(H) F / (|H|^2 + nsr)`` on the periodic grid, without padding or clamp."""
    H = gaussian_otf(pixels.shape, sigma)
    F = np.fft.fft2(pixels)
    return np.fft.ifft2(np.conj(H) * F / (np.abs(H) ** 2 + nsr)).real


def wiener_deconvolve(f, calib: OracleCalib, pad_px=None) -> Frame:
    """Reflect-pad by ``3 sigma`` (or ``pad_px``), filter, crop, clamp at 0."""
    px = np.asarray(f.pixels if isinstance(f, Frame) else f, dtype=np.float64)
    scale = f.pixel_scale_uas if isinstance(f, Frame) else 0.5
    pad = int(math.ceil(3.0 * calib.psf_sigma_px)) if pad_px is None else int(pad_px)
    h, w = px.shape
    padded = np.pad(px, pad, mode="symmetric") if pad else px
    out = wiener_filter(padded, calib.psf_sigma_px, calib.nsr)[pad : pad + h, pad : pad + w]
    return Frame(np.maximum(out, 0.0), scale)


# ---------------------------------------------------------------------------
# dense optical flow


def _warp(img, flow):
    """Backward warp: ``out(p) = img(p + flow(p))``, bilinear, edge clamp."""
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return ndimage.map_coordinates(img, [yy + flow[..., 0], xx + flow[..., 1]], order=1, mode="nearest")


def _lk_level(i1, i2, flow, window):
    for _ in range(FLOW_ITERATIONS):
        i2w = _warp(i2, flow)
        avg = 0.5 * (i1 + i2w)
        gy, gx = np.gradient(avg)
        it = i2w - i1
        win = lambda a: ndimage.uniform_filter(a, window, mode="nearest")
        a, b, c = win(gy * gy), win(gy * gx), win(gx * gx)
        ry, rx = win(gy * it), win(gx * it)
        reg = FLOW_REG * (np.mean(a + c) + 1e-30)
        a, c = a + reg, c + reg
        det = a * c - b * b
        # solve [a b; b c] d = -[ry; rx]
        dy = -(c * ry - b * rx) / det
        dx = -(a * rx - b * ry) / det
        flow = flow + np.stack([dy, dx], axis=-1)
    return flow


def dense_flow(frame1, frame2, levels=FLOW_LEVELS, window=FLOW_WINDOW):
    """Coarse-to-fine gradient-based flow with ``frame2(p + flow(p)) ~ frame1(p)``.

    Returns an ``(H, W, 2)`` array of (row, column) displacements in pixels.
    """
    i1 = np.asarray(frame1, dtype=np.float64)
    i2 = np.asarray(frame2, dtype=np.float64)
    scale = max(float(np.max(np.abs(i1))), float(np.max(np.abs(i2))), 1e-30)
    pyr1, pyr2 = [i1 / scale], [i2 / scale]
    for _ in range(levels - 1):
        if min(pyr1[-1].shape) < 16:
            break
        pyr1.append(ndimage.zoom(ndimage.gaussian_filter(pyr1[-1], 1.0), 0.5, order=1))
        pyr2.append(ndimage.zoom(ndimage.gaussian_filter(pyr2[-1], 1.0), 0.5, order=1))
    flow = np.zeros(pyr1[-1].shape + (2,))
    for lvl in range(len(pyr1) - 1, -1, -1):
        shape = pyr1[lvl].shape
        if flow.shape[:2] != shape:
            zf = (shape[0] / flow.shape[0], shape[1] / flow.shape[1])
            flow = np.stack([ndimage.zoom(flow[..., k], zf, order=1) for k in range(2)], axis=-1) * 2.0
        win = max(3, int(round(window / 2**lvl)) | 1)
        flow = _lk_level(pyr1[lvl], pyr2[lvl], flow, win)
    return flow


def mean_flow(frames, max_pairs=MAX_CALIB_SAMPLES):
    """Average of the dense flows between consecutive frames."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[0] < 2:
        return np.zeros(frames.shape[1:] + (2,))
    idx = _sample_indices(frames.shape[0] - 1, max_pairs)
    return np.mean([dense_flow(frames[i], frames[i + 1]) for i in idx], axis=0)


# ---------------------------------------------------------------------------
# rollout


def warp_step(pixels, flow):
    """Advect one frame forward by ``flow``: ``out(p) = in(p - flow(p))``."""
    return _warp(np.asarray(pixels, dtype=np.float64), -np.asarray(flow))


def flow_warp_rollout(x0, calib: OracleCalib, n_steps: int = 60, dt_M=5.0) -> Movie:
    if n_steps < 1:
        raise ArgumentError("n_steps must be >= 1")
    f = wiener_deconvolve(x0, calib)
    cur = f.pixels
    out = np.empty((n_steps,) + cur.shape)
    for k in range(n_steps):
        cur = warp_step(cur, calib.mean_flow)
        out[k] = cur
    return Movie(out, dt_M=dt_M, pixel_scale_uas=f.pixel_scale_uas)


# ---------------------------------------------------------------------------
# BHOC sidecar


def save_calib(calib: OracleCalib, path):
    """Magic, u32 version, f64 sigma, f64 nsr, u32 H, u32 W, then the flow as
    ``H * W * 2`` little-endian f64 values."""
    flow = np.ascontiguousarray(calib.mean_flow, dtype="<f8")
    h, w, _ = flow.shape
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC + struct.pack("<IddII", VERSION, calib.psf_sigma_px, calib.nsr, h, w) + flow.tobytes())
    except OSError as exc:
        raise IoError(f"cannot write calibration {path}: {exc}") from exc


def load_calib(path) -> OracleCalib:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read calibration {path}: {exc}") from exc
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    head = struct.Struct("<IddII")
    if len(raw) < 4 + head.size:
        raise TruncationError(f"{path}: header truncated")
    version, sigma, nsr, h, w = head.unpack_from(raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    start = 4 + head.size
    need = start + 8 * h * w * 2
    if len(raw) < need:
        raise TruncationError(f"{path}: flow field truncated")
    if len(raw) > need:
        raise FormatError(f"{path}: trailing bytes")
    flow = np.frombuffer(raw, dtype="<f8", count=h * w * 2, offset=start).reshape(h, w, 2).astype(np.float64)
    return OracleCalib(sigma, nsr, flow)
