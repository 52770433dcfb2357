"""Cylinder plots, the four plasma features, and radially averaged PSDs."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ArgumentError, DegenerateInputError
from .tensorio import Frame, Movie

RADIUS_FACTORS = (0.75, 0.9375, 1.0, 1.125, 1.3125, 1.5)
DEFAULT_N_THETA = 180
DEFAULT_DELTA_R_FRAC = 0.1
DEFAULT_SLICE = 60
FEATURE_NAMES = ("omega_p", "pitch", "asym", "slope")
PILOT_LAGS = 3
RIDGE_TRAVEL = 0.4  # fraction of the angular half-window


@dataclass
class CylinderPlot:
    values: np.ndarray  # (n_t, n_theta) linear intensities
    radius_px: float
    normalized: np.ndarray  # log(values) minus its grand mean

    @property
    def n_t(self):
        return self.values.shape[0]

    @property
    def n_theta(self):
        return self.values.shape[1]

    @property
    def thetas(self):
        return 2.0 * np.pi * np.arange(self.n_theta) / self.n_theta


@dataclass
class PlasmaFeatures:
    pattern_speed: float = float("nan")
    pitch_angle: float = float("nan")
    asymmetry: float = float("nan")
    rotation_slope: float = float("nan")
    flags: dict = field(default_factory=lambda: dict.fromkeys(FEATURE_NAMES, False))

    def as_array(self):
        return np.array([self.pattern_speed, self.pitch_angle, self.asymmetry, self.rotation_slope])

    def flag_array(self):
        return np.array([self.flags[k] for k in FEATURE_NAMES], dtype=bool)


def _frames(movie):
    return movie.data if isinstance(movie, Movie) else np.asarray(movie)


def _log_normalize(values):
    # Strip the binary exponent of the peak first: scaling by a power of two
    # then leaves the normalized plot bit-identical.
    peak = float(np.max(values))
    if peak > 0:
        _, e = math.frexp(peak)
        values = np.ldexp(values, -e)
    logv = np.log(np.maximum(values, np.finfo(np.float64).tiny))
    return logv - logv.mean()


def cylinder_plot(movie, radius_px: float, n_theta: int = DEFAULT_N_THETA) -> CylinderPlot:
    """Sample each frame on a ring about the frame centre.

    Sample ``j`` sits at angle ``2 pi j / n_theta`` measured with
    ``atan2(row offset, column offset)``.
    """
    data = np.asarray(_frames(movie), dtype=np.float64)
    if data.ndim == 2:
        data = data[None]
    n_t, h, w = data.shape
    if n_theta < 32:
        raise ArgumentError("n_theta must be at least 32")
    if not 0 < radius_px or radius_px + 1 >= min(h, w) / 2.0:
        raise ArgumentError(f"ring radius {radius_px} px does not fit a {h}x{w} frame")
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    th = 2.0 * np.pi * np.arange(n_theta) / n_theta
    rows = cy + radius_px * np.sin(th)
    cols = cx + radius_px * np.cos(th)
    vals = np.empty((n_t, n_theta))
    for i in range(n_t):
        vals[i] = ndimage.map_coordinates(data[i], [rows, cols], order=1, mode="nearest")
    return CylinderPlot(vals, float(radius_px), _log_normalize(vals))


def autocorrelation(cp) -> np.ndarray:
    """Circular autocorrelation of the normalized plot divided by its variance.

    Indexed ``xi[dt, dtheta]`` with FFT lag ordering, so ``xi[0, 0] == 1``.
    """
    z = cp.normalized if isinstance(cp, CylinderPlot) else np.asarray(cp, dtype=np.float64)
    z = z - z.mean()
    var = float(np.mean(z * z))
    if not var > 1e-24:
        raise DegenerateInputError("cylinder plot has zero variance")
    spec = np.fft.fft2(z)
    return np.fft.ifft2(spec * np.conj(spec)).real / (z.size * var)


def autocorrelation_bruteforce(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    z = z - z.mean()
    n_t, n_th = z.shape
    var = np.mean(z * z)
    out = np.zeros_like(z)
    for dt in range(n_t):
        for dth in range(n_th):
            acc = 0.0
            for t in range(n_t):
                for th in range(n_th):
                    acc += z[t, th] * z[(t + dt) % n_t, (th + dth) % n_th]
            out[dt, dth] = acc
    return out / (z.size * var)


def _remove_static(z):
    """Subtract each angle's time mean: static azimuthal structure carries no
    pattern speed and otherwise pulls the moment ratio toward zero."""
    return z - z.mean(axis=0, keepdims=True)


def _time_linear_autocorrelation(z):
    """Autocorrelation that is circular in angle but zero-padded in time.

    A finite movie is not periodic in time; wrapping it would pair the last
    frames with the first ones at a spurious lag.
    """
    z = z - z.mean()
    n_t = z.shape[0]
    var = float(np.mean(z * z))
    if not var > 1e-24:
        raise DegenerateInputError("cylinder plot has zero variance")
    padded = np.zeros((2 * n_t, z.shape[1]))
    padded[:n_t] = z
    spec = np.fft.fft2(padded)
    return np.fft.ifft2(spec * np.conj(spec)).real / (z.size * var)


def _moment_ratio(xi, max_dt, max_dtheta):
    n_t, n_th = xi.shape
    dt = np.fft.fftfreq(n_t, d=1.0 / n_t)
    dth = np.fft.fftfreq(n_th, d=1.0 / n_th) * (2 * np.pi / n_th)
    T, TH = np.meshgrid(dt, dth, indexing="ij")
    win = (np.abs(T) <= max_dt) & (np.abs(TH) <= max_dtheta + 1e-12)
    wgt = np.where(win, np.maximum(xi, 0.0), 0.0)
    m_tt = float(np.sum(wgt * T * T))
    m_tth = float(np.sum(wgt * T * TH))
    if not m_tt > 0:
        raise DegenerateInputError("no temporal structure in the autocorrelation window")
    return m_tth / m_tt


def pattern_speed(
    cp: CylinderPlot,
    max_dt: float = None,
    max_dtheta: float = math.pi / 2,
    remove_static: bool = True,
    adaptive: bool = True,
) -> float:
    """Pattern speed (rad/frame) from the second moments of the autocorrelation.

    ``Omega_p = M_t,theta / M_t,t`` with moments weighted by ``max(xi, 0)`` in a
    centred lag window (default ``|dt| <= n_t/4``, ``|dtheta| <= pi/2``).

    With ``adaptive`` a pilot estimate from a short window (3 lags) first
    bounds the time window so the correlation ridge travels at most ``pi/5``:
    a fast ridge leaving the angular window would otherwise be clipped and the
    ratio would collapse toward zero.
    """
    z = cp.normalized
    if remove_static:
        z = _remove_static(z)
    if not float(np.mean(z * z)) > 1e-24:
        # nothing varies in time: a static pattern has zero speed
        return 0.0
    xi = _time_linear_autocorrelation(z)
    n_t = z.shape[0]
    if max_dt is None:
        max_dt = n_t / 4.0
    if max_dt < 1:
        raise DegenerateInputError("cylinder plot too short for a pattern speed")
    if adaptive:
        pilot = abs(_moment_ratio(xi, min(max_dt, PILOT_LAGS), max_dtheta))
        if pilot * max_dt > max_dtheta * RIDGE_TRAVEL:
            max_dt = max(1.0, math.floor(max_dtheta * RIDGE_TRAVEL / pilot))
    return _moment_ratio(xi, max_dt, max_dtheta)


def _ring_pattern_speed(movie, radius_px, n_theta, **kw):
    return pattern_speed(cylinder_plot(movie, radius_px, n_theta), **kw)


def rotation_curve_slope(
    movie,
    r_ring_px: float,
    n_theta: int = DEFAULT_N_THETA,
    factors=RADIUS_FACTORS,
    method: str = "loglog",
    return_speeds=False,
):
    """Dimensionless rotation-curve slope ``d ln Omega / d ln r`` at the ring.

    Pattern speeds are measured at ``factors * r_ring``. ``method="loglog"``
    fits ``ln |Omega_p|`` against ``ln(r / r_ring)`` by ordinary least squares,
    which is exact for a power-law curve. ``method="linear"`` fits
    ``Omega_p`` against ``r / r_ring - 1`` and divides by the fitted speed at
    the ring; it is also used when the speeds change sign.
    """
    if method not in ("loglog", "linear"):
        raise ArgumentError(f"unknown slope method {method!r}")
    data = _frames(movie)
    h, w = data.shape[-2:]
    xs, ys = [], []
    for f in factors:
        r = f * r_ring_px
        if r + 1 >= min(h, w) / 2.0:
            raise ArgumentError(f"radius {r:.2f} px does not fit the frame")
        try:
            ys.append(_ring_pattern_speed(movie, r, n_theta))
            xs.append(f - 1.0)
        except DegenerateInputError:
            continue
    if len(xs) < 3:
        raise DegenerateInputError("fewer than 3 radii gave a pattern speed")
    xs, ys = np.asarray(xs), np.asarray(ys)
    signs = np.sign(ys)
    if method == "loglog" and np.all(signs == signs[0]) and signs[0] != 0:
        out = float(np.polyfit(np.log1p(xs), np.log(np.abs(ys)), 1)[0])
    else:
        slope, intercept = np.polyfit(xs, ys, 1)
        if not abs(intercept) > 1e-9:
            raise DegenerateInputError("no rotation at the ring radius")
        out = float(slope / intercept)
    return (out, xs, ys) if return_speeds else out


def _cross_shift(z1, z2, max_shift):
    """Angular lag maximising sum_t sum_theta z1(t, th) z2(t, th + lag)."""
    n_th = z1.shape[1]
    c = np.fft.ifft(np.conj(np.fft.fft(z1, axis=1)) * np.fft.fft(z2, axis=1), axis=1).real.sum(axis=0)
    lags = np.arange(n_th)
    lags = np.where(lags > n_th // 2, lags - n_th, lags)
    step = 2 * np.pi / n_th
    allowed = np.abs(lags * step) <= max_shift + 1e-12
    if not np.any(c[allowed] != 0):
        raise DegenerateInputError("flat cross-correlation")
    idx = np.flatnonzero(allowed)[np.argmax(c[allowed])]
    # parabolic refinement on the neighbouring bins
    ym, y0, yp = c[(idx - 1) % n_th], c[idx], c[(idx + 1) % n_th]
    denom = ym - 2 * y0 + yp
    frac = 0.5 * (ym - yp) / denom if denom < 0 else 0.0
    return (lags[idx] + float(np.clip(frac, -0.5, 0.5))) * step


def pitch_angle(
    movie,
    r_ring_px: float,
    delta_r_frac: float = DEFAULT_DELTA_R_FRAC,
    n_theta: int = DEFAULT_N_THETA,
    max_shift: float = math.pi / 2,
    remove_static: bool = True,
) -> float:
    """Pitch angle ``arctan(theta* / ln(1 + delta_r_frac))`` in radians, where
    ``theta*`` is the angular lag of peak correlation between the rings at
    ``r_ring`` and ``r_ring (1 + delta_r_frac)``."""
    if not delta_r_frac > 0:
        raise ArgumentError("delta_r_frac must be positive")
    z1 = cylinder_plot(movie, r_ring_px, n_theta).normalized
    z2 = cylinder_plot(movie, r_ring_px * (1 + delta_r_frac), n_theta).normalized
    if remove_static and z1.shape[0] > 1:
        z1, z2 = _remove_static(z1), _remove_static(z2)
    if np.var(z1) <= 1e-24 or np.var(z2) <= 1e-24:
        raise DegenerateInputError("cylinder plot has zero variance")
    theta_star = _cross_shift(z1, z2, max_shift)
    return math.atan(theta_star / math.log1p(delta_r_frac))


def asymmetry(movie, r_ring_px: float, n_theta: int = DEFAULT_N_THETA, return_phase=False):
    """A/C of the least-squares fit ``A cos(theta + theta0) + C`` to the
    time-averaged ring profile."""
    cp = movie if isinstance(movie, CylinderPlot) else cylinder_plot(movie, r_ring_px, n_theta)
    return asymmetry_of_profile(cp.values.mean(axis=0), return_phase=return_phase)


def asymmetry_of_profile(profile, return_phase=False):
    p = np.asarray(profile, dtype=np.float64)
    th = 2 * np.pi * np.arange(p.size) / p.size
    c0 = p.mean()
    if not c0 > 0:
        raise DegenerateInputError("ring profile mean is not positive")
    c1 = np.mean(p * np.exp(-1j * th))
    ratio = float(2 * abs(c1) / c0)
    if return_phase:
        # c1 = (A / 2) exp(i theta0) for p = C + A cos(theta + theta0)
        return ratio, float(np.angle(c1))
    return ratio


def radial_psd(f, n_bins: int = None) -> np.ndarray:
    """Mean of ``|FFT2(f - mean)|^2`` in integer radial frequency bins.

    Element ``k - 1`` holds bin ``k``; bin 0 (DC) is excluded. By default bins
    run to ``min(H, W) // 2`` so each is fully populated.
    """
    px = np.asarray(f.pixels if isinstance(f, Frame) else f, dtype=np.float64)
    h, w = px.shape
    power = np.abs(np.fft.fft2(px - px.mean())) ** 2
    ky = np.fft.fftfreq(h) * h
    kx = np.fft.fftfreq(w) * w
    k = np.rint(np.hypot(*np.meshgrid(ky, kx, indexing="ij"))).astype(int)
    if n_bins is None:
        n_bins = min(h, w) // 2
    sums = np.bincount(k.ravel(), weights=power.ravel(), minlength=n_bins + 1)
    counts = np.bincount(k.ravel(), minlength=n_bins + 1)
    return sums[1 : n_bins + 1] / np.maximum(counts[1 : n_bins + 1], 1)


def log_psd_distance(psd_a, psd_b, upper_half=True, floor=1e-300) -> float:
    """l2 distance between log PSD curves, by default over the upper half of bins."""
    a = np.log(np.maximum(np.asarray(psd_a), floor))
    b = np.log(np.maximum(np.asarray(psd_b), floor))
    if upper_half:
        start = a.size // 2
        a, b = a[start:], b[start:]
    return float(np.sqrt(np.sum((a - b) ** 2)))


def extract_features(movie, r_ring_px: float, n_theta: int = DEFAULT_N_THETA, delta_r_frac: float = DEFAULT_DELTA_R_FRAC) -> PlasmaFeatures:
    """All four features; failures are flagged instead of raised.

    ``flags[name]`` is True when the value is valid.
    """
    feats = PlasmaFeatures()
    try:
        feats.pattern_speed = _ring_pattern_speed(movie, r_ring_px, n_theta)
        feats.flags["omega_p"] = bool(np.isfinite(feats.pattern_speed))
    except (DegenerateInputError, ArgumentError):
        pass
    try:
        feats.pitch_angle = pitch_angle(movie, r_ring_px, delta_r_frac, n_theta)
        feats.flags["pitch"] = bool(np.isfinite(feats.pitch_angle))
    except (DegenerateInputError, ArgumentError):
        pass
    try:
        feats.asymmetry = asymmetry(movie, r_ring_px, n_theta)
        feats.flags["asym"] = bool(np.isfinite(feats.asymmetry))
    except (DegenerateInputError, ArgumentError):
        pass
    try:
        feats.rotation_slope = rotation_curve_slope(movie, r_ring_px, n_theta)
        feats.flags["slope"] = bool(np.isfinite(feats.rotation_slope))
    except (DegenerateInputError, ArgumentError):
        pass
    return feats


FEATURE_CSV_COLUMNS = ["movie", "omega_p", "pitch", "asym", "slope", "flag_omega", "flag_pitch", "flag_asym", "flag_slope"]


def write_features_csv(path, rows):
    """``rows`` is an iterable of ``(movie_id, PlasmaFeatures)``."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(FEATURE_CSV_COLUMNS)
        for name, f in rows:
            wr.writerow(
                [name]
                + [repr(float(v)) for v in f.as_array()]
                + [int(f.flags[k]) for k in FEATURE_NAMES]
            )


def read_features_csv(path):
    names, feats = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            f = PlasmaFeatures(
                float(row["omega_p"]),
                float(row["pitch"]),
                float(row["asym"]),
                float(row["slope"]),
                {
                    "omega_p": row["flag_omega"] == "1",
                    "pitch": row["flag_pitch"] == "1",
                    "asym": row["flag_asym"] == "1",
                    "slope": row["flag_slope"] == "1",
                },
            )
            names.append(row["movie"])
            feats.append(f)
    return names, feats
