"""Frame and movie containers, the BHMV file format, log normalisation and
the degradations used for robustness tests."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ArgumentError, DataError, FormatError, IoError, TruncationError

DEFAULT_PIXEL_SCALE_UAS = 0.5
DEFAULT_DT_M = 5.0
DEFAULT_FLOOR_EPS = 1e-8

MOVIE_MAGIC = b"BHMV"
MOVIE_VERSION = 1
_HEADER = struct.Struct("<4sIIIIdd")

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))


def _check_finite(arr, what="pixels"):
    if not np.all(np.isfinite(arr)):
        raise DataError(f"non-finite values in {what}")


@dataclass(frozen=True, eq=False)
class Frame:
    pixels: np.ndarray
    pixel_scale_uas: float = DEFAULT_PIXEL_SCALE_UAS

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2:
            raise ArgumentError(f"frame must be 2-D, got shape {px.shape}")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def __eq__(self, other):
        return (
            isinstance(other, Frame)
            and self.pixel_scale_uas == other.pixel_scale_uas
            and np.array_equal(self.pixels, other.pixels)
        )


@dataclass(frozen=True, eq=False)
class NormalizedFrame:
    pixels: np.ndarray
    floor_eps: float = DEFAULT_FLOOR_EPS
    pixel_scale_uas: float = DEFAULT_PIXEL_SCALE_UAS

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(eq=False)
class Movie:
    """Time-ordered stack of frames sharing dims and pixel scale.

    ``data`` has shape ``(n_frames, height, width)``; indexing returns
    :class:`Frame` objects.
    """

    data: np.ndarray
    dt_M: float = DEFAULT_DT_M
    pixel_scale_uas: float = DEFAULT_PIXEL_SCALE_UAS
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3 or data.shape[0] < 1:
            raise ArgumentError(f"movie needs shape (T, H, W) with T >= 1, got {data.shape}")
        if not self.dt_M > 0:
            raise ArgumentError("dt_M must be positive")
        self.data = data

    @classmethod
    def from_frames(cls, frames, dt_M=DEFAULT_DT_M):
        frames = list(frames)
        if not frames:
            raise ArgumentError("movie needs at least one frame")
        scale = frames[0].pixel_scale_uas
        shape = frames[0].pixels.shape
        for f in frames:
            if f.pixels.shape != shape or f.pixel_scale_uas != scale:
                raise ArgumentError("frames must share dims and pixel scale")
        return cls(np.stack([f.pixels for f in frames]), dt_M=dt_M, pixel_scale_uas=scale)

    def __len__(self):
        return self.data.shape[0]

    def __getitem__(self, i):
        if isinstance(i, slice):
            return Movie(self.data[i], self.dt_M, self.pixel_scale_uas, dict(self.meta))
        return Frame(self.data[i], self.pixel_scale_uas)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def reversed(self) -> "Movie":
        return Movie(self.data[::-1].copy(), self.dt_M, self.pixel_scale_uas, dict(self.meta))

    def __eq__(self, other):
        return (
            isinstance(other, Movie)
            and self.dt_M == other.dt_M
            and self.pixel_scale_uas == other.pixel_scale_uas
            and self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
        )


# ---------------------------------------------------------------------------
# BHMV files


def write_movie(movie: Movie, path) -> None:
    data = np.ascontiguousarray(movie.data, dtype="<f4")
    _check_finite(data)
    n, h, w = data.shape
    header = _HEADER.pack(MOVIE_MAGIC, MOVIE_VERSION, n, h, w, float(movie.dt_M), float(movie.pixel_scale_uas))
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(data.tobytes())
    except OSError as exc:
        raise IoError(f"cannot write movie {path}: {exc}") from exc


def read_movie(path) -> Movie:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read movie {path}: {exc}") from exc
    if len(raw) < 4 or raw[:4] != MOVIE_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {MOVIE_MAGIC!r}")
    if len(raw) < _HEADER.size:
        raise TruncationError(f"{path}: header truncated")
    _, version, n, h, w, dt_M, scale = _HEADER.unpack_from(raw)
    if version != MOVIE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    need = _HEADER.size + 4 * n * h * w
    if len(raw) < need:
        raise TruncationError(f"{path}: expected {need} bytes, found {len(raw)}")
    if len(raw) > need:
        raise FormatError(f"{path}: {len(raw) - need} trailing bytes")
    data = np.frombuffer(raw, dtype="<f4", count=n * h * w, offset=_HEADER.size)
    data = data.astype(np.float32).reshape(n, h, w)
    _check_finite(data, f"{path}")
    if n < 1 or not dt_M > 0:
        raise FormatError(f"{path}: invalid header (n_frames={n}, dt_M={dt_M})")
    return Movie(data, dt_M=dt_M, pixel_scale_uas=scale)


# ---------------------------------------------------------------------------
# log normalisation


def normalize(f: Frame, floor_eps: float = DEFAULT_FLOOR_EPS) -> NormalizedFrame:
    if not floor_eps > 0:
        raise ArgumentError("floor_eps must be positive")
    px = np.asarray(f.pixels, dtype=np.float64)
    _check_finite(px)
    return NormalizedFrame(np.log(np.maximum(px, floor_eps)), floor_eps, f.pixel_scale_uas)


def denormalize(nf: NormalizedFrame) -> Frame:
    return Frame(np.exp(np.asarray(nf.pixels, dtype=np.float64)), nf.pixel_scale_uas)


def log_normalize_array(arr, floor_eps=DEFAULT_FLOOR_EPS):
    """Array form of :func:`normalize` for stacks of frames."""
    arr = np.asarray(arr)
    _check_finite(arr)
    return np.log(np.maximum(arr, floor_eps))


# ---------------------------------------------------------------------------
# degradations


def fwhm_to_sigma_px(fwhm_uas: float, pixel_scale_uas: float) -> float:
    return (fwhm_uas / pixel_scale_uas) * FWHM_TO_SIGMA


def gaussian_blur_px(pixels, sigma_px):
    """Separable Gaussian convolution with reflect padding on the last two axes."""
    pixels = np.asarray(pixels, dtype=np.float64)
    sig = [0.0] * (pixels.ndim - 2) + [sigma_px, sigma_px]
    return ndimage.gaussian_filter(pixels, sig, mode="reflect")


def blur_gaussian(f: Frame, fwhm_uas: float) -> Frame:
    if not fwhm_uas > 0:
        raise ArgumentError(f"fwhm must be positive, got {fwhm_uas}")
    sigma = fwhm_to_sigma_px(fwhm_uas, f.pixel_scale_uas)
    return Frame(gaussian_blur_px(f.pixels, sigma), f.pixel_scale_uas)


def blur_movie(movie: Movie, fwhm_uas: float) -> Movie:
    if not fwhm_uas > 0:
        raise ArgumentError(f"fwhm must be positive, got {fwhm_uas}")
    sigma = fwhm_to_sigma_px(fwhm_uas, movie.pixel_scale_uas)
    return Movie(gaussian_blur_px(movie.data, sigma), movie.dt_M, movie.pixel_scale_uas)


@dataclass(frozen=True)
class DegradeSpec:
    kind: str
    rate: float = 0.0
    fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("salt_pepper", "translate_x"):
            raise ArgumentError(f"unknown degradation {self.kind!r}")
        if self.kind == "salt_pepper" and not 0.0 <= self.rate <= 1.0:
            raise ArgumentError(f"salt-and-pepper rate must be in [0, 1], got {self.rate}")

    @classmethod
    def salt_pepper(cls, rate, seed=0):
        return cls("salt_pepper", rate=rate, seed=seed)

    @classmethod
    def translate_x(cls, fraction):
        return cls("translate_x", fraction=fraction)


def degrade(f: Frame, spec: DegradeSpec) -> Frame:
    px = np.array(f.pixels, copy=True)
    h, w = px.shape
    if spec.kind == "salt_pepper":
        n = int(round(spec.rate * h * w))
        if n == 0:
            return Frame(px, f.pixel_scale_uas)
        rng = np.random.default_rng(spec.seed)
        lo, hi = px.min(), px.max()
        idx = rng.choice(h * w, size=n, replace=False)
        salt = rng.random(n) < 0.5
        flat = px.reshape(-1)
        flat[idx] = np.where(salt, hi, lo)
        return Frame(px, f.pixel_scale_uas)
    # positive fraction moves content toward higher column index
    shift = int(round(spec.fraction * w))
    out = np.zeros_like(px)
    if shift >= 0:
        out[:, shift:] = px[:, : w - shift]
    else:
        out[:, :shift] = px[:, -shift:]
    return Frame(out, f.pixel_scale_uas)
