"""Gaussian/Laplacian pyramids and the multi-scale training loss.

Resampling is expressed as small dense 1-D operators applied along the two
trailing axes (``A @ x @ B.T``), so every step has an exact adjoint and the
loss gradient is analytic. Arrays may carry any number of leading batch axes.
"""

from __future__ import annotations

import functools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArgumentError
from .tensorio import NormalizedFrame


# ---------------------------------------------------------------------------
# 1-D operators


@functools.lru_cache(maxsize=None)
def _pool_matrix(n: int) -> np.ndarray:
    if n % 2:
        raise ArgumentError(f"cannot pool odd length {n}")
    m = np.zeros((n // 2, n))
    for i in range(n // 2):
        m[i, 2 * i] = m[i, 2 * i + 1] = 0.5
    return m


@functools.lru_cache(maxsize=None)
def _upsample_matrix(n: int) -> np.ndarray:
    """Bilinear x2, half-pixel centres, edge clamp."""
    m = np.zeros((2 * n, n))
    for i in range(2 * n):
        src = (i + 0.5) / 2.0 - 0.5
        src = min(max(src, 0.0), n - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


@functools.lru_cache(maxsize=None)
def _pad_matrix(n: int, n_pad: int) -> np.ndarray:
    """Reflect padding (edge sample not repeated) at the high end of an axis."""
    m = np.zeros((n_pad, n))
    period = max(2 * n - 2, 1)
    for i in range(n_pad):
        j = i % period
        if j >= n:
            j = period - j
        m[i, j] = 1.0
    return m


def _apply(a, x, b):
    return np.matmul(np.matmul(a.astype(x.dtype, copy=False), x), b.T.astype(x.dtype, copy=False))


def downscale(img):
    img = np.asarray(img)
    h, w = img.shape[-2:]
    if h % 2 or w % 2:
        raise ArgumentError(f"downscale needs even dims, got {h}x{w}")
    return _apply(_pool_matrix(h), img, _pool_matrix(w))


def upscale(img):
    img = np.asarray(img)
    h, w = img.shape[-2:]
    return _apply(_upsample_matrix(h), img, _upsample_matrix(w))


def _downscale_adjoint(g):
    h, w = g.shape[-2:]
    return _apply(_pool_matrix(2 * h).T, g, _pool_matrix(2 * w).T)


def _upscale_adjoint(g):
    h, w = g.shape[-2:]
    return _apply(_upsample_matrix(h // 2).T, g, _upsample_matrix(w // 2).T)


def padded_size(n: int, max_level: int) -> int:
    q = 2 ** (max_level + 1)
    return -(-n // q) * q


def reflect_pad(img, shape):
    img = np.asarray(img)
    h, w = img.shape[-2:]
    hp, wp = shape
    if (hp, wp) == (h, w):
        return img
    if hp < h or wp < w:
        raise ArgumentError("pad target smaller than input")
    return _apply(_pad_matrix(h, hp), img, _pad_matrix(w, wp))


def _reflect_pad_adjoint(g, shape):
    h, w = shape
    hp, wp = g.shape[-2:]
    if (hp, wp) == (h, w):
        return g
    return _apply(_pad_matrix(h, hp).T, g, _pad_matrix(w, wp).T)


def mean_flux(f) -> float:
    px = f.pixels if hasattr(f, "pixels") else f
    return float(np.mean(np.asarray(px, dtype=np.float64)))


# ---------------------------------------------------------------------------
# pyramid


@dataclass
class PyramidStack:
    gaussians: list
    laplacians: dict
    mean_flux: float
    shape: tuple  # unpadded (H, W)


def build_pyramid(f, levels=(0, 1, 2), pad_to=None) -> PyramidStack:
    px = np.asarray(f.pixels if hasattr(f, "pixels") else f, dtype=np.float64)
    levels = sorted(set(int(k) for k in levels))
    if not levels or levels[0] < 0:
        raise ArgumentError(f"invalid level set {levels}")
    kmax = levels[-1]
    h, w = px.shape[-2:]
    q = 2 ** (kmax + 1)
    if pad_to is None:
        pad_to = (padded_size(h, kmax), padded_size(w, kmax))
    if pad_to[0] % q or pad_to[1] % q:
        raise ArgumentError(f"padded dims {pad_to} not divisible by {q}")
    g = [reflect_pad(px, pad_to)]
    for _ in range(kmax + 1):
        g.append(downscale(g[-1]))
    laps = {k: g[k] - upscale(g[k + 1]) for k in levels}
    return PyramidStack(g, laps, float(np.mean(px)), (h, w))


# ---------------------------------------------------------------------------
# loss


@dataclass
class LossSpec:
    levels: tuple = (0, 1, 2)
    level_weights: tuple = (1.0, 0.5, 0.25)
    flux_weight: float = 0.125
    mode: str = "pyramid"  # "pyramid" or "l2" (plain pixel MSE, for ablations)

    def __post_init__(self):
        self.levels = tuple(int(k) for k in self.levels)
        self.level_weights = tuple(float(x) for x in self.level_weights)
        self.flux_weight = float(self.flux_weight)
        if self.mode not in ("pyramid", "l2"):
            raise ArgumentError(f"unknown loss mode {self.mode!r}")
        if len(self.levels) != len(self.level_weights):
            raise ArgumentError("levels and level_weights differ in length")
        if list(self.levels) != sorted(set(self.levels)):
            raise ArgumentError("levels must be strictly ascending")
        if any(x <= 0 for x in self.level_weights) or self.flux_weight < 0:
            raise ArgumentError("level weights must be > 0 and flux weight >= 0")

    @classmethod
    def l2_only(cls):
        return cls(levels=(0,), level_weights=(1.0,), flux_weight=0.0, mode="l2")

    @classmethod
    def no_flux(cls):
        return cls(flux_weight=0.0)

    def to_dict(self):
        return {
            "levels": list(self.levels),
            "weights": list(self.level_weights),
            "flux_weight": self.flux_weight,
            "mode": self.mode,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            levels=tuple(d.get("levels", (0, 1, 2))),
            level_weights=tuple(d.get("weights", (1.0, 0.5, 0.25))),
            flux_weight=d.get("flux_weight", 0.125),
            mode=d.get("mode", "pyramid"),
        )

    def save(self, path):
        """Plain ``key = value`` lines; lists are comma separated."""
        d = self.to_dict()
        lines = [
            f"levels = {', '.join(str(k) for k in d['levels'])}",
            f"weights = {', '.join(repr(x) for x in d['weights'])}",
            f"flux_weight = {d['flux_weight']!r}",
            f"mode = {d['mode']}",
        ]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path):
        text = Path(path).read_text()
        if text.lstrip().startswith("{"):
            return cls.from_dict(json.loads(text))
        d = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key == "levels":
                d[key] = [int(v) for v in val.split(",") if v.strip()]
            elif key == "weights":
                d[key] = [float(v) for v in val.split(",") if v.strip()]
            elif key == "flux_weight":
                d[key] = float(val)
            elif key == "mode":
                d[key] = val
            else:
                raise ArgumentError(f"unknown loss config key {key!r}")
        return cls.from_dict(d)


def _l1l2(x):
    """0.5 * mean|x| + 0.5 * mean(x^2) over the trailing two axes, and its derivative."""
    n = x.shape[-1] * x.shape[-2]
    val = 0.5 * np.abs(x).sum(axis=(-2, -1)) / n + 0.5 * (x * x).sum(axis=(-2, -1)) / n
    grad = (0.5 * np.sign(x) + x) / n
    return val, grad


def loss_terms(pred, target, spec: LossSpec = None, with_grad=True):
    """Per-sample loss, per-term breakdown and gradient w.r.t. ``pred``.

    ``pred`` and ``target`` share shape ``(..., H, W)``; the returned loss has
    the leading shape. ``terms`` maps ``"lap0"``, ``"lap1"``, ... and ``"flux"``
    to unweighted per-sample values.
    """
    spec = spec or LossSpec()
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ArgumentError(f"shape mismatch {pred.shape} vs {target.shape}")
    d = pred - target
    h, w = d.shape[-2:]

    if spec.mode == "l2":
        n = h * w
        val = (d * d).sum(axis=(-2, -1)) / n
        return val, {"l2": val}, (2.0 * d / n if with_grad else None)

    kmax = spec.levels[-1]
    hp, wp = padded_size(h, kmax), padded_size(w, kmax)
    gauss = [reflect_pad(d, (hp, wp))]
    for _ in range(kmax + 1):
        gauss.append(downscale(gauss[-1]))

    total = np.zeros(d.shape[:-2], dtype=d.dtype)
    terms = {}
    grad_g = [np.zeros_like(g) for g in gauss] if with_grad else None
    for k, wk in zip(spec.levels, spec.level_weights):
        band = gauss[k] - upscale(gauss[k + 1])
        # bands are cropped back to the region covered by real pixels
        ch, cw = -(-h // 2**k), -(-w // 2**k)
        val, g = _l1l2(band[..., :ch, :cw])
        terms[f"lap{k}"] = val
        total = total + wk * val
        if with_grad:
            gb = np.zeros_like(band)
            gb[..., :ch, :cw] = wk * g
            grad_g[k] += gb
            grad_g[k + 1] -= _upscale_adjoint(gb)

    dflux = d.mean(axis=(-2, -1))
    fval = 0.5 * np.abs(dflux) + 0.5 * dflux * dflux
    terms["flux"] = fval
    total = total + spec.flux_weight * fval

    if not with_grad:
        return total, terms, None
    for k in range(kmax + 1, 0, -1):
        grad_g[k - 1] += _downscale_adjoint(grad_g[k])
    grad = _reflect_pad_adjoint(grad_g[0], (h, w))
    fgrad = spec.flux_weight * (0.5 * np.sign(dflux) + dflux) / (h * w)
    grad = grad + fgrad[..., None, None]
    return total, terms, grad


def multiscale_loss(pred, target, spec: LossSpec = None):
    """Scalar loss between two normalized frames and its gradient w.r.t. ``pred``.

    Batched arrays are averaged over the leading axes (gradient scaled to
    match).
    """
    p = pred.pixels if isinstance(pred, NormalizedFrame) else np.asarray(pred)
    t = target.pixels if isinstance(target, NormalizedFrame) else np.asarray(target)
    if p.shape != t.shape:
        raise ArgumentError(f"shape mismatch {p.shape} vs {t.shape}")
    total, _, grad = loss_terms(p, t, spec)
    n = total.size
    return float(np.sum(total) / n), grad / n
