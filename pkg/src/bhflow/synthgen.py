"""Synthetic accretion-ring movies with analytically known plasma features.

The intensity at polar position (r, theta) and frame t is

    S * (env(r) * [C (1 + a cos(theta - theta_b)) + B cos(m psi)]_+ + bg) * noise

with ``env(r) = exp(-(r - R)^2 / 2 w^2)``, ``m = 2`` spiral arms and spiral phase

    psi = theta - Omega(r) (t - t_ref) - h tan(pitch) ln(r / R) - phi0,
    Omega(r) = omega_p (r / R)^s,   h = sign(omega_p) (+1 when static).

Tying the arm handedness ``h`` to the rotation direction makes every spiral
trailing, so a single frame carries the rotation sense. ``t_ref`` is the
centre of the movie, where differential rotation has not yet wound the arms.

Class labels for the inference benchmark are assigned from parameter bands;
see :func:`params_for_class`. The banding is a stand-in for the physical
spin/inclination mapping, not a model of it.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .errors import ArgumentError, IoError
from .tensorio import Movie, write_movie

N_ARMS = 2

SPIN_CLASSES = ("retrograde", "prograde")
INCLINATION_CLASSES = ("negative_face_on", "negative_edge_on", "positive_edge_on", "positive_face_on")

# Desk benchmark geometry: the ring radius stands for the ~26 uas Sgr A* shadow
# radius, so one 64 px frame pixel covers 26/16 uas.
BENCH_SIZE = 64
BENCH_RING_RADIUS = 16.0
BENCH_RING_WIDTH = 4.0
BENCH_PIXEL_SCALE_UAS = 26.0 / 16.0
BENCH_BACKGROUND = 0.02
BENCH_NOISE = 0.1

MANIFEST_COLUMNS = ["path", "omega_p", "pitch_angle", "asym", "slope", "spin_class", "incl_class", "split"]


@dataclass(frozen=True)
class FlowParams:
    ring_radius_px: float = BENCH_RING_RADIUS
    ring_width_px: float = BENCH_RING_WIDTH
    omega_p: float = 0.07
    pitch_angle: float = 0.5
    asymmetry_ratio: float = 0.2
    rotation_slope: float = 0.0
    noise_level: float = 0.0
    seed: int = 0
    bright_angle: float = 0.0
    spiral_phase: float = 0.0
    spiral_amp: float = 0.6  # fraction of C (1 - a); < 1 keeps the bracket positive
    background: float = 1e-3
    scale: float = 0.05
    pixel_scale_uas: float = BENCH_PIXEL_SCALE_UAS
    dt_M: float = 5.0

    def validate(self):
        if not self.ring_radius_px > 2 * self.ring_width_px:
            raise ArgumentError("ring_radius_px must exceed 2 * ring_width_px")
        if not 0.0 <= self.asymmetry_ratio < 1.0:
            raise ArgumentError("asymmetry_ratio must lie in [0, 1)")
        if not 0.0 < self.pitch_angle < math.pi / 2:
            raise ArgumentError("pitch_angle must lie in (0, pi/2)")
        if self.noise_level < 0 or self.background < 0 or self.scale <= 0:
            raise ArgumentError("noise_level/background must be >= 0 and scale > 0")
        if not 0.0 <= self.spiral_amp < 1.0:
            raise ArgumentError("spiral_amp must lie in [0, 1)")


@dataclass(frozen=True)
class TrueFeatures:
    """Feature values an ideal extractor should report for a noiseless movie."""

    pattern_speed: float
    pitch_angle: float
    asymmetry: float
    rotation_slope: float


@dataclass(frozen=True)
class GroundTruthLabels:
    spin_class: str
    inclination_class: str
    true_features: TrueFeatures


def handedness(omega_p: float) -> float:
    return -1.0 if omega_p < 0 else 1.0


def true_features(p: FlowParams) -> TrueFeatures:
    h = handedness(p.omega_p)
    return TrueFeatures(
        pattern_speed=p.omega_p,
        pitch_angle=h * p.pitch_angle,
        # the flat background dilutes the ring's first harmonic at r = R
        asymmetry=p.asymmetry_ratio / (1.0 + p.background),
        rotation_slope=p.rotation_slope,
    )


def classify(p: FlowParams) -> tuple:
    """Labelling rule: spin from the rotation-curve slope band, inclination from
    rotation sense and the face-on/edge-on asymmetry band."""
    spin = "prograde" if p.rotation_slope < 0 else "retrograde"
    side = "positive" if p.omega_p >= 0 else "negative"
    view = "face_on" if p.asymmetry_ratio < 0.2 else "edge_on"
    return spin, f"{side}_{view}"


def params_for_class(spin: str, incl: str, seed: int, base: FlowParams = None) -> FlowParams:
    """Draw FlowParams inside the parameter bands of one (spin, inclination) class."""
    if spin not in SPIN_CLASSES or incl not in INCLINATION_CLASSES:
        raise ArgumentError(f"unknown class ({spin}, {incl})")
    base = base or FlowParams()
    rng = np.random.default_rng([int(seed), SPIN_CLASSES.index(spin), INCLINATION_CLASSES.index(incl)])
    sign = 1.0 if incl.startswith("positive") else -1.0
    face_on = incl.endswith("face_on")
    speed = rng.uniform(0.07, 0.085) if face_on else rng.uniform(0.055, 0.065)
    asym = rng.uniform(0.04, 0.14) if face_on else rng.uniform(0.26, 0.38)
    if spin == "prograde":
        slope, pitch = rng.uniform(-1.0, -0.6), rng.uniform(0.75, 1.05)
    else:
        slope, pitch = rng.uniform(0.15, 0.35), rng.uniform(0.3, 0.5)
    return replace(
        base,
        omega_p=sign * speed,
        asymmetry_ratio=asym,
        rotation_slope=slope,
        pitch_angle=pitch,
        # brighter side sits on the approaching half of the ring
        bright_angle=sign * math.pi / 2 + rng.uniform(-0.35, 0.35),
        spiral_phase=rng.uniform(0, 2 * math.pi),
        seed=int(seed),
    )


def _polar_grid(h, w):
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    return np.hypot(dy, dx), np.arctan2(dy, dx)


def generate(params: FlowParams, n_frames: int, H: int = BENCH_SIZE, W: int = BENCH_SIZE, t0: int = 0):
    """Render a movie and its labels.

    Frame ``i`` is rendered at time ``t0 + i``; the winding reference time is
    the centre of the rendered span. Angles follow ``atan2(row, col)`` about
    the frame centre.
    """
    params.validate()
    if H < 64 or W < 64:
        raise ArgumentError("frames must be at least 64x64")
    if n_frames < 2:
        raise ArgumentError("need at least 2 frames")
    r, theta = _polar_grid(H, W)
    R, wid = params.ring_radius_px, params.ring_width_px
    env = np.exp(-((r - R) ** 2) / (2.0 * wid**2))
    a = params.asymmetry_ratio
    static = 1.0 + a * np.cos(theta - params.bright_angle)
    amp = params.spiral_amp * (1.0 - a)
    with np.errstate(divide="ignore"):
        log_r = np.log(np.maximum(r, 1e-3) / R)
    h = handedness(params.omega_p)
    omega_r = params.omega_p * np.power(np.maximum(r, 1e-3) / R, params.rotation_slope)
    winding = h * math.tan(params.pitch_angle) * log_r + params.spiral_phase
    t_ref = (n_frames - 1) / 2.0

    rng = np.random.default_rng(params.seed)
    out = np.empty((n_frames, H, W), dtype=np.float64)
    for i in range(n_frames):
        t = t0 + i - t_ref
        psi = theta - omega_r * t - winding
        bracket = np.maximum(static + amp * np.cos(N_ARMS * psi), 0.0)
        frame = params.scale * (env * bracket + params.background)
        if params.noise_level > 0:
            s = params.noise_level
            frame = frame * np.exp(s * rng.standard_normal((H, W)) - 0.5 * s * s)
        out[i] = frame
    movie = Movie(out, dt_M=params.dt_M, pixel_scale_uas=params.pixel_scale_uas)
    spin, incl = classify(params)
    return movie, GroundTruthLabels(spin, incl, true_features(params))


# ---------------------------------------------------------------------------
# datasets


@dataclass
class DatasetEntry:
    path: str
    params: FlowParams
    spin_class: str
    incl_class: str
    split: str  # "train:0-799,val:800-899,test:900-999" style frame ranges


def split_ranges(n_frames: int, fractions) -> dict:
    """Contiguous per-movie frame partitions, e.g. 1000 frames at (0.8, 0.1, 0.1)
    give train 0-799, val 800-899, test 900-999."""
    fr = [float(x) for x in fractions]
    if len(fr) != 3 or any(x < 0 for x in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise ArgumentError(f"split fractions must be 3 non-negative values summing to 1, got {fractions}")
    n_train = int(round(fr[0] * n_frames))
    n_val = int(round(fr[1] * n_frames))
    n_val = min(n_val, n_frames - n_train)
    bounds = {"train": (0, n_train), "val": (n_train, n_train + n_val), "test": (n_train + n_val, n_frames)}
    return {k: v for k, v in bounds.items() if v[1] > v[0]}


def _format_split(ranges):
    return ";".join(f"{k}:{a}-{b - 1}" for k, (a, b) in ranges.items())


def parse_split(text: str) -> dict:
    out = {}
    for part in filter(None, text.split(";")):
        name, _, rng = part.partition(":")
        a, _, b = rng.partition("-")
        out[name] = (int(a), int(b) + 1)
    return out


def default_grid(n_seeds=4, base: FlowParams = None, first_seed=0):
    """2 spins x 4 inclinations x n_seeds parameter sets."""
    grid = []
    for seed in range(first_seed, first_seed + n_seeds):
        for spin in SPIN_CLASSES:
            for incl in INCLINATION_CLASSES:
                grid.append(params_for_class(spin, incl, seed, base))
    return grid


def make_dataset(grid, split=(0.8, 0.1, 0.1), seed=0, out_dir=".", n_frames=1000, size=BENCH_SIZE):
    """Render every parameter set in ``grid`` and write a CSV manifest.

    Each movie gets an independent derived seed ``seed ^ i``. Splits partition
    the frames of every movie into contiguous train/val/test blocks, so the
    three sets never share a frame.
    Returns the manifest path.
    """
    out_dir = Path(out_dir)
    ranges = split_ranges(n_frames, split)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {out_dir}: {exc}") from exc
    rows = []
    for i, p in enumerate(grid):
        p = replace(p, seed=int(seed) ^ i)
        movie, labels = generate(p, n_frames, size, size)
        name = f"movie_{i:03d}.bhmv"
        write_movie(movie, out_dir / name)
        rows.append(
            {
                "path": name,
                "omega_p": repr(p.omega_p),
                "pitch_angle": repr(p.pitch_angle),
                "asym": repr(p.asymmetry_ratio),
                "slope": repr(p.rotation_slope),
                "spin_class": labels.spin_class,
                "incl_class": labels.inclination_class,
                "split": _format_split(ranges),
                "params": p,
            }
        )
    manifest = out_dir / "manifest.csv"
    try:
        with open(manifest, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS, extrasaction="ignore")
            wr.writeheader()
            wr.writerows(rows)
        with open(out_dir / "params.csv", "w", newline="") as fh:
            names = [f.name for f in fields(FlowParams)]
            wr = csv.writer(fh)
            wr.writerow(["path"] + names)
            for row in rows:
                d = asdict(row["params"])
                wr.writerow([row["path"]] + [repr(d[n]) for n in names])
    except OSError as exc:
        raise IoError(f"cannot write manifest in {out_dir}: {exc}") from exc
    return manifest


def read_manifest(path):
    """Manifest rows as dicts with the ``split`` column parsed into frame ranges
    and ``path`` resolved against the manifest directory."""
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise IoError(f"cannot read manifest {path}: {exc}") from exc
    params = {}
    ppath = path.parent / "params.csv"
    if ppath.exists():
        types = {f.name: f.type for f in fields(FlowParams)}
        with open(ppath, newline="") as fh:
            for prow in csv.DictReader(fh):
                kw = {k: (int(v) if k == "seed" else float(v)) for k, v in prow.items() if k in types}
                params[prow["path"]] = FlowParams(**kw)
    for row in rows:
        row["ranges"] = parse_split(row["split"])
        row["file"] = path.parent / row["path"]
        row["params"] = params.get(row["path"])
        for k in ("omega_p", "pitch_angle", "asym", "slope"):
            row[k] = float(row[k])
    return rows
