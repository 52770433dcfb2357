"""Forecast evaluation, the forecast-to-classification pipeline and plots."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import plasma, synthgen
from .errors import ArgumentError, DivergenceError
from .tensorio import Movie, blur_gaussian

SWEEP_FWHM_UAS = (20.0, 25.0, 30.0)
METRIC_COLUMNS = ["step", "mse", "psnr", "psd_distance"]

# desk benchmark: one movie per class, the first frames train the forecaster
# and rollouts start from a later frame it never saw
BENCH_TRAIN_FRAMES = 24
BENCH_EVAL_START = 29
BENCH_HORIZON = 100
BENCH_PSD_STEP = 6
BENCH_BLUR_FWHM_UAS = 20.0


def _data(movie):
    return movie.data if isinstance(movie, Movie) else np.asarray(movie, dtype=np.float64)


def per_step_metrics(forecast, truth):
    """Pixel MSE, PSNR (peak = truth maximum) and upper-half log-PSD distance
    for every step. Returns a dict of arrays."""
    f, t = _data(forecast), _data(truth)
    if f.shape != t.shape:
        raise ArgumentError(f"forecast {f.shape} and truth {t.shape} differ in length or size")
    mse = np.mean((f - t) ** 2, axis=(1, 2))
    peak = float(np.max(t))
    with np.errstate(divide="ignore"):
        psnr = np.where(mse > 0, 10.0 * np.log10(peak * peak / np.where(mse > 0, mse, 1.0)), np.inf)
    psd_f, psd_t = psd_curves(f), psd_curves(t)
    dist = np.array([plasma.log_psd_distance(a, b) for a, b in zip(psd_f, psd_t)])
    return {"mse": mse, "psnr": psnr, "psd_distance": dist}


def psd_curves(movie):
    return np.stack([plasma.radial_psd(fr) for fr in _data(movie)])


def feature_mae(predicted, truth):
    """Mean absolute error per feature over rows where both sides are valid."""
    P = np.array([f.as_array() for f in predicted])
    T = np.array([f.as_array() for f in truth])
    ok = np.array([f.flag_array() for f in predicted]) & np.array([f.flag_array() for f in truth])
    out = {}
    for j, name in enumerate(plasma.FEATURE_NAMES):
        m = ok[:, j]
        out[name] = float(np.mean(np.abs(P[m, j] - T[m, j]))) if m.any() else float("nan")
    return out


def write_metrics_csv(path, metrics):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(METRIC_COLUMNS)
        for i in range(len(metrics["mse"])):
            wr.writerow([i + 1] + [repr(float(metrics[k][i])) for k in METRIC_COLUMNS[1:]])


def write_psd_csv(path, psd):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["bin", "power"])
        for k, p in enumerate(psd, start=1):
            wr.writerow([k, repr(float(p))])


# ---------------------------------------------------------------------------
# forecast -> features


def slice_features(movie, r_ring_px, slice_len=plasma.DEFAULT_SLICE, **kw):
    """Features of every complete consecutive ``slice_len``-frame slice."""
    data = _data(movie)
    return [plasma.extract_features(data[s : s + slice_len], r_ring_px, **kw) for s in range(0, data.shape[0] - slice_len + 1, slice_len)]


def forecast_features(model, x0, r_ring_px, n_steps=plasma.DEFAULT_SLICE, blur_fwhm_uas=None, **kw):
    """Roll the forecaster out from ``x0`` (optionally blurred first) and
    extract features from the forecast. A diverging rollout yields an
    all-flagged feature row."""
    from .forecaster import rollout

    if blur_fwhm_uas:
        x0 = blur_gaussian(x0, blur_fwhm_uas)
    try:
        movie = rollout(model, x0, n_steps)
    except DivergenceError:
        return plasma.PlasmaFeatures()
    return plasma.extract_features(movie, r_ring_px, **kw)


def feature_table(features):
    X = np.array([f.as_array() for f in features])
    valid = np.array([f.flag_array() for f in features])
    return X, valid


@dataclass
class SweepRow:
    fwhm_uas: float
    accuracy: float
    n: int
    task_accuracy: dict = field(default_factory=dict)


def robustness_sweep(classify_at, levels=SWEEP_FWHM_UAS):
    """``classify_at(fwhm)`` returns ``{task: (predictions, labels)}``. One
    row per blur level; ``accuracy`` is the mean over tasks."""
    rows = []
    for fwhm in levels:
        per_task = {}
        n = 0
        for task, (pred, labels) in classify_at(fwhm).items():
            pred, labels = np.asarray(pred), np.asarray(labels)
            per_task[task] = float(np.mean(pred == labels)) if labels.size else float("nan")
            n = max(n, int(labels.size))
        acc = float(np.mean(list(per_task.values()))) if per_task else float("nan")
        rows.append(SweepRow(float(fwhm), acc, n, per_task))
    return rows


def write_sweep_csv(path, rows):
    tasks = sorted({t for r in rows for t in r.task_accuracy})
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["fwhm_uas", "accuracy", "n"] + [f"{t}_accuracy" for t in tasks])
        for r in rows:
            wr.writerow([repr(r.fwhm_uas), repr(r.accuracy), r.n] + [repr(r.task_accuracy.get(t, float("nan"))) for t in tasks])


# ---------------------------------------------------------------------------
# desk benchmark


def benchmark_params(seed, n_seeds=1, noise=synthgen.BENCH_NOISE, background=synthgen.BENCH_BACKGROUND):
    base = synthgen.FlowParams(noise_level=noise, background=background)
    grid = synthgen.default_grid(n_seeds, base, first_seed=seed * n_seeds)
    return [replace(p, seed=1000 * seed + i) for i, p in enumerate(grid)]


def benchmark_movies(seed, n_frames=BENCH_EVAL_START + BENCH_HORIZON + 7, **kw):
    """``(movies, labels)`` for the 8-class benchmark of ``seed``."""
    out = [synthgen.generate(p, n_frames) for p in benchmark_params(seed, **kw)]
    return [m for m, _ in out], [lab for _, lab in out]


def benchmark_pairs(movies, n_train=BENCH_TRAIN_FRAMES):
    from .forecaster import concat_pairs, make_pairs

    return concat_pairs([make_pairs(m.data[:n_train]) for m in movies])


@dataclass
class RolloutScore:
    mse: np.ndarray  # per step, empty when the rollout diverged
    diverged_at: int | None
    gate_step: int | None  # first step outside the +-50% flux band
    psd_forecast: float  # step-PSD_STEP forecast from a blurred start vs truth
    psd_blurred: float  # blurred start vs its unblurred truth

    @property
    def stable(self):
        return self.diverged_at is None and self.gate_step is None


def score_rollouts(model, movies, start=BENCH_EVAL_START, n_steps=BENCH_HORIZON, blur_fwhm_uas=BENCH_BLUR_FWHM_UAS, psd_step=BENCH_PSD_STEP):
    from .forecaster import flux_gate, rollout

    scores = []
    for m in movies:
        x0 = m[start]
        try:
            ro = rollout(model, x0, n_steps)
            mse, div, gate = np.mean((ro.data - m.data[start + 1 : start + 1 + n_steps]) ** 2, axis=(1, 2)), None, flux_gate(x0, ro)
        except DivergenceError as exc:
            mse, div, gate = np.zeros(0), exc.step, None
        xb = blur_gaussian(x0, blur_fwhm_uas)
        try:
            fc = rollout(model, xb, psd_step).data[-1]
            d_fc = plasma.log_psd_distance(plasma.radial_psd(fc), plasma.radial_psd(m.data[start + psd_step]))
        except DivergenceError:
            d_fc = math.inf
        d_blur = plasma.log_psd_distance(plasma.radial_psd(xb.pixels), plasma.radial_psd(m.data[start]))
        scores.append(RolloutScore(mse, div, gate, d_fc, d_blur))
    return scores


# ---------------------------------------------------------------------------
# plots


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_psd(curves: dict, path):
    """Log-log PSD line chart, one line per labelled curve."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 4))
    for label, psd in curves.items():
        psd = np.asarray(psd)
        ax.loglog(np.arange(1, psd.size + 1), np.maximum(psd, 1e-300), label=label)
    ax.set_xlabel("radial frequency bin")
    ax.set_ylabel("power")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_error(metrics, path):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 4))
    steps = np.arange(1, len(metrics["mse"]) + 1)
    ax.semilogy(steps, np.maximum(metrics["mse"], 1e-300))
    ax.set_xlabel("forecast step")
    ax.set_ylabel("pixel MSE")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def psnr_from_mse(mse, peak):
    return math.inf if mse == 0 else 10.0 * math.log10(peak * peak / mse)
