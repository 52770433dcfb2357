"""Training loop, autoregressive rollout and checkpoint conversion."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ArgumentError, DataError, DivergenceError
from ..pyramid import LossSpec, loss_terms
from ..synthgen import read_manifest
from ..tensorio import DEFAULT_FLOOR_EPS, Frame, Movie, log_normalize_array, read_movie
from .checkpoint import ModelCheckpoint
from .optim import AdamW, cosine_lr
from .unet import NetConfig, UNet

DEFAULT_ROLLOUT_STEPS = 60
LOG_COLUMNS = ["epoch", "train_loss", "val_loss", "lr"]


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 100
    loss: LossSpec = field(default_factory=LossSpec)
    seed: int = 0
    pair_stride: int = 1

    def __post_init__(self):
        if not self.lr >= 0 or self.epochs < 1 or self.batch_size < 1 or self.pair_stride < 1:
            raise ArgumentError("need lr >= 0, epochs >= 1, batch_size >= 1, pair_stride >= 1")

    def to_dict(self):
        d = asdict(self)
        d["loss"] = self.loss.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["loss"] = LossSpec.from_dict(d.get("loss", {}))
        return cls(**d)


@dataclass
class PairSet:
    """Log-space input/target frames, shape ``(n, H, W)`` each."""

    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return self.x.shape[0]


def make_pairs(frames, stride=1, floor_eps=DEFAULT_FLOOR_EPS) -> PairSet:
    """``(x_t, x_{t+stride})`` pairs from one contiguous block of linear frames."""
    logf = log_normalize_array(np.asarray(frames, dtype=np.float64), floor_eps).astype(np.float32)
    if logf.shape[0] <= stride:
        empty = np.zeros((0,) + logf.shape[1:], np.float32)
        return PairSet(empty, empty.copy())
    return PairSet(logf[:-stride], logf[stride:])


def concat_pairs(sets):
    sets = [s for s in sets if len(s)]
    if not sets:
        return None
    return PairSet(np.concatenate([s.x for s in sets]), np.concatenate([s.y for s in sets]))


def load_pairs(manifest_path, split="train", stride=1):
    """Consecutive-frame pairs from every movie's ``split`` frame range."""
    sets = []
    for row in read_manifest(manifest_path):
        if split not in row["ranges"]:
            continue
        a, b = row["ranges"][split]
        movie = read_movie(row["file"])
        sets.append(make_pairs(movie.data[a:b], stride))
    return concat_pairs(sets)


def _evaluate(model, pairs, spec, batch_size):
    model.eval()
    total, n = 0.0, 0
    for i in range(0, len(pairs), batch_size):
        pred = model.forward(pairs.x[i : i + batch_size])
        vals, _, _ = loss_terms(pred, pairs.y[i : i + batch_size], spec, with_grad=False)
        total += float(np.sum(vals, dtype=np.float64))
        n += vals.size
    return total / max(n, 1)


def fit(train_pairs: PairSet, net: NetConfig = NetConfig(), cfg: TrainConfig = TrainConfig(), val_pairs=None, log_path=None, model=None):
    """Train a model on prepared pairs. Returns ``(model, optimizer, history)``.

    ``history`` rows are ``(epoch, train_loss, val_loss, lr)``.
    """
    if train_pairs is None or len(train_pairs) == 0:
        raise DataError("training split has no consecutive frame pairs")
    if model is None:
        model = UNet(net, seed=cfg.seed)
        # start the output at the mean log level; batch norm strips absolute
        # levels, so the head bias would otherwise have to walk there slowly
        model.params["head.bias"][:] = np.mean(train_pairs.y, dtype=np.float64)
    opt = AdamW(model.params, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    n = len(train_pairs)
    history = []
    log = None
    if log_path is not None:
        log = open(log_path, "w", newline="")
        csv.writer(log).writerow(LOG_COLUMNS)
    try:
        for epoch in range(cfg.epochs):
            lr = cosine_lr(cfg.lr, epoch, cfg.epochs)
            model.train()
            order = rng.permutation(n)
            total, seen = 0.0, 0
            for i in range(0, n, cfg.batch_size):
                idx = order[i : i + cfg.batch_size]
                if len(idx) < 2 and n >= 2:
                    continue  # batch statistics need at least two samples
                loss, grads = model.loss_and_grad(train_pairs.x[idx], train_pairs.y[idx], cfg.loss)
                if not math.isfinite(loss):
                    raise DivergenceError(opt.step_count + 1, f"non-finite training loss at epoch {epoch}")
                opt.step(model.params, grads, lr)
                total += loss * len(idx)
                seen += len(idx)
            train_loss = total / max(seen, 1)
            val_loss = _evaluate(model, val_pairs, cfg.loss, cfg.batch_size) if val_pairs is not None and len(val_pairs) else float("nan")
            history.append((epoch, train_loss, val_loss, lr))
            if log is not None:
                csv.writer(log).writerow([epoch, repr(train_loss), repr(val_loss), repr(lr)])
                log.flush()
    finally:
        if log is not None:
            log.close()
    _check_trend([h[1] for h in history])
    model.eval()
    return model, opt, history


def _check_trend(losses, window=10):
    if len(losses) < 2 * window:
        return
    avg = np.convolve(losses, np.ones(window) / window, mode="valid")
    if np.any(np.diff(avg) > 1e-12 * np.abs(avg[:-1]) + 1e-12):
        warnings.warn("training loss moving average increased during training", RuntimeWarning, stacklevel=3)


def train(manifest_path, net: NetConfig = NetConfig(), cfg: TrainConfig = TrainConfig(), log_path=None) -> ModelCheckpoint:
    train_pairs = load_pairs(manifest_path, "train", cfg.pair_stride)
    if train_pairs is None:
        raise DataError(f"{manifest_path}: no train split with a consecutive frame pair")
    val_pairs = load_pairs(manifest_path, "val", cfg.pair_stride)
    model, opt, history = fit(train_pairs, net, cfg, val_pairs, log_path)
    return to_checkpoint(model, opt, cfg, epoch=len(history))


# ---------------------------------------------------------------------------
# checkpoints


def to_checkpoint(model: UNet, opt: AdamW = None, cfg: TrainConfig = None, epoch: int = 0) -> ModelCheckpoint:
    tensors = dict(model.state_dict())
    step = 0
    if opt is not None:
        step = opt.step_count
        tensors.update({f"adam.m.{k}": v for k, v in opt.m.items()})
        tensors.update({f"adam.v.{k}": v for k, v in opt.v.items()})
    config = {
        "net": model.config.to_dict(),
        "train": (cfg or TrainConfig()).to_dict(),
        "step": step,
        "epoch": epoch,
    }
    return ModelCheckpoint(config, {k: np.asarray(v, np.float32) for k, v in tensors.items()})


def from_checkpoint(ckpt: ModelCheckpoint):
    """Rebuild ``(model, optimizer, train_config)`` from a checkpoint."""
    net = NetConfig(**ckpt.config["net"])
    cfg = TrainConfig.from_dict(ckpt.config["train"])
    model = UNet(net, dtype=np.float32)
    opt = AdamW(model.params, cfg.weight_decay)
    opt.step_count = int(ckpt.config.get("step", 0))
    for name, arr in ckpt.tensors.items():
        kind, _, key = name.partition(".")
        if kind == "param":
            model.params[key] = arr.copy()
        elif kind == "buffer":
            model.buffers[key] = arr.copy()
        elif name.startswith("adam.m."):
            opt.m[name[7:]] = arr.copy()
        elif name.startswith("adam.v."):
            opt.v[name[7:]] = arr.copy()
    model.eval()
    return model, opt, cfg


# ---------------------------------------------------------------------------
# rollout


def rollout(model: UNet, x0: Frame, n_steps: int = DEFAULT_ROLLOUT_STEPS, floor_eps=DEFAULT_FLOOR_EPS, dt_M=5.0) -> Movie:
    """Feed the model its own log-space output ``n_steps`` times.

    Raises :class:`DivergenceError` with the 1-based step index when a
    forecast (or its linear-space value) stops being finite.
    """
    if n_steps < 1:
        raise ArgumentError("n_steps must be >= 1")
    model.eval()
    px = x0.pixels if isinstance(x0, Frame) else np.asarray(x0)
    scale = x0.pixel_scale_uas if isinstance(x0, Frame) else 0.5
    x = log_normalize_array(np.asarray(px, np.float64), floor_eps).astype(model.dtype)
    out = np.empty((n_steps,) + x.shape, dtype=np.float64)
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(n_steps):
            x = model.forward(x)
            lin = np.exp(x.astype(np.float64))
            if not (np.all(np.isfinite(x)) and np.all(np.isfinite(lin))):
                raise DivergenceError(step + 1, f"rollout diverged at step {step + 1}")
            out[step] = lin
    return Movie(out, dt_M=dt_M, pixel_scale_uas=scale)


def flux_gate(x0, movie: Movie, tol: float = 0.5):
    """First 1-based step whose mean flux leaves ``(1 +- tol)`` times the input's,
    or None when every step stays inside."""
    px = x0.pixels if isinstance(x0, Frame) else np.asarray(x0)
    ref = float(np.mean(px, dtype=np.float64))
    flux = movie.data.mean(axis=(1, 2), dtype=np.float64)
    bad = np.flatnonzero(np.abs(flux - ref) > tol * abs(ref))
    return int(bad[0]) + 1 if bad.size else None
