"""Command line front end: ``bhflow <subcommand> ...``.

Every subcommand writes ``run.json`` next to its main output with the
resolved arguments and SHA-256 hashes of the files it produced.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import baseline, boost, evaluate, plasma, synthgen
from .errors import EXIT_CODES, ArgumentError, BHFlowError, DataError, IoError
from .pyramid import LossSpec
from .tensorio import Frame, Movie, blur_gaussian, blur_movie, read_movie, write_movie

TASKS = {"spin": ("spin_class", synthgen.SPIN_CLASSES), "incl": ("incl_class", synthgen.INCLINATION_CLASSES)}


# ---------------------------------------------------------------------------
# helpers


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _rel(path, root):
    path, root = Path(path).resolve(), Path(root).resolve()
    return str(path.relative_to(root)) if path.is_relative_to(root) else str(path)


def write_run_json(out_dir, args, outputs):
    out_dir = Path(out_dir)
    record = {
        "subcommand": args.command,
        "args": {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")},
        "artifacts": {_rel(p, out_dir): _sha256(p) for p in outputs},
    }
    path = out_dir / "run.json"
    path.write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _parent(path):
    p = Path(path).parent
    p.mkdir(parents=True, exist_ok=True)
    return p


def _frame(movie, index):
    if not -movie.n_frames <= index < movie.n_frames:
        raise ArgumentError(f"frame {index} outside a {movie.n_frames}-frame movie")
    return movie[index]


def _loss_spec(args):
    if args.loss_config:
        return LossSpec.load(args.loss_config)
    return {"full": LossSpec, "l2": LossSpec.l2_only, "noflux": LossSpec.no_flux}[args.loss]()


def _labels_by_movie(manifest):
    return {row["path"]: row for row in synthgen.read_manifest(manifest)}


def _movie_key(name):
    return name.split(":", 1)[0]


def _limit_threads(n):
    if n is None:
        env = os.environ.get("BHC_THREADS")
        n = int(env) if env else None
    if n is None:
        return None
    if n < 1:
        raise ArgumentError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args):
    n_seeds = max(1, math.ceil(args.movies / 8))
    base = synthgen.FlowParams(noise_level=args.noise, background=args.background)
    grid = synthgen.default_grid(n_seeds, base, first_seed=args.seed * n_seeds)[: args.movies]
    split = tuple(float(x) for x in args.split.split(","))
    manifest = synthgen.make_dataset(grid, split, args.seed, args.out, args.frames, args.size)
    print(manifest)
    out = Path(args.out)
    return out, [manifest, out / "params.csv"] + [out / r["path"] for r in synthgen.read_manifest(manifest)]


def cmd_train(args):
    if args.kind == "forecaster":
        return _train_forecaster(args)
    return _train_boost(args)


def _train_forecaster(args):
    from .forecaster import NetConfig, TrainConfig, save_checkpoint, train

    if not args.manifest:
        raise ArgumentError("train --kind forecaster needs --manifest")
    net = NetConfig(args.depth, args.channels)
    cfg = TrainConfig(args.batch_size, args.lr, args.weight_decay, args.epochs, _loss_spec(args), args.seed, args.pair_stride)
    out_dir = _parent(args.out)
    log = Path(args.log) if args.log else out_dir / "train_log.csv"
    ckpt = train(args.manifest, net, cfg, log_path=log)
    save_checkpoint(ckpt, args.out)
    print(args.out)
    return out_dir, [args.out, log]


def _feature_rows(path):
    names, feats = plasma.read_features_csv(path)
    if not names:
        raise DataError(f"{path}: no feature rows")
    X, valid = evaluate.feature_table(feats)
    return names, X, valid


def _train_boost(args):
    if not (args.features and args.manifest):
        raise ArgumentError("train --kind boost needs --features and --manifest")
    names, X, valid = _feature_rows(args.features)
    labels = _labels_by_movie(args.manifest)
    cfg = boost.BoostConfig(n_rounds=args.rounds, max_depth=args.max_depth, learning_rate=args.boost_lr, seed=args.seed)
    ensembles = []
    for task, (column, classes) in TASKS.items():
        y = np.array([classes.index(labels[_movie_key(n)][column]) for n in names])
        if args.bootstrap > 1:
            ens = boost.bootstrap_ensemble(X, valid, y, list(classes), cfg, args.bootstrap, args.frac, task)
        else:
            ens = boost.train_ensemble(X, valid, y, list(classes), cfg, task=task)
        ensembles.append(ens)
    out_dir = _parent(args.out)
    boost.save_ensembles(ensembles, args.out)
    print(args.out)
    return out_dir, [args.out]


def cmd_rollout(args):
    from .forecaster import from_checkpoint, load_checkpoint, rollout

    model, _, _ = from_checkpoint(load_checkpoint(args.checkpoint))
    x0 = _frame(read_movie(args.movie), args.frame)
    if args.blur_fwhm_uas:
        x0 = blur_gaussian(x0, args.blur_fwhm_uas)
    movie = rollout(model, x0, args.steps)
    out_dir = _parent(args.out)
    write_movie(movie, args.out)
    print(args.out)
    return out_dir, [args.out]


def _feature_jobs(args):
    """``(row name, frames)`` for every slice to featurise."""
    if args.manifest:
        for row in synthgen.read_manifest(args.manifest):
            if args.split not in row["ranges"]:
                continue
            a, b = row["ranges"][args.split]
            data = read_movie(row["file"]).data[a:b]
            for s in range(0, data.shape[0] - args.slice + 1, args.slice):
                yield f"{row['path']}:{a + s}", data[s : s + args.slice]
    for path in args.movie or []:
        yield Path(path).name, read_movie(path).data


def cmd_features(args):
    rows = []
    for name, frames in _feature_jobs(args):
        f = plasma.extract_features(frames, args.ring_radius_px, args.n_theta, args.delta_r_frac)
        rows.append((name, f))
    if not rows:
        raise DataError("no movie slices to extract features from")
    _parent(args.out)
    plasma.write_features_csv(args.out, rows)
    print(args.out)
    return Path(args.out).parent, [args.out]


def infer_records(ensembles, names, X, valid, labels=None):
    """JSON-serialisable prediction rows followed by one report per task."""
    records = []
    preds = {}
    for ens in ensembles:
        members = ens.member_proba(X, valid)
        mean = members.mean(axis=0)
        preds[ens.task] = np.argmax(mean, axis=1)
        y = None
        if labels is not None:
            column = TASKS[ens.task][0]
            y = np.array([ens.class_names.index(labels[_movie_key(n)][column]) for n in names])
        for i, name in enumerate(names):
            records.append(
                {
                    "movie": name,
                    "task": ens.task,
                    "prediction": ens.class_names[int(preds[ens.task][i])],
                    "probabilities": {c: float(p) for c, p in zip(ens.class_names, mean[i])},
                }
            )
        report = boost.uncertainty_from_probs(members, y)
        records.append({"task": ens.task, "report": report.to_dict()})
    return records, preds


def cmd_infer(args):
    names, X, valid = _feature_rows(args.features)
    ensembles = boost.load_ensembles(args.model)
    labels = _labels_by_movie(args.manifest) if args.manifest else None
    records, _ = infer_records(ensembles, names, X, valid, labels)
    lines = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    if args.out:
        _parent(args.out)
        Path(args.out).write_text(lines)
        return Path(args.out).parent, [args.out]
    sys.stdout.write(lines)
    return None, []


def pipeline_predictions(model, ensembles, manifest, fwhm_uas, split="test", starts_per_movie=1, r_ring=None, n_steps=plasma.DEFAULT_SLICE):
    """Blur a test frame, forecast ``n_steps`` frames, featurise and classify.

    Returns ``{task: (predictions, labels)}``.
    """
    names, feats = [], []
    for row in synthgen.read_manifest(manifest):
        if split not in row["ranges"]:
            continue
        a, b = row["ranges"][split]
        movie = read_movie(row["file"])
        radius = r_ring or (row["params"].ring_radius_px if row["params"] else synthgen.BENCH_RING_RADIUS)
        for s in np.linspace(a, b - 1, starts_per_movie).round().astype(int):
            names.append(f"{row['path']}:{s}")
            feats.append(evaluate.forecast_features(model, movie[int(s)], radius, n_steps, fwhm_uas))
    X, valid = evaluate.feature_table(feats)
    labels = _labels_by_movie(manifest)
    out = {}
    for ens in ensembles:
        column = TASKS[ens.task][0]
        y = np.array([ens.class_names.index(labels[_movie_key(n)][column]) for n in names])
        out[ens.task] = (np.argmax(ens.predict_proba(X, valid), axis=1), y)
    return out


def cmd_evaluate(args):
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    if args.forecast:
        if not args.truth:
            raise ArgumentError("evaluate needs --truth with --forecast")
        fc = read_movie(args.forecast)
        truth_movie = read_movie(args.truth)
        truth = truth_movie.data[args.truth_start : args.truth_start + fc.n_frames]
        if truth.shape[0] != fc.n_frames:
            raise ArgumentError(f"truth has {truth.shape[0]} frames from {args.truth_start}, forecast has {fc.n_frames}")
        metrics = evaluate.per_step_metrics(fc, truth)
        evaluate.write_metrics_csv(out_dir / "metrics.csv", metrics)
        k = min(args.psd_step, fc.n_frames) - 1
        psd_fc, psd_gt = plasma.radial_psd(fc.data[k]), plasma.radial_psd(truth[k])
        evaluate.write_psd_csv(out_dir / "psd_forecast.csv", psd_fc)
        evaluate.write_psd_csv(out_dir / "psd_truth.csv", psd_gt)
        curves = {f"forecast step {k + 1}": psd_fc, "ground truth": psd_gt}
        if args.blur_fwhm_uas:
            x0 = truth_movie.data[args.truth_start - 1] if args.truth_start > 0 else truth[0]
            curves["blurred input"] = plasma.radial_psd(blur_gaussian(Frame(x0, truth_movie.pixel_scale_uas), args.blur_fwhm_uas))
        evaluate.plot_psd(curves, out_dir / "psd.png")
        evaluate.plot_error(metrics, out_dir / "error.png")
        summary = {"mse_final": float(metrics["mse"][-1]), "psd_distance_step": float(metrics["psd_distance"][k])}
        if fc.n_frames >= args.slice:
            pf = plasma.extract_features(fc.data[: args.slice], args.ring_radius_px)
            tf = plasma.extract_features(truth[: args.slice], args.ring_radius_px)
            summary["feature_mae"] = evaluate.feature_mae([pf], [tf])
        (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        outputs += [out_dir / n for n in ("metrics.csv", "psd_forecast.csv", "psd_truth.csv", "psd.png", "error.png", "summary.json")]
    if args.sweep:
        from .forecaster import from_checkpoint, load_checkpoint

        if not (args.checkpoint and args.model and args.manifest):
            raise ArgumentError("evaluate --sweep needs --checkpoint, --model and --manifest")
        model, _, _ = from_checkpoint(load_checkpoint(args.checkpoint))
        ensembles = boost.load_ensembles(args.model)
        rows = evaluate.robustness_sweep(
            lambda fwhm: pipeline_predictions(model, ensembles, args.manifest, fwhm, args.split, args.starts, n_steps=args.steps)
        )
        evaluate.write_sweep_csv(out_dir / "sweep.csv", rows)
        outputs.append(out_dir / "sweep.csv")
    if not outputs:
        raise ArgumentError("evaluate needs --forecast/--truth or --sweep")
    print(out_dir)
    return out_dir, outputs


def cmd_calibrate_oracle(args):
    unblurred, blurred = [], []
    for row in synthgen.read_manifest(args.manifest):
        if "train" not in row["ranges"]:
            continue
        a, b = row["ranges"]["train"]
        m = read_movie(row["file"])
        u = Movie(m.data[a:b], m.dt_M, m.pixel_scale_uas)
        unblurred.append(u.data)
        blurred.append(blur_movie(u, args.blur_fwhm_uas).data)
    if not unblurred:
        raise DataError(f"{args.manifest}: no train split")
    grid = baseline.DEFAULT_SIGMA_GRID
    sigma, nsr = baseline.estimate_psf(np.concatenate(unblurred), np.concatenate(blurred), grid)
    flow = np.mean([baseline.mean_flow(u, args.flow_pairs) for u in unblurred], axis=0)
    calib = baseline.OracleCalib(sigma, nsr, flow)
    _parent(args.out)
    baseline.save_calib(calib, args.out)
    print(f"{args.out} sigma_px={sigma:.4g} nsr={nsr:.3g}")
    return Path(args.out).parent, [args.out]


def cmd_oracle_rollout(args):
    calib = baseline.load_calib(args.calib)
    m = read_movie(args.movie)
    x0 = _frame(m, args.frame)
    if args.blur_fwhm_uas:
        x0 = blur_gaussian(x0, args.blur_fwhm_uas)
    movie = baseline.flow_warp_rollout(x0, calib, args.steps, m.dt_M)
    out_dir = _parent(args.out)
    write_movie(movie, args.out)
    print(args.out)
    return out_dir, [args.out]


# ---------------------------------------------------------------------------
# parser


def _exit_code_help():
    return "exit codes:\n" + "\n".join(f"  {code}  {name}" for name, code in sorted(EXIT_CODES.items(), key=lambda kv: kv[1])) + "\n  0  success"


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master seed")
    common.add_argument("--threads", type=int, default=None, help="thread limit for numeric libraries (env BHC_THREADS)")
    common.add_argument("--deterministic", action="store_true", help="single-threaded, fixed reduction order")
    common.add_argument("--config", help="JSON file of option defaults (a run.json works); flags override it")

    p = argparse.ArgumentParser(
        prog="bhflow",
        description="Black-hole accretion movie forecasting and plasma-feature inference.",
        epilog=_exit_code_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        sp = sub.add_parser(name, parents=[common], help=help, epilog=_exit_code_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.set_defaults(func=func)
        return sp

    g = add("generate", cmd_generate, "render a synthetic movie dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--movies", type=int, default=32)
    g.add_argument("--frames", type=int, default=1000)
    g.add_argument("--size", type=int, default=synthgen.BENCH_SIZE)
    g.add_argument("--split", default="0.8,0.1,0.1")
    g.add_argument("--noise", type=float, default=synthgen.BENCH_NOISE, help="log-normal noise sigma")
    g.add_argument("--background", type=float, default=synthgen.BENCH_BACKGROUND)

    t = add("train", cmd_train, "train the forecaster or the feature classifier")
    t.add_argument("--kind", choices=["forecaster", "boost"], default="forecaster")
    t.add_argument("--out", required=True)
    t.add_argument("--manifest")
    t.add_argument("--depth", type=int, default=2)
    t.add_argument("--channels", type=int, default=8)
    t.add_argument("--epochs", type=int, default=100)
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--weight-decay", type=float, default=1e-4)
    t.add_argument("--loss", choices=["full", "l2", "noflux"], default="full")
    t.add_argument("--loss-config", help="key = value LossSpec file")
    t.add_argument("--pair-stride", type=int, default=1)
    t.add_argument("--log", help="training log CSV (default next to --out)")
    t.add_argument("--features", help="features CSV (boost)")
    t.add_argument("--rounds", type=int, default=1000)
    t.add_argument("--max-depth", type=int, default=6)
    t.add_argument("--boost-lr", type=float, default=0.05)
    t.add_argument("--bootstrap", type=int, default=1, help="ensemble size; 1 trains a single model")
    t.add_argument("--frac", type=float, default=0.8)

    r = add("rollout", cmd_rollout, "autoregressive forecast from one frame")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--movie", required=True)
    r.add_argument("--frame", type=int, default=0)
    r.add_argument("--steps", type=int, default=60)
    r.add_argument("--blur-fwhm-uas", type=float, default=None)
    r.add_argument("--out", required=True)

    f = add("features", cmd_features, "extract plasma features to CSV")
    f.add_argument("--manifest")
    f.add_argument("--split", default="train")
    f.add_argument("--movie", nargs="*")
    f.add_argument("--slice", type=int, default=plasma.DEFAULT_SLICE)
    f.add_argument("--ring-radius-px", type=float, default=synthgen.BENCH_RING_RADIUS)
    f.add_argument("--delta-r-frac", type=float, default=plasma.DEFAULT_DELTA_R_FRAC)
    f.add_argument("--n-theta", type=int, default=plasma.DEFAULT_N_THETA)
    f.add_argument("--out", required=True)

    i = add("infer", cmd_infer, "classify feature rows with a boosted ensemble")
    i.add_argument("--features", required=True)
    i.add_argument("--model", required=True)
    i.add_argument("--manifest", help="adds accuracy to the reports")
    i.add_argument("--out", help="JSON-lines output (default stdout)")

    e = add("evaluate", cmd_evaluate, "forecast metrics, PSD plots and blur sweep")
    e.add_argument("--forecast")
    e.add_argument("--truth")
    e.add_argument("--truth-start", type=int, default=0, help="truth frame matching forecast step 1")
    e.add_argument("--psd-step", type=int, default=6)
    e.add_argument("--blur-fwhm-uas", type=float, default=None)
    e.add_argument("--slice", type=int, default=plasma.DEFAULT_SLICE)
    e.add_argument("--ring-radius-px", type=float, default=synthgen.BENCH_RING_RADIUS)
    e.add_argument("--sweep", action="store_true", help="pipeline accuracy at 20/25/30 uas")
    e.add_argument("--checkpoint")
    e.add_argument("--model")
    e.add_argument("--manifest")
    e.add_argument("--split", default="test")
    e.add_argument("--starts", type=int, default=1, help="forecast start frames per movie")
    e.add_argument("--steps", type=int, default=60)
    e.add_argument("--out-dir", required=True)

    c = add("calibrate-oracle", cmd_calibrate_oracle, "fit the Wiener + mean-flow oracle")
    c.add_argument("--manifest", required=True)
    c.add_argument("--blur-fwhm-uas", type=float, default=20.0)
    c.add_argument("--flow-pairs", type=int, default=baseline.MAX_CALIB_SAMPLES)
    c.add_argument("--out", required=True)

    o = add("oracle-rollout", cmd_oracle_rollout, "Wiener + flow-warp forecast")
    o.add_argument("--calib", required=True)
    o.add_argument("--movie", required=True)
    o.add_argument("--frame", type=int, default=0)
    o.add_argument("--steps", type=int, default=60)
    o.add_argument("--blur-fwhm-uas", type=float, default=None)
    o.add_argument("--out", required=True)
    return p


def parse_args(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise IoError(f"cannot read config {args.config}: {exc}") from exc
        cfg = cfg.get("args", cfg)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        sub.set_defaults(**{k: v for k, v in cfg.items() if k in known and k not in ("command", "config", "func")})
        args = parser.parse_args(argv)
    if args.deterministic:
        args.threads = 1
    return args


def main(argv=None):
    try:
        args = parse_args(argv)
        limiter = _limit_threads(args.threads)
        try:
            out_dir, outputs = args.func(args)
        finally:
            if limiter is not None:
                limiter.unregister()
        if out_dir is not None:
            write_run_json(out_dir, args, outputs)
    except BHFlowError as exc:
        print(f"bhflow: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"bhflow: IoError: {exc}", file=sys.stderr)
        return IoError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
