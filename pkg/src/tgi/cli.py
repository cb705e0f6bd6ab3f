"""Command-line front end: ``tgi simulate|calibrate|reconstruct|sweep|predict``.

Exit codes: 0 success, 2 validation error, 3 I/O error, 4 insufficient statistics.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from . import experiment as ex
from .calibration import InsufficientStatistics
from .correlation import (NoiseModelParams, accidental_std, predicted_coincidences,
                          predicted_snr, required_snr)
from .frameio import FormatError, read_frame, read_profile, write_frame, write_profile
from .reconstruction import CalibrationProfile, calibrate
from .source import GeometryMismatch

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_STATS = 0, 2, 3, 4
MANIFEST = "manifest.json"

TRIAL_COLUMNS = ["trial", "step", "truth", "coincidences", "bit", "threshold"]
SUMMARY_COLUMNS = ["step", "truth", "mean_coincidences", "std_coincidences", "snr_step"]
SWEEP_COLUMNS = ["parameter", "value", "replicates", "window", "snr_measured",
                 "snr_replicate_std", "error_rate", "snr_predicted_full", "snr_predicted_approx",
                 "capture_fraction", "eta_window", "zero_step_std", "accidental_std_predicted"]


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _write_csv(path: Path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _geometry_hash(geom) -> str:
    return hashlib.sha256(f"{geom.width_px}x{geom.height_px}".encode()).hexdigest()[:16]


def _load_config(args) -> ex.ExperimentConfig:
    if getattr(args, "manifest", None):
        manifest = json.loads(Path(args.manifest).read_text())
        cfg = ex.ExperimentConfig.from_dict(manifest["config"])
    elif args.config:
        cfg = ex.ExperimentConfig.from_json(Path(args.config).read_text())
    else:
        raise CliError("one of --config or --manifest is required", EXIT_VALIDATION)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "method", None):
        changes["method"] = args.method
    if args.out:
        changes["output_dir"] = args.out
    return replace(cfg, **changes) if changes else cfg


def _out_dir(cfg) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ------------------------------------------------------------------ commands

def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    files = []

    def record(path: Path, **meta):
        files.append({"path": path.relative_to(out).as_posix(), "sha256": _sha256(path), **meta})

    for t in range(cfg.trials):
        tf = ex.simulate_trial(cfg, t, keep_steps=args.keep_step_signals)
        d = out / "frames" / f"trial_{t:05d}"
        d.mkdir(parents=True, exist_ok=True)
        for n, f in enumerate(tf.idler_frames):
            p = d / f"idler_{n:03d}.tgif"
            write_frame(p, f)
            record(p, trial=t, step=n, arm="idler")
        for n, f in enumerate(tf.step_signals):
            p = d / f"signal_{n:03d}.tgif"
            write_frame(p, f)
            record(p, trial=t, step=n, arm="signal")
        p = d / "signal_integrated.tgif"
        write_frame(p, tf.integrated_signal)
        record(p, trial=t, step=None, arm="integrated")
    if args.calibration:
        d = out / "calibration_frames"
        d.mkdir(parents=True, exist_ok=True)
        for k, (s, i) in enumerate(ex.calibration_pairs(cfg)):
            for arm, f in (("signal", s), ("idler", i)):
                p = d / f"{arm}_{k:05d}.tgif"
                write_frame(p, f)
                record(p, pair=k, arm=f"calibration-{arm}")
    manifest = {
        "format": "tgi-manifest", "version": 1,
        "config": cfg.to_dict(), "config_sha256": cfg.digest(),
        "seed": cfg.seed, "seed_scheme": ex.SEED_SCHEME,
        "geometry_hash": _geometry_hash(cfg.geometry),
        "files": files,
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(files)} frames and {out / MANIFEST}")
    return EXIT_OK


def _calibration_pairs_from_dir(d: Path):
    sig = sorted(d.glob("signal_*.tgif"))
    idl = sorted(d.glob("idler_*.tgif"))
    if [p.name[7:] for p in sig] != [p.name[6:] for p in idl]:
        raise CliError(f"{d}: signal and idler calibration frames do not pair up", EXIT_VALIDATION)
    return [(read_frame(s), read_frame(i)) for s, i in zip(sig, idl)]


def cmd_calibrate(args) -> int:
    if args.frames:
        frames_dir = Path(args.frames)
        sub = frames_dir / "calibration_frames"
        pairs = _calibration_pairs_from_dir(sub if sub.is_dir() else frames_dir)
        extent = tuple(args.window) if args.window else ex.DEFAULT_EXTENT
        out = Path(args.out or frames_dir)
        out.mkdir(parents=True, exist_ok=True)
    else:
        cfg = _load_config(args)
        pairs = ex.calibration_pairs(cfg)
        extent = tuple(args.window) if args.window else tuple(cfg.window)
        out = _out_dir(cfg)
    if len(pairs) < args.min_frames:
        raise CliError(f"calibration needs at least {args.min_frames} twin pairs, "
                       f"got {len(pairs)}", EXIT_STATS)
    profile = calibrate(pairs, extent)
    path = out / "calibration.tgim"
    write_profile(path, profile)
    print(f"eta={profile.eta.eta:.4f} eta_window={profile.eta_window.eta:.4f} "
          f"capture={profile.capture_fraction:.4f} window={profile.window}")
    print(f"wrote {path}")
    return EXIT_OK


def _frames_from_manifest(manifest_path: Path, cfg):
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("geometry_hash") != _geometry_hash(cfg.geometry):
        raise CliError("manifest geometry does not match its configuration", EXIT_VALIDATION)
    base = manifest_path.parent
    by_trial = {}
    for entry in manifest["files"]:
        if "trial" not in entry:
            continue
        p = base / entry["path"]
        if not p.exists():
            return None
        if _sha256(p) != entry["sha256"]:
            raise CliError(f"{p}: contents differ from the manifest hash", EXIT_VALIDATION)
        by_trial.setdefault(entry["trial"], {})[(entry["arm"], entry["step"])] = p
    frames = []
    n_steps = cfg.signal.n_steps
    for t in sorted(by_trial):
        files = by_trial[t]
        idlers = tuple(read_frame(files[("idler", n)]) for n in range(n_steps))
        frames.append(ex.TrialFrames(t, read_frame(files[("integrated", None)]), idlers))
    return frames or None


def _load_calibration(args, cfg) -> CalibrationProfile:
    if args.calibration:
        profile = read_profile(args.calibration)
    else:
        profile = ex.run_calibration(cfg)
    if profile.geometry != cfg.geometry:
        raise CliError(f"calibration geometry {profile.geometry} does not match "
                       f"frames {cfg.geometry}", EXIT_VALIDATION)
    return profile


def _metric_rows(run: ex.ReconstructionRun):
    m, cal, noise = run.metrics, run.calibration, run.noise_params
    pairs = [
        ("trials", m.trials),
        ("snr_measured", m.snr),
        ("snr_measured_rms_std", m.snr_rms),
        ("error_rate", m.error_rate),
        ("error_rate_gaussian_model", m.predicted_error_rate),
        ("mean_one_level", m.mean_one),
        ("mean_zero_level", m.mean_zero),
        ("std_one_level", m.std_one),
        ("std_zero_level", m.std_zero),
        ("snr_predicted_full", m.predicted_snr[0]),
        ("snr_predicted_approx", m.predicted_snr[1]),
        ("snr_required", required_snr(2, 1)),
        ("snr_paper_measured", ex.PAPER_SNR_MEASURED),
        ("snr_paper_predicted", ex.PAPER_SNR_PREDICTED),
        ("coincidences_predicted", predicted_coincidences(1, noise)),
        ("accidental_std_predicted", accidental_std(noise)),
        ("eta", cal.eta.eta),
        ("eta_window", cal.eta_window.eta),
        ("capture_fraction", cal.capture_fraction),
        ("mean_signal", run.mean_signal),
        ("mean_idler", run.mean_idler),
        ("pixel_count", noise.pixel_count),
        ("binning", noise.binning),
        ("ones", noise.ones),
        ("degenerate", int(m.degenerate)),
    ]
    return [{"metric": k, "value": float(v) if isinstance(v, float) else v} for k, v in pairs]


def cmd_reconstruct(args) -> int:
    cfg = _load_config(args)
    frames = None
    if args.manifest:
        frames = _frames_from_manifest(Path(args.manifest), cfg)
    calib = _load_calibration(args, cfg)
    if frames and frames[0].integrated_signal.geometry != calib.geometry:
        raise CliError("frame geometry does not match the calibration", EXIT_VALIDATION)
    run = ex.run_reconstruction(cfg, calib, jobs=args.jobs, frames=frames)
    out = _out_dir(cfg)
    levels = cfg.signal.levels
    rows = []
    for s, d in zip(run.series, run.decoded):
        for n, (c, b) in enumerate(zip(s.values, d.bits)):
            rows.append({"trial": s.trial, "step": n, "truth": levels[n],
                         "coincidences": float(c), "bit": b, "threshold": float(d.threshold)})
    _write_csv(out / "trials.csv", TRIAL_COLUMNS, rows)
    m = run.metrics
    summary = [{"step": n, "truth": levels[n], "mean_coincidences": float(m.step_mean[n]),
                "std_coincidences": float(m.step_std[n]), "snr_step": float(m.step_snr[n])}
               for n in range(len(levels))]
    _write_csv(out / "summary.csv", SUMMARY_COLUMNS, summary)
    _write_csv(out / "metrics.csv", ["metric", "value"], _metric_rows(run))
    print(f"SNR measured {m.snr:.3f} (paper {ex.PAPER_SNR_MEASURED}), "
          f"predicted full {m.predicted_snr[0]:.3f} approx {m.predicted_snr[1]:.3f} "
          f"(paper {ex.PAPER_SNR_PREDICTED}); error rate {m.error_rate:.4%}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    if args.sweep:
        spec = ex.SweepSpec.from_dict(json.loads(Path(args.sweep).read_text()))
    elif args.param:
        vals = [v for v in (args.values or "").split(",") if v.strip()]
        spec = ex.SweepSpec(args.param, tuple(_parse_value(v) for v in vals), args.replicates)
    else:
        raise CliError("sweep needs --sweep SPEC or --param NAME --values LIST", EXIT_VALIDATION)
    rows = ex.run_sweep(cfg, spec, jobs=args.jobs)
    out = _out_dir(cfg)
    _write_csv(out / "sweep.csv", SWEEP_COLUMNS, rows)
    print(f"wrote {out / 'sweep.csv'} ({len(rows)} rows)")
    return EXIT_OK


def _parse_value(text):
    text = text.strip()
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    return text


def cmd_predict(args) -> int:
    params = NoiseModelParams(pixel_count=args.D, binning=args.B, mean_signal=args.m_s,
                              mean_idler=args.m_i, eta=args.eta, ones=args.M)
    full, approx = predicted_snr(args.T, params)
    rows = [
        ("coincidences", predicted_coincidences(args.T, params)),
        ("accidental_std", accidental_std(params)),
        ("snr_full", full),
        ("snr_approx", approx),
        ("snr_required", required_snr(args.L, args.T)),
        ("decodable", int(full >= required_snr(args.L, args.T))),
    ]
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["quantity", "value"])
    for k, v in rows:
        w.writerow([k, _fmt(float(v)) if isinstance(v, float) else v])
    return EXIT_OK


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tgi", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, manifest=False):
        sp.add_argument("--config", help="experiment configuration (JSON)")
        if manifest:
            sp.add_argument("--manifest", help="manifest.json written by 'simulate'")
        sp.add_argument("--out", help="output directory (overrides output_dir)")
        sp.add_argument("--seed", type=_u64, help="master seed (overrides the config)")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes")
        sp.add_argument("--method", choices=("ensemble", "gaussian"),
                        help="mean-shape subtraction method")

    sp = sub.add_parser("simulate", help="write TGIF frames and a manifest")
    common(sp)
    sp.add_argument("--calibration", action="store_true", help="also write calibration pairs")
    sp.add_argument("--keep-step-signals", action="store_true",
                    help="also write every per-step signal frame")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("calibrate", help="write a TGIM calibration profile")
    common(sp, manifest=True)
    sp.add_argument("--frames", help="directory holding calibration_frames/")
    sp.add_argument("--window", type=int, nargs=2, metavar=("BX", "BY"))
    sp.add_argument("--min-frames", type=int, default=ex.DEFAULT_ENSEMBLE)
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("reconstruct", help="per-trial and summary CSVs")
    common(sp, manifest=True)
    sp.add_argument("--calibration", help="TGIM profile (computed from the config if absent)")
    sp.set_defaults(func=cmd_reconstruct)

    sp = sub.add_parser("sweep", help="parameter sweep table")
    common(sp)
    sp.add_argument("--sweep", help="sweep spec JSON {parameter, values, replicates}")
    sp.add_argument("--param", choices=ex.SWEEP_PARAMETERS)
    sp.add_argument("--values", help="comma-separated values")
    sp.add_argument("--replicates", type=int, default=1)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("predict", help="closed-form coincidence and SNR predictions")
    sp.add_argument("--D", type=int, default=506 * 506, help="pixel count")
    sp.add_argument("--B", type=int, default=80, help="binning")
    sp.add_argument("--m-s", dest="m_s", type=float, default=0.125)
    sp.add_argument("--m-i", dest="m_i", type=float, default=0.04)
    sp.add_argument("--eta", type=float, default=0.23)
    sp.add_argument("--M", type=int, default=4, help="number of '1' steps")
    sp.add_argument("--L", type=int, default=2, help="number of levels")
    sp.add_argument("--T", type=int, default=1, choices=(0, 1), help="step level")
    sp.set_defaults(func=cmd_predict)
    return p


def _u64(text):
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except InsufficientStatistics as exc:
        print(f"error: insufficient statistics: {exc}", file=sys.stderr)
        return EXIT_STATS
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ex.ConfigError, GeometryMismatch, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
