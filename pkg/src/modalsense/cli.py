"""Command-line entry point: ``modalsense <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from ._accel import backend

logger = logging.getLogger("modalsense")

_RECORD_KEYS = set(vars(logging.LogRecord("", 0, "", 0, "", (), None))) | {"message", "asctime"}


class JsonLineFormatter(logging.Formatter):
    """One JSON object per record, including any ``extra`` fields."""

    def format(self, record):
        doc = {"time": round(record.created, 3), "level": record.levelname, "logger": record.name,
               "message": record.getMessage()}
        doc.update({k: v for k, v in vars(record).items() if k not in _RECORD_KEYS})
        return json.dumps(doc, default=str)


def _setup_logging(args):
    root = logging.getLogger()
    level = getattr(logging, args.log_level.upper())
    root.setLevel(min(level, logging.INFO) if args.log_json else level)
    h = logging.StreamHandler(sys.stderr)
    h.setLevel(level)
    h.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root.addHandler(h)
    if args.log_json:
        Path(args.log_json).parent.mkdir(parents=True, exist_ok=True)
        fh = logging.FileHandler(args.log_json, mode="a", encoding="utf-8")
        fh.setLevel(logging.INFO)
        fh.setFormatter(JsonLineFormatter())
        root.addHandler(fh)


def _out(args, name) -> Path:
    p = Path(name)
    return p if p.is_absolute() else Path(args.out_dir) / p


def _material_from_args(args):
    from .fem import MaterialParams, material

    if args.density is not None:
        return MaterialParams(args.density, args.youngs, args.poisson, args.alpha or 0.0, args.beta or 0.0,
                              args.gamma or 0.0, args.friction if args.friction is not None else 0.5)
    mat = material(args.material)
    return mat.replace(friction=args.friction) if args.friction is not None else mat


def cmd_mesh_gen(args):
    from .mesh import generate_bar, generate_tube, save_mesh

    if args.shape == "bar":
        div = args.divisions or [40, 2, 2]
        mesh = generate_bar(args.length, args.width, args.height, div)
    else:
        div = args.divisions or [40, 1, 16]
        mesh = generate_tube(args.length, args.outer_radius, args.inner_radius, div)
    node, ele = save_mesh(mesh, _out(args, args.out or args.shape))
    print(f"{mesh!r} -> {node}, {ele}")


def cmd_analyze(args):
    from .fem import assemble, dump_matrix_market
    from .mesh import generate_bar, load_mesh
    from .modal import modal_analysis, save_modal_model

    mesh = load_mesh(args.mesh, scale=args.scale) if args.mesh else generate_bar(0.2, 0.02, 0.02, [40, 2, 2])
    mat = _material_from_args(args)
    t0 = time.perf_counter()
    sys_ = assemble(mesh, mat, lumped=args.lumped)
    if args.dump_matrices:
        dump_matrix_market(sys_, _out(args, args.dump_matrices))
    model = modal_analysis(sys_, mat, mesh.content_hash, args.f_floor, args.f_ceil, args.r_max, args.method)
    path = save_modal_model(model, _out(args, args.out))
    logger.info("analyze finished in %.2f s", time.perf_counter() - t0,
                extra={"stage": "analyze", "modes": model.r, **model.info})
    print(f"{model.r} modes, {model.natural_freqs[0]:.1f}-{model.natural_freqs[-1]:.1f} Hz -> {path}")


def cmd_synth(args):
    from .pipeline import run_pipeline

    for cfg in args.config:
        doc = run_pipeline(cfg, args.out_dir, seed=args.seed)
        print(f"{doc['scenario_id']}: {doc['paths']['wav']} ({doc['diagnostics']['modal']['modes']} modes, "
              f"config {doc['config_hash'][:12]})")


def cmd_signal_gen(args):
    from .signal import ExcitationSpec, generate_excitation
    from .synth import write_wav

    spec = ExcitationSpec(args.kind, args.f0, args.f1, args.duration, args.loop_period, args.sample_rate)
    w = generate_excitation(spec, args.total)
    path = write_wav(w, _out(args, args.out or f"{args.kind}.wav"))
    print(f"{len(w)} samples -> {path}")


def cmd_features(args):
    from .ml import Dataset, save_dataset_csv, save_dataset_jsonl
    from .signal import band_frequencies, features_from_recording, smooth_spectrum
    from .synth import import_wav

    rows, labels, groups = [], [], []
    for path in args.wav:
        w = import_wav(path)
        feats = features_from_recording(w, args.window, args.take_first, args.taper, args.average)
        if args.smooth:
            feats = np.array([smooth_spectrum(f, args.smooth, args.polyorder) for f in feats])
        rows += list(feats)
        labels += [args.label or Path(path).stem] * len(feats)
        groups += [Path(path).stem] * len(feats)
    ds = Dataset(np.array(rows), labels, groups, band_frequencies())
    stem = _out(args, args.out)
    print(f"{len(ds)} rows -> {save_dataset_csv(ds, f'{stem}.csv')}, {save_dataset_jsonl(ds, f'{stem}.jsonl')}")


def cmd_dataset(args):
    from .pipeline import build_dataset, grasp_position_batch

    if args.template == "grasp-position":
        batch = grasp_position_batch(args.material, repetitions=args.reps or 5)
    elif args.batch:
        batch = args.batch
    else:
        raise SystemExit("dataset: give a batch file or --template")
    ds = build_dataset(batch, args.out_dir, seed=args.seed, threads=args.threads)
    print(f"{len(ds)} rows, config {ds.config_hashes[0][:12]} -> {args.out_dir}")


def cmd_eval(args):
    from .ml import evaluate, load_dataset

    ds = load_dataset(args.dataset, task=args.task, force=args.force)
    folds = args.folds or (5 if args.task == "classify" else 3)
    report = evaluate(ds, args.task, folds, args.k, args.seed if args.seed is not None else 0, args.standardize)
    out = _out(args, args.name)
    out.parent.mkdir(parents=True, exist_ok=True)
    Path(f"{out}.json").write_text(report.to_json(), encoding="utf-8")
    Path(f"{out}.txt").write_text(report.to_text(), encoding="utf-8")
    if args.task == "classify":
        Path(f"{out}_confusion.csv").write_text(report.confusion_csv(), encoding="utf-8")
    print(report.to_text(), end="")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="modalsense", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__} ({backend()} kernels)")
    p.add_argument("--seed", type=int, default=None, help="override the config/batch seed")
    p.add_argument("--threads", type=int, default=1, help="worker processes for batch runs")
    p.add_argument("--out-dir", default=".", help="directory for outputs (default: .)")
    p.add_argument("--log-level", default="warning")
    p.add_argument("--log-json", default=None, metavar="PATH", help="append structured JSON-lines logs here")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("mesh-gen", help="write a bar or tube tet mesh (.node/.ele)")
    s.add_argument("--shape", choices=["bar", "tube"], default="bar")
    s.add_argument("--length", type=float, default=0.2)
    s.add_argument("--width", type=float, default=0.02)
    s.add_argument("--height", type=float, default=0.02)
    s.add_argument("--outer-radius", type=float, default=0.015)
    s.add_argument("--inner-radius", type=float, default=0.010)
    s.add_argument("--divisions", type=int, nargs=3, default=None)
    s.add_argument("--out", default=None, help="output stem (default: the shape name)")
    s.set_defaults(func=cmd_mesh_gen)

    s = sub.add_parser("analyze", help="modal analysis of a mesh -> .modal file")
    s.add_argument("--mesh", default=None, help=".node/.ele stem or .msh (default: built-in bar)")
    s.add_argument("--scale", type=float, default=None, help="coordinate scale to meters")
    s.add_argument("--material", default="aluminium")
    for flag in ("density", "youngs", "poisson", "alpha", "beta", "gamma", "friction"):
        s.add_argument(f"--{flag}", type=float, default=None)
    s.add_argument("--f-floor", type=float, default=20.0)
    s.add_argument("--f-ceil", type=float, default=20000.0)
    s.add_argument("--r-max", type=int, default=256)
    s.add_argument("--method", choices=["auto", "dense", "sparse"], default="auto")
    s.add_argument("--lumped", action="store_true", help="lumped instead of consistent mass")
    s.add_argument("--dump-matrices", default=None, metavar="STEM", help="also write K and M as Matrix Market")
    s.add_argument("--out", default="model.modal")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("synth", help="run scenario configs end to end")
    s.add_argument("config", nargs="+")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("signal-gen", help="write an excitation waveform")
    s.add_argument("--kind", choices=["impulse", "linear_sweep", "exponential_sweep"], default="linear_sweep")
    s.add_argument("--f0", type=float, default=20.0)
    s.add_argument("--f1", type=float, default=10000.0)
    s.add_argument("--duration", type=float, default=None)
    s.add_argument("--loop-period", type=float, default=0.5)
    s.add_argument("--sample-rate", type=int, default=44100)
    s.add_argument("--total", type=float, default=1.0)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_signal_gen)

    s = sub.add_parser("features", help="140-bin spectral features of WAV recordings")
    s.add_argument("wav", nargs="+")
    s.add_argument("--window", type=float, default=0.5)
    s.add_argument("--take-first", type=float, default=1.0)
    s.add_argument("--taper", choices=["rect", "hann"], default="rect")
    s.add_argument("--average", action="store_true", help="one row per recording (mean of windows)")
    s.add_argument("--smooth", type=int, default=0, metavar="WINDOW", help="Savitzky-Golay window length")
    s.add_argument("--polyorder", type=int, default=3)
    s.add_argument("--label", default=None)
    s.add_argument("--out", default="features")
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("dataset", help="simulate a batch of scenarios into a labelled dataset")
    s.add_argument("batch", nargs="?", default=None)
    s.add_argument("--template", choices=["grasp-position"], default=None)
    s.add_argument("--material", default="aluminium")
    s.add_argument("--reps", type=int, default=None)
    s.set_defaults(func=cmd_dataset)

    s = sub.add_parser("eval", help="cross-validated KNN evaluation of a dataset")
    s.add_argument("dataset", nargs="+")
    s.add_argument("--task", choices=["classify", "regress"], default="classify")
    s.add_argument("--folds", type=int, default=None, help="default 5 (classify) or 3 (regress)")
    s.add_argument("--k", type=int, default=3)
    s.add_argument("--standardize", action="store_true")
    s.add_argument("--force", action="store_true", help="accept datasets with mixed config hashes")
    s.add_argument("--name", default="report")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args)
    Path(args.out_dir).mkdir(parents=True, exist_ok=True)
    try:
        args.func(args)
    except SystemExit:
        raise
    except Exception as exc:
        logger.debug("command failed", exc_info=True)
        print(f"modalsense {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
