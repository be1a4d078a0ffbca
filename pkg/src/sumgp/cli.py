"""Command-line entry point.

Exit codes: 0 success, 2 usage or config error, 3 I/O error, 4 refusing to
overwrite existing output (pass ``--force``), 5 simulator failure.
"""

from __future__ import annotations

import argparse
import datetime
import glob
import json
import sys
from pathlib import Path

import numpy as np

from . import bench
from .optimizer import BoConfig, Mode, RunAborted, load_config, run
from .sim import Heightmap, Observation, SceneSpec, make_dataset
from .space import ParameterError, ParameterSpace

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_EXISTS, EXIT_RUNTIME = 0, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, message, code=EXIT_USAGE):
        super().__init__(message)
        self.code = code


def _guard(paths, force):
    existing = [p for p in paths if Path(p).exists()]
    if existing and not force:
        raise CliError(f"refusing to overwrite {existing[0]} (use --force)", EXIT_EXISTS)


def _write(path: Path, text: str):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc}", EXIT_IO) from exc


# dataset files -----------------------------------------------------------------------

def write_dataset(out: Path, preset: bench.ExperimentPreset, observations, force=False):
    files = [out / "dataset.json"] + [out / f"obs_{i:03d}.{ext}"
                                      for i in range(len(observations)) for ext in ("json", "hmap")]
    _guard(files, force)
    manifest = {
        "preset": preset.name,
        "space": preset.space.to_dict(),
        "theta_star": dict(zip(preset.space.dim_names, preset.theta_star.tolist())),
        "schedule": preset.schedule,
        "observations": [f"obs_{i:03d}.json" for i in range(len(observations))],
    }
    for i, obs in enumerate(observations):
        doc = {"scene": obs.scene.to_dict(), "k": list(obs.k), "heightmap": f"obs_{i:03d}.hmap"}
        _write(out / f"obs_{i:03d}.json", json.dumps(doc, indent=2) + "\n")
        _write(out / f"obs_{i:03d}.hmap", obs.observed.dumps())
    _write(out / "dataset.json", json.dumps(manifest, indent=2) + "\n")
    return files


def read_dataset(path: Path):
    """``(space, observations, manifest)`` from a ``gen-data`` directory."""
    path = Path(path)
    if not path.exists():
        raise CliError(f"data path {path} does not exist")
    try:
        manifest = json.loads((path / "dataset.json").read_text())
        space = ParameterSpace.from_dict(manifest["space"])
        observations = []
        for name in manifest["observations"]:
            doc = json.loads((path / name).read_text())
            scene = SceneSpec.from_dict(doc["scene"])
            hm = Heightmap.loads((path / doc["heightmap"]).read_text())
            if tuple(doc["k"]) != scene.k:
                raise CliError(f"{name}: object subset does not match the scene")
            observations.append(Observation(scene, hm))
    except OSError as exc:
        raise CliError(f"cannot read dataset in {path}: {exc}", EXIT_IO) from exc
    except (KeyError, ValueError) as exc:
        raise CliError(f"invalid dataset in {path}: {exc}") from exc
    return space, observations, manifest


# commands -------------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    try:
        preset = bench.build_preset(args.preset)
    except bench.BenchError as exc:
        raise CliError(str(exc)) from exc
    observations = make_dataset(preset.scenes, preset.space, preset.theta_star,
                                args.noise, args.seed)
    write_dataset(Path(args.out), preset, observations, args.force)
    print(f"wrote {len(observations)} observations for {preset.name} to {args.out}")
    return EXIT_OK


def _load_run_config(args):
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise CliError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise CliError(f"config {args.config} is not valid JSON: {exc}") from exc
    if args.mode:
        doc["modes"] = args.mode
    if args.iterations is not None:
        doc["iterations"] = args.iterations
    if args.beta is not None:
        doc["beta"] = args.beta
    if args.seed is not None:
        doc["seeds"] = [args.seed]
    if args.trials is not None:
        start = doc.get("seeds", [0])[0] if args.seed is not None else 0
        doc["seeds"] = list(range(start, start + args.trials))
    try:
        return load_config(doc)
    except (ValueError, TypeError) as exc:
        raise CliError(f"invalid config: {exc}") from exc


def cmd_run(args) -> int:
    base, modes, seeds, schedule = _load_run_config(args)
    space, observations, manifest = read_dataset(Path(args.data))
    if schedule is None and args.use_schedule and manifest.get("schedule"):
        schedule = {int(k): v for k, v in manifest["schedule"].items()}
    out = Path(args.out)
    planned = [out / "traces" / f"{m.value}_seed{s}.csv" for m in modes for s in seeds]
    planned += [out / "curves" / f"{m.value}_trial_{s}.csv" for m in modes for s in seeds]
    _guard(planned, args.force)

    curves, status = {}, EXIT_OK
    for mode in modes:
        trials = []
        for seed in seeds:
            config = BoConfig(**{**base.to_dict(), "mode": mode, "seed": seed})
            sched = schedule if mode is not Mode.NAIVE_FULL else None
            try:
                trace = run(config, observations, space, sched)
            except RunAborted as exc:
                trace = exc.trace
                status = EXIT_RUNTIME
                print(f"{mode.value} seed={seed}: simulator failure: {exc.cause}", file=sys.stderr)
            except ValueError as exc:
                raise CliError(str(exc)) from exc
            _write_trace(out / "traces" / f"{mode.value}_seed{seed}.csv", trace)
            trials.append(bench.LearningCurve.from_trace(trace))
            if trace.records:
                last = trace.records[-1]
                print(f"{mode.value} seed={seed} iterations={len(trace)} sims={last.sim_count} "
                      f"initial_best={trace.initial_error:.6g} final_best={last.best_error:.6g}")
            if status == EXIT_RUNTIME:
                break
        curves[mode.value] = bench.CurveSet(mode.value, trials)
        if status == EXIT_RUNTIME:
            break
    try:
        bench.export(curves, out / "curves")
    except OSError as exc:
        raise CliError(f"cannot write curves: {exc}", EXIT_IO) from exc
    manifest_out = {
        "config": args.config,
        "data": str(args.data),
        "preset": manifest.get("preset"),
        "modes": [m.value for m in modes],
        "seeds": seeds,
        "settings": {**base.to_dict(), "mode": None, "seed": None},
        "schedule": schedule,
        "output": str(out),
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    _write(out / "manifest.json", json.dumps(manifest_out, indent=2) + "\n")
    return status


def _write_trace(path: Path, trace):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        trace.write_csv(path)
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc}", EXIT_IO) from exc


def _curve_set(spec: str, label: str) -> bench.CurveSet:
    paths = sorted(glob.glob(spec))
    if not paths and Path(spec).is_dir():
        paths = sorted(p for p in glob.glob(str(Path(spec) / "*_trial_*.csv")))
    if not paths:
        raise CliError(f"no trial files match {spec}")
    try:
        return bench.read_curve_set(paths, label)
    except bench.BenchError as exc:
        raise CliError(str(exc)) from exc
    except (OSError, ValueError, IndexError) as exc:
        raise CliError(f"cannot parse trial files for {spec}: {exc}") from exc


def cmd_compare(args) -> int:
    a = _curve_set(args.a, "a")
    b = _curve_set(args.b, "b")
    try:
        result = bench.compare(a, b, args.budget, args.metric)
    except bench.BenchError as exc:
        raise CliError(str(exc)) from exc
    doc = result.to_dict()
    print(f"budget={result.budget:g} err_a={result.err_a:.6g} err_b={result.err_b:.6g} "
          f"ratio={result.ratio:.6g}")
    print(json.dumps(doc))
    if args.json:
        _write(Path(args.json), json.dumps(doc, indent=2) + "\n")
    return EXIT_OK


def cmd_report(args) -> int:
    root = Path(args.run)
    curves_dir = root / "curves"
    if not curves_dir.is_dir():
        raise CliError(f"{root} has no curves/ directory")
    modes = sorted({p.name.rsplit("_trial_", 1)[0] for p in curves_dir.glob("*_trial_*.csv")})
    report = {}
    for mode in modes:
        cs = _curve_set(str(curves_dir / f"{mode}_trial_*.csv"), mode)
        final = [t.points[-1] for t in cs.trials if t.points]
        report[mode] = {
            "trials": len(cs.trials),
            "iterations": min(len(t.points) for t in cs.trials),
            "seed_best_error_median": float(np.median([t.initial.best_error for t in cs.trials])),
            "final_sim_count_median": float(np.median([p.sim_count for p in final])),
            "final_total_error_median": float(np.median([p.total_error for p in final])),
            "final_best_error_median": float(np.median([p.best_error for p in final])),
        }
    if args.budget is not None:
        for mode in modes:
            cs = _curve_set(str(curves_dir / f"{mode}_trial_*.csv"), mode)
            try:
                report[mode]["total_error_at_budget"] = cs.median_at_budget(args.budget)
            except bench.BenchError:
                report[mode]["total_error_at_budget"] = None
    for mode, row in report.items():
        print(mode + ": " + " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
                                      for k, v in row.items()))
    _write(root / "report.json", json.dumps(report, indent=2) + "\n")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sumgp", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a preset's observations")
    g.add_argument("--preset", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--noise", type=float, default=0.0, help="uniform per-cell noise amplitude (m)")
    g.add_argument("--seed", type=int, default=0, help="noise seed")
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    r = sub.add_parser("run", help="run the optimizer on a dataset")
    r.add_argument("--config", help="run configuration JSON")
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--mode", action="append", help="naive-full, sum-full or sum-partial")
    r.add_argument("--seed", type=int)
    r.add_argument("--trials", type=int, help="run seeds seed..seed+trials-1")
    r.add_argument("--iterations", type=int)
    r.add_argument("--beta", type=float)
    r.add_argument("--use-schedule", action="store_true",
                   help="apply the dataset's incremental schedule when the config has none")
    r.add_argument("--force", action="store_true")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="compare two sets of trial curves at a budget")
    c.add_argument("--a", required=True, help="glob or directory of trial CSVs")
    c.add_argument("--b", required=True, help="glob or directory of trial CSVs")
    c.add_argument("--budget", type=float, required=True, help="cumulative simulation count")
    c.add_argument("--metric", choices=("total_error", "best_error"), default="total_error")
    c.add_argument("--json", help="also write the summary to this file")
    c.set_defaults(func=cmd_compare)

    rp = sub.add_parser("report", help="summarize a run directory")
    rp.add_argument("--run", required=True)
    rp.add_argument("--budget", type=float)
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except CliError as exc:
        print(str(exc), file=sys.stderr)
        return exc.code
    except ParameterError as exc:
        print(f"invalid parameters: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
