"""Benchmark presets, seeded trials and learning curves."""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .optimizer import BoConfig, BoTrace, Mode, run
from .sim import Footprint, Grid, SceneSpec, make_dataset
from .space import ParameterSpace

PRESETS = ("exp1", "exp2", "exp3", "exp4")
SEED_ITERATION = -1

TRIAL_HEADER = ["iter", "sim_count", "selected_obs", "total_error", "best_error"]
AGGREGATE_HEADER = ["iter", "sim_count_median", "err_p25", "err_p50", "err_p75"]


class BenchError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentPreset:
    name: str
    space: ParameterSpace
    scenes: tuple
    theta_star: np.ndarray
    iterations: int = 200
    schedule: dict | None = None
    trial_seeds: tuple = tuple(range(10))

    @property
    def n_objects(self) -> int:
        return len(self.space.objects)

    @property
    def n_observations(self) -> int:
        return len(self.scenes)

    def dataset(self, noise: float = 0.0, noise_seed=0) -> list:
        return make_dataset(self.scenes, self.space, self.theta_star, noise, noise_seed)


def load_preset(doc: dict) -> ExperimentPreset:
    space = ParameterSpace.from_dict(doc["space"])
    by_name = {o.name: o for o in space.objects}
    grid = Grid(**doc.get("grid", {}))
    geometry = doc["geometry"]

    def footprint(name):
        g = geometry[name]
        return Footprint(g["radius"], g["height"], by_name[name].material_class)

    scenes = []
    for s in doc["scenes"]:
        b, t = by_name[s["bottom"]], by_name[s["top"]]
        scenes.append(SceneSpec(b.id, t.id, footprint(b.name), footprint(t.name),
                                grid.center, tuple(s["action"]), grid))
    stars = doc["theta_star"]
    missing = set(space.dim_names) - set(stars)
    if missing:
        raise BenchError(f"theta_star is missing {sorted(missing)}")
    theta_star = space.validate([stars[n] for n in space.dim_names])
    schedule = doc.get("schedule")
    if schedule is not None:
        schedule = {int(k): list(v) for k, v in schedule.items()}
    return ExperimentPreset(doc["name"], space, tuple(scenes), theta_star,
                            int(doc.get("iterations", 200)), schedule,
                            tuple(doc.get("trial_seeds", range(10))))


def build_preset(name: str) -> ExperimentPreset:
    if name not in PRESETS:
        raise BenchError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    text = resources.files("sumgp.presets").joinpath(f"{name}.json").read_text()
    return load_preset(json.loads(text))


# Learning curves ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CurvePoint:
    iteration: int
    sim_count: int
    total_error: float
    best_error: float
    selected: object = None


@dataclass
class LearningCurve:
    """One trial.  ``initial`` is the post-seeding point, numbered -1."""

    mode: str
    seed: int
    initial: CurvePoint
    points: list = field(default_factory=list)

    @classmethod
    def from_trace(cls, trace: BoTrace) -> "LearningCurve":
        init = CurvePoint(SEED_ITERATION, trace.initial_sim_count, trace.initial_error,
                          trace.initial_error, "seed")
        pts = [CurvePoint(r.iteration, r.sim_count, r.total_error, r.best_error,
                          "all" if r.selected is None else r.selected)
               for r in trace.records]
        return cls(trace.mode.value, trace.seed, init, pts)

    def all_points(self) -> list:
        return [self.initial] + list(self.points)

    def sims(self) -> np.ndarray:
        return np.array([p.sim_count for p in self.all_points()], dtype=float)

    def errors(self, metric: str = "total_error") -> np.ndarray:
        return np.array([getattr(p, metric) for p in self.all_points()], dtype=float)

    def at_budget(self, budget: float, metric: str = "total_error") -> float:
        s = self.sims()
        if not s[0] <= budget <= s[-1]:
            raise BenchError(f"budget {budget} outside recorded range [{s[0]}, {s[-1]}]")
        return float(np.interp(budget, s, self.errors(metric)))

    def at_iteration(self, iteration: int, metric: str = "total_error") -> float:
        return getattr(self.all_points()[iteration + 1], metric)


@dataclass
class CurveSet:
    """All trials of one mode plus per-iteration quantiles."""

    mode: str
    trials: list

    def aggregate(self) -> list:
        n = min(len(t.points) for t in self.trials)
        rows = []
        for i in range(n):
            pts = [t.points[i] for t in self.trials]
            errs = np.array([p.total_error for p in pts])
            p25, p50, p75 = np.percentile(errs, [25, 50, 75])
            rows.append((pts[0].iteration, float(np.median([p.sim_count for p in pts])),
                         float(p25), float(p50), float(p75)))
        return rows

    def median_at_budget(self, budget: float, metric: str = "total_error") -> float:
        return float(np.median([t.at_budget(budget, metric) for t in self.trials]))

    def median_at_iteration(self, iteration: int, metric: str = "total_error") -> float:
        return float(np.median([t.at_iteration(iteration, metric) for t in self.trials]))


def _run_one(args):
    preset, mode, seed, overrides = args
    config = BoConfig(mode=mode, seed=seed, **overrides)
    schedule = preset.schedule if Mode.parse(mode).partial or preset.schedule is None else None
    if preset.schedule is not None and schedule is None:
        raise BenchError(f"mode {mode} cannot run the incremental preset {preset.name}")
    return run(config, preset.dataset(), preset.space, schedule)


def run_trials(preset: ExperimentPreset, modes, n_trials: int = 10, n_jobs: int = 1,
               return_traces: bool = False, **overrides):
    """Run every mode with seeds ``0..n_trials-1`` on the preset's dataset.

    ``overrides`` are passed to ``BoConfig`` (``iterations`` defaults to the
    preset's).  Returns ``{mode: CurveSet}``, plus the raw traces if asked.
    """
    if n_trials < 1:
        raise BenchError("n_trials must be >= 1")
    overrides.setdefault("iterations", preset.iterations)
    modes = [Mode.parse(m) for m in modes]
    jobs = [(preset, m, s, overrides) for m in modes for s in range(n_trials)]
    if n_jobs == 1:
        traces = [_run_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            traces = list(pool.map(_run_one, jobs))
    curves, by_mode = {}, {}
    for (_, m, _, _), tr in zip(jobs, traces):
        curves.setdefault(m.value, []).append(LearningCurve.from_trace(tr))
        by_mode.setdefault(m.value, []).append(tr)
    result = {m: CurveSet(m, c) for m, c in curves.items()}
    return (result, by_mode) if return_traces else result


@dataclass(frozen=True)
class Comparison:
    budget: float
    err_a: float
    err_b: float

    @property
    def ratio(self) -> float:
        if self.err_b == 0:
            return 1.0 if self.err_a == 0 else math.inf
        return self.err_a / self.err_b

    def to_dict(self) -> dict:
        return {"budget": self.budget, "err_a": self.err_a, "err_b": self.err_b,
                "ratio": self.ratio}


def compare(curves_a: CurveSet, curves_b: CurveSet, at_sim_budget: float,
            metric: str = "total_error") -> Comparison:
    """Median error of each curve set at a cumulative simulation count."""
    return Comparison(float(at_sim_budget), curves_a.median_at_budget(at_sim_budget, metric),
                      curves_b.median_at_budget(at_sim_budget, metric))


# CSV ------------------------------------------------------------------------------------------

def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def export(curves: dict, path) -> list:
    """Write ``<mode>_trial_<seed>.csv`` per trial and ``<mode>_aggregate.csv``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    written = []
    for mode, cs in curves.items():
        for t in cs.trials:
            fn = path / f"{mode}_trial_{t.seed}.csv"
            with open(fn, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(TRIAL_HEADER)
                for p in t.all_points():
                    w.writerow([p.iteration, p.sim_count, p.selected,
                                _fmt(p.total_error), _fmt(p.best_error)])
            written.append(fn)
        fn = path / f"{mode}_aggregate.csv"
        with open(fn, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(AGGREGATE_HEADER)
            for row in cs.aggregate():
                w.writerow([row[0]] + [_fmt(v) for v in row[1:]])
        written.append(fn)
    return written


def read_trial_csv(path, mode: str | None = None, seed: int | None = None) -> LearningCurve:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != TRIAL_HEADER:
            raise BenchError(f"{path}: expected header {','.join(TRIAL_HEADER)}")
        pts = []
        for row in reader:
            sel = row[2]
            sel = int(sel) if sel.lstrip("-").isdigit() else sel
            pts.append(CurvePoint(int(row[0]), int(row[1]), float(row[3]), float(row[4]), sel))
    if not pts:
        raise BenchError(f"{path}: no rows")
    if seed is None:
        stem = Path(path).stem
        seed = int(stem.rsplit("_", 1)[-1]) if stem.rsplit("_", 1)[-1].isdigit() else 0
    if pts[0].iteration == SEED_ITERATION:
        return LearningCurve(mode or "", seed, pts[0], pts[1:])
    raise BenchError(f"{path}: first row must be the seeding row (iter {SEED_ITERATION})")


def read_curve_set(paths, mode: str | None = None) -> CurveSet:
    paths = sorted(paths, key=os.fspath)
    if not paths:
        raise BenchError("no trial files given")
    return CurveSet(mode or "", [read_trial_csv(p, mode) for p in paths])
