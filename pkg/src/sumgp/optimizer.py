"""GP-UCB system identification with one GP per observation.

Three modes share one state type:

``naive-full``
    one GP over every active parameter, trained on the total reward; every
    observation is simulated at each proposal.
``sum-full``
    one GP per observation over that observation's objects only; the
    acquisition is the sum of the per-GP UCB terms; every observation is
    simulated at each proposal.
``sum-partial``
    as ``sum-full`` but only the observation whose GP is most uncertain at the
    proposal is simulated.

All GP inputs live in the normalized cube of the *full* parameter space.
Parameters of objects that no active observation mentions stay at the cube
midpoint and are not searched over.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import gp
from .sim import Observation, reward, surrogate_simulate
from .space import (ParameterSpace, check_subset, denormalize, normalize,
                    sample_uniform, slice_params)

FD_STEP = 1e-4
INITIAL_STEP = 0.1
LINE_SEARCH_HALVINGS = 10
NAIVE = -1


class Mode(str, enum.Enum):
    NAIVE_FULL = "naive-full"
    SUM_FULL = "sum-full"
    SUM_PARTIAL = "sum-partial"

    @classmethod
    def parse(cls, value) -> "Mode":
        aliases = {"naive": cls.NAIVE_FULL, "sum": cls.SUM_PARTIAL, "partial": cls.SUM_PARTIAL}
        if isinstance(value, cls):
            return value
        value = str(value).lower().replace("_", "-")
        return aliases.get(value) or cls(value)

    @property
    def partial(self) -> bool:
        return self is Mode.SUM_PARTIAL


@dataclass(frozen=True)
class BoConfig:
    mode: Mode = Mode.SUM_PARTIAL
    beta: float | tuple = 2.0
    n_init: int = 5
    iterations: int = 200
    multistart_count: int = 16
    ascent_steps: int = 50
    seed: int = 0
    n_init_new: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode.parse(self.mode))
        if not np.isscalar(self.beta):
            object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
            betas = self.beta
        else:
            object.__setattr__(self, "beta", float(self.beta))
            betas = (self.beta,)
        if min(betas) < 0:
            raise ValueError("beta must be >= 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.multistart_count < 1:
            raise ValueError("multistart_count must be >= 1")
        if self.n_init < 0 or self.n_init_new < 0 or self.ascent_steps < 0:
            raise ValueError("n_init, n_init_new and ascent_steps must be >= 0")

    def beta_for(self, obs: int) -> float:
        if isinstance(self.beta, tuple):
            return self.beta[0] if obs == NAIVE else self.beta[obs]
        return self.beta

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["mode"] = self.mode.value
        d["beta"] = list(self.beta) if isinstance(self.beta, tuple) else self.beta
        return d


@dataclass(frozen=True)
class Entry:
    """One GP. ``obs`` is the dataset index of its observation, or ``NAIVE``."""

    obs: int
    k: tuple
    cols: np.ndarray
    model: gp.GpModel


@dataclass(frozen=True)
class SumGpState:
    space: ParameterSpace
    entries: tuple
    active_ids: tuple
    members: tuple = ()
    sim_count: int = 0
    history: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.history is None:
            object.__setattr__(self, "history", np.empty((0, self.space.total_dims)))

    @property
    def naive(self) -> bool:
        return len(self.entries) == 1 and self.entries[0].obs == NAIVE

    @property
    def active_space(self) -> ParameterSpace:
        return self.space.subspace(self.active_ids)

    @property
    def free_dims(self) -> np.ndarray:
        return self.space.indices(self.active_ids)

    @property
    def observations(self) -> tuple:
        return tuple(e.obs for e in self.entries)

    def entry(self, obs: int) -> Entry:
        for e in self.entries:
            if e.obs == obs:
                return e
        raise KeyError(obs)


def _ordered_ids(space, ids):
    ids = set(ids)
    return tuple(oid for oid in space.ids if oid in ids)


def init_state(space: ParameterSpace, observations: Mapping[int, Observation],
               naive: bool = False) -> SumGpState:
    """State with empty GPs for ``observations`` (dataset index -> observation)."""
    active = _ordered_ids(space, (oid for o in observations.values() for oid in o.k))
    if naive:
        cols = space.indices(active)
        entries = (Entry(NAIVE, active, cols, gp.empty_model(cols.size)),)
    else:
        entries = []
        for i, o in observations.items():
            k = check_subset(space, o.k)
            cols = space.indices(k)
            entries.append(Entry(int(i), k, cols, gp.empty_model(cols.size)))
        entries = tuple(entries)
    return SumGpState(space, entries, active, tuple(int(i) for i in observations))


# Acquisition ------------------------------------------------------------------

def _acquisition_batch(state: SumGpState, U, config_or_beta) -> np.ndarray:
    total = np.zeros(U.shape[0])
    for e in state.entries:
        m, v = gp.posterior_batch(e.model, U[:, e.cols])
        total += m + _beta(config_or_beta, e.obs) * np.sqrt(v)
    return total


def _beta(config_or_beta, obs):
    if isinstance(config_or_beta, BoConfig):
        return config_or_beta.beta_for(obs)
    if np.isscalar(config_or_beta):
        return float(config_or_beta)
    if isinstance(config_or_beta, Mapping):
        return float(config_or_beta[obs])
    return float(config_or_beta[0 if obs == NAIVE else obs])


def acquisition_sum_ucb(state: SumGpState, theta, beta=2.0) -> float:
    """Sum over GPs of ``mu_i + beta_i * sigma_i`` at the sliced ``theta``.

    ``beta`` is a scalar, a sequence indexed by observation, or a mapping.
    """
    u = normalize(state.space, theta)
    return float(_acquisition_batch(state, u[None, :], beta)[0])


def acquisition_naive_ucb(model: gp.GpModel, u, beta=2.0) -> float:
    """``mu + beta * sigma`` for a GP over the full normalized vector ``u``."""
    m, v = gp.posterior(model, u)
    return m + float(beta) * math.sqrt(v)


# Proposal -----------------------------------------------------------------------

def _incumbent(state: SumGpState, config) -> np.ndarray | None:
    """Evaluated point with the highest summed posterior mean."""
    if state.history.shape[0] == 0:
        return None
    H = state.history
    mu = np.zeros(H.shape[0])
    for e in state.entries:
        mu += gp.posterior_batch(e.model, H[:, e.cols])[0]
    return H[int(np.argmax(mu))]


def multistart_ascent(f: Callable, starts: np.ndarray, free: np.ndarray,
                      steps: int, h: float = FD_STEP) -> tuple:
    """Projected finite-difference ascent of ``f`` from every row of ``starts``.

    ``f`` maps an ``(m, D)`` array of unit-cube points to ``m`` values.  Only
    the coordinates in ``free`` move.  Each step takes the central-difference
    gradient direction and backtracks from ``INITIAL_STEP`` by halving until
    the value improves; a start that cannot improve is frozen.
    Returns ``(points, values)``.
    """
    U = np.array(starts, dtype=float)
    vals = f(U)
    S, D = U.shape
    nf = free.size
    running = np.ones(S, dtype=bool)
    sizes = INITIAL_STEP * 0.5 ** np.arange(LINE_SEARCH_HALVINGS)
    if nf == 0:
        return U, vals
    for _ in range(steps):
        idx = np.flatnonzero(running)
        if idx.size == 0:
            break
        A = U[idx]
        a = idx.size
        P = np.repeat(A[:, None, :], 2 * nf, axis=1)
        rows = np.arange(nf)
        P[:, 2 * rows, free] += h
        P[:, 2 * rows + 1, free] -= h
        np.clip(P, 0.0, 1.0, out=P)
        fv = f(P.reshape(-1, D)).reshape(a, 2 * nf)
        span = P[:, 2 * rows, free] - P[:, 2 * rows + 1, free]
        g = (fv[:, 0::2] - fv[:, 1::2]) / span
        norm = np.linalg.norm(g, axis=1)
        direction = np.zeros((a, D))
        ok = norm > 0
        direction[np.ix_(ok, free)] = g[ok] / norm[ok, None]
        C = np.clip(A[:, None, :] + sizes[None, :, None] * direction[:, None, :], 0.0, 1.0)
        cv = f(C.reshape(-1, D)).reshape(a, sizes.size)
        better = cv > vals[idx][:, None]
        moved = better.any(axis=1) & ok
        first = np.argmax(better, axis=1)
        sel = np.flatnonzero(moved)
        U[idx[sel]] = C[sel, first[sel]]
        vals[idx[sel]] = cv[sel, first[sel]]
        running[idx[~moved]] = False
    return U, vals


def _propose_u(state: SumGpState, config: BoConfig, rng) -> np.ndarray:
    space = state.space
    free = state.free_dims
    base = np.full(space.total_dims, 0.5)
    if all(e.model.n == 0 for e in state.entries):
        u = base.copy()
        u[free] = rng.random(free.size)
        return u
    n_random = config.multistart_count
    starts = []
    inc = _incumbent(state, config)
    if inc is not None:
        starts.append(inc)
        n_random -= 1
    if n_random > 0:
        R = np.tile(base, (n_random, 1))
        R[:, free] = rng.random((n_random, free.size))
        starts.extend(R)
    U, vals = multistart_ascent(lambda X: _acquisition_batch(state, X, config),
                                np.array(starts), free, config.ascent_steps)
    return U[int(np.argmax(vals))]


def propose_next(state: SumGpState, config: BoConfig, rng=None) -> np.ndarray:
    """Maximize the UCB acquisition; returns the proposal in physical units."""
    rng = np.random.default_rng(config.seed if rng is None else rng)
    return denormalize(state.space, _propose_u(state, config, rng))


def select_observation(state: SumGpState, theta) -> int:
    """Dataset index of the GP with the largest posterior std at ``theta``.

    Ties go to the GP with fewer points, then to the earlier entry.
    """
    if not state.entries:
        raise ValueError("state has no observations")
    u = normalize(state.space, theta)
    return _select(state, u)


def _select(state, u) -> int:
    best, key = None, None
    for pos, e in enumerate(state.entries):
        _, v = gp.posterior(e.model, u[e.cols])
        cand = (-math.sqrt(v), e.model.n, pos)
        if key is None or cand < key:
            best, key = e.obs, cand
    return best


# Updates -----------------------------------------------------------------------------

def _refit_due(n_before: int, n_after: int) -> bool:
    return any(m <= 10 or m % 5 == 0 for m in range(n_before + 1, n_after + 1))


def _add_points(entry: Entry, U, ys, rng) -> Entry:
    model = entry.model
    n0 = model.n
    for u, y in zip(U, ys):
        model = gp.add_point(model, u[entry.cols], y)
    if _refit_due(n0, model.n):
        hp = gp.fit_hyperparams(model.data, int(rng.integers(2 ** 32)))
        model = gp.condition(model.data, hp)
    return replace(entry, model=model)


class SimulatorFailure(RuntimeError):
    pass


def _simulate_reward(obs: Observation, space, theta, simulator) -> float:
    try:
        predicted = simulator(obs.scene, slice_params(space, theta, obs.k))
    except Exception as exc:
        raise SimulatorFailure(str(exc)) from exc
    return reward(obs.observed, predicted)


def total_error(space: ParameterSpace, observations: Mapping[int, Observation], theta,
                simulator=surrogate_simulate) -> float:
    """``-R(o, theta)`` over ``observations``."""
    return -sum(_simulate_reward(o, space, theta, simulator) for o in observations.values())


def _evaluate_full(state, U, observations, simulator, rng):
    """Simulate every active observation at each row of ``U`` and train on it."""
    space = state.space
    rewards = []
    for u in U:
        theta = denormalize(space, u)
        rewards.append({e_obs: _simulate_reward(observations[e_obs], space, theta, simulator)
                        for e_obs in _active_obs(state)})
    if state.naive:
        entry = _add_points(state.entries[0], U, [sum(r.values()) for r in rewards], rng)
        entries = (entry,)
    else:
        entries = tuple(_add_points(e, U, [r[e.obs] for r in rewards], rng)
                        for e in state.entries)
    n = len(_active_obs(state))
    state = replace(state, entries=entries, sim_count=state.sim_count + n * len(U),
                    history=np.vstack([state.history, U]))
    return state, rewards


def _active_obs(state):
    return state.members


@dataclass(frozen=True)
class BoRecord:
    iteration: int
    theta: np.ndarray
    selected: int | None
    rewards: dict
    sim_count: int
    total_error: float
    best_error: float

    @property
    def partial_reward(self) -> float:
        return float(sum(self.rewards.values()))


def step_partial(state: SumGpState, config: BoConfig, observations: Mapping[int, Observation],
                 rng, simulator=surrogate_simulate):
    """One proposal, one simulation: only the most uncertain GP is trained.

    Returns ``(state, theta, selected, reward)``.
    """
    if state.naive:
        raise ValueError("partial evaluation needs per-observation GPs")
    u = _propose_u(state, config, rng)
    theta = denormalize(state.space, u)
    i = _select(state, u)
    r = _simulate_reward(observations[i], state.space, theta, simulator)
    entries = tuple(_add_points(e, u[None, :], [r], rng) if e.obs == i else e
                    for e in state.entries)
    state = replace(state, entries=entries, sim_count=state.sim_count + 1,
                    history=np.vstack([state.history, u]))
    return state, theta, i, {i: r}


def step_full(state: SumGpState, config: BoConfig, observations: Mapping[int, Observation],
              rng, simulator=surrogate_simulate):
    """One proposal evaluated on every observation.

    Returns ``(state, theta, None, rewards)``.
    """
    u = _propose_u(state, config, rng)
    state, rewards = _evaluate_full(state, u[None, :], observations, simulator, rng)
    return state, denormalize(state.space, u), None, rewards[0]


def add_observation(state: SumGpState, index: int, observation: Observation,
                    n_init_new: int = 0, rng=None, simulator=surrogate_simulate) -> SumGpState:
    """Start modelling a new observation with its own (empty or seeded) GP."""
    if state.naive:
        raise ValueError("observations can only be added to per-observation GP states")
    if index in state.observations:
        raise ValueError(f"observation {index} is already modelled")
    space = state.space
    k = check_subset(space, observation.k)
    cols = space.indices(k)
    entry = Entry(int(index), k, cols, gp.empty_model(cols.size))
    active = _ordered_ids(space, state.active_ids + k)
    state = replace(state, entries=state.entries + (entry,), active_ids=active,
                    members=state.members + (int(index),))
    if n_init_new > 0:
        rng = np.random.default_rng(rng)
        sub = state.space.subspace(k)
        thetas = sample_uniform(sub, int(rng.integers(2 ** 63)), n_init_new)
        U = np.tile(np.full(space.total_dims, 0.5), (n_init_new, 1))
        for row, t in zip(U, thetas):
            row[space.indices(sub.ids)] = normalize(sub, t)
        ys = [_simulate_reward(observation, space, denormalize(space, u), simulator) for u in U]
        entry = _add_points(entry, U, ys, rng)
        state = replace(state, entries=state.entries[:-1] + (entry,),
                        sim_count=state.sim_count + n_init_new)
    return state


# Runs ---------------------------------------------------------------------------------------

@dataclass
class BoTrace:
    mode: Mode
    seed: int
    dim_names: list
    records: list = field(default_factory=list)
    initial_sim_count: int = 0
    initial_error: float = math.nan
    seed_errors: list = field(default_factory=list)
    injections: dict = field(default_factory=dict)
    final_state: SumGpState | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.records)

    CSV_TAIL = ["selected_obs", "partial_reward", "sim_count", "total_error", "best_error"]

    def header(self) -> list:
        return ["iter"] + [f"theta:{n}" for n in self.dim_names] + self.CSV_TAIL

    def rows(self):
        for r in self.records:
            sel = "all" if r.selected is None else r.selected
            yield ([r.iteration] + [repr(float(v)) for v in r.theta]
                   + [sel, repr(r.partial_reward), r.sim_count, repr(r.total_error),
                      repr(r.best_error)])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header())
            w.writerows(self.rows())


class RunAborted(RuntimeError):
    """Simulator failure during a run; ``trace`` holds the records so far."""

    def __init__(self, trace: BoTrace, cause: Exception):
        super().__init__(f"run aborted after {len(trace)} iterations: {cause}")
        self.trace = trace
        self.cause = cause


def _normalize_schedule(schedule, n_obs):
    if schedule is None:
        return {0: list(range(n_obs))}
    sched = {int(t): [int(i) for i in ids] for t, ids in dict(schedule).items()}
    if 0 not in sched:
        raise ValueError("schedule must list the initial observations under iteration 0")
    seen = [i for ids in sched.values() for i in ids]
    if len(set(seen)) != len(seen) or not all(0 <= i < n_obs for i in seen):
        raise ValueError(f"schedule must reference distinct observations in [0, {n_obs})")
    return sched


def run(config: BoConfig, dataset: Sequence[Observation], space: ParameterSpace,
        schedule: Mapping[int, Sequence[int]] | None = None,
        simulator=surrogate_simulate) -> BoTrace:
    """Seed, then run ``config.iterations`` proposals numbered from 0.

    ``schedule`` maps an iteration number to the dataset indices that become
    active just before that iteration's proposal; key 0 is the initial set.
    Without a schedule every observation is active from the start.
    ``best_error`` restarts when observations are added, since the total
    error then measures a different objective.
    """
    sched = _normalize_schedule(schedule, len(dataset))
    if config.mode is Mode.NAIVE_FULL and len(sched) > 1:
        raise ValueError("the naive baseline does not support adding observations")
    rng = np.random.default_rng(config.seed)
    initial = {i: dataset[i] for i in sched[0]}
    state = init_state(space, initial, naive=config.mode is Mode.NAIVE_FULL)
    active = dict(initial)
    trace = BoTrace(config.mode, config.seed, space.dim_names,
                    injections={t: list(v) for t, v in sched.items() if t > 0})

    seeds = sample_uniform(state.active_space, int(rng.integers(2 ** 63)), config.n_init) \
        if config.n_init > 0 else []
    U = np.tile(np.full(space.total_dims, 0.5), (len(seeds), 1))
    for row, t in zip(U, seeds):
        row[state.free_dims] = normalize(state.active_space, t)
    best = math.inf
    try:
        if len(U):
            state, rewards = _evaluate_full(state, U, active, simulator, rng)
            trace.seed_errors = [-sum(r.values()) for r in rewards]
            best = min(trace.seed_errors)
        trace.initial_sim_count = state.sim_count
        trace.initial_error = best

        for t in range(config.iterations):
            if t in sched and t > 0:
                for i in sched[t]:
                    state = add_observation(state, i, dataset[i], config.n_init_new,
                                            rng, simulator)
                    active[i] = dataset[i]
                best = math.inf
            if config.mode is Mode.SUM_PARTIAL:
                state, theta, sel, rewards = step_partial(state, config, active, rng, simulator)
            else:
                state, theta, sel, rewards = step_full(state, config, active, rng, simulator)
            err = total_error(space, active, theta, simulator)
            best = min(best, err)
            trace.records.append(BoRecord(t, theta, sel, rewards, state.sim_count, err, best))
    except SimulatorFailure as exc:
        raise RunAborted(trace, exc.__cause__) from exc
    trace.final_state = state
    return trace


def expected_sim_count(mode, n_obs: int, n_init: int, t: int) -> int:
    """Simulations after ``t`` iterations with ``n_obs`` observations."""
    mode = Mode.parse(mode)
    if mode.partial:
        return n_init * n_obs + t
    return n_obs * (n_init + t)


def load_config(doc: dict | str) -> tuple:
    """Parse a run configuration; returns ``(base BoConfig, modes, seeds, schedule)``."""
    if isinstance(doc, str):
        doc = json.loads(doc)
    allowed = {"modes", "mode", "beta", "n_init", "iterations", "multistart_count",
               "ascent_steps", "seed", "seeds", "n_init_new", "schedule"}
    extra = set(doc) - allowed
    if extra:
        raise ValueError(f"unknown config field(s) {sorted(extra)}")
    modes = doc.get("modes") or [doc.get("mode", Mode.SUM_PARTIAL.value)]
    modes = [Mode.parse(m) for m in modes]
    seeds = doc.get("seeds")
    if seeds is None:
        seeds = [doc.get("seed", 0)]
    kwargs = {k: doc[k] for k in ("beta", "n_init", "iterations", "multistart_count",
                                  "ascent_steps", "n_init_new") if k in doc}
    base = BoConfig(mode=modes[0], seed=int(seeds[0]), **kwargs)
    schedule = doc.get("schedule")
    if schedule is not None:
        schedule = {int(t): list(v) for t, v in schedule.items()}
    return base, modes, [int(s) for s in seeds], schedule
