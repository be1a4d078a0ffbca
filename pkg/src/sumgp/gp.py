"""Exact Gaussian-process regression on the unit cube.

Matérn 5/2 kernel with one lengthscale per input dimension.  Targets are
standardized before conditioning; ``posterior`` reports mean and variance in the
original target units.  Hyperparameters live in standardized-target units and
are fitted by maximizing the log marginal likelihood over log-parameters.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize

SQRT5 = math.sqrt(5.0)
LOG_2PI = math.log(2.0 * math.pi)

JITTER_FLOOR = 1e-8
JITTER_STEPS = (0.0, 1e-8, 1e-6, 1e-4)

LENGTHSCALE_BOUNDS = (0.01, 10.0)
SIGNAL_BOUNDS = (1e-4, 1e4)
NOISE_BOUNDS = (JITTER_FLOOR, 1.0)

DEFAULT_LENGTHSCALE = 0.5
DEFAULT_SIGNAL = 1.0
DEFAULT_NOISE = 1e-6

N_STARTS = 8


class GpError(RuntimeError):
    pass


class FactorizationError(GpError):
    """Covariance matrix not positive definite even after jitter escalation."""


@dataclass(frozen=True)
class GpHyperparams:
    lengthscales: np.ndarray
    signal_variance: float = DEFAULT_SIGNAL
    noise_variance: float = DEFAULT_NOISE

    def __post_init__(self):
        ls = np.array(self.lengthscales, dtype=float).reshape(-1)
        ls.setflags(write=False)
        if np.any(ls <= 0):
            raise ValueError("lengthscales must be positive")
        if not self.signal_variance > 0:
            raise ValueError("signal_variance must be positive")
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "signal_variance", float(self.signal_variance))
        object.__setattr__(self, "noise_variance",
                           max(float(self.noise_variance), JITTER_FLOOR))

    @property
    def dim(self) -> int:
        return self.lengthscales.size

    @classmethod
    def default(cls, dim: int) -> "GpHyperparams":
        return cls(np.full(dim, DEFAULT_LENGTHSCALE), DEFAULT_SIGNAL, DEFAULT_NOISE)

    def to_log(self) -> np.ndarray:
        """Log-parameter vector ``(log l_1..l_d, log sf2, log sn2)``."""
        return np.concatenate([np.log(self.lengthscales),
                               [math.log(self.signal_variance), math.log(self.noise_variance)]])

    @classmethod
    def from_log(cls, eta) -> "GpHyperparams":
        eta = np.asarray(eta, dtype=float)
        return cls(np.exp(eta[:-2]), math.exp(eta[-2]), math.exp(eta[-1]))

    def __eq__(self, other):
        if not isinstance(other, GpHyperparams):
            return NotImplemented
        return (np.array_equal(self.lengthscales, other.lengthscales)
                and self.signal_variance == other.signal_variance
                and self.noise_variance == other.noise_variance)

    __hash__ = None


def log_bounds(dim: int) -> list:
    b = [tuple(map(math.log, LENGTHSCALE_BOUNDS))] * dim
    b.append(tuple(map(math.log, SIGNAL_BOUNDS)))
    b.append(tuple(map(math.log, NOISE_BOUNDS)))
    return b


# Kernel -------------------------------------------------------------------

def _scaled_sqdist(X1, X2, lengthscales):
    A = X1 / lengthscales
    B = X2 / lengthscales
    d2 = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d2, 0.0)


def matern52(x1, x2, hp: GpHyperparams) -> float:
    x1 = np.asarray(x1, dtype=float).reshape(-1)
    x2 = np.asarray(x2, dtype=float).reshape(-1)
    if x1.size != hp.dim or x2.size != hp.dim:
        raise ValueError(
            f"points of dimension {x1.size} and {x2.size} for a {hp.dim}-d kernel"
        )
    r = math.sqrt(float(np.sum(((x1 - x2) / hp.lengthscales) ** 2)))
    return hp.signal_variance * (1.0 + SQRT5 * r + 5.0 * r * r / 3.0) * math.exp(-SQRT5 * r)


def matern52_matrix(X1, X2, hp: GpHyperparams) -> np.ndarray:
    r = np.sqrt(_scaled_sqdist(X1, X2, hp.lengthscales))
    return hp.signal_variance * (1.0 + SQRT5 * r + (5.0 / 3.0) * r * r) * np.exp(-SQRT5 * r)


def _gram(X, hp):
    """Kernel matrix with the exact diagonal (no rounding from the distance trick)."""
    K = matern52_matrix(X, X, hp)
    np.fill_diagonal(K, hp.signal_variance)
    return K


def _cholesky(K, noise):
    n = K.shape[0]
    for extra in JITTER_STEPS:
        try:
            L = linalg.cholesky(K + (noise + extra) * np.eye(n), lower=True,
                                check_finite=False)
        except linalg.LinAlgError:
            continue
        return L, noise + extra
    raise FactorizationError(f"covariance of {n} points not positive definite")


# Data and model -------------------------------------------------------------

@dataclass(frozen=True)
class GpData:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        X = np.array(self.inputs, dtype=float)
        y = np.array(self.targets, dtype=float).reshape(-1)
        if X.ndim == 1:
            X = X.reshape(y.size, -1) if y.size else X.reshape(0, X.size or 0)
        if X.shape[0] != y.size:
            raise ValueError(f"{X.shape[0]} inputs but {y.size} targets")
        if X.size and (X.min() < 0.0 or X.max() > 1.0):
            raise ValueError("GP inputs must lie in the unit cube")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "targets", y)

    @classmethod
    def empty(cls, dim: int) -> "GpData":
        return cls(np.empty((0, dim)), np.empty(0))

    def __len__(self):
        return self.targets.size

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def append(self, x, y) -> "GpData":
        x = np.asarray(x, dtype=float).reshape(1, -1)
        return GpData(np.vstack([self.inputs, x]), np.append(self.targets, float(y)))


def standardization(targets) -> tuple:
    """``(mean, scale)`` used to standardize targets.

    The scale is the standard deviation.  A single target keeps the zero
    prior mean and is scaled by ``|y|`` so its sign survives; constant
    targets fall back to ``|mean|`` and then to 1.
    """
    y = np.asarray(targets, dtype=float)
    if y.size == 0:
        return 0.0, 1.0
    if y.size == 1:
        return 0.0, abs(float(y[0])) or 1.0
    mean = float(y.mean())
    std = float(y.std())
    if std > 0.0:
        return mean, std
    if mean != 0.0:
        return mean, abs(mean)
    return mean, 1.0


@dataclass(frozen=True)
class GpModel:
    data: GpData
    hp: GpHyperparams
    chol: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    target_mean: float = 0.0
    target_scale: float = 1.0
    jitter: float = JITTER_FLOOR
    chol_inv: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.chol_inv is None:
            inv = _tri_inverse(self.chol)
            object.__setattr__(self, "chol_inv", inv)

    @property
    def dim(self) -> int:
        return self.hp.dim

    @property
    def n(self) -> int:
        return len(self.data)

    def to_dict(self) -> dict:
        return {
            "inputs": self.data.inputs.tolist(),
            "targets": self.data.targets.tolist(),
            "lengthscales": self.hp.lengthscales.tolist(),
            "signal_variance": self.hp.signal_variance,
            "noise_variance": self.hp.noise_variance,
            "target_mean": self.target_mean,
            "target_scale": self.target_scale,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict())


def _standardized(data: GpData):
    mean, scale = standardization(data.targets)
    return (data.targets - mean) / scale, mean, scale


def _tri_inverse(L):
    if L.shape[0] == 0:
        inv = np.empty((0, 0))
    else:
        inv = linalg.solve_triangular(L, np.eye(L.shape[0]), lower=True, check_finite=False)
    inv.setflags(write=False)
    return inv


def _freeze(*arrays):
    for a in arrays:
        a.setflags(write=False)


def condition(data: GpData, hp: GpHyperparams) -> GpModel:
    """Factorize the covariance of ``data`` under ``hp``."""
    if hp.dim != data.dim:
        raise ValueError(f"{hp.dim}-d hyperparameters for {data.dim}-d data")
    y, mean, scale = _standardized(data)
    if len(data) == 0:
        L = np.empty((0, 0))
        alpha = np.empty(0)
        noise = hp.noise_variance
    else:
        L, noise = _cholesky(_gram(data.inputs, hp), hp.noise_variance)
        alpha = linalg.cho_solve((L, True), y)
    _freeze(L, alpha)
    return GpModel(data, hp, L, alpha, mean, scale, noise)


def empty_model(dim: int, hp: GpHyperparams | None = None) -> GpModel:
    return condition(GpData.empty(dim), hp or GpHyperparams.default(dim))


def add_point(model: GpModel, x, y) -> GpModel:
    """Append one observation, extending the Cholesky factor by one row.

    Hyperparameters are kept; the factor is rebuilt from scratch if the
    extension is numerically unsafe.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    data = model.data.append(x, y)
    n = model.n
    ys, mean, scale = _standardized(data)
    if n == 0:
        return condition(data, model.hp)
    kx = matern52_matrix(model.data.inputs, x[None, :], model.hp)[:, 0]
    c = linalg.solve_triangular(model.chol, kx, lower=True)
    d2 = model.hp.signal_variance + model.jitter - c @ c
    if d2 <= 1e-10 * model.hp.signal_variance:
        return condition(data, model.hp)
    L = np.zeros((n + 1, n + 1))
    L[:n, :n] = model.chol
    L[n, :n] = c
    L[n, n] = math.sqrt(d2)
    alpha = linalg.cho_solve((L, True), ys)
    _freeze(L, alpha)
    return GpModel(data, model.hp, L, alpha, mean, scale, model.jitter)


# Inference ------------------------------------------------------------------

NEGATIVE_VARIANCE_COUNT = 0


def posterior_batch(model: GpModel, X) -> tuple:
    """Posterior mean and variance at each row of ``X``, in target units."""
    global NEGATIVE_VARIANCE_COUNT
    X = np.atleast_2d(np.asarray(X, dtype=float))
    sf2 = model.hp.signal_variance
    if model.n == 0:
        m = X.shape[0]
        return (np.full(m, model.target_mean),
                np.full(m, sf2 * model.target_scale ** 2))
    Ks = matern52_matrix(model.data.inputs, X, model.hp)
    mean = model.target_mean + model.target_scale * (Ks.T @ model.alpha)
    V = model.chol_inv @ Ks
    var = sf2 - np.einsum("ij,ij->j", V, V)
    neg = var < -1e-10
    if neg.any():
        NEGATIVE_VARIANCE_COUNT += int(neg.sum())
    var = np.maximum(var, 0.0) * model.target_scale ** 2
    return mean, var


def posterior(model: GpModel, x) -> tuple:
    x = np.asarray(x, dtype=float).reshape(1, -1)
    if x.shape[1] != model.dim:
        raise ValueError(f"query of dimension {x.shape[1]} for a {model.dim}-d GP")
    m, v = posterior_batch(model, x)
    return float(m[0]), float(v[0])


# Marginal likelihood --------------------------------------------------------

class _LmlObjective:
    """Log marginal likelihood of fixed data as a function of hyperparameters."""

    def __init__(self, data: GpData):
        if len(data) == 0:
            raise ValueError("log marginal likelihood needs at least one point")
        self.y, _, _ = _standardized(data)
        X = data.inputs
        self.n = self.y.size
        self.sqdiff = (X[:, None, :] - X[None, :, :]) ** 2
        self.eye = np.eye(self.n)

    def __call__(self, hp: GpHyperparams, grad: bool = True):
        y, n = self.y, self.n
        inv_l2 = 1.0 / hp.lengthscales ** 2
        d2 = self.sqdiff @ inv_l2
        r = np.sqrt(d2)
        e = np.exp(-SQRT5 * r)
        Kf = hp.signal_variance * (1.0 + SQRT5 * r + (5.0 / 3.0) * d2) * e
        L, _ = _cholesky(Kf, hp.noise_variance)
        alpha = linalg.cho_solve((L, True), y, check_finite=False)
        lml = -0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * n * LOG_2PI
        if not grad:
            return lml, None
        Kinv = linalg.cho_solve((L, True), self.eye, check_finite=False)
        W = np.outer(alpha, alpha) - Kinv
        # dk/dlog(l_j) = sf2 * 5/3 * (1 + sqrt5 r) e^{-sqrt5 r} * (dx_j / l_j)^2
        base = hp.signal_variance * (5.0 / 3.0) * (1.0 + SQRT5 * r) * e
        g = np.empty(hp.dim + 2)
        g[:-2] = 0.5 * np.einsum("ab,abj->j", W * base, self.sqdiff) * inv_l2
        g[-2] = 0.5 * np.sum(W * Kf)
        g[-1] = 0.5 * hp.noise_variance * np.trace(W)
        return lml, g


def _lml_parts(data: GpData, hp: GpHyperparams, grad: bool):
    return _LmlObjective(data)(hp, grad)


def log_marginal_likelihood(data: GpData, hp: GpHyperparams) -> float:
    return float(_lml_parts(data, hp, grad=False)[0])


def lml_gradient(data: GpData, hp: GpHyperparams) -> np.ndarray:
    """Gradient with respect to ``hp.to_log()``."""
    return _lml_parts(data, hp, grad=True)[1]


@dataclass(frozen=True)
class FitResult:
    hp: GpHyperparams
    lml: float
    failed: bool = False


def fit_hyperparams(data: GpData, rng_seed=0) -> GpHyperparams:
    return fit_hyperparams_detailed(data, rng_seed).hp


def fit_hyperparams_detailed(data: GpData, rng_seed=0) -> FitResult:
    """Multi-start L-BFGS-B ascent of the log marginal likelihood.

    One start at the defaults plus ``N_STARTS - 1`` log-uniform draws inside
    the bounds.  Returns the defaults, flagged, if no start can be factorized.
    """
    dim = data.dim
    default = GpHyperparams.default(dim)
    if len(data) < 2:
        return FitResult(default, float("nan"))
    bounds = log_bounds(dim)
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    rng = np.random.default_rng(rng_seed)
    starts = [default.to_log()] + list(rng.uniform(lo, hi, size=(N_STARTS - 1, dim + 2)))

    objective = _LmlObjective(data)

    def negative(eta):
        try:
            lml, g = objective(GpHyperparams.from_log(eta))
        except FactorizationError:
            return 1e25, np.zeros_like(eta)
        if not np.isfinite(lml):
            return 1e25, np.zeros_like(eta)
        return -lml, -g

    best = None
    for eta0 in starts:
        eta0 = np.clip(eta0, lo, hi)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res = optimize.minimize(negative, eta0, jac=True, method="L-BFGS-B",
                                    bounds=bounds, options={"maxiter": 200})
        val = -float(res.fun)
        if val <= -1e25 or not np.isfinite(val):
            continue
        if best is None or val > best[1]:
            best = (np.clip(res.x, lo, hi), val)
    if best is None:
        return FitResult(default, float("nan"), failed=True)
    return FitResult(GpHyperparams.from_log(best[0]), best[1])
