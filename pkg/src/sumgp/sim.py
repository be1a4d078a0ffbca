"""Analytic heightmap simulator for pairwise stacking scenes.

A scene places a *top* object on a *bottom* object.  Both are drawn as Gaussian
bumps on a top-down height grid.  The final surface depends on the material
parameters through a closed-form contact model:

* a rigid or deformable top presses a dent of depth ``d = c * m / E`` into a
  deformable bottom (``d = 0`` for a rigid bottom), capped at 80% of the bottom
  height; a deformable top presses with a fixed 0.3 kg load;
* the bottom's Poisson's ratio raises (or, if negative, lowers) a ring around
  the contact;
* a deformable top slumps: softer tops are flatter and wider;
* the visible surface is the pointwise max of the deformed bottom and the top
  lifted onto the bottom surface under its centroid.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .space import (MASS_BOUNDS, POISSON_BOUNDS, YOUNGS_BOUNDS, MaterialClass,
                    OutOfBoundsError, ParameterError, ParameterSpace, slice_params)

# m * Pa / kg; a 2 kg load on E = 1000 dents 100 mm, 0.01 kg on E = 10000 dents 0.05 mm
LOAD_COEFF = 50.0
MAX_DENT_FRACTION = 0.8
DEFORMABLE_TOP_LOAD = 0.3
E_MAX = YOUNGS_BOUNDS[1]
RING_OFFSET = 1.5
RING_WIDTH = 0.5

GRID_WIDTH = 64
GRID_HEIGHT = 48
CELL_SIZE = 0.005


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class Heightmap:
    """Row-major height grid; ``values[row, col]`` is the height at cell
    center ``((col + 0.5) * cell_size, (row + 0.5) * cell_size)``."""

    values: np.ndarray
    cell_size: float = CELL_SIZE

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 2 or v.shape[0] == 0 or v.shape[1] == 0:
            raise SimulationError(f"heightmap must be a non-empty 2-d grid, got {v.shape}")
        if not np.all(np.isfinite(v)) or v.min() < 0.0:
            raise SimulationError("heightmap values must be finite and >= 0")
        if not self.cell_size > 0:
            raise SimulationError("cell_size must be positive")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "cell_size", float(self.cell_size))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def area(self) -> float:
        return self.width * self.height * self.cell_size ** 2

    def __eq__(self, other):
        if not isinstance(other, Heightmap):
            return NotImplemented
        return self.cell_size == other.cell_size and np.array_equal(self.values, other.values)

    __hash__ = None

    def dumps(self) -> str:
        """Text form: ``HMAP <width> <height> <cell_size>`` then one row per line."""
        buf = io.StringIO()
        buf.write(f"HMAP {self.width} {self.height} {self.cell_size!r}\n")
        for row in self.values:
            buf.write(" ".join(repr(float(v)) for v in row))
            buf.write("\n")
        return buf.getvalue()

    @classmethod
    def loads(cls, text: str) -> "Heightmap":
        lines = text.strip().splitlines()
        head = lines[0].split()
        if len(head) != 4 or head[0] != "HMAP":
            raise SimulationError(f"not a heightmap header: {lines[0]!r}")
        width, height, cell = int(head[1]), int(head[2]), float(head[3])
        rows = [[float(t) for t in line.split()] for line in lines[1:]]
        if len(rows) != height or any(len(r) != width for r in rows):
            raise SimulationError(f"heightmap body does not match {width}x{height}")
        return cls(np.array(rows), cell)


@dataclass(frozen=True)
class Footprint:
    """Fixed geometry of one object: Gaussian radius and nominal height (m)."""

    radius: float
    height: float
    material_class: MaterialClass

    def __post_init__(self):
        if not (self.radius > 0 and self.height > 0):
            raise SimulationError("footprint radius and height must be positive")
        object.__setattr__(self, "material_class", MaterialClass(self.material_class))

    @property
    def deformable(self) -> bool:
        return self.material_class is MaterialClass.DEFORMABLE

    @property
    def size(self) -> int:
        return 2 if self.deformable else 1


@dataclass(frozen=True)
class Grid:
    width: int = GRID_WIDTH
    height: int = GRID_HEIGHT
    cell_size: float = CELL_SIZE

    def coords(self):
        xs = (np.arange(self.width) + 0.5) * self.cell_size
        ys = (np.arange(self.height) + 0.5) * self.cell_size
        return np.meshgrid(xs, ys)

    @property
    def center(self) -> tuple:
        return (0.5 * self.width * self.cell_size, 0.5 * self.height * self.cell_size)


@dataclass(frozen=True)
class SceneSpec:
    bottom_id: int
    top_id: int
    bottom: Footprint
    top: Footprint
    center: tuple = None
    action: tuple = (0.0, 0.0)
    grid: Grid = field(default_factory=Grid)

    def __post_init__(self):
        if self.bottom_id == self.top_id:
            raise SimulationError("bottom and top must be different objects")
        if self.center is None:
            object.__setattr__(self, "center", self.grid.center)
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "action", tuple(float(a) for a in self.action))

    @property
    def k(self) -> tuple:
        return (self.bottom_id, self.top_id)

    @property
    def top_center(self) -> tuple:
        return (self.center[0] + self.action[0], self.center[1] + self.action[1])

    def to_dict(self) -> dict:
        return {
            "bottom_id": self.bottom_id,
            "top_id": self.top_id,
            "bottom": {"radius": self.bottom.radius, "height": self.bottom.height,
                       "class": self.bottom.material_class.value},
            "top": {"radius": self.top.radius, "height": self.top.height,
                    "class": self.top.material_class.value},
            "center": list(self.center),
            "action": list(self.action),
            "grid": {"width": self.grid.width, "height": self.grid.height,
                     "cell_size": self.grid.cell_size},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SceneSpec":
        def fp(d):
            return Footprint(float(d["radius"]), float(d["height"]), d["class"])
        grid = Grid(**doc["grid"]) if "grid" in doc else Grid()
        return cls(int(doc["bottom_id"]), int(doc["top_id"]), fp(doc["bottom"]), fp(doc["top"]),
                   tuple(doc.get("center") or grid.center), tuple(doc.get("action", (0, 0))),
                   grid)


@dataclass(frozen=True)
class Observation:
    scene: SceneSpec
    observed: Heightmap

    @property
    def k(self) -> tuple:
        return self.scene.k


def render_footprint(grid: Grid, center, radius: float, amplitude: float) -> np.ndarray:
    """``amplitude * exp(-|p - center|^2 / (2 radius^2))`` sampled at cell centers."""
    if amplitude < 0:
        raise SimulationError("amplitude must be >= 0")
    X, Y = grid.coords()
    r2 = (X - center[0]) ** 2 + (Y - center[1]) ** 2
    return amplitude * np.exp(-r2 / (2.0 * radius * radius))


def _check_block(fp: Footprint, block, role):
    block = np.asarray(block, dtype=float)
    if fp.deformable:
        bounds = (("youngs_modulus", YOUNGS_BOUNDS), ("poissons_ratio", POISSON_BOUNDS))
    else:
        bounds = (("mass", MASS_BOUNDS),)
    for j, (name, (lo, hi)) in enumerate(bounds):
        if not lo <= block[j] <= hi:
            raise OutOfBoundsError(j, f"{role}.{name}", float(block[j]), lo, hi)
    return block


def split_theta(scene: SceneSpec, theta_k):
    theta_k = np.asarray(theta_k, dtype=float).reshape(-1)
    nb, nt = scene.bottom.size, scene.top.size
    if theta_k.size != nb + nt:
        raise ParameterError(f"scene needs {nb + nt} parameters, got {theta_k.size}")
    return (_check_block(scene.bottom, theta_k[:nb], "bottom"),
            _check_block(scene.top, theta_k[nb:], "top"))


def indentation_depth(scene: SceneSpec, theta_k) -> float:
    bottom, top = split_theta(scene, theta_k)
    if not scene.bottom.deformable:
        return 0.0
    load = DEFORMABLE_TOP_LOAD if scene.top.deformable else top[0]
    return min(LOAD_COEFF * load / bottom[0], MAX_DENT_FRACTION * scene.bottom.height)


def top_shape(scene: SceneSpec, theta_k) -> tuple:
    """``(amplitude, radius)`` of the top object after slumping."""
    _, top = split_theta(scene, theta_k)
    if not scene.top.deformable:
        return scene.top.height, scene.top.radius
    stiffness = top[0] / E_MAX
    return scene.top.height * stiffness, scene.top.radius * (1.0 + 0.5 * (1.0 - stiffness))


def surrogate_simulate(scene: SceneSpec, theta_k) -> Heightmap:
    """Final heightmap of ``scene`` for parameters ordered (bottom block, top block)."""
    bottom, _ = split_theta(scene, theta_k)
    grid = scene.grid
    d = indentation_depth(scene, theta_k)
    amp_t, rad_t = top_shape(scene, theta_k)
    ct = scene.top_center
    X, Y = grid.coords()
    rho = np.sqrt((X - ct[0]) ** 2 + (Y - ct[1]) ** 2)

    base = render_footprint(grid, scene.center, scene.bottom.radius, scene.bottom.height)
    dent = d * np.exp(-rho ** 2 / (2.0 * rad_t ** 2))
    nu = bottom[1] if scene.bottom.deformable else 0.0
    ring_width = RING_WIDTH * rad_t
    ring = nu * d * np.exp(-(rho - RING_OFFSET * rad_t) ** 2 / (2.0 * ring_width ** 2))
    deformed = np.maximum(base - dent + ring, 0.0)

    # bottom surface under the top centroid
    b0 = scene.bottom.height * math.exp(
        -((ct[0] - scene.center[0]) ** 2 + (ct[1] - scene.center[1]) ** 2)
        / (2.0 * scene.bottom.radius ** 2))
    r0 = nu * d * math.exp(-(RING_OFFSET * rad_t) ** 2 / (2.0 * ring_width ** 2))
    lift = max(b0 - d + r0, 0.0)

    profile = np.exp(-rho ** 2 / (2.0 * rad_t ** 2))
    top = (lift + amp_t) * profile
    return Heightmap(np.maximum(deformed, top), grid.cell_size)


def reward(observed: Heightmap, predicted: Heightmap) -> float:
    """Negative area-weighted L1 distance between two heightmaps."""
    if observed.values.shape != predicted.values.shape or observed.cell_size != predicted.cell_size:
        raise SimulationError(
            f"heightmap grids differ: {observed.values.shape}@{observed.cell_size} vs "
            f"{predicted.values.shape}@{predicted.cell_size}"
        )
    return -float(np.abs(observed.values - predicted.values).sum()) * observed.cell_size ** 2


def make_dataset(scenes, space: ParameterSpace, theta_star, noise: float = 0.0,
                 noise_seed=0, simulator=surrogate_simulate) -> list:
    """Observations generated from ``theta_star``.

    With ``noise > 0`` each cell gets independent uniform noise in
    ``[-noise, noise]``, clipped so heights stay non-negative.
    """
    theta_star = space.validate(theta_star)
    rng = np.random.default_rng(noise_seed)
    out = []
    for scene in scenes:
        hm = simulator(scene, slice_params(space, theta_star, scene.k))
        if noise > 0:
            v = hm.values + rng.uniform(-noise, noise, size=hm.values.shape)
            hm = Heightmap(np.maximum(v, 0.0), hm.cell_size)
        out.append(Observation(scene, hm))
    return out


def observation_to_dict(obs: Observation) -> dict:
    return {"scene": obs.scene.to_dict(), "k": list(obs.k)}


def dumps_scenes(scenes) -> str:
    return json.dumps([s.to_dict() for s in scenes], indent=2)
