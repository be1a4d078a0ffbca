"""Material-parameter spaces over a set of objects.

A parameter vector ``theta`` is the flat concatenation of every object's
parameter block, in object order.  Rigid objects carry a single mass, deformable
objects carry a Young's modulus and a Poisson's ratio.  Each observation only
depends on the blocks of the objects it contains, which is what ``slice_params``
extracts.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

MASS_BOUNDS = (0.01, 2.0)
YOUNGS_BOUNDS = (1000.0, 10000.0)
POISSON_BOUNDS = (-0.5, 0.5)

# Dimensions normalized on a log10 scale.
LOG_DIMS = frozenset({"youngs_modulus"})


class ParameterError(ValueError):
    """Invalid parameter vector, bounds or object reference."""


class UnknownObjectError(ParameterError):
    def __init__(self, object_id):
        super().__init__(f"unknown object id {object_id!r}")
        self.object_id = object_id


class OutOfBoundsError(ParameterError):
    def __init__(self, index, name, value, lo, hi):
        super().__init__(
            f"dimension {index} ({name}) = {value!r} outside [{lo}, {hi}]"
        )
        self.index = index
        self.name = name
        self.value = value


class MaterialClass(str, enum.Enum):
    RIGID = "rigid"
    DEFORMABLE = "deformable"


DEFAULT_DIMS = {
    MaterialClass.RIGID: (("mass", *MASS_BOUNDS),),
    MaterialClass.DEFORMABLE: (
        ("youngs_modulus", *YOUNGS_BOUNDS),
        ("poissons_ratio", *POISSON_BOUNDS),
    ),
}


@dataclass(frozen=True)
class ObjectSpec:
    id: int
    name: str
    material_class: MaterialClass
    dims: tuple = ()

    def __post_init__(self):
        cls = MaterialClass(self.material_class)
        object.__setattr__(self, "material_class", cls)
        dims = tuple((str(n), float(lo), float(hi)) for n, lo, hi in
                     (self.dims or DEFAULT_DIMS[cls]))
        expected = 1 if cls is MaterialClass.RIGID else 2
        if len(dims) != expected:
            raise ParameterError(
                f"{cls.value} object {self.name!r} needs {expected} dims, got {len(dims)}"
            )
        for name, lo, hi in dims:
            if not lo < hi:
                raise ParameterError(f"{self.name}.{name}: lower bound {lo} >= upper {hi}")
            if name in LOG_DIMS and lo <= 0:
                raise ParameterError(f"{self.name}.{name}: log-scaled bound must be > 0")
        object.__setattr__(self, "dims", dims)

    @property
    def size(self) -> int:
        return len(self.dims)

    @classmethod
    def rigid(cls, id, name, mass=MASS_BOUNDS):
        return cls(id, name, MaterialClass.RIGID, (("mass", *mass),))

    @classmethod
    def deformable(cls, id, name, youngs=YOUNGS_BOUNDS, poisson=POISSON_BOUNDS):
        return cls(id, name, MaterialClass.DEFORMABLE,
                   (("youngs_modulus", *youngs), ("poissons_ratio", *poisson)))


@dataclass(frozen=True)
class ParameterSpace:
    objects: tuple
    offsets: tuple = field(init=False)
    total_dims: int = field(init=False)

    def __post_init__(self):
        objects = tuple(self.objects)
        ids = [o.id for o in objects]
        if len(set(ids)) != len(ids):
            raise ParameterError(f"duplicate object ids in {ids}")
        if not objects:
            raise ParameterError("parameter space needs at least one object")
        offsets, acc = [], 0
        for o in objects:
            offsets.append(acc)
            acc += o.size
        object.__setattr__(self, "objects", objects)
        object.__setattr__(self, "offsets", tuple(offsets))
        object.__setattr__(self, "total_dims", acc)
        object.__setattr__(self, "_index", {o.id: i for i, o in enumerate(objects)})
        lo = np.array([d[1] for o in objects for d in o.dims])
        hi = np.array([d[2] for o in objects for d in o.dims])
        log = np.array([d[0] in LOG_DIMS for o in objects for d in o.dims])
        object.__setattr__(self, "_lo", lo)
        object.__setattr__(self, "_hi", hi)
        object.__setattr__(self, "_log", log)
        # affine map is applied to log10 of the log-scaled dims
        object.__setattr__(self, "_tlo", np.where(log, np.log10(np.where(log, lo, 1.0)), lo))
        object.__setattr__(self, "_thi", np.where(log, np.log10(np.where(log, hi, 1.0)), hi))

    @property
    def ids(self) -> tuple:
        return tuple(o.id for o in self.objects)

    @property
    def lower(self) -> np.ndarray:
        return self._lo.copy()

    @property
    def upper(self) -> np.ndarray:
        return self._hi.copy()

    @property
    def dim_names(self) -> list:
        return [f"{o.name}.{d[0]}" for o in self.objects for d in o.dims]

    def object(self, object_id) -> ObjectSpec:
        return self.objects[self.position(object_id)]

    def position(self, object_id) -> int:
        try:
            return self._index[object_id]
        except (KeyError, TypeError):
            raise UnknownObjectError(object_id) from None

    def block(self, object_id) -> range:
        """Indices of ``object_id``'s parameters in the flat vector."""
        i = self.position(object_id)
        start = self.offsets[i]
        return range(start, start + self.objects[i].size)

    def indices(self, k: Sequence[int]) -> np.ndarray:
        """Flat indices of the subspace for subset ``k``, in ``k``'s order."""
        k = check_subset(self, k)
        return np.array([j for oid in k for j in self.block(oid)], dtype=int)

    def subspace(self, object_ids: Iterable[int]) -> "ParameterSpace":
        """Space restricted to ``object_ids``, keeping this space's object order."""
        wanted = set(object_ids)
        for oid in wanted:
            self.position(oid)
        return ParameterSpace(tuple(o for o in self.objects if o.id in wanted))

    def validate(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.total_dims,):
            raise ParameterError(
                f"expected a vector of length {self.total_dims}, got shape {theta.shape}"
            )
        bad = np.flatnonzero(~((theta >= self._lo) & (theta <= self._hi)))
        if bad.size:
            j = int(bad[0])
            raise OutOfBoundsError(j, self.dim_names[j], float(theta[j]),
                                   self._lo[j], self._hi[j])
        return theta

    def midpoint(self) -> np.ndarray:
        return denormalize(self, np.full(self.total_dims, 0.5))

    # JSON ---------------------------------------------------------------

    def to_dict(self) -> dict:
        objs = []
        for o in self.objects:
            objs.append({
                "id": o.id,
                "name": o.name,
                "class": o.material_class.value,
                "bounds": {name: [lo, hi] for name, lo, hi in o.dims},
            })
        return {"objects": objs}

    @classmethod
    def from_dict(cls, doc: dict) -> "ParameterSpace":
        _reject_unknown(doc, {"objects"}, "parameter space")
        objects = []
        for entry in doc["objects"]:
            _reject_unknown(entry, {"id", "name", "class", "bounds"}, "object")
            mclass = MaterialClass(entry["class"])
            expected = [d[0] for d in DEFAULT_DIMS[mclass]]
            bounds = entry.get("bounds", {})
            _reject_unknown(bounds, set(expected), f"bounds of {entry.get('name')!r}")
            dims = []
            for (name, lo, hi) in DEFAULT_DIMS[mclass]:
                b = bounds.get(name, (lo, hi))
                if len(b) != 2:
                    raise ParameterError(f"bounds for {name} must be [lower, upper]")
                dims.append((name, float(b[0]), float(b[1])))
            objects.append(ObjectSpec(int(entry["id"]), str(entry["name"]), mclass, tuple(dims)))
        return cls(tuple(objects))

    @classmethod
    def from_json(cls, text: str) -> "ParameterSpace":
        return cls.from_dict(json.loads(text))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _reject_unknown(doc, allowed, what):
    if not isinstance(doc, dict):
        raise ParameterError(f"{what}: expected an object, got {type(doc).__name__}")
    extra = set(doc) - set(allowed)
    if extra:
        raise ParameterError(f"{what}: unknown field(s) {sorted(extra)}")


def check_subset(space: ParameterSpace, k) -> tuple:
    k = tuple(k)
    if not k:
        raise ParameterError("object subset must be non-empty")
    if len(set(k)) != len(k):
        raise ParameterError(f"object subset has repeated ids: {k}")
    for oid in k:
        space.position(oid)
    return k


def slice_params(space: ParameterSpace, theta, k) -> np.ndarray:
    """Parameters of the objects in ``k``, concatenated in ``k``'s order."""
    idx = space.indices(k)
    theta = np.asarray(theta, dtype=float)
    if theta.shape[-1] != space.total_dims:
        raise ParameterError(
            f"expected a vector of length {space.total_dims}, got {theta.shape[-1]}"
        )
    return theta[..., idx]


def scatter_params(space: ParameterSpace, sub, k, base) -> np.ndarray:
    idx = space.indices(k)
    sub = np.asarray(sub, dtype=float)
    if sub.shape != (idx.size,):
        raise ParameterError(f"subspace vector must have length {idx.size}, got {sub.shape}")
    out = np.array(base, dtype=float)
    if out.shape != (space.total_dims,):
        raise ParameterError(f"base must have length {space.total_dims}, got {out.shape}")
    out[idx] = sub
    return out


def normalize(space: ParameterSpace, theta) -> np.ndarray:
    """Map physical parameters into the unit cube (log10 for Young's modulus)."""
    theta = np.asarray(theta, dtype=float)
    if theta.ndim == 1:
        space.validate(theta)
    t = np.where(space._log, np.log10(np.where(space._log, theta, 1.0)), theta)
    return (t - space._tlo) / (space._thi - space._tlo)


def denormalize(space: ParameterSpace, u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.shape[-1] != space.total_dims:
        raise ParameterError(f"expected a vector of length {space.total_dims}, got {u.shape[-1]}")
    bad = np.argwhere(~((u >= 0.0) & (u <= 1.0)))
    if bad.size:
        j = int(bad[0][-1])
        raise OutOfBoundsError(j, space.dim_names[j], float(u[tuple(bad[0])]), 0.0, 1.0)
    t = space._tlo + u * (space._thi - space._tlo)
    theta = np.where(space._log, 10.0 ** t, t)
    # exact endpoints despite pow rounding
    return np.clip(theta, space._lo, space._hi)


def sample_uniform(space: ParameterSpace, rng_seed, n: int) -> list:
    """``n`` i.i.d. draws, uniform in physical units within the bounds."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(rng_seed)
    u = rng.random((n, space.total_dims))
    return list(space._lo + u * (space._hi - space._lo))
