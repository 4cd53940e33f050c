"""I.i.d. balanced random environments on a finite lattice box.

An environment assigns a positive diagonal matrix ``diag(w_1(x), ..., w_d(x))``
to every site ``x`` of a box.  The walk jumps to ``x +- e_i`` with probability
``w_i(x) / (2 tr w(x))``.

Site weights are generated from counter-based variates keyed by
``(seed, coordinate index, x_1, ..., x_d)``, so a site's weights never depend
on the box that contains it.
"""
from __future__ import annotations

import itertools
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import rng
from .errors import ConfigurationError, DomainError

FAMILIES = ("constant", "uniform", "two_point")
FAMILY_CODES = {name: code for code, name in enumerate(FAMILIES)}

_DUMP_MAGIC = b"BHL1"
_DUMP_HEADER = struct.Struct("<4sB3xQ3h3H4x")
assert _DUMP_HEADER.size == 32


# --------------------------------------------------------------------------- laws


@dataclass(frozen=True)
class EnvironmentLaw:
    """Per-coordinate weight distribution plus the ellipticity floor.

    Parameters
    ----------
    dimension : int
        Lattice dimension, 1 to 3.
    family : str
        ``"constant"`` (``params = (c,)`` or one value per coordinate),
        ``"uniform"`` (``params = (a, b)``) or ``"two_point"``
        (``params = (v1, v2, p)`` with ``P(w_i = v1) = p``).
    kappa : float, optional
        Declared ellipticity floor.  Must not exceed the support infimum of
        ``min_i w_i / (2 tr w)``; defaults to that infimum.
    """

    dimension: int
    family: str
    params: tuple
    kappa: float = None

    def __post_init__(self):
        d = self.dimension
        if d not in (1, 2, 3):
            raise ConfigurationError(f"dimension must be 1, 2 or 3, got {d}")
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown weight family {self.family!r}; expected one of {FAMILIES}")
        params = tuple(float(p) for p in self.params)
        object.__setattr__(self, "params", params)
        if not all(np.isfinite(params)):
            raise ConfigurationError("distribution parameters must be finite")
        if self.family == "constant":
            if len(params) not in (1, d):
                raise ConfigurationError("constant law takes one value or one value per coordinate")
        elif self.family == "uniform":
            if len(params) != 2 or not params[0] <= params[1]:
                raise ConfigurationError("uniform law needs (a, b) with a <= b")
        else:
            if len(params) != 3 or not 0.0 <= params[2] <= 1.0:
                raise ConfigurationError("two_point law needs (v1, v2, p) with 0 <= p <= 1")
        lo, hi = self.support_bounds
        if lo <= 0.0:
            raise ConfigurationError("all weights must be strictly positive")
        floor = self.ellipticity_infimum()
        if self.kappa is None:
            object.__setattr__(self, "kappa", floor)
        elif not 0.0 < self.kappa <= floor * (1.0 + 1e-12):
            raise ConfigurationError(
                f"law violates the ellipticity assumption w_i/tr(w) >= 2*kappa: declared "
                f"kappa={self.kappa:g} but the support only guarantees kappa={floor:g}"
            )

    @classmethod
    def constant(cls, value=1.0, dimension=2, kappa=None):
        values = tuple(np.atleast_1d(np.asarray(value, dtype=float)))
        return cls(dimension, "constant", values, kappa)

    @classmethod
    def uniform(cls, a, b, dimension=2, kappa=None):
        return cls(dimension, "uniform", (a, b), kappa)

    @classmethod
    def two_point(cls, v1, v2, p=0.5, dimension=2, kappa=None):
        return cls(dimension, "two_point", (v1, v2, p), kappa)

    @property
    def support_points(self) -> list[float]:
        """Values a single weight can take (end points for ``uniform``)."""
        if self.family == "constant":
            return sorted(set(self.params))
        if self.family == "uniform":
            return sorted(set(self.params))
        v1, v2, p = self.params
        return sorted({v for v, q in ((v1, p), (v2, 1.0 - p)) if q > 0.0})

    @property
    def support_bounds(self) -> tuple[float, float]:
        pts = self.support_points
        return min(pts), max(pts)

    def ellipticity_infimum(self) -> float:
        """``inf`` over the support of ``min_i w_i / (2 tr w)``."""
        d = self.dimension
        if self.family == "constant":
            w = self.constant_vector()
            return float(w.min() / (2.0 * w.sum()))
        lo, hi = self.support_bounds
        return lo / (2.0 * (lo + (d - 1) * hi))

    def constant_vector(self) -> np.ndarray:
        w = np.asarray(self.params, dtype=float)
        return np.full(self.dimension, w[0]) if w.size == 1 else w

    def trace_bounds(self) -> tuple[float, float]:
        if self.family == "constant":
            t = float(self.constant_vector().sum())
            return t, t
        lo, hi = self.support_bounds
        return self.dimension * lo, self.dimension * hi

    def support_sample(self, per_axis: int = 9) -> np.ndarray:
        """Weight vectors covering the support, for sup-norm evaluation.

        Finite supports are enumerated exactly; ``uniform`` uses a grid of
        ``per_axis`` points per coordinate.
        """
        d = self.dimension
        if self.family == "constant":
            return self.constant_vector()[None, :]
        if self.family == "uniform":
            a, b = self.params
            axis = np.linspace(a, b, per_axis) if b > a else np.array([a])
        else:
            axis = np.array(self.support_points)
        return np.array(list(itertools.product(axis, repeat=d)), dtype=float)

    def satisfies_two_sided_bound(self) -> bool:
        """Whether ``kappa I <= w <= I / kappa`` holds on the whole support."""
        lo, hi = self.support_bounds
        return lo >= self.kappa and hi <= 1.0 / self.kappa

    def as_dict(self) -> dict:
        return {"dimension": self.dimension, "family": self.family,
                "params": list(self.params), "kappa": self.kappa}

    def sample(self, uniforms: np.ndarray) -> np.ndarray:
        """Map uniform variates to weights, elementwise.

        ``uniforms`` has trailing axis of length ``dimension`` (one variate
        per coordinate).
        """
        if self.family == "constant":
            return np.broadcast_to(self.constant_vector(), uniforms.shape).copy()
        if self.family == "uniform":
            a, b = self.params
            return a + (b - a) * uniforms
        v1, v2, p = self.params
        return np.where(uniforms < p, v1, v2)


# ---------------------------------------------------------------------------- box


@dataclass(frozen=True)
class Box:
    """Axis-aligned integer box ``lo <= x < lo + shape``."""

    lo: tuple
    shape: tuple

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(int(v) for v in self.lo))
        object.__setattr__(self, "shape", tuple(int(v) for v in self.shape))
        if len(self.lo) != len(self.shape) or any(s <= 0 for s in self.shape):
            raise ConfigurationError(f"invalid box lo={self.lo} shape={self.shape}")

    @classmethod
    def centered(cls, radius: int, dimension: int) -> "Box":
        """The cube ``[-radius, radius]^d``."""
        r = int(radius)
        return cls((-r,) * dimension, (2 * r + 1,) * dimension)

    @classmethod
    def covering(cls, sites: np.ndarray, margin: int = 0) -> "Box":
        sites = np.atleast_2d(sites)
        lo = sites.min(axis=0) - margin
        hi = sites.max(axis=0) + margin
        return cls(tuple(lo), tuple(hi - lo + 1))

    @property
    def dimension(self) -> int:
        return len(self.lo)

    @property
    def hi(self) -> tuple:
        """Inclusive upper corner."""
        return tuple(l + s - 1 for l, s in zip(self.lo, self.shape))

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def contains(self, sites) -> np.ndarray:
        sites = np.asarray(sites)
        lo = np.asarray(self.lo)
        return np.all((sites >= lo) & (sites < lo + np.asarray(self.shape)), axis=-1)

    def coordinates(self) -> np.ndarray:
        """All sites in row-major order, shape ``(size, d)``."""
        axes = [np.arange(l, l + s) for l, s in zip(self.lo, self.shape)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def radius_about(self, x) -> int:
        """Largest ``r`` such that every site within sup-distance ``r`` of ``x`` is inside."""
        x = np.asarray(x)
        return int(min(np.min(x - np.asarray(self.lo)), np.min(np.asarray(self.hi) - x)))


# -------------------------------------------------------------------- environment


def weights_for_sites(law: EnvironmentLaw, seed: int, sites: np.ndarray) -> np.ndarray:
    """Weights at arbitrary sites, identical to what :func:`sample_environment` stores."""
    sites = np.atleast_2d(np.asarray(sites, dtype=np.int64))
    d = law.dimension
    coords = [sites[:, j] for j in range(d)]
    u = np.stack([rng.uniform(seed, i, *coords) for i in range(d)], axis=-1)
    return law.sample(u)


@dataclass(frozen=True, eq=False)
class Environment:
    """A realised environment on a box.  Immutable after construction."""

    law: EnvironmentLaw
    box: Box
    seed: int
    weights: np.ndarray = field(repr=False)

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        if w.shape != self.box.shape + (self.box.dimension,):
            raise ConfigurationError(f"weights shape {w.shape} does not match box {self.box}")
        if not np.all(w > 0.0):
            raise ConfigurationError("environment weights must be strictly positive")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_array(cls, weights, lo=None, law=None, seed=0) -> "Environment":
        """Wrap an explicit weight array (mostly for tests and hand-built cases)."""
        weights = np.asarray(weights, dtype=float)
        d = weights.shape[-1]
        if lo is None:
            lo = tuple(-(s // 2) for s in weights.shape[:-1])
        box = Box(lo, weights.shape[:-1])
        if law is None:
            ratios = weights / weights.sum(axis=-1, keepdims=True)
            law = EnvironmentLaw(d, "constant", (1.0,), kappa=float(ratios.min() / 2.0))
        return cls(law, box, seed, weights)

    @property
    def dimension(self) -> int:
        return self.box.dimension

    @property
    def kappa(self) -> float:
        return self.law.kappa

    def flat_index(self, sites) -> np.ndarray:
        """Row-major offsets of ``sites`` in the box; raises on any outside site."""
        sites = np.atleast_2d(np.asarray(sites, dtype=np.int64))
        if sites.shape[-1] != self.dimension:
            raise DomainError(f"site dimension {sites.shape[-1]} != environment dimension {self.dimension}")
        inside = self.box.contains(sites)
        if not np.all(inside):
            bad = sites[~inside][0]
            raise DomainError(f"site {tuple(bad)} lies outside environment box {self.box}")
        rel = sites - np.asarray(self.box.lo)
        return np.ravel_multi_index(tuple(rel.T), self.box.shape)

    def weights_at(self, sites) -> np.ndarray:
        """Weight vectors at ``sites``, shape ``(n, d)``."""
        return self.weights.reshape(-1, self.dimension)[self.flat_index(sites)]

    def trace_at(self, sites) -> np.ndarray:
        return self.weights_at(sites).sum(axis=-1)

    def shifted(self, x) -> "Environment":
        """The shifted environment ``y -> w(x + y)`` on the correspondingly moved box."""
        x = np.asarray(x, dtype=np.int64)
        lo = tuple(np.asarray(self.box.lo) - x)
        return Environment(self.law, Box(lo, self.box.shape), self.seed, self.weights)

    def dump(self, path) -> None:
        """Binary dump: 32-byte header then little-endian float64 weights, row-major."""
        d = self.dimension
        lo = list(self.box.lo) + [0] * (3 - d)
        shape = list(self.box.shape) + [0] * (3 - d)
        if max(map(abs, lo)) > 32767 or max(shape) > 65535:
            raise ConfigurationError("box too large for the dump header")
        header = _DUMP_HEADER.pack(_DUMP_MAGIC, d, self.seed & 0xFFFFFFFFFFFFFFFF, *lo, *shape)
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(self.weights.astype("<f8").tobytes(order="C"))

    @classmethod
    def load(cls, path, law: EnvironmentLaw | None = None) -> "Environment":
        raw = Path(path).read_bytes()
        magic, d, seed, *rest = _DUMP_HEADER.unpack_from(raw)
        if magic != _DUMP_MAGIC:
            raise ConfigurationError(f"{path}: not an environment dump (bad magic {magic!r})")
        lo, shape = tuple(rest[:d]), tuple(rest[3:3 + d])
        weights = np.frombuffer(raw, dtype="<f8", offset=_DUMP_HEADER.size).reshape(shape + (d,))
        env = cls.from_array(weights.astype(np.float64), lo=lo, law=law, seed=seed)
        return env


def sample_environment(law: EnvironmentLaw, box: Box, seed: int) -> Environment:
    """Draw i.i.d. site weights over ``box``.

    The result is a deterministic function of ``(law, box, seed)``; a site
    receives the same weights in every box that contains it.
    """
    if box.dimension != law.dimension:
        raise ConfigurationError(f"box dimension {box.dimension} != law dimension {law.dimension}")
    sites = box.coordinates()
    w = weights_for_sites(law, seed, sites).reshape(box.shape + (law.dimension,))
    return Environment(law, box, int(seed), w)


def transition_probabilities(env: Environment, x) -> np.ndarray:
    """Jump probabilities from ``x`` in the order ``+e_1, -e_1, ..., +e_d, -e_d``."""
    w = env.weights_at([x])[0]
    half = w / (2.0 * w.sum())
    return np.repeat(half, 2)


def jump_probabilities(weights: np.ndarray) -> np.ndarray:
    """Vectorised :func:`transition_probabilities` for an ``(n, d)`` weight array."""
    half = weights / (2.0 * weights.sum(axis=-1, keepdims=True))
    return np.repeat(half, 2, axis=-1)


# -------------------------------------------------------------------- observables

OBS_CONST, OBS_TRACE, OBS_INV_TRACE, OBS_COORD_RATIO, OBS_INDICATOR = range(5)

_OBS_PATTERN = re.compile(r"^\s*([a-z_]+)\s*(?:\((.*)\))?\s*$")


@dataclass(frozen=True)
class ObservableSpec:
    """A bounded function ``psi`` of the weight vector at a single site.

    ``coord_ratio(i)`` and ``indicator(t)`` use 1-based coordinates as in
    ``w_1``; ``psi_over_trace(inner)`` divides another catalog entry by the
    trace.
    """

    kind: str
    param: float = 0.0
    inner: "ObservableSpec | None" = None

    KINDS = ("const", "trace", "inv_trace", "coord_ratio", "psi_over_trace", "indicator")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ConfigurationError(f"unknown observable {self.kind!r}; expected one of {self.KINDS}")
        if self.kind == "psi_over_trace" and self.inner is None:
            raise ConfigurationError("psi_over_trace needs an inner observable")
        if self.kind == "coord_ratio" and (int(self.param) != self.param or self.param < 1):
            raise ConfigurationError("coord_ratio takes a 1-based coordinate index")

    @classmethod
    def parse(cls, text: str) -> "ObservableSpec":
        """Parse names such as ``"inv_trace"``, ``"const(2.5)"``, ``"psi_over_trace(trace)"``."""
        m = _OBS_PATTERN.match(text)
        if not m:
            raise ConfigurationError(f"cannot parse observable {text!r}")
        kind, arg = m.group(1), m.group(2)
        if kind == "psi_over_trace":
            return cls(kind, inner=cls.parse(arg or ""))
        if kind in ("const", "coord_ratio", "indicator"):
            if arg is None:
                raise ConfigurationError(f"observable {kind} needs an argument")
            return cls(kind, float(arg))
        if arg:
            raise ConfigurationError(f"observable {kind} takes no argument")
        return cls(kind)

    def __str__(self):
        if self.kind == "psi_over_trace":
            return f"psi_over_trace({self.inner})"
        if self.kind in ("const", "indicator"):
            return f"{self.kind}({self.param:g})"
        if self.kind == "coord_ratio":
            return f"coord_ratio({int(self.param)})"
        return self.kind

    def evaluate(self, weights: np.ndarray) -> np.ndarray:
        """Apply to an array of weight vectors (last axis = coordinates)."""
        w = np.asarray(weights, dtype=float)
        tr = w.sum(axis=-1)
        if self.kind == "const":
            return np.full(tr.shape, self.param)
        if self.kind == "trace":
            return tr
        if self.kind == "inv_trace":
            return 1.0 / tr
        if self.kind == "coord_ratio":
            i = int(self.param) - 1
            if i >= w.shape[-1]:
                raise ConfigurationError(f"coord_ratio({i + 1}) needs dimension > {i}")
            return w[..., i] / tr
        if self.kind == "indicator":
            return (w[..., 0] > self.param).astype(float)
        return self.inner.evaluate(w) / tr

    def sup_norm(self, law: EnvironmentLaw) -> float:
        """``sup |psi|`` over the law's support (grid-approximated for ``uniform``)."""
        return float(np.max(np.abs(self.evaluate(law.support_sample(17)))))

    def kernel_code(self) -> tuple[int, float, int]:
        """``(base kind, parameter, number of trace divisions)`` for numba kernels."""
        divisions, spec = 0, self
        while spec.kind == "psi_over_trace":
            divisions, spec = divisions + 1, spec.inner
        code = {"const": OBS_CONST, "trace": OBS_TRACE, "inv_trace": OBS_INV_TRACE,
                "coord_ratio": OBS_COORD_RATIO, "indicator": OBS_INDICATOR}[spec.kind]
        param = spec.param - 1 if spec.kind == "coord_ratio" else spec.param
        return code, float(param), divisions


def observable_eval(spec: ObservableSpec, env: Environment, x) -> float:
    """``psi`` of the shifted environment at the origin, i.e. of ``w(x)``."""
    return float(spec.evaluate(env.weights_at([x]))[0])


def observable_field(spec: ObservableSpec, env: Environment, sites: Sequence) -> np.ndarray:
    return spec.evaluate(env.weights_at(sites))


def observable_grid(spec: ObservableSpec, env: Environment) -> np.ndarray:
    """``psi`` evaluated over the whole box, flattened row-major."""
    return spec.evaluate(env.weights.reshape(-1, env.dimension))
