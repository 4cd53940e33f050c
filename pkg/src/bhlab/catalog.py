"""Named forcing and boundary functions.

Every entry is a polynomial or trigonometric function of the coordinates, so
it is smooth on the closed unit ball (and cylinder), which is all the
homogenization estimates ask of ``f`` and ``g``.

Forcing terms are called as ``f(x)`` or ``f(x, t)`` with ``x`` of shape
``(m, d)``; boundary data as ``g(xi)`` or ``g(xi, t)`` with unit vectors
``xi``.  Time enters only through an additive ``time * t`` term.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError

KINDS = ("constant", "affine", "quadratic", "cosine_boundary", "polynomial")


@dataclass(frozen=True)
class CatalogFunction:
    """A catalog entry.

    Parameters by kind:

    ``constant``
        ``value``.
    ``affine``
        ``slope`` (length d) and ``value``: ``slope . x + value``.
    ``quadratic``
        ``scale`` and ``value``: ``scale |x|^2 + value``.
    ``cosine_boundary``
        ``frequency`` k and ``scale``: ``scale r^k cos(k theta)`` in the
        ``(x1, x2)`` plane, the harmonic extension of ``cos(k theta)``.
    ``polynomial``
        ``terms``: list of ``[coefficient, [e_1, ..., e_d]]``.
    """

    kind: str
    params: dict = field(default_factory=dict)
    time: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown function kind {self.kind!r}; expected one of {KINDS}")
        allowed = {"constant": {"value"}, "affine": {"slope", "value"}, "quadratic": {"scale", "value"},
                   "cosine_boundary": {"frequency", "scale"}, "polynomial": {"terms"}}[self.kind]
        extra = set(self.params) - allowed
        if extra:
            raise ConfigurationError(f"{self.kind} does not take {sorted(extra)}")
        if self.kind == "cosine_boundary":
            k = self.params.get("frequency", 1)
            if int(k) != k or k < 0:
                raise ConfigurationError("cosine_boundary frequency must be a nonnegative integer")

    @classmethod
    def from_config(cls, block) -> "CatalogFunction":
        if isinstance(block, str):
            return cls(block)
        block = dict(block)
        kind = block.pop("kind")
        time = float(block.pop("time", 0.0))
        return cls(kind, block, time)

    def _spatial(self, x: np.ndarray) -> np.ndarray:
        p = self.params
        if self.kind == "constant":
            return np.full(x.shape[0], float(p.get("value", 0.0)))
        if self.kind == "affine":
            slope = np.asarray(p.get("slope", [0.0] * x.shape[1]), dtype=float)
            if slope.size != x.shape[1]:
                raise ConfigurationError(f"affine slope has {slope.size} entries for dimension {x.shape[1]}")
            return x @ slope + float(p.get("value", 0.0))
        if self.kind == "quadratic":
            return float(p.get("scale", 1.0)) * (x ** 2).sum(axis=1) + float(p.get("value", 0.0))
        if self.kind == "cosine_boundary":
            k = int(p.get("frequency", 1))
            scale = float(p.get("scale", 1.0))
            if x.shape[1] == 1:
                return scale * x[:, 0] ** k
            z = (x[:, 0] + 1j * x[:, 1]) ** k
            return scale * z.real
        out = np.zeros(x.shape[0])
        for coef, exps in p.get("terms", []):
            exps = list(exps)
            if len(exps) != x.shape[1]:
                raise ConfigurationError(f"polynomial term {exps} does not match dimension {x.shape[1]}")
            out += float(coef) * np.prod(x ** np.asarray(exps, dtype=float), axis=1)
        return out

    def __call__(self, x, t=None) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        v = self._spatial(x)
        if self.time and t is not None:
            v = v + self.time * np.broadcast_to(np.asarray(t, dtype=float), v.shape)
        return v

    def is_affine(self) -> bool:
        if self.kind in ("constant", "affine"):
            return True
        if self.kind == "cosine_boundary":
            return int(self.params.get("frequency", 1)) <= 1
        if self.kind == "polynomial":
            return all(sum(e) <= 1 or c == 0 for c, e in self.params.get("terms", []))
        return float(self.params.get("scale", 1.0)) == 0.0

    def as_dict(self) -> dict:
        out = {"kind": self.kind, **self.params}
        if self.time:
            out["time"] = self.time
        return out
