"""Experiment configuration: YAML files checked against a versioned JSON schema.

Schema violations are reported with the line and column of the offending
node, found by walking the YAML node tree along the error's path.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from .catalog import CatalogFunction
from .effective import EffectiveCoefficients
from .environment import EnvironmentLaw, ObservableSpec
from .errors import ConfigurationError

SCHEMA_VERSION = 1
PARABOLIC = ("homog_parabolic",)
LADDER_KINDS = ("homog_elliptic", "homog_parabolic", "corrector", "ergodicity", "berry_esseen", "mu_decay")

DEFAULT_PSI = {"homog_elliptic": "trace", "homog_parabolic": "trace", "census": "coord_ratio(1)"}


def load_schema() -> dict:
    text = resources.files("bhlab").joinpath("schema", f"config-v{SCHEMA_VERSION}.json").read_text()
    return json.loads(text)


class ConfigError(ConfigurationError):
    """A configuration problem, optionally located in the source file."""

    def __init__(self, message: str, path: str = "", line: int | None = None, column: int | None = None):
        self.path, self.line, self.column = path, line, column
        where = f"{path}:{line}:{column}: " if line is not None else (f"{path}: " if path else "")
        super().__init__(where + message)


# ------------------------------------------------------------- yaml positions


def _node_at(node, keys):
    """Deepest YAML node reached by following ``keys`` from ``node``."""
    for key in keys:
        if isinstance(node, yaml.MappingNode):
            nxt = next((v for k, v in node.value if k.value == str(key)), None)
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            nxt = node.value[key]
        else:
            nxt = None
        if nxt is None:
            break
        node = nxt
    return node


def _position(root, keys) -> tuple[int | None, int | None]:
    if root is None:
        return None, None
    node = _node_at(root, keys)
    return node.start_mark.line + 1, node.start_mark.column + 1


def _path_text(keys) -> str:
    out = ""
    for k in keys:
        out += f"[{k}]" if isinstance(k, int) else (f".{k}" if out else str(k))
    return out or "<root>"


# ------------------------------------------------------------------- config


@dataclass
class ExperimentConfig:
    """A validated configuration plus the objects it names."""

    raw: dict
    source: str = ""
    node: object = field(default=None, repr=False)

    @property
    def kind(self) -> str:
        return self.raw["experiment"]

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def workers(self) -> int:
        return int(self.raw.get("workers", 1))

    @property
    def law(self) -> EnvironmentLaw:
        block = self.raw["law"]
        return EnvironmentLaw(block["dimension"], block["family"], tuple(block["params"]), block.get("kappa"))

    @property
    def psi(self) -> ObservableSpec:
        return ObservableSpec.parse(self.raw.get("psi", DEFAULT_PSI.get(self.kind, "coord_ratio(1)")))

    def function(self, key: str, default) -> CatalogFunction:
        return CatalogFunction.from_config(self.raw.get(key, default))

    @property
    def coefficients(self) -> EffectiveCoefficients | None:
        c = self.raw.get("coefficients")
        return None if c is None else EffectiveCoefficients.exact(c["abar"], c["bbar"], c["psibar"])

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form (key order and layout do not matter)."""
        text = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def output_dir(self, default: str | Path = "runs") -> Path:
        out = Path(self.raw.get("output", Path(default) / f"{self.kind}-{self.seed}"))
        if not out.is_absolute() and self.source:
            out = Path(self.source).resolve().parent / out
        return out

    def _fail(self, message: str, keys=()):
        line, col = _position(self.node, keys)
        raise ConfigError(message, self.source, line, col)

    def check_invariants(self) -> None:
        """Checks the schema cannot express: law assumptions, dimensions, ladders."""
        raw = self.raw
        try:
            law = self.law
        except ConfigurationError as exc:
            self._fail(str(exc), ["law"])
        d = law.dimension
        if self.kind in PARABOLIC:
            if not law.satisfies_two_sided_bound():
                self._fail("parabolic experiments need the two-sided ellipticity bound kappa I <= w <= I/kappa "
                           f"(support {law.support_bounds}, kappa={law.kappa:g})", ["law"])
            if law.trace_bounds()[1] > 1.0:
                self._fail("parabolic recursion is monotone only when tr w <= 1 on the support "
                           f"(max trace {law.trace_bounds()[1]:g})", ["law"])
        try:
            self.psi
        except ConfigurationError as exc:
            self._fail(str(exc), ["psi"])
        probe = np.zeros((1, d))
        for key in ("f", "g"):
            if key in raw:
                try:
                    self.function(key, None)(probe, np.zeros(1))
                except ConfigurationError as exc:
                    self._fail(f"{key}: {exc}", [key])
        if self.kind in LADDER_KINDS:
            if "ladder" not in raw:
                self._fail(f"experiment {self.kind} needs 'ladder'", [])
            ladder = raw["ladder"]
            if any(b <= a for a, b in zip(ladder, ladder[1:])):
                self._fail("ladder must be strictly increasing", ["ladder"])
            if self.kind in ("ergodicity", "berry_esseen", "mu_decay") and any(int(v) != v for v in ladder):
                self._fail("ladder entries must be integers for this experiment", ["ladder"])
            if self.kind == "mu_decay" and (ladder[0] < 1 or ladder[-1] > 4):
                self._fail("mu ladder must lie in 1..4", ["ladder"])
            if self.kind != "berry_esseen" and len(ladder) < 2:
                self._fail("ladder needs at least 2 entries", ["ladder"])
        if self.kind in ("ergodicity", "berry_esseen") and "walks" not in raw:
            self._fail(f"experiment {self.kind} needs 'walks'", [])
        if self.kind == "census" and "census" not in raw:
            self._fail("experiment census needs a 'census' block", [])
        if "direction" in raw:
            ell = np.asarray(raw["direction"], dtype=float)
            if ell.size != d or abs(np.linalg.norm(ell) - 1.0) > 1e-12:
                self._fail(f"direction must be a unit vector in dimension {d}", ["direction"])
        if "coefficients" in raw and len(raw["coefficients"]["abar"]) != d:
            self._fail(f"coefficients.abar needs {d} entries", ["coefficients", "abar"])


def parse_config(text: str, source: str = "") -> ExperimentConfig:
    """Parse and validate YAML text; raises :class:`ConfigError` with a location."""
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"invalid YAML: {getattr(exc, 'problem', exc)}", source,
                          None if mark is None else mark.line + 1,
                          None if mark is None else mark.column + 1) from None
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a mapping", source, 1, 1)
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(raw), key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path))))
    if errors:
        err = errors[0]
        keys = list(err.absolute_path)
        if err.validator == "required":
            missing = [k for k in err.validator_value if k not in err.instance]
            message = f"missing required field {missing[0]!r} in {_path_text(keys)}"
        else:
            message = f"{_path_text(keys)}: {err.message}"
        line, col = _position(node, keys)
        raise ConfigError(message, source, line, col)
    cfg = ExperimentConfig(raw, source, node)
    cfg.check_invariants()
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read configuration: {exc.strerror}", str(path)) from None
    return parse_config(text, str(path))
