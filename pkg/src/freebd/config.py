"""Run configuration: TOML file -> validated pydantic models.

Unknown keys are rejected and every validation error names the dotted path of the field.
"""

from __future__ import annotations

import re
import sys
from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigurationError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__all__ = ["RunConfig", "load_config", "parse_config"]

MIN_RESOLUTION = 9

Scalar = Union[float, str]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class MetricConfig(_Strict):
    preset: Literal["flat", "conformal", "entries"] = "flat"
    phi: Optional[str] = None
    entries: dict[str, str] = Field(default_factory=dict)
    r0: float = Field(1.0, gt=0)

    @model_validator(mode="after")
    def _needs(self):
        if self.preset == "conformal" and not self.phi:
            _fail("phi", "conformal metric needs phi")
        if self.preset == "entries" and not self.entries:
            _fail("entries", "entries metric needs at least one entry")
        return self


class ProblemConfig(_Strict):
    kind: Literal["quadratic", "p_energy", "area", "riemannian", "custom-field"]
    # matrix field for quadratic and custom-field: numbers or expressions in the spatial variables
    A: Optional[list[list[Scalar]]] = None
    p: Optional[float] = None
    xi_max: float = Field(1.0, gt=0)
    # zeroth-order term of custom-field, an expression that may use z (the solution value)
    a0: Optional[str] = None
    metric: Optional[MetricConfig] = None

    @model_validator(mode="after")
    def _needs(self):
        if self.kind == "p_energy":
            if self.p is None:
                _fail("p", "p_energy needs p")
            if not self.p > 1:
                _fail("p", "p must exceed 1")
        if self.kind == "riemannian" and self.metric is None:
            self.metric = MetricConfig()
        return self


class DomainConfig(_Strict):
    dim: Literal[1, 2]
    bounds: list[list[float]]
    resolution: Union[int, list[int]]

    @model_validator(mode="after")
    def _shape(self):
        if len(self.bounds) != self.dim:
            _fail("bounds", f"expected {self.dim} intervals")
        for lo_hi in self.bounds:
            if len(lo_hi) != 2 or not lo_hi[0] < lo_hi[1]:
                _fail("bounds", "each bound must be an interval [lo, hi] with lo < hi")
        res = [self.resolution] * self.dim if isinstance(self.resolution, int) else self.resolution
        if len(res) != self.dim:
            _fail("resolution", f"expected {self.dim} resolutions")
        if min(res) < MIN_RESOLUTION:
            _fail("resolution", f"must be at least {MIN_RESOLUTION} per axis")
        return self

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.resolution,) * self.dim if isinstance(self.resolution, int) else tuple(self.resolution)


class FieldsConfig(_Strict):
    obstacle: Scalar = "0"
    boundary: Scalar = "0"
    source: Scalar = "0"


class SolverConfig(_Strict):
    method: Optional[Literal["psor", "ssnewton"]] = None
    tol: float = Field(1e-8, gt=0)
    max_iter: Optional[int] = Field(None, gt=0)
    omega: Optional[float] = None

    @field_validator("omega")
    @classmethod
    def _omega(cls, v):
        if v is not None and not 0 < v < 2:
            raise ValueError(f"omega must lie in (0, 2), got {v}")
        return v


class LinearizeConfig(_Strict):
    quad_nodes: int = Field(12, ge=1, le=64)


class FreeBoundaryConfig(_Strict):
    enabled: bool = True
    radii: list[float] = Field(default_factory=lambda: [0.1, 0.2])
    confidence: float = Field(1.2, gt=1)

    @field_validator("radii")
    @classmethod
    def _radii(cls, v):
        if not v or min(v) <= 0:
            raise ValueError("radii must be a non-empty list of positive numbers")
        return sorted(v)


class HypothesesConfig(_Strict):
    c0: Optional[float] = None
    alpha: float = Field(0.5, gt=0, le=1)
    holder_bound: Optional[float] = Field(None, gt=0)
    samples: int = Field(4096, ge=1)
    z_range: list[float] = Field(default_factory=lambda: [-1.0, 1.0])
    xi_radius: Optional[float] = Field(None, gt=0)
    s0_margin: float = Field(0.25, gt=0, lt=0.5)

    @field_validator("z_range")
    @classmethod
    def _zr(cls, v):
        if len(v) != 2 or not v[0] < v[1]:
            raise ValueError("z_range must be an interval [lo, hi] with lo < hi")
        return v


class OutputConfig(_Strict):
    directory: str = "."
    formats: list[Literal["csv", "json"]] = Field(default_factory=lambda: ["csv", "json"])


class StudyConfig(_Strict):
    exact: Optional[str] = None


class RunConfig(_Strict):
    problem: ProblemConfig
    domain: DomainConfig
    fields: FieldsConfig = Field(default_factory=FieldsConfig)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    linearize: LinearizeConfig = Field(default_factory=LinearizeConfig)
    freeboundary: FreeBoundaryConfig = Field(default_factory=FreeBoundaryConfig)
    hypotheses: HypothesesConfig = Field(default_factory=HypothesesConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)
    study: StudyConfig = Field(default_factory=StudyConfig)

    @model_validator(mode="after")
    def _method(self):
        if self.solver.method is None:
            self.solver.method = "psor" if self.problem.kind == "quadratic" else "ssnewton"
        if self.solver.method == "psor" and self.problem.kind != "quadratic":
            _fail("solver.method", "psor only solves the quadratic problem")
        n = self.domain.dim
        if self.problem.A is not None:
            if len(self.problem.A) != n or any(len(r) != n for r in self.problem.A):
                _fail("problem.A", f"must be {n}x{n}")
        return self


def _fail(field: str, msg: str):
    """Error raised from a section-level validator; ``field`` is relative to the section."""
    raise ValueError(f"[{field}] {msg}")


_TAGGED = re.compile(r"^\[([\w.]+)\] (.*)$", re.S)


def parse_config(data: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        err = exc.errors()[0]
        loc = [str(p) for p in err["loc"]]
        msg = err["msg"].removeprefix("Value error, ")
        if err["type"] == "extra_forbidden":
            msg = "unknown key"
        m = _TAGGED.match(msg)
        if m:
            loc.append(m.group(1))
            msg = m.group(2)
        raise ConfigurationError(msg, ".".join(loc) or "config") from None


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigurationError(f"no such file: {path}", "config") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"malformed TOML: {exc}", "config") from None
    return parse_config(data)
