"""
Experiment configuration.

Files are TOML (or the canonical JSON echo) whose sections are the pydantic
models below. Parsing validates every key, materializes every default and
yields an immutable RunConfig whose canonical JSON form is byte-stable, so
its SHA-256 identifies the experiment.
"""
import copy
import hashlib
import json
import logging
import math
import os
import re
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType
from typing import Annotated, Any, Dict, List, Mapping, Optional, Tuple

import numpy as np
from django.conf import settings
from django.core.exceptions import ValidationError
from pydantic import (
    AfterValidator,
    BaseModel,
    ConfigDict,
    Field,
    NonNegativeFloat,
    NonNegativeInt,
    PositiveFloat,
    PositiveInt,
    ValidationInfo,
    field_validator,
    model_validator,
)
from pydantic import ValidationError as SchemaError

from . import core
from .spatial import DOMAIN_KINDS, Domain

logger = logging.getLogger(__name__)

ENV_PREFIX = "COAGLAB__"
PHYSICS_SECTIONS = ("params", "kernel", "alpha", "diffusion", "initial")
PIPELINES = ("cell_problem", "simulate", "pde", "validate", "capacity_curve", "full")
CHECKS = (
    "propensity", "compensator", "mass_conservation", "macro_conservation", "beta_bounds",
    "capacity", "micro_macro", "convergence", "stosszahlansatz", "effective_rate", "mean_free_path",
)


def lab_settings():
    defaults = {
        "M_MAX": core.DEFAULT_M_MAX,
        "CELL_TOL": 1e-8,
        "SHELLS": 400,
        "CELLS_PER_AXIS": 32,
        "REPLICAS": 10,
        "TAU_FACTOR": core.DEFAULT_TAU_FACTOR,
        "OUTPUT_DIR": "out",
        "VERSION": "0.1.0",
    }
    return defaults | dict(getattr(settings, "COAGLAB", {}))


def _lab(key):
    return lambda: lab_settings()[key]


def _one_of(choices):
    def check(value):
        if value not in choices:
            raise ValueError(f"must be one of {', '.join(choices)}")
        return value
    return AfterValidator(check)


Times = List[NonNegativeFloat]


# ==============================
# Sections
# ==============================

class Section(BaseModel):
    model_config = ConfigDict(extra="forbid", allow_inf_nan=False)


class ParamsSection(Section):
    dim: int = Field(3, ge=3)
    big_z: PositiveFloat = 1.0
    n_particles: PositiveInt = 2000
    tau_factor: PositiveFloat = Field(default_factory=_lab("TAU_FACTOR"))
    horizon: NonNegativeFloat = 1.0
    seed: int = Field(0, ge=0, lt=2 ** 64)
    m_max: int = Field(default_factory=_lab("M_MAX"), ge=2)
    # derived from N eps^(d-2) = Z when omitted
    epsilon: Optional[PositiveFloat] = Field(None, validate_default=True)

    @field_validator("epsilon")
    @classmethod
    def _scaling(cls, value, info: ValidationInfo):
        if not {"dim", "big_z", "n_particles"} <= info.data.keys():
            return value
        dim, big_z, n = info.data["dim"], info.data["big_z"], info.data["n_particles"]
        if value is None:
            return (big_z / n) ** (1.0 / (dim - 2))
        scaled = n * value ** (dim - 2)
        if abs(scaled - big_z) > core.SCALING_RTOL * big_z:
            raise ValueError(f"N * eps^(d-2) = {scaled!r} does not match Z = {big_z!r}")
        return value


class KernelSection(Section):
    profile: Annotated[str, _one_of(core.KERNEL_PROFILES)] = "bump"
    support_radius: PositiveFloat = 1.0
    taper: float = Field(core.DEFAULT_TAPER, gt=0, le=1)


class AlphaSection(Section):
    kind: Annotated[str, _one_of(core.RATE_KINDS)] = "constant"
    c: NonNegativeFloat = 1.0
    table: List[List[NonNegativeFloat]] = Field(default_factory=list, validate_default=True)

    @field_validator("table")
    @classmethod
    def _square_and_symmetric(cls, value, info: ValidationInfo):
        if info.data.get("kind") != "table":
            return value
        if not value or any(len(row) != len(value) for row in value):
            raise ValueError("must be a nonempty square table")
        table = np.asarray(value, dtype=float)
        if not np.array_equal(table, table.T):
            i, j = np.argwhere(table != table.T)[0] + 1
            raise ValueError(f"is not symmetric at ({i}, {j})")
        return value


class DiffusionSection(Section):
    kind: Annotated[str, _one_of(core.DIFFUSION_KINDS)] = "constant"
    c: float = 0.5
    exponent: float = 0.0
    table: List[PositiveFloat] = Field(default_factory=list, validate_default=True)

    @field_validator("c")
    @classmethod
    def _positive_rate(cls, value, info: ValidationInfo):
        if info.data.get("kind") != "table" and value <= 0:
            raise ValueError("must be positive")
        return value

    @field_validator("table")
    @classmethod
    def _table_given(cls, value, info: ValidationInfo):
        if info.data.get("kind") == "table" and not value:
            raise ValueError("must be a nonempty list of positive rates")
        return value


class ComponentSpec(Section):
    """One summand of the initial densities; intensity defaults to Z."""
    mass: PositiveInt = 1
    shape: str = "uniform"
    intensity: Optional[NonNegativeFloat] = None
    lo: Optional[List[float]] = None
    hi: Optional[List[float]] = None
    center: Optional[List[float]] = None
    sigma: PositiveFloat = 1.0
    values: Optional[list] = None

    @field_validator("values")
    @classmethod
    def _numeric_grid(cls, value):
        if value is None:
            return value
        return np.asarray(value, dtype=float).tolist()

    @model_validator(mode="after")
    def _geometry(self):
        _component(self.model_dump(exclude_none=True))
        return self


class InitialSection(Section):
    domain: Annotated[str, _one_of(DOMAIN_KINDS)] = "torus"
    side: PositiveFloat = 1.0
    components: Optional[List[ComponentSpec]] = None


class CellSection(Section):
    mode: Annotated[str, _one_of(("radial", "cartesian"))] = "radial"
    shells: int = Field(default_factory=_lab("SHELLS"), ge=2)
    cells_per_axis: int = Field(default_factory=_lab("CELLS_PER_AXIS"), ge=4)
    tol: PositiveFloat = Field(default_factory=_lab("CELL_TOL"))
    alphas: List[NonNegativeFloat] = [1.0, 10.0, 100.0, 1000.0, 10000.0]
    dd_sum: PositiveFloat = 1.0

    @field_validator("alphas")
    @classmethod
    def _ascending(cls, value):
        if value != sorted(value):
            raise ValueError("must be ascending")
        return value


class SimulateSection(Section):
    replicas: NonNegativeInt = Field(default_factory=_lab("REPLICAS"))
    overflow_fraction: float = Field(1.0, gt=0, le=1)
    sample_every: int = Field(10, ge=1, le=10)
    snapshot_times: Optional[Times] = None
    density_points: int = Field(16, ge=4)
    delta: NonNegativeFloat = 0.0
    write_densities: bool = False
    q_masses: Tuple[PositiveInt, PositiveInt] = (1, 1)
    n_particles_small: NonNegativeInt = 0


class PdeSection(Section):
    mode: Annotated[str, _one_of(("homogeneous", "spatial"))] = "homogeneous"
    dt: PositiveFloat = 0.01
    grid_points: int = Field(32, ge=3)
    boundary: Annotated[str, _one_of(("torus", "zero-flux"))] = "torus"
    beta_scale: PositiveFloat = 0.5
    snapshot_times: Times = []


class ValidateSection(Section):
    checks: List[Annotated[str, _one_of(CHECKS)]] = list(CHECKS)
    test_function: Dict[str, Any] = {"kind": "constant", "amplitude": 1.0}
    compare_times: Optional[Times] = None
    micro_macro_tol: PositiveFloat = 0.2
    stosszahl_tol: PositiveFloat = 0.3
    rate_tol: PositiveFloat = 0.25
    separation: PositiveFloat = 2.0
    mfp_factor: PositiveFloat = 2.0
    improvement: PositiveFloat = 0.8
    bootstrap: NonNegativeInt = 200
    require_hypothesis: bool = False

    @field_validator("checks")
    @classmethod
    def _in_report_order(cls, value):
        return [c for c in CHECKS if c in value]

    @field_validator("test_function")
    @classmethod
    def _buildable(cls, value):
        try:
            _functional(value)
        except TypeError as exc:
            raise ValueError(str(exc)) from exc
        return value


class RunSection(Section):
    pipeline: Annotated[str, _one_of(PIPELINES)] = "full"
    out: str = Field(default_factory=_lab("OUTPUT_DIR"))
    workers: PositiveInt = 1


class CrossSectionError(ValueError):
    """Rules spanning several sections, each reported under its own key."""

    def __init__(self, problems):
        super().__init__("; ".join(f"{s}.{k}: {m}" for s, k, m in problems))
        self.problems = problems


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    params: ParamsSection = Field(default_factory=ParamsSection)
    kernel: KernelSection = Field(default_factory=KernelSection)
    alpha: AlphaSection = Field(default_factory=AlphaSection)
    diffusion: DiffusionSection = Field(default_factory=DiffusionSection)
    initial: InitialSection = Field(default_factory=InitialSection)
    cell: CellSection = Field(default_factory=CellSection)
    simulate: SimulateSection = Field(default_factory=SimulateSection)
    pde: PdeSection = Field(default_factory=PdeSection)
    validate: ValidateSection = Field(default_factory=ValidateSection)
    run: RunSection = Field(default_factory=RunSection)

    @model_validator(mode="after")
    def _cross_section(self):
        problems = []
        self._materialize_times(problems)
        self._materialize_components(problems)
        self._check_stability(problems)
        if problems:
            raise CrossSectionError(problems)
        return self

    def _materialize_times(self, problems):
        horizon = self.params.horizon
        if self.simulate.snapshot_times is None:
            self.simulate.snapshot_times = [0.0, horizon]
        if self.validate.compare_times is None:
            self.validate.compare_times = [0.5 * horizon]
        for section, key in (("simulate", "snapshot_times"), ("pde", "snapshot_times"), ("validate", "compare_times")):
            holder = getattr(self, section)
            times = getattr(holder, key)
            if any(t > horizon for t in times):
                problems.append((section, key, "times must lie in [0, horizon]"))
            setattr(holder, key, sorted(set(times)))

    def _materialize_components(self, problems):
        params, initial = self.params, self.initial
        if initial.components is None:
            initial.components = [ComponentSpec(
                intensity=params.big_z, lo=[0.0] * params.dim, hi=[initial.side] * params.dim,
            )]
        for component in initial.components:
            if component.shape != "grid" and component.intensity is None:
                component.intensity = params.big_z
        densities = core.InitialDensities(
            tuple(_component(c.model_dump(exclude_none=True)) for c in initial.components)
        )
        if densities.dim != params.dim:
            problems.append(("initial", "components", "dimension differs from params.dim"))
        elif abs(densities.big_z - params.big_z) > 1e-9 * params.big_z:
            problems.append(
                ("initial", "components", f"intensities sum to {densities.big_z!r}, not Z = {params.big_z!r}")
            )

    def _check_stability(self, problems):
        if self.pde.mode != "spatial":
            return
        spacing = self.initial.side / self.pde.grid_points
        rates = _diffusion(self.diffusion.model_dump()).evaluate(np.arange(1, self.params.m_max + 1))
        limit = spacing ** 2 / (2.0 * self.params.dim * float(rates.max()))
        if self.pde.dt > limit * (1 + 1e-12):
            problems.append(("pde", "dt", f"exceeds the explicit diffusion bound {limit!r}"))


# ==============================
# Diagnostics
# ==============================

class _Errors:
    """Collects field-keyed messages, annotated with TOML line numbers."""

    def __init__(self, source_text=None):
        self.messages: Dict[str, list] = {}
        self.lines = source_text.splitlines() if source_text else []

    def _line_of(self, section, key):
        current = None
        for number, line in enumerate(self.lines, start=1):
            stripped = line.strip()
            header = re.match(r"^\[\s*([A-Za-z0-9_.]+)\s*\]", stripped)
            if header:
                current = header.group(1)
                continue
            if current == section and re.match(rf"^{re.escape(key)}\s*=", stripped):
                return number
        return None

    def add(self, section, key, message):
        path = f"{section}.{key}" if key else section
        line = self._line_of(section, key) if key else None
        if line:
            message = f"{message} (line {line})"
        self.messages.setdefault(path, []).append(message)

    def collect(self, exc: SchemaError):
        for item in exc.errors():
            cause = item.get("ctx", {}).get("error")
            if isinstance(cause, CrossSectionError):
                for section, key, message in cause.problems:
                    self.add(section, key, message)
                continue
            names = [part for part in item["loc"] if isinstance(part, str)]
            section = names[0] if names else "config"
            key = names[1] if len(names) > 1 else None
            if item["type"] == "extra_forbidden":
                message = "unknown key" if key else "unknown section"
            else:
                message = item["msg"].removeprefix("Value error, ")
            self.add(section, key, message)
        return ValidationError(self.messages)


def validate_dict(data, source_text=None):
    """Plain sections with every default filled in, or a ValidationError keyed by ``section.key``."""
    try:
        model = ExperimentConfig.model_validate(data)
    except SchemaError as exc:
        raise _Errors(source_text).collect(exc) from None
    return model.model_dump(mode="json", exclude_none=True)


# ==============================
# Builders
# ==============================

def _component(item):
    values = item.get("values")
    return core.DensityComponent(
        mass=item["mass"],
        shape=item["shape"],
        intensity=item.get("intensity", 1.0),
        lo=tuple(item["lo"]) if "lo" in item else None,
        hi=tuple(item["hi"]) if "hi" in item else None,
        center=tuple(item["center"]) if "center" in item else None,
        sigma=item.get("sigma", 1.0),
        values=np.asarray(values, dtype=float) if values is not None else None,
    )


def _diffusion(section):
    return core.DiffusionPolicy(
        kind=section["kind"],
        c=section["c"],
        exponent=section["exponent"],
        table=tuple(section["table"]) or None,
    )


def _functional(options):
    from .validation import TestFunctional

    options = dict(options)
    for key in ("center", "lo", "hi"):
        if key in options:
            options[key] = tuple(float(v) for v in options[key])
    return TestFunctional(**options)


def _freeze(value):
    if isinstance(value, Mapping):
        return MappingProxyType({k: _freeze(v) for k, v in value.items()})
    if isinstance(value, list):
        return tuple(_freeze(v) for v in value)
    return value


def _thaw(value):
    if isinstance(value, Mapping):
        return {k: _thaw(v) for k, v in value.items()}
    if isinstance(value, tuple):
        return [_thaw(v) for v in value]
    return value


@dataclass(frozen=True, eq=False)
class RunConfig:
    """Validated experiment configuration with every default materialized."""
    sections: Mapping[str, Mapping[str, Any]]

    def __post_init__(self):
        object.__setattr__(self, "sections", _freeze(dict(self.sections)))

    def __getitem__(self, section):
        return self.sections[section]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.canonical() == other.canonical()

    def __hash__(self):
        return hash(self.config_hash)

    def as_dict(self):
        return _thaw(self.sections)

    def canonical(self):
        return serialize(self)

    @property
    def config_hash(self):
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()

    @property
    def physics_hash(self):
        subset = {k: self.as_dict()[k] for k in PHYSICS_SECTIONS}
        return hashlib.sha256(_canonical_json(subset).encode("utf-8")).hexdigest()

    def replace(self, **changes):
        """New config with ``section__key=value`` changes, validated again."""
        data = self.as_dict()
        for name, value in changes.items():
            section, key = name.split("__", 1)
            data.setdefault(section, {})[key] = value
        scaling = ("params__n_particles", "params__big_z", "params__dim")
        if any(name in changes for name in scaling) and "params__epsilon" not in changes:
            data["params"]["epsilon"] = None
        return RunConfig(validate_dict(data))

    # builders

    def params(self, n_particles=None):
        p = self["params"]
        n = p["n_particles"] if n_particles is None else n_particles
        built = core.build_params(p["dim"], p["big_z"], n, p["tau_factor"], p["horizon"], p["seed"])
        if n_particles is None and built.epsilon != p["epsilon"]:
            return core.SimParams(
                dim=built.dim, big_z=built.big_z, n_particles=built.n_particles,
                epsilon=p["epsilon"], tau=p["tau_factor"] * p["epsilon"] ** 2,
                horizon=built.horizon, seed=built.seed,
            )
        return built

    def kernel(self):
        k = self["kernel"]
        return core.make_kernel(self["params"]["dim"], k["profile"], k["support_radius"], k["taper"])

    def alpha(self):
        a = self["alpha"]
        table = tuple(tuple(row) for row in a["table"]) or None
        return core.RatePolicy(kind=a["kind"], c=a["c"], table=table)

    def diffusion(self):
        return _diffusion(self["diffusion"])

    def model(self):
        return core.CoagulationModel(self.kernel(), self.alpha(), self.diffusion(), self["params"]["m_max"])

    def densities(self):
        return core.InitialDensities(tuple(_component(_thaw(c)) for c in self["initial"]["components"]))

    def domain(self):
        initial = self["initial"]
        if initial["domain"] == "torus":
            return Domain("torus", initial["side"])
        return Domain("free")

    @property
    def volume(self):
        return self["initial"]["side"] ** self["params"]["dim"]

    def delta(self, params=None):
        """Mollifier width; the default is the geometric mean of eps and the box side."""
        if self["simulate"]["delta"] > 0:
            return self["simulate"]["delta"]
        params = params or self.params()
        return math.sqrt(params.epsilon * self["initial"]["side"])

    def test_functional(self):
        return _functional(_thaw(self["validate"]["test_function"]))


# ==============================
# Parsing and serialization
# ==============================

def _canonical_json(data):
    return json.dumps(data, sort_keys=True, indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def serialize(cfg: RunConfig) -> str:
    """Canonical JSON: sorted keys, two-space indent, LF line endings."""
    return _canonical_json(cfg.as_dict())


def env_overrides(environ=None):
    """COAGLAB__SECTION__KEY=value pairs; values are decoded as JSON when possible."""
    environ = os.environ if environ is None else environ
    overrides = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        parts = name[len(ENV_PREFIX):].lower().split("__")
        if len(parts) != 2:
            raise ValidationError({name: ["expected COAGLAB__<SECTION>__<KEY>"]})
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        overrides.setdefault(parts[0], {})[parts[1]] = value
    return overrides


def _merge(data, overrides):
    merged = copy.deepcopy(dict(data))
    for section, values in overrides.items():
        target = merged.setdefault(section, {})
        if isinstance(target, dict):
            target.update(values)
    if "params" in overrides and "epsilon" not in overrides["params"]:
        # a stale derived eps would contradict the new N or Z
        if isinstance(merged.get("params"), dict) and merged["params"].get("epsilon") is not None:
            if any(k in overrides["params"] for k in ("n_particles", "big_z", "dim")):
                merged["params"]["epsilon"] = None
    return merged


def parse_dict(data, source_text=None, environ=None) -> RunConfig:
    overrides = env_overrides(environ) if environ is not None else {}
    return RunConfig(validate_dict(_merge(data, overrides), source_text))


def parse_text(text, fmt="toml", environ=None) -> RunConfig:
    if fmt == "json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValidationError({"file": [f"invalid JSON: {exc.msg} (line {exc.lineno})"]})
        return parse_dict(data, None, environ)
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError({"file": [f"invalid TOML: {exc}"]})
    return parse_dict(data, text, environ)


def parse_config(path, environ: Optional[Mapping[str, str]] = None) -> RunConfig:
    """Read, override from the environment, validate and canonicalize."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ValidationError({"file": [f"cannot read {path}: {exc.strerror}"]})
    fmt = "json" if path.suffix == ".json" else "toml"
    cfg = parse_text(text, fmt, os.environ if environ is None else environ)
    logger.info("loaded %s (config %s)", path, cfg.config_hash[:12])
    return cfg


def default_config(**changes) -> RunConfig:
    return RunConfig(validate_dict({})).replace(**changes) if changes else RunConfig(validate_dict({}))
