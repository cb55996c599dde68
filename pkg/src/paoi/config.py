"""Scenario documents: JSON in, validated model + settings out, and back again."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .core import (
    Deterministic,
    Discipline,
    EntityClass,
    Exponential,
    Gamma,
    Hyperexponential,
    Linear,
    ModelError,
    PiecewiseLinear,
    Power,
    RateBox,
    SystemModel,
    Uniform,
    as_rates,
)
from .opt import BisectionSettings, GridSettings
from .sim import SimConfig


class ConfigError(ValueError):
    def __init__(self, location: str, message: str):
        self.location = location
        super().__init__(f"{location}: {message}")


SERVICES = {
    "exponential": (Exponential, ("rate",)),
    "deterministic": (Deterministic, ("value",)),
    "uniform": (Uniform, ("low", "high")),
    "gamma": (Gamma, ("shape", "scale")),
    "hyperexponential": (Hyperexponential, ("weights", "rates")),
}
COSTS = {
    "linear": (Linear, ("weight",)),
    "power": (Power, ("weight", "exponent")),
    "piecewise_linear": (PiecewiseLinear, ("knots", "slopes")),
}


@dataclass
class Outputs:
    dir: str = "out"
    format: str = "table"
    precision: int = 6
    timestamp: bool = True
    event_log: bool = False
    cost_surface: bool = False
    surface_points: int = 100


@dataclass
class Scenario:
    id: str
    model: SystemModel
    rates: list[float] | None = None
    sim: SimConfig = field(default_factory=SimConfig)
    bisection: BisectionSettings = field(default_factory=BisectionSettings)
    grid: GridSettings = field(default_factory=GridSettings)
    grid_oracle: bool = False
    outputs: Outputs = field(default_factory=Outputs)

    def to_dict(self) -> dict[str, Any]:
        """Fully resolved document (every default spelled out)."""
        return {
            "id": self.id,
            "system": {
                "discipline": self.model.discipline.value,
                "box": {"lambda_min": self.model.box.lambda_min,
                        "lambda_max": self.model.box.lambda_max},
                "classes": [{"service": _spec_of(c.service, SERVICES),
                             "cost": _spec_of(c.cost, COSTS)} for c in self.model.classes],
            },
            "rates": None if self.rates is None else list(self.rates),
            "sim": dataclasses.asdict(self.sim),
            "opt": {**dataclasses.asdict(self.bisection),
                    "grid": {k: v for k, v in dataclasses.asdict(self.grid).items() if k != "chunk"},
                    "grid_oracle": self.grid_oracle},
            "outputs": dataclasses.asdict(self.outputs),
        }


def _spec_of(obj, table) -> dict[str, Any]:
    for name, (kind, fields) in table.items():
        if type(obj) is kind:
            out = {"type": name}
            for f in fields:
                value = getattr(obj, f)
                out[f] = list(value) if isinstance(value, tuple) else value
            return out
    raise TypeError(f"no document form for {obj!r}")


def _mapping(doc, loc: str, allowed, required=()) -> dict:
    if not isinstance(doc, dict):
        raise ConfigError(loc, f"expected an object, got {type(doc).__name__}")
    for key in doc:
        if key not in allowed:
            raise ConfigError(f"{loc}.{key}" if loc else key, "unknown field")
    for key in required:
        if key not in doc:
            raise ConfigError(f"{loc}.{key}" if loc else key, "missing required field")
    return doc


def _number(value, loc: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(loc, f"expected a number, got {value!r}")
    return float(value)


def _integer(value, loc: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(loc, f"expected an integer, got {value!r}")
    return value


def _typed(doc, loc: str, table, what: str):
    doc = _mapping(doc, loc, {"type", *{f for _, fs in table.values() for f in fs}}, ("type",))
    name = doc["type"]
    if name not in table:
        raise ConfigError(f"{loc}.type", f"unknown {what} {name!r}; choose from {sorted(table)}")
    kind, fields = table[name]
    _mapping(doc, loc, {"type", *fields}, fields)
    args = []
    for f in fields:
        value = doc[f]
        if isinstance(value, list):
            args.append(tuple(_number(v, f"{loc}.{f}[{i}]") for i, v in enumerate(value)))
        else:
            args.append(_number(value, f"{loc}.{f}"))
    try:
        return kind(*args)
    except (ModelError, ValueError) as exc:
        raise ConfigError(loc, str(exc)) from None


def _section(doc, loc: str, cls, converters: dict):
    """Build dataclass ``cls`` from ``doc``, converting each present field."""
    doc = _mapping(doc, loc, set(converters))
    kwargs = {}
    for key, value in doc.items():
        conv = converters[key]
        if value is None and conv in (_number, _integer):
            kwargs[key] = None
        else:
            kwargs[key] = conv(value, f"{loc}.{key}")
    try:
        return cls(**kwargs)
    except (ModelError, ValueError) as exc:
        raise ConfigError(loc, str(exc)) from None


def _boolean(value, loc: str) -> bool:
    if not isinstance(value, bool):
        raise ConfigError(loc, f"expected true/false, got {value!r}")
    return value


def _string(value, loc: str) -> str:
    if not isinstance(value, str):
        raise ConfigError(loc, f"expected a string, got {value!r}")
    return value


def parse_scenario(doc: dict) -> Scenario:
    """Validate a scenario document; errors name the offending field."""
    doc = _mapping(doc, "", {"id", "system", "rates", "sim", "opt", "outputs"}, ("system",))
    system = _mapping(doc["system"], "system", {"discipline", "box", "classes"}, ("box", "classes"))
    disc = system.get("discipline", "MG1")
    if disc not in {d.value for d in Discipline}:
        raise ConfigError("system.discipline", f"expected MG1 or MG11, got {disc!r}")
    box_doc = _mapping(system["box"], "system.box", {"lambda_min", "lambda_max"},
                       ("lambda_min", "lambda_max"))
    try:
        box = RateBox(_number(box_doc["lambda_min"], "system.box.lambda_min"),
                      _number(box_doc["lambda_max"], "system.box.lambda_max"))
    except ModelError as exc:
        raise ConfigError("system.box", str(exc)) from None
    classes_doc = system["classes"]
    if not isinstance(classes_doc, list) or not classes_doc:
        raise ConfigError("system.classes", "expected a non-empty list")
    classes = []
    for i, item in enumerate(classes_doc):
        loc = f"system.classes[{i}]"
        item = _mapping(item, loc, {"service", "cost"}, ("service", "cost"))
        classes.append(EntityClass(i + 1, _typed(item["service"], f"{loc}.service", SERVICES, "service"),
                                   _typed(item["cost"], f"{loc}.cost", COSTS, "cost")))
    model = SystemModel(tuple(classes), box, Discipline(disc))

    rates = doc.get("rates")
    if rates is not None:
        if not isinstance(rates, list):
            raise ConfigError("rates", "expected a list of numbers")
        rates = [_number(r, f"rates[{i}]") for i, r in enumerate(rates)]
        try:
            as_rates(model, rates)
        except ModelError as exc:
            raise ConfigError("rates", str(exc)) from None

    sim_doc = dict(_mapping(doc.get("sim", {}), "sim", set(dataclasses.asdict(SimConfig()))))
    if sim_doc.get("target_deliveries") is not None and "horizon" not in sim_doc:
        sim_doc["horizon"] = None
    sim = _section(sim_doc, "sim", SimConfig, {
        "horizon": _number, "target_deliveries": _integer, "warmup_fraction": _number,
        "replications": _integer, "seed": _integer, "arrivals": _string,
        "capture_log": _boolean, "confidence": _number,
    })
    opt_doc = dict(_mapping(doc.get("opt", {}), "opt",
                            {"epsilon", "rel_tol", "max_iterations", "fixed_point_tol",
                             "fixed_point_max_iters", "grid", "grid_oracle"}))
    grid = _section(opt_doc.pop("grid", {}), "opt.grid", GridSettings, {
        "points_per_dimension": _integer, "refine": _boolean, "refine_factor": _integer,
        "refine_levels": _integer, "max_refine_passes": _integer,
    })
    grid_oracle = _boolean(opt_doc.pop("grid_oracle", False), "opt.grid_oracle")
    bisection = _section(opt_doc, "opt", BisectionSettings, {
        "epsilon": _number, "rel_tol": _number, "max_iterations": _integer,
        "fixed_point_tol": _number, "fixed_point_max_iters": _integer,
    })
    outputs = _section(doc.get("outputs", {}), "outputs", Outputs, {
        "dir": _string, "format": _string, "precision": _integer, "timestamp": _boolean,
        "event_log": _boolean, "cost_surface": _boolean, "surface_points": _integer,
    })
    if outputs.format not in ("table", "object"):
        raise ConfigError("outputs.format", f"expected 'table' or 'object', got {outputs.format!r}")
    if outputs.precision < 1:
        raise ConfigError("outputs.precision", "must be >= 1")
    if outputs.surface_points < 2:
        raise ConfigError("outputs.surface_points", "must be >= 2")
    scenario_id = _string(doc.get("id", "scenario"), "id")
    return Scenario(scenario_id, model, rates, sim, bisection, grid, grid_oracle, outputs)


def load_scenario(path) -> Scenario:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read config: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}", f"invalid JSON: {exc.msg}") from None
    return parse_scenario(doc)
