"""Domain types: service-time laws, cost functions, and the system model."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Sequence, Union

import numpy as np


class ModelError(ValueError):
    """Invalid model parameters (rejected at construction)."""


class InstabilityError(ValueError):
    """The M/G/1 load is at or beyond the stability boundary."""

    def __init__(self, rho: float, message: str | None = None):
        self.rho = float(rho)
        super().__init__(message or f"unstable system: rho={self.rho:.6g} >= 1")


class Discipline(str, Enum):
    MG1 = "MG1"    # FCFS, infinite buffer
    MG11 = "MG11"  # no buffer: arrivals during a service are dropped


def _positive(name: str, value: float) -> float:
    value = float(value)
    if not (value > 0 and math.isfinite(value)):
        raise ModelError(f"{name} must be positive and finite, got {value!r}")
    return value


# -- service-time distributions ------------------------------------------------

@dataclass(frozen=True)
class Exponential:
    rate: float

    def __post_init__(self):
        object.__setattr__(self, "rate", _positive("rate", self.rate))

    @property
    def mean(self) -> float:
        return 1.0 / self.rate

    @property
    def second_moment(self) -> float:
        return 2.0 / self.rate**2

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.exponential(1.0 / self.rate, size)


@dataclass(frozen=True)
class Deterministic:
    value: float

    def __post_init__(self):
        object.__setattr__(self, "value", _positive("value", self.value))

    @property
    def mean(self) -> float:
        return self.value

    @property
    def second_moment(self) -> float:
        return self.value**2

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return np.full(size, self.value)


@dataclass(frozen=True)
class Uniform:
    low: float
    high: float

    def __post_init__(self):
        low, high = float(self.low), float(self.high)
        if not (0.0 <= low < high and math.isfinite(high)):
            raise ModelError(f"uniform needs 0 <= low < high, got ({low}, {high})")
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)

    @property
    def mean(self) -> float:
        return 0.5 * (self.low + self.high)

    @property
    def second_moment(self) -> float:
        a, b = self.low, self.high
        return (a * a + a * b + b * b) / 3.0

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.uniform(self.low, self.high, size)


@dataclass(frozen=True)
class Gamma:
    shape: float
    scale: float

    def __post_init__(self):
        object.__setattr__(self, "shape", _positive("shape", self.shape))
        object.__setattr__(self, "scale", _positive("scale", self.scale))

    @property
    def mean(self) -> float:
        return self.shape * self.scale

    @property
    def second_moment(self) -> float:
        return self.shape * (self.shape + 1.0) * self.scale**2

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.gamma(self.shape, self.scale, size)


@dataclass(frozen=True)
class Hyperexponential:
    """Mixture of exponentials: phase i is chosen with probability weights[i]."""

    weights: tuple[float, ...]
    rates: tuple[float, ...]

    def __post_init__(self):
        weights = tuple(float(w) for w in self.weights)
        rates = tuple(_positive("rate", r) for r in self.rates)
        if not weights or len(weights) != len(rates):
            raise ModelError("hyperexponential needs equally many weights and rates")
        if any(w < 0 for w in weights) or abs(sum(weights) - 1.0) > 1e-9:
            raise ModelError(f"weights must be nonnegative and sum to 1, got {weights}")
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "rates", rates)

    @property
    def mean(self) -> float:
        return sum(p / mu for p, mu in zip(self.weights, self.rates))

    @property
    def second_moment(self) -> float:
        return sum(2.0 * p / mu**2 for p, mu in zip(self.weights, self.rates))

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        phase = rng.choice(len(self.weights), size=size, p=self.weights)
        scales = 1.0 / np.asarray(self.rates)
        return rng.exponential(1.0, size) * scales[phase]


ServiceDistribution = Union[Exponential, Deterministic, Uniform, Gamma, Hyperexponential]


def moments(dist: ServiceDistribution) -> tuple[float, float]:
    """Return the exact (mean, second moment) of a service-time law."""
    return dist.mean, dist.second_moment


# -- cost functions --------------------------------------------------------------

def _check_age(age):
    if np.any(np.asarray(age) < 0):
        raise ValueError(f"age must be nonnegative, got {age!r}")


def _shrink_until(cost, age: float, t: float) -> float:
    # closed forms can overshoot by an ulp; step down so that cost(age) <= t holds exactly
    while age > 0 and cost(age) > t:
        age = math.nextafter(age, 0.0)
    return age


@dataclass(frozen=True)
class Linear:
    weight: float

    def __post_init__(self):
        object.__setattr__(self, "weight", _positive("weight", self.weight))

    def __call__(self, age):
        _check_age(age)
        return self.weight * age

    def inverse(self, t: float) -> float:
        if t < 0:
            raise ValueError("cost level must be nonnegative")
        if math.isinf(t):
            return math.inf
        return _shrink_until(self, t / self.weight, t)

    def beta(self, age_max: float) -> float:
        return self.weight


@dataclass(frozen=True)
class Power:
    """C(A) = weight * A**exponent with exponent >= 1."""

    weight: float
    exponent: float

    def __post_init__(self):
        object.__setattr__(self, "weight", _positive("weight", self.weight))
        exponent = float(self.exponent)
        if not (exponent >= 1.0 and math.isfinite(exponent)):
            raise ModelError(f"exponent must be >= 1, got {exponent!r}")
        object.__setattr__(self, "exponent", exponent)

    def __call__(self, age):
        _check_age(age)
        return self.weight * np.power(age, self.exponent)

    def inverse(self, t: float) -> float:
        if t < 0:
            raise ValueError("cost level must be nonnegative")
        if math.isinf(t):
            return math.inf
        return _shrink_until(self, (t / self.weight) ** (1.0 / self.exponent), t)

    def beta(self, age_max: float) -> float:
        return self.weight * self.exponent * age_max ** (self.exponent - 1.0)


@dataclass(frozen=True)
class PiecewiseLinear:
    """Convex piecewise-linear cost through the origin.

    ``slopes[0]`` applies on ``[0, knots[0]]``, ``slopes[i]`` on
    ``[knots[i-1], knots[i]]`` and the last slope continues to infinity, so
    ``len(slopes) == len(knots) + 1``.
    """

    knots: tuple[float, ...]
    slopes: tuple[float, ...]
    tol: float = field(default=1e-10, compare=False)

    def __post_init__(self):
        knots = tuple(float(k) for k in self.knots)
        slopes = tuple(float(s) for s in self.slopes)
        if len(slopes) != len(knots) + 1:
            raise ModelError("piecewise-linear cost needs len(slopes) == len(knots) + 1")
        if any(k <= 0 for k in knots[:1]) or any(b <= a for a, b in zip(knots, knots[1:])):
            raise ModelError(f"knots must be positive and strictly increasing, got {knots}")
        if slopes[0] <= 0 or any(b < a for a, b in zip(slopes, slopes[1:])):
            raise ModelError(f"slopes must be positive and nondecreasing, got {slopes}")
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "slopes", slopes)

    @cached_property
    def _knot_values(self) -> np.ndarray:
        widths = np.diff(np.concatenate(([0.0], self.knots)))
        return np.concatenate(([0.0], np.cumsum(np.asarray(self.slopes[:-1]) * widths)))

    def __call__(self, age):
        _check_age(age)
        a = np.asarray(age, dtype=float)
        edges = np.concatenate(([0.0], self.knots))
        seg = np.clip(np.searchsorted(edges, a, side="right") - 1, 0, len(self.knots))
        with np.errstate(invalid="ignore"):
            out = self._knot_values[seg] + np.asarray(self.slopes)[seg] * (a - edges[seg])
        out = np.where(np.isinf(a), np.inf, out)
        return float(out) if out.ndim == 0 else out

    def inverse(self, t: float) -> float:
        if t < 0:
            raise ValueError("cost level must be nonnegative")
        if math.isinf(t):
            return math.inf
        lo, hi = 0.0, max(1.0, self.knots[-1] if self.knots else 1.0)
        while self(hi) <= t:
            lo, hi = hi, 2.0 * hi
        # relative stop: at large ages the float spacing exceeds any absolute tolerance
        while hi - lo > self.tol * max(1.0, hi):
            mid = 0.5 * (lo + hi)
            if mid in (lo, hi):
                break
            if self(mid) <= t:
                lo = mid
            else:
                hi = mid
        return lo

    def beta(self, age_max: float) -> float:
        # slopes are nondecreasing, so the steepest piece on [0, age_max] is the one holding age_max
        seg = int(np.searchsorted(np.asarray(self.knots), age_max, side="left"))
        return self.slopes[seg]


CostFunction = Union[Linear, Power, PiecewiseLinear]


def cost_eval(cost: CostFunction, age):
    return cost(age)


def cost_inverse(cost: CostFunction, t: float) -> float:
    """Largest age whose cost does not exceed ``t``."""
    return cost.inverse(t)


def cost_beta(cost: CostFunction, age_max: float) -> float:
    """Lipschitz constant of ``cost`` on ``[0, age_max]``."""
    return cost.beta(age_max)


# -- system model ----------------------------------------------------------------

@dataclass(frozen=True)
class EntityClass:
    id: int
    service: ServiceDistribution
    cost: CostFunction


@dataclass(frozen=True)
class RateBox:
    lambda_min: float
    lambda_max: float

    def __post_init__(self):
        lo = _positive("lambda_min", self.lambda_min)
        hi = _positive("lambda_max", self.lambda_max)
        if hi < lo:
            raise ModelError(f"lambda_max ({hi}) < lambda_min ({lo})")
        object.__setattr__(self, "lambda_min", lo)
        object.__setattr__(self, "lambda_max", hi)

    def contains(self, rates, slack: float = 0.0) -> bool:
        r = np.asarray(rates, dtype=float)
        return bool(np.all(r >= self.lambda_min * (1 - slack)) and np.all(r <= self.lambda_max * (1 + slack)))


@dataclass(frozen=True)
class SystemModel:
    classes: tuple[EntityClass, ...]
    box: RateBox
    discipline: Discipline = Discipline.MG1

    def __post_init__(self):
        classes = tuple(self.classes)
        if not classes:
            raise ModelError("a system needs at least one class")
        ids = [c.id for c in classes]
        if ids != list(range(1, len(classes) + 1)):
            raise ModelError(f"class ids must be 1..N in order, got {ids}")
        object.__setattr__(self, "classes", classes)
        object.__setattr__(self, "discipline", Discipline(self.discipline))

    @property
    def n(self) -> int:
        return len(self.classes)

    @cached_property
    def x(self) -> np.ndarray:
        out = np.array([c.service.mean for c in self.classes])
        out.flags.writeable = False
        return out

    @cached_property
    def y(self) -> np.ndarray:
        out = np.array([c.service.second_moment for c in self.classes])
        out.flags.writeable = False
        return out

    @property
    def costs(self) -> list[CostFunction]:
        return [c.cost for c in self.classes]

    def with_discipline(self, discipline: Discipline | str) -> "SystemModel":
        return SystemModel(self.classes, self.box, Discipline(discipline))


def build_model(
    services: Sequence[ServiceDistribution],
    costs: Sequence[CostFunction],
    box: RateBox,
    discipline: Discipline | str = Discipline.MG1,
) -> SystemModel:
    if len(services) != len(costs):
        raise ModelError("need one cost per service distribution")
    classes = tuple(EntityClass(i + 1, s, c) for i, (s, c) in enumerate(zip(services, costs)))
    return SystemModel(classes, box, Discipline(discipline))


def as_rates(model: SystemModel, rates, boxed: bool = False) -> np.ndarray:
    """Validate a rate vector against ``model`` and return it as a float array."""
    lam = np.asarray(rates, dtype=float)
    if lam.shape != (model.n,):
        raise ModelError(f"expected {model.n} rates, got shape {lam.shape}")
    if not np.all(lam > 0) or not np.all(np.isfinite(lam)):
        raise ModelError(f"rates must be positive and finite, got {lam}")
    if boxed and not model.box.contains(lam, slack=1e-12):
        raise ModelError(f"rates {lam} outside [{model.box.lambda_min}, {model.box.lambda_max}]")
    return lam
