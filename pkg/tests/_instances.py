"""Random model generators shared by the test modules."""

import numpy as np

from paoi.core import (
    Deterministic,
    Discipline,
    Exponential,
    Gamma,
    Hyperexponential,
    Linear,
    PiecewiseLinear,
    Power,
    RateBox,
    Uniform,
    build_model,
)

SECTION_BOX = RateBox(0.01, 10.0)


def two_class(discipline="MG11"):
    """Deterministic services 1 and 3, costs 4A^2 and A^2, rates in [0.01, 10]."""
    return build_model([Deterministic(1.0), Deterministic(3.0)],
                       [Power(4.0, 2.0), Power(1.0, 2.0)], SECTION_BOX, discipline)


def random_service(rng):
    kind = rng.integers(5)
    mean = rng.uniform(0.2, 2.0)
    if kind == 0:
        return Exponential(1.0 / mean)
    if kind == 1:
        return Deterministic(mean)
    if kind == 2:
        half = rng.uniform(0.0, 0.9) * mean
        return Uniform(mean - half, mean + half)
    if kind == 3:
        shape = rng.uniform(0.5, 4.0)
        return Gamma(shape, mean / shape)
    p = rng.uniform(0.1, 0.9)
    r1 = rng.uniform(0.5, 4.0) / mean
    # second phase chosen so the mixture mean equals ``mean``
    rest = mean - p / r1
    if rest <= 0:
        return Exponential(1.0 / mean)
    return Hyperexponential((p, 1 - p), (r1, (1 - p) / rest))


def random_cost(rng, linear_only=False):
    kind = 0 if linear_only else rng.integers(3)
    w = rng.uniform(0.5, 5.0)
    if kind == 0:
        return Linear(w)
    if kind == 1:
        return Power(w, rng.uniform(1.0, 3.0))
    knots = np.sort(rng.uniform(1.0, 30.0, size=rng.integers(1, 4)))
    slopes = np.sort(rng.uniform(0.5, 5.0, size=len(knots) + 1))
    return PiecewiseLinear(tuple(knots), tuple(slopes))


def random_model(rng, n=None, discipline=Discipline.MG1, linear_only=False, box=None):
    n = int(rng.integers(1, 4)) if n is None else n
    services = [random_service(rng) for _ in range(n)]
    costs = [random_cost(rng, linear_only) for _ in range(n)]
    if box is None:
        lo = rng.uniform(0.005, 0.05)
        box = RateBox(lo, lo * rng.uniform(20, 400))
    return build_model(services, costs, box, discipline)


def random_stable_rates(rng, model, load):
    """Random direction scaled so the total load equals ``load``."""
    weights = rng.uniform(0.2, 1.0, size=model.n)
    return weights * load / float(weights @ model.x)
