"""Update-rate optimisation: minimise the largest per-class cost of peak age over the rate box.

The M/G/1/1 problem is quasiconvex and is solved exactly by bisection on the
cost level. The M/G/1 problem is not. It is approached in two ways: bisection
on the surrogate ``B_n``, and a brute-force grid oracle.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple

import numpy as np

from .analytic import DELTA_STAB, b_surrogate, paoi_mg1, paoi_mg11, utilization
from .core import Discipline, Linear, ModelError, SystemModel, as_rates

log = logging.getLogger(__name__)


class Status(str, Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"


@dataclass(frozen=True)
class BisectionSettings:
    """Stopping rules for the level bisection and the inner fixed-point solve.

    With ``epsilon=None`` the bisection stops once ``u - l <= rel_tol * u``;
    an explicit ``epsilon`` is an absolute gap on the cost level instead.
    """

    epsilon: float | None = None
    rel_tol: float = 1e-9
    max_iterations: int = 200
    fixed_point_tol: float = 1e-10
    fixed_point_max_iters: int = 100_000

    def __post_init__(self):
        if self.epsilon is not None and not self.epsilon > 0:
            raise ModelError("epsilon must be positive")
        if not (self.rel_tol > 0 and self.max_iterations > 0 and self.fixed_point_tol > 0
                and self.fixed_point_max_iters > 0):
            raise ModelError("bisection settings must be positive")


@dataclass(frozen=True)
class GridSettings:
    points_per_dimension: int = 400
    refine: bool = True
    refine_factor: int = 10
    refine_levels: int = 3
    max_refine_passes: int = 200
    chunk: int = 2_000_000  # grid points evaluated per vectorised batch

    def __post_init__(self):
        if self.points_per_dimension < 2:
            raise ModelError("points_per_dimension must be >= 2")
        if self.refine_levels < 1 or self.max_refine_passes < 1:
            raise ModelError("refine_levels and max_refine_passes must be >= 1")
        if self.refine_factor < 2:
            raise ModelError("refine_factor must be >= 2")


@dataclass
class OptimizeResult:
    rates: np.ndarray | None
    paoi: np.ndarray | None
    sys_cost: float
    iterations: int
    status: Status
    argmax: int | None = None
    surrogate_cost: float | None = None
    info: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status == Status.OPTIMAL


class SysCost(NamedTuple):
    cost: float
    argmax: int | None  # class id attaining the maximum (lowest id on ties)
    stable: bool


def paoi(model: SystemModel, rates) -> np.ndarray:
    """Peak-age vector under the model's own discipline."""
    if model.discipline == Discipline.MG11:
        return paoi_mg11(model, rates)
    return paoi_mg1(model, rates)


def class_costs(model: SystemModel, ages) -> np.ndarray:
    return np.array([float(c(float(a))) for c, a in zip(model.costs, ages)])


def sys_cost(model: SystemModel, rates) -> SysCost:
    """Largest per-class cost at ``rates``; ``(inf, None, False)`` for an unstable M/G/1."""
    lam = as_rates(model, rates)
    if model.discipline == Discipline.MG1 and not utilization(model, lam).stable:
        return SysCost(math.inf, None, False)
    costs = class_costs(model, paoi(model, lam))
    k = int(np.argmax(costs))
    return SysCost(float(costs[k]), k + 1, True)


def _caps(model: SystemModel, t: float) -> np.ndarray:
    return np.array([c.inverse(t) for c in model.costs])


def _level_search(feasible, lo: float, hi: float, settings: BisectionSettings):
    """Bisection on the cost level; ``feasible(t)`` returns rates or None."""
    best = feasible(hi)
    if best is None:
        return None, hi, 0
    iterations = 0
    while iterations < settings.max_iterations:
        gap = hi - lo
        if gap <= (settings.epsilon if settings.epsilon is not None else settings.rel_tol * hi):
            break
        t = 0.5 * (lo + hi)
        found = feasible(t)
        if found is None:
            lo = t
        else:
            hi, best = t, found
        iterations += 1
    return best, hi, iterations


# -- M/G/1/1 ---------------------------------------------------------------------

def feasible_mg11(model: SystemModel, t: float, settings: BisectionSettings | None = None,
                  trace: list | None = None) -> np.ndarray | None:
    """Least rate vector in the box whose M/G/1/1 peak ages meet the caps implied by level ``t``.

    ``A_n <= a_n`` is ``lambda_n >= (1 + sum_k lambda_k x_k) / (a_n - x_n)``, so
    the componentwise-monotone map ``lambda -> max(lambda_min, rhs)`` is iterated
    upward from ``lambda_min``. It stops at the least fixed point or as soon as
    any component exceeds ``lambda_max`` (then nothing is feasible). Returns
    ``None`` when infeasible. Iterates are appended to ``trace`` if given.
    """
    settings = settings or BisectionSettings()
    if t < 0:
        raise ValueError("cost level must be nonnegative")
    box, x = model.box, model.x
    caps = _caps(model, t)
    # even at lambda_max with a negligible load term, A_n > x_n + 1/lambda_max
    if np.any(caps <= x + 1.0 / box.lambda_max):
        return None
    room = caps - x
    lam = np.full(model.n, box.lambda_min)
    if trace is not None:
        trace.append(lam.copy())
    for _ in range(settings.fixed_point_max_iters):
        nxt = np.maximum(box.lambda_min, (1.0 + lam @ x) / room)
        if trace is not None:
            trace.append(nxt.copy())
        if np.any(nxt > box.lambda_max):
            return None
        done = np.all(nxt - lam <= settings.fixed_point_tol * nxt)
        lam = nxt
        if done:
            break
    else:
        log.debug("fixed point did not settle within %d iterations at t=%g",
                  settings.fixed_point_max_iters, t)
        return None
    ages = paoi_mg11(model, lam)
    if np.any(ages > caps * (1.0 + 1e-9)):
        return None
    return lam


def upper_level_mg11(model: SystemModel) -> float:
    """Initial bisection upper bound, a cost level that the box always attains."""
    x_max = float(model.x.max())
    box = model.box
    age = x_max + (1.0 + model.n * box.lambda_max * x_max) / box.lambda_min
    return max(float(c(age)) for c in model.costs)


def scale_to_box(model: SystemModel, rates) -> np.ndarray:
    """Scale all rates by one common factor until the largest equals ``lambda_max``."""
    lam = as_rates(model, rates)
    top = lam.max()
    lam_max = model.box.lambda_max
    scaled = np.minimum(lam * (lam_max / top), lam_max)
    scaled[lam == top] = lam_max
    return scaled


def optimize_mg11(model: SystemModel, settings: BisectionSettings | None = None) -> OptimizeResult:
    """Minimise the largest class cost for the bufferless queue.

    The bisection returns the least feasible rates at the final level. Those
    rates are then scaled up proportionally so the largest sits at
    ``lambda_max``. That scaling lowers every peak age, so the cost cannot
    rise.
    """
    if model.discipline != Discipline.MG11:
        raise ModelError("optimize_mg11 needs an MG11 model")
    settings = settings or BisectionSettings()
    upper = upper_level_mg11(model)
    lam, level, iterations = _level_search(lambda t: feasible_mg11(model, t, settings),
                                           0.0, upper, settings)
    if lam is None:
        # the box corner lambda_min always meets the initial level
        raise RuntimeError("initial bisection level unexpectedly infeasible")
    lam = scale_to_box(model, lam)
    cost = sys_cost(model, lam)
    return OptimizeResult(lam, paoi_mg11(model, lam), cost.cost, iterations, Status.OPTIMAL,
                          cost.argmax, info={"level": level, "upper_init": upper})


@dataclass(frozen=True)
class Lemma2Report:
    scaled_rates: np.ndarray
    scale: float
    cost_before: float
    cost_after: float
    passed: bool


def check_lemma2_scaling(model: SystemModel, result: OptimizeResult, epsilon: float = 1e-9) -> Lemma2Report:
    """Scale ``result.rates`` proportionally up to the box edge; the cost must not rise."""
    lam = as_rates(model, result.rates)
    scaled = scale_to_box(model, lam)
    before = sys_cost(model, lam).cost
    after = sys_cost(model, scaled).cost
    passed = (after <= before + epsilon * max(1.0, before)
              and scaled.max() == model.box.lambda_max
              and bool(np.all(scaled >= lam)))
    return Lemma2Report(scaled, float(model.box.lambda_max / lam.max()), before, after, passed)


# -- M/G/1 surrogate ---------------------------------------------------------------

def feasible_b(model: SystemModel, t: float) -> np.ndarray | None:
    """Least rates meeting ``B_n <= C_n^{-1}(t)`` for every class, or None.

    The per-class branch gives lower bounds ``lambda_n >= 1/(a_n/2 - x_n)``; the
    shared waiting branch is the linear constraint
    ``sum_j lambda_j (y_j + a* x_j) <= a*`` with ``a* = min a_n``, increasing in
    every rate, so only the smallest admissible vector needs checking.
    """
    if t < 0:
        raise ValueError("cost level must be nonnegative")
    box, x, y = model.box, model.x, model.y
    caps = _caps(model, t)
    half = caps / 2.0 - x
    if np.any(half <= 0):
        return None
    lam = np.maximum(box.lambda_min, 1.0 / half)
    if np.any(lam > box.lambda_max):
        return None
    a_star = float(caps.min())
    if not math.isfinite(a_star):
        return lam if utilization(model, lam).stable else None
    if lam @ x >= 1.0 - DELTA_STAB or lam @ (y + a_star * x) > a_star:
        return None
    return lam


def optimize_mg1_approx(model: SystemModel, settings: BisectionSettings | None = None) -> OptimizeResult:
    """Bisection on ``max_n C_n(B_n)``; reports the surrogate and the true M/G/1 cost."""
    settings = settings or BisectionSettings()
    mg1 = model.with_discipline(Discipline.MG1)
    corner = np.full(model.n, model.box.lambda_min)
    if not utilization(mg1, corner).stable:
        return OptimizeResult(None, None, math.inf, 0, Status.INFEASIBLE,
                              info={"reason": "box lower corner already unstable"})
    upper = float(max(c(b) for c, b in zip(model.costs, b_surrogate(mg1, corner))))
    lam, level, iterations = _level_search(lambda t: feasible_b(mg1, t), 0.0, upper, settings)
    if lam is None:
        return OptimizeResult(None, None, math.inf, iterations, Status.INFEASIBLE,
                              info={"reason": "surrogate infeasible at initial level"})
    true = sys_cost(mg1, lam)
    surrogate = float(class_costs(mg1, b_surrogate(mg1, lam)).max())
    return OptimizeResult(lam, paoi_mg1(mg1, lam), true.cost, iterations, Status.OPTIMAL,
                          true.argmax, surrogate_cost=surrogate, info={"level": level})


# -- grid oracle ---------------------------------------------------------------------

def _grid_costs(model: SystemModel, points: np.ndarray) -> np.ndarray:
    """System cost at each row of ``points`` (shape (P, N)); +inf where M/G/1 is unstable."""
    x, y = model.x, model.y
    rho = points @ x
    if model.discipline == Discipline.MG11:
        ages = x + (1.0 + rho)[:, None] / points
        ok = np.ones(len(points), dtype=bool)
    else:
        ok = rho < 1.0 - DELTA_STAB
        wait = np.full(len(points), np.inf)
        wait[ok] = (points[ok] @ y) / (2.0 * (1.0 - rho[ok]))
        ages = 1.0 / points + x + wait[:, None]
    costs = np.full(len(points), np.inf)
    if np.any(ok):
        per_class = np.column_stack([c(ages[ok, k]) for k, c in enumerate(model.costs)])
        costs[ok] = per_class.max(axis=1)
    return costs


def _best_on_axes(model: SystemModel, axes: list[np.ndarray], chunk: int) -> tuple[float, np.ndarray | None]:
    """Exhaustive minimum over the product of ``axes``; ties go to the lexicographically smallest point."""
    shape = tuple(len(a) for a in axes)
    total = int(np.prod(shape))
    best_cost, best_flat = math.inf, None
    for start in range(0, total, chunk):
        flat = np.arange(start, min(start + chunk, total))
        idx = np.unravel_index(flat, shape)
        pts = np.column_stack([axes[k][idx[k]] for k in range(len(axes))])
        costs = _grid_costs(model, pts)
        j = int(np.argmin(costs))
        if costs[j] < best_cost:
            best_cost, best_flat = float(costs[j]), int(flat[j])
    if best_flat is None:
        return math.inf, None
    idx = np.unravel_index(best_flat, shape)
    return best_cost, np.array([axes[k][idx[k]] for k in range(len(axes))])


def _grid_upper(model: SystemModel) -> list[float]:
    """Per-axis grid ceiling: ``lambda_max``, cut for M/G/1 to the largest rate that
    can still be stable with every other class at ``lambda_min``."""
    box = model.box
    if model.discipline == Discipline.MG11:
        return [box.lambda_max] * model.n
    x = model.x
    others = box.lambda_min * (x.sum() - x)
    reach = (1.0 - others) / x
    return [float(min(box.lambda_max, max(box.lambda_min, r))) for r in reach]


def grid_search(model: SystemModel, grid: GridSettings | None = None) -> OptimizeResult:
    """Brute-force minimum of the system cost over a uniform grid on the box.

    Uses the model's discipline. Unstable M/G/1 points cost +inf; for M/G/1
    each axis stops where the class alone would saturate the server, since
    every point beyond is unstable. With
    ``refine``, the coarse winner is followed by ``refine_levels`` zoom levels.
    Each level searches a window one cell wide on either side, at a lattice
    ``refine_factor`` times finer than the previous level. The window moves
    onto the new winner for as long as that winner lands on the window's edge.
    """
    grid = grid or GridSettings()
    box = model.box
    axes = [np.linspace(box.lambda_min, hi, grid.points_per_dimension) for hi in _grid_upper(model)]
    cost, best = _best_on_axes(model, axes, grid.chunk)
    evaluations = grid.points_per_dimension ** model.n
    if best is None:
        return OptimizeResult(None, None, math.inf, evaluations, Status.INFEASIBLE,
                              info={"reason": "no stable grid point"})
    steps = np.array([a[1] - a[0] if len(a) > 1 else 0.0 for a in axes])
    passes = 0
    if grid.refine and np.any(steps > 0):
        unit = np.arange(-grid.refine_factor, grid.refine_factor + 1) / grid.refine_factor
        for level in range(1, grid.refine_levels + 1):
            cells = steps / grid.refine_factor ** (level - 1)
            # the minimax valley can be narrower than the lattice, so each level's window
            # follows its winner while that winner lands on the window edge
            for _ in range(grid.max_refine_passes):
                fine = [np.unique(np.clip(b + c * unit, box.lambda_min, box.lambda_max))
                        for b, c in zip(best, cells)]
                fine_cost, fine_best = _best_on_axes(model, fine, grid.chunk)
                evaluations += int(np.prod([len(f) for f in fine]))
                passes += 1
                if fine_best is None or not fine_cost < cost:
                    break
                cost, best = fine_cost, fine_best
                if not any(b in (f[0], f[-1]) and box.lambda_min < b < box.lambda_max
                           for b, f in zip(best, fine)):
                    break
    check = sys_cost(model, best)
    return OptimizeResult(best, paoi(model, best), check.cost, evaluations, Status.OPTIMAL,
                          check.argmax, info={"grid_cost": cost, "steps": steps.tolist(), "refine_passes": passes})


def grid_search_mg1(model: SystemModel, grid: GridSettings | None = None) -> OptimizeResult:
    """Grid oracle for the exact (non-convex) M/G/1 problem."""
    return grid_search(model.with_discipline(Discipline.MG1), grid)


def cost_surface(model: SystemModel, points: int = 100) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """System cost over a ``points x points`` grid of a two-class box.

    Returns ``(lambda_1 axis, lambda_2 axis, costs[i, j])``.
    """
    if model.n != 2:
        raise ModelError("cost surface export needs exactly two classes")
    axis = np.linspace(model.box.lambda_min, model.box.lambda_max, points)
    pts = np.array(list(itertools.product(axis, axis)))
    return axis, axis.copy(), _grid_costs(model, pts).reshape(points, points)


# -- approximation gap -----------------------------------------------------------

def age_ceiling(model: SystemModel, reference_ages=None) -> float:
    """Upper end of the age range on which cost slopes are measured.

    Largest analytic peak age over the stable corners of the box, raised to
    twice the largest reference age when given. The Lipschitz step
    ``C(2A) <= C(A) + beta * A`` needs slopes up to ``2A``.
    """
    box = model.box
    best = 0.0
    for corner in itertools.product((box.lambda_min, box.lambda_max), repeat=model.n):
        lam = np.array(corner)
        if model.discipline == Discipline.MG1 and not utilization(model, lam).stable:
            continue
        best = max(best, float(paoi(model, lam).max()))
    if reference_ages is not None:
        best = max(best, 2.0 * float(np.max(reference_ages)))
    return best


@dataclass(frozen=True)
class Lemma3Report:
    exact_cost: float
    approx_cost: float
    bound: float
    beta: np.ndarray
    age_max: float
    lower_ok: bool
    upper_ok: bool
    factor2_ok: bool | None  # None unless every cost is linear
    chain: tuple[float, float, float, float]
    chain_ok: bool

    @property
    def passed(self) -> bool:
        return self.lower_ok and self.upper_ok and self.factor2_ok is not False and self.chain_ok


def check_lemma3_gap(model: SystemModel, exact: OptimizeResult, approx: OptimizeResult,
                     slack: float = 0.01) -> Lemma3Report:
    """Check the surrogate's optimality gap against the grid optimum.

    The lower inequality is relaxed by ``slack`` (relative), because the grid
    only over-estimates the true optimum. The upper bounds need no slack for
    the same reason. ``chain`` holds the four costs
    ``C(A(l_B)) <= C(B(l_B)) <= C(B(l*)) <= C(2A(l*))``.
    """
    mg1 = model.with_discipline(Discipline.MG1)
    a_star = np.asarray(exact.paoi, dtype=float)
    age_max = age_ceiling(mg1, a_star)
    beta = np.array([c.beta(age_max) for c in mg1.costs])
    c_exact, c_approx = exact.sys_cost, approx.sys_cost
    bound = c_exact + float(np.max(beta * a_star))
    lower_ok = c_exact <= c_approx * (1.0 + slack)
    upper_ok = c_approx <= bound * (1.0 + 1e-12)
    factor2 = None
    if all(isinstance(c, Linear) for c in mg1.costs):
        factor2 = c_approx <= 2.0 * c_exact * (1.0 + 1e-12)
    chain = (
        c_approx,
        float(class_costs(mg1, b_surrogate(mg1, approx.rates)).max()),
        float(class_costs(mg1, b_surrogate(mg1, exact.rates)).max()),
        float(class_costs(mg1, 2.0 * a_star).max()),
    )
    # the middle link holds only up to the bisection's stopping gap
    tol = 1e-8
    chain_ok = (chain[0] <= chain[1] * (1 + tol)
                and chain[1] <= chain[2] * (1 + tol)
                and chain[2] <= chain[3] * (1 + tol))
    return Lemma3Report(c_exact, c_approx, bound, beta, age_max, lower_ok, upper_ok, factor2,
                        chain, chain_ok)
