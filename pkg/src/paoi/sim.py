"""Seeded simulator for multi-class M/G/1 (FCFS) and M/G/1/1 (drop-if-busy) queues.

Each replication draws class ``n``'s arrival and service times from its own
stream, keyed by ``(replication, n, purpose)`` under the master seed. Adding a
class therefore leaves the other classes' draws unchanged.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from .analytic import DELTA_STAB, GG1Stats, lemma1_bounds
from .core import Discipline, InstabilityError, ModelError, SystemModel, as_rates

log = logging.getLogger(__name__)

_ARRIVALS, _SERVICE = 0, 1


class InsufficientDataError(RuntimeError):
    def __init__(self, class_id: int, message: str | None = None):
        self.class_id = class_id
        super().__init__(message or f"class {class_id} has too few deliveries in the window")


@dataclass(frozen=True)
class SimConfig:
    """Run-length and replication settings.

    Set exactly one of ``horizon`` (simulated time per replication) or
    ``target_deliveries`` (expected post-warmup deliveries of the slowest class).
    ``arrivals="periodic"`` swaps Poisson input for constant interarrivals with
    a random phase. It is a validation mode only.
    """

    horizon: float | None = 1e4
    target_deliveries: int | None = None
    warmup_fraction: float = 0.1
    replications: int = 10
    seed: int = 0
    arrivals: str = "poisson"
    capture_log: bool = False
    confidence: float = 0.95

    def __post_init__(self):
        if (self.horizon is None) == (self.target_deliveries is None):
            raise ModelError("set exactly one of horizon or target_deliveries")
        if self.horizon is not None and not self.horizon > 0:
            raise ModelError(f"horizon must be positive, got {self.horizon}")
        if self.target_deliveries is not None and self.target_deliveries < 2:
            raise ModelError("target_deliveries must be at least 2")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ModelError(f"warmup_fraction must lie in [0, 1), got {self.warmup_fraction}")
        if self.replications < 1:
            raise ModelError("replications must be >= 1")
        if self.seed < 0 or self.seed >= 2**64:
            raise ModelError("seed must be a 64-bit unsigned integer")
        if self.arrivals not in ("poisson", "periodic"):
            raise ModelError(f"unknown arrival mode {self.arrivals!r}")
        if not 0.0 < self.confidence < 1.0:
            raise ModelError("confidence must lie in (0, 1)")


@dataclass
class EventLog:
    """Delivered packets of one replication, in departure order."""

    class_id: np.ndarray
    gen_time: np.ndarray
    service_start: np.ndarray
    departure: np.ndarray
    warmup_time: float = 0.0

    COLUMNS = ("class_id", "gen_time", "service_start", "departure")

    def __len__(self) -> int:
        return len(self.departure)

    def for_class(self, class_id: int) -> tuple[np.ndarray, np.ndarray]:
        """(generation times, departure times) of one class after the warmup."""
        sel = (self.class_id == class_id) & (self.departure >= self.warmup_time)
        return self.gen_time[sel], self.departure[sel]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.COLUMNS)
            for row in zip(self.class_id, self.gen_time, self.service_start, self.departure):
                writer.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])

    @classmethod
    def from_csv(cls, path, warmup_time: float = 0.0) -> "EventLog":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if tuple(header) != cls.COLUMNS:
                raise ValueError(f"unexpected event-log header {header}")
            rows = [tuple(r) for r in reader]
        if not rows:
            empty = np.empty(0)
            return cls(np.empty(0, dtype=int), empty, empty, empty, warmup_time)
        cid, gen, start, dep = zip(*rows)
        return cls(np.array(cid, dtype=int), np.array(gen, dtype=float),
                   np.array(start, dtype=float), np.array(dep, dtype=float), warmup_time)


@dataclass
class SimEstimate:
    """Per-class estimates averaged over replications (arrays indexed by class position)."""

    paoi_mean: np.ndarray
    paoi_halfwidth: np.ndarray
    aoi_mean: np.ndarray
    aoi_halfwidth: np.ndarray
    interarrival_mean: np.ndarray
    interarrival_second_moment: np.ndarray
    sojourn_mean: np.ndarray
    delivered: np.ndarray
    dropped: np.ndarray
    horizon: float
    replicates: dict[str, np.ndarray] = field(repr=False)
    log: EventLog | None = field(default=None, repr=False)

    @property
    def replications(self) -> int:
        return self.replicates["paoi"].shape[0]


def halfwidth(samples: np.ndarray, confidence: float = 0.95, axis: int = 0) -> np.ndarray:
    """Student-t confidence half-width of the mean of independent samples."""
    samples = np.asarray(samples, dtype=float)
    r = samples.shape[axis]
    if r < 2:
        return np.full(np.delete(samples.shape, axis), np.inf)
    q = stats.t.ppf(0.5 + confidence / 2.0, r - 1)
    return q * samples.std(axis=axis, ddof=1) / math.sqrt(r)


def _rng(seed: int, rep: int, cls: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(rep, cls, purpose)))


def _poisson_times(rng: np.random.Generator, lam: float, horizon: float) -> np.ndarray:
    mean_count = lam * horizon
    chunk = int(mean_count + 6.0 * math.sqrt(mean_count) + 16)
    times = np.cumsum(rng.exponential(1.0 / lam, chunk))
    while times[-1] < horizon:
        times = np.concatenate((times, times[-1] + np.cumsum(rng.exponential(1.0 / lam, chunk))))
    return times[times < horizon]


def _periodic_times(rng: np.random.Generator, lam: float, horizon: float) -> np.ndarray:
    phase = rng.uniform(0.0, 1.0 / lam)
    return phase + np.arange(int(math.ceil((horizon - phase) * lam))) / lam


def delivery_rates(model: SystemModel, rates) -> np.ndarray:
    """Long-run deliveries per unit time for each class."""
    lam = as_rates(model, rates)
    if model.discipline == Discipline.MG1:
        return lam
    return lam / (1.0 + float(lam @ model.x))


def resolve_horizon(model: SystemModel, rates, cfg: SimConfig) -> float:
    if cfg.horizon is not None:
        return float(cfg.horizon)
    slowest = float(delivery_rates(model, rates).min())
    return cfg.target_deliveries / slowest / (1.0 - cfg.warmup_fraction)


def _fcfs(arrival: np.ndarray, service: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # D_k = max(a_k, D_{k-1}) + S_k unrolled: D_k = C_k + max_{j<=k}(a_j - C_{j-1}), C = cumsum(S)
    csum = np.cumsum(service)
    departure = csum + np.maximum.accumulate(arrival - (csum - service))
    prev = np.concatenate(([-np.inf], departure[:-1]))
    return np.maximum(arrival, prev), departure


def _bufferless(arrival: np.ndarray, service: np.ndarray) -> np.ndarray:
    """Indices of accepted arrivals; an arrival at the exact departure instant is accepted."""
    # successor of every arrival if it were accepted; only the accepted chain is walked
    successor = np.searchsorted(arrival, arrival + service, side="left")
    successor = np.maximum(successor, np.arange(1, len(arrival) + 1))
    n = len(arrival)
    accepted = []
    i = 0
    while i < n:
        accepted.append(i)
        i = int(successor[i])
    return np.asarray(accepted, dtype=np.int64)


def run_replication(model: SystemModel, rates, horizon: float, seed: int, rep: int,
                    arrivals: str = "poisson") -> tuple[EventLog, np.ndarray, np.ndarray]:
    """Simulate one replication over ``[0, horizon)`` of arrivals.

    Returns the event log of delivered packets plus, for every arrival, its
    generation time and class id (needed for drop accounting).
    """
    lam = as_rates(model, rates)
    draw = _poisson_times if arrivals == "poisson" else _periodic_times
    gens, ids, svcs = [], [], []
    for k, cls in enumerate(model.classes):
        t = draw(_rng(seed, rep, k, _ARRIVALS), float(lam[k]), horizon)
        gens.append(t)
        ids.append(np.full(len(t), cls.id))
        svcs.append(cls.service.sample(_rng(seed, rep, k, _SERVICE), len(t)))
    gen = np.concatenate(gens)
    cid = np.concatenate(ids)
    svc = np.concatenate(svcs)
    order = np.argsort(gen, kind="stable")
    gen, cid, svc = gen[order], cid[order], svc[order]

    if model.discipline == Discipline.MG1:
        start, dep = _fcfs(gen, svc)
        events = EventLog(cid, gen, start, dep)
    else:
        keep = _bufferless(gen, svc)
        events = EventLog(cid[keep], gen[keep], gen[keep], gen[keep] + svc[keep])
    return events, gen, cid


def _class_window_stats(gen: np.ndarray, dep: np.ndarray) -> dict[str, float] | None:
    # the first delivery in the window only anchors the age path; its peak is discarded
    if len(dep) < 2:
        return None
    peaks = dep[1:] - gen[:-1]
    inter = np.diff(gen)
    span = dep[-1] - dep[0]
    # age rises linearly from dep[k-1]-gen[k-1] to dep[k]-gen[k-1] between deliveries
    area = 0.5 * ((dep[:-1] - gen[:-1]) + (dep[1:] - gen[:-1])) * np.diff(dep)
    return {
        "paoi": peaks.mean(),
        "aoi": area.sum() / span if span > 0 else math.nan,
        "interarrival": inter.mean(),
        "interarrival2": (inter * inter).mean(),
        "sojourn": (dep[1:] - gen[1:]).mean(),
        "delivered": float(len(dep)),
    }


def simulate(model: SystemModel, rates, cfg: SimConfig) -> SimEstimate:
    """Estimate per-class peak age, average age and delay by independent replications."""
    lam = as_rates(model, rates)
    if model.discipline == Discipline.MG1:
        rho = float(lam @ model.x)
        if rho >= 1.0 - DELTA_STAB:
            raise InstabilityError(rho, f"cannot simulate unstable M/G/1 (rho={rho:.6g})")
    horizon = resolve_horizon(model, lam, cfg)
    warmup = cfg.warmup_fraction * horizon
    keys = ("paoi", "aoi", "interarrival", "interarrival2", "sojourn", "delivered", "dropped")
    reps = {k: np.empty((cfg.replications, model.n)) for k in keys}
    first_log = None
    for r in range(cfg.replications):
        events, all_gen, all_cid = run_replication(model, lam, horizon, cfg.seed, r, cfg.arrivals)
        events.warmup_time = warmup
        if r == 0 and cfg.capture_log:
            first_log = events
        for k, cls in enumerate(model.classes):
            g, d = events.for_class(cls.id)
            row = _class_window_stats(g, d)
            if row is None:
                raise InsufficientDataError(cls.id, f"class {cls.id} delivered {len(d)} packets "
                                                    f"after warmup in replication {r}")
            arrived = int(np.count_nonzero((all_cid == cls.id) & (all_gen >= warmup)))
            accepted = int(np.count_nonzero(g >= warmup))
            row["dropped"] = float(arrived - accepted)
            for key in keys:
                reps[key][r, k] = row[key]
    log.debug("simulated %d replications of horizon %.4g", cfg.replications, horizon)
    return SimEstimate(
        paoi_mean=reps["paoi"].mean(axis=0),
        paoi_halfwidth=halfwidth(reps["paoi"], cfg.confidence),
        aoi_mean=reps["aoi"].mean(axis=0),
        aoi_halfwidth=halfwidth(reps["aoi"], cfg.confidence),
        interarrival_mean=reps["interarrival"].mean(axis=0),
        interarrival_second_moment=reps["interarrival2"].mean(axis=0),
        sojourn_mean=reps["sojourn"].mean(axis=0),
        delivered=reps["delivered"].sum(axis=0).astype(int),
        dropped=reps["dropped"].sum(axis=0).astype(int),
        horizon=horizon,
        replicates=reps,
        log=first_log,
    )


def simulate_to_precision(model: SystemModel, rates, cfg: SimConfig, rel_halfwidth: float,
                          reference=None, max_rounds: int = 4, max_growth: float = 64.0) -> SimEstimate:
    """Re-run with a longer horizon until every peak-age half-width is below
    ``rel_halfwidth`` times ``reference`` (default: the estimate itself).

    Half-widths shrink like ``1/sqrt(horizon)``, so each round scales the
    horizon by the squared shortfall plus a 25% margin.
    """
    est = simulate(model, rates, cfg)
    for _ in range(max_rounds):
        ref = est.paoi_mean if reference is None else np.asarray(reference, dtype=float)
        shortfall = float(np.max(est.paoi_halfwidth / (rel_halfwidth * ref)))
        if shortfall <= 1.0:
            break
        growth = min(1.25 * shortfall**2, max_growth)
        cfg = replace(cfg, horizon=est.horizon * growth, target_deliveries=None)
        est = simulate(model, rates, cfg)
    return est


def estimate_gg1_identity(events: EventLog, class_id: int) -> tuple[float, float]:
    """Empirical peak age against empirical mean interarrival plus mean sojourn."""
    g, d = events.for_class(class_id)
    if len(d) < 2:
        raise InsufficientDataError(class_id)
    lhs = float(np.mean(d[1:] - g[:-1]))
    rhs = float(np.mean(np.diff(g)) + np.mean(d - g))
    return lhs, rhs


@dataclass(frozen=True)
class Lemma1Check:
    lower: float
    aoi: float
    upper: float
    lower_halfwidth: float = 0.0
    aoi_halfwidth: float = 0.0
    upper_halfwidth: float = 0.0

    @property
    def holds(self) -> bool:
        """Ordering holds once each side is widened by its half-width."""
        return (self.lower - self.lower_halfwidth <= self.aoi + self.aoi_halfwidth
                and self.aoi - self.aoi_halfwidth <= self.upper + self.upper_halfwidth)


def estimate_lemma1(events: EventLog, class_id: int) -> Lemma1Check:
    """Average-age bounds from empirical interarrival moments of one replication."""
    g, d = events.for_class(class_id)
    row = _class_window_stats(g, d)
    if row is None:
        raise InsufficientDataError(class_id)
    m1 = row["interarrival"]
    lower, upper = lemma1_bounds(GG1Stats(1.0 / m1, m1, row["interarrival2"]), row["paoi"])
    return Lemma1Check(lower, row["aoi"], upper)


def lemma1_from_estimate(est: SimEstimate, class_index: int = 0, confidence: float = 0.95) -> Lemma1Check:
    """Replication-level version of :func:`estimate_lemma1` with confidence half-widths."""
    reps = est.replicates
    m1 = reps["interarrival"][:, class_index]
    m2 = reps["interarrival2"][:, class_index]
    paoi = reps["paoi"][:, class_index]
    lower, upper = lemma1_bounds(GG1Stats(1.0 / m1, m1, m2), paoi)
    aoi = reps["aoi"][:, class_index]
    return Lemma1Check(
        float(lower.mean()), float(aoi.mean()), float(upper.mean()),
        float(halfwidth(lower, confidence)), float(halfwidth(aoi, confidence)),
        float(halfwidth(upper, confidence)),
    )
