import math
import time

import numpy as np
import pytest
from scipy import stats

from _instances import two_class
from paoi.analytic import aoi_mm1, paoi_mg1, paoi_mg11, paoi_mm1
from paoi.core import Deterministic, Exponential, Gamma, InstabilityError, Linear, ModelError, RateBox, build_model
from paoi.sim import (
    EventLog,
    InsufficientDataError,
    SimConfig,
    _bufferless,
    _fcfs,
    delivery_rates,
    estimate_gg1_identity,
    estimate_lemma1,
    halfwidth,
    lemma1_from_estimate,
    resolve_horizon,
    run_replication,
    simulate,
    simulate_to_precision,
)


def mm1(lam_box=RateBox(0.01, 0.99)):
    return build_model([Exponential(1.0)], [Linear(1.0)], lam_box)


def naive_fcfs(arrival, service):
    start, dep = [], []
    free = -math.inf
    for a, s in zip(arrival, service):
        b = max(a, free)
        free = b + s
        start.append(b)
        dep.append(free)
    return np.array(start), np.array(dep)


def naive_bufferless(arrival, service):
    keep, free = [], -math.inf
    for i, (a, s) in enumerate(zip(arrival, service)):
        if a >= free:
            keep.append(i)
            free = a + s
    return np.array(keep)


class TestQueueMechanics:
    def test_fcfs_matches_event_loop(self):
        rng = np.random.default_rng(0)
        a = np.cumsum(rng.exponential(1.0, 5000))
        s = rng.exponential(0.9, 5000)
        start, dep = _fcfs(a, s)
        ref_start, ref_dep = naive_fcfs(a, s)
        np.testing.assert_allclose(start, ref_start, rtol=1e-12)
        np.testing.assert_allclose(dep, ref_dep, rtol=1e-12)
        assert np.all(np.diff(dep) >= 0)

    def test_bufferless_matches_event_loop(self):
        rng = np.random.default_rng(1)
        a = np.cumsum(rng.exponential(0.3, 5000))
        s = rng.exponential(1.0, 5000)
        np.testing.assert_array_equal(_bufferless(a, s), naive_bufferless(a, s))

    def test_bufferless_accepts_arrival_at_departure_instant(self):
        a = np.array([0.0, 1.0, 1.5, 2.0])
        s = np.array([1.0, 1.0, 1.0, 1.0])
        assert _bufferless(a, s).tolist() == [0, 1, 3]

    def test_mg11_never_overlaps(self):
        ev, _, _ = run_replication(two_class(), [10.0, 6.0], 500.0, seed=4, rep=0)
        assert np.all(ev.departure[:-1] <= ev.service_start[1:])

    def test_delivery_rate_and_drops(self):
        m = two_class()
        est = simulate(m, [10.0, 6.0], SimConfig(horizon=2e4, replications=4, seed=2))
        span = est.horizon * 0.9 * est.replications
        np.testing.assert_allclose(est.delivered / span, delivery_rates(m, [10.0, 6.0]), rtol=0.03)
        assert np.all(est.dropped > 0)


class TestEstimates:
    def test_mm1_peak_and_average_age(self):
        cfg = SimConfig(horizon=1e6, replications=20, seed=123)
        est = simulate(mm1(), [0.5], cfg)
        assert abs(est.paoi_mean[0] - paoi_mm1(0.5, 1.0)) <= est.paoi_halfwidth[0]
        assert abs(est.aoi_mean[0] - aoi_mm1(0.5, 1.0)) <= est.aoi_halfwidth[0]
        assert est.dropped[0] == 0

    def test_mg11_published_point(self):
        m = two_class()
        est = simulate(m, [10.0, 6.0], SimConfig(horizon=1e5, replications=10, seed=5))
        # joint interval over both classes
        hw = halfwidth(est.replicates["paoi"], 0.975)
        assert np.all(np.abs(est.paoi_mean - paoi_mg11(m, [10.0, 6.0])) <= hw)

    def test_mg1_published_point(self):
        m = two_class("MG1")
        est = simulate(m, [0.29, 0.125], SimConfig(horizon=2e5, replications=10, seed=6))
        hw = halfwidth(est.replicates["paoi"], 0.975)
        assert np.all(np.abs(est.paoi_mean - paoi_mg1(m, [0.29, 0.125])) <= hw)
        assert np.all(np.abs(est.paoi_mean - [6.56, 13.11]) <= hw + 0.01)

    def test_gg1_identity_on_paths(self):
        ev, _, _ = run_replication(mm1(), [0.5], 1e5, seed=1, rep=0)
        lhs, rhs = estimate_gg1_identity(ev, 1)
        assert lhs == pytest.approx(rhs, rel=1e-3)
        assert lhs == pytest.approx(4.0, rel=0.03)
        m = two_class("MG1")
        ev, _, _ = run_replication(m, [0.29, 0.125], 1e5, seed=1, rep=0)
        for cid in (1, 2):
            lhs, rhs = estimate_gg1_identity(ev, cid)
            assert lhs == pytest.approx(rhs, rel=1e-3)

    def test_periodic_input_closes_the_gap(self):
        # constant interarrival I: average age = peak age - I/2 and peak age = I + E[T]
        m = build_model([Deterministic(0.5)], [Linear(1.0)], RateBox(0.01, 1.0))
        cfg = SimConfig(horizon=2e4, replications=3, seed=3, arrivals="periodic")
        est = simulate(m, [0.8], cfg)
        inter = 1.25
        assert est.interarrival_second_moment[0] == pytest.approx(inter**2, rel=1e-9)
        assert est.aoi_mean[0] == pytest.approx(est.paoi_mean[0] - 0.8 * inter**2 / 2, rel=1e-6)
        assert est.paoi_mean[0] == pytest.approx(inter + est.sojourn_mean[0], rel=1e-6)
        check = lemma1_from_estimate(est)
        assert check.holds

    @pytest.mark.parametrize("service", [Exponential(1.0), Deterministic(1.0)])
    def test_average_age_bounds_ordering(self, service):
        m = build_model([service], [Linear(1.0)], RateBox(0.01, 0.99))
        est = simulate(m, [0.5], SimConfig(horizon=1e5, replications=10, seed=9))
        check = lemma1_from_estimate(est)
        assert check.holds
        if isinstance(service, Exponential):
            assert check.lower == pytest.approx(-4.0, abs=0.2)
            assert check.upper == pytest.approx(6.0, abs=0.2)
            assert check.aoi == pytest.approx(3.5, abs=0.05)

    def test_average_age_bounds_single_replication(self):
        ev, _, _ = run_replication(mm1(), [0.5], 1e5, seed=2, rep=0)
        ev.warmup_time = 1e4
        c = estimate_lemma1(ev, 1)
        assert c.lower <= c.aoi <= c.upper

    def test_gamma_service_estimates(self):
        m = build_model([Gamma(2.0, 0.25)], [Linear(1.0)], RateBox(0.01, 1.9))
        est = simulate(m, [1.2], SimConfig(horizon=5e4, replications=10, seed=10))
        assert abs(est.paoi_mean[0] - paoi_mg1(m, [1.2])[0]) <= 1.5 * est.paoi_halfwidth[0]

    def test_precision_driver(self):
        est = simulate_to_precision(mm1(), [0.5], SimConfig(horizon=2e3, replications=10, seed=3),
                                    rel_halfwidth=0.01, reference=[4.0])
        assert est.paoi_halfwidth[0] <= 0.04
        assert est.horizon > 2e3


class TestReproducibility:
    def test_same_seed_identical(self):
        cfg = SimConfig(horizon=5e3, replications=3, seed=42)
        a = simulate(two_class(), [3.0, 2.0], cfg)
        b = simulate(two_class(), [3.0, 2.0], cfg)
        np.testing.assert_array_equal(a.replicates["paoi"], b.replicates["paoi"])

    def test_different_seed_differs(self):
        a = simulate(two_class(), [3.0, 2.0], SimConfig(horizon=5e3, replications=3, seed=1))
        b = simulate(two_class(), [3.0, 2.0], SimConfig(horizon=5e3, replications=3, seed=2))
        assert not np.array_equal(a.replicates["paoi"], b.replicates["paoi"])

    def test_class_streams_independent_of_other_classes(self):
        box = RateBox(0.01, 1.0)
        one = build_model([Exponential(2.0)], [Linear(1.0)], box)
        two = build_model([Exponential(2.0), Deterministic(0.5)], [Linear(1.0)] * 2, box)
        _, g1, c1 = run_replication(one, [0.3], 1e3, seed=8, rep=0)
        _, g2, c2 = run_replication(two, [0.3, 0.2], 1e3, seed=8, rep=0)
        np.testing.assert_array_equal(g1[c1 == 1], g2[c2 == 1])

    def test_event_log_round_trip(self, tmp_path):
        est = simulate(two_class("MG1"), [0.29, 0.125],
                       SimConfig(horizon=2e3, replications=2, seed=1, capture_log=True))
        path = tmp_path / "events.csv"
        est.log.to_csv(path)
        back = EventLog.from_csv(path, est.log.warmup_time)
        for col in EventLog.COLUMNS:
            np.testing.assert_array_equal(getattr(back, col), getattr(est.log, col))


class TestErrors:
    def test_unstable_mg1(self):
        with pytest.raises(InstabilityError):
            simulate(mm1(), [1.2], SimConfig(horizon=100))

    def test_too_short(self):
        with pytest.raises(InsufficientDataError):
            simulate(mm1(), [0.02], SimConfig(horizon=10, replications=2))

    @pytest.mark.parametrize("kwargs", [
        {"horizon": None}, {"horizon": 1.0, "target_deliveries": 10}, {"horizon": -1.0},
        {"replications": 0}, {"warmup_fraction": 1.0}, {"arrivals": "bursty"}, {"confidence": 1.0},
        {"seed": -1},
    ])
    def test_config_validation(self, kwargs):
        with pytest.raises(ModelError):
            SimConfig(**kwargs)

    def test_target_deliveries_horizon(self):
        cfg = SimConfig(horizon=None, target_deliveries=900, warmup_fraction=0.1)
        m = two_class()
        h = resolve_horizon(m, [10.0, 6.0], cfg)
        assert h * 0.9 * delivery_rates(m, [10.0, 6.0]).min() == pytest.approx(900)


class TestHalfwidth:
    def test_matches_t_interval(self):
        x = np.array([1.0, 2.0, 4.0, 3.0, 5.0])
        lo, hi = stats.t.interval(0.95, len(x) - 1, loc=x.mean(), scale=stats.sem(x))
        assert halfwidth(x) == pytest.approx((hi - lo) / 2)

    def test_single_replication_is_infinite(self):
        assert np.isinf(halfwidth(np.array([[1.0, 2.0]]))).all()


def test_mg11_runtime_budget():
    t0 = time.perf_counter()
    simulate(two_class(), [10.0, 6.0], SimConfig(horizon=1e5, replications=10, seed=0))
    assert time.perf_counter() - t0 < 10.0
