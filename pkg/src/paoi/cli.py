"""Command-line scenario runner.

Exit codes: 0 success, 1 invalid config or unwritable output, 2 infeasible
optimization, 3 failed verification or reproduction check.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as dt
import json
import logging
import math
import sys
from importlib import resources

import numpy as np

from . import __version__
from .analytic import (
    aoi_mm1,
    b_surrogate,
    conservation_residual,
    pairwise_relation_residual,
    paoi_gap,
    paoi_mg1,
    paoi_mg11,
    paoi_mg11_via_z,
    utilization,
)
from .config import ConfigError, Scenario, load_scenario, parse_scenario
from .core import Discipline, Exponential, InstabilityError, ModelError, SystemModel, as_rates
from .opt import (
    OptimizeResult,
    check_lemma2_scaling,
    check_lemma3_gap,
    class_costs,
    cost_surface,
    grid_search,
    grid_search_mg1,
    optimize_mg1_approx,
    optimize_mg11,
    sys_cost,
)
from .report import Check, ClassRow, ResultRecord, emit, format_value, write_surface
from .sim import InsufficientDataError, estimate_gg1_identity, halfwidth, lemma1_from_estimate, simulate

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_CHECK = 0, 1, 2, 3

# Published two-class results, stored at their printed precision.
REFERENCE = {
    "mg11": {"rates": (10.0, 6.0), "paoi": (3.9, 7.83), "costs": (60.84, 61.36), "sys_cost": 61.36},
    "mg1": {"rates": (0.29, 0.125), "paoi": (6.56, 13.11), "costs": (172.15, 171.92), "sys_cost": 172.15},
    "surrogate": {"rates": (0.285, 0.17), "paoi": (8.94, 13.31), "costs": (319.69, 177.16),
                  "sys_cost": 319.69},
}
RATE_TOLERANCE = {"mg11": 0.05, "mg1": 0.01, "surrogate": 0.01}
COST_TOLERANCE = 0.01  # relative
AGE_TOLERANCE = 0.02  # absolute
IDENTITY_TOLERANCE = 1e-10  # relative


def builtin_scenario() -> Scenario:
    text = resources.files("paoi").joinpath("data/two_class.json").read_text()
    return parse_scenario(json.loads(text))


# -- record helpers ------------------------------------------------------------------

def _rows(model: SystemModel, lam, ages=None, sim_mean=None, sim_hw=None, cost_ages=None) -> list[ClassRow]:
    rows = []
    cost_ages = ages if cost_ages is None else cost_ages
    for k, cls in enumerate(model.classes):
        a = None if ages is None else float(ages[k])
        c = None
        if cost_ages is not None:
            ca = float(cost_ages[k])
            c = math.inf if math.isinf(ca) else float(cls.cost(ca))
        rows.append(ClassRow(cls.id, float(lam[k]), float(model.x[k]), float(model.y[k]), a,
                             None if sim_mean is None else float(sim_mean[k]),
                             None if sim_hw is None else float(sim_hw[k]), c))
    return rows


def _ages(model: SystemModel, lam) -> np.ndarray:
    if model.discipline == Discipline.MG11:
        return paoi_mg11(model, lam)
    if not utilization(model, lam).stable:
        return np.full(model.n, math.inf)
    return paoi_mg1(model, lam)


def _require_rates(scenario: Scenario, subcommand: str) -> np.ndarray:
    if scenario.rates is None:
        raise ConfigError("rates", f"required for '{subcommand}'")
    return as_rates(scenario.model, scenario.rates)


def _result_record(scenario: Scenario, subcommand: str, label: str, res: OptimizeResult) -> ResultRecord:
    model = scenario.model
    rec = ResultRecord(scenario.id, subcommand, label)
    rec.scalars["status"] = res.status.value
    rec.scalars["C_sys"] = res.sys_cost
    if res.rates is not None:
        solved = model if label != "surrogate" else model.with_discipline(Discipline.MG1)
        rec.rows = _rows(solved, res.rates, res.paoi)
        rec.scalars["rho"] = float(np.asarray(res.rates) @ model.x)
        rec.scalars["argmax"] = res.argmax
    rec.scalars["iterations"] = res.iterations
    if res.surrogate_cost is not None:
        rec.scalars["surrogate_cost"] = res.surrogate_cost
    for key, value in res.info.items():
        if isinstance(value, (int, float, str, bool)):
            rec.scalars[key] = value
    return rec


# -- subcommands ---------------------------------------------------------------------

def run_analytic(scenario: Scenario, args) -> tuple[list[ResultRecord], int]:
    model = scenario.model
    lam = _require_rates(scenario, "analytic")
    ages = _ages(model, lam)
    prof = utilization(model, lam)
    rec = ResultRecord(scenario.id, "analytic", rows=_rows(model, lam, ages))
    s = rec.scalars
    s["discipline"] = model.discipline.value
    s["rho"] = prof.rho
    s["W"] = prof.waiting
    s["stable"] = prof.stable
    cost = sys_cost(model, lam)
    s["C_sys"] = cost.cost
    s["argmax"] = cost.argmax
    if np.all(np.isfinite(ages)):
        r_mg1, r_mg11 = conservation_residual(model, lam, ages)
        s["conservation_residual"] = r_mg11 if model.discipline == Discipline.MG11 else r_mg1
        s["pairwise_residual_max"] = float(np.max(np.abs(pairwise_relation_residual(model, lam, ages))))
    if prof.stable:
        mg1 = model.with_discipline(Discipline.MG1)
        for k, (g, b) in enumerate(zip(paoi_gap(mg1, lam), b_surrogate(mg1, lam)), start=1):
            s[f"mg11_minus_mg1[{k}]"] = float(g)
            s[f"B[{k}]"] = float(b)
        service = model.classes[0].service
        if model.n == 1 and model.discipline == Discipline.MG1 and isinstance(service, Exponential):
            aoi = aoi_mm1(float(lam[0]), service.rate)
            s["aoi"] = aoi
            s["paoi_minus_aoi"] = float(ages[0]) - aoi
    return [rec], EXIT_OK


def _simulate(scenario: Scenario, lam, capture_log: bool = False):
    cfg = scenario.sim
    if capture_log and not cfg.capture_log:
        cfg = dataclasses.replace(cfg, capture_log=True)
    try:
        return simulate(scenario.model, lam, cfg)
    except InstabilityError as exc:
        raise ConfigError("rates", str(exc)) from None
    except InsufficientDataError as exc:
        raise ConfigError("sim", f"{exc}; lengthen the horizon") from None


def run_simulate(scenario: Scenario, args) -> tuple[list[ResultRecord], int]:
    model = scenario.model
    lam = _require_rates(scenario, "simulate")
    est = _simulate(scenario, lam, scenario.outputs.event_log)
    ages = _ages(model, lam)
    rec = ResultRecord(scenario.id, "simulate",
                       rows=_rows(model, lam, ages, est.paoi_mean, est.paoi_halfwidth, est.paoi_mean))
    s = rec.scalars
    s["horizon"] = est.horizon
    s["replications"] = est.replications
    s["warmup_fraction"] = scenario.sim.warmup_fraction
    s["confidence"] = scenario.sim.confidence
    s["arrivals"] = scenario.sim.arrivals
    for k in range(model.n):
        s[f"aoi[{k + 1}]"] = float(est.aoi_mean[k])
        s[f"aoi_halfwidth[{k + 1}]"] = float(est.aoi_halfwidth[k])
        s[f"delivered[{k + 1}]"] = int(est.delivered[k])
        s[f"dropped[{k + 1}]"] = int(est.dropped[k])
    if scenario.outputs.event_log and est.log is not None:
        rec.scalars["event_log"] = f"{scenario.id}_events.csv"
        args._extra_files.append(("events", est.log))
    return [rec], EXIT_OK


def _optimize(scenario: Scenario, grid_oracle: bool) -> list[tuple[str, OptimizeResult]]:
    model = scenario.model
    out = []
    if model.discipline == Discipline.MG11:
        out.append(("bisection", optimize_mg11(model, scenario.bisection)))
        if grid_oracle:
            out.append(("grid", grid_search(model, scenario.grid)))
    else:
        out.append(("surrogate", optimize_mg1_approx(model, scenario.bisection)))
        if grid_oracle:
            out.append(("grid", grid_search_mg1(model, scenario.grid)))
    return out


def run_optimize(scenario: Scenario, args) -> tuple[list[ResultRecord], int]:
    grid_oracle = scenario.grid_oracle or args.grid_oracle
    results = _optimize(scenario, grid_oracle)
    records = [_result_record(scenario, "optimize", label, res) for label, res in results]
    if scenario.outputs.cost_surface:
        if scenario.model.n != 2:
            raise ConfigError("outputs.cost_surface", "needs exactly two classes")
        args._extra_files.append(("surface", cost_surface(scenario.model, scenario.outputs.surface_points)))
    code = EXIT_OK if all(res.optimal for _, res in results) else EXIT_INFEASIBLE
    return records, code


def _bonferroni(confidence: float, n: int) -> float:
    return 1.0 - (1.0 - confidence) / n


def verify_checks(scenario: Scenario, lam, tolerance: float = IDENTITY_TOLERANCE,
                  grid_oracle: bool = True) -> tuple[list[Check], np.ndarray, object]:
    """Full invariant battery at ``lam``; returns checks, analytic ages and the simulation estimate."""
    model = scenario.model
    n = model.n
    checks: list[Check] = []
    prof = utilization(model, lam)
    if model.discipline == Discipline.MG1 and not prof.stable:
        raise ConfigError("rates", f"M/G/1 load {prof.rho:.6g} is not below 1")
    ages = _ages(model, lam)
    scale = float(lam @ ages)

    r_mg1, r_mg11 = conservation_residual(model, lam, ages)
    r = r_mg11 if model.discipline == Discipline.MG11 else r_mg1
    checks.append(Check("conservation", abs(r) <= tolerance * scale, f"residual={r:.3g}"))

    pair = np.abs(pairwise_relation_residual(model, lam, ages))
    pair_scale = max(1.0, float(np.max(np.abs(lam * (ages - model.x)))), float(np.max(1.0 / lam)))
    checks.append(Check("pairwise_relation", float(pair.max()) <= tolerance * pair_scale,
                        f"max_residual={pair.max():.3g}"))

    direct, via_z = paoi_mg11(model, lam), paoi_mg11_via_z(model, lam)
    rel = float(np.max(np.abs(direct - via_z) / direct))
    checks.append(Check("z_oracle", rel <= max(tolerance, 1e-12), f"max_rel_diff={rel:.3g}"))

    if prof.stable:
        mg1 = model.with_discipline(Discipline.MG1)
        a1 = paoi_mg1(mg1, lam)
        gap_err = float(np.max(np.abs(paoi_gap(mg1, lam) - (direct - a1)) / direct))
        checks.append(Check("paoi_gap", gap_err <= tolerance, f"max_rel_diff={gap_err:.3g}"))
        b = b_surrogate(mg1, lam)
        ok = bool(np.all(a1 <= b * (1 + 1e-12)) and np.all(b <= 2 * a1 * (1 + 1e-12)))
        checks.append(Check("surrogate_sandwich", ok, "A <= B <= 2A"))

    est = _simulate(scenario, lam, capture_log=True)
    joint = _bonferroni(scenario.sim.confidence, n)
    hw = halfwidth(est.replicates["paoi"], joint)
    dev = np.abs(est.paoi_mean - ages)
    checks.append(Check("simulation_agreement", bool(np.all(dev <= hw)),
                        "dev/hw=" + ",".join(format_value(float(v), 3) for v in dev / hw)))

    for k, cls in enumerate(model.classes):
        lhs, rhs = estimate_gg1_identity(est.log, cls.id)
        checks.append(Check(f"gg1_identity[{cls.id}]", abs(lhs - rhs) <= float(hw[k]),
                            f"lhs={lhs:.6g} rhs={rhs:.6g}"))
        l1 = lemma1_from_estimate(est, k, joint)
        checks.append(Check(f"age_bounds[{cls.id}]", l1.holds,
                            f"{l1.lower:.6g} <= {l1.aoi:.6g} <= {l1.upper:.6g}"))

    if model.discipline == Discipline.MG11:
        exact = optimize_mg11(model, scenario.bisection)
        rep = check_lemma2_scaling(model, exact)
        checks.append(Check("scale_up", rep.passed,
                            f"cost {rep.cost_before:.6g} -> {rep.cost_after:.6g}"))
        if grid_oracle:
            grid = grid_search(model, scenario.grid)
            ok = exact.sys_cost <= grid.sys_cost * (1 + 1e-9)
            checks.append(Check("bisection_vs_grid", ok,
                                f"bisection={exact.sys_cost:.6g} grid={grid.sys_cost:.6g}"))
    elif grid_oracle:
        approx = optimize_mg1_approx(model, scenario.bisection)
        grid = grid_search_mg1(model, scenario.grid)
        if approx.optimal and grid.optimal:
            rep = check_lemma3_gap(model, grid, approx)
            checks.append(Check("surrogate_gap", rep.passed,
                                f"exact={rep.exact_cost:.6g} approx={rep.approx_cost:.6g} "
                                f"bound={rep.bound:.6g}"))
        else:
            checks.append(Check("surrogate_gap", False, "optimization infeasible"))
    return checks, ages, est


def run_verify(scenario: Scenario, args) -> tuple[list[ResultRecord], int]:
    model = scenario.model
    lam = _require_rates(scenario, "verify")
    tol = IDENTITY_TOLERANCE if args.tolerance is None else args.tolerance
    checks, ages, est = verify_checks(scenario, lam, tol, grid_oracle=model.n <= 3)
    rec = ResultRecord(scenario.id, "verify",
                       rows=_rows(model, lam, ages, est.paoi_mean, est.paoi_halfwidth),
                       checks=checks)
    rec.scalars["identity_tolerance"] = tol
    rec.scalars["passed"] = sum(c.passed for c in checks)
    rec.scalars["failed"] = sum(not c.passed for c in checks)
    return [rec], EXIT_OK if not rec.failed else EXIT_CHECK


def _compare(name: str, computed: float, reference: float, tol: float, relative: bool) -> Check:
    delta = computed - reference
    limit = tol * abs(reference) if relative else tol
    kind = "rel" if relative else "abs"
    return Check(name, abs(delta) <= limit,
                 f"computed={computed:.6g} reference={reference:.6g} delta={delta:+.4g} tol={tol:g} {kind}")


def reproduction_checks(block: str, rates, ages, costs, c_sys, age_tol: float = AGE_TOLERANCE) -> list[Check]:
    ref = REFERENCE[block]
    out = []
    for k in range(2):
        out.append(_compare(f"{block}.lambda[{k + 1}]", float(rates[k]), ref["rates"][k],
                            RATE_TOLERANCE[block], False))
    for k in range(2):
        out.append(_compare(f"{block}.A[{k + 1}]", float(ages[k]), ref["paoi"][k], age_tol, False))
    for k in range(2):
        out.append(_compare(f"{block}.C[{k + 1}]", float(costs[k]), ref["costs"][k], COST_TOLERANCE, True))
    out.append(_compare(f"{block}.C_sys", c_sys, ref["sys_cost"], COST_TOLERANCE, True))
    return out


def run_reproduce(scenario: Scenario, args) -> tuple[list[ResultRecord], int]:
    age_tol = AGE_TOLERANCE if args.tolerance is None else args.tolerance
    model = scenario.model
    mg11 = model.with_discipline(Discipline.MG11)
    mg1 = model.with_discipline(Discipline.MG1)
    blocks = [
        ("mg11", mg11, optimize_mg11(mg11, scenario.bisection)),
        ("mg1", mg1, grid_search_mg1(mg1, scenario.grid)),
        ("surrogate", mg1, optimize_mg1_approx(mg1, scenario.bisection)),
    ]
    records = []
    for label, m, res in blocks:
        rec = _result_record(dataclasses.replace(scenario, model=m), "reproduce", label, res)
        if res.optimal:
            rec.checks = reproduction_checks(label, res.rates, res.paoi, class_costs(m, res.paoi),
                                             res.sys_cost, age_tol)
        else:
            rec.checks = [Check(f"{label}.status", False, res.status.value)]
        records.append(rec)
    grid, approx = blocks[1][2], blocks[2][2]
    if grid.optimal and approx.optimal:
        records[2].checks.append(Check("surrogate.factor2", approx.sys_cost <= 2 * grid.sys_cost,
                                       f"{approx.sys_cost:.6g} <= 2 x {grid.sys_cost:.6g}"))
    # rate-weighted peak-age sums at the published points
    lam = np.array(REFERENCE["mg11"]["rates"])
    lhs = float(lam @ paoi_mg11(mg11, lam))
    records[0].checks.append(_compare("mg11.conservation_sum", lhs, 86.0, 0.005, False))
    lam = np.array(REFERENCE["mg1"]["rates"])
    lhs = float(lam @ paoi_mg1(mg1, lam))
    records[1].checks.append(_compare("mg1.conservation_sum", lhs, 3.541, 0.0005, False))
    failed = any(r.failed for r in records)
    return records, EXIT_CHECK if failed else EXIT_OK


COMMANDS = {
    "analytic": run_analytic,
    "simulate": run_simulate,
    "optimize": run_optimize,
    "verify": run_verify,
    "reproduce": run_reproduce,
}


# -- front end -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="paoi", description="Peak age-of-information toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "analytic": "closed-form peak ages and identities at the configured rates",
        "simulate": "discrete-event estimate of peak and average age",
        "optimize": "minimise the largest class cost over the rate box",
        "verify": "run the invariant battery and report pass/fail",
        "reproduce": "rerun the built-in two-class study and compare with published values",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", help="scenario JSON file" + (" (default: built-in)" if name == "reproduce" else ""),
                       required=name != "reproduce")
        p.add_argument("--seed", type=int, help="override sim.seed")
        p.add_argument("--out", help="override outputs.dir")
        p.add_argument("--format", choices=("table", "object"), help="override outputs.format")
        p.add_argument("--grid-oracle", action="store_true", help="also run the grid oracle")
        p.add_argument("--no-timestamp", action="store_true", help="omit the run timestamp")
        p.add_argument("--tolerance", type=float,
                       help="verify: relative identity tolerance; reproduce: absolute age tolerance")
        p.add_argument("--precision", type=int, help="significant digits in tables")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def apply_overrides(scenario: Scenario, args) -> Scenario:
    outputs = scenario.outputs
    changes = {}
    if args.out is not None:
        changes["dir"] = args.out
    if args.format is not None:
        changes["format"] = args.format
    if args.no_timestamp:
        changes["timestamp"] = False
    if args.precision is not None:
        if args.precision < 1:
            raise ConfigError("--precision", "must be >= 1")
        changes["precision"] = args.precision
    scenario = dataclasses.replace(scenario, outputs=dataclasses.replace(outputs, **changes))
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise ConfigError("--seed", "must be an unsigned 64-bit integer")
        scenario = dataclasses.replace(scenario, sim=dataclasses.replace(scenario.sim, seed=args.seed))
    if args.grid_oracle:
        scenario = dataclasses.replace(scenario, grid_oracle=True)
    if args.tolerance is not None and not (args.tolerance > 0):
        raise ConfigError("--tolerance", "must be positive")
    return scenario


def _print_summary(records: list[ResultRecord], precision: int, stream) -> None:
    for rec in records:
        title = f"{rec.scenario} {rec.subcommand}" + (f" [{rec.label}]" if rec.label else "")
        print(title, file=stream)
        if rec.rows:
            print("  " + "  ".join(f"{c:>15}" for c in ("class", "lambda", "A_analytic", "A_sim", "+/-", "cost")),
                  file=stream)
            for row in rec.rows:
                vals = (row.class_id, row.lam, row.a_analytic, row.a_sim, row.a_sim_halfwidth, row.cost)
                print("  " + "  ".join(f"{format_value(v, precision):>15}" for v in vals), file=stream)
        for key, value in rec.scalars.items():
            print(f"  {key} = {format_value(value, precision)}", file=stream)
        for check in rec.checks:
            print(f"  [{'pass' if check.passed else 'FAIL'}] {check.name}  {check.detail}", file=stream)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args._extra_files = []
    try:
        scenario = load_scenario(args.config) if args.config else builtin_scenario()
        scenario = apply_overrides(scenario, args)
        records, code = COMMANDS[args.command](scenario, args)
    except (ConfigError, ModelError) as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    provenance = {"seed": scenario.sim.seed, "version": __version__}
    if scenario.outputs.timestamp:
        provenance["timestamp"] = dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")
    resolved = scenario.to_dict()
    for rec in records:
        rec.provenance = dict(provenance)
        rec.config = resolved

    out = scenario.outputs
    _print_summary(records, out.precision, sys.stdout)
    try:
        paths = emit(records, out.format, out.dir, out.precision)
        for kind, payload in args._extra_files:
            if kind == "events":
                path = f"{out.dir}/{scenario.id}_events.csv"
                payload.to_csv(path)
            else:
                path = write_surface(f"{out.dir}/{scenario.id}_surface.csv", *payload, precision=out.precision)
            paths.append(path)
    except OSError as exc:
        print(f"error: cannot write outputs to {out.dir!r}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for path in paths:
        print(f"wrote {path}")
    if code == EXIT_INFEASIBLE:
        print("optimization infeasible", file=sys.stderr)
    elif code == EXIT_CHECK:
        failed = [c.name for rec in records for c in rec.failed]
        print("failed checks: " + ", ".join(failed), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
