import csv
import json

import numpy as np
import pytest

from paoi.cli import main
from paoi.config import parse_scenario
from paoi.report import COLUMNS, read_object, read_surface


def write(tmp_path, doc, name="scenario.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def read_table(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    blank = rows.index([])
    header, body, scalars = rows[0], rows[1:blank], dict(rows[blank + 2:])
    return header, body, scalars


MM1 = {
    "id": "mm1",
    "system": {"discipline": "MG1", "box": {"lambda_min": 0.01, "lambda_max": 0.99},
               "classes": [{"service": {"type": "exponential", "rate": 1},
                            "cost": {"type": "linear", "weight": 1}}]},
    "rates": [0.5],
    "sim": {"horizon": 20000, "replications": 10, "seed": 3},
}

TWO_CLASS = {
    "id": "two",
    "system": {"discipline": "MG11", "box": {"lambda_min": 0.01, "lambda_max": 10},
               "classes": [
                   {"service": {"type": "deterministic", "value": 1},
                    "cost": {"type": "power", "weight": 4, "exponent": 2}},
                   {"service": {"type": "deterministic", "value": 3},
                    "cost": {"type": "power", "weight": 1, "exponent": 2}}]},
    "sim": {"horizon": 5000, "replications": 5, "seed": 1},
    "opt": {"grid": {"points_per_dimension": 100}},
}


def random_scenario(seed):
    rng = np.random.default_rng(seed)
    kinds = [{"type": "exponential", "rate": float(rng.uniform(1, 3))},
             {"type": "deterministic", "value": float(rng.uniform(0.2, 1))},
             {"type": "uniform", "low": 0.1, "high": float(rng.uniform(0.3, 1.2))}]
    n = 3
    classes = [{"service": kinds[k], "cost": {"type": "linear", "weight": float(rng.uniform(1, 3))}}
               for k in range(n)]
    doc = {"id": f"random-{seed}",
           "system": {"discipline": "MG1", "box": {"lambda_min": 0.01, "lambda_max": 1.0}, "classes": classes},
           "sim": {"horizon": 20000, "replications": 10, "seed": seed},
           "opt": {"grid": {"points_per_dimension": 40}}}
    model = parse_scenario(doc).model
    w = rng.uniform(0.3, 1.0, n)
    doc["rates"] = (w * 0.6 / float(w @ model.x)).tolist()
    return doc


def test_analytic_mm1(tmp_path, capsys):
    code = main(["analytic", "--config", write(tmp_path, MM1), "--out", str(tmp_path / "o"), "--no-timestamp"])
    assert code == 0
    header, body, scalars = read_table(tmp_path / "o" / "mm1_analytic.csv")
    assert tuple(header) == COLUMNS
    assert float(body[0][COLUMNS.index("A_analytic")]) == pytest.approx(4.0)
    assert float(scalars["aoi"]) == pytest.approx(3.5)
    assert float(scalars["paoi_minus_aoi"]) == pytest.approx(0.5)
    assert "provenance.timestamp" not in scalars
    assert scalars["provenance.seed"] == "3"


def test_simulate_and_event_log(tmp_path):
    doc = dict(MM1, outputs={"event_log": True})
    code = main(["simulate", "--config", write(tmp_path, doc), "--out", str(tmp_path / "o")])
    assert code == 0
    _, body, scalars = read_table(tmp_path / "o" / "mm1_simulate.csv")
    a_sim = float(body[0][COLUMNS.index("A_sim")])
    hw = float(body[0][COLUMNS.index("A_sim_halfwidth")])
    assert abs(a_sim - 4.0) <= hw
    assert "provenance.timestamp" in scalars
    assert (tmp_path / "o" / "mm1_events.csv").read_text().startswith("class_id,gen_time")


def test_table_output_deterministic(tmp_path):
    cfg = write(tmp_path, MM1)
    for sub in ("a", "b"):
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / sub), "--no-timestamp"]) == 0
    assert (tmp_path / "a" / "mm1_simulate.csv").read_bytes() == (tmp_path / "b" / "mm1_simulate.csv").read_bytes()
    main(["simulate", "--config", cfg, "--out", str(tmp_path / "c"), "--no-timestamp", "--seed", "4"])
    assert (tmp_path / "a" / "mm1_simulate.csv").read_bytes() != (tmp_path / "c" / "mm1_simulate.csv").read_bytes()


def test_precision_flag(tmp_path):
    main(["analytic", "--config", write(tmp_path, dict(MM1, rates=[0.3])), "--out", str(tmp_path),
          "--precision", "3", "--no-timestamp"])
    _, _, scalars = read_table(tmp_path / "mm1_analytic.csv")
    assert scalars["W"] == "0.429"


def test_object_round_trip(tmp_path):
    cfg = write(tmp_path, TWO_CLASS)
    code = main(["optimize", "--config", cfg, "--out", str(tmp_path), "--format", "object", "--grid-oracle"])
    assert code == 0
    doc = read_object(tmp_path / "two_optimize_bisection.json")
    assert doc["scalars"]["status"] == "Optimal"
    assert doc["rows"][0]["lambda"] == pytest.approx(10.0)
    resolved = doc["config"]
    assert resolved["outputs"]["format"] == "object"
    assert resolved["opt"]["grid_oracle"] is True
    assert parse_scenario(resolved).to_dict() == resolved
    grid = read_object(tmp_path / "two_optimize_grid.json")
    assert grid["scalars"]["C_sys"] == pytest.approx(doc["scalars"]["C_sys"], rel=1e-2)


def test_cost_surface_export(tmp_path):
    doc = dict(TWO_CLASS, outputs={"cost_surface": True, "surface_points": 51})
    assert main(["optimize", "--config", write(tmp_path, doc), "--out", str(tmp_path)]) == 0
    cells = read_surface(tmp_path / "two_surface.csv")
    best = min(cells, key=lambda c: c[2])
    assert abs(best[0] - 10.0) <= 0.2 + 1e-9 and abs(best[1] - 6.0) <= 0.2 + 1e-9

    doc["system"] = dict(doc["system"], discipline="MG1")
    doc["id"] = "two-mg1"
    assert main(["optimize", "--config", write(tmp_path, doc), "--out", str(tmp_path)]) == 0
    text = (tmp_path / "two-mg1_surface.csv").read_text().splitlines()[1:]
    for line in text:
        a, b, c = line.split(",")
        # six significant digits on the axes; the boundary band is far from any grid point here
        assert (c == "inf") == (float(a) + 3 * float(b) >= 1 - 1e-9)


def test_verify_random_scenario(tmp_path):
    for seed in (101, 202):
        code = main(["verify", "--config", write(tmp_path, random_scenario(seed)), "--out", str(tmp_path)])
        assert code == 0
        _, _, scalars = read_table(tmp_path / f"random-{seed}_verify.csv")
        assert scalars["failed"] == "0"
        assert all(v == "pass" for k, v in scalars.items() if k.startswith("check."))


def test_verify_mg11(tmp_path):
    doc = dict(TWO_CLASS, rates=[3.0, 2.0])
    assert main(["verify", "--config", write(tmp_path, doc), "--out", str(tmp_path)]) == 0
    _, _, scalars = read_table(tmp_path / "two_verify.csv")
    assert scalars["check.scale_up"] == "pass"
    assert scalars["check.z_oracle"] == "pass"


def test_verify_failure_exit_code(tmp_path):
    # an impossibly tight identity tolerance must trip at least one check
    doc = random_scenario(7)
    code = main(["verify", "--config", write(tmp_path, doc), "--out", str(tmp_path), "--tolerance", "1e-300"])
    assert code == 3


def test_reproduce(tmp_path, capsys):
    code = main(["reproduce", "--out", str(tmp_path), "--no-timestamp"])
    out = capsys.readouterr()
    _, body, scalars = read_table(tmp_path / "two-class_reproduce_mg11.csv")
    mg11 = {k: v for k, v in scalars.items() if k.startswith("check.")}
    assert mg11 and all(v == "pass" for v in mg11.values())
    assert float(body[0][1]) == pytest.approx(10.0, abs=0.05)
    assert float(body[1][1]) == pytest.approx(6.0, abs=0.05)
    failures = []
    for block in ("mg11", "mg1", "surrogate"):
        _, _, s = read_table(tmp_path / f"two-class_reproduce_{block}.csv")
        assert s[f"check.{block}.C_sys"] == "pass"
        failures += [k for k, v in s.items() if k.startswith("check.") and v != "pass"]
    assert code == (3 if failures else 0)
    assert ("failed checks" in out.err) == bool(failures)


def test_invalid_config_exit_code(tmp_path, capsys):
    doc = json.loads(json.dumps(MM1))
    doc["system"]["classes"][0]["service"]["rate"] = -2
    assert main(["analytic", "--config", write(tmp_path, doc)]) == 1
    assert "system.classes[0].service" in capsys.readouterr().err
    assert main(["analytic", "--config", str(tmp_path / "missing.json")]) == 1
    assert main(["simulate", "--config", write(tmp_path, dict(MM1, rates=None))]) == 1
    assert main(["simulate", "--config", write(tmp_path, dict(MM1, rates=[1.5]))]) == 1


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["analytic", "--config", write(tmp_path, MM1), "--out", str(blocker / "sub")]) == 1


def test_infeasible_exit_code(tmp_path):
    doc = {"id": "overload",
           "system": {"discipline": "MG1", "box": {"lambda_min": 0.6, "lambda_max": 1.0},
                      "classes": [{"service": {"type": "deterministic", "value": 1},
                                   "cost": {"type": "linear", "weight": 1}}] * 2}}
    assert main(["optimize", "--config", write(tmp_path, doc), "--out", str(tmp_path)]) == 2
    _, _, scalars = read_table(tmp_path / "overload_optimize_surrogate.csv")
    assert scalars["status"] == "Infeasible"
