import csv
import json
import math
import subprocess
import sys

import jsonschema
import numpy as np
import pytest

from klrobust.cli import DataError, benchmark_kl, curve_rows, load_csv, main, report_schema
from klrobust.simulate import DgpSpec, generate, population_delta_oracle


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return str(path)


def _dgp_file(path, n, seed, k=3, shift=0.0, with_tau=False):
    data, truth = generate(DgpSpec("DGP1", n=n, k=k, seed=seed))
    header = ["y", "d"] + [f"x{j + 1}" for j in range(k)] + (["tau"] if with_tau else [])
    rows = []
    for i in range(n):
        row = [repr(float(data.y[i] + shift * data.d[i])), int(data.d[i])] + [repr(float(v)) for v in data.x[i]]
        if with_tau:
            row.append(repr(float(truth.tau0[i])))
        rows.append(row)
    return _write_csv(path, header, rows)


# --- loading -------------------------------------------------------------------

def test_load_small_file(tmp_path):
    p = _write_csv(tmp_path / "a.csv", ["y", "d", "x"], [[1.0, 1, 0.1], [0.5, 0, 0.2], [0.7, 1, 0.3]])
    data, info, _ = load_csv(p, "y", "d")
    assert data.n == 3 and data.columns == ("x",) and info.rows_dropped == 0


def test_load_missing_column(tmp_path):
    p = _write_csv(tmp_path / "a.csv", ["y", "x"], [[1.0, 0.1]])
    with pytest.raises(DataError, match="column not found: d"):
        load_csv(p, "y", "d")


def test_load_nonbinary_treatment_names_row(tmp_path):
    p = _write_csv(tmp_path / "a.csv", ["y", "d", "x"], [[1.0, 1, 0.1], [0.5, 2, 0.2]])
    with pytest.raises(DataError, match="binary; row 3"):
        load_csv(p, "y", "d")


def test_load_nonnumeric_cell(tmp_path):
    p = _write_csv(tmp_path / "a.csv", ["y", "d", "x"], [[1.0, 1, "abc"], [0.5, 0, 0.2]])
    with pytest.raises(DataError, match="column x at row 2"):
        load_csv(p, "y", "d")


def test_load_one_hot_and_dropped_rows(tmp_path):
    rows = [[1.0, 1, "a", 0.1], [0.5, 0, "b", 0.2], [0.7, 1, "a", ""], [0.2, 0, "c", 0.4]]
    p = _write_csv(tmp_path / "a.csv", ["y", "d", "g", "x"], rows)
    data, info, _ = load_csv(p, "y", "d", categorical=["g"])
    assert info.rows_dropped == 1
    assert data.columns == ("g=a", "g=b", "g=c", "x")
    assert np.array_equal(data.x[:, :3].sum(axis=1), np.ones(3))


def test_cli_missing_column_exit_code(tmp_path, capsys):
    p = _write_csv(tmp_path / "a.csv", ["y", "x"], [[1.0, 0.1]])
    assert main(["estimate", "--input", p, "--outcome", "y", "--treatment", "d", "--tau-tilde", "1"]) == 3
    assert "column not found: d" in capsys.readouterr().err


# --- estimate ------------------------------------------------------------------

ESTIMATE = ["--outcome", "y", "--treatment", "d", "--n-trees", "40"]


def test_estimate_report_validates_and_is_deterministic(tmp_path):
    p = _dgp_file(tmp_path / "d.csv", 1500, seed=1)
    outs = []
    for i, jobs in enumerate(["1", "2"]):
        out = tmp_path / f"r{i}.json"
        code = main(["estimate", "--input", p, *ESTIMATE, "--tau-tilde", "1.3", "--zeta-cols", "x1",
                     "--n-jobs", jobs, "--seed", "5", "--out", str(out)])
        assert code == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    rep = json.loads(outs[0])
    jsonschema.validate(rep, report_schema())
    assert rep["status"] == "ok" and rep["zeta"]["labels"] == ["x1"]


def test_estimate_recovers_population_value(tmp_path):
    p = _dgp_file(tmp_path / "d.csv", 10_000, seed=2)
    out = tmp_path / "r.json"
    assert main(["estimate", "--input", p, *ESTIMATE, "--tau-tilde", "1.3", "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert abs(rep["delta_star_hat"] - 0.4485) < 3 * rep["se_delta"]


def test_estimate_z_threshold_insignificant_effect(tmp_path):
    rng = np.random.default_rng(3)
    n = 400
    d = rng.binomial(1, 0.5, n)
    x = rng.uniform(size=n)
    y = rng.normal(0, 1, n)
    y[d == 1] -= y[d == 1].mean() - y[d == 0].mean()  # difference in means is exactly zero
    p = _write_csv(tmp_path / "z.csv", ["y", "d", "x"], [[y[i], d[i], x[i]] for i in range(n)])
    out = tmp_path / "r.json"
    assert main(["estimate", "--input", p, *ESTIMATE, "--tau-tilde", "z:0.05", "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    jsonschema.validate(rep, report_schema())
    assert rep["delta_star_hat"] == 0.0
    assert rep["input"]["tau_tilde"]["form"] == "z"


def test_estimate_claim_invalid_at_baseline(tmp_path):
    p = _dgp_file(tmp_path / "d.csv", 1000, seed=4)
    out = tmp_path / "r.json"
    assert main(["estimate", "--input", p, *ESTIMATE, "--tau-tilde", "3.0", "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["status"] == "claim invalid at baseline" and rep["delta_star_hat"] == 0.0


def test_estimate_infinite_robustness(tmp_path):
    p = _dgp_file(tmp_path / "d.csv", 1000, seed=4)
    out = tmp_path / "r.json"
    assert main(["estimate", "--input", p, *ESTIMATE, "--tau-tilde", "-5", "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    jsonschema.validate(rep, report_schema())
    assert rep["status"] == "robustness infinite" and rep["delta_star_hat"] is None


def test_estimate_markdown(tmp_path):
    p = _dgp_file(tmp_path / "d.csv", 800, seed=5)
    out = tmp_path / "r.md"
    assert main(["estimate", "--input", p, *ESTIMATE, "--tau-tilde", "1.3", "--format", "md", "--out", str(out)]) == 0
    text = out.read_text()
    assert text.startswith("# Robustness report") and "| delta* |" in text


def test_bad_tau_tilde_is_usage_error(tmp_path):
    p = _dgp_file(tmp_path / "d.csv", 200, seed=6)
    assert main(["estimate", "--input", p, *ESTIMATE, "--tau-tilde", "z:abc"]) == 2


# --- benchmark -----------------------------------------------------------------

def test_benchmark_identical_files(tmp_path):
    rows = [[i % 3, float(i)] for i in range(40)]
    a = _write_csv(tmp_path / "a.csv", ["g", "v"], rows)
    assert benchmark_kl(a, a, ["g", "v"], continuous=["v"]) == 0.0


def test_benchmark_two_cell_shift(tmp_path):
    a = _write_csv(tmp_path / "a.csv", ["g"], [["u"]] * 5 + [["v"]] * 5)
    b = _write_csv(tmp_path / "b.csv", ["g"], [["u"]] * 6 + [["v"]] * 4)
    expected = 0.6 * math.log(0.6 / 0.5) + 0.4 * math.log(0.4 / 0.5)
    assert benchmark_kl(a, b, ["g"]) == pytest.approx(expected)
    assert expected == pytest.approx(0.0201, abs=1e-4)


def test_benchmark_absolute_continuity(tmp_path, capsys):
    a = _write_csv(tmp_path / "a.csv", ["g"], [["u"], ["v"]])
    b = _write_csv(tmp_path / "b.csv", ["g"], [["u"], ["w"]])
    code = main(["benchmark", "--experimental", a, "--target", b, "--columns", "g"])
    assert code == 3
    assert "not absolutely continuous" in capsys.readouterr().err


def test_benchmark_compares_with_report(tmp_path, capsys):
    a = _write_csv(tmp_path / "a.csv", ["g"], [["u"]] * 5 + [["v"]] * 5)
    b = _write_csv(tmp_path / "b.csv", ["g"], [["u"]] * 6 + [["v"]] * 4)
    rep = tmp_path / "r.json"
    rep.write_text(json.dumps({"delta_star_hat": 0.3}))
    assert main(["benchmark", "--experimental", a, "--target", b, "--columns", "g", "--report", str(rep)]) == 0
    assert "plausibly extrapolates" in capsys.readouterr().out


# --- simulate ------------------------------------------------------------------

def test_simulate_deterministic(tmp_path):
    args = ["simulate", "--dgp", "1", "--n", "1000", "--m", "4", "--seed", "7", "--k", "5", "--n-trees", "10"]
    assert main(args + ["--out-dir", str(tmp_path / "a")]) == 0
    assert main(args + ["--out-dir", str(tmp_path / "b"), "--n-jobs", "2"]) == 0
    for name in ("mc.csv", "mc.md"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_simulate_oracle_reports_population(tmp_path, capsys):
    assert main(["simulate", "--dgp", "1", "--n", "500", "--m", "2", "--oracle", "--k", "1",
                 "--out-dir", str(tmp_path)]) == 0
    line = capsys.readouterr().out.splitlines()[0]
    assert line == f"population delta*: {population_delta_oracle('DGP1', 1.3)!r}"


def test_simulate_invalid_dgp():
    proc = subprocess.run([sys.executable, "-m", "klrobust", "simulate", "--dgp", "9"], capture_output=True)
    assert proc.returncode == 2 and b"usage" in proc.stderr


# --- curve ---------------------------------------------------------------------

def test_curve_single_point_at_ate():
    tau = np.array([0.5, 1.0, 2.5, 3.0])
    (row,) = curve_rows(tau, [tau.mean()])
    assert row[0] == tau.mean() and row[1] == 0.0 and row[2] == 0.0 and row[3] <= 0.0


def test_curve_dgp1_grows_away_from_ate(tmp_path):
    p = _dgp_file(tmp_path / "c.csv", 5000, seed=8, k=1, with_tau=True)
    out = tmp_path / "curve.csv"
    code = main(["curve", "--input", p, "--outcome", "y", "--treatment", "d", "--covariates", "x1",
                 "--tau-column", "tau", "--grid", "1.3,1.5", "--out", str(out)])
    assert code == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 3  # grid plus the automatic ATE row
    delta = {float(r["tau_tilde"]): float(r["delta_star"]) for r in rows}
    lam = [float(r["lambda"]) for r in rows]
    assert all(a > b for a, b in zip(lam, lam[1:]))
    assert delta[1.3] > delta[1.5] > 0


def test_curve_duplicates_and_infeasible():
    tau = np.array([0.0, 1.0, 2.0])
    with pytest.warns(UserWarning, match="duplicate"):
        rows = curve_rows(tau, [0.5, 0.5, 5.0])
    assert [r[0] for r in rows] == [0.5, 1.0, 5.0]
    assert rows[-1][4] is False and math.isnan(rows[-1][1])


def test_curve_concentration_output(tmp_path):
    p = _dgp_file(tmp_path / "c.csv", 500, seed=9, k=1, with_tau=True)
    out = tmp_path / "curve.csv"
    assert main(["curve", "--input", p, "--outcome", "y", "--treatment", "d", "--covariates", "x1",
                 "--tau-column", "tau", "--grid", "1.3,2.5", "--concentration", "--out", str(out)]) == 0
    text = (tmp_path / "curve.csv.concentration.csv").read_text()
    assert text.startswith("tau_tilde,mass_near_peak")
