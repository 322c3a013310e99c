import csv
import json

import numpy as np
import pytest

from deadline_spending import __version__
from deadline_spending.cli import apply_overrides, main
from deadline_spending.value_solver import ValueGrid, closed_form_single

BASE = {
    "utility": {"zeta": {"family": "power", "k": 1.0}, "mu": {"family": "power", "gamma": 1.0}},
    "model": {"lambda": 1.0, "T": 10.0, "n": 1, "t_min": 5.0},
}
ROOT_MU = {"family": "power", "gamma": 0.5}


def write(tmp_path, config, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(config))
    return str(path)


def run(tmp_path, command, config, *extra, out="out"):
    cfg = write(tmp_path, config)
    code = main([command, "--config", cfg, "--out", str(tmp_path / out), *extra])
    return code, tmp_path / out


def read_csv(path):
    lines = path.read_text().splitlines()
    header = json.loads(lines[0][2:])
    rows = list(csv.DictReader(lines[1:]))
    return header, rows


class TestSolve:
    def test_closed_form_column(self, tmp_path):
        code, out = run(tmp_path, "solve", BASE)
        assert code == 0
        grid = ValueGrid.from_csv((out / "value_grid.csv").read_text())
        exact = closed_form_single(1.0, 10.0, grid.times)
        assert np.max(np.abs(grid.values[:, 1] - exact)) < 1e-6

    def test_header_carries_hash_and_version(self, tmp_path):
        _, out = run(tmp_path, "solve", BASE)
        header, _ = read_csv(out / "value_grid.csv")
        assert header["version"] == __version__ and len(header["config_hash"]) == 16
        assert "time" not in json.dumps(header).lower()

    def test_missing_config(self, tmp_path, capsys):
        missing = tmp_path / "nowhere.json"
        assert main(["solve", "--config", str(missing)]) == 2
        assert str(missing) in capsys.readouterr().err

    def test_bad_horizon_names_field(self, tmp_path, capsys):
        cfg = write(tmp_path, BASE)
        assert main(["solve", "--config", cfg, "--set", "model.t_min=10"]) == 2
        assert "t_min" in capsys.readouterr().err

    def test_invalid_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        assert main(["solve", "--config", str(p)]) == 2

    def test_missing_section(self, tmp_path, capsys):
        code, _ = run(tmp_path, "solve", {"model": BASE["model"]})
        assert code == 2 and "utility" in capsys.readouterr().err

    def test_usage_error(self):
        assert main(["explode"]) == 2

    def test_rerun_is_identical(self, tmp_path):
        _, a = run(tmp_path, "solve", BASE, out="a")
        _, b = run(tmp_path, "solve", BASE, out="b")
        assert (a / "value_grid.csv").read_bytes() == (b / "value_grid.csv").read_bytes()
        assert (a / "value_grid.json").read_bytes() == (b / "value_grid.json").read_bytes()


class TestCutoffs:
    def test_single_unit_cutoff_is_value(self, tmp_path):
        _, out = run(tmp_path, "solve", BASE, out="v")
        code, out2 = run(tmp_path, "cutoffs", BASE, out="c")
        assert code == 0
        grid = ValueGrid.from_csv((out / "value_grid.csv").read_text())
        _, rows = read_csv(out2 / "cutoffs.csv")
        phi = np.array([float(r["phi"]) for r in rows])
        assert np.allclose(phi, grid.values[:, 1], atol=1e-12)

    def test_empty_stock_rejected(self, tmp_path):
        code, _ = run(tmp_path, "cutoffs", BASE, "--set", "model.n=0")
        assert code == 2

    def test_undefined_flagged(self, tmp_path):
        cfg = apply_overrides(BASE, ["model.n=2", "model.t_min=0"])
        cfg["utility"]["mu"] = ROOT_MU
        code, out = run(tmp_path, "cutoffs", cfg)
        assert code == 0
        text = (out / "cutoffs.csv").read_text()
        assert "nan" not in text.lower()
        _, rows = read_csv(out / "cutoffs.csv")
        assert any(r["defined"] == "0" and r["phi"] == "" for r in rows)


class TestSimulate:
    CFG = {**BASE, "simulate": {"x0": 1, "t0": 8.0, "n_paths": 40000}}

    def test_mean_within_four_sigma(self, tmp_path):
        code, out = run(tmp_path, "simulate", self.CFG, "--seed", "5")
        assert code == 0
        s = json.loads((out / "summary.json").read_text())
        assert abs(s["mean"] - s["value"]) < 4 * s["stderr"]
        assert s["N"] == 40000

    def test_reproducible(self, tmp_path):
        cfg = apply_overrides(self.CFG, ["simulate.write_traces=true"])
        _, a = run(tmp_path, "simulate", cfg, "--seed", "5", out="a")
        _, b = run(tmp_path, "simulate", cfg, "--seed", "5", "--threads", "3", out="b")
        for name in ("summary.json", "traces.csv"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_zero_paths(self, tmp_path):
        code, _ = run(tmp_path, "simulate", self.CFG, "--set", "simulate.n_paths=0")
        assert code == 2


class TestTwoPayment:
    CFG = {
        "utility": {"zeta": {"family": "power", "k": 1.0}, "mu": ROOT_MU},
        "model": {"lambda": 1.0, "T": 10.0, "n": 2, "t_min": 4.0},
        "two_payment": {"x": 1, "x_bar": 1, "t_bar": 8.0},
        "correlation": {"p1": 0.5, "p2": 0.5, "c_points": 3, "t_points": 20},
    }

    def test_correlation_sweep_positive(self, tmp_path):
        code, out = run(tmp_path, "two-payment", self.CFG)
        assert code == 0
        _, rows = read_csv(out / "correlation_sweep.csv")
        assert len(rows) == 60
        assert all(float(r["dE_dc"]) > 0 for r in rows)

    def test_payment_at_deadline(self, tmp_path):
        code, out = run(tmp_path, "two-payment", self.CFG, "--set", "two_payment.t_bar=10",
                        "--set", "correlation=null")
        assert code == 0
        _, out_v = run(tmp_path, "solve", self.CFG, out="v")
        vt = ValueGrid.from_csv((out / "two_payment_grid.csv").read_text())
        v = ValueGrid.from_csv((out_v / "value_grid.csv").read_text())
        assert np.max(np.abs(vt.values - v.values[:, :2])) < 1e-12

    def test_inadmissible_c(self, tmp_path):
        code, _ = run(tmp_path, "two-payment", self.CFG, "--set", "correlation.c=[0.7]")
        assert code == 2


class TestProcrastinate:
    CFG = {
        "utility": {"zeta": {"family": "power", "k": 1.0}, "mu": ROOT_MU},
        "model": {"lambda": 1.0, "T": 10.0, "n": 2, "t_min": 0.0},
        "procrastinate": {"believed_zeta": {"family": "power", "k": 0.5}, "kappa": 2.0, "lattice": 12},
    }

    def test_misperceivers_save_more(self, tmp_path):
        code, out = run(tmp_path, "procrastinate", self.CFG)
        assert code == 0
        _, rows = read_csv(out / "policies.csv")
        assert rows and all(int(r["zeta_tilde"]) >= int(r["accurate"]) for r in rows)
        assert all(int(r["lambda_tilde"]) >= int(r["accurate"]) for r in rows)

    def test_unit_kappa_matches(self, tmp_path):
        _, out = run(tmp_path, "procrastinate", self.CFG, "--set", "procrastinate.kappa=1")
        _, rows = read_csv(out / "policies.csv")
        assert all(r["lambda_tilde"] == r["accurate"] for r in rows)

    def test_wrong_belief_rejected(self, tmp_path):
        code, _ = run(tmp_path, "procrastinate", self.CFG, "--set",
                      'procrastinate.believed_zeta={"family": "power", "k": 2.0}')
        assert code == 2


class TestVerify:
    CFG = {
        "verify": {
            "battery": [{"utility": {"zeta": {"family": "power", "k": 1.0}, "mu": ROOT_MU},
                         "model": {"lambda": 1.0, "T": 10.0, "n": 2, "t_min": 6.0}}],
            "properties": ["v_positive", "v_decreasing_t", "cutoff_order", "decomposition"],
        }
    }

    def test_passing_battery(self, tmp_path):
        code, out = run(tmp_path, "verify", self.CFG)
        assert code == 0
        doc = json.loads((out / "report.json").read_text())
        assert doc["n_failed"] == 0 and doc["n_reports"] == 4

    def test_fault_fixture(self, tmp_path):
        code, _ = run(tmp_path, "verify", self.CFG, "--set", "verify.inject_fault=bump_v1")
        assert code == 1

    def test_unknown_property(self, tmp_path):
        code, _ = run(tmp_path, "verify", self.CFG, "--set", 'verify.properties=["nope"]')
        assert code == 2


def test_override_parsing():
    cfg = apply_overrides(BASE, ["model.n=3", "extra.name=plain"])
    assert cfg["model"]["n"] == 3 and cfg["extra"]["name"] == "plain"
    assert BASE["model"]["n"] == 1


def test_bad_override(tmp_path):
    cfg = write(tmp_path, BASE)
    assert main(["solve", "--config", cfg, "--set", "novalue"]) == 2
