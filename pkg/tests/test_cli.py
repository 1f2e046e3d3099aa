"""Command-line interface: flags, outputs, reproducibility."""

import json
import os

import numpy as np
import pytest

from afem.cli import build_parser, load_problem, main
from afem.driver import CSV_HEADER
from afem.splines import load_solution


def run_cli(args):
    try:
        return main(args)
    except SystemExit as exc:  # argparse error paths
        return exc.code


BASE = ["--problem", "sin2", "--mode", "conforming", "--degree", "2",
        "--theta", "0.5", "--initial-levels", "2", "--max-dofs", "300"]


class TestValidation:
    def test_help_exits_zero(self, capsys):
        code = run_cli(["--help"])
        assert code == 0
        assert "usage" in capsys.readouterr().out

    def test_theta_out_of_range_exits_two(self, capsys):
        code = run_cli(BASE[:] + ["--theta", "1.5", "--out", "x"])
        assert code == 2
        assert "theta" in capsys.readouterr().err

    def test_unknown_problem_exits_two(self, capsys):
        code = run_cli(["--problem", "mystery", "--out", "x"])
        assert code == 2
        assert "mystery" in capsys.readouterr().err

    def test_unknown_flag_exits_two(self):
        assert run_cli(["--frobnicate"]) == 2

    def test_too_coarse_conforming_exits_two(self, tmp_path, capsys):
        code = run_cli(["--problem", "sin2", "--mode", "conforming",
                        "--degree", "2", "--initial-levels", "0",
                        "--out", str(tmp_path)])
        assert code == 2
        assert "conforming" in capsys.readouterr().err

    def test_bad_gamma_exits_two(self, capsys):
        code = run_cli(BASE[:] + ["--gamma1", "-5", "--out", "x"])
        assert code == 2
        assert "gamma1" in capsys.readouterr().err


class TestEndToEnd:
    def test_run_produces_csv_and_manifest(self, tmp_path, capsys):
        out = tmp_path / "run1"
        code = run_cli(BASE + ["--max-dofs", "600", "--out", str(out)])
        assert code == 0
        csv_path = out / "convergence.csv"
        manifest_path = out / "manifest.json"
        assert csv_path.exists() and manifest_path.exists()
        lines = csv_path.read_text().splitlines()
        assert lines[0] == CSV_HEADER
        assert len([ln for ln in lines if ln]) >= 6  # >= 5 data rows
        manifest = json.loads(manifest_path.read_text())
        assert manifest["problem"] == "sin2"
        assert manifest["summary"]["config"]["theta"] == 0.5
        assert manifest["summary"]["rho_geometric_mean"] < 1.0

    def test_dumps_and_solution(self, tmp_path):
        out = tmp_path / "run2"
        code = run_cli(BASE + ["--out", str(out), "--dump-mesh",
                               "--dump-indicators", "--save-solution"])
        assert code == 0
        mesh_lines = (out / "mesh_final.txt").read_text().strip().splitlines()
        keys = [tuple(map(int, ln.split())) for ln in mesh_lines]
        assert keys == sorted(keys)
        ind_lines = (out / "indicators_final.txt").read_text().strip() \
            .splitlines()
        assert len(ind_lines) == len(mesh_lines)
        assert all(len(ln.split()) == 8 for ln in ind_lines)
        fn = load_solution(out / "solution.txt")
        assert fn.space.dim == len(fn.coefficients)

    def test_load_solution_inspection(self, tmp_path, capsys):
        out = tmp_path / "run3"
        assert run_cli(BASE + ["--out", str(out), "--save-solution"]) == 0
        capsys.readouterr()
        code = run_cli(["--load-solution", str(out / "solution.txt")])
        assert code == 0
        assert "degree=2" in capsys.readouterr().out

    def test_byte_identical_reruns(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        args = BASE + ["--max-dofs", "400"]
        assert run_cli(args + ["--out", str(a)]) == 0
        assert run_cli(args + ["--out", str(b)]) == 0
        assert (a / "convergence.csv").read_bytes() == \
            (b / "convergence.csv").read_bytes()

    def test_zero_problem_single_row(self, tmp_path):
        out = tmp_path / "zero"
        code = run_cli(["--problem", "zero", "--mode", "nitsche",
                        "--initial-levels", "1", "--max-dofs", "100",
                        "--out", str(out)])
        assert code == 0
        rows = [ln for ln in (out / "convergence.csv").read_text()
                .splitlines() if ln]
        assert len(rows) == 2

    def test_nitsche_mode_runs(self, tmp_path):
        out = tmp_path / "nit"
        code = run_cli(["--problem", "sin2", "--mode", "nitsche",
                        "--degree", "2", "--initial-levels", "2",
                        "--max-dofs", "200", "--out", str(out)])
        assert code == 0

    def test_undersized_gamma_reports_spd_failure(self, tmp_path, capsys):
        code = run_cli(["--problem", "sin2", "--mode", "nitsche",
                        "--degree", "2", "--initial-levels", "2",
                        "--gamma1", "1e-6", "--gamma2", "1e-6",
                        "--max-dofs", "100", "--out", str(tmp_path)])
        assert code == 2
        assert "gamma" in capsys.readouterr().err

    def test_quad_n_and_cg_solver(self, tmp_path):
        out = tmp_path / "cg"
        code = run_cli(["--problem", "sin2", "--mode", "nitsche",
                        "--degree", "2", "--initial-levels", "1",
                        "--max-dofs", "40", "--max-iters", "2",
                        "--quad-n", "5", "--solver", "cg",
                        "--out", str(out)])
        assert code == 0
        assert (out / "convergence.csv").exists()


class TestCustomProblem:
    def test_custom_file_with_exact_solution(self, tmp_path):
        spec = {
            "name": "custom-sin2",
            "f": "8*pi**4*(cos(2*pi*x)*cos(2*pi*y)"
                 " - cos(2*pi*x)*sin(pi*y)**2 - sin(pi*x)**2*cos(2*pi*y))",
            "u": "sin(pi*x)**2 * sin(pi*y)**2",
        }
        path = tmp_path / "prob.json"
        path.write_text(json.dumps(spec))
        prob = load_problem(str(path))
        from afem.oracles import manufactured_sin2
        mp = manufactured_sin2()
        rng = np.random.default_rng(0)
        for x, y in rng.uniform(0.0, 1.0, (20, 2)):
            assert prob.f(x, y) == pytest.approx(mp.f(x, y), rel=1e-12)
            assert prob.u(x, y) == pytest.approx(mp.u(x, y), abs=1e-13)

    def test_custom_file_missing_f_exits_two(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text("{}")
        code = run_cli(["--problem", str(path), "--out", str(tmp_path)])
        assert code == 2

    def test_custom_run_without_exact_solution(self, tmp_path):
        path = tmp_path / "fonly.json"
        path.write_text(json.dumps({"f": "1.0 + 0*x"}))
        out = tmp_path / "out"
        code = run_cli(["--problem", str(path), "--mode", "nitsche",
                        "--initial-levels", "1", "--max-dofs", "100",
                        "--max-iters", "2", "--out", str(out)])
        assert code == 0
        rows = (out / "convergence.csv").read_text().splitlines()
        # no exact solution: error columns empty
        assert rows[1].split(",")[3] == ""


def test_parser_defaults_match_driver_defaults():
    args = build_parser().parse_args([])
    assert args.theta == 0.5
    assert args.degree == 2
    assert args.max_dofs == 20000
    assert args.max_iters == 25
    assert args.mode == "conforming"
