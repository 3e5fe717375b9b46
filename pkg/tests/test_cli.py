import io
import json
import math
import os
import sys
import tempfile
import unittest
from unittest.mock import patch

# Add project root to path
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from fracsde.char_system import CompositionResult
from fracsde.errors import HorizonExceededError
from fracsde.io import read_path_csv, write_path_csv
from fracsde.main import EXIT_DOMAIN, EXIT_IO, EXIT_NUMERICAL, EXIT_OK, main
from fracsde.time_grid import SampledPath, TimeGrid


class TestCommandLine(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = self._tmp.name

    def tearDown(self):
        self._tmp.cleanup()

    def path(self, name):
        return os.path.join(self.tmp, name)

    def test_fbm_writes_one_row_per_node(self):
        out = self.path("b.csv")
        code = main(["fbm", "--hurst", "0.75", "--steps", "64", "--horizon", "1", "--seed", "42", "--out", out])
        self.assertEqual(code, EXIT_OK)
        with open(out, encoding="utf-8") as f:
            lines = f.read().splitlines()
        self.assertEqual(lines[0], "t,value")
        self.assertEqual(len(lines), 66)

    def test_written_paths_round_trip_byte_for_byte(self):
        first, second = self.path("a.csv"), self.path("b.csv")
        self.assertEqual(main(["fbm", "--steps", "32", "--out", first]), EXIT_OK)
        write_path_csv(second, read_path_csv(first))
        with open(first, "rb") as f1, open(second, "rb") as f2:
            self.assertEqual(f1.read(), f2.read())

    def test_seeded_runs_are_reproducible(self):
        first, second = self.path("a.csv"), self.path("b.csv")
        main(["fbm", "--steps", "32", "--seed", "9", "--out", first])
        main(["fbm", "--steps", "32", "--seed", "9", "--out", second])
        with open(first, "rb") as f1, open(second, "rb") as f2:
            self.assertEqual(f1.read(), f2.read())

    def test_config_file_is_overridden_by_flags(self):
        config, out = self.path("cfg.json"), self.path("b.csv")
        with open(config, "w", encoding="utf-8") as f:
            json.dump({"steps": 16, "hurst": 0.8}, f)
        self.assertEqual(main(["fbm", "--config", config, "--steps", "8", "--out", out]), EXIT_OK)
        self.assertEqual(read_path_csv(out).grid.n_steps, 8)

    def test_unknown_flag_exits_with_usage(self):
        with patch("sys.stderr", new_callable=io.StringIO) as stderr:
            code = main(["fbm", "--bogus"])
        self.assertEqual(code, EXIT_DOMAIN)
        self.assertIn("usage", stderr.getvalue())

    def test_domain_error_exit_code(self):
        self.assertEqual(main(["fbm", "--hurst", "0.4", "--out", self.path("b.csv")]), EXIT_DOMAIN)

    def test_missing_input_exit_code(self):
        self.assertEqual(main(["integrate", "--g", self.path("missing.csv")]), EXIT_IO)

    def read_report(self, out):
        with open(out, encoding="utf-8") as f:
            return json.load(f)

    def test_integrate_reports_value(self):
        driver, out = self.path("b.csv"), self.path("ito.json")
        main(["fbm", "--steps", "64", "--out", driver])
        B = read_path_csv(driver)
        code = main(["integrate", "--method", "ito", "--f", driver, "--g", driver, "--malliavin", "indicator",
                     "--eval-point", "mid", "--from", "0", "--to", "1", "--out", out])
        self.assertEqual(code, EXIT_OK)
        self.assertAlmostEqual(self.read_report(out)["value"], 0.5 * B.values[-1] ** 2 - 0.5, places=12)

    def test_integrate_deterministic_integrand_over_sub_interval(self):
        driver, ones, out = self.path("b.csv"), self.path("ones.csv"), self.path("r.json")
        main(["fbm", "--steps", "64", "--out", driver])
        B = read_path_csv(driver)
        write_path_csv(ones, SampledPath.constant(B.grid, 1.0))
        for method in ("riemann", "fractional", "ito"):
            code = main(["integrate", "--method", method, "--f", ones, "--g", driver,
                         "--from", "0.25", "--to", "0.75", "--out", out])
            self.assertEqual(code, EXIT_OK)
            report = self.read_report(out)
            self.assertEqual((report["method"], report["a"], report["b"]), (method, 0.25, 0.75))
            self.assertAlmostEqual(report["value"], B.at(0.75) - B.at(0.25), places=10)

    def test_integrate_rejects_old_flags(self):
        with patch("sys.stderr", new_callable=io.StringIO):
            self.assertEqual(main(["integrate", "--integration", "ito"]), EXIT_DOMAIN)

    def test_frac_operator_is_positional(self):
        source, out = self.path("f.csv"), self.path("g.csv")
        grid = TimeGrid(1.0, 32)
        write_path_csv(source, SampledPath.from_function(grid, lambda t: t))
        code = main(["frac", "dleft", "--alpha", "0.5", "--in", source, "--out", out])
        self.assertEqual(code, EXIT_OK)
        expected = grid.nodes**0.5 / math.gamma(1.5)
        for got, want in zip(read_path_csv(out).values, expected):
            self.assertAlmostEqual(got, want, places=12)

    def test_frac_output_with_undefined_nodes_reads_back(self):
        source, derived, out = self.path("f.csv"), self.path("d.csv"), self.path("i.csv")
        grid = TimeGrid(1.0, 32)
        write_path_csv(source, SampledPath.constant(grid, 1.0))
        self.assertEqual(main(["frac", "dleft", "--in", source, "--out", derived]), EXIT_OK)
        with open(derived, encoding="utf-8") as f:
            self.assertEqual(f.read().splitlines()[1], "0,nan")
        self.assertEqual(main(["frac", "ileft", "--in", derived, "--base", str(grid.dt), "--out", out]), EXIT_OK)
        self.assertEqual(read_path_csv(out).values[0], 0.0)
        self.assertEqual(main(["frac", "ileft", "--in", derived, "--out", out]), EXIT_DOMAIN)

    def test_solve_linear_geometric_case(self):
        out = self.path("x.csv")
        code = main(["solve-linear", "--steps", "32", "--a1", "1", "--x0", "2", "--out", out])
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(read_path_csv(out).values[0], 2.0)

    def test_solve_quasilinear_needs_coefficients(self):
        self.assertEqual(main(["solve-quasilinear", "--steps", "16"]), EXIT_DOMAIN)

    def test_solve_quasilinear_from_file(self):
        coeffs, out = self.path("coeffs.json"), self.path("x.csv")
        with open(coeffs, "w", encoding="utf-8") as f:
            json.dump({"a1": 0.5, "b": {"kind": "logistic", "rate": 1.0}}, f)
        code = main(["solve-quasilinear", "--steps", "32", "--coeff-file", coeffs, "--eta", "0.5", "--out", out])
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(read_path_csv(out).grid.n_steps, 32)

    def test_solve_nonlinear_past_horizon_keeps_partial_result(self):
        out = self.path("x.csv")
        partial = CompositionResult(
            times=[0.25], values=[1.1], horizon=0.5, flagged=True,
            error=HorizonExceededError(0.5, 1.3, 4, "inverse iteration stopped contracting"),
        )
        with patch.object(sys.modules["fracsde.main"], "compose_solution", return_value=partial) as mock_compose:
            code = main(["solve-nonlinear", "--steps", "16", "--coeff", "sine", "--params", "4", "--out", out])
        self.assertEqual(code, EXIT_NUMERICAL)
        mock_compose.assert_called_once()
        with open(out, encoding="utf-8") as f:
            self.assertEqual(f.read().splitlines(), ["t,value", "0.25,1.1000000000000001"])

    def test_solve_nonlinear_linear_family(self):
        out = self.path("x.csv")
        code = main(["solve-nonlinear", "--steps", "64", "--coeff", "linear", "--params", "0.2,0.5",
                     "--times", "0.5,1", "--out", out])
        self.assertEqual(code, EXIT_OK)
        with open(out, encoding="utf-8") as f:
            self.assertEqual(len(f.read().splitlines()), 3)

    def test_mc_report(self):
        out = self.path("mc.json")
        code = main(["mc", "--experiment", "terminal-mean", "--samples", "200", "--steps", "16", "--out", out])
        self.assertEqual(code, EXIT_OK)
        with open(out, encoding="utf-8") as f:
            report = json.load(f)
        self.assertEqual(set(report) >= {"mean", "stderr", "target", "pass"}, True)
        self.assertTrue(report["pass"])

    def test_convergence_report(self):
        out = self.path("conv.json")
        code = main(["convergence", "--experiment", "picard-ode", "--levels", "32,64,128", "--out", out])
        self.assertEqual(code, EXIT_OK)
        with open(out, encoding="utf-8") as f:
            report = json.load(f)
        self.assertEqual([row["n_steps"] for row in report["rows"]], [32, 64, 128])
        self.assertAlmostEqual(report["order"], 1.0, delta=0.1)

    def test_too_few_levels_is_a_domain_error(self):
        self.assertEqual(main(["convergence", "--levels", "32,64"]), EXIT_DOMAIN)


if __name__ == '__main__':
    unittest.main()
