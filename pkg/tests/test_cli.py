import numpy as np
import pytest

from pdespline.basis import TensorBasis, uniform_basis
from pdespline.cli import (RunConfig, config_hash, export_surface, main, parse_config,
                           run, write_effective_config)
from pdespline.errors import ConfigError
from pdespline.finance import synthetic_quotes
from pdespline.sim import diffusion_solution

CONFIG_DIR = "configs"


def write(tmp_path, text, name="run.toml"):
    path = tmp_path / name
    path.write_text(text)
    return path


def small_fit_config(tmp_path, seed=11, extra=""):
    # scatter observations of the transport solution on a coarse grid
    ax1 = np.linspace(-3, 3, 30)
    ax2 = np.linspace(0, 1, 24)
    rows = ["x1,x2,zeta"]
    rng = np.random.default_rng(0)
    for a in ax1:
        for b in ax2:
            z = diffusion_solution(a, b, (0.5, 1.5)) + 0.01 * rng.standard_normal()
            rows.append(f"{float(a)!r},{float(b)!r},{float(z)!r}")
    data_path = write(tmp_path, "\n".join(rows) + "\n", "obs.csv")
    x1k = np.linspace(-3, 3, 14)[1:-1]
    pts = ", ".join(f"[{float(x)!r}, 0.0]" for x in np.linspace(-3, 3, 9))
    vals = ", ".join(repr(float(1.0 / (1.0 + x ** 2))) for x in np.linspace(-3, 3, 9))
    return write(tmp_path, f"""
[run]
command = "fit"
seed = {seed}
output_dir = "{tmp_path}/out"

[basis]
dims = [
  {{ lo = -3.0, hi = 3.0, degree = 3, internal_knots = [{", ".join(repr(float(x)) for x in x1k)}] }},
  {{ lo = 0.0, hi = 1.0, degree = 3, n_internal_knots = 5 }},
]

[pde]
theta = ["theta1", "theta2"]
terms = [
  {{ deriv = [1, 0], constant = 1.0, theta_powers = [0, 0] }},
  {{ deriv = [0, 1], constant = 1.0, theta_powers = [1, 0] }},
  {{ deriv = [0, 0], constant = 1.0, theta_powers = [0, 1] }},
]

[[conditions]]
points = [{pts}]
deriv = [0, 0]
values = [{vals}]

[data]
path = "{data_path}"

[estimator]
method = "freq"
constraint = "ls"
theta0 = [1.0, 1.0]
{extra}
""")


class TestParseConfig:
    def test_shipped_study_config_defaults(self):
        config = parse_config(f"{CONFIG_DIR}/diffusion_study.toml")
        assert config.command == "simulate"
        assert config["simulate"]["basis"]["n1"] == 28
        assert config["simulate"]["basis"]["n2"] == 13
        assert config["estimator"]["theta0"] == [1.0, 1.0]
        assert config["simulate"]["grid"] == {"n1": 50, "n2": 50}

    def test_unknown_keys_rejected(self, tmp_path):
        path = write(tmp_path, """
[run]
command = "simulate"
seed = 1
typo_key = 3
""")
        with pytest.raises(ConfigError, match="run.typo_key"):
            parse_config(path)

    def test_missing_seed_rejected(self, tmp_path):
        path = write(tmp_path, '[run]\ncommand = "simulate"\n')
        with pytest.raises(ConfigError, match="seed"):
            parse_config(path)

    def test_undeclared_theta_power_length(self, tmp_path):
        path = write(tmp_path, """
[run]
command = "fit"
seed = 1
[basis]
dims = [ { lo = 0.0, hi = 1.0, degree = 3, n_internal_knots = 3 } ]
[pde]
theta = ["a"]
terms = [ { deriv = [1], constant = 1.0, theta_powers = [1, 2] } ]
[data]
path = "x.csv"
[estimator]
theta0 = [1.0]
""")
        with pytest.raises(ConfigError, match=r"terms\[0\]"):
            parse_config(path)

    def test_prior_for_undeclared_parameter(self, tmp_path):
        path = write(tmp_path, """
[run]
command = "fit"
seed = 1
[basis]
dims = [ { lo = 0.0, hi = 1.0, degree = 3, n_internal_knots = 3 } ]
[pde]
theta = ["a"]
terms = [ { deriv = [1], constant = 1.0, theta_powers = [1] } ]
[data]
path = "x.csv"
[estimator]
theta0 = [1.0]
[estimator.priors.b]
mean = 0.0
sd = 1.0
""")
        with pytest.raises(ConfigError, match="undeclared"):
            parse_config(path)

    def test_bayes_lagrange_rejected(self, tmp_path):
        path = write(tmp_path, """
[run]
command = "simulate"
seed = 1
[estimator]
method = "bayes"
constraint = "lagrange"
""")
        with pytest.raises(ConfigError, match="lagrange|Bayes"):
            parse_config(path)

    def test_round_trip_identity(self, tmp_path):
        config = parse_config(f"{CONFIG_DIR}/diffusion_study.toml")
        echo = tmp_path / "effective.toml"
        write_effective_config(config, echo, config_hash(config))
        again = parse_config(echo)
        assert again == config


class TestRunFit:
    def test_fit_writes_artifacts_and_is_deterministic(self, tmp_path):
        path = small_fit_config(tmp_path, extra="\n[export]\nsurface_grid = [8, 5]\n"
                                                "\n[estimator.bootstrap]\nreplicates = 20\n")
        config = parse_config(path)
        run(config, output_dir=tmp_path / "out1")
        run(parse_config(path), output_dir=tmp_path / "out2")
        est1 = (tmp_path / "out1" / "estimates.csv").read_bytes()
        est2 = (tmp_path / "out2" / "estimates.csv").read_bytes()
        assert est1 == est2
        for name in ("effective_config.toml", "trace.csv", "surface.csv"):
            assert (tmp_path / "out1" / name).exists()
        text = est1.decode()
        assert text.startswith("# config_sha256=")
        assert "theta1" in text and "theta2" in text

    def test_fit_estimates_reasonable(self, tmp_path):
        config = parse_config(small_fit_config(tmp_path))
        rows = run(config, output_dir=tmp_path / "out")
        by_name = {r[0]: r[1] for r in rows}
        assert abs(by_name["theta1"] - 0.5) / 0.5 < 0.2
        assert abs(by_name["theta2"] - 1.5) / 1.5 < 0.2


class TestRunSimulate:
    def test_two_replicate_smoke(self, tmp_path):
        path = write(tmp_path, f"""
[run]
command = "simulate"
seed = 5
output_dir = "{tmp_path}/out"
threads = 2

[simulate]
noise_sds = [0.05]
replicates = 2
modes = ["freq-ls"]

[simulate.grid]
n1 = 25
n2 = 20

[simulate.basis]
n1 = 12
n2 = 9
""")
        run(parse_config(path))
        metrics = (tmp_path / "out" / "metrics.csv").read_text()
        lines = metrics.strip().split("\n")
        assert lines[0].startswith("# config_sha256=")
        assert lines[1].startswith("# R_BIAS_pct")
        assert lines[2].split(",")[:4] == ["mode", "noise_sd", "parameter", "true_value"]
        assert (tmp_path / "out" / "replicates.csv").exists()


class TestRunCalibrate:
    def test_synthetic_sigma_recovery(self, tmp_path):
        # keep the grid where prices dominate the noise so no rows are dropped
        quotes = synthetic_quotes(0.10, 0.05, np.linspace(-0.15, 0.45, 24),
                                  np.linspace(0.3, 1.0, 12), noise_sd=1e-4, seed=3)
        rows = ["spot,strike,tau,rate,ivol,price"]
        rows += [f"{q.spot!r},{q.strike!r},{q.tau!r},{q.rate!r},,{q.price!r}"
                 for q in quotes]
        write(tmp_path, "\n".join(rows) + "\n", "quotes.csv")
        path = write(tmp_path, f"""
[run]
command = "calibrate"
seed = 9
output_dir = "{tmp_path}/out"

[data]
path = "{tmp_path}/quotes.csv"

[calibrate]
n_internal_knots = 12
moneyness_range = [-0.25, 0.55]
maturity_max = 1.05
""")
        run(parse_config(path))
        text = (tmp_path / "out" / "estimates.csv").read_text()
        sigma_row = [l for l in text.splitlines() if l.startswith("sigma,")][0]
        sigma = float(sigma_row.split(",")[1])
        assert abs(sigma - 0.10) / 0.10 < 0.05


class TestExportSurface:
    basis = TensorBasis((uniform_basis(0.0, 1.0, 3, 3), uniform_basis(0.0, 2.0, 2, 2)))

    def test_constant_coefficients_constant_surface(self, tmp_path):
        path = tmp_path / "surface.csv"
        export_surface(np.full(self.basis.n_basis, 2.5), self.basis, [4, 3], path)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "x1,x2,u_hat"
        vals = [float(l.split(",")[-1]) for l in lines[1:]]
        assert np.allclose(vals, 2.5)

    def test_two_by_two_grid_row_count_and_order(self, tmp_path):
        path = tmp_path / "surface.csv"
        export_surface(np.zeros(self.basis.n_basis), self.basis, [2, 2], path)
        lines = path.read_text().strip().split("\n")[1:]
        assert len(lines) == 4
        # dimension 1 fastest
        x1 = [float(l.split(",")[0]) for l in lines]
        assert x1 == [0.0, 1.0, 0.0, 1.0]

    def test_out_of_domain_axes_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="domain"):
            export_surface(np.zeros(self.basis.n_basis), self.basis,
                           [np.array([0.0, 1.5]), np.array([0.0, 1.0])],
                           tmp_path / "s.csv")


class TestMainExitCodes:
    def test_success_and_config_error(self, tmp_path, capsys):
        bad = write(tmp_path, "[run]\ncommand = \"simulate\"\n")
        assert main(["--config", str(bad)]) == 2
        assert "config error" in capsys.readouterr().err

    def test_missing_data_file_is_io_error(self, tmp_path, capsys):
        path = write(tmp_path, f"""
[run]
command = "calibrate"
seed = 1
output_dir = "{tmp_path}/out"
[data]
path = "{tmp_path}/does_not_exist.csv"
""")
        assert main(["--config", str(path)]) == 4

    def test_numerical_failure_exit_code(self, tmp_path, capsys):
        # duplicated condition rows make the Lagrange system rank deficient
        pts = "[0.0, 0.0], [0.0, 0.0]"
        path = small_fit_config(tmp_path)
        text = path.read_text().replace('constraint = "ls"', 'constraint = "lagrange"')
        import re
        text = re.sub(r"points = \[.*\]", f"points = [{pts}]", text)
        text = re.sub(r"values = \[.*\]", "values = [1.0, 1.0]", text)
        bad = write(tmp_path, text, "bad.toml")
        assert main(["--config", str(bad), "--output-dir", str(tmp_path / "o3")]) == 3

    def test_cli_smoke_via_main(self, tmp_path):
        path = small_fit_config(tmp_path, seed=21)
        assert main(["--config", str(path), "--output-dir", str(tmp_path / "om")]) == 0
