import numpy as np
import pytest

from pdespline.sim import (MetricsTable, StudyConfig, diffusion_basis, diffusion_pde,
                           diffusion_solution, run_study, simulate_dataset)


class TestDiffusionSolution:
    def test_initial_condition_values(self):
        assert diffusion_solution(0.0, 0.0, (0.7, 2.0)) == pytest.approx(1.0)
        assert diffusion_solution(1.0, 0.0, (0.7, 2.0)) == pytest.approx(0.5)

    def test_matches_display_form_at_study_theta(self):
        rng = np.random.default_rng(0)
        x1 = rng.uniform(-3, 3, 50)
        x2 = rng.uniform(0, 1, 50)
        mine = diffusion_solution(x1, x2, (0.5, 1.5))
        display = np.exp(-3 * x2) / (1 + 4 * x2 ** 2 - 4 * x1 * x2 + x1 ** 2)
        assert np.max(np.abs(mine - display)) < 1e-14

    def test_solution_satisfies_pde(self):
        rng = np.random.default_rng(1)
        theta = (0.5, 1.5)
        h = 1e-5
        x1 = rng.uniform(-2.5, 2.5, 100)
        x2 = rng.uniform(0.1, 0.9, 100)
        u_x1 = (diffusion_solution(x1 + h, x2, theta)
                - diffusion_solution(x1 - h, x2, theta)) / (2 * h)
        u_x2 = (diffusion_solution(x1, x2 + h, theta)
                - diffusion_solution(x1, x2 - h, theta)) / (2 * h)
        resid = u_x1 + theta[0] * u_x2 + theta[1] * diffusion_solution(x1, x2, theta)
        assert np.max(np.abs(resid)) < 1e-5

    def test_zero_theta1_rejected(self):
        with pytest.raises(ValueError):
            diffusion_solution(0.0, 0.0, (0.0, 1.0))


class TestSimulateDataset:
    config = StudyConfig(noise_sds=(0.01, 0.1), replicates=2)

    def test_default_point_count(self):
        data = simulate_dataset(self.config, 0, 0)
        assert data.n == 2500

    def test_deterministic_given_indices(self):
        d1 = simulate_dataset(self.config, 0, 1)
        d2 = simulate_dataset(self.config, 0, 1)
        assert np.array_equal(d1.zeta, d2.zeta)
        d3 = simulate_dataset(self.config, 1, 1)
        assert not np.array_equal(d1.zeta, d3.zeta)

    def test_noise_scale(self):
        ax = self.config.axes()
        X1, X2 = np.meshgrid(*ax, indexing="ij")
        clean = diffusion_solution(X1, X2, self.config.theta_true).T.ravel()
        data = simulate_dataset(self.config, 0, 0)
        sd = np.std(data.zeta - clean)
        assert sd == pytest.approx(0.01, rel=0.1)


class TestConfigValidation:
    def test_rejects_bad_modes(self):
        with pytest.raises(ValueError, match="mode"):
            StudyConfig(modes=("bayes-lagrange",))

    def test_rejects_zero_theta1(self):
        with pytest.raises(ValueError):
            StudyConfig(theta_true=(0.0, 1.5))

    def test_rejects_single_replicate(self):
        with pytest.raises(ValueError):
            StudyConfig(replicates=1)


@pytest.fixture(scope="module")
def small_study():
    config = StudyConfig(
        noise_sds=(0.01,), replicates=4, n_grid=(30, 24), basis_sizes=(16, 10),
        modes=("freq-ls", "bayes-ls"), base_seed=3,
        chain_iterations=1500, chain_burn_in=500, workers=2,
    )
    return config, run_study(config)


class TestRunStudy:
    def test_metrics_table_rows(self, small_study):
        config, (table, raw) = small_study
        assert len(table.rows) == 2 * 3  # modes x (theta1, theta2, tau)
        row = table.get("freq-ls", 0.01, "theta1")
        assert row["n_replicates"] == 4
        assert abs(row["R_BIAS_pct"]) < 5.0

    def test_metric_identity(self, small_study):
        # R_RMSE^2 = (R_BIAS/100)^2 + R_STD^2 exactly under ddof=0
        _, (table, _) = small_study
        for row in table.rows:
            if row["parameter"] == "tau" and row["mode"].startswith("bayes"):
                continue
            lhs = row["R_RMSE"] ** 2
            rhs = (row["R_BIAS_pct"] / 100.0) ** 2 + row["R_STD"] ** 2
            assert lhs == pytest.approx(rhs, abs=1e-10, rel=1e-10)

    def test_bayes_rows_have_coverage_and_mpsd(self, small_study):
        _, (table, _) = small_study
        row = table.get("bayes-ls", 0.01, "theta1")
        assert row["MPSD"] is not None and row["MPSD"] > 0
        assert 0.0 <= row["CP80"] <= 100.0
        assert 0.0 <= row["CP95"] <= 100.0

    def test_freq_rows_leave_bayes_columns_empty(self, small_study):
        _, (table, _) = small_study
        row = table.get("freq-ls", 0.01, "theta2")
        assert row["MPSD"] is None and row["CP80"] is None

    def test_table_text_roundtrip_header(self, small_study):
        _, (table, _) = small_study
        text = table.to_text()
        lines = text.strip().split("\n")
        assert lines[0].startswith("# R_BIAS_pct")
        assert lines[1].split(",")[0] == "mode"
        assert len(lines) == 2 + len(table.rows)

    def test_workers_do_not_change_results(self):
        config1 = StudyConfig(noise_sds=(0.05,), replicates=2, n_grid=(20, 16),
                              basis_sizes=(10, 8), modes=("freq-ls",),
                              base_seed=5, workers=1)
        config2 = StudyConfig(noise_sds=(0.05,), replicates=2, n_grid=(20, 16),
                              basis_sizes=(10, 8), modes=("freq-ls",),
                              base_seed=5, workers=2)
        t1, r1 = run_study(config1)
        t2, r2 = run_study(config2)
        assert r1 == r2


def test_monotone_difficulty_across_noise_levels():
    config = StudyConfig(
        noise_sds=(0.01, 0.05, 0.1), replicates=6, n_grid=(30, 24),
        basis_sizes=(16, 10), modes=("freq-ls",), base_seed=11, workers=2,
    )
    table, _ = run_study(config)
    for param in ("theta1", "theta2"):
        rmse = [table.get("freq-ls", sd, param)["R_RMSE"] for sd in config.noise_sds]
        assert rmse[0] <= rmse[1] <= rmse[2]


def test_zero_noise_rmse_floor():
    # sd must be positive by config contract; the no-noise claim is the
    # recovery floor, checked with a tiny sd standing in for zero
    config = StudyConfig(
        noise_sds=(1e-8,), replicates=2, n_grid=(50, 50), basis_sizes=(28, 13),
        modes=("freq-ls",), base_seed=2, workers=2,
    )
    table, _ = run_study(config)
    assert table.get("freq-ls", 1e-8, "theta1")["R_RMSE"] < 1e-3
    assert table.get("freq-ls", 1e-8, "theta2")["R_RMSE"] < 1e-3
