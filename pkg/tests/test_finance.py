import numpy as np
import pytest

from pdespline.errors import DataError
from pdespline.finance import (CalibrationSettings, OptionQuote, bs_price_closed_form,
                               bs_spec, calibrate_volatility, ingest_options,
                               quotes_to_dataset, synthetic_quotes)
from pdespline.basis import tensor_design


class TestClosedFormPrice:
    def test_terminal_payoff_limit(self):
        # at the money the value decays like sqrt(tau), hence the tolerance
        for S in (0.7, 1.0, 1.4):
            assert bs_price_closed_form(S, 1.0, 1e-12, 0.05, 0.2) == pytest.approx(
                max(S - 1.0, 0.0), abs=1e-6)
        assert bs_price_closed_form(1.3, 1.0, 0.0, 0.05, 0.2) == pytest.approx(0.3)

    def test_deep_in_the_money_asymptote(self):
        S, E, T, r = 50.0, 1.0, 0.5, 0.05
        assert bs_price_closed_form(S, E, T, r, 0.2) == pytest.approx(
            S - E * np.exp(-r * T), rel=1e-12)

    def test_satisfies_pricing_pde(self):
        # -C_s + r S C_S + (sigma^2/2) S^2 C_SS - r C = 0 in time-to-maturity
        r, sig = 0.05, 0.2
        rng = np.random.default_rng(0)
        S = rng.uniform(0.6, 1.6, 40)
        s = rng.uniform(0.1, 1.0, 40)
        h = 1e-4

        def C(S_, s_):
            return bs_price_closed_form(S_, 1.0, s_, r, sig)

        C_s = (C(S, s + h) - C(S, s - h)) / (2 * h)
        C_S = (C(S + h, s) - C(S - h, s)) / (2 * h)
        C_SS = (C(S + h, s) - 2 * C(S, s) + C(S - h, s)) / h ** 2
        resid = -C_s + r * S * C_S + 0.5 * sig ** 2 * S ** 2 * C_SS - r * C(S, s)
        assert np.max(np.abs(resid)) < 1e-4

    def test_sigma_validation(self):
        with pytest.raises(ValueError):
            bs_price_closed_form(1.0, 1.0, 0.5, 0.05, 0.0)


class TestBsSpec:
    def test_scaled_diffusion_multiplier_value(self):
        prob = bs_spec(0.05, ((-0.5, 0.5), (0.0, 1.0)))
        # the f_mm term carries sigma^2/2: at sigma=0.1 its multiplier is 0.005
        term = next(t for t in prob.pde.terms if t.deriv_orders == (2, 0))
        assert term.multiplier.value((0.1,)) == pytest.approx(0.005)

    def test_raw_terms_carry_spot_polynomials(self):
        prob = bs_spec(0.05, ((0.0, 3.0), (0.0, 1.0)), strike_ref=1.0,
                       coordinates="raw", n_internal_knots=2)
        first = next(t for t in prob.pde.terms if t.deriv_orders == (1, 0))
        second = next(t for t in prob.pde.terms if t.deriv_orders == (2, 0))
        assert first.coeff_polys[0] == (0.0, 1.0)
        assert second.coeff_polys[0] == (0.0, 0.0, 1.0)

    def test_terminal_payoff_values_raw(self):
        # internal knots at E and 2E: payoff rows are 0 and E
        E = 1.0
        prob = bs_spec(0.05, ((0.0, 3.0), (0.0, 1.0)), strike_ref=E,
                       coordinates="raw", n_internal_knots=2)
        meta = prob.constraints.point_meta
        v = prob.constraints.v
        at_E = [i for i, (pt, dv) in enumerate(meta) if pt == (E, 0.0)]
        at_2E = [i for i, (pt, dv) in enumerate(meta) if pt == (2 * E, 0.0)]
        assert v[at_E[0]] == pytest.approx(0.0)
        assert v[at_2E[0]] == pytest.approx(E)

    def test_low_edge_is_zero(self):
        prob = bs_spec(0.05, ((-0.5, 0.5), (0.0, 1.0)))
        meta = prob.constraints.point_meta
        idx = [i for i, (pt, dv) in enumerate(meta) if pt[0] == -0.5]
        assert len(idx) > 0
        assert np.all(prob.constraints.v[idx] == 0.0)

    def test_domain_must_include_strike(self):
        with pytest.raises(ValueError, match="strike"):
            bs_spec(0.05, ((0.1, 0.8), (0.0, 1.0)))
        with pytest.raises(ValueError, match="strike"):
            bs_spec(0.05, ((2.0, 3.0), (0.0, 1.0)), strike_ref=1.0, coordinates="raw")

    def test_maturity_face_required(self):
        with pytest.raises(ValueError, match="maturity"):
            bs_spec(0.05, ((-0.5, 0.5), (0.1, 1.0)))


class TestIngest:
    def write_csv(self, tmp_path, rows, header="spot,strike,tau,rate,ivol,price"):
        path = tmp_path / "quotes.csv"
        path.write_text(header + "\n" + "\n".join(rows) + "\n")
        return path

    def test_well_formed_file(self, tmp_path):
        rows = [f"{1.0 + 0.01*i},1.0,0.5,0.05,,{0.1 + 0.001*i}" for i in range(40)]
        quotes = ingest_options(self.write_csv(tmp_path, rows))
        assert len(quotes) == 40
        assert quotes[0].ivol is None

    def test_bad_rows_skipped(self, tmp_path):
        rows = [f"1.0,1.0,0.5,0.05,0.2,{0.1 + 0.001*i}" for i in range(40)]
        rows[5] = "1.0,1.0,0.5,0.05,0.2,-3.0"  # negative price
        quotes = ingest_options(self.write_csv(tmp_path, rows))
        assert len(quotes) == 39

    def test_too_many_bad_rows(self, tmp_path):
        rows = ["1.0,1.0,0.5,0.05,,0.1"] * 10 + ["-1.0,1.0,0.5,0.05,,0.1"] * 2
        with pytest.raises(DataError, match="invalid"):
            ingest_options(self.write_csv(tmp_path, rows))

    def test_missing_columns(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("spot,strike\n1.0,1.0\n")
        with pytest.raises(DataError, match="missing columns"):
            ingest_options(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        with pytest.raises(DataError, match="empty"):
            ingest_options(path)


class TestSyntheticQuotes:
    def test_grid_count_and_determinism(self):
        q1 = synthetic_quotes(0.1, 0.05, np.linspace(-0.3, 0.3, 8),
                              np.linspace(0.1, 1.0, 5), noise_sd=0.001, seed=3)
        q2 = synthetic_quotes(0.1, 0.05, np.linspace(-0.3, 0.3, 8),
                              np.linspace(0.1, 1.0, 5), noise_sd=0.001, seed=3)
        assert len(q1) == 40
        assert all(a.price == b.price for a, b in zip(q1, q2))

    def test_noise_free_prices_match_closed_form(self):
        quotes = synthetic_quotes(0.2, 0.03, [0.1], [0.5])
        q = quotes[0]
        assert q.price == pytest.approx(
            bs_price_closed_form(q.spot, q.strike, q.tau, q.rate, 0.2))

    def test_scaled_dataset_mapping(self):
        quotes = synthetic_quotes(0.2, 0.03, [0.1, -0.2], [0.5])
        data = quotes_to_dataset(quotes, "scaled")
        assert data.locations()[0] == pytest.approx([0.1, 0.5])
        assert data.zeta[0] == pytest.approx(quotes[0].price / quotes[0].strike)


@pytest.fixture(scope="module")
def small_calibration():
    m = np.linspace(-0.6, 0.6, 24)
    s = np.linspace(0.05, 1.0, 12)
    quotes = synthetic_quotes(0.10, 0.05, m, s, noise_sd=0.001, seed=3)
    settings = CalibrationSettings(mode="freq", n_internal_knots=12,
                                   domain=((-0.7, 0.7), (0.0, 1.05)))
    return calibrate_volatility(quotes, settings)


class TestCalibration:
    def test_small_synthetic_recovery(self, small_calibration):
        res = small_calibration
        assert res.fit.converged
        assert abs(res.sigma_hat - 0.10) / 0.10 < 0.05

    def test_soft_constraint_adherence(self, small_calibration):
        # the smooth edge conditions bind tightly; the terminal payoff rows
        # carry the kink, which a cubic basis matches only to knot-scale
        res = small_calibration
        cons = res.problem.constraints
        gaps = np.abs(cons.H @ res.fit.c_hat - cons.v)
        scale = 1.0 + np.max(np.abs(cons.v))
        on_face = np.array([pt[1] == 0.0 for pt, _ in cons.point_meta])
        assert np.max(gaps[~on_face]) <= 1e-3 * scale
        assert np.max(gaps[on_face]) <= 5e-3 * scale

    def test_price_monotone_in_strike(self, small_calibration):
        # scaled surface: C(S0, E) = E f(log(S0/E), s); check along strikes
        res = small_calibration
        basis = res.problem.basis
        S0, s0 = 1.0, 0.5
        strikes = np.linspace(0.85, 1.15, 13)
        pts = np.column_stack([np.log(S0 / strikes), np.full_like(strikes, s0)])
        f = tensor_design(basis, pts, mode="scatter").values @ res.fit.c_hat
        prices = strikes * f
        assert np.all(np.diff(prices) <= 1e-4 * strikes[:-1])

    def test_noise_free_recovery_within_1e3(self):
        m = np.linspace(-0.6, 0.6, 40)
        s = np.linspace(0.05, 1.0, 20)
        quotes = synthetic_quotes(0.10, 0.05, m, s, noise_sd=0.0)
        res = calibrate_volatility(quotes, CalibrationSettings(
            mode="freq", domain=((-0.7, 0.7), (0.0, 1.05))))
        assert abs(res.sigma_hat - 0.10) / 0.10 < 1e-3

    def test_quote_count_validation(self):
        quotes = synthetic_quotes(0.1, 0.05, [0.0], [0.5])
        with pytest.raises(ValueError, match="100"):
            calibrate_volatility(quotes)
