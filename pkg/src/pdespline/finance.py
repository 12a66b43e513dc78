"""European call smoothing under the Black-Scholes no-arbitrage model.

The pricing equation C_t + r S C_S + (sigma^2/2) S^2 C_SS - r C = 0 is
posed here in time-to-maturity s = T - t (so the time derivative flips
sign and the terminal payoff becomes the s = 0 face).  Two coordinate
systems are supported:

raw
    state C(S, s) on a spot/maturity box; polynomial coefficients S and
    S^2 enter the first- and second-order spot terms.
scaled (default)
    prices divided by their strike and spot mapped to log-moneyness
    m = log(S/E); substituting C = E f(m, s) turns the equation into
    -f_s + (r - sigma^2/2) f_m + (sigma^2/2) f_mm - r f = 0 with constant
    coefficients, and quotes with different strikes pool on one surface.

The no-arbitrage conditions are sampled on the knot grid of the domain
faces: zero price on the low edge, discounted intrinsic value
S_max - E exp(-r s) on the high edge (exact at finite spot, unlike the
loose "price tends to S" asymptote), and the call payoff on s = 0.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import ndtr

from .basis import TensorBasis, uniform_basis
from .bayes import ChainSettings, Hyperparams, NormalPrior, hpd_interval, run_chain, summarize
from .data import Dataset
from .errors import DataError
from .freq import BootstrapSettings, FitSettings, FreqFit, bootstrap_ci, fit_frequentist
from .pde import (Condition, ConstraintSet, Multiplier, PdeSpec, PdeTerm,
                  PenaltyAssembler, build_constraints)


@dataclass(frozen=True)
class OptionQuote:
    """One European call quote; ``tau`` is time to maturity in years."""

    spot: float
    strike: float
    tau: float
    rate: float
    price: float
    ivol: float | None = None

    def validate(self):
        if not (self.spot > 0 and self.strike > 0 and self.price > 0):
            raise ValueError("spot, strike and price must be positive")
        if self.tau < 0:
            raise ValueError("time to maturity must be non-negative")
        if not all(np.isfinite([self.spot, self.strike, self.tau, self.rate, self.price])):
            raise ValueError("quote fields must be finite")


def bs_price_closed_form(spot, strike, time_to_maturity, rate, sigma):
    """Standard European call value via the normal c.d.f. (data oracle)."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    scalar = np.isscalar(spot) and np.isscalar(time_to_maturity)
    S, s = np.broadcast_arrays(np.atleast_1d(np.asarray(spot, dtype=float)),
                               np.atleast_1d(np.asarray(time_to_maturity, dtype=float)))
    out = np.maximum(S - strike, 0.0).astype(float)
    pos = s > 0
    if np.any(pos):
        sq = sigma * np.sqrt(s[pos])
        d1 = (np.log(S[pos] / strike) + (rate + 0.5 * sigma ** 2) * s[pos]) / sq
        d2 = d1 - sq
        out[pos] = S[pos] * ndtr(d1) - strike * np.exp(-rate * s[pos]) * ndtr(d2)
    if scalar:
        return float(out[0])
    return out.reshape(np.broadcast_shapes(np.shape(spot), np.shape(time_to_maturity)))


@dataclass(frozen=True)
class BsProblem:
    """PDE, basis and no-arbitrage constraints for one calibration run."""

    pde: PdeSpec
    basis: TensorBasis
    constraints: ConstraintSet
    domain: tuple
    coordinates: str
    rate: float
    strike_ref: float


def _bs_pde(rate: float, coordinates: str) -> PdeSpec:
    one2 = ((1.0,), (1.0,))
    if coordinates == "scaled":
        terms = (
            PdeTerm(Multiplier(-1.0, (0,)), one2, (0, 1)),       # -f_s
            PdeTerm(Multiplier(rate, (0,)), one2, (1, 0)),        # r f_m
            PdeTerm(Multiplier(-0.5, (2,)), one2, (1, 0)),        # -(sigma^2/2) f_m
            PdeTerm(Multiplier(0.5, (2,)), one2, (2, 0)),         # (sigma^2/2) f_mm
            PdeTerm(Multiplier(-rate, (0,)), one2, (0, 0)),       # -r f
        )
    else:
        terms = (
            PdeTerm(Multiplier(-1.0, (0,)), one2, (0, 1)),
            PdeTerm(Multiplier(rate, (0,)), ((0.0, 1.0), (1.0,)), (1, 0)),
            PdeTerm(Multiplier(0.5, (2,)), ((0.0, 0.0, 1.0), (1.0,)), (2, 0)),
            PdeTerm(Multiplier(-rate, (0,)), one2, (0, 0)),
        )
    return PdeSpec(p=2, theta_names=("sigma",), terms=terms)


def bs_spec(rate: float, domain, strike_ref: float = 1.0, coordinates: str = "scaled",
            degree: int = 3, n_internal_knots: int = 25) -> BsProblem:
    """Build the pricing PDE, its tensor basis and the no-arbitrage rows.

    ``domain`` is ((x_lo, x_hi), (0, s_max)) in moneyness (scaled) or spot
    (raw) coordinates; it must contain the strike so the payoff kink is
    representable, and the maturity range must start at zero so the payoff
    face carries the terminal condition.
    """
    if coordinates not in ("scaled", "raw"):
        raise ValueError(f"coordinates must be 'scaled' or 'raw', got {coordinates!r}")
    if not np.isfinite(rate):
        raise ValueError("rate must be finite")
    (x_lo, x_hi), (s_lo, s_hi) = domain
    if not (x_lo < x_hi and s_lo < s_hi):
        raise ValueError("domain is degenerate")
    if s_lo != 0.0:
        raise ValueError("maturity range must start at 0 (terminal payoff face)")
    strike_pos = 0.0 if coordinates == "scaled" else strike_ref
    if not x_lo < strike_pos < x_hi:
        raise ValueError(
            f"domain {domain[0]} excludes the strike at {strike_pos}; "
            "the payoff kink must be representable"
        )
    basis = TensorBasis((
        uniform_basis(x_lo, x_hi, degree, n_internal_knots),
        uniform_basis(s_lo, s_hi, degree, n_internal_knots),
    ))
    xk = basis.dims[0].spans
    sk = basis.dims[1].spans
    E = strike_ref

    if coordinates == "scaled":
        hi_edge = np.exp(x_hi) - np.exp(-rate * sk)
        payoff = np.maximum(np.exp(xk[1:-1]) - 1.0, 0.0)
    else:
        hi_edge = x_hi - E * np.exp(-rate * sk)
        payoff = np.maximum(xk[1:-1] - E, 0.0)
    conditions = [
        Condition(np.column_stack([np.full_like(sk, x_lo), sk]), (0, 0), np.zeros_like(sk)),
        Condition(np.column_stack([np.full_like(sk, x_hi), sk]), (0, 0), hi_edge),
        Condition(np.column_stack([xk[1:-1], np.zeros_like(xk[1:-1])]), (0, 0), payoff),
    ]
    cons = build_constraints(conditions, basis)
    return BsProblem(pde=_bs_pde(rate, coordinates), basis=basis, constraints=cons,
                     domain=domain, coordinates=coordinates, rate=rate, strike_ref=E)


REQUIRED_COLUMNS = ("spot", "strike", "tau", "rate", "price")


def ingest_options(path) -> list:
    """Parse and validate the six-column quote CSV.

    Header ``spot,strike,tau,rate,ivol,price`` (ivol optional).  Rows that
    fail validation are reported with their line numbers and skipped; more
    than 5 percent skipped, or a missing column, is a hard error.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file")
        missing = [c for c in REQUIRED_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        quotes, skipped = [], []
        for lineno, row in enumerate(reader, start=2):
            try:
                ivol = row.get("ivol")
                quote = OptionQuote(
                    spot=float(row["spot"]), strike=float(row["strike"]),
                    tau=float(row["tau"]), rate=float(row["rate"]),
                    price=float(row["price"]),
                    ivol=float(ivol) if ivol not in (None, "") else None,
                )
                quote.validate()
            except (TypeError, ValueError) as exc:
                skipped.append((lineno, str(exc)))
                continue
            quotes.append(quote)
    if not quotes and not skipped:
        raise DataError(f"{path}: no data rows")
    total = len(quotes) + len(skipped)
    if len(skipped) > 0.05 * total:
        raise DataError(
            f"{path}: {len(skipped)}/{total} rows invalid; first: {skipped[:3]}"
        )
    return quotes


def synthetic_quotes(sigma: float, rate: float, moneyness, maturities,
                     noise_sd: float = 0.0, seed: int = 0, strike: float = 1.0) -> list:
    """Closed-form quotes on a (moneyness x maturity) grid plus price noise."""
    m = np.asarray(moneyness, dtype=float)
    s = np.asarray(maturities, dtype=float)
    MM, SS = np.meshgrid(m, s, indexing="ij")
    spot = strike * np.exp(MM)
    price = bs_price_closed_form(spot, strike, SS, rate, sigma)
    if noise_sd > 0:
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        price = price + strike * noise_sd * rng.standard_normal(price.shape)
    quotes = []
    for i in range(len(m)):
        for j in range(len(s)):
            quotes.append(OptionQuote(spot=float(spot[i, j]), strike=strike,
                                      tau=float(SS[i, j]), rate=rate,
                                      price=float(price[i, j])))
    return quotes


def quotes_to_dataset(quotes, coordinates: str) -> Dataset:
    """Scattered dataset in the chosen coordinates (prices scaled by strike)."""
    if coordinates == "scaled":
        pts = np.array([[np.log(q.spot / q.strike), q.tau] for q in quotes])
        vals = np.array([q.price / q.strike for q in quotes])
    else:
        pts = np.array([[q.spot, q.tau] for q in quotes])
        vals = np.array([q.price for q in quotes])
    return Dataset(points=pts, zeta=vals, grid=False)


@dataclass(frozen=True)
class CalibrationSettings:
    mode: str = "freq"                  # freq | bayes
    coordinates: str = "scaled"
    constraint: str = "ls"              # ls | lagrange (freq only)
    kappa: float = 1e6
    rate: float | None = None           # default: median of quote rates
    sigma0: float = 0.2
    degree: int = 3
    n_internal_knots: int = 25
    domain: tuple | None = None         # default: padded data bounding box
    domain_pad: float = 0.05
    quad_points_per_span: object = 32
    bootstrap: BootstrapSettings | None = None
    chain: ChainSettings | None = None
    sigma_prior: NormalPrior = NormalPrior(mean=0.2, sd=1.0, lower=1e-4)
    interval_level: float = 0.95
    workers: int = 1


@dataclass(frozen=True)
class CalibrationResult:
    sigma_hat: float
    interval: tuple | None
    level: float
    mode: str
    problem: BsProblem
    dataset: Dataset
    fit: FreqFit | None = None
    chain: object = None
    bootstrap: dict | None = None
    gamma_hat: float | None = None


def _default_domain(pts: np.ndarray, coordinates: str, pad: float,
                    strike_ref: float) -> tuple:
    x_lo, x_hi = float(pts[:, 0].min()), float(pts[:, 0].max())
    span = x_hi - x_lo
    x_lo -= pad * span
    x_hi += pad * span
    strike_pos = 0.0 if coordinates == "scaled" else strike_ref
    width = max(x_hi - x_lo, 1e-6)
    x_lo = min(x_lo, strike_pos - 0.05 * width)
    x_hi = max(x_hi, strike_pos + 0.05 * width)
    s_hi = float(pts[:, 1].max()) * (1.0 + pad)
    return ((x_lo, x_hi), (0.0, s_hi))


def calibrate_volatility(quotes, settings: CalibrationSettings = CalibrationSettings()) -> CalibrationResult:
    """Estimate the implied volatility surface-consistently from call quotes."""
    quotes = list(quotes)
    if len(quotes) < 100:
        raise ValueError(f"need at least 100 quotes, got {len(quotes)}")
    rate = settings.rate if settings.rate is not None else float(
        np.median([q.rate for q in quotes]))
    strike_ref = float(np.median([q.strike for q in quotes]))
    data = quotes_to_dataset(quotes, settings.coordinates)
    pts = data.locations()
    domain = settings.domain or _default_domain(pts, settings.coordinates,
                                                settings.domain_pad, strike_ref)
    problem = bs_spec(rate, domain, strike_ref, settings.coordinates,
                      settings.degree, settings.n_internal_knots)
    lo = np.array([d[0] for d in domain])
    hi = np.array([d[1] for d in domain])
    if np.any(pts < lo) or np.any(pts > hi):
        raise ValueError("quotes fall outside the declared domain after scaling")
    assembler = PenaltyAssembler(problem.pde, problem.basis,
                                 settings.quad_points_per_span)

    if settings.mode == "freq":
        fit_cfg = FitSettings(theta0=(settings.sigma0,), kappa=settings.kappa,
                              quad_points_per_span=settings.quad_points_per_span)
        fit = fit_frequentist(fit_cfg, data, problem.pde, problem.basis,
                              problem.constraints, settings.constraint, assembler)
        interval = None
        boot = None
        if settings.bootstrap is not None:
            boot_settings = replace(settings.bootstrap,
                                    level=settings.interval_level,
                                    workers=max(settings.bootstrap.workers, settings.workers))
            boot = bootstrap_ci(fit, data, problem.pde, problem.basis,
                                problem.constraints, boot_settings, fit_cfg, assembler)
            interval = boot["intervals"]["sigma"]
        return CalibrationResult(
            sigma_hat=float(fit.theta_hat[0]), interval=interval,
            level=settings.interval_level, mode="freq", problem=problem,
            dataset=data, fit=fit, bootstrap=boot, gamma_hat=fit.gamma_hat)

    if settings.mode == "bayes":
        chain_cfg = settings.chain or ChainSettings(theta0=(settings.sigma0,))
        chain_cfg = replace(chain_cfg, theta0=(settings.sigma0,),
                            kappa=settings.kappa,
                            quad_points_per_span=settings.quad_points_per_span)
        hyper = Hyperparams(theta_prior=(settings.sigma_prior,))
        chain = run_chain(chain_cfg, data, problem.pde, problem.basis, hyper,
                          problem.constraints, assembler)
        sig = chain.array("sigma")
        interval = hpd_interval(sig, settings.interval_level)
        return CalibrationResult(
            sigma_hat=float(np.mean(sig)), interval=interval,
            level=settings.interval_level, mode="bayes", problem=problem,
            dataset=data, chain=chain,
            gamma_hat=float(np.mean(chain.array("gamma"))))

    raise ValueError(f"mode must be 'freq' or 'bayes', got {settings.mode!r}")
