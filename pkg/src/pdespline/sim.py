"""Diffusion transport study: data generation, replicates and metric tables.

The test problem is the first-order equation u_x1 + theta1 u_x2 +
theta2 u = 0 with initial condition u(x1, 0) = 1 / (1 + x1^2), whose
characteristics give the closed form

    u(x1, x2) = exp(-(theta2/theta1) x2) / (1 + (x1 - x2/theta1)^2).

Replicates add Gaussian noise to the solution on an equidistant grid and
run the configured estimators; the metric table mirrors the usual
relative-bias / relative-RMSE / spread / coverage layout.  Metric
definitions (recorded in the table header for audit):

    R-BIAS% = 100 * mean((est - true) / true)
    R-RMSE  = sqrt(mean(((est - true) / true)^2))
    R-STD   = population std(est) / |true|      (frequentist spread)
    MPSD    = mean posterior standard deviation (Bayesian, absolute)
    CP80/95 = percent of replicates whose HPD interval covers the truth
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .basis import TensorBasis, uniform_basis
from .bayes import ChainSettings, Hyperparams, NormalPrior, hpd_interval, run_chain, summarize
from .data import Dataset
from .errors import NumericalError
from .freq import FitSettings, fit_frequentist
from .parallel import map_tasks
from .pde import Condition, Multiplier, PdeSpec, PdeTerm, PenaltyAssembler, build_constraints

FREQ_MODES = ("freq-none", "freq-ls", "freq-lagrange")
BAYES_MODES = ("bayes-none", "bayes-ls")
STUDY_MODES = FREQ_MODES + BAYES_MODES


def diffusion_pde() -> PdeSpec:
    """u_x1 + theta1 u_x2 + theta2 u = 0 in the term grammar."""
    one = ((1.0,), (1.0,))
    return PdeSpec(
        p=2,
        theta_names=("theta1", "theta2"),
        terms=(
            PdeTerm(Multiplier(1.0, (0, 0)), one, (1, 0)),
            PdeTerm(Multiplier(1.0, (1, 0)), one, (0, 1)),
            PdeTerm(Multiplier(1.0, (0, 1)), one, (0, 0)),
        ),
    )


def diffusion_solution(x1, x2, theta) -> np.ndarray:
    """Characteristics solution for the initial condition 1/(1+x1^2)."""
    th1, th2 = float(theta[0]), float(theta[1])
    if th1 == 0.0:
        raise ValueError("theta1 must be nonzero for the characteristics solution")
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    shift = x1 - x2 / th1
    return np.exp(-(th2 / th1) * x2) / (1.0 + shift * shift)


def initial_value(x1, x2=0.0) -> float:
    return 1.0 / (1.0 + float(x1) ** 2)


def diffusion_basis(n_x1: int = 28, n_x2: int = 13, degree: int = 3,
                    x1_range=(-3.0, 3.0), x2_range=(0.0, 1.0)) -> TensorBasis:
    """Equidistant-knot default basis; counts are per-direction basis sizes."""
    return TensorBasis((
        uniform_basis(*x1_range, degree, n_x1 - degree - 1),
        uniform_basis(*x2_range, degree, n_x2 - degree - 1),
    ))


def initial_condition(basis: TensorBasis) -> Condition:
    """u(x1, 0) target sampled on the x1 knot grid of the basis."""
    x1 = basis.dims[0].spans
    pts = np.column_stack([x1, np.zeros_like(x1)])
    return Condition(points=pts, deriv_orders=(0, 0), target=initial_value)


@dataclass(frozen=True)
class StudyConfig:
    theta_true: tuple = (0.5, 1.5)
    noise_sds: tuple = (0.01,)
    n_grid: tuple = (50, 50)
    x1_range: tuple = (-3.0, 3.0)
    x2_range: tuple = (0.0, 1.0)
    replicates: int = 50
    modes: tuple = ("freq-ls",)
    base_seed: int = 0
    basis_sizes: tuple = (28, 13)
    degree: int = 3
    theta0: tuple = (1.0, 1.0)
    kappa: float = 1e6
    quad_points_per_span: object = 32
    theta_prior_sd: float = 10.0
    chain_iterations: int = 20000
    chain_burn_in: int = 5000
    chain_thin: int = 1
    workers: int = 1
    max_failed_frac: float = 0.10

    def __post_init__(self):
        if self.theta_true[0] == 0.0:
            raise ValueError("theta1 must be nonzero")
        if any(sd <= 0 for sd in self.noise_sds):
            raise ValueError("noise standard deviations must be positive")
        if self.replicates < 2:
            raise ValueError("need at least 2 replicates")
        for m in self.modes:
            if m not in STUDY_MODES:
                raise ValueError(f"unknown study mode {m!r}; choose from {STUDY_MODES}")

    def axes(self) -> tuple:
        return (np.linspace(*self.x1_range, self.n_grid[0]),
                np.linspace(*self.x2_range, self.n_grid[1]))

    def basis(self) -> TensorBasis:
        return diffusion_basis(*self.basis_sizes, self.degree,
                               self.x1_range, self.x2_range)


def simulate_dataset(config: StudyConfig, level_index: int, replicate_index: int) -> Dataset:
    """Noisy grid observations, seeded by (base seed, level, replicate)."""
    sd = config.noise_sds[level_index]
    ax1, ax2 = config.axes()
    X1, X2 = np.meshgrid(ax1, ax2, indexing="ij")
    clean = diffusion_solution(X1, X2, config.theta_true).T.ravel()
    rng = np.random.default_rng(
        np.random.SeedSequence((config.base_seed, level_index, replicate_index))
    )
    zeta = clean + sd * rng.standard_normal(clean.size)
    return Dataset(points=(ax1, ax2), zeta=zeta, grid=True)


@dataclass(frozen=True)
class MetricsTable:
    """Per (mode, noise sd, parameter) study metrics."""

    rows: tuple  # of dicts
    definitions: str = (
        "R_BIAS_pct=100*mean((est-true)/true); "
        "R_RMSE=sqrt(mean(((est-true)/true)^2)); R_STD=std(est,ddof=0)/|true|; "
        "MPSD=mean posterior sd (absolute); CP=percent of HPD intervals covering truth"
    )

    def to_text(self) -> str:
        cols = ("mode", "noise_sd", "parameter", "true_value", "n_replicates",
                "R_BIAS_pct", "R_RMSE", "R_STD", "MPSD", "CP80", "CP95", "mean_gamma")
        lines = ["# " + self.definitions, ",".join(cols)]
        for row in self.rows:
            lines.append(",".join(
                "" if row.get(c) is None else
                (row[c] if isinstance(row[c], str) else repr(row[c]))
                for c in cols
            ))
        return "\n".join(lines) + "\n"

    def get(self, mode: str, noise_sd: float, parameter: str) -> dict:
        for row in self.rows:
            if (row["mode"] == mode and row["parameter"] == parameter
                    and abs(row["noise_sd"] - noise_sd) < 1e-12):
                return row
        raise KeyError((mode, noise_sd, parameter))


def _fit_settings(config: StudyConfig) -> FitSettings:
    return FitSettings(theta0=config.theta0, kappa=config.kappa,
                       quad_points_per_span=config.quad_points_per_span)


def _chain_settings(config: StudyConfig, level: int, rep: int, constrained: bool) -> ChainSettings:
    return ChainSettings(
        theta0=config.theta0,
        iterations=config.chain_iterations,
        burn_in=config.chain_burn_in,
        thin=config.chain_thin,
        seed=(config.base_seed, level, rep, 7),
        kappa=config.kappa if constrained else None,
        quad_points_per_span=config.quad_points_per_span,
    )


def _hyper(config: StudyConfig) -> Hyperparams:
    priors = tuple(NormalPrior(mean=m, sd=config.theta_prior_sd) for m in config.theta0)
    return Hyperparams(theta_prior=priors)


def _study_worker(ctx, task):
    config, pde, basis, assembler, cons = ctx
    level, rep = task
    data = simulate_dataset(config, level, rep)
    true_tau = 1.0 / config.noise_sds[level] ** 2
    out = {}
    for mode in config.modes:
        kind, sub = mode.split("-", 1)
        try:
            if kind == "freq":
                fit = fit_frequentist(
                    _fit_settings(config), data, pde, basis,
                    cons if sub != "none" else None, sub, assembler)
                if not fit.converged:
                    out[mode] = {"error": f"non-convergent: {fit.message}"}
                    continue
                out[mode] = {
                    "theta": tuple(float(x) for x in fit.theta_hat),
                    "tau": fit.tau_hat,
                    "gamma": fit.gamma_hat,
                }
            else:
                constrained = sub != "none"
                chain = run_chain(
                    _chain_settings(config, level, rep, constrained), data, pde,
                    basis, _hyper(config), cons if constrained else None, assembler)
                summ = summarize(chain)
                names = list(pde.theta_names) + ["tau"]
                out[mode] = {
                    "post_mean": {n: summ[n]["mean"] for n in names},
                    "post_sd": {n: summ[n]["sd"] for n in names},
                    "hpd80": {n: summ[n]["hpd80"] for n in names},
                    "hpd95": {n: summ[n]["hpd95"] for n in names},
                    "gamma": summ["gamma"]["mean"],
                }
        except NumericalError as exc:
            out[mode] = {"error": str(exc)}
    return (level, rep, out)


def _freq_metrics(results, param_idx, true_val, key):
    if key == "tau":
        est = np.array([r["tau"] for r in results])
    else:
        est = np.array([r["theta"][param_idx] for r in results])
    rel = (est - true_val) / true_val
    return {
        "R_BIAS_pct": 100.0 * float(np.mean(rel)),
        "R_RMSE": float(np.sqrt(np.mean(rel ** 2))),
        "R_STD": float(np.std(est, ddof=0) / abs(true_val)),
        "MPSD": None, "CP80": None, "CP95": None,
    }


def _bayes_metrics(results, name, true_val):
    est = np.array([r["post_mean"][name] for r in results])
    sds = np.array([r["post_sd"][name] for r in results])
    rel = (est - true_val) / true_val
    cov80 = [lo <= true_val <= hi for (lo, hi) in (r["hpd80"][name] for r in results)]
    cov95 = [lo <= true_val <= hi for (lo, hi) in (r["hpd95"][name] for r in results)]
    return {
        "R_BIAS_pct": 100.0 * float(np.mean(rel)),
        "R_RMSE": float(np.sqrt(np.mean(rel ** 2))),
        "R_STD": float(np.std(est, ddof=0) / abs(true_val)),
        "MPSD": float(np.mean(sds)),
        "CP80": 100.0 * float(np.mean(cov80)),
        "CP95": 100.0 * float(np.mean(cov95)),
    }


def run_study(config: StudyConfig):
    """Run every configured estimator over every (noise level, replicate).

    Returns ``(MetricsTable, raw)`` where ``raw`` maps (level, replicate) to
    the per-mode outcomes.  Replicates whose fit fails are excluded from the
    metrics; more than ``max_failed_frac`` failures in any cell aborts.
    """
    pde = diffusion_pde()
    basis = config.basis()
    assembler = PenaltyAssembler(pde, basis, config.quad_points_per_span)
    cons = build_constraints([initial_condition(basis)], basis)
    ctx = (config, pde, basis, assembler, cons)
    tasks = [(lvl, rep) for lvl in range(len(config.noise_sds))
             for rep in range(config.replicates)]
    results = map_tasks(_study_worker, ctx, tasks, config.workers)
    raw = {(lvl, rep): out for (lvl, rep, out) in results}

    rows = []
    for lvl, sd in enumerate(config.noise_sds):
        true_tau = 1.0 / sd ** 2
        for mode in config.modes:
            cell = [raw[(lvl, rep)][mode] for rep in range(config.replicates)]
            good = [r for r in cell if "error" not in r]
            failed = len(cell) - len(good)
            if failed > config.max_failed_frac * len(cell):
                messages = [r["error"] for r in cell if "error" in r][:3]
                raise NumericalError(
                    f"{failed}/{len(cell)} replicates failed for mode {mode} "
                    f"at sd={sd}: {messages}"
                )
            names = list(pde.theta_names) + ["tau"]
            trues = list(config.theta_true) + [true_tau]
            for i, (name, tv) in enumerate(zip(names, trues)):
                if mode.startswith("freq"):
                    metrics = _freq_metrics(good, i, tv, name)
                else:
                    metrics = _bayes_metrics(good, name, tv)
                rows.append({
                    "mode": mode, "noise_sd": sd, "parameter": name,
                    "true_value": tv, "n_replicates": len(good),
                    "mean_gamma": float(np.mean([r["gamma"] for r in good])),
                    **metrics,
                })
    return MetricsTable(rows=tuple(rows)), raw
