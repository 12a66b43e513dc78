"""Bayesian estimation on the coefficient-marginalized posterior.

The model couples a Gaussian likelihood with precision tau to a Gaussian
prior on the spline coefficients whose precision matrix is the penalty:

    zeta | c, tau ~ N(Bc, tau^-1 I)
    c | theta, gamma[, kappa] ~ N(V1^-1 v1, V1^-1)

with V1 = gamma R(theta) [+ kappa H'H] and v1 = -gamma r(theta)
[+ kappa H'v].  Gamma priors go on tau, gamma (and kappa when random);
the coefficient block integrates out in closed form, so the sampler walks
only (theta, gamma, tau[, kappa]) against the marginal posterior

    N/2 log tau - tau/2 z'z + 1/2 log det V1 - 1/2 v1'V1^-1 v1
    - 1/2 log det V2 + 1/2 v2'V2^-1 v2 + priors,        V2 = tau B'B + V1.

Homogeneous PDE penalties leave R with near-null directions, so a ridge
floor of 1e-10 times the mean diagonal is folded into R before any
determinant or inverse; the same floored matrix is used everywhere
(marginal, joint, conditionals), which keeps the marginalization identity
exact and the gamma conditional an exact Gamma distribution.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .basis import TensorBasis
from .data import Dataset
from .errors import NumericalError
from .pde import ConstraintSet, PdeSpec, PenaltyAssembler, PenaltyQuadratic

RIDGE_SCALE = 1e-10


@dataclass(frozen=True)
class NormalPrior:
    """Normal prior for one PDE parameter, optionally truncated.

    ``sd = 0`` declares the parameter fixed at ``mean`` (point mass); the
    sampler then skips its update block.
    """

    mean: float
    sd: float
    lower: float = -np.inf
    upper: float = np.inf

    @property
    def fixed(self) -> bool:
        return self.sd == 0.0

    def logpdf(self, x: float) -> float:
        if not self.lower <= x <= self.upper:
            return -np.inf
        if self.fixed:
            return 0.0
        return -0.5 * ((x - self.mean) / self.sd) ** 2


@dataclass(frozen=True)
class Hyperparams:
    """Gamma-prior shapes/rates and the PDE-parameter priors."""

    a_tau: float = 1.0
    b_tau: float = 1e-6
    a_gamma: float = 1.0
    b_gamma: float = 1e-8
    a_kappa: float = 1.0
    b_kappa: float = 1e-6
    theta_prior: tuple = ()

    def __post_init__(self):
        for name in ("a_tau", "b_tau", "a_gamma", "b_gamma", "a_kappa", "b_kappa"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        object.__setattr__(self, "theta_prior", tuple(self.theta_prior))

    def log_theta_prior(self, theta) -> float:
        return float(sum(p.logpdf(t) for p, t in zip(self.theta_prior, theta)))


@dataclass(frozen=True)
class PriorComponents:
    """Gaussian prior for the coefficients: mean V1^-1 v1, covariance V1^-1."""

    V1: np.ndarray
    v1: np.ndarray
    logdet_V1: float
    ridge: float
    chol: object = field(repr=False, default=None)


def floored_R(q: PenaltyQuadratic) -> tuple:
    """Penalty matrix with the documented ridge floor, and the floor used."""
    delta = RIDGE_SCALE * float(np.mean(np.diag(q.R)))
    return q.R + delta * np.eye(q.R.shape[0]), delta


def prior_components(q: PenaltyQuadratic, gamma: float,
                     cons: ConstraintSet | None = None,
                     kappa: float | None = None) -> PriorComponents:
    """Assemble (V1, v1) and the log-determinant from the penalty quadratic."""
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    if (cons is None) != (kappa is None):
        raise ValueError("kappa must be given exactly when constraints are")
    R, delta = floored_R(q)
    V1 = gamma * R
    v1 = -gamma * q.r
    if cons is not None:
        if kappa < 0:
            raise ValueError(f"kappa must be non-negative, got {kappa}")
        V1 = V1 + kappa * (cons.H.T @ cons.H)
        v1 = v1 + kappa * (cons.H.T @ cons.v)
    try:
        cf = cho_factor(V1, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            "prior precision V1 is singular beyond the ridge floor"
        ) from exc
    logdet = 2.0 * float(np.sum(np.log(np.diag(cf[0]))))
    return PriorComponents(V1=V1, v1=v1, logdet_V1=logdet, ridge=gamma * delta, chol=cf)


def draw_coefficients(prior: PriorComponents, design, zeta, tau: float, rng) -> np.ndarray:
    """One exact draw from the conditional normal N(V2^-1 v2, V2^-1)."""
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    B = design.values if hasattr(design, "values") else np.asarray(design, dtype=float)
    zeta = np.asarray(zeta, dtype=float)
    V2 = tau * (B.T @ B) + prior.V1
    v2 = tau * (B.T @ zeta) + prior.v1
    try:
        cf = cho_factor(V2, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("conditional precision V2 is singular") from exc
    mean = cho_solve(cf, v2, check_finite=False)
    z = rng.standard_normal(len(v2))
    return mean + solve_triangular(cf[0], z, lower=True, trans="T", check_finite=False)


class PrecisionDraw(NamedTuple):
    tau: float
    gamma: float | None
    kappa: float | None


def draw_precisions(c, residuals, q: PenaltyQuadratic, hyper: Hyperparams, rng,
                    cons: ConstraintSet | None = None) -> PrecisionDraw:
    """Exact Gibbs draws of the precision-type parameters given c.

    tau | c has the stated Gamma conditional in both model variants.  The
    gamma conditional is only a Gamma distribution without constraints (the
    constrained prior normalization couples gamma and kappa through a joint
    determinant), so gamma comes back None when constraints are present, and
    kappa is always left to the marginal Metropolis sampler.
    """
    residuals = np.asarray(residuals, dtype=float)
    rss = float(residuals @ residuals)
    tau = rng.gamma(0.5 * len(residuals) + hyper.a_tau,
                    1.0 / (0.5 * rss + hyper.b_tau))
    gamma = None
    if cons is None:
        c = np.asarray(c, dtype=float)
        R, _ = floored_R(q)
        rate = 0.5 * float(c @ (R @ c))
        if np.any(q.r):
            cf = cho_factor(R, lower=True, check_finite=False)
            rate += float(c @ q.r) + 0.5 * float(q.r @ cho_solve(cf, q.r, check_finite=False))
        rate += hyper.b_gamma
        if rate <= 0:
            raise NumericalError(f"nonpositive gamma rate {rate}")
        gamma = rng.gamma(0.5 * q.R.shape[0] + hyper.a_gamma, 1.0 / rate)
    return PrecisionDraw(tau=float(tau), gamma=None if gamma is None else float(gamma),
                         kappa=None)


class MarginalPosterior:
    """Evaluates the coefficient-marginalized log posterior, with reuse.

    ``prior_part`` is independent of tau, so a sampler updating tau alone
    can recycle it and pay only one factorization per proposal.
    """

    def __init__(self, data: Dataset, basis: TensorBasis, assembler: PenaltyAssembler,
                 hyper: Hyperparams, cons: ConstraintSet | None = None):
        B = data.design(basis).values
        self.N = len(data.zeta)
        self.BtB = B.T @ B
        self.Btz = B.T @ data.zeta
        self.ztz = float(data.zeta @ data.zeta)
        self.assembler = assembler
        self.hyper = hyper
        self.cons = cons
        self.n = assembler.n

    def prior_part(self, theta, gamma: float, kappa: float | None):
        q = self.assembler.penalty(theta)
        prior = prior_components(q, gamma, self.cons,
                                 kappa if self.cons is not None else None)
        quad1 = float(prior.v1 @ cho_solve(prior.chol, prior.v1, check_finite=False))
        return prior, quad1

    def given_prior(self, prior: PriorComponents, quad1: float, tau: float) -> float:
        V2 = tau * self.BtB + prior.V1
        v2 = tau * self.Btz + prior.v1
        try:
            cf2 = cho_factor(V2, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            return -np.inf
        logdet2 = 2.0 * float(np.sum(np.log(np.diag(cf2[0]))))
        quad2 = float(v2 @ cho_solve(cf2, v2, check_finite=False))
        return (0.5 * self.N * np.log(tau) - 0.5 * tau * self.ztz
                + 0.5 * prior.logdet_V1 - 0.5 * quad1
                - 0.5 * logdet2 + 0.5 * quad2)

    def hyper_part(self, theta, gamma: float, tau: float, kappa: float | None) -> float:
        h = self.hyper
        val = (h.a_tau - 1.0) * np.log(tau) - h.b_tau * tau
        val += (h.a_gamma - 1.0) * np.log(gamma) - h.b_gamma * gamma
        if kappa is not None and self.cons is not None:
            val += (h.a_kappa - 1.0) * np.log(kappa) - h.b_kappa * kappa
        return float(val) + h.log_theta_prior(theta)

    def __call__(self, theta, gamma: float, tau: float, kappa: float | None = None) -> float:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if gamma <= 0 or tau <= 0 or (kappa is not None and kappa <= 0):
            return -np.inf
        lp_hyper = self.hyper_part(theta, gamma, tau, kappa)
        if not np.isfinite(lp_hyper):
            return -np.inf
        try:
            prior, quad1 = self.prior_part(theta, gamma, kappa)
        except NumericalError:
            return -np.inf
        return self.given_prior(prior, quad1, tau) + lp_hyper


def log_marginal_posterior(theta, gamma, tau, data: Dataset, pde: PdeSpec,
                           basis: TensorBasis, hyper: Hyperparams,
                           cons: ConstraintSet | None = None,
                           kappa: float | None = None,
                           quad_points_per_span=32) -> float:
    """Marginal log posterior up to a (theta, gamma, tau, kappa)-free constant."""
    assembler = PenaltyAssembler(pde, basis, quad_points_per_span)
    return MarginalPosterior(data, basis, assembler, hyper, cons)(theta, gamma, tau, kappa)


def log_joint_posterior(c, theta, gamma, tau, data: Dataset, basis: TensorBasis,
                        assembler: PenaltyAssembler, hyper: Hyperparams,
                        cons: ConstraintSet | None = None,
                        kappa: float | None = None) -> float:
    """Joint log posterior of (c, theta, gamma, tau[, kappa]) up to a constant."""
    c = np.asarray(c, dtype=float)
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    q = assembler.penalty(theta)
    prior = prior_components(q, gamma, cons, kappa if cons is not None else None)
    B = data.design(basis).values
    res = data.zeta - B @ c
    quad1 = float(prior.v1 @ cho_solve(prior.chol, prior.v1, check_finite=False))
    val = 0.5 * len(res) * np.log(tau) - 0.5 * tau * float(res @ res)
    val += 0.5 * prior.logdet_V1
    val -= 0.5 * (float(c @ (prior.V1 @ c)) - 2.0 * float(c @ prior.v1) + quad1)
    h = hyper
    val += (h.a_tau - 1.0) * np.log(tau) - h.b_tau * tau
    val += (h.a_gamma - 1.0) * np.log(gamma) - h.b_gamma * gamma
    if kappa is not None and cons is not None:
        val += (h.a_kappa - 1.0) * np.log(kappa) - h.b_kappa * kappa
    return float(val) + h.log_theta_prior(theta)


def log_coeff_conditional(c, theta, gamma, tau, data: Dataset, basis: TensorBasis,
                          assembler: PenaltyAssembler,
                          cons: ConstraintSet | None = None,
                          kappa: float | None = None) -> float:
    """Log density of the exact conditional normal for the coefficients."""
    c = np.asarray(c, dtype=float)
    q = assembler.penalty(np.atleast_1d(np.asarray(theta, dtype=float)))
    prior = prior_components(q, gamma, cons, kappa if cons is not None else None)
    B = data.design(basis).values
    V2 = tau * (B.T @ B) + prior.V1
    v2 = tau * (B.T @ data.zeta) + prior.v1
    cf2 = cho_factor(V2, lower=True, check_finite=False)
    logdet2 = 2.0 * float(np.sum(np.log(np.diag(cf2[0]))))
    mean = cho_solve(cf2, v2, check_finite=False)
    d = c - mean
    n = len(c)
    return float(0.5 * logdet2 - 0.5 * (d @ (V2 @ d)) - 0.5 * n * np.log(2.0 * np.pi))


@dataclass(frozen=True)
class ChainSettings:
    """Sampler controls; iteration counts include burn-in."""

    theta0: tuple
    iterations: int = 20000
    burn_in: int = 5000
    thin: int = 1
    seed: int = 0
    kappa: float | None = None
    kappa_random: bool = False
    gamma0: float = 1.0
    tau0: float | None = None
    proposal_scale_theta: tuple | None = None
    proposal_scale_gamma: float = 1.0
    proposal_scale_tau: float = 0.3
    proposal_scale_kappa: float = 1.0
    adapt_interval: int = 50
    target_accept: float = 0.35
    min_acceptance: float = 0.05
    quad_points_per_span: object = 32

    def __post_init__(self):
        if self.iterations <= 0 or self.burn_in < 0:
            raise ValueError("iteration counts must be positive")
        if self.burn_in >= self.iterations:
            raise ValueError("burn_in must be smaller than iterations")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")


@dataclass(frozen=True)
class PosteriorChain:
    """Kept draws (post burn-in, thinned) with sampler diagnostics."""

    draws: dict
    acceptance_rates: dict
    settings: ChainSettings
    param_names: tuple

    def array(self, name: str) -> np.ndarray:
        return self.draws[name]

    def export_text(self, path, config_hash: str = "", seed=None):
        names = list(self.draws)
        rows = np.column_stack([self.draws[n] for n in names])
        header = ""
        if config_hash or seed is not None:
            header = f"# config_sha256={config_hash} seed={seed}\n"
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(header)
            fh.write(",".join(names) + "\n")
            for row in rows:
                fh.write(",".join(repr(float(x)) for x in row) + "\n")


def run_chain(settings: ChainSettings, data: Dataset, pde: PdeSpec, basis: TensorBasis,
              hyper: Hyperparams, cons: ConstraintSet | None = None,
              assembler: PenaltyAssembler | None = None) -> PosteriorChain:
    """Metropolis-within-Gibbs on the marginalized posterior.

    Blocks per sweep: random-walk Metropolis for theta (skipped for fixed
    components), then log-scale random walks for gamma, tau and, when
    ``kappa_random``, kappa.  Proposal scales adapt toward the target
    acceptance during burn-in only.  The tau block reuses the cached prior
    factorization, so it costs a single Cholesky per proposal.
    """
    if len(hyper.theta_prior) != len(pde.theta_names):
        raise ValueError("need one theta prior per PDE parameter")
    if settings.kappa_random and cons is None:
        raise ValueError("kappa_random requires constraints")
    if assembler is None:
        assembler = PenaltyAssembler(pde, basis, settings.quad_points_per_span)
    post = MarginalPosterior(data, basis, assembler, hyper, cons)

    rng = np.random.default_rng(np.random.SeedSequence(settings.seed))
    theta = np.asarray(settings.theta0, dtype=float)
    fixed = np.array([p.fixed for p in hyper.theta_prior])
    gamma = float(settings.gamma0)
    var0 = float(np.var(data.zeta))
    tau = settings.tau0 if settings.tau0 is not None else (1.0 / var0 if var0 > 0 else 1.0)
    kappa = None
    if cons is not None:
        kappa = settings.kappa if settings.kappa is not None else 1e6

    s_theta = (np.asarray(settings.proposal_scale_theta, dtype=float)
               if settings.proposal_scale_theta is not None
               else 0.1 * np.maximum(np.abs(theta), 0.1))
    s_gamma = settings.proposal_scale_gamma
    s_tau = settings.proposal_scale_tau
    s_kappa = settings.proposal_scale_kappa

    prior, quad1 = post.prior_part(theta, gamma, kappa)
    lp = post.given_prior(prior, quad1, tau) + post.hyper_part(theta, gamma, tau,
                                                               kappa if settings.kappa_random else None)
    if not np.isfinite(lp):
        raise NumericalError("marginal posterior is not finite at the initial state")

    blocks = [name for name, on in (
        ("theta", not bool(fixed.all())),
        ("gamma", True),
        ("tau", True),
        ("kappa", settings.kappa_random),
    ) if on]
    accepted = {b: 0 for b in blocks}
    tried = {b: 0 for b in blocks}
    acc_window = {b: [0, 0] for b in blocks}

    kept = {name: [] for name in pde.theta_names}
    kept.update(gamma=[], tau=[])
    if settings.kappa_random:
        kept["kappa"] = []

    def kappa_for_prior():
        return kappa

    def hyper_now(th, g, t, k):
        return post.hyper_part(th, g, t, k if settings.kappa_random else None)

    for it in range(settings.iterations):
        in_burn = it < settings.burn_in
        if "theta" in accepted:
            step = np.where(fixed, 0.0, s_theta * rng.standard_normal(len(theta)))
            theta_p = theta + step
            lp_hyper = hyper_now(theta_p, gamma, tau, kappa)
            if np.isfinite(lp_hyper):
                try:
                    prior_p, quad1_p = post.prior_part(theta_p, gamma, kappa_for_prior())
                    lp_p = post.given_prior(prior_p, quad1_p, tau) + lp_hyper
                except NumericalError:
                    lp_p = -np.inf
            else:
                lp_p = -np.inf
            tried["theta"] += 1
            acc_window["theta"][1] += 1
            if np.log(rng.random()) < lp_p - lp:
                theta, lp, prior, quad1 = theta_p, lp_p, prior_p, quad1_p
                accepted["theta"] += 1
                acc_window["theta"][0] += 1

        gamma_p = gamma * np.exp(s_gamma * rng.standard_normal())
        try:
            prior_p, quad1_p = post.prior_part(theta, gamma_p, kappa_for_prior())
            lp_p = post.given_prior(prior_p, quad1_p, tau) + hyper_now(theta, gamma_p, tau, kappa)
        except NumericalError:
            lp_p = -np.inf
        tried["gamma"] += 1
        acc_window["gamma"][1] += 1
        if np.log(rng.random()) < (lp_p + np.log(gamma_p)) - (lp + np.log(gamma)):
            gamma, lp, prior, quad1 = gamma_p, lp_p, prior_p, quad1_p
            accepted["gamma"] += 1
            acc_window["gamma"][0] += 1

        tau_p = tau * np.exp(s_tau * rng.standard_normal())
        lp_p = post.given_prior(prior, quad1, tau_p) + hyper_now(theta, gamma, tau_p, kappa)
        tried["tau"] += 1
        acc_window["tau"][1] += 1
        if np.log(rng.random()) < (lp_p + np.log(tau_p)) - (lp + np.log(tau)):
            tau, lp = tau_p, lp_p
            accepted["tau"] += 1
            acc_window["tau"][0] += 1

        if settings.kappa_random:
            kappa_p = kappa * np.exp(s_kappa * rng.standard_normal())
            try:
                prior_p, quad1_p = post.prior_part(theta, gamma, kappa_p)
                lp_p = post.given_prior(prior_p, quad1_p, tau) + hyper_now(theta, gamma, tau, kappa_p)
            except NumericalError:
                lp_p = -np.inf
            tried["kappa"] += 1
            acc_window["kappa"][1] += 1
            if np.log(rng.random()) < (lp_p + np.log(kappa_p)) - (lp + np.log(kappa)):
                kappa, lp, prior, quad1 = kappa_p, lp_p, prior_p, quad1_p
                accepted["kappa"] += 1
                acc_window["kappa"][0] += 1

        if in_burn and (it + 1) % settings.adapt_interval == 0:
            for b in blocks:
                won, n = acc_window[b]
                if n == 0:
                    continue
                factor = np.exp(won / n - settings.target_accept)
                if b == "theta":
                    s_theta = s_theta * factor
                elif b == "gamma":
                    s_gamma *= factor
                elif b == "tau":
                    s_tau *= factor
                else:
                    s_kappa *= factor
                acc_window[b] = [0, 0]
        if it + 1 == settings.burn_in:
            for b in blocks:
                accepted[b] = 0
                tried[b] = 0

        if it >= settings.burn_in and (it - settings.burn_in) % settings.thin == 0:
            for i, name in enumerate(pde.theta_names):
                kept[name].append(theta[i])
            kept["gamma"].append(gamma)
            kept["tau"].append(tau)
            if settings.kappa_random:
                kept["kappa"].append(kappa)

    rates = {b: (accepted[b] / tried[b] if tried[b] else float("nan")) for b in blocks}
    low = {b: r for b, r in rates.items() if np.isfinite(r) and r < settings.min_acceptance}
    if low:
        raise NumericalError(
            f"post-adaptation acceptance below {settings.min_acceptance:.0%}: {low}; "
            "reduce proposal scales or check the model"
        )
    draws = {k: np.asarray(v) for k, v in kept.items()}
    return PosteriorChain(draws=draws, acceptance_rates=rates, settings=settings,
                          param_names=tuple(pde.theta_names))


def run_gibbs_chain(settings: ChainSettings, data: Dataset, pde: PdeSpec,
                    basis: TensorBasis, hyper: Hyperparams,
                    assembler: PenaltyAssembler | None = None) -> PosteriorChain:
    """Coefficient-retaining Gibbs sampler (unconstrained model only).

    Cross-validation oracle for :func:`run_chain`: draws c exactly, then tau
    and gamma from their Gamma conditionals, and moves theta by Metropolis
    against its c-conditional.  Both samplers target the same posterior, so
    their marginal summaries must agree within Monte Carlo error.
    """
    if assembler is None:
        assembler = PenaltyAssembler(pde, basis, settings.quad_points_per_span)
    rng = np.random.default_rng(np.random.SeedSequence(settings.seed))
    B = data.design(basis).values
    theta = np.asarray(settings.theta0, dtype=float)
    fixed = np.array([p.fixed for p in hyper.theta_prior])
    gamma = float(settings.gamma0)
    var0 = float(np.var(data.zeta))
    tau = settings.tau0 if settings.tau0 is not None else (1.0 / var0 if var0 > 0 else 1.0)
    s_theta = (np.asarray(settings.proposal_scale_theta, dtype=float)
               if settings.proposal_scale_theta is not None
               else 0.1 * np.maximum(np.abs(theta), 0.1))

    def c_prior_logpdf(c, th, g):
        q = assembler.penalty(th)
        R, _ = floored_R(q)
        cf = cho_factor(R, lower=True, check_finite=False)
        logdet = len(c) * np.log(g) + 2.0 * float(np.sum(np.log(np.diag(cf[0]))))
        quad = float(c @ (R @ c)) + 2.0 * float(c @ q.r)
        if np.any(q.r):
            quad += float(q.r @ cho_solve(cf, q.r, check_finite=False))
        return 0.5 * logdet - 0.5 * g * quad

    kept = {name: [] for name in pde.theta_names}
    kept.update(gamma=[], tau=[])
    acc = [0, 0]
    for it in range(settings.iterations):
        q = assembler.penalty(theta)
        prior = prior_components(q, gamma)
        c = draw_coefficients(prior, B, data.zeta, tau, rng)
        res = data.zeta - B @ c
        draw = draw_precisions(c, res, q, hyper, rng)
        tau, gamma = draw.tau, draw.gamma
        if not fixed.all():
            step = np.where(fixed, 0.0, s_theta * rng.standard_normal(len(theta)))
            theta_p = theta + step
            lp_prior = hyper.log_theta_prior(theta_p)
            if np.isfinite(lp_prior):
                lp_p = c_prior_logpdf(c, theta_p, gamma) + lp_prior
                lp_c = c_prior_logpdf(c, theta, gamma) + hyper.log_theta_prior(theta)
                acc[1] += 1
                if np.log(rng.random()) < lp_p - lp_c:
                    theta = theta_p
                    acc[0] += 1
            if it < settings.burn_in and (it + 1) % settings.adapt_interval == 0:
                rate = acc[0] / max(acc[1], 1)
                s_theta = s_theta * np.exp(rate - settings.target_accept)
                acc = [0, 0]
        if it >= settings.burn_in and (it - settings.burn_in) % settings.thin == 0:
            for i, name in enumerate(pde.theta_names):
                kept[name].append(theta[i])
            kept["gamma"].append(gamma)
            kept["tau"].append(tau)
    draws = {k: np.asarray(v) for k, v in kept.items()}
    rate = acc[0] / acc[1] if acc[1] else float("nan")
    return PosteriorChain(draws=draws, acceptance_rates={"theta": rate},
                          settings=settings, param_names=tuple(pde.theta_names))


def hpd_interval(draws, level: float) -> tuple:
    """Shortest interval containing ceil(level * n) of the sorted draws."""
    draws = np.sort(np.asarray(draws, dtype=float))
    n = len(draws)
    if n < 100:
        raise ValueError(f"need at least 100 draws for an HPD interval, got {n}")
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must be in (0, 1), got {level}")
    m = int(np.ceil(level * n))
    if m >= n:
        return float(draws[0]), float(draws[-1])
    widths = draws[m:] - draws[: n - m]
    i = int(np.argmin(widths))
    return float(draws[i]), float(draws[i + m])


def summarize(chain: PosteriorChain, levels=(0.8, 0.95)) -> dict:
    """Posterior mean, sd and HPD intervals for every stored parameter."""
    out = {}
    for name, arr in chain.draws.items():
        entry = {"mean": float(np.mean(arr)), "sd": float(np.std(arr, ddof=1))}
        for lv in levels:
            entry[f"hpd{int(round(lv * 100))}"] = hpd_interval(arr, lv)
        out[name] = entry
    return out
