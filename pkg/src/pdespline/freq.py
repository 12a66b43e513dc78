"""Frequentist estimation by profiled penalized least squares.

The inner problem is linear: for fixed parameters, precision and adhesion
the spline coefficients maximize

    J(c) = (N/2) log(tau) - (tau/2) ||zeta - Bc||^2 - (gamma/2) PEN(c|theta)
           [- (kappa/2) ||Hc - v||^2  in least-squares constraint mode]

in closed form.  The outer problem alternates a derivative-free simplex
search over the PDE parameters (with the residual precision profiled as
tau = N / SSE) and an EM-style variance-ratio update of the adhesion
parameter gamma per Schall.  The parameter search only identifies theta
when the penalty actually binds, so each fit starts from a strong
provisional adhesion before handing gamma over to the Schall updates.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve, qr
from scipy.optimize import minimize

from .basis import DesignMatrix, TensorBasis
from .data import Dataset
from .errors import NumericalError
from .parallel import map_tasks
from .pde import ConstraintSet, PdeSpec, PenaltyAssembler, PenaltyQuadratic, penalty_value

MODES = ("none", "ls", "lagrange")


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    theta: tuple
    tau: float
    gamma: float
    objective: float


@dataclass(frozen=True)
class FreqFit:
    """Point estimates plus the profiling trace of one frequentist fit."""

    c_hat: np.ndarray
    theta_hat: np.ndarray
    tau_hat: float
    gamma_hat: float
    mode: str
    kappa: float | None = None
    omega: np.ndarray | None = None
    trace: tuple = ()
    converged: bool = True
    message: str = ""
    n_obs: int = 0


@dataclass(frozen=True)
class FitSettings:
    """Knobs for :func:`fit_frequentist`; only ``theta0`` is required."""

    theta0: tuple
    kappa: float = 1e6
    tol: float = 1e-6
    max_outer: int = 200
    quad_points_per_span: object = 32
    identification_scale: float = 100.0
    nm_maxfev: int | None = None
    nm_xatol: float = 1e-8
    schall_tol: float = 1e-6
    schall_max_iter: int = 200
    gamma_min: float = 1e-12
    gamma_max: float = 1e14
    stall_evals: int = 50


@dataclass(frozen=True)
class BootstrapSettings:
    replicates: int = 1000
    level: float = 0.95
    seed: int = 0
    workers: int = 1
    refit_gamma: bool = False
    max_dropped_frac: float = 0.10


def _design_values(design) -> np.ndarray:
    if isinstance(design, DesignMatrix):
        return design.values
    return np.asarray(design, dtype=float)


def _factor(A: np.ndarray):
    """Cholesky with a one-shot ridge floor on failure."""
    try:
        return cho_factor(A, lower=True, check_finite=False), 0.0
    except np.linalg.LinAlgError:
        pass
    floor = 1e-10 * float(np.mean(np.diag(A)))
    try:
        return cho_factor(A + floor * np.eye(A.shape[0]), lower=True,
                          check_finite=False), floor
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            "inner system is singular beyond the ridge floor; "
            "use more knots or a larger adhesion parameter"
        ) from exc


def solve_ridge(design, zeta, q: PenaltyQuadratic, tau: float, gamma: float) -> np.ndarray:
    """Closed-form maximizer of J: (tau B'B + gamma R)^-1 (tau B'z - gamma r)."""
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if gamma < 0:
        raise ValueError(f"gamma must be non-negative, got {gamma}")
    B = _design_values(design)
    zeta = np.asarray(zeta, dtype=float)
    if B.shape[1] != q.R.shape[0]:
        raise ValueError(
            f"design has {B.shape[1]} columns, penalty is {q.R.shape[0]} x {q.R.shape[0]}"
        )
    A = tau * (B.T @ B) + gamma * q.R
    b = tau * (B.T @ zeta) - gamma * q.r
    cf, _ = _factor(A)
    return cho_solve(cf, b, check_finite=False)


def solve_ls_constrained(design, zeta, q: PenaltyQuadratic, tau: float, gamma: float,
                         cons: ConstraintSet, kappa: float) -> np.ndarray:
    """Ridge solve with the soft condition penalty kappa ||Hc - v||^2."""
    if kappa < 0:
        raise ValueError(f"kappa must be non-negative, got {kappa}")
    B = _design_values(design)
    zeta = np.asarray(zeta, dtype=float)
    A = tau * (B.T @ B) + gamma * q.R + kappa * (cons.H.T @ cons.H)
    b = tau * (B.T @ zeta) - gamma * q.r + kappa * (cons.H.T @ cons.v)
    cf, _ = _factor(A)
    return cho_solve(cf, b, check_finite=False)


def _check_h_rank(H: np.ndarray):
    _, Rq, piv = qr(H.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(Rq))
    tol = max(H.shape) * np.finfo(float).eps * (diag[0] if len(diag) else 0.0)
    deficient = np.where(diag <= tol)[0]
    if len(deficient):
        rows = sorted(int(piv[i]) for i in deficient)
        raise NumericalError(
            f"condition matrix is rank deficient; redundant condition rows: {rows}"
        )


def solve_lagrange(design, zeta, q: PenaltyQuadratic, tau: float, gamma: float,
                   cons: ConstraintSet):
    """Exact-constraint solve of the bordered stationarity system.

    Returns ``(c, omega)`` where omega are the multipliers of the rows of H.
    Solved through the Schur complement of the (positive definite) ridge
    block, so H c = v holds to solver accuracy.
    """
    _check_h_rank(cons.H)
    B = _design_values(design)
    zeta = np.asarray(zeta, dtype=float)
    A = tau * (B.T @ B) + gamma * q.R
    b = tau * (B.T @ zeta) - gamma * q.r
    cf, _ = _factor(A)
    c0 = cho_solve(cf, b, check_finite=False)
    X = cho_solve(cf, cons.H.T, check_finite=False)
    S = cons.H @ X
    omega = np.linalg.solve(S, cons.H @ c0 - cons.v)
    c = c0 - X @ omega
    return c, omega


def _rank_deficiency(R: np.ndarray, rtol: float = 1e-10) -> int:
    ev = np.linalg.eigvalsh(R)
    top = max(float(ev[-1]), 1e-300)
    return int(np.sum(ev < rtol * top))


def _penalty_floor(q: PenaltyQuadratic, c: np.ndarray) -> float:
    # numerical-zero scale for PEN: roundoff of the quadratic form
    return 1e-13 * (float(np.abs(c) @ (np.abs(q.R) @ np.abs(c))) + abs(q.l) + 1e-300)


def schall_update(design, zeta, c, q: PenaltyQuadratic, tau: float, gamma: float,
                  cons: ConstraintSet | None = None, kappa: float = 0.0,
                  rank_def: int | None = None, mode: str | None = None) -> float:
    """Variance-ratio update of the adhesion parameter.

    gamma is the precision of the penalty pseudo-residuals in the mixed-model
    reading of J, estimated as effective penalty dimension over PEN(c|theta),
    with the effective dimension taken from the influence-matrix trace of the
    inner solve.  A numerically nonpositive PEN escalates gamma tenfold.
    """
    B = _design_values(design)
    zeta = np.asarray(zeta, dtype=float)
    pen = penalty_value(q, c)
    if pen <= _penalty_floor(q, c):
        return gamma * 10.0
    if mode is None:
        mode = "none" if cons is None else ("ls" if kappa > 0 else "lagrange")
    BtB = B.T @ B
    A = tau * BtB + gamma * q.R
    if mode == "ls" and cons is not None:
        A = A + kappa * (cons.H.T @ cons.H)
    cf, _ = _factor(A)
    tr = tau * float(np.trace(cho_solve(cf, BtB, check_finite=False)))
    if mode == "lagrange" and cons is not None:
        X = cho_solve(cf, cons.H.T, check_finite=False)
        S = cons.H @ X
        Y = cho_solve(cf, BtB, check_finite=False)
        tr -= tau * float(np.trace(np.linalg.solve(S, X.T @ (BtB @ X))))
        del Y
    if rank_def is None:
        rank_def = _rank_deficiency(q.R)
    df_pen = max(tr - rank_def, 1.0)
    return float(df_pen / pen)


class _StallError(Exception):
    pass


class _SseObjective:
    """Penalized-fit SSE as a function of theta, with a stall guard."""

    def __init__(self, solver, stall_evals):
        self.solver = solver
        self.stall_evals = stall_evals
        self.best = np.inf
        self.best_theta = None
        self.since_improvement = 0
        self.evals = 0

    def __call__(self, theta):
        self.evals += 1
        try:
            sse = self.solver.sse(theta)
        except (NumericalError, FloatingPointError):
            sse = np.inf
        if not np.isfinite(sse):
            sse = 1e300
        if sse < self.best * (1.0 - 1e-12):
            self.best = sse
            self.best_theta = np.array(theta, dtype=float)
            self.since_improvement = 0
        else:
            self.since_improvement += 1
            if self.since_improvement >= self.stall_evals:
                raise _StallError
        return sse


class _InnerSolver:
    """Mode-dispatched inner solves with cached cross products."""

    def __init__(self, B, zeta, assembler, cons, mode, kappa, BtB=None):
        self.B = B
        self.zeta = zeta
        self.assembler = assembler
        self.cons = cons
        self.mode = mode
        self.kappa = kappa
        self.N = len(zeta)
        self.BtB = B.T @ B if BtB is None else BtB
        self.Btz = B.T @ zeta
        if cons is not None:
            self.HtH = cons.H.T @ cons.H
            self.Htv = cons.H.T @ cons.v
        self.tau = None
        self.gamma = None

    def penalty(self, theta) -> PenaltyQuadratic:
        return self.assembler.penalty(theta)

    def solve(self, theta, tau=None, gamma=None):
        tau = self.tau if tau is None else tau
        gamma = self.gamma if gamma is None else gamma
        q = self.penalty(theta)
        A = tau * self.BtB + gamma * q.R
        b = tau * self.Btz - gamma * q.r
        if self.mode == "ls":
            A = A + self.kappa * self.HtH
            b = b + self.kappa * self.Htv
        cf, _ = _factor(A)
        c = cho_solve(cf, b, check_finite=False)
        omega = None
        if self.mode == "lagrange":
            X = cho_solve(cf, self.cons.H.T, check_finite=False)
            S = self.cons.H @ X
            omega = np.linalg.solve(S, self.cons.H @ c - self.cons.v)
            c = c - X @ omega
        return c, q, cf, omega

    def sse(self, theta, tau=None, gamma=None) -> float:
        c, _, _, _ = self.solve(theta, tau, gamma)
        res = self.zeta - self.B @ c
        return float(res @ res)

    def influence_trace(self, q, tau, gamma, cf=None) -> float:
        if cf is None:
            A = tau * self.BtB + gamma * q.R
            if self.mode == "ls":
                A = A + self.kappa * self.HtH
            cf, _ = _factor(A)
        tr = tau * float(np.trace(cho_solve(cf, self.BtB, check_finite=False)))
        if self.mode == "lagrange":
            X = cho_solve(cf, self.cons.H.T, check_finite=False)
            S = self.cons.H @ X
            tr -= tau * float(np.trace(np.linalg.solve(S, X.T @ (self.BtB @ X))))
        return tr


def _nm_step(objective, theta, settings):
    n = len(theta)
    maxfev = settings.nm_maxfev or max(100 * n, 200)
    try:
        result = minimize(
            objective, theta, method="Nelder-Mead",
            options=dict(xatol=settings.nm_xatol, fatol=0.0, maxfev=maxfev),
        )
        cand, fval = result.x, float(result.fun)
    except _StallError:
        cand, fval = objective.best_theta, objective.best
        if cand is None:
            cand, fval = np.asarray(theta, dtype=float), np.inf
    if objective.best_theta is not None and objective.best < fval:
        cand, fval = objective.best_theta, objective.best
    return np.asarray(cand, dtype=float), fval


def fit_frequentist(config: FitSettings, data: Dataset, pde: PdeSpec,
                    basis: TensorBasis, cons: ConstraintSet | None = None,
                    mode: str = "none", assembler: PenaltyAssembler | None = None) -> FreqFit:
    """Alternate inner coefficient solves, simplex theta steps and Schall updates.

    The first theta step runs at a strong provisional adhesion (set from the
    trace ratio of the data and penalty Gram matrices) because the SSE
    profile over theta is flat whenever the penalty does not bind; gamma is
    then handed to the Schall iteration, re-equilibrated between theta steps.
    Stops when the relative change of (theta, gamma) drops below ``tol``.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if mode != "none" and cons is None:
        raise ValueError(f"mode {mode!r} requires a ConstraintSet")
    if assembler is None:
        assembler = PenaltyAssembler(pde, basis, config.quad_points_per_span)
    lo = np.array([d.domain_lo for d in basis.dims])
    hi = np.array([d.domain_hi for d in basis.dims])
    locs = data.locations()
    if np.any(locs < lo - 1e-12) or np.any(locs > hi + 1e-12):
        raise ValueError("data points fall outside the basis domain")

    B = data.design(basis).values
    zeta = data.zeta
    N = len(zeta)
    solver = _InnerSolver(B, zeta, assembler, cons, mode,
                          config.kappa if mode == "ls" else 0.0)

    theta = np.asarray(config.theta0, dtype=float)
    if len(theta) != len(pde.theta_names):
        raise ValueError(
            f"theta0 has {len(theta)} entries for parameters {pde.theta_names}"
        )
    var0 = float(np.var(zeta))
    tau = 1.0 / var0 if var0 > 0 else 1.0
    q0 = solver.penalty(theta)
    rank_def = _rank_deficiency(q0.R)
    tr_ratio = float(np.trace(solver.BtB)) / max(float(np.trace(q0.R)), 1e-300)
    gamma = config.identification_scale * tr_ratio * tau
    gamma = min(max(gamma, config.gamma_min), config.gamma_max)
    solver.tau, solver.gamma = tau, gamma

    trace = []
    stalled = False

    def record(it, sse):
        tau_prof = N / sse
        trace.append(TraceRecord(it, tuple(theta), tau_prof, gamma,
                                 0.5 * N * (np.log(tau_prof) - 1.0)))

    def theta_step():
        nonlocal stalled
        obj = _SseObjective(solver, config.stall_evals)
        cand, fval = _nm_step(obj, theta, config)
        if obj.since_improvement >= config.stall_evals:
            stalled = True
        if not np.isfinite(fval):
            fval = solver.sse(cand)
        return cand, fval

    def schall_equilibrate():
        nonlocal tau, gamma
        q = solver.penalty(theta)
        for _ in range(config.schall_max_iter):
            solver.tau, solver.gamma = tau, gamma
            c, _, _, _ = solver.solve(theta)
            res = zeta - B @ c
            sse = float(res @ res)
            tau_n = N / sse
            pen = penalty_value(q, c)
            if pen <= _penalty_floor(q, c):
                gamma_n = gamma * 10.0
            else:
                tr = solver.influence_trace(q, tau_n, gamma)
                gamma_n = max(tr - rank_def, 1.0) / pen
            gamma_n = min(max(gamma_n, config.gamma_min), config.gamma_max)
            rel = max(abs(gamma_n - gamma) / gamma, abs(tau_n - tau) / tau)
            tau, gamma = tau_n, gamma_n
            if rel < config.schall_tol:
                break
        solver.tau, solver.gamma = tau, gamma

    # identification phase at provisional adhesion
    theta, sse = theta_step()
    record(0, sse)

    converged = False
    for it in range(1, config.max_outer + 1):
        prev_theta, prev_gamma = theta.copy(), gamma
        schall_equilibrate()
        theta, sse = theta_step()
        record(it, sse)
        rel_theta = float(np.max(np.abs(theta - prev_theta)
                                 / np.maximum(np.abs(prev_theta), 1e-300)))
        rel = max(rel_theta, abs(gamma - prev_gamma) / prev_gamma)
        if rel < config.tol:
            converged = True
            break

    solver.tau, solver.gamma = tau, gamma
    c, q, _, omega = solver.solve(theta)
    res = zeta - B @ c
    tau = N / float(res @ res)
    message = "" if converged else (
        "theta search stalled; returning best point found"
        if stalled else "iteration cap reached before (theta, gamma) settled"
    )
    if gamma <= config.gamma_min * (1.0 + 1e-9):
        # the Schall update shrank the penalty away: theta is no longer
        # identified (basis too coarse for the noise level, or wrong PDE)
        converged = False
        message = "adhesion collapsed to its lower bound; theta not identified"
    return FreqFit(
        c_hat=c, theta_hat=theta, tau_hat=tau, gamma_hat=gamma, mode=mode,
        kappa=config.kappa if mode == "ls" else None, omega=omega,
        trace=tuple(trace), converged=converged, message=message, n_obs=N,
    )


_BOOT_CACHE = {}


def _bootstrap_refit(ctx, task):
    (fit_cfg, data, pde, basis, cons, mode, assembler,
     fitted, resid, refit_gamma, tau0, gamma0) = ctx
    rep, seed = task
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    idx = rng.integers(0, len(resid), size=len(resid))
    star = Dataset(points=data.points, zeta=fitted + resid[idx], grid=data.grid)
    try:
        if refit_gamma:
            refit = fit_frequentist(fit_cfg, star, pde, basis, cons, mode, assembler)
            return refit.theta_hat if refit.converged else None
        # hold the smoothing state of the original fit (gamma, kappa and the
        # effective weight gamma/tau) and re-profile theta from a warm start;
        # the design matrix is replicate-independent, so cache it per worker
        key = id(ctx)
        if _BOOT_CACHE.get("key") != key:
            B = data.design(basis).values
            _BOOT_CACHE.update(key=key, B=B, BtB=B.T @ B)
        solver = _InnerSolver(_BOOT_CACHE["B"], star.zeta, assembler, cons, mode,
                              fit_cfg.kappa if mode == "ls" else 0.0,
                              BtB=_BOOT_CACHE["BtB"])
        solver.tau, solver.gamma = tau0, gamma0
        obj = _SseObjective(solver, fit_cfg.stall_evals)
        theta, _ = _nm_step(obj, np.asarray(fit_cfg.theta0, dtype=float),
                            replace(fit_cfg, nm_maxfev=60, nm_xatol=1e-6))
        return theta
    except NumericalError:
        return None


def bootstrap_ci(fit: FreqFit, data: Dataset, pde: PdeSpec, basis: TensorBasis,
                 cons: ConstraintSet | None = None,
                 settings: BootstrapSettings = BootstrapSettings(),
                 fit_settings: FitSettings | None = None,
                 assembler: PenaltyAssembler | None = None) -> dict:
    """Residual-resampling bootstrap percentile intervals for theta.

    Replicates keep the smoothing state of the original fit (gamma and
    kappa fixed, theta warm-started) unless ``refit_gamma`` asks for the
    full procedure.  Non-convergent replicates are dropped; more than
    ``max_dropped_frac`` dropped is an error.
    """
    if not 0.0 < settings.level < 1.0:
        raise ValueError(f"level must be in (0, 1), got {settings.level}")
    if not fit.converged:
        raise ValueError("bootstrap requires a converged fit")
    if assembler is None:
        assembler = PenaltyAssembler(pde, basis,
                                     (fit_settings or FitSettings(theta0=fit.theta_hat)).quad_points_per_span)
    base_cfg = fit_settings or FitSettings(theta0=tuple(fit.theta_hat))
    base_cfg = replace(base_cfg, theta0=tuple(fit.theta_hat))
    B = data.design(basis).values
    fitted = B @ fit.c_hat
    resid = data.zeta - fitted
    seeds = np.random.SeedSequence(settings.seed).generate_state(settings.replicates)
    ctx = (base_cfg, data, pde, basis, cons, fit.mode, assembler,
           fitted, resid, settings.refit_gamma, fit.tau_hat, fit.gamma_hat)
    tasks = [(i, int(s)) for i, s in enumerate(seeds)]
    draws = map_tasks(_bootstrap_refit, ctx, tasks, settings.workers)
    kept = np.array([d for d in draws if d is not None])
    dropped = settings.replicates - len(kept)
    if dropped > settings.max_dropped_frac * settings.replicates:
        raise NumericalError(
            f"{dropped}/{settings.replicates} bootstrap replicates failed to converge"
        )
    alpha = (1.0 - settings.level) / 2.0
    lo = np.quantile(kept, alpha, axis=0)
    hi = np.quantile(kept, 1.0 - alpha, axis=0)
    return {
        "level": settings.level,
        "intervals": {name: (float(lo[i]), float(hi[i]))
                      for i, name in enumerate(pde.theta_names)},
        "draws": kept,
        "dropped": dropped,
    }


def penalized_objective(design, zeta, q: PenaltyQuadratic, c, tau: float, gamma: float,
                        cons: ConstraintSet | None = None, kappa: float = 0.0) -> float:
    """J(c | theta, tau, gamma[, kappa]), the criterion the inner solve maximizes."""
    B = _design_values(design)
    res = np.asarray(zeta, dtype=float) - B @ np.asarray(c, dtype=float)
    val = 0.5 * len(res) * np.log(tau) - 0.5 * tau * float(res @ res)
    val -= 0.5 * gamma * penalty_value(q, c)
    if cons is not None and kappa > 0:
        hc = cons.H @ c - cons.v
        val -= 0.5 * kappa * float(hc @ hc)
    return val
