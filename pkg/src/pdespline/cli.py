"""Configuration-driven command line front end.

One structured-text (TOML) config declares a run: ``fit`` an explicit PDE
to a CSV of observations, ``simulate`` the diffusion replicate study, or
``calibrate`` implied volatility from option quotes.  Unknown keys are
rejected (silent typos in penalty grammars are the dominant user error),
defaults are filled and echoed back to an effective-config file, and all
output files carry the config hash and seed in a header comment.

Exit codes: 0 success, 2 config error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import sys
from dataclasses import replace

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import finance, sim
from .basis import TensorBasis, build_knots, grid_points, tensor_design, uniform_basis
from .bayes import ChainSettings, Hyperparams, NormalPrior, hpd_interval, run_chain, summarize
from .data import Dataset
from .errors import ConfigError, DataError, NumericalError
from .freq import BootstrapSettings, FitSettings, bootstrap_ci, fit_frequentist
from .pde import (Condition, ForcingTerm, Multiplier, PdeSpec, PdeTerm,
                  build_constraints)

# ---------------------------------------------------------------------------
# schema: nested mapping of every legal key; leaves are python types
# ---------------------------------------------------------------------------

_LIST = list
_NUM = (int, float)

SCHEMA = {
    "run": {"command": str, "seed": int, "output_dir": str, "threads": int,
            "verbose": bool},
    "basis": {"dims": [{"lo": _NUM, "hi": _NUM, "degree": int,
                        "internal_knots": _LIST, "n_internal_knots": int}]},
    "pde": {"theta": _LIST,
            "terms": [{"deriv": _LIST, "constant": _NUM, "theta_powers": _LIST,
                       "coeff_polys": _LIST}],
            "forcing": {"constant": _NUM, "theta_powers": _LIST,
                        "coeff_polys": _LIST}},
    "conditions": [{"points": _LIST, "deriv": _LIST, "values": _LIST}],
    "data": {"path": str},
    "estimator": {
        "method": str, "constraint": str, "theta0": _LIST, "kappa": _NUM,
        "quad_points_per_span": int,
        "optimizer": {"tol": _NUM, "max_outer": int, "identification_scale": _NUM},
        "sampler": {"iterations": int, "burn_in": int, "thin": int,
                    "proposal_scale_theta": _LIST, "proposal_scale_gamma": _NUM,
                    "proposal_scale_tau": _NUM},
        "hyper": {"a_tau": _NUM, "b_tau": _NUM, "a_gamma": _NUM, "b_gamma": _NUM,
                  "a_kappa": _NUM, "b_kappa": _NUM},
        "priors": dict,  # one table per theta name: {mean, sd, lower, upper}
        "bootstrap": {"replicates": int, "level": _NUM},
    },
    "simulate": {"theta_true": _LIST, "noise_sds": _LIST, "replicates": int,
                 "modes": _LIST, "grid": {"n1": int, "n2": int},
                 "basis": {"n1": int, "n2": int, "degree": int},
                 "theta_prior_sd": _NUM},
    "calibrate": {"coordinates": str, "rate": _NUM, "sigma0": _NUM,
                  "n_internal_knots": int, "degree": int,
                  "moneyness_range": _LIST, "maturity_max": _NUM,
                  "prior": {"mean": _NUM, "sd": _NUM, "lower": _NUM, "upper": _NUM}},
    "export": {"surface_grid": _LIST},
}

_PRIOR_KEYS = {"mean", "sd", "lower", "upper"}


def _check_keys(user, schema, path=""):
    unknown = []
    if isinstance(schema, dict) and schema is not dict:
        if not isinstance(user, dict):
            raise ConfigError(f"{path or 'config'}: expected a table")
        for key, val in user.items():
            if key not in schema:
                unknown.append(f"{path}.{key}".lstrip("."))
                continue
            sub = schema[key]
            if isinstance(sub, dict):
                unknown += _check_keys(val, sub, f"{path}.{key}")
            elif isinstance(sub, list):
                if not isinstance(val, list):
                    raise ConfigError(f"{path}.{key}: expected an array of tables")
                for i, item in enumerate(val):
                    unknown += _check_keys(item, sub[0], f"{path}.{key}[{i}]")
            elif sub is dict:
                if not isinstance(val, dict):
                    raise ConfigError(f"{path}.{key}: expected a table")
            elif sub in (_LIST,):
                if not isinstance(val, list):
                    raise ConfigError(f"{path}.{key}: expected an array")
            elif sub is str:
                if not isinstance(val, str):
                    raise ConfigError(f"{path}.{key}: expected a string")
            elif sub is int:
                if not isinstance(val, int) or isinstance(val, bool):
                    raise ConfigError(f"{path}.{key}: expected an integer")
            elif sub is bool:
                if not isinstance(val, bool):
                    raise ConfigError(f"{path}.{key}: expected a boolean")
            elif sub is _NUM:
                if not isinstance(val, (int, float)) or isinstance(val, bool):
                    raise ConfigError(f"{path}.{key}: expected a number")
    return unknown


class RunConfig:
    """Validated configuration with defaults filled."""

    def __init__(self, raw: dict):
        self.raw = raw

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.raw == other.raw

    def __getitem__(self, key):
        return self.raw[key]

    def get(self, *keys, default=None):
        node = self.raw
        for k in keys:
            if not isinstance(node, dict) or k not in node:
                return default
            node = node[k]
        return node

    @property
    def command(self) -> str:
        return self.raw["run"]["command"]

    @property
    def seed(self) -> int:
        return self.raw["run"]["seed"]


def _fill_defaults(raw: dict) -> dict:
    run = raw.setdefault("run", {})
    if "command" not in run:
        raise ConfigError("run.command is required (fit | simulate | calibrate)")
    if run["command"] not in ("fit", "simulate", "calibrate"):
        raise ConfigError(f"run.command must be fit, simulate or calibrate, "
                          f"got {run['command']!r}")
    if "seed" not in run:
        raise ConfigError("run.seed is required: every run must be reproducible")
    run.setdefault("output_dir", "out")
    run.setdefault("threads", 1)
    run.setdefault("verbose", False)

    est = raw.setdefault("estimator", {})
    est.setdefault("method", "freq")
    if est["method"] not in ("freq", "bayes"):
        raise ConfigError(f"estimator.method must be freq or bayes, got {est['method']!r}")
    est.setdefault("constraint", "ls")
    if est["constraint"] not in ("none", "ls", "lagrange"):
        raise ConfigError("estimator.constraint must be none, ls or lagrange")
    if est["method"] == "bayes" and est["constraint"] == "lagrange":
        raise ConfigError("the Bayesian estimator supports constraint = none or ls only")
    est.setdefault("kappa", 1e6)
    est.setdefault("quad_points_per_span", 32)
    opt = est.setdefault("optimizer", {})
    opt.setdefault("tol", 1e-6)
    opt.setdefault("max_outer", 200)
    opt.setdefault("identification_scale", 100.0)
    sam = est.setdefault("sampler", {})
    sam.setdefault("iterations", 20000)
    sam.setdefault("burn_in", 5000)
    sam.setdefault("thin", 1)
    sam.setdefault("proposal_scale_gamma", 1.0)
    sam.setdefault("proposal_scale_tau", 0.3)
    hyp = est.setdefault("hyper", {})
    for key, val in (("a_tau", 1.0), ("b_tau", 1e-6), ("a_gamma", 1.0),
                     ("b_gamma", 1e-8), ("a_kappa", 1.0), ("b_kappa", 1e-6)):
        hyp.setdefault(key, val)

    cmd = run["command"]
    if cmd == "fit":
        for section in ("basis", "pde", "data"):
            if section not in raw:
                raise ConfigError(f"the fit command requires a [{section}] section")
        if "theta0" not in est:
            raise ConfigError("estimator.theta0 is required for fit")
    if cmd == "simulate":
        simc = raw.setdefault("simulate", {})
        simc.setdefault("theta_true", [0.5, 1.5])
        simc.setdefault("noise_sds", [0.01])
        simc.setdefault("replicates", 50)
        simc.setdefault("modes", ["freq-ls"])
        simc.setdefault("theta_prior_sd", 10.0)
        grid = simc.setdefault("grid", {})
        grid.setdefault("n1", 50)
        grid.setdefault("n2", 50)
        bas = simc.setdefault("basis", {})
        bas.setdefault("n1", 28)
        bas.setdefault("n2", 13)
        bas.setdefault("degree", 3)
        est.setdefault("theta0", [1.0, 1.0])
    if cmd == "calibrate":
        if "data" not in raw:
            raise ConfigError("the calibrate command requires a [data] section")
        cal = raw.setdefault("calibrate", {})
        cal.setdefault("coordinates", "scaled")
        cal.setdefault("sigma0", 0.2)
        cal.setdefault("n_internal_knots", 25)
        cal.setdefault("degree", 3)
        prior = cal.setdefault("prior", {})
        prior.setdefault("mean", 0.2)
        prior.setdefault("sd", 1.0)
        prior.setdefault("lower", 1e-4)
    return raw


def _validate_cross_refs(raw: dict):
    if "pde" in raw:
        pde = raw["pde"]
        names = pde.get("theta", [])
        n_theta = len(names)
        for i, term in enumerate(pde.get("terms", [])):
            powers = term.get("theta_powers", [0] * n_theta)
            if len(powers) != n_theta:
                raise ConfigError(
                    f"pde.terms[{i}].theta_powers has {len(powers)} entries but "
                    f"pde.theta declares {n_theta} parameters {names}"
                )
        theta0 = raw.get("estimator", {}).get("theta0")
        if theta0 is not None and len(theta0) != n_theta:
            raise ConfigError(
                f"estimator.theta0 has {len(theta0)} entries for parameters {names}"
            )
        priors = raw.get("estimator", {}).get("priors", {})
        for name in priors:
            if name not in names:
                raise ConfigError(
                    f"estimator.priors mentions undeclared parameter {name!r}; "
                    f"declared: {names}"
                )
            extra = set(priors[name]) - _PRIOR_KEYS
            if extra:
                raise ConfigError(f"estimator.priors.{name}: unknown keys {sorted(extra)}")


def parse_config(path) -> RunConfig:
    """Read, key-check, default-fill and cross-validate a run config."""
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    unknown = _check_keys(raw, SCHEMA)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    raw = _fill_defaults(raw)
    _validate_cross_refs(raw)
    return RunConfig(raw)


# ---------------------------------------------------------------------------
# effective-config echo (TOML writer for the value types we produce)
# ---------------------------------------------------------------------------

def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot serialize {type(v)}")


def _write_table(lines, table, prefix):
    scalars = {k: v for k, v in table.items()
               if not isinstance(v, dict)
               and not (isinstance(v, list) and v and isinstance(v[0], dict))}
    subtables = {k: v for k, v in table.items() if isinstance(v, dict)}
    arrays = {k: v for k, v in table.items()
              if isinstance(v, list) and v and isinstance(v[0], dict)}
    if prefix and (scalars or not (subtables or arrays)):
        lines.append(f"[{prefix}]")
    for k, v in scalars.items():
        lines.append(f"{k} = {_toml_value(v)}")
    if scalars:
        lines.append("")
    for k, v in subtables.items():
        _write_table(lines, v, f"{prefix}.{k}" if prefix else k)
    for k, items in arrays.items():
        for item in items:
            lines.append(f"[[{prefix + '.' if prefix else ''}{k}]]")
            _write_table(lines, {kk: vv for kk, vv in item.items()}, "")
    return lines


def write_effective_config(config: RunConfig, path, config_hash: str):
    lines = [f"# config_sha256={config_hash} seed={config.seed}"]
    _write_table(lines, config.raw, "")
    text = "\n".join(lines).rstrip() + "\n"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


_OPERATIONAL_KEYS = (("run", "output_dir"), ("run", "threads"), ("run", "verbose"))


def config_hash(config: RunConfig) -> str:
    """Hash of the scientific configuration (output paths, worker counts
    and verbosity do not change results and are excluded)."""
    flat = [(k, v) for k, v in _flatten(config.raw)
            if k[:2] not in _OPERATIONAL_KEYS]
    return hashlib.sha256(repr(sorted(flat)).encode()).hexdigest()[:16]


def _flatten(node, prefix=()):
    out = []
    if isinstance(node, dict):
        for k in sorted(node):
            out += _flatten(node[k], prefix + (k,))
    elif isinstance(node, list):
        for i, v in enumerate(node):
            out += _flatten(v, prefix + (i,))
    else:
        out.append((prefix, repr(node)))
    return out


# ---------------------------------------------------------------------------
# artifact writers
# ---------------------------------------------------------------------------

def _header(config: RunConfig, chash: str) -> str:
    return f"# config_sha256={chash} seed={config.seed}\n"


def _write_csv(path, header_line, columns, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(header_line)
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join("" if x is None else
                              (x if isinstance(x, str) else repr(float(x)))
                              for x in row) + "\n")


def export_surface(coefficients, basis: TensorBasis, grid_spec, path,
                   header: str = ""):
    """Write the fitted surface on a grid: columns x1..xp, u_hat.

    ``grid_spec`` holds one entry per dimension: either a point count (the
    axis then spans the basis domain) or an explicit axis, which must stay
    inside the domain.  Row order is dimension-1 fastest, matching the
    coefficient layout.
    """
    grid_spec = list(grid_spec)
    if len(grid_spec) != basis.p:
        raise ValueError(f"need {basis.p} grid axes or sizes, got {len(grid_spec)}")
    axes = []
    for d, g in zip(basis.dims, grid_spec):
        if np.ndim(g) == 0:
            axes.append(np.linspace(d.domain_lo, d.domain_hi, int(g)))
        else:
            ax = np.asarray(g, dtype=float)
            if np.any(ax < d.domain_lo) or np.any(ax > d.domain_hi):
                raise ValueError(
                    f"surface grid leaves the basis domain [{d.domain_lo}, {d.domain_hi}]"
                )
            axes.append(ax)
    design = tensor_design(basis, axes, mode="grid")
    values = design.values @ np.asarray(coefficients, dtype=float)
    pts = grid_points(axes)
    cols = [f"x{i+1}" for i in range(basis.p)] + ["u_hat"]
    rows = [tuple(p) + (v,) for p, v in zip(pts, values)]
    _write_csv(path, header, cols, rows)


# ---------------------------------------------------------------------------
# command implementations
# ---------------------------------------------------------------------------

def _build_basis(config: RunConfig, pde_order: int) -> TensorBasis:
    dims = []
    for i, d in enumerate(config["basis"]["dims"]):
        degree = d.get("degree", pde_order + 2)
        if "internal_knots" in d:
            spec = build_knots(d["lo"], d["hi"], degree, d["internal_knots"])
        else:
            spec = uniform_basis(d["lo"], d["hi"], degree,
                                 d.get("n_internal_knots", 20))
        dims.append(spec)
    return TensorBasis(tuple(dims))


def _build_pde(config: RunConfig) -> PdeSpec:
    sec = config["pde"]
    names = tuple(sec.get("theta", []))
    p = len(config["basis"]["dims"])
    terms = []
    for t in sec.get("terms", []):
        powers = tuple(t.get("theta_powers", [0] * len(names)))
        polys = t.get("coeff_polys", [[1.0]] * p)
        terms.append(PdeTerm(
            Multiplier(t.get("constant", 1.0), powers),
            tuple(tuple(float(c) for c in poly) for poly in polys),
            tuple(t["deriv"]),
        ))
    forcing = None
    if "forcing" in sec:
        f = sec["forcing"]
        forcing = ForcingTerm(
            Multiplier(f.get("constant", 1.0),
                       tuple(f.get("theta_powers", [0] * len(names)))),
            tuple(tuple(float(c) for c in poly)
                  for poly in f.get("coeff_polys", [[1.0]] * p)),
        )
    if not terms:
        raise ConfigError("pde.terms must declare at least one term")
    return PdeSpec(p=p, theta_names=names, terms=tuple(terms), forcing=forcing)


def _build_conditions(config: RunConfig, basis: TensorBasis):
    if "conditions" not in config.raw:
        return None
    conds = []
    for c in config.raw["conditions"]:
        conds.append(Condition(
            points=np.asarray(c["points"], dtype=float),
            deriv_orders=tuple(c.get("deriv", [0] * basis.p)),
            target=np.asarray(c["values"], dtype=float),
        ))
    return build_constraints(conds, basis)


def _read_observations(path, p: int) -> Dataset:
    cols = [f"x{i+1}" for i in range(p)]
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file")
        missing = [c for c in cols + ["zeta"] if c not in reader.fieldnames]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        pts, vals = [], []
        for row in reader:
            pts.append([float(row[c]) for c in cols])
            vals.append(float(row["zeta"]))
    if not pts:
        raise DataError(f"{path}: no data rows")
    return Dataset(points=np.asarray(pts), zeta=np.asarray(vals), grid=False)


def _freq_settings(config: RunConfig, theta0) -> FitSettings:
    est = config["estimator"]
    return FitSettings(
        theta0=tuple(theta0),
        kappa=est["kappa"],
        tol=est["optimizer"]["tol"],
        max_outer=est["optimizer"]["max_outer"],
        identification_scale=est["optimizer"]["identification_scale"],
        quad_points_per_span=est["quad_points_per_span"],
    )


def _chain_settings(config: RunConfig, theta0, constrained: bool) -> ChainSettings:
    est = config["estimator"]
    sam = est["sampler"]
    return ChainSettings(
        theta0=tuple(theta0),
        iterations=sam["iterations"],
        burn_in=sam["burn_in"],
        thin=sam["thin"],
        seed=config.seed,
        kappa=est["kappa"] if constrained else None,
        proposal_scale_theta=(tuple(sam["proposal_scale_theta"])
                              if "proposal_scale_theta" in sam else None),
        proposal_scale_gamma=sam["proposal_scale_gamma"],
        proposal_scale_tau=sam["proposal_scale_tau"],
        quad_points_per_span=est["quad_points_per_span"],
    )


def _hyper(config: RunConfig, names) -> Hyperparams:
    est = config["estimator"]
    priors = est.get("priors", {})
    missing = [n for n in names if n not in priors]
    if missing:
        raise ConfigError(
            f"the Bayesian estimator needs [estimator.priors.<name>] tables "
            f"with mean/sd for every parameter; missing: {missing}"
        )
    tp = tuple(NormalPrior(priors[n]["mean"], priors[n]["sd"],
                           priors[n].get("lower", -np.inf),
                           priors[n].get("upper", np.inf)) for n in names)
    h = est["hyper"]
    return Hyperparams(a_tau=h["a_tau"], b_tau=h["b_tau"], a_gamma=h["a_gamma"],
                       b_gamma=h["b_gamma"], a_kappa=h["a_kappa"],
                       b_kappa=h["b_kappa"], theta_prior=tp)


def _run_fit(config: RunConfig, outdir, chash, verbose):
    pde = _build_pde(config)
    basis = _build_basis(config, pde.order)
    cons = _build_conditions(config, basis)
    data = _read_observations(config["data"]["path"], basis.p)
    est = config["estimator"]
    constraint = est["constraint"] if cons is not None else "none"
    head = _header(config, chash)
    est_rows = []
    if est["method"] == "freq":
        settings = _freq_settings(config, est["theta0"])
        fit = fit_frequentist(settings, data, pde, basis, cons, constraint)
        if not fit.converged:
            raise NumericalError(f"fit did not converge: {fit.message}")
        intervals = {}
        if "bootstrap" in est:
            boot = bootstrap_ci(
                fit, data, pde, basis, cons,
                BootstrapSettings(replicates=est["bootstrap"]["replicates"],
                                  level=est["bootstrap"].get("level", 0.95),
                                  seed=config.seed,
                                  workers=config["run"]["threads"]),
                fit_settings=settings)
            intervals = boot["intervals"]
        for i, name in enumerate(pde.theta_names):
            lo, hi = intervals.get(name, (None, None))
            est_rows.append((name, fit.theta_hat[i], lo, hi, f"freq-{constraint}"))
        est_rows.append(("tau", fit.tau_hat, None, None, f"freq-{constraint}"))
        est_rows.append(("gamma", fit.gamma_hat, None, None, f"freq-{constraint}"))
        _write_csv(outdir / "trace.csv", head,
                   ["iteration"] + [f"theta_{n}" for n in pde.theta_names]
                   + ["tau", "gamma", "objective"],
                   [(r.iteration, *r.theta, r.tau, r.gamma, r.objective)
                    for r in fit.trace])
        coeffs = fit.c_hat
    else:
        chain = run_chain(_chain_settings(config, est["theta0"], cons is not None),
                          data, pde, basis, _hyper(config, pde.theta_names), cons)
        summ = summarize(chain)
        for name in list(pde.theta_names) + ["gamma", "tau"]:
            lo, hi = summ[name]["hpd95"]
            est_rows.append((name, summ[name]["mean"], lo, hi, f"bayes-{constraint}"))
        chain.export_text(outdir / "chain.csv", chash, config.seed)
        # posterior-mean coefficients for the surface export
        from .pde import PenaltyAssembler
        from .bayes import prior_components
        from scipy.linalg import cho_factor, cho_solve
        assembler = PenaltyAssembler(pde, basis, est["quad_points_per_span"])
        theta_mean = [summ[n]["mean"] for n in pde.theta_names]
        q = assembler.penalty(theta_mean)
        prior = prior_components(q, summ["gamma"]["mean"], cons,
                                 est["kappa"] if cons is not None else None)
        B = data.design(basis).values
        V2 = summ["tau"]["mean"] * (B.T @ B) + prior.V1
        v2 = summ["tau"]["mean"] * (B.T @ data.zeta) + prior.v1
        coeffs = cho_solve(cho_factor(V2, lower=True), v2)
    _write_csv(outdir / "estimates.csv", head,
               ["parameter", "point", "lo", "hi", "method"], est_rows)
    if config.get("export", "surface_grid"):
        export_surface(coeffs, basis, config.get("export", "surface_grid"),
                       outdir / "surface.csv", head)
    return est_rows


def _run_simulate(config: RunConfig, outdir, chash, verbose):
    simc = config["simulate"]
    est = config["estimator"]
    study = sim.StudyConfig(
        theta_true=tuple(simc["theta_true"]),
        noise_sds=tuple(simc["noise_sds"]),
        n_grid=(simc["grid"]["n1"], simc["grid"]["n2"]),
        replicates=simc["replicates"],
        modes=tuple(simc["modes"]),
        base_seed=config.seed,
        basis_sizes=(simc["basis"]["n1"], simc["basis"]["n2"]),
        degree=simc["basis"]["degree"],
        theta0=tuple(est.get("theta0", (1.0, 1.0))),
        kappa=est["kappa"],
        quad_points_per_span=est["quad_points_per_span"],
        theta_prior_sd=simc["theta_prior_sd"],
        chain_iterations=est["sampler"]["iterations"],
        chain_burn_in=est["sampler"]["burn_in"],
        chain_thin=est["sampler"]["thin"],
        workers=config["run"]["threads"],
    )
    table, raw = sim.run_study(study)
    head = _header(config, chash)
    with open(outdir / "metrics.csv", "w", encoding="utf-8") as fh:
        fh.write(head)
        fh.write(table.to_text())
    rep_rows = []
    for (lvl, rep), modes in sorted(raw.items()):
        for mode, result in modes.items():
            if "error" in result:
                rep_rows.append((lvl, rep, mode, "theta1", None, result["error"]))
                continue
            if mode.startswith("freq"):
                for i, name in enumerate(("theta1", "theta2")):
                    rep_rows.append((lvl, rep, mode, name, result["theta"][i], ""))
                rep_rows.append((lvl, rep, mode, "tau", result["tau"], ""))
            else:
                for name in ("theta1", "theta2", "tau"):
                    rep_rows.append((lvl, rep, mode, name,
                                     result["post_mean"][name], ""))
    _write_csv(outdir / "replicates.csv", head,
               ["level", "replicate", "mode", "parameter", "estimate", "note"],
               rep_rows)
    return table


def _run_calibrate(config: RunConfig, outdir, chash, verbose):
    cal = config["calibrate"]
    est = config["estimator"]
    quotes = finance.ingest_options(config["data"]["path"])
    domain = None
    if "moneyness_range" in cal and "maturity_max" in cal:
        domain = (tuple(cal["moneyness_range"]), (0.0, cal["maturity_max"]))
    boot = None
    if est["method"] == "freq" and "bootstrap" in est:
        boot = BootstrapSettings(replicates=est["bootstrap"]["replicates"],
                                 level=est["bootstrap"].get("level", 0.95),
                                 seed=config.seed,
                                 workers=config["run"]["threads"])
    chain_cfg = None
    if est["method"] == "bayes":
        chain_cfg = _chain_settings(config, [cal["sigma0"]], True)
    prior = cal["prior"]
    settings = finance.CalibrationSettings(
        mode=est["method"],
        coordinates=cal["coordinates"],
        constraint=est["constraint"] if est["constraint"] != "none" else "ls",
        kappa=est["kappa"],
        rate=cal.get("rate"),
        sigma0=cal["sigma0"],
        degree=cal["degree"],
        n_internal_knots=cal["n_internal_knots"],
        domain=domain,
        quad_points_per_span=est["quad_points_per_span"],
        bootstrap=boot,
        chain=chain_cfg,
        sigma_prior=NormalPrior(prior["mean"], prior["sd"],
                                prior.get("lower", 1e-4),
                                prior.get("upper", np.inf)),
        workers=config["run"]["threads"],
    )
    result = finance.calibrate_volatility(quotes, settings)
    head = _header(config, chash)
    lo, hi = result.interval if result.interval else (None, None)
    rows = [("sigma", result.sigma_hat, lo, hi, f"{result.mode}-{settings.constraint}"),
            ("gamma", result.gamma_hat, None, None, f"{result.mode}-{settings.constraint}")]
    _write_csv(outdir / "estimates.csv", head,
               ["parameter", "point", "lo", "hi", "method"], rows)
    if result.fit is not None:
        _write_csv(outdir / "trace.csv", head,
                   ["iteration", "theta_sigma", "tau", "gamma", "objective"],
                   [(r.iteration, *r.theta, r.tau, r.gamma, r.objective)
                    for r in result.fit.trace])
        coeffs = result.fit.c_hat
    else:
        result.chain.export_text(outdir / "chain.csv", chash, config.seed)
        coeffs = None
    if config.get("export", "surface_grid") and coeffs is not None:
        export_surface(coeffs, result.problem.basis,
                       config.get("export", "surface_grid"),
                       outdir / "surface.csv", head)
    return result


def run(config: RunConfig, output_dir=None, threads=None, verbose=False):
    """Dispatch a validated config; returns the primary result object."""
    from pathlib import Path

    if threads is not None:
        config.raw["run"]["threads"] = int(threads)
    if output_dir is not None:
        config.raw["run"]["output_dir"] = str(output_dir)
    outdir = Path(config.raw["run"]["output_dir"])
    outdir.mkdir(parents=True, exist_ok=True)
    chash = config_hash(config)
    write_effective_config(config, outdir / "effective_config.toml", chash)
    verbose = verbose or config.raw["run"]["verbose"]
    if config.command == "fit":
        return _run_fit(config, outdir, chash, verbose)
    if config.command == "simulate":
        return _run_simulate(config, outdir, chash, verbose)
    return _run_calibrate(config, outdir, chash, verbose)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="pdespline",
        description="PDE-penalized tensor-product B-spline estimation")
    parser.add_argument("--config", required=True, help="TOML run configuration")
    parser.add_argument("--output-dir", default=None, help="override run.output_dir")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker processes for replicates and bootstrap")
    parser.add_argument("--verbose", action="store_true")
    args = parser.parse_args(argv)
    try:
        config = parse_config(args.config)
        run(config, args.output_dir, args.threads, args.verbose)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, ValueError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (OSError, DataError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
