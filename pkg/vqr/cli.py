import json
import logging
import os
import re
import sys
from dataclasses import dataclass
from pathlib import Path

import click
import numpy as np
import pandas as pd
from cligj import indent_opt, quiet_opt, verbose_opt

import vqr
from vqr.lp_core import FEASIBILITY_TOL, SolverError
from vqr.measures import DiscreteSample, UGrid, center, load_sample, make_grid, save_sample
from vqr.vqr_solver import ENTROPIC, EXACT, VqrSolution, feasibility_residuals, objective_scale, verify_duals

LOG_FORMAT = "%(asctime)s:%(levelname)s:%(name)s: %(message)s"
LOG_LEVELS = {"error": 40, "warning": 30, "info": 20, "debug": 10}

COMMANDS = ("vq", "vqr", "qr1d", "equiv", "check", "gen")
BACKENDS = (EXACT, ENTROPIC)

SOLUTION_FILE = "solution.json"
CONTACT_FILE = "contact.csv"
CURVES_FILE = "curves.csv"
EQUIV_FILE = "equiv.json"
SAMPLE_FILE = "sample.csv"
TRUTH_FILE = "truth.json"

CHECK_TOL = 1e-8

log = logging.getLogger(__name__)


def configure_logging(verbosity):
    base = LOG_LEVELS.get(os.environ.get("VQR_LOG", "warning").lower(), 30)
    log_level = max(10, base - 10 * verbosity)
    logging.basicConfig(stream=sys.stderr, level=log_level, format=LOG_FORMAT)


@dataclass(frozen=True)
class RunConfig:
    command: str
    input: str = None
    output: str = "."
    grid_size: int = 16
    backend: str = EXACT
    epsilon: float = None
    tol: float = FEASIBILITY_TOL
    levels: tuple = None
    seed: int = 0
    x_query: tuple = None
    preset: str = "specified"
    n: int = 200
    noise: str = "none"
    dump_lp: str = None
    indent: int = None

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ValueError(f"unknown command {self.command!r}")
        if self.grid_size < 1:
            raise ValueError("--grid-size must be at least 1")
        if not self.tol > 0:
            raise ValueError("--tol must be positive")
        if self.backend not in BACKENDS:
            raise ValueError(f"--backend must be one of {', '.join(BACKENDS)}")
        if self.epsilon is not None:
            if self.backend != ENTROPIC:
                raise ValueError("--epsilon only applies to the entropic backend")
            if not self.epsilon > 0:
                raise ValueError("--epsilon must be positive")
        if self.command != "gen" and not self.input:
            raise ValueError(f"{self.command} needs --input")


def _write_json(path, doc, indent=None):
    with open(path, "w") as f:
        json.dump(doc, f, indent=indent)
    log.info(f"Wrote {path}")


def _read_json(path):
    path = Path(path)
    if path.is_dir():
        path = path / SOLUTION_FILE
    with open(path) as f:
        return json.load(f)


def _output_dir(config):
    path = Path(config.output)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _x_points(config, sample):
    if config.x_query:
        if any(len(x) != sample.n_covariates for x in config.x_query):
            raise ValueError(f"--x-query points need {sample.n_covariates} coordinates")
        return np.array(config.x_query, dtype=float)
    return np.zeros((1, sample.n_covariates))


def run_vq(config):
    sample = load_sample(config.input)
    grid = make_grid(sample.d, config.grid_size)
    result = vqr.max_correlation(sample, grid, tol=config.tol, dump_dir=config.dump_lp)
    doc = {
        "command": "vq",
        "transport": result.to_dict(),
        "barycentric": vqr.barycentric_map(result, grid, sample).tolist(),
        "sample": sample.to_dict(),
        "grid": grid.to_dict(),
    }
    if sample.d == 1:
        doc["quantile_1d"] = vqr.vector_quantile_1d(sample, grid).tolist()
    _write_json(_output_dir(config) / SOLUTION_FILE, doc, config.indent)
    click.echo(json.dumps({"value": result.value}))
    return 0


def run_vqr(config):
    sample = center(load_sample(config.input))
    grid = make_grid(sample.d, config.grid_size)
    if config.backend == ENTROPIC:
        epsilon = config.epsilon or 0.01 * objective_scale(sample, grid)
        sol = vqr.solve_vqr_entropic(sample, grid, epsilon, tol=config.tol)
    else:
        sol = vqr.solve_vqr_exact(sample, grid, tol=config.tol, dump_dir=config.dump_lp)
    contact = vqr.check_relaxed_spec(sol, sample, grid)
    duals = verify_duals(sol, sample, grid)
    out = _output_dir(config)
    x_points = _x_points(config, sample)
    _write_json(
        out / SOLUTION_FILE,
        {
            "command": "vqr",
            "solution": sol.to_dict(),
            "contact": contact.to_dict(),
            "duals": duals.to_dict(),
            "sample": sample.to_dict(),
            "grid": grid.to_dict(),
        },
        config.indent,
    )
    vqr.write_contact_csv(out / CONTACT_FILE, sol, grid, x_points)
    if sample.d == 1 and config.grid_size >= 2:
        curves = vqr.conditional_quantile_curves(sol, sample, grid, x_points)
        frame = pd.DataFrame(
            {
                "x_index": np.repeat(np.arange(len(curves.x)), grid.m),
                "t": np.tile(curves.t, len(curves.x)),
                "q": curves.q.ravel(),
            }
        )
        frame.to_csv(out / CURVES_FILE, index=False, float_format="%.17g")
    click.echo(json.dumps({"value": sol.value, "contact": contact.passed, "duals": duals.passed}))
    return 0


def run_qr1d(config):
    sample = center(load_sample(config.input))
    levels = config.levels if config.levels else vqr.level_grid(config.grid_size)[0]
    model = vqr.kb_scan(sample, levels, tol=config.tol)
    quasi = vqr.quasi_spec_check(model, sample)
    uqr = vqr.build_uqr(model, sample)
    out = _output_dir(config)
    frame = pd.DataFrame({"t": model.t, "alpha": model.alpha})
    for k in range(sample.n_covariates):
        frame[f"beta_{k + 1}"] = model.beta[:, k]
    frame.to_csv(out / CURVES_FILE, index=False, float_format="%.17g")
    _write_json(
        out / SOLUTION_FILE,
        {
            "command": "qr1d",
            "model": model.to_dict(),
            "quasi_spec": quasi.to_dict(),
            "uqr": uqr.to_dict(),
            "sample": sample.to_dict(),
        },
        config.indent,
    )
    click.echo(json.dumps({"quasi_spec": quasi.passed, "uqr": uqr.passed}))
    return 0


def run_equiv(config):
    sample = center(load_sample(config.input))
    report = vqr.equivalence_report(sample, config.grid_size)
    doc = report.to_dict()
    doc.update({"command": "equiv", "grid_size": config.grid_size})
    _write_json(_output_dir(config) / EQUIV_FILE, doc, config.indent)
    click.echo(json.dumps({"gap": report.gap, "pass": report.passed}))
    return 0 if report.passed else 1


def _check_vq(doc):
    sample = DiscreteSample.from_dict(doc["sample"])
    grid = UGrid.from_dict(doc["grid"])
    result = doc["transport"]
    pi = vqr.Coupling.from_triplets(result["coupling"], (grid.m, sample.n)).pi
    residuals = feasibility_residuals(pi, sample, grid)
    cost = grid.u @ sample.y.T
    phi, psi = np.asarray(result["phi"]), np.asarray(result["psi"])
    residuals["value"] = abs(float(np.sum(cost * pi)) - result["value"])
    residuals["dual"] = float(max(0.0, np.max(cost - phi[:, None] - psi[None, :])))
    return residuals, max(residuals["grid"], residuals["sample"], residuals["value"], residuals["dual"]) <= CHECK_TOL


def _check_vqr(doc):
    sample = DiscreteSample.from_dict(doc["sample"])
    grid = UGrid.from_dict(doc["grid"])
    sol = VqrSolution.from_dict(doc["solution"], grid, sample)
    residuals = feasibility_residuals(sol.coupling.pi, sample, grid)
    duals = verify_duals(sol, sample, grid)
    tol = CHECK_TOL if sol.backend == EXACT else 1e-6
    residuals.update(duals.to_dict())
    feasible = max(residuals["grid"], residuals["sample"], residuals["mean_indep"]) <= tol
    return residuals, feasible and duals.passed


def _check_qr1d(doc):
    sample = DiscreteSample.from_dict(doc["sample"])
    model = vqr.QuantileModel1D.from_dict(doc["model"])
    residual = float(np.max(vqr.moment_residuals(model.ut, model.t, sample)))
    bounds = bool(np.all(model.ut >= -CHECK_TOL) and np.all(model.ut <= 1 + CHECK_TOL))
    return {"moments": residual, "bounds": bounds}, residual <= 1e-6 and bounds


def _check_equiv(doc):
    residuals = {"gap": doc["gap"], "threshold_residual": doc["threshold_residual"]}
    return residuals, doc["gap"] <= doc["tol"] and doc["threshold_residual"] <= doc["tol"]


CHECKS = {"vq": _check_vq, "vqr": _check_vqr, "qr1d": _check_qr1d, "equiv": _check_equiv}


def run_check(config):
    doc = _read_json(config.input)
    kind = doc.get("command")
    if kind not in CHECKS:
        raise ValueError(f"{config.input} is not a solution file (command {kind!r})")
    residuals, passed = CHECKS[kind](doc)
    click.echo(json.dumps({"command": kind, "passed": bool(passed), "residuals": residuals}))
    if not passed:
        log.error(f"{config.input}: {kind} invariants fail")
    return 0 if passed else 1


def run_gen(config):
    spec = vqr.SyntheticSpec.preset(config.preset, config.n, seed=config.seed, noise=config.noise)
    data = vqr.gen_synthetic(spec)
    out = _output_dir(config)
    save_sample(data.sample, out / SAMPLE_FILE)
    _write_json(out / TRUTH_FILE, data.truth(), config.indent)
    click.echo(json.dumps({"atoms": data.sample.n, "sample": str(out / SAMPLE_FILE)}))
    return 0


HANDLERS = {
    "vq": run_vq,
    "vqr": run_vqr,
    "qr1d": run_qr1d,
    "equiv": run_equiv,
    "check": run_check,
    "gen": run_gen,
}


def run(config):
    """Dispatch a command; returns the process exit status"""
    try:
        return HANDLERS[config.command](config)
    except SolverError as e:
        log.error(f"{config.command}: solver failure: {e}")
        return 2
    except (ValueError, OSError) as e:
        log.error(f"{config.command}: {e}")
        return 1


def _execute(**kwargs):
    try:
        config = RunConfig(**kwargs)
    except ValueError as e:
        raise click.UsageError(str(e))
    status = run(config)
    if status:
        sys.exit(status)


def levels_handler(ctx, param, value):
    """Parse a comma separated list of levels"""
    if value is None:
        return None
    try:
        return tuple(float(t) for t in re.split(r"[,\s]+", value.strip(", []")))
    except ValueError:
        raise click.BadParameter(f"{value!r} is not a list of levels")


def point_handler(ctx, param, value):
    """Parse repeated covariate points given as comma separated coordinates"""
    if not value:
        return None
    try:
        return tuple(tuple(float(c) for c in re.split(r"[,\s]+", v.strip(", []"))) for v in value)
    except ValueError:
        raise click.BadParameter(f"{value!r} is not a list of covariate points")


input_opt = click.option(
    "--input", "-i", "input_", required=True, type=click.Path(exists=True), help="Sample CSV"
)
output_opt = click.option(
    "--output", "-o", default=".", type=click.Path(file_okay=False), help="Directory for result files"
)
grid_size_opt = click.option(
    "--grid-size", "-g", default=16, show_default=True, type=int, help="Grid levels per axis"
)
tol_opt = click.option(
    "--tol", default=FEASIBILITY_TOL, show_default=True, type=float, help="Solver feasibility tolerance"
)
dump_lp_opt = click.option(
    "--dump-lp", type=click.Path(file_okay=False), help="Write assembled linear programs to this directory"
)
x_query_opt = click.option(
    "--x-query",
    multiple=True,
    callback=point_handler,
    help='Covariate point (centered coordinates), "x1,x2,..."; repeat for several points',
)


@click.group()
@click.version_option(version=vqr.__version__, message="%(version)s")
def cli():
    pass


@cli.command()
@input_opt
@output_opt
@grid_size_opt
@tol_opt
@dump_lp_opt
@indent_opt
@verbose_opt
@quiet_opt
def vq(input_, output, grid_size, tol, dump_lp, indent, verbose, quiet):
    """Vector quantiles of the outcomes: maximal-correlation transport from the level grid"""
    configure_logging(verbose - quiet)
    _execute(command="vq", input=input_, output=output, grid_size=grid_size, tol=tol, dump_lp=dump_lp, indent=indent)


@cli.command(name="vqr")
@input_opt
@output_opt
@grid_size_opt
@click.option("--backend", type=click.Choice(BACKENDS), default=EXACT, show_default=True, help="Solver backend")
@click.option("--epsilon", type=float, help="Entropic regularization (default 0.01 x objective scale)")
@tol_opt
@x_query_opt
@dump_lp_opt
@indent_opt
@verbose_opt
@quiet_opt
def vqr_command(input_, output, grid_size, backend, epsilon, tol, x_query, dump_lp, indent, verbose, quiet):
    """Vector quantile regression under mean independence, with contact-set report"""
    configure_logging(verbose - quiet)
    _execute(
        command="vqr",
        input=input_,
        output=output,
        grid_size=grid_size,
        backend=backend,
        epsilon=epsilon,
        tol=tol,
        x_query=x_query,
        dump_lp=dump_lp,
        indent=indent,
    )


@cli.command()
@input_opt
@output_opt
@grid_size_opt
@click.option("--levels", callback=levels_handler, help='Explicit levels, "0.1,0.5,0.9" (overrides --grid-size)')
@tol_opt
@indent_opt
@verbose_opt
@quiet_opt
def qr1d(input_, output, grid_size, levels, tol, indent, verbose, quiet):
    """Level-by-level quantile regression, quasi-specification scan and U^QR"""
    configure_logging(verbose - quiet)
    _execute(command="qr1d", input=input_, output=output, grid_size=grid_size, levels=levels, tol=tol, indent=indent)


@cli.command()
@input_opt
@output_opt
@grid_size_opt
@indent_opt
@verbose_opt
@quiet_opt
def equiv(input_, output, grid_size, indent, verbose, quiet):
    """Compare the mean-independence LP with the monotone quantile LP"""
    configure_logging(verbose - quiet)
    _execute(command="equiv", input=input_, output=output, grid_size=grid_size, indent=indent)


@cli.command()
@click.option(
    "--input", "-i", "input_", required=True, type=click.Path(exists=True), help="Solution file or output directory"
)
@verbose_opt
@quiet_opt
def check(input_, verbose, quiet):
    """Re-validate the invariants of a saved solution file"""
    configure_logging(verbose - quiet)
    _execute(command="check", input=input_)


@cli.command()
@click.option("--preset", type=click.Choice(sorted(vqr.PRESETS)), default="specified", show_default=True)
@click.option("--n", "n", default=200, show_default=True, type=int, help="Number of strata of U")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--noise", type=click.Choice(vqr.NOISE_MODES), default="none", show_default=True)
@output_opt
@indent_opt
@verbose_opt
@quiet_opt
def gen(preset, n, seed, noise, output, indent, verbose, quiet):
    """Write a synthetic sample (sample.csv) and its latent truth (truth.json)"""
    configure_logging(verbose - quiet)
    _execute(command="gen", output=output, preset=preset, n=n, seed=seed, noise=noise, indent=indent)
