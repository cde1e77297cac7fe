"""
Command-line front end.

Every subcommand writes into --out only: its result files, a manifest.txt
that can be fed back through --config, and logs/run.log. Exit codes:
0 all verdicts pass, 1 a verdict failed, 2 usage or config error,
3 numerical failure.
"""

import os
import timeit
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence

import click
import numpy as np
import pandas as pd

from src.decomposition.cz_decomposition import cz_decompose, cz_verify
from src.errors import CacheError, ConfigError, NumericalFailure, PreconditionError
from src.experiments.estimate_experiments import EXPERIMENTS, ExperimentConfig
from src.experiments.instances import SET_FAMILIES, instance_rng, random_set
from src.experiments.oracles import ball_solution
from src.extract.read_inputs import read_config, read_grid_function, read_indicator, read_weights_cache
from src.grid.grid_core import DESCRIPTORS, GridSpec, dyadic_cube, make_grid, sample_function
from src.load.write_artifacts import (
    RunManifest,
    write_cz_result,
    write_grid_function,
    write_indicator,
    write_manifest,
    write_report,
    write_table,
    write_weights_cache,
)
from src.operators.coefficients import FAMILIES, coefficient_field
from src.operators.kernel_weights import KernelWeights, build_weights, validate_sigma
from src.operators.nonlocal_ops import (
    MINUS,
    PLUS,
    EllipticityParams,
    constant_field,
    eval_sigma_hessian,
    pucci_from_eigenvalues,
)
from src.solver.barrier import DEFAULT_EXPONENTS, barrier_construct
from src.solver.dirichlet_solver import DOMAIN_KINDS, assemble, solve_domain, solve_report
from utils.file_utils import attach_run_log, detach_run_log, ensure_directory, setup_logger

logger = setup_logger(__name__)

######################
#     CONFIGURATION
######################

DEFAULT_HALF_WIDTH = 1.0
BARRIER_HALF_WIDTH = {1: 8.0, 2: 16.0}
WEIGHTS_CACHE_FILE = "weights.cache"
IDENTITY_FAMILY = "identity"
DEFAULT_INSTANCES = {"abp": 100, "potential": 50, "levelset": 30, "weps": 30}
ONESIDED_COMMANDS = ("levelset", "weps")

USAGE_EXIT = 2
NUMERICAL_EXIT = 3


@dataclass
class Outcome:
    passed: bool
    verdicts: Dict[str, bool] = field(default_factory=dict)
    weights_checksum: Optional[str] = None


#########################
#     OPTION HELPERS
#########################


def _check_sigma(ctx, param, value):
    if value is None:
        return value
    try:
        return validate_sigma(value)
    except PreconditionError as e:
        raise click.BadParameter(str(e))


def _parse_floats(ctx, param, value):
    if value is None or isinstance(value, tuple):
        return value
    try:
        return tuple(float(v) for v in str(value).split(",") if v.strip())
    except ValueError:
        raise click.BadParameter(f"expected comma-separated numbers, got {value!r}")


def _check_sigma_list(ctx, param, value):
    values = _parse_floats(ctx, param, value)
    if values is not None:
        for sigma in values:
            _check_sigma(ctx, param, sigma)
    return values


def _load_config(ctx, param, value):
    """Eager: file values become defaults, so explicit flags still win."""
    if value is None:
        return value
    allowed = {p.name for p in ctx.command.params}
    ctx.default_map = {**(ctx.default_map or {}), **read_config(value, allowed)}
    return value


def grid_options(f):
    options = [
        click.option("--config", type=click.Path(dir_okay=False, path_type=Path), is_eager=True,
                     expose_value=True, callback=_load_config, help="key = value file; flags override it."),
        click.option("--dim", type=click.IntRange(1, 2), default=1, show_default=True),
        click.option("--n-cells", type=int, default=256, show_default=True),
        click.option("--half-width", type=float, default=None, help="Box half side."),
        click.option("--exterior-radius", type=float, default=None, help="Defaults to 2 * half width."),
        click.option("--sigma", type=float, default=1.0, show_default=True, callback=_check_sigma),
        click.option("--lambda", "lam", type=float, default=1.0, show_default=True),
        click.option("--Lambda", "Lam", type=float, default=2.0, show_default=True),
        click.option("--seed", type=int, default=0, show_default=True),
        click.option("--out", type=click.Path(file_okay=False, path_type=Path), default=Path("out"), show_default=True),
        click.option("--threads", type=click.IntRange(min=1), default=os.cpu_count() or 1),
    ]
    for option in reversed(options):
        f = option(f)
    return f


def _grid(params: dict, default_half_width: float) -> GridSpec:
    half_width = params["half_width"] if params["half_width"] is not None else default_half_width
    return make_grid(params["dim"], params["n_cells"], half_width, params["exterior_radius"])


def _params(params: dict) -> EllipticityParams:
    return EllipticityParams(params["sigma"], params["lam"], params["Lam"])


def _weights(params: dict, spec: GridSpec) -> KernelWeights:
    cache = params.get("weights_cache")
    if cache is not None:
        return read_weights_cache(cache, spec, params["sigma"])
    return build_weights(spec, params["sigma"])


def _echo_params(params: dict) -> dict:
    return {k: str(v) if isinstance(v, Path) else v for k, v in params.items() if v is not None}


def _execute(ctx: click.Context, work: Callable[[str], Outcome]) -> int:
    """Run a subcommand body with a run log and a manifest that is written even on failure."""
    params = dict(ctx.params)
    out_dir = ensure_directory(Path(params["out"]))
    handler = attach_run_log(out_dir)
    manifest = RunManifest(ctx.info_name, _echo_params(params))
    start_time = timeit.default_timer()
    logger.info(f"--- {ctx.info_name}: writing to {out_dir} ---")
    try:
        outcome = work(manifest.checksum)
        manifest.status = "pass" if outcome.passed else "fail"
        manifest.verdicts = outcome.verdicts
        manifest.weights_checksum = outcome.weights_checksum
        return 0 if outcome.passed else 1
    except Exception as e:
        manifest.status = "error"
        manifest.error = f"{type(e).__name__}: {e}"
        raise
    finally:
        manifest.wall_time = timeit.default_timer() - start_time
        write_manifest(manifest, out_dir)
        detach_run_log(handler)


#####################
#     COMMANDS
#####################


@click.group()
def cli():
    """Numerical nonlocal operators, Dirichlet solves and estimate experiments."""


@cli.command("eval-dsigma")
@grid_options
@click.option("--function", "function_name", type=click.Choice(sorted(DESCRIPTORS)), default="gaussian", show_default=True)
@click.option("--param", type=float, default=1.0, show_default=True, help="Parameter a, c or p of the function.")
@click.option("--input-file", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="Grid function CSV; replaces --function and the grid flags.")
@click.option("--weights-cache", type=click.Path(dir_okay=False, path_type=Path), default=None)
@click.pass_context
def eval_dsigma(ctx, **params):
    """D^sigma u, its trace, nuclear norm and Pucci values on the box nodes."""

    def work(checksum: str) -> Outcome:
        if params["input_file"] is not None:
            u = read_grid_function(params["input_file"])
            spec = u.spec
        else:
            spec = _grid(params, DEFAULT_HALF_WIDTH)
            u = sample_function(spec, DESCRIPTORS[params["function_name"]](params["param"]))
        p = _params(params)
        w = _weights(params, spec)

        hessian = eval_sigma_hessian(u, w)
        upper = np.triu_indices(spec.dim)
        frame = pd.DataFrame({f"x{d}": hessian.nodes[:, d] * spec.h for d in range(spec.dim)})
        for i, j in zip(*upper):
            frame[f"d{i}{j}"] = hessian.matrices[:, i, j]
        frame["trace"] = hessian.trace().values
        frame["nuclear"] = hessian.nuclear().values
        frame["m_plus"] = pucci_from_eigenvalues(hessian.eigenvalues, p, PLUS)
        frame["m_minus"] = pucci_from_eigenvalues(hessian.eigenvalues, p, MINUS)
        write_table(frame, Path(params["out"]) / "dsigma.csv", checksum)

        origin = np.all(hessian.nodes == 0, axis=1)
        click.echo(f"trace D^sigma u(0) = {float(frame['trace'][origin].iloc[0])!r}")
        return Outcome(True, weights_checksum=w.checksum())

    return _execute(ctx, work)


@cli.command("solve")
@grid_options
@click.option("--domain", type=click.Choice(DOMAIN_KINDS), default="ball", show_default=True)
@click.option("--radius", type=float, default=1.0, show_default=True)
@click.option("--coefficient-family", type=click.Choice((IDENTITY_FAMILY,) + FAMILIES),
              default=IDENTITY_FAMILY, show_default=True, help="identity means A = lambda I.")
@click.option("--rhs-constant", type=float, default=1.0, show_default=True)
@click.option("--rhs-file", type=click.Path(dir_okay=False, path_type=Path), default=None)
@click.option("--exterior-file", type=click.Path(dir_okay=False, path_type=Path), default=None)
@click.option("--weights-cache", type=click.Path(dir_okay=False, path_type=Path), default=None)
@click.pass_context
def solve_command(ctx, **params):
    """Solve L_A u = -f in the domain with u = g outside."""

    def work(checksum: str) -> Outcome:
        spec = _grid(params, DEFAULT_HALF_WIDTH)
        p = _params(params)
        w = _weights(params, spec)
        domain = solve_domain(spec, params["domain"], params["radius"])

        if params["coefficient_family"] == IDENTITY_FAMILY:
            A = constant_field(spec, domain.nodes, p.lam * np.eye(spec.dim))
        else:
            A = coefficient_field(spec, domain.nodes, p, params["coefficient_family"], instance_rng(params["seed"], 0))
        system = assemble(A, w, domain, p)

        f = params["rhs_constant"]
        if params["rhs_file"] is not None:
            f = read_grid_function(params["rhs_file"])
        g = read_grid_function(params["exterior_file"]) if params["exterior_file"] is not None else None
        for data in (f, g):
            if hasattr(data, "spec") and data.spec != spec:
                raise PreconditionError("input grid functions must use the grid given by the flags")
        result = solve_report(system, f, g)
        write_grid_function(result.u, Path(params["out"]) / "u.csv", checksum)

        summary = {
            "unknowns": domain.size,
            "residual": result.residual,
            "scale": result.scale,
            "min_offdiagonal": system.certificate.min_offdiagonal,
            "min_margin": system.certificate.min_margin,
        }
        closed_form = (
            params["coefficient_family"] == IDENTITY_FAMILY
            and params["domain"] == "ball"
            and params["radius"] == 1.0
            and g is None
            and params["rhs_file"] is None
        )
        if closed_form:
            v = ball_solution(domain.nodes * spec.h, spec.dim, p.sigma, p.lam, params["rhs_constant"])
            error = np.max(np.abs(result.u.values_at(domain.nodes) - v)) / max(np.max(np.abs(v)), 1e-300)
            summary["ball_relative_error"] = float(error)
            click.echo(f"relative error against the closed-form ball solution: {error:.3e}")
        write_table(pd.DataFrame([summary]), Path(params["out"]) / "solve.csv", checksum)
        return Outcome(
            system.certificate.passed, {"monotone": system.certificate.passed}, w.checksum()
        )

    return _execute(ctx, work)


@cli.command("cz")
@grid_options
@click.option("--alpha", type=str, default="1/2", show_default=True, help="Density threshold, e.g. 1/2 or 0.3.")
@click.option("--set-file", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="Cell set CSV; its header fixes the grid.")
@click.option("--random-cells", type=int, default=None, help="Without --set-file: random cells in B_1/2.")
@click.option("--root-half-side", type=float, default=None, help="Root cube Q(0; r); defaults to the box.")
@click.pass_context
def cz_command(ctx, **params):
    """Calderon-Zygmund decomposition of a cell set with exact verification."""

    def work(checksum: str) -> Outcome:
        try:
            alpha = Fraction(params["alpha"])
        except (ValueError, ZeroDivisionError):
            raise PreconditionError(f"alpha must be a number or fraction, got {params['alpha']!r}")
        if params["set_file"] is not None:
            E = read_indicator(params["set_file"])
        else:
            spec = _grid(params, DEFAULT_HALF_WIDTH)
            count = params["random_cells"] or max(1, spec.n_cells**spec.dim // 64)
            E = random_set(spec, instance_rng(params["seed"], 0), "random-cells", count)
        spec = E.spec
        root = None
        if params["root_half_side"] is not None:
            root = dyadic_cube(spec, (0.0,) * spec.dim, params["root_half_side"])

        result = cz_decompose(E, alpha, root)
        verification = cz_verify(result, E, alpha)
        out = Path(params["out"])
        write_cz_result(result, out / "cz.csv", checksum)
        write_indicator(E, out / "set.csv", checksum)
        click.echo(
            f"{len(result.kept)} kept cubes, {len(result.predecessors)} predecessors, "
            f"verification {'passed' if verification.passed else 'FAILED'}"
        )
        return Outcome(verification.passed, dict(vars(verification)))

    return _execute(ctx, work)


@cli.command("barrier")
@grid_options
@click.option("--exponents", type=str, default=",".join(f"{q:g}" for q in DEFAULT_EXPONENTS),
              show_default=True, callback=_parse_floats)
@click.pass_context
def barrier_command(ctx, **params):
    """Construct and certify the barrier; box half width defaults to 8 (1D) or 16 (2D)."""

    def work(checksum: str) -> Outcome:
        spec = _grid(params, BARRIER_HALF_WIDTH[params["dim"]])
        w = build_weights(spec, params["sigma"])
        certificate = barrier_construct(spec, _params(params), w, params["exponents"])
        out = Path(params["out"])
        write_grid_function(certificate.phi, out / "phi.csv", checksum)
        write_grid_function(certificate.psi, out / "psi.csv", checksum)
        sweep = pd.DataFrame(
            {"exponent": list(certificate.slack_by_exponent), "min_slack": list(certificate.slack_by_exponent.values())}
        )
        sweep["chosen"] = sweep["exponent"] == certificate.exponent
        write_table(sweep, out / "barrier.csv", checksum)
        click.echo(f"barrier q={certificate.exponent:g}, C_phi={certificate.c_phi:.6e}, slack={certificate.min_slack:.3e}")
        verdicts = {
            "min_slack": certificate.min_slack >= -1e-8,
            "c_phi_positive": certificate.c_phi > 0.0,
            "support": certificate.support_ok,
        }
        return Outcome(certificate.passed, verdicts, w.checksum())

    return _execute(ctx, work)


@cli.command("weights-cache")
@grid_options
@click.pass_context
def weights_cache_command(ctx, **params):
    """Build the kernel weights, write them to weights.cache and verify the reload."""

    def work(checksum: str) -> Outcome:
        spec = _grid(params, DEFAULT_HALF_WIDTH)
        w = build_weights(spec, params["sigma"])
        path = write_weights_cache(w, Path(params["out"]) / WEIGHTS_CACHE_FILE)
        reloaded = read_weights_cache(path, spec, params["sigma"])
        click.echo(f"{len(w.offsets)} offsets, checksum {reloaded.checksum()}")
        return Outcome(True, {"reload_checksum": reloaded.checksum() == w.checksum()}, w.checksum())

    return _execute(ctx, work)


def _experiment_command(name: str, help_text: str):
    @grid_options
    @click.option("--sigma-list", type=str, default=None, callback=_check_sigma_list,
                  help="Comma-separated sigmas; defaults to --sigma.")
    @click.option("--instances", type=click.IntRange(min=1), default=DEFAULT_INSTANCES.get(name, 1), show_default=True)
    @click.option("--coefficient-family", type=click.Choice(FAMILIES), default="random-rotation", show_default=True)
    @click.option("--set-family", type=click.Choice(SET_FAMILIES), default="random-cells", show_default=True)
    @click.option("--betas", type=str, default="0.5", show_default=True, callback=_parse_floats)
    @click.pass_context
    def command(ctx, **params):
        def work(checksum: str) -> Outcome:
            cfg = ExperimentConfig(
                seed=params["seed"],
                dim=params["dim"],
                n_cells=params["n_cells"],
                sigmas=params["sigma_list"] or (params["sigma"],),
                lam=params["lam"],
                Lam=params["Lam"],
                instance_count=params["instances"],
                coefficient_family=params["coefficient_family"],
                set_family=params["set_family"],
                betas=params["betas"],
                half_width=params["half_width"],
                exterior_radius=params["exterior_radius"],
                threads=params["threads"],
                onesided=params.get("onesided", False),
                out_dir=Path(params["out"]),
            )
            report = EXPERIMENTS[name](cfg)
            write_report(report, cfg.out_dir, checksum)
            click.echo(f"{name}: {'PASS' if report.passed else 'FAIL'} ({len(report.verdicts)} verdicts)")
            for key in report.failed():
                click.echo(f"  failed {key}: {report.rules[key]}")
            return Outcome(report.passed, report.verdicts)

        return _execute(ctx, work)

    if name in ONESIDED_COMMANDS:
        command = click.option(
            "--onesided", is_flag=True, default=False,
            help="Also rebuild A from M- u <= f+ and M+ u >= -f- and rerun the estimate.",
        )(command)
    command.__doc__ = help_text
    return cli.command(name)(command)


_experiment_command("abp", "ABP constant: -inf u against the sup/L^n bound on f.")
_experiment_command("potential", "Potential estimate: inf u over B_1/2 against |E|, and the cube lemma.")
_experiment_command("levelset", "Level-set tail of |D^sigma u| for rough coefficients.")
_experiment_command("weps", "Level-set run plus the L^eps norms over a sweep of eps.")
_experiment_command("localize", "Localization constants for the cutoff eta.")


#####################
#     DISPATCH
#####################


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """Run the command line and map failures to exit codes."""
    try:
        code = cli.main(args=None if argv is None else list(argv), prog_name="estimates", standalone_mode=False)
    except click.ClickException as e:
        e.show()
        return USAGE_EXIT
    except click.Abort:
        click.echo("Aborted.", err=True)
        return 1
    except (ConfigError, CacheError, PreconditionError, FileNotFoundError) as e:
        logger.error(f"Usage error: {e}")
        click.echo(f"Error: {e}", err=True)
        return USAGE_EXIT
    except NumericalFailure as e:
        logger.error(f"Numerical failure: {e}")
        click.echo(f"Numerical failure: {e}", err=True)
        return NUMERICAL_EXIT
    return code if isinstance(code, int) else 0
