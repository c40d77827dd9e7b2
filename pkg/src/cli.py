"""
CLI - solve, study and adapt commands for the optimal control solver
"""

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd

from src.adapt import adaptive_loop
from src.assembly import (
    assemble_control_coupling,
    assemble_diffusion,
    assemble_divergence,
    assemble_velocity_mass,
    coercivity_probe,
    inf_sup_probe,
    poincare_probe,
    write_coo,
)
from src.config import METHODS, RunConfig, load_config_file, load_problem_file
from src.errors import InvalidArgumentError, SolverError
from src.estimator import estimate
from src.mesh import Triangulation, generate_lshape, generate_unit_square, write_mesh
from src.optctrl import ProblemSpec, build_spaces, cost, solve_optimality
from src.report_generator import ReportGenerator
from src.utils import atomic_write_text
from src.verify import CASES, ManufacturedCase, error_norms, error_table, eoc, neumann_demo, run_level

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_SOLVER = 3

PROBE_DOF_LIMIT = 5000


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stokes-optctrl",
        description="Control-constrained optimal control of Stokes flow with CR and DG elements",
    )
    parser.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    parser.add_argument("--quiet", "-q", action="store_true", help="warnings only")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser):
        p.add_argument("--config", help="key=value config file; flags override it")
        p.add_argument("--problem", help="ex1, ex2, neumann or a problem file")
        p.add_argument("--method", choices=METHODS)
        p.add_argument("--sigma", type=float, help="DG penalty parameter")
        p.add_argument("--lam", type=float, help="regularization weight")
        p.add_argument("--ya", type=float, help="lower control bound")
        p.add_argument("--yb", type=float, help="upper control bound")
        p.add_argument("--n", type=int, help="squares per unit length of the initial mesh")
        p.add_argument("--output-dir", dest="output_dir")
        p.add_argument("--seed", type=int)
        p.add_argument("--error-order", dest="error_order", type=int)
        p.add_argument("--pdf", action="store_true", default=None, help="also write a PDF summary")

    solve = sub.add_parser("solve", help="single solve on one mesh")
    common(solve)
    solve.add_argument("--dump-mesh", dest="dump_mesh", action="store_true", default=None)
    solve.add_argument("--dump-matrices", dest="dump_matrices", action="store_true", default=None)
    solve.add_argument("--dump-solution", dest="dump_solution", action="store_true", default=None)
    solve.add_argument("--dump-indicators", dest="dump_indicators", action="store_true", default=None)
    solve.add_argument("--probes", action="store_true", default=None)

    study = sub.add_parser("study", help="uniform convergence study with an error table")
    common(study)
    study.add_argument("--levels", type=int)
    study.add_argument("--parallel", action="store_true", default=None)

    adapt = sub.add_parser("adapt", help="adaptive and uniform convergence histories")
    common(adapt)
    adapt.add_argument("--theta", type=float)
    adapt.add_argument("--max-ndof", dest="max_ndof", type=int)
    adapt.add_argument("--uniform", action="store_true", default=None, help="uniform refinement only")
    return parser


def configure_logging(verbose: bool, quiet: bool):
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


def resolve_problem(config: RunConfig) -> Tuple[ProblemSpec, Optional[ManufacturedCase], str]:
    """
    Returns:
        (problem data, manufactured case or None, domain name)
    """
    if config.problem in CASES:
        case = CASES[config.problem](*config.control_parameters())
        return case.problem_spec(), case, case.domain
    if config.problem == "neumann":
        return neumann_demo(*config.control_parameters()), None, "square"
    custom = load_problem_file(config.problem)
    # flags and config-file values win over the problem file
    lam, ya, yb = config.control_parameters(custom.lam, custom.ya, custom.yb)
    spec = ProblemSpec(
        kind=custom.kind,
        f=custom.f,
        u_d=custom.u_d,
        lam=lam,
        ya=ya,
        yb=yb,
        domain=custom.domain,
        name=os.path.basename(config.problem),
    )
    return spec, None, custom.domain


def make_mesh(domain: str, n: int) -> Triangulation:
    return generate_unit_square(n) if domain == "square" else generate_lshape(n)


def write_vector(values: np.ndarray, path: str) -> str:
    """Count on the first line, then one value per line"""
    lines = [str(len(values))] + [f"{v:.17g}" for v in values]
    return atomic_write_text(path, "\n".join(lines) + "\n")


def _run_name(config: RunConfig) -> str:
    problem = os.path.splitext(os.path.basename(config.problem))[0]
    return f"{problem}_{config.method}"


def cmd_solve(config: RunConfig) -> int:
    """Single solve with optional dumps and stability probes"""
    method_config = config.method_config()
    spec, case, domain = resolve_problem(config)
    mesh = make_mesh(domain, config.n)
    sol = solve_optimality(spec, mesh, method_config)
    indicators = estimate(sol, spec, mesh, method_config)
    out = config.output_dir
    name = _run_name(config)

    print(f"problem {spec.name} ({spec.kind}), method {config.method}, n={config.n}")
    print(f"Ndof {sol.ndof}, PDAS iterations {sol.iterations}, KKT residual {sol.kkt_residual:.3e}")
    print(f"active lower {int(sol.active_lower.sum())}, upper {int(sol.active_upper.sum())}")
    print(f"estimator {indicators.total:.6e}, cost {cost(sol, spec, method_config.error_order):.6e}")
    if case is not None:
        for key, value in error_norms(sol, case, mesh, method_config).as_dict().items():
            print(f"{key} {value:.6e}")

    if config.dump_mesh:
        write_mesh(mesh, os.path.join(out, f"{name}_mesh.txt"))
    if config.dump_solution:
        for field_name in ("u_h", "p_h", "phi_h", "r_h", "y_h"):
            write_vector(getattr(sol, field_name).coeffs, os.path.join(out, f"{name}_{field_name}.txt"))
    if config.dump_indicators:
        indicators.to_csv(os.path.join(out, f"{name}_indicators.csv"))
    vel, pres, ctrl = build_spaces(spec, mesh, config.method, sol.u_h.space.topology)
    if config.dump_matrices:
        matrices = {
            "A": assemble_diffusion(vel, config.sigma, spec.is_neumann),
            "B": assemble_divergence(vel, pres, spec.is_neumann),
            "M": assemble_velocity_mass(vel),
            "C": assemble_control_coupling(vel, ctrl),
        }
        for key, matrix in matrices.items():
            write_coo(matrix, os.path.join(out, f"{name}_{key}.coo"))
    if config.probes:
        if vel.dof_count > PROBE_DOF_LIMIT:
            logger.warning("skipping probes: %d velocity dofs exceed %d", vel.dof_count, PROBE_DOF_LIMIT)
        else:
            rng = np.random.default_rng(config.seed)
            probes = [
                coercivity_probe(vel, config.sigma, spec.is_neumann, rng=rng),
                inf_sup_probe(vel, pres, config.sigma, spec.is_neumann),
                poincare_probe(vel, config.sigma, spec.is_neumann, rng=rng),
            ]
            for probe in probes:
                status = "pass" if probe.passed else "FAIL"
                print(f"probe {probe.name}: sampled {probe.sample_value:.6g}, exact {probe.exact_value:.6g} [{status}]")
    return EXIT_OK


def cmd_study(config: RunConfig) -> int:
    """Uniform refinement study n, 2n, 4n, ... with the error table"""
    if config.problem not in CASES:
        raise InvalidArgumentError(f"study needs a manufactured case (ex1 or ex2), got {config.problem!r}.")
    method_config = config.method_config()
    case = CASES[config.problem](*config.control_parameters())
    sizes = [config.n * 2 ** k for k in range(config.levels)]

    def level(n: int):
        logger.info("study level n=%d", n)
        return run_level(case, n, method_config)

    if config.parallel:
        with ThreadPoolExecutor() as pool:
            results = list(pool.map(level, sizes))
    else:
        results = [level(n) for n in sizes]

    hs = [mesh.h for mesh, _, _ in results]
    records = [errors for _, _, errors in results]
    table = error_table(hs, records)
    reports = ReportGenerator(config.output_dir)
    name = _run_name(config)
    reports.write_csv(table, f"study_{name}.csv")
    print(reports.format_table(table))
    if config.pdf:
        metadata = _metadata(config, case.problem_spec())
        reports.write_pdf(table, f"study_{name}.pdf", f"Convergence study: {name}", metadata)
    return EXIT_OK


def cmd_adapt(config: RunConfig) -> int:
    """Adaptive and uniform histories plus a plot script"""
    method_config = config.method_config()
    spec, case, domain = resolve_problem(config)
    initial = make_mesh(domain, config.n)
    reports = ReportGenerator(config.output_dir)
    name = _run_name(config)
    curves = {}
    frames: List[Tuple[str, pd.DataFrame]] = []

    runs = [("uniform", True)] if config.uniform else [("adaptive", False), ("uniform", True)]
    for label, uniform in runs:
        history = adaptive_loop(
            spec,
            method_config,
            theta=config.theta,
            max_ndof=config.max_ndof,
            case=case,
            initial_mesh=initial,
            uniform=uniform,
        )
        csv_name = f"adapt_{name}_{label}.csv"
        reports.write_history(history, csv_name)
        curves[label] = csv_name
        frame = history.to_frame()
        frames.append((label, frame))
        print(f"{label} refinement")
        print(reports.format_table(frame))
        if len(frame) > 1:
            rate = eoc(frame, "eta_total", "Ndof")[-1]
            print(f"final estimator rate wrt Ndof: {rate:.3f}")

    reports.write_plot_script(curves, f"adapt_{name}_plot.py", f"Convergence history: {name}")
    if config.pdf:
        label, frame = frames[0]
        reports.write_pdf(frame, f"adapt_{name}.pdf", f"{label.title()} refinement: {name}", _metadata(config, spec))
    return EXIT_OK


def _metadata(config: RunConfig, spec: ProblemSpec) -> dict:
    return {
        "problem": config.problem,
        "method": config.method,
        "sigma": config.sigma,
        "lam": spec.lam,
        "bounds": f"[{spec.ya.tolist()}, {spec.yb.tolist()}]",
        "n": config.n,
    }


COMMANDS = {"solve": cmd_solve, "study": cmd_study, "adapt": cmd_adapt}


def main(argv: Optional[List[str]] = None) -> int:
    """
    Parse arguments and run a command

    Returns:
        0 on success, 2 for invalid configuration or IO failures, 3 for solver failures
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose, args.quiet)
    try:
        overrides = {k: v for k, v in vars(args).items() if k not in ("config", "verbose", "quiet")}
        config = RunConfig.from_sources(load_config_file(args.config), overrides)
        return COMMANDS[config.command](config)
    except (InvalidArgumentError, OSError) as e:
        logger.error("%s", e)
        return EXIT_INVALID
    except SolverError as e:
        logger.error("solver failure: %s", e)
        return EXIT_SOLVER
