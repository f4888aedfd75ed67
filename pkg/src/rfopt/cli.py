"""Experiment runner: desk-scale studies over the random-field optimizer.

Subcommands
    sample     draw field realizations and the K-L spectrum
    gradcheck  compare pathwise gradients against finite differences
    optimize   solve one fixed-draw problem and report confidence bands
    converge   replicate optimizations over a sweep of sample sizes

Every output file carries a header with the configuration hash and seed, and
rerunning the same configuration reproduces every file byte for byte.  Exit
codes: 0 success, 1 validation error, 2 numerical failure, 3 solver
non-convergence.

Only the standard library is imported at module scope; the numeric stack is
loaded inside ``main`` after the thread-count environment variables are
pinned, so that BLAS reductions are single-threaded and reproducible.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

from .errors import NumericalError

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2
EXIT_NONCONVERGENCE = 3

GRADCHECK_TOLERANCE = 1e-4

_KERNELS = ("squared-exponential", "exponential", "scaled-nonstationary")

_DEFAULTS = {
    "problem": "variance",
    "method": "scaled",
    "seed": 1,
    "n_samples": 10000,
    "out_dir": "results",
    "kkt_tol": 1e-6,
    "step_tol": 1e-10,
    "max_iter": 200,
    "replications": 200,
    "n_sweep": [100, 400],
    "fd_step": 1e-5,
    "plots": True,
    "jobs": 1,
    "sample": {
        "kernel": "squared-exponential",
        "correlation_length": 0.1,
        "n_points": 101,
        "n_paths": 5,
        "n_modes": None,
        "threshold": 0.99,
        "scale_coefficients": None,
    },
}

# fields that change what is computed, hashed into every output header;
# presentation and scheduling knobs are left out so the same computation
# yields the same bytes wherever and however it is written
_HASH_EXCLUDED = ("out_dir", "plots", "jobs", "trace")


def _config_hash(config: dict) -> str:
    hashed = {k: v for k, v in config.items() if k not in _HASH_EXCLUDED}
    encoded = json.dumps(hashed, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(encoded.encode("utf-8")).hexdigest()


def _require(condition: bool, message: str):
    if not condition:
        raise ValueError(message)


def _is_int(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _is_number(value) -> bool:
    return _is_int(value) or isinstance(value, float)


def _validate_config(config: dict):
    _require(config["problem"] in ("variance", "tolerance"), "problem must be 'variance' or 'tolerance'")
    _require(config["method"] in ("scaled", "eigen"), "method must be 'scaled' or 'eigen'")
    _require(
        not (config["problem"] == "tolerance" and config["method"] == "eigen"),
        "the tolerance surrogate uses the scaled sensitivity route only",
    )
    _require(_is_int(config["seed"]) and 0 <= config["seed"] < 2**64, "seed must be an integer in [0, 2^64)")
    _require(_is_int(config["n_samples"]) and config["n_samples"] >= 1, "n_samples must be a positive integer")
    _require(isinstance(config["out_dir"], str) and config["out_dir"], "out_dir must be a non-empty string")
    for key in ("kkt_tol", "step_tol", "fd_step"):
        _require(_is_number(config[key]) and config[key] > 0, f"{key} must be a positive number")
    _require(_is_int(config["max_iter"]) and config["max_iter"] >= 1, "max_iter must be a positive integer")
    _require(_is_int(config["replications"]) and config["replications"] >= 1, "replications must be a positive integer")
    sweep = config["n_sweep"]
    _require(
        isinstance(sweep, list) and sweep and all(_is_int(n) and n >= 1 for n in sweep),
        "n_sweep must be a non-empty list of positive integers",
    )
    _require(isinstance(config["plots"], bool), "plots must be a boolean")
    _require(_is_int(config["jobs"]) and config["jobs"] >= 1, "jobs must be a positive integer")

    sample = config["sample"]
    _require(sample["kernel"] in _KERNELS, f"sample.kernel must be one of {_KERNELS}")
    _require(
        _is_number(sample["correlation_length"]) and sample["correlation_length"] > 0,
        "sample.correlation_length must be a positive number",
    )
    _require(_is_int(sample["n_points"]) and sample["n_points"] >= 2, "sample.n_points must be an integer >= 2")
    _require(_is_int(sample["n_paths"]) and sample["n_paths"] >= 1, "sample.n_paths must be a positive integer")
    if sample["n_modes"] is not None:
        _require(_is_int(sample["n_modes"]) and sample["n_modes"] >= 1, "sample.n_modes must be a positive integer")
    _require(
        _is_number(sample["threshold"]) and 0 < sample["threshold"] <= 1,
        "sample.threshold must lie in (0, 1]",
    )
    coeffs = sample["scale_coefficients"]
    if coeffs is not None:
        _require(
            isinstance(coeffs, list) and len(coeffs) >= 4 and all(_is_number(c) for c in coeffs),
            "sample.scale_coefficients must be a list of at least 4 numbers",
        )
    if sample["kernel"] == "scaled-nonstationary":
        _require(coeffs is not None, "scaled-nonstationary sampling needs sample.scale_coefficients")


def _merge_section(target: dict, updates: dict, prefix: str):
    for key, value in updates.items():
        _require(key in target, f"unknown config key {prefix}{key!r}")
        if isinstance(target[key], dict) and key == "sample":
            _require(isinstance(value, dict), "sample must be an object")
            _merge_section(target[key], value, "sample.")
        else:
            target[key] = value


def _load_config(args) -> dict:
    config = copy.deepcopy(_DEFAULTS)
    if args.config is not None:
        with open(args.config, "r", encoding="utf-8") as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValueError(f"config file is not valid JSON: {exc}") from exc
        _require(isinstance(raw, dict), "config file must contain a JSON object")
        _merge_section(config, raw, "")
    overrides = {
        "out_dir": args.out,
        "seed": args.seed,
        "n_samples": args.samples,
        "method": args.method,
        "problem": args.problem,
        "fd_step": args.fd_step,
        "jobs": args.jobs,
    }
    for key, value in overrides.items():
        if value is not None:
            config[key] = value
    if args.no_plot:
        config["plots"] = False
    _validate_config(config)
    return config


def _prepare_out(config: dict) -> str:
    """Create the output directory and prove it is writable before computing."""
    out = config["out_dir"]
    os.makedirs(out, exist_ok=True)
    probe = os.path.join(out, ".write-probe")
    with open(probe, "w", encoding="utf-8") as fh:
        fh.write("ok")
    os.remove(probe)
    return out


def _format_value(value) -> str:
    return value if isinstance(value, str) else format(float(value), ".17g")


def _write_csv(path: str, columns, rows, config: dict):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# config_hash={_config_hash(config)} seed={config['seed']}\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_format_value(v) for v in row) + "\n")


def _write_json(path: str, payload: dict, config: dict):
    payload = dict(payload)
    payload["config_hash"] = _config_hash(config)
    payload["seed"] = config["seed"]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _build_sample_model(sample_config: dict):
    from .numerics import SplineField
    from .randomfield import CovarianceModel

    kind = sample_config["kernel"]
    scale = None
    if kind == "scaled-nonstationary":
        import numpy as np

        scale = SplineField(np.asarray(sample_config["scale_coefficients"], dtype=float))
    return CovarianceModel(kind, float(sample_config["correlation_length"]), scale)


def _cmd_sample(config: dict) -> int:
    out = _prepare_out(config)
    import numpy as np

    from .kl import build_kl, draw_realizations, sample_paths
    from .randomfield import Grid1D, assemble_covariance

    sample = config["sample"]
    grid = Grid1D.uniform(sample["n_points"])
    cov = assemble_covariance(_build_sample_model(sample), grid)
    basis = build_kl(cov, threshold=sample["threshold"], n_modes=sample["n_modes"])
    draws = draw_realizations(config["seed"], sample["n_paths"], basis.truncation_level)
    paths = sample_paths(basis, draws)

    columns = ["x"] + [f"path_{i + 1}" for i in range(sample["n_paths"])]
    rows = np.column_stack([grid.points, paths.T])
    _write_csv(os.path.join(out, "realizations.csv"), columns, rows, config)
    spectrum = basis.spectrum()
    _write_csv(
        os.path.join(out, "spectrum.csv"),
        ["mode", "eigenvalue", "cumulative_scatter"],
        spectrum,
        config,
    )
    if config["plots"]:
        from . import plotting

        plotting.save_paths_figure(grid.points, paths, os.path.join(out, "paths.png"))
        plotting.save_spectrum_figure(spectrum, os.path.join(out, "spectrum.png"))
    return EXIT_OK


def _build_problem(config: dict):
    from .problems import (
        ToleranceProblem,
        VarianceProblem,
        build_tolerance_saa,
        build_variance_saa,
    )

    if config["problem"] == "variance":
        problem = VarianceProblem()
        saa, spec = build_variance_saa(
            problem, config["seed"], config["n_samples"], method=config["method"]
        )
    else:
        problem = ToleranceProblem()
        saa, spec = build_tolerance_saa(problem, config["seed"], config["n_samples"])
    spec.kkt_tol = float(config["kkt_tol"])
    spec.step_tol = float(config["step_tol"])
    spec.max_iter = config["max_iter"]
    return problem, saa, spec


def _cmd_gradcheck(config: dict) -> int:
    out = _prepare_out(config)
    import numpy as np

    from .problems import ToleranceProblem, VarianceProblem, build_gradcheck_saa, build_tolerance_saa
    from .saa import evaluate

    if config["problem"] == "variance":
        saa, p0 = build_gradcheck_saa(
            VarianceProblem(),
            config["seed"],
            config["n_samples"],
            method=config["method"],
        )
    else:
        saa, spec = build_tolerance_saa(
            ToleranceProblem(), config["seed"], config["n_samples"]
        )
        p0 = spec.initial_point
    labels = [f"mean_{j + 1}" for j in range(saa.n_mean_params)] + [
        f"sigma_{k + 1}" for k in range(saa.n_sigma_params)
    ]
    pathwise = evaluate(saa, p0).gradient

    h = float(config["fd_step"])
    fd = np.empty_like(pathwise)
    for k in range(p0.size):
        step = np.zeros(p0.size)
        step[k] = h
        fd[k] = (evaluate(saa, p0 + step).value - evaluate(saa, p0 - step).value) / (
            2.0 * h
        )
    rel_err = np.abs(pathwise - fd) / np.maximum(
        1e-12, np.maximum(np.abs(fd), np.abs(pathwise))
    )

    rows = [
        (labels[k], pathwise[k], fd[k], rel_err[k]) for k in range(p0.size)
    ]
    _write_csv(
        os.path.join(out, "gradcheck.csv"),
        ["parameter", "pathwise", "fd", "rel_err"],
        rows,
        config,
    )
    if config["plots"]:
        from . import plotting

        plotting.save_gradcheck_figure(
            rel_err, GRADCHECK_TOLERANCE, os.path.join(out, "gradcheck.png")
        )
    worst = float(rel_err.max())
    if worst > GRADCHECK_TOLERANCE:
        print(
            f"gradient check failed: max rel_err {worst:.3e} > {GRADCHECK_TOLERANCE:.0e}",
            file=sys.stderr,
        )
        return EXIT_NUMERICAL
    return EXIT_OK


def _cmd_optimize(config: dict) -> int:
    out = _prepare_out(config)
    import numpy as np

    from .numerics import SplineField, spline_basis_matrix
    from .problems import analytic_optimum, scaled_route_hessian, variability_metric
    from .saa import evaluate, fd_hessian, inference
    from .sqp import STATUS_CONVERGED, minimize

    problem, saa, spec = _build_problem(config)
    result = minimize(spec)
    estimate = evaluate(saa, result.solution)
    if config["method"] == "eigen":
        hessian = fd_hessian(lambda q: evaluate(saa, q).gradient, result.solution)
    else:
        hessian = scaled_route_hessian(saa, result.solution)
    report = inference(estimate, hessian)

    x = np.linspace(0.0, 1.0, 101)
    fitted = SplineField(result.solution)
    basis_x = spline_basis_matrix(fitted, x)
    sigma_hat = basis_x @ result.solution
    variance = np.einsum("ij,jk,ik->i", basis_x, report.parameter_covariance, basis_x)
    half = 1.96 * np.sqrt(np.maximum(variance, 0.0))
    if config["problem"] == "variance":
        sigma_true = analytic_optimum(problem.weight(x))
    else:
        sigma_true = np.full_like(x, np.nan)
    _write_csv(
        os.path.join(out, "optimum.csv"),
        ["x", "sigma_hat", "sigma_true", "ci_low", "ci_high"],
        np.column_stack([x, sigma_hat, sigma_true, sigma_hat - half, sigma_hat + half]),
        config,
    )
    if config["trace"]:
        _write_csv(
            os.path.join(out, "trace.csv"),
            ["iteration", "value", "step_norm", "kkt_residual", "backtracks"],
            result.history,
            config,
        )

    payload = {
        "problem": config["problem"],
        "method": config["method"],
        "n_samples": config["n_samples"],
        "n_modes": saa.n_modes,
        "status": result.status,
        "iterations": result.iterations,
        "kkt_residual": result.kkt_residual,
        "objective": result.value,
        "objective_variance": report.objective_variance,
        "std_err": [float(v) for v in report.std_err],
        "solution": [float(v) for v in result.solution],
    }
    if config["problem"] == "tolerance":
        volume = variability_metric(fitted, problem.rule)[0]
        payload["budget_residual"] = abs(volume - problem.budget)
    _write_json(os.path.join(out, "report.json"), payload, config)

    if config["plots"]:
        from . import plotting

        plotting.save_optimum_figure(
            x,
            sigma_hat,
            sigma_true,
            sigma_hat - half,
            sigma_hat + half,
            os.path.join(out, "optimum.png"),
        )
        if config["trace"]:
            plotting.save_trace_figure(result.history, os.path.join(out, "trace.png"))

    if result.status != STATUS_CONVERGED:
        print(f"solver did not converge: status {result.status}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    return EXIT_OK


class _ReplicationFailure(Exception):
    def __init__(self, seed: int, n_samples: int, status: str):
        super().__init__(
            f"replication with seed {seed} at N={n_samples} "
            f"did not converge (status {status})"
        )


def _cmd_converge(config: dict) -> int:
    out = _prepare_out(config)
    import numpy as np

    from .numerics import SplineField, spline_eval
    from .problems import VarianceProblem, analytic_optimum, build_variance_saa
    from .saa import optimality_asymptotics_check
    from .sqp import STATUS_CONVERGED, minimize

    if config["problem"] != "variance":
        raise ValueError("the convergence study needs the variance problem's analytic optimum")
    replications = config["replications"]
    if replications < 30:
        raise ValueError("need at least 30 replications")
    n_values = sorted(set(config["n_sweep"]))
    if len(n_values) < 2:
        raise ValueError("need at least two distinct sample sizes in n_sweep")
    if config["seed"] + replications >= 2**64:
        raise ValueError("seed too large for the replication offsets")

    problem = VarianceProblem()
    sigma_true_mid = float(analytic_optimum(problem.weight(0.5)))

    def run_one(task):
        n_samples, replication = task
        seed = config["seed"] + replication
        try:
            saa, spec = build_variance_saa(
                problem, seed, n_samples, method=config["method"]
            )
            spec.kkt_tol = float(config["kkt_tol"])
            spec.step_tol = float(config["step_tol"])
            spec.max_iter = config["max_iter"]
            result = minimize(spec)
        except NumericalError as exc:
            raise NumericalError(
                f"replication with seed {seed} at N={n_samples} failed: {exc}"
            ) from exc
        if result.status != STATUS_CONVERGED:
            raise _ReplicationFailure(seed, n_samples, result.status)
        return float(spline_eval(SplineField(result.solution), 0.5))

    tasks = [(n, r) for n in n_values for r in range(replications)]
    if config["jobs"] > 1:
        with ThreadPoolExecutor(max_workers=config["jobs"]) as pool:
            flat = list(pool.map(run_one, tasks))
    else:
        flat = [run_one(task) for task in tasks]

    optima = {
        n: np.array(flat[i * replications : (i + 1) * replications])
        for i, n in enumerate(n_values)
    }
    for n in n_values:
        errors = optima[n] - sigma_true_mid
        _write_csv(
            os.path.join(out, f"hist_{n}.csv"),
            ["replication", "error"],
            np.column_stack([np.arange(replications), errors]),
            config,
        )
    slope = optimality_asymptotics_check(optima)
    stds = {n: float(optima[n].std(ddof=1)) for n in n_values}
    payload = {
        "method": config["method"],
        "n_values": n_values,
        "replications": replications,
        "slope": slope,
        "std_dev": {str(n): stds[n] for n in n_values},
        "mean_error": {
            str(n): float(np.mean(optima[n]) - sigma_true_mid) for n in n_values
        },
    }
    _write_json(os.path.join(out, "slopes.json"), payload, config)

    if config["plots"]:
        from . import plotting

        for n in n_values:
            plotting.save_histogram_figure(
                optima[n] - sigma_true_mid, n, os.path.join(out, f"hist_{n}.png")
            )
        plotting.save_convergence_figure(
            np.array(n_values, dtype=float),
            np.array([stds[n] for n in n_values]),
            slope,
            os.path.join(out, "convergence.png"),
        )
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    epilog = "config defaults:\n" + json.dumps(_DEFAULTS, indent=2, sort_keys=True)
    parser = argparse.ArgumentParser(
        prog="rfopt",
        description=__doc__,
        epilog=epilog,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    commands = (
        ("sample", "draw field realizations and the K-L spectrum", _cmd_sample),
        ("gradcheck", "compare pathwise gradients against finite differences", _cmd_gradcheck),
        ("optimize", "solve one fixed-draw problem with confidence bands", _cmd_optimize),
        ("converge", "replicate optimizations over a sample-size sweep", _cmd_converge),
    )
    for name, help_text, handler in commands:
        sub = subparsers.add_parser(
            name,
            help=help_text,
            epilog=epilog,
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )
        sub.add_argument("--config", help="JSON config file (see --help epilog for the schema)")
        sub.add_argument("--out", help="output directory")
        sub.add_argument("--seed", type=int, help="base random seed")
        sub.add_argument("--samples", type=int, help="Monte Carlo sample count N")
        sub.add_argument("--method", choices=("scaled", "eigen"), help="sensitivity method")
        sub.add_argument("--problem", choices=("variance", "tolerance"), help="problem selector")
        sub.add_argument("--fd-step", type=float, dest="fd_step", help="finite-difference step for gradcheck")
        sub.add_argument("--jobs", type=int, help="concurrent replications in converge")
        sub.add_argument("--trace", action="store_true", help="write the iteration history CSV")
        sub.add_argument("--no-plot", action="store_true", help="skip PNG rendering")
        sub.set_defaults(handler=handler)
    return parser


def main(argv=None) -> int:
    for var in _THREAD_VARS:
        os.environ[var] = "1"
    args = _build_parser().parse_args(argv)
    try:
        config = _load_config(args)
        config["trace"] = bool(args.trace)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        return args.handler(config)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except _ReplicationFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
