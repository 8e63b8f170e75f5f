"""
Command-line front-end for ScatterLab.

Subcommands:
    estimate            sample the configured model and run the M-estimator
    spectrum            deterministic-equivalent density on the configured grid
    experiment          ||C_hat - S_hat|| across sizes and seeds
    reproduce-figure    data behind the three reference figures
    check               advisory model-assumption report

Exit codes: 0 success, 2 non-convergence, 1 configuration or model error.
"""

import argparse
import logging
import logging.config
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.integrate import cumulative_trapezoid

from config import ConfigError, ExperimentConfig, config, load_experiment_config, parse_experiment_config
from estimator import EstimatorError, estimate, estimate_matrix_iteration, sample_covariance, spectral_norm
from models import ConvergenceRow, EstimatorConfig, HistogramData, SpectralDensity, WeightSpec
from rmt import QuadratureError, SolverError, build_equivalent, density_on_grid, solve_gamma
from sampling import (
    ModelError, ScatterModel, TauDistribution, block_scatter, check_assumptions, sample
)
from storage import ResultStore, StorageError
from weights import WeightError, WeightFunction, make_weight

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NOT_CONVERGED = 2

HISTOGRAM_BINS = 100
# Density mass accepted by ks_distance before renormalization
KS_MASS_RANGE = (0.9, 1.1)
FIGURE_SIZE = (500, 2500)


# ---------------------------------------------------------------------------
# Histogram and distances
# ---------------------------------------------------------------------------

def histogram(values: Sequence[float], bins: Union[int, Sequence[float]] = HISTOGRAM_BINS) -> HistogramData:
    """Density-normalized histogram; explicit edges must be equally spaced."""
    values = np.asarray(values, dtype=float).ravel()
    if values.size == 0:
        raise ValueError("histogram needs at least one value")
    if np.ndim(bins) == 0:
        if int(bins) < 1:
            raise ValueError("histogram needs bins >= 1")
        counts, edges = np.histogram(values, bins=int(bins))
    else:
        edges = np.asarray(bins, dtype=float)
        widths = np.diff(edges)
        if edges.size < 2 or np.any(widths <= 0) or not np.allclose(widths, widths[0], rtol=1e-9):
            raise ValueError("explicit histogram edges must be increasing and equally spaced")
        counts, edges = np.histogram(values, bins=edges)
    total = counts.sum()
    if total == 0:
        raise ValueError("no values fall inside the histogram edges")
    width = float(edges[1] - edges[0])
    return HistogramData(bin_centers=0.5 * (edges[:-1] + edges[1:]),
                         frequencies=counts / (total * width),
                         bin_width=width)


def density_cdf(density: SpectralDensity) -> np.ndarray:
    """Trapezoidal CDF of the density on its grid, renormalized to end at one."""
    cdf = cumulative_trapezoid(density.values, density.grid, initial=0.0)
    return cdf / cdf[-1]


def ks_distance(eigs: Sequence[float], density: SpectralDensity) -> float:
    """Sup distance between the empirical CDF of eigs and the CDF of density."""
    eigs = np.sort(np.asarray(eigs, dtype=float).ravel())
    if eigs.size == 0:
        raise ValueError("ks_distance needs at least one eigenvalue")
    if not KS_MASS_RANGE[0] <= density.mass <= KS_MASS_RANGE[1]:
        raise ValueError(f"density mass {density.mass:.4f} outside {KS_MASS_RANGE}")
    model_cdf = np.interp(eigs, density.grid, density_cdf(density), left=0.0, right=1.0)
    k = np.arange(1, eigs.size + 1)
    above = np.max(k / eigs.size - model_cdf)
    below = np.max(model_cdf - (k - 1) / eigs.size)
    return float(np.clip(max(above, below), 0.0, 1.0))


# ---------------------------------------------------------------------------
# Building blocks from an experiment document
# ---------------------------------------------------------------------------

def figure_config(which: int, N: int = FIGURE_SIZE[0], n: int = FIGURE_SIZE[1]) -> ExperimentConfig:
    """Reference-figure parameters: C = diag(I, 3I, 10I) in 1/4, 1/4, 1/2 blocks,
    Gamma(.5, 2) textures, alpha = 0.1, density on [0, 2.5] with step 0.005."""
    if which not in (1, 2, 3):
        raise ValueError(f"figure must be 1, 2 or 3, got {which}")
    return parse_experiment_config({
        'model': {
            'N': N, 'n': n,
            'scatter': {'kind': 'blocks', 'values': [1.0, 3.0, 10.0], 'proportions': [0.25, 0.25, 0.5]},
            'tau': {'kind': 'gamma', 'shape': 0.5, 'scale': 2.0}
        },
        'weight': {'family': 'student-type', 'alpha': 0.1},
        'density': {'lo': 0.0, 'hi': 2.5, 'step': 0.005, 'eta': 1e-4}
    })


def build_tau(cfg: ExperimentConfig) -> TauDistribution:
    tau = cfg.model.tau
    if tau.kind == 'constant':
        return TauDistribution.constant(tau.value)
    if tau.kind == 'gamma':
        return TauDistribution.gamma(tau.shape, tau.scale)
    if tau.kind == 'inverse-chi-square':
        return TauDistribution.inverse_chi_square(tau.dof)
    return TauDistribution.empirical(tau.values)


def build_model(cfg: ExperimentConfig) -> ScatterModel:
    """Population model described by the document's model section."""
    section = cfg.model
    scatter = section.scatter
    if scatter.kind == 'identity':
        C = np.eye(section.N)
    elif scatter.kind == 'diagonal':
        if len(scatter.values) != section.N:
            raise ModelError(f"diagonal scatter needs {section.N} values, got {len(scatter.values)}")
        C = np.diag(scatter.values)
    else:
        C = block_scatter(section.N, scatter.values, scatter.proportions)
    return ScatterModel(N=section.N, n=section.n, C=C, tau=build_tau(cfg), N_bar=section.N_bar)


def build_weight(cfg: ExperimentConfig) -> WeightFunction:
    return make_weight(WeightSpec(family=cfg.weight.family, alpha=cfg.weight.alpha), cfg.c)


def build_estimator_config(cfg: ExperimentConfig) -> EstimatorConfig:
    section = cfg.estimator
    return EstimatorConfig(tol=section.tol, max_iter=section.max_iter, init=section.init, route=section.route)


def density_grid(cfg: ExperimentConfig) -> np.ndarray:
    section = cfg.density
    count = int(round((section.hi - section.lo) / section.step)) + 1
    return np.linspace(section.lo, section.lo + (count - 1) * section.step, count)


def equivalent_density(cfg: ExperimentConfig, model: ScatterModel, w: WeightFunction,
                       taus: np.ndarray) -> Tuple[float, SpectralDensity]:
    """gamma_N from the realized textures and the density of the equivalent measure."""
    gamma = solve_gamma(taus, model.c, w).gamma
    density = density_on_grid(density_grid(cfg), cfg.density.eta, taus, gamma, model.eig_C, model.c, w)
    return gamma, density


# ---------------------------------------------------------------------------
# Figures
# ---------------------------------------------------------------------------

def _write_spectrum(store: ResultStore, prefix: str, fmt: str, eigs: np.ndarray,
                    hist: HistogramData, density: Optional[SpectralDensity]) -> List[str]:
    if fmt == 'json':
        document = {'eigenvalues': [float(v) for v in eigs], 'histogram': hist.to_dict()}
        if density is not None:
            document['density'] = density.to_dict()
        return [store.write_json(f"{prefix}.json", document)]

    files = [
        store.write_eigenvalues(f"{prefix}_eigenvalues.csv", eigs),
        store.write_table(f"{prefix}_histogram.csv",
                          [{'bin_center': x, 'frequency': f}
                           for x, f in zip(hist.bin_centers, hist.frequencies)])
    ]
    if density is not None:
        files.append(store.write_density(f"{prefix}_density.csv", density))
    return files


def reproduce_figure(which: int, seed: int = 0, output_dir: str = config.output_dir,
                     N: int = FIGURE_SIZE[0], n: int = FIGURE_SIZE[1], fmt: str = 'csv') -> Dict[str, Any]:
    """Emit the data behind one reference figure and return its metrics.

    1: eigenvalues of C_hat with the equivalent density; 2: the same for S_hat;
    3: eigenvalues of the sample covariance alone, no model curve.
    """
    cfg = figure_config(which, N, n)
    model = build_model(cfg)
    w = build_weight(cfg)
    s = sample(model, seed)
    store = _open_store(output_dir)
    prefix = f"figure{which}_seed{seed}"
    summary: Dict[str, Any] = {'figure': which, 'seed': seed, 'model': model.to_dict(), 'converged': True}

    density = None
    if which == 1:
        result = estimate(s, w, build_estimator_config(cfg))
        eigs = result.eigenvalues
        summary.update(converged=result.converged, iterations=result.iterations, residual=result.residual)
        gamma, density = equivalent_density(cfg, model, w, s.taus)
    elif which == 2:
        gamma, density = equivalent_density(cfg, model, w, s.taus)
        eigs = np.linalg.eigvalsh(build_equivalent(s, gamma, w))
    else:
        eigs = np.linalg.eigvalsh(sample_covariance(s))
        summary['note'] = "sample covariance histogram only; its deterministic equivalent is not computed"

    hist = histogram(eigs)
    summary['lambda_max'] = float(eigs[-1])
    if density is not None:
        summary.update(gamma=gamma, mass=density.mass,
                       support=[[a, b] for a, b in density.support],
                       support_count=len(density.support),
                       ks=ks_distance(eigs, density))

    files = _write_spectrum(store, prefix, fmt, eigs, hist, density)
    files.append(store.write_json(f"{prefix}_summary.json", summary))
    summary['files'] = files
    logger.info(f"Figure {which} (seed {seed}) written to {output_dir}")
    return summary


# ---------------------------------------------------------------------------
# Convergence experiment
# ---------------------------------------------------------------------------

def _convergence_cell(document: Dict[str, Any], N: int, n: int, seed: int) -> ConvergenceRow:
    """One (size, seed) cell; takes a plain document so it can run in a worker process."""
    document = dict(document)
    document['model'] = dict(document['model'], N=N, n=n)
    cfg = parse_experiment_config(document)
    model = build_model(cfg)
    w = build_weight(cfg)
    s = sample(model, seed)
    try:
        result = estimate_matrix_iteration(s, w, build_estimator_config(cfg))
        gamma = solve_gamma(s.taus, model.c, w).gamma
    except (EstimatorError, SolverError) as e:
        logger.error(f"Cell N={N}, n={n}, seed={seed} failed: {str(e)}")
        return ConvergenceRow(N=N, n=n, seed=seed, norm_gap=float('nan'), relative_gap=float('nan'),
                              gamma=float('nan'), iterations=0, converged=False)
    gap = spectral_norm(result.C_hat - build_equivalent(s, gamma, w))
    return ConvergenceRow(N=N, n=n, seed=seed, norm_gap=gap,
                          relative_gap=gap / spectral_norm(result.C_hat),
                          gamma=gamma, iterations=result.iterations, converged=result.converged)


def summarize_convergence(rows: List[ConvergenceRow]) -> List[Dict[str, Any]]:
    """Median and quartiles of the gaps per size."""
    summary = []
    for N, n in sorted({(row.N, row.n) for row in rows}):
        cell = [row for row in rows if (row.N, row.n) == (N, n)]
        gaps = np.array([row.norm_gap for row in cell])
        relative = np.array([row.relative_gap for row in cell])
        q1, median, q3 = np.nanpercentile(gaps, [25, 50, 75])
        summary.append({
            'N': N, 'n': n, 'reps': len(cell),
            'converged': sum(row.converged for row in cell),
            'median': float(median), 'q1': float(q1), 'q3': float(q3),
            'relative_median': float(np.nanmedian(relative))
        })
    return summary


def run_convergence_experiment(cfg: ExperimentConfig, sizes: Optional[Sequence[Sequence[int]]] = None,
                               reps: Optional[int] = None,
                               workers: Optional[int] = None) -> Tuple[List[ConvergenceRow], List[Dict[str, Any]]]:
    """||C_hat - S_hat|| for every size and seed; seeds are cfg.seeds[0] + r for r < reps."""
    sizes = [tuple(size) for size in (sizes if sizes is not None else cfg.experiment.sizes)]
    reps = reps if reps is not None else cfg.experiment.reps
    workers = workers if workers is not None else config.workers
    if not sizes or any(len(size) != 2 for size in sizes):
        raise ValueError("sizes must be a non-empty list of (N, n) pairs")
    ratios = [N / n for N, n in sizes]
    if max(ratios) - min(ratios) > 1e-12:
        raise ValueError(f"all sizes must share the same aspect ratio, got {ratios}")

    document = cfg.model_dump()
    seeds = [cfg.seeds[0] + r for r in range(reps)]
    cells = [(N, n, seed) for N, n in sizes for seed in seeds]
    logger.info(f"Convergence experiment: {len(sizes)} sizes x {reps} reps, {workers} worker(s)")

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_convergence_cell, document, N, n, seed) for N, n, seed in cells]
            rows = [future.result() for future in futures]
    else:
        rows = [_convergence_cell(document, N, n, seed) for N, n, seed in cells]

    return rows, summarize_convergence(rows)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _load(args: argparse.Namespace) -> ExperimentConfig:
    if not args.config:
        raise ConfigError(f"{args.command} needs --config")
    cfg = load_experiment_config(args.config)
    updates: Dict[str, Any] = {}
    if args.seed is not None:
        updates['seeds'] = [args.seed]
    if args.out:
        updates['output_dir'] = args.out
    if args.format:
        updates['format'] = args.format
    return cfg.model_copy(update=updates) if updates else cfg


def _open_store(output_dir: str) -> ResultStore:
    store = ResultStore(output_dir)
    if not store.health_check():
        raise StorageError(f"Output directory {output_dir} is not writable")
    return store


def cmd_estimate(args: argparse.Namespace) -> int:
    cfg = _load(args)
    model = build_model(cfg)
    w = build_weight(cfg)
    store = _open_store(cfg.output_dir)
    converged = True
    for seed in cfg.seeds:
        s = sample(model, seed)
        result = estimate(s, w, build_estimator_config(cfg))
        converged = converged and result.converged
        document = {'model': model.to_dict(), 'weight': repr(w), 'seed': seed, 'estimate': result.to_dict()}
        store.write_json(f"estimate_seed{seed}.json", document)
        if args.dump_sample:
            store.write_sample(f"sample_seed{seed}.csv", s.X, s.taus)
        if cfg.format == 'csv':
            store.write_eigenvalues(f"estimate_seed{seed}_eigenvalues.csv", result.eigenvalues)
    return EXIT_OK if converged else EXIT_NOT_CONVERGED


def cmd_spectrum(args: argparse.Namespace) -> int:
    cfg = _load(args)
    model = build_model(cfg)
    w = build_weight(cfg)
    store = _open_store(cfg.output_dir)
    for seed in cfg.seeds:
        s = sample(model, seed)
        gamma, density = equivalent_density(cfg, model, w, s.taus)
        if cfg.format == 'csv':
            store.write_density(f"density_seed{seed}.csv", density)
            store.write_json(f"density_seed{seed}_summary.json",
                             {'seed': seed, 'gamma': gamma, 'eta': density.eta, 'mass': density.mass,
                              'support': [[a, b] for a, b in density.support]})
        else:
            store.write_json(f"density_seed{seed}.json", dict(density.to_dict(), seed=seed, gamma=gamma))
    return EXIT_OK


def cmd_experiment(args: argparse.Namespace) -> int:
    cfg = _load(args)
    rows, summary = run_convergence_experiment(cfg)
    store = _open_store(cfg.output_dir)
    if cfg.format == 'csv':
        store.write_table("convergence.csv", [row.to_dict() for row in rows])
        store.write_table("convergence_summary.csv", summary)
    else:
        store.write_json("convergence.json", {'rows': [row.to_dict() for row in rows], 'summary': summary})
    return EXIT_OK if all(row.converged for row in rows) else EXIT_NOT_CONVERGED


def cmd_reproduce_figure(args: argparse.Namespace) -> int:
    output_dir = args.out or config.output_dir
    summary = reproduce_figure(args.which, seed=args.seed if args.seed is not None else 0,
                               output_dir=output_dir, N=args.N, n=args.n, fmt=args.format or 'csv')
    return EXIT_OK if summary['converged'] else EXIT_NOT_CONVERGED


def cmd_check(args: argparse.Namespace) -> int:
    cfg = _load(args)
    model = build_model(cfg)
    w = build_weight(cfg)
    seed = cfg.seeds[0]
    report = check_assumptions(model, w, sample(model, seed))
    _open_store(cfg.output_dir).write_json(f"assumptions_seed{seed}.json", report.to_dict())
    return EXIT_ERROR if report.status == 'fail' else EXIT_OK


COMMANDS = {
    'estimate': cmd_estimate,
    'spectrum': cmd_spectrum,
    'experiment': cmd_experiment,
    'reproduce-figure': cmd_reproduce_figure,
    'check': cmd_check,
}


def handle_error(error: Exception) -> int:
    """Map a failure to its exit code."""
    if isinstance(error, (SolverError, QuadratureError)):
        logger.error(f"Solver did not converge: {str(error)}")
        return EXIT_NOT_CONVERGED
    if isinstance(error, (ConfigError, ModelError, WeightError, EstimatorError, StorageError, ValueError)):
        logger.error(f"{type(error).__name__}: {str(error)}")
        return EXIT_ERROR
    logger.exception(f"Unexpected error: {str(error)}")
    return EXIT_ERROR


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='scatterlab', description="Robust scatter estimation and its deterministic equivalents")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help="experiment document (JSON)")
    common.add_argument('--seed', type=int, help="override the document's seeds with one seed")
    common.add_argument('--out', help="output directory")
    common.add_argument('--format', choices=['csv', 'json'], help="output format")

    sub = parser.add_subparsers(dest='command', required=True)
    estimate_parser = sub.add_parser('estimate', parents=[common], help="run the M-estimator")
    estimate_parser.add_argument('--dump-sample', action='store_true',
                                 help="also write each sample (textures, then X) as CSV")
    sub.add_parser('spectrum', parents=[common], help="equivalent spectral density")
    sub.add_parser('experiment', parents=[common], help="convergence of ||C_hat - S_hat||")
    figure = sub.add_parser('reproduce-figure', parents=[common], help="reference figure data")
    figure.add_argument('--which', type=int, choices=[1, 2, 3], required=True)
    figure.add_argument('--N', type=int, default=FIGURE_SIZE[0])
    figure.add_argument('--n', type=int, default=FIGURE_SIZE[1])
    sub.add_parser('check', parents=[common], help="model-assumption report")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main command-line entry point."""
    args = build_parser().parse_args(argv)
    logging.config.dictConfig(config.get_log_config())
    if not config.validate_config():
        return EXIT_ERROR
    logger.debug(f"Running {args.command} with {config!r}")
    try:
        return COMMANDS[args.command](args)
    except Exception as e:
        return handle_error(e)
