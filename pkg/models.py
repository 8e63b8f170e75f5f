"""
Data model definitions for ScatterLab.

This module defines the plain result and parameter records passed between the
weights, estimator, deterministic-equivalent and front-end layers. Every record
knows how to render itself for JSON output.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np


def _floats(values) -> List[float]:
    return [float(v) for v in np.asarray(values, dtype=float).ravel()]


@dataclass(frozen=True)
class WeightSpec:
    """Weight family selection; `custom_u` must come with its declared phi limit."""
    family: str = 'student-type'
    alpha: float = 0.1
    custom_u: Optional[Callable[[np.ndarray], np.ndarray]] = None
    declared_phi_inf: Optional[float] = None
    attested_increasing: bool = False

    def to_dict(self) -> dict:
        """Convert weight spec to dictionary for JSON serialization."""
        return {
            'family': self.family,
            'alpha': self.alpha if self.family == 'student-type' else None,
            'declared_phi_inf': self.declared_phi_inf
        }


@dataclass(frozen=True)
class EstimatorConfig:
    """Stopping rule, start point and computation route of the M-estimator."""
    tol: float = 1e-11
    max_iter: int = 500
    init: str = 'identity'  # identity/sample-covariance/custom
    route: str = 'matrix'   # matrix/d-vector/both
    init_matrix: Optional[np.ndarray] = None
    d_init: float = 1.0

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be > 0")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not validate_init(self.init):
            raise ValueError(f"Invalid init: {self.init}")
        if not validate_route(self.route):
            raise ValueError(f"Invalid route: {self.route}")
        if self.init == 'custom':
            if self.init_matrix is None:
                raise ValueError("custom init needs init_matrix")
            Z = np.asarray(self.init_matrix, dtype=float)
            if not np.allclose(Z, Z.T) or np.linalg.eigvalsh(Z)[0] <= 0:
                raise ValueError("custom init must be symmetric positive definite")
        if self.d_init <= 0:
            raise ValueError("d_init must be > 0")


@dataclass
class EstimateResult:
    """Converged (or last) iterate of the M-estimator with diagnostics."""
    C_hat: np.ndarray
    d: np.ndarray
    iterations: int
    residual: float
    converged: bool
    route: str = 'matrix'
    residual_history: List[float] = field(default_factory=list)
    route_gap: Optional[float] = None

    @property
    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.C_hat)

    def to_dict(self) -> dict:
        """Convert estimate to dictionary for JSON serialization."""
        return {
            'route': self.route,
            'converged': self.converged,
            'iterations': self.iterations,
            'residual': self.residual,
            'route_gap': self.route_gap,
            'eigenvalues': _floats(self.eigenvalues),
            'd': _floats(self.d),
            'residual_history': _floats(self.residual_history)
        }


@dataclass
class GammaSolution:
    """Solution of the scalar normalization equation for gamma_N."""
    gamma: float
    iterations: int
    residual: float

    def to_dict(self) -> dict:
        """Convert gamma solution to dictionary for JSON serialization."""
        return {'gamma': self.gamma, 'iterations': self.iterations, 'residual': self.residual}


@dataclass
class SpectralDensity:
    """Density of the deterministic-equivalent spectral measure on a real grid."""
    grid: np.ndarray
    values: np.ndarray
    eta: float
    mass: float
    support: List[Tuple[float, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        """Convert density to dictionary for JSON serialization."""
        return {
            'eta': self.eta,
            'mass': self.mass,
            'support': [[float(a), float(b)] for a, b in self.support],
            'grid': _floats(self.grid),
            'values': _floats(self.values)
        }


@dataclass
class HistogramData:
    """Density-normalized histogram of eigenvalues."""
    bin_centers: np.ndarray
    frequencies: np.ndarray
    bin_width: float

    @property
    def mass(self) -> float:
        return float(np.sum(self.frequencies) * self.bin_width)

    def to_dict(self) -> dict:
        """Convert histogram to dictionary for JSON serialization."""
        return {
            'bin_width': self.bin_width,
            'bin_centers': _floats(self.bin_centers),
            'frequencies': _floats(self.frequencies)
        }


@dataclass
class AssumptionReport:
    """Advisory model-assumption report: hard checks fail, soft checks warn."""
    status: str = 'pass'  # pass/warn/fail
    checks: Dict[str, str] = field(default_factory=dict)
    details: Dict[str, str] = field(default_factory=dict)
    notes: List[str] = field(default_factory=list)

    def record(self, name: str, outcome: str, detail: str) -> None:
        """Store one check and degrade the overall status accordingly."""
        if not validate_check_outcome(outcome):
            raise ValueError(f"Invalid check outcome: {outcome}")
        self.checks[name] = outcome
        self.details[name] = detail
        if outcome == 'fail':
            self.status = 'fail'
        elif outcome == 'warn' and self.status == 'pass':
            self.status = 'warn'

    def to_dict(self) -> dict:
        """Convert report to dictionary for JSON serialization."""
        return {
            'status': self.status,
            'checks': dict(self.checks),
            'details': dict(self.details),
            'notes': list(self.notes)
        }


@dataclass
class ConvergenceRow:
    """One (size, seed) cell of the convergence experiment."""
    N: int
    n: int
    seed: int
    norm_gap: float
    relative_gap: float
    gamma: float
    iterations: int
    converged: bool

    def to_dict(self) -> dict:
        """Convert row to dictionary for JSON serialization."""
        return {
            'N': self.N,
            'n': self.n,
            'seed': self.seed,
            'norm_gap': self.norm_gap,
            'relative_gap': self.relative_gap,
            'gamma': self.gamma,
            'iterations': self.iterations,
            'converged': self.converged
        }


def validate_init(init: str) -> bool:
    """Validate estimator start-point choice."""
    return init in {'identity', 'sample-covariance', 'custom'}


def validate_route(route: str) -> bool:
    """Validate estimator computation route."""
    return route in {'matrix', 'd-vector', 'both'}


def validate_check_outcome(outcome: str) -> bool:
    """Validate assumption-check outcome label."""
    return outcome in {'pass', 'warn', 'fail'}
