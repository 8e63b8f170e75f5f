"""
Elliptical sample generation for ScatterLab.

Samples follow x_i = sqrt(tau_i) A_N y_i with A_N A_N^T = C_N, y_i uniform on the
sphere of radius sqrt(N_bar) and tau_i an i.i.d. texture of unit mean. This module
also houses the advisory check of the model assumptions on a concrete sample.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np
from scipy import stats

from models import AssumptionReport
from weights import WeightFunction

logger = logging.getLogger(__name__)

# Threshold below which a texture counts as "near zero" in the mass check
NEAR_ZERO_THRESHOLD = 1e-3


class ModelError(Exception):
    """Custom exception for population models violating the model assumptions."""
    pass


@dataclass(frozen=True)
class TauDistribution:
    """Texture law, rescaled at construction to have population mean one.

    Use the named constructors; they perform the rescaling:
      constant(value)          -> point mass at 1
      gamma(shape, scale)      -> Gamma(shape, 1/shape)
      inverse_chi_square(dof)  -> (dof - 2) / chi2(dof), needs dof > 2
      empirical(values)        -> values / mean(values)
    """
    kind: str
    params: Dict[str, float] = field(default_factory=dict)
    values: tuple = ()

    @classmethod
    def constant(cls, value: float = 1.0) -> 'TauDistribution':
        if value <= 0:
            raise ModelError("constant texture must be positive")
        return cls('constant', {'value': 1.0, 'raw_value': float(value)})

    @classmethod
    def gamma(cls, shape: float, scale: float) -> 'TauDistribution':
        if shape <= 0 or scale <= 0:
            raise ModelError("gamma texture needs positive shape and scale")
        # Gamma(k, theta) has mean k*theta; rescale theta analytically
        return cls('gamma', {'shape': float(shape), 'scale': 1.0 / float(shape),
                             'raw_scale': float(scale)})

    @classmethod
    def inverse_chi_square(cls, dof: float) -> 'TauDistribution':
        if dof <= 2:
            raise ModelError("inverse-chi-square texture needs dof > 2 for a finite mean")
        return cls('inverse-chi-square', {'dof': float(dof)})

    @classmethod
    def empirical(cls, values: Sequence[float]) -> 'TauDistribution':
        arr = np.asarray(values, dtype=float)
        if arr.size == 0 or np.any(arr < 0) or not np.all(np.isfinite(arr)):
            raise ModelError("empirical texture needs a non-empty list of nonnegative reals")
        mean = float(arr.mean())
        if mean <= 0:
            raise ModelError("empirical texture cannot be identically zero")
        return cls('empirical', {}, tuple(float(v) for v in arr / mean))

    @property
    def mean(self) -> float:
        if self.kind == 'empirical':
            return float(np.mean(self.values))
        return 1.0

    def law(self):
        """Frozen scipy law for the continuous built-in kinds, None otherwise."""
        if self.kind == 'gamma':
            return stats.gamma(a=self.params['shape'], scale=self.params['scale'])
        if self.kind == 'inverse-chi-square':
            dof = self.params['dof']
            # (dof-2)/chi2(dof) is inverse-gamma(dof/2, scale=(dof-2)/2)
            return stats.invgamma(a=dof / 2.0, scale=(dof - 2.0) / 2.0)
        return None

    def draw(self, count: int, rng: np.random.Generator) -> np.ndarray:
        """Draw `count` textures; empirical lists of matching length are used verbatim."""
        if self.kind == 'constant':
            return np.ones(count)
        if self.kind == 'gamma':
            return rng.gamma(self.params['shape'], self.params['scale'], size=count)
        if self.kind == 'inverse-chi-square':
            dof = self.params['dof']
            return (dof - 2.0) / rng.chisquare(dof, size=count)
        if self.kind == 'empirical':
            values = np.asarray(self.values)
            if values.size == count:
                return values.copy()
            return rng.choice(values, size=count, replace=True)
        raise ModelError(f"Unknown texture kind: {self.kind}")

    def to_dict(self) -> dict:
        """Convert texture law to dictionary for JSON serialization."""
        return {'kind': self.kind, 'params': dict(self.params), 'n_values': len(self.values)}


@dataclass
class ScatterModel:
    """Population description: dimensions, scatter matrix and texture law."""
    N: int
    n: int
    C: np.ndarray
    tau: TauDistribution
    N_bar: Optional[int] = None

    def __post_init__(self):
        if self.N_bar is None:
            self.N_bar = self.N
        if self.N < 1 or self.n <= self.N:
            raise ModelError(f"Need 1 <= N < n, got N={self.N}, n={self.n}")
        if self.N_bar < self.N:
            raise ModelError(f"N_bar={self.N_bar} must be >= N={self.N}")
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
        if self.C.shape != (self.N, self.N):
            raise ModelError(f"C must be {self.N}x{self.N}, got {self.C.shape}")
        if not np.allclose(self.C, self.C.T, rtol=1e-12, atol=1e-14):
            raise ModelError("C must be symmetric")
        eig = np.linalg.eigvalsh(self.C)
        if eig[0] <= 0:
            raise ModelError(f"C must be positive definite (smallest eigenvalue {eig[0]:.3g})")
        self.C_norm = float(eig[-1])

    @property
    def c(self) -> float:
        return self.N / self.n

    @property
    def c_bar(self) -> float:
        return self.N_bar / self.N

    @property
    def eig_C(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.C)

    def to_dict(self) -> dict:
        """Convert model to dictionary for JSON serialization."""
        return {
            'N': self.N,
            'n': self.n,
            'N_bar': self.N_bar,
            'c': self.c,
            'C_norm': self.C_norm,
            'tau': self.tau.to_dict()
        }


@dataclass
class SampleSet:
    """Data matrix X (N x n, columns x_i) with its textures and z_i = A_N y_i columns."""
    X: np.ndarray
    taus: np.ndarray
    seed: int
    model: ScatterModel
    Z: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.Z is None:
            scale = np.sqrt(self.taus)
            with np.errstate(divide='ignore', invalid='ignore'):
                self.Z = np.where(scale > 0, self.X / scale, 0.0)

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def n(self) -> int:
        return self.X.shape[1]

    @property
    def c(self) -> float:
        return self.N / self.n

    @classmethod
    def from_matrix(cls, X: np.ndarray, taus: Optional[np.ndarray] = None,
                    seed: int = -1) -> 'SampleSet':
        """Wrap raw data; textures default to one so that z_i = x_i."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        N, n = X.shape
        taus = np.ones(n) if taus is None else np.asarray(taus, dtype=float)
        model = ScatterModel(N=N, n=n, C=np.eye(N), tau=TauDistribution.empirical(np.ones(n)))
        Z = X.copy() if np.all(taus == 1.0) else None
        return cls(X=X, taus=taus, seed=seed, model=model, Z=Z)

    def transform(self, A: np.ndarray) -> 'SampleSet':
        """The sample A x_i (and A z_i), with the model's scatter mapped to A C A^T."""
        A = np.asarray(A, dtype=float)
        C = A @ self.model.C @ A.T
        model = ScatterModel(N=A.shape[0], n=self.model.n, C=0.5 * (C + C.T),
                             tau=self.model.tau, N_bar=max(self.model.N_bar, A.shape[0]))
        return SampleSet(X=A @ self.X, taus=self.taus.copy(), seed=self.seed,
                         model=model, Z=A @ self.Z)


def sqrt_factor(C: np.ndarray, N_bar: Optional[int] = None) -> np.ndarray:
    """Symmetric square root A of C (A A^T = C), zero-padded to N x N_bar."""
    C = np.atleast_2d(np.asarray(C, dtype=float))
    eig, vec = np.linalg.eigh(0.5 * (C + C.T))
    if eig[0] <= 0:
        raise ModelError(f"Matrix is not positive definite (smallest eigenvalue {eig[0]:.3g})")
    A = (vec * np.sqrt(eig)) @ vec.T
    N = C.shape[0]
    if N_bar is not None and N_bar > N:
        A = np.hstack([A, np.zeros((N, N_bar - N))])
    return A


def block_scatter(N: int, values: Sequence[float], proportions: Sequence[float]) -> np.ndarray:
    """Diagonal scatter with value values[k] repeated round(proportions[k] * N) times."""
    if len(values) != len(proportions) or not values:
        raise ModelError("block_scatter needs one proportion per value")
    sizes = [int(round(p * N)) for p in proportions[:-1]]
    sizes.append(N - sum(sizes))
    if any(s < 0 for s in sizes):
        raise ModelError(f"Block proportions {list(proportions)} do not fit N={N}")
    return np.diag(np.repeat(np.asarray(values, dtype=float), sizes))


def draw_direction(N_bar: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform direction on the sphere of radius sqrt(N_bar)."""
    if N_bar < 1:
        raise ValueError("N_bar must be >= 1")
    return draw_directions(N_bar, 1, rng)[:, 0]


def draw_directions(N_bar: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """`count` independent directions as columns of an N_bar x count matrix."""
    gauss = rng.standard_normal((N_bar, count))
    return np.sqrt(N_bar) * gauss / np.linalg.norm(gauss, axis=0)


def sample(model: ScatterModel, seed: int) -> SampleSet:
    """Draw one SampleSet; identical (model, seed) give bitwise-identical data."""
    rng = np.random.default_rng(seed)
    taus = model.tau.draw(model.n, rng)
    Y = draw_directions(model.N_bar, model.n, rng)
    A = sqrt_factor(model.C, model.N_bar)
    Z = A @ Y
    X = Z * np.sqrt(taus)
    logger.debug(f"Sampled N={model.N}, n={model.n}, seed={seed}, mean tau={taus.mean():.4f}")
    return SampleSet(X=X, taus=taus, seed=seed, model=model, Z=Z)


def hill_tail_index(values: np.ndarray, k: Optional[int] = None) -> float:
    """Hill estimate of the tail index from the k largest positive values."""
    positive = np.sort(np.asarray(values, dtype=float)[np.asarray(values) > 0])
    if positive.size < 3:
        return float('inf')
    if k is None:
        k = max(2, int(np.sqrt(positive.size)))
    k = min(k, positive.size - 1)
    top = positive[-k:]
    threshold = positive[-k - 1]
    mean_log = float(np.mean(np.log(top / threshold)))
    return float('inf') if mean_log <= 0 else 1.0 / mean_log


def check_assumptions(model: ScatterModel, w: WeightFunction, s: SampleSet,
                      m: float = NEAR_ZERO_THRESHOLD) -> AssumptionReport:
    """Advisory report on the model assumptions at the level a finite sample allows."""
    report = AssumptionReport()

    # (a) aspect ratio and condition (iii), hard
    c = model.c
    if 0.0 < c < 1.0 and w.phi_inf < 1.0 / c:
        report.record('aspect_ratio', 'pass',
                      f"c_N = {c:.4g} < 1 and phi_inf = {w.phi_inf:.4g} < 1/c_N = {1.0 / c:.4g}")
    else:
        report.record('aspect_ratio', 'fail',
                      f"need c_N < 1 and phi_inf < 1/c_N; got c_N = {c:.4g}, phi_inf = {w.phi_inf:.4g}")

    # (b) mass of textures near zero, soft
    near_zero = float(np.mean(np.asarray(s.taus) < m))
    bound = 1.0 - 1.0 / w.phi_inf
    if near_zero < bound:
        report.record('mass_near_zero', 'pass',
                      f"fraction of tau < {m:g} is {near_zero:.4g} < 1 - 1/phi_inf = {bound:.4g}")
    else:
        report.record('mass_near_zero', 'warn',
                      f"fraction of tau < {m:g} is {near_zero:.4g} >= 1 - 1/phi_inf = {bound:.4g}")

    # (c) tail of the texture distribution, soft, student-type family only
    if w.spec.family == 'student-type':
        index = hill_tail_index(s.taus)
        if index > 1.0:
            report.record('texture_tail', 'pass',
                          f"Hill tail index {index:.4g} > 1: tail decays faster than 1/t")
        else:
            report.record('texture_tail', 'warn',
                          f"Hill tail index {index:.4g} <= 1: tail may not be o(1/t)")
    else:
        report.notes.append("texture tail check skipped: only derived for the student-type family")

    report.notes.append(
        "tail condition is asymptotic; only its sufficient conditions are checked on this sample")

    if report.status != 'pass':
        logger.warning(f"Assumption check status {report.status}: {report.checks}")
    return report
