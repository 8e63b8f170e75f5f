"""
Deterministic equivalents of the robust scatter estimator.

Given the textures tau_i, the aspect ratio c and the weight function, this module
computes the scalar gamma_N, the equivalent matrix S_hat = (1/n) sum v(tau_i gamma) x_i x_i^T
and the Stieltjes transform m(z) of its limiting spectral measure, from which the
density is recovered along a real grid by m(x + i eta) / pi.

The Stieltjes system is solved in the single unknown delta_t (composition of the two
coupled updates) by plain fixed-point iteration, damped on oscillation, followed by
a Newton polish. Discrete laws are compressed to unique atoms with weights.
"""

import logging
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy import optimize
from scipy.integrate import trapezoid

from config import config
from estimator import quadratic_forms
from models import GammaSolution, SpectralDensity
from sampling import SampleSet, TauDistribution
from weights import WeightFunction

logger = logging.getLogger(__name__)

# Fixed-point steps before the Newton polish takes over
ALTERNATION_STEPS = 50
# Consecutive sign-alternating updates that switch damping on
OSCILLATION_WINDOW = 10
DAMPING = 0.5
MAX_RESTARTS = 3
MAX_BACKTRACKS = 30
DENOMINATOR_FLOOR = 1e-300

GAMMA_MAX_ITER = 10000
# Probability mass left out of the quadrature range, split between both tails
QUADRATURE_TAIL_MASS = 1e-8
QUADRATURE_AGREEMENT = 1e-5

# Support intervals separated by fewer below-threshold grid points are merged
SUPPORT_MIN_GAP = 2
EDGE_REFINE_POINTS = 3
# Each refinement round divides eta by this factor
EDGE_REFINE_FACTOR = 10.0
REFINE_ROUNDS = 2
# Points below this multiple of the support threshold are refined too
EDGE_REFINE_LEVEL = 10.0


class SolverError(Exception):
    """Raised when a fixed-point solve fails; carries the point and last iterates."""

    def __init__(self, message: str, z: Optional[complex] = None, iterates: Tuple = ()):
        super().__init__(message)
        self.z = z
        self.iterates = iterates


class QuadratureError(Exception):
    """Raised when the texture integral does not resolve at the configured node count."""
    pass


class _Degenerate(Exception):
    pass


# ---------------------------------------------------------------------------
# gamma_N
# ---------------------------------------------------------------------------

def _check_weight_ratio(c: float, w: WeightFunction) -> None:
    if abs(c - w.c) > 1e-12 * max(1.0, c):
        raise ValueError(f"weight function is bound to c={w.c}, got c={c}")


def gamma_interference(gamma: float, taus: Sequence[float], c: float, w: WeightFunction) -> float:
    """The scalar map h(gamma) whose fixed point is gamma_N.

    For gamma > 0, h(gamma) = [(1/n) sum tau_i v(tau_i gamma) / (1 + c tau_i v(tau_i gamma) gamma)]^-1;
    at gamma = 0 it reduces to 1 / (v(0) mean(tau)).
    """
    _check_weight_ratio(c, w)
    t = np.asarray(taus, dtype=float)
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    if gamma == 0:
        return 1.0 / (float(w.v(0.0)) * float(t.mean()))
    a = t * np.asarray(w.v(t * gamma))
    return 1.0 / float(np.mean(a / (1.0 + c * a * gamma)))


def normalization_residual(gamma: float, taus: Sequence[float], c: float, w: WeightFunction) -> float:
    """|1 - (1/n) sum psi(tau_i gamma) / (1 + c psi(tau_i gamma))|."""
    p = np.asarray(w.psi(np.asarray(taus, dtype=float) * gamma))
    return abs(1.0 - float(np.mean(p / (1.0 + c * p))))


def solve_gamma(taus: Sequence[float], c: float, w: WeightFunction,
                tol: float = config.gamma_tol, max_iter: int = GAMMA_MAX_ITER) -> GammaSolution:
    """Iterate gamma <- h(gamma) from gamma = 1 until the relative change is below tol."""
    _check_weight_ratio(c, w)
    t = np.asarray(taus, dtype=float)
    if not np.any(t > 0):
        raise SolverError("gamma equation is degenerate: all textures are zero")

    gamma = 1.0
    for step in range(1, max_iter + 1):
        updated = gamma_interference(gamma, t, c, w)
        change = abs(updated - gamma) / gamma
        gamma = updated
        if change <= tol:
            res = normalization_residual(gamma, t, c, w)
            logger.debug(f"gamma converged in {step} steps: {gamma:.12g} (residual {res:.2e})")
            return GammaSolution(gamma=gamma, iterations=step, residual=res)

    raise SolverError(f"gamma iteration did not converge in {max_iter} steps "
                      f"(last gamma {gamma:.12g}, change {change:.2e})", iterates=(gamma,))


def build_equivalent(s: SampleSet, gamma: float, w: WeightFunction) -> np.ndarray:
    """S_hat = (1/n) sum v(tau_i gamma) x_i x_i^T."""
    if gamma <= 0:
        raise ValueError("gamma must be > 0")
    weights = np.asarray(w.v(s.taus * gamma))
    S = (s.X * weights) @ s.X.T / s.n
    return 0.5 * (S + S.T)


# ---------------------------------------------------------------------------
# Stieltjes transform
# ---------------------------------------------------------------------------

def _atoms(values: Sequence[float], weights: Optional[Sequence[float]] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Unique atoms with probability weights."""
    values = np.asarray(values, dtype=float)
    if weights is None:
        atoms, counts = np.unique(values, return_counts=True)
        return atoms, counts / counts.sum()
    weights = np.asarray(weights, dtype=float)
    return values, weights / weights.sum()


def _guard(denominator: np.ndarray) -> None:
    if np.any(np.abs(denominator) < DENOMINATOR_FLOOR) or not np.all(np.isfinite(denominator)):
        raise _Degenerate()


def _fixed_point(G: Callable[[complex], complex], dG: Callable[[complex], complex],
                 start: complex, z: complex, tol: float, max_iter: int, label: str) -> Tuple[complex, int]:
    """Solve x = G(x) in the upper half-plane.

    Plain iteration (damped once updates alternate in sign), then Newton on
    x - G(x) with step halving whenever a step leaves the half-plane or does not
    reduce the defect. Zero denominators trigger a restart from the start point
    with a halved step.
    """
    damping = 1.0
    for restart in range(MAX_RESTARTS + 1):
        x = start
        gx = start
        previous = None
        flips = 0
        step_damping = damping
        try:
            for it in range(1, max_iter + 1):
                gx = G(x)
                step = gx - x
                if abs(step) <= tol * abs(x):
                    return gx, it

                if previous is not None and (step * np.conj(previous)).real < 0:
                    flips += 1
                else:
                    flips = 0
                if flips >= OSCILLATION_WINDOW:
                    step_damping = min(step_damping, DAMPING)
                previous = step

                if it <= ALTERNATION_STEPS:
                    x = x + step_damping * step
                    continue

                newton = step / (1.0 - dG(x))
                defect = abs(step)
                t = 1.0
                for _ in range(MAX_BACKTRACKS):
                    candidate = x + t * newton
                    if candidate.imag > 0:
                        try:
                            if abs(G(candidate) - candidate) < defect:
                                break
                        except _Degenerate:
                            pass
                    t *= 0.5
                else:
                    candidate = x + step_damping * step
                x = candidate
        except _Degenerate:
            damping *= 0.5
            logger.debug(f"{label}: zero denominator at z={z}, restart {restart + 1}")
            continue

        raise SolverError(f"{label} did not converge at z={z} in {max_iter} steps",
                          z=z, iterates=(x, gx))

    raise SolverError(f"{label} hit zero denominators at z={z} after {MAX_RESTARTS} restarts",
                      z=z, iterates=(start,))


class StieltjesSystem:
    """Coupled delta / delta_t equations for one (psi law, gamma, C spectrum, c).

        delta_t = -(1/z) E_psi[ psi / (gamma + psi delta) ]
        delta   = -(c/z) E_lam[ lam / (1 + lam delta_t) ]
        m       = -(1/z) E_lam[ 1 / (1 + lam delta_t) ]
    """

    def __init__(self, psi_values: Sequence[float], gamma: float, eig_C: Sequence[float], c: float,
                 psi_weights: Optional[Sequence[float]] = None):
        if gamma <= 0:
            raise ValueError("gamma must be > 0")
        self.psi, self.psi_weights = _atoms(psi_values, psi_weights)
        self.lam, self.lam_weights = _atoms(eig_C)
        self.gamma = float(gamma)
        self.c = float(c)

    @classmethod
    def from_taus(cls, taus: Sequence[float], gamma: float, eig_C: Sequence[float],
                  c: float, w: WeightFunction) -> 'StieltjesSystem':
        t = np.asarray(taus, dtype=float)
        return cls(np.asarray(w.psi(t * gamma)), gamma, eig_C, c)

    def delta(self, z: complex, delta_t: complex) -> complex:
        den = 1.0 + self.lam * delta_t
        _guard(den)
        return -(self.c / z) * np.sum(self.lam_weights * self.lam / den)

    def delta_t(self, z: complex, delta: complex) -> complex:
        den = self.gamma + self.psi * delta
        _guard(den)
        return -(1.0 / z) * np.sum(self.psi_weights * self.psi / den)

    def m(self, z: complex, delta_t: complex) -> complex:
        den = 1.0 + self.lam * delta_t
        _guard(den)
        return -(1.0 / z) * np.sum(self.lam_weights / den)

    def _composed_derivative(self, z: complex, delta_t: complex) -> complex:
        delta = self.delta(z, delta_t)
        d_delta = (self.c / z) * np.sum(self.lam_weights * self.lam ** 2 / (1.0 + self.lam * delta_t) ** 2)
        d_delta_t = (1.0 / z) * np.sum(self.psi_weights * self.psi ** 2 / (self.gamma + self.psi * delta) ** 2)
        return d_delta_t * d_delta

    def solve(self, z: complex, tol: float = config.stieltjes_tol,
              max_iter: int = config.stieltjes_max_iter,
              start: Optional[complex] = None) -> Tuple[complex, complex, complex]:
        """Return (m, delta, delta_t) at z; start is a warm-start value for delta_t.

        Below the real axis the solution is the reflection of the one at conj(z).
        """
        z = complex(z)
        if z.imag == 0:
            raise ValueError(f"Stieltjes system is undefined on the real axis, got z={z}")
        if z.imag < 0:
            mirrored = self.solve(z.conjugate(), tol, max_iter, None if start is None else complex(start).conjugate())
            return tuple(value.conjugate() for value in mirrored)
        x0 = start if start is not None and start.imag > 0 else -1.0 / z

        delta_t, iterations = _fixed_point(
            lambda x: self.delta_t(z, self.delta(z, x)),
            lambda x: self._composed_derivative(z, x),
            x0, z, tol, max_iter, 'Stieltjes system')
        delta = self.delta(z, delta_t)
        m = self.m(z, delta_t)

        if m.imag < 0 or delta_t.imag < 0:
            raise SolverError(f"Stieltjes solution left the upper half-plane at z={z}",
                              z=z, iterates=(delta, delta_t))
        logger.debug(f"Stieltjes system at z={z}: m={m} after {iterations} steps")
        return complex(m), complex(delta), complex(delta_t)


def solve_stieltjes(z: complex, taus: Sequence[float], gamma: float, eig_C: Sequence[float],
                    c: float, w: WeightFunction, tol: float = config.stieltjes_tol,
                    max_iter: int = config.stieltjes_max_iter) -> Tuple[complex, complex, complex]:
    """(m, delta, delta_t) of the deterministic-equivalent spectral measure at z."""
    _check_weight_ratio(c, w)
    return StieltjesSystem.from_taus(taus, gamma, eig_C, c, w).solve(z, tol, max_iter)


def identity_case_m(z: complex, taus: Sequence[float], gamma: float, c: float, w: WeightFunction,
                    tol: float = config.stieltjes_tol, max_iter: int = config.stieltjes_max_iter) -> complex:
    """m solving m = [-z + gamma^-1 (1/n) sum psi_i / (1 + c gamma^-1 psi_i m)]^-1, for C_N = I."""
    _check_weight_ratio(c, w)
    z = complex(z)
    if z.imag == 0:
        raise ValueError(f"identity-case equation is undefined on the real axis, got z={z}")
    if z.imag < 0:
        return identity_case_m(z.conjugate(), taus, gamma, c, w, tol, max_iter).conjugate()
    psi, weights = _atoms(np.asarray(w.psi(np.asarray(taus, dtype=float) * gamma)))
    k = c / gamma

    def G(m: complex) -> complex:
        den = 1.0 + k * psi * m
        _guard(den)
        outer = -z + np.sum(weights * psi / den) / gamma
        _guard(np.array([outer]))
        return 1.0 / outer

    def dG(m: complex) -> complex:
        return G(m) ** 2 * np.sum(weights * k * psi ** 2 / (1.0 + k * psi * m) ** 2) / gamma

    m, _ = _fixed_point(G, dG, -1.0 / z, z, tol, max_iter, 'identity-case equation')
    if m.imag < 0:
        raise SolverError(f"identity-case solution left the upper half-plane at z={z}", z=z, iterates=(m,))
    return complex(m)


# ---------------------------------------------------------------------------
# Density along a real grid
# ---------------------------------------------------------------------------

def support_intervals(grid: np.ndarray, values: np.ndarray,
                      threshold: float = config.support_threshold) -> List[Tuple[float, float]]:
    """Sorted disjoint intervals where values exceed threshold; short dips are bridged."""
    above = np.flatnonzero(np.asarray(values) > threshold)
    if above.size == 0:
        return []
    runs = []
    start = prev = above[0]
    for idx in above[1:]:
        if idx - prev - 1 >= SUPPORT_MIN_GAP:
            runs.append((start, prev))
            start = idx
        prev = idx
    runs.append((start, prev))
    return [(float(grid[a]), float(grid[b])) for a, b in runs]


def _sweep(system: StieltjesSystem, grid: np.ndarray, eta: float, tol: float,
           max_iter: int, starts: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    values = np.empty(grid.size)
    solutions = np.empty(grid.size, dtype=complex)
    warm = None
    for k, x in enumerate(grid):
        start = starts[k] if starts is not None else warm
        try:
            m, _, delta_t = system.solve(complex(x, eta), tol, max_iter, start)
        except SolverError as e:
            raise SolverError(f"density failed at x={x:.6g}: {str(e)}", z=e.z, iterates=e.iterates)
        values[k] = max(m.imag / np.pi, 0.0)
        solutions[k] = delta_t
        warm = delta_t
    return values, solutions


def _refinement_points(grid: np.ndarray, values: np.ndarray, threshold: float) -> np.ndarray:
    marked = set(np.flatnonzero(values < EDGE_REFINE_LEVEL * threshold).tolist())
    centers = [int(np.searchsorted(grid, x)) for pair in support_intervals(grid, values, threshold) for x in pair]
    inner = values[1:-1]
    centers += (np.flatnonzero((inner <= values[:-2]) & (inner <= values[2:])) + 1).tolist()
    for k in centers:
        marked.update(range(max(k - EDGE_REFINE_POINTS, 0), min(k + EDGE_REFINE_POINTS + 1, grid.size)))
    return np.array(sorted(marked), dtype=int)


def _density_from_system(system: StieltjesSystem, grid: Sequence[float], eta: float,
                         tol: float, max_iter: int, threshold: float, refine: bool) -> SpectralDensity:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2 or np.any(np.diff(grid) <= 0):
        raise ValueError("density grid must be strictly increasing with at least two points")
    if eta <= 0:
        raise ValueError("eta must be > 0")

    values, solutions = _sweep(system, grid, eta, tol, max_iter)

    if refine:
        # Low-density stretches, local minima and support edges are resolved at
        # successively smaller offsets; narrow gaps between close clusters only
        # drop below the threshold there.
        level = eta
        for _ in range(REFINE_ROUNDS):
            level /= EDGE_REFINE_FACTOR
            idx = _refinement_points(grid, values, threshold)
            if idx.size == 0:
                break
            refined, solutions[idx] = _sweep(system, grid[idx], level, tol, max_iter, solutions[idx])
            values[idx] = refined
            logger.debug(f"Refined {idx.size} grid points near support edges and gaps at eta={level:.1e}")

    mass = float(trapezoid(values, grid))
    support = support_intervals(grid, values, threshold)
    logger.info(f"Density on [{grid[0]:.4g}, {grid[-1]:.4g}]: mass {mass:.4f}, {len(support)} support interval(s)")
    return SpectralDensity(grid=grid, values=values, eta=float(eta), mass=mass, support=support)


def density_on_grid(grid: Sequence[float], eta: float, taus: Sequence[float], gamma: float,
                    eig_C: Sequence[float], c: float, w: WeightFunction,
                    tol: float = config.stieltjes_tol, max_iter: int = config.stieltjes_max_iter,
                    threshold: float = config.support_threshold, refine: bool = True) -> SpectralDensity:
    """Density Im m(x + i eta) / pi of the deterministic-equivalent measure along grid."""
    _check_weight_ratio(c, w)
    system = StieltjesSystem.from_taus(taus, gamma, eig_C, c, w)
    return _density_from_system(system, grid, eta, tol, max_iter, threshold, refine)


# ---------------------------------------------------------------------------
# i.i.d. texture limit
# ---------------------------------------------------------------------------

def tau_quadrature(tau_law: TauDistribution, nodes: int = config.quadrature_nodes) -> Tuple[np.ndarray, np.ndarray]:
    """Nodes and probability weights representing the texture law.

    Continuous laws are integrated in probability space: Gauss-Legendre on
    [eps/2, 1 - eps/2] mapped through the quantile function.
    """
    if tau_law.kind == 'constant':
        return np.array([1.0]), np.array([1.0])
    if tau_law.kind == 'empirical':
        values = np.asarray(tau_law.values, dtype=float)
        return values, np.full(values.size, 1.0 / values.size)

    law = tau_law.law()
    if law is None:
        raise QuadratureError(f"No quadrature rule for texture kind {tau_law.kind}")
    lo, hi = 0.5 * QUADRATURE_TAIL_MASS, 1.0 - 0.5 * QUADRATURE_TAIL_MASS
    x, wts = leggauss(nodes)
    p = lo + (hi - lo) * (x + 1.0) / 2.0
    wts = wts / wts.sum()
    return np.asarray(law.ppf(p), dtype=float), wts


def _limit_normalization(gamma: float, t: np.ndarray, wts: np.ndarray, c: float, w: WeightFunction) -> float:
    p = np.asarray(w.psi(t * gamma))
    return float(np.sum(wts * p / (1.0 + c * p)))


def limiting_gamma(tau_law: TauDistribution, c: float, w: WeightFunction,
                   tol: float = config.gamma_tol, scale: float = 1.0,
                   nodes: int = config.quadrature_nodes) -> float:
    """gamma_inf solving 1 = int psi(t gamma) / (1 + c psi(t gamma)) nu(dt), by bisection.

    `scale` multiplies the texture law uniformly. Built-in laws are cross-checked
    against a half-size quadrature rule.
    """
    _check_weight_ratio(c, w)
    if scale <= 0:
        raise ValueError("scale must be > 0")
    t, wts = tau_quadrature(tau_law, nodes)
    t = t * scale

    def f(gamma: float) -> float:
        return _limit_normalization(gamma, t, wts, c, w) - 1.0

    lo, hi = 0.5, 2.0
    for _ in range(200):
        if f(lo) < 0:
            break
        lo *= 0.5
    for _ in range(200):
        if f(hi) > 0:
            break
        hi *= 2.0
    if not f(lo) < 0 < f(hi):
        raise SolverError(f"could not bracket gamma_inf (lo={lo:.3g}, hi={hi:.3g})")

    gamma = optimize.bisect(f, lo, hi, xtol=tol * lo, rtol=max(tol, 4 * np.finfo(float).eps))

    if tau_law.kind in ('gamma', 'inverse-chi-square'):
        t_half, w_half = tau_quadrature(tau_law, nodes // 2)
        full = _limit_normalization(gamma, t, wts, c, w)
        half = _limit_normalization(gamma, t_half * scale, w_half, c, w)
        if abs(full - half) > QUADRATURE_AGREEMENT * abs(full):
            raise QuadratureError(f"texture integral unresolved: {nodes} nodes give {full:.10g}, "
                                  f"{nodes // 2} give {half:.10g}")

    logger.debug(f"gamma_inf for {tau_law.kind} texture at c={c:.4g}: {gamma:.12g}")
    return float(gamma)


def limiting_density_on_grid(grid: Sequence[float], eta: float, tau_law: TauDistribution,
                             gamma_inf: float, eig_C: Sequence[float], c: float, w: WeightFunction,
                             tol: float = config.stieltjes_tol, max_iter: int = config.stieltjes_max_iter,
                             threshold: float = config.support_threshold,
                             nodes: int = config.quadrature_nodes, refine: bool = True) -> SpectralDensity:
    """Density of the i.i.d.-texture limit, the texture integral discretised as in limiting_gamma."""
    _check_weight_ratio(c, w)
    t, wts = tau_quadrature(tau_law, nodes)
    system = StieltjesSystem(np.asarray(w.psi(t * gamma_inf)), gamma_inf, eig_C, c, psi_weights=wts)
    return _density_from_system(system, grid, eta, tol, max_iter, threshold, refine)


def trace_lemma_deviation(s: SampleSet) -> float:
    """max_j |(1/N) z_j^T F^-1 z_j - 1| with F = (1/n) sum z_i z_i^T."""
    F = s.Z @ s.Z.T / s.n
    q = quadratic_forms(0.5 * (F + F.T), s.Z)
    return float(np.max(np.abs(q - 1.0)))

