"""
Maronna M-estimator of scatter.

The estimate C_hat solves Z = (1/n) sum_i u((1/N) x_i^T Z^-1 x_i) x_i x_i^T. Two
independent computations are provided:

  * the matrix iteration Z <- rhs(Z) from an arbitrary SPD start;
  * the d-vector iteration on the leave-one-out quadratic forms
    d_j = (1/N) z_j^T C_(j)^-1 z_j, a standard interference function whose fixed
    point reassembles C_hat = (1/n) sum_i tau_i v(tau_i d_i) z_i z_i^T.

Non-convergence within the iteration cap is reported on the result, not raised.
"""

import logging
from typing import Callable, List, Optional

import numpy as np
from scipy import linalg, optimize

from models import EstimateResult, EstimatorConfig
from sampling import SampleSet
from weights import WeightFunction

logger = logging.getLogger(__name__)

# Sherman-Morrison downdate denominators below this are recomputed by refactorization
DOWNDATE_GUARD = 1e-8
# Reciprocal condition floor, estimated from the Cholesky diagonal
CONDITION_LIMIT = 1.0 / np.finfo(float).eps
_MAX_SCALE_DOUBLINGS = 200


class EstimatorError(Exception):
    """Custom exception for data the estimator cannot handle."""
    pass


class SingularMatrixError(EstimatorError):
    """Raised when an iterate or weighted sum is numerically singular."""
    pass


def spectral_norm(A: np.ndarray) -> float:
    """Spectral norm of a symmetric matrix via its eigenvalues."""
    eig = np.linalg.eigvalsh(0.5 * (A + A.T))
    return float(max(abs(eig[0]), abs(eig[-1])))


def _cholesky(Z: np.ndarray, step: Optional[int]) -> np.ndarray:
    where = f" at iteration {step}" if step is not None else ""
    try:
        L = linalg.cholesky(Z, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError) as e:
        raise SingularMatrixError(f"Matrix is not positive definite{where}: {str(e)}")
    diag = np.abs(np.diag(L))
    if diag.min() == 0 or (diag.max() / diag.min()) ** 2 > CONDITION_LIMIT:
        raise SingularMatrixError(f"Matrix is numerically singular{where}")
    return L


def quadratic_forms(Z: np.ndarray, V: np.ndarray, step: Optional[int] = None) -> np.ndarray:
    """(1/N) v_i^T Z^-1 v_i for every column v_i of V, from one factorization of Z."""
    L = _cholesky(Z, step)
    W = linalg.solve_triangular(L, V, lower=True, check_finite=False)
    return np.sum(W * W, axis=0) / Z.shape[0]


def rhs(Z: np.ndarray, s: SampleSet, w: WeightFunction, step: Optional[int] = None) -> np.ndarray:
    """(1/n) sum_i u((1/N) x_i^T Z^-1 x_i) x_i x_i^T."""
    q = quadratic_forms(Z, s.X, step)
    R = (s.X * np.asarray(w.u(q))) @ s.X.T / s.n
    return 0.5 * (R + R.T)


def residual(Z: np.ndarray, s: SampleSet, w: WeightFunction) -> float:
    """Relative fixed-point defect ||Z - rhs(Z)|| / ||Z|| in spectral norm."""
    return spectral_norm(Z - rhs(Z, s, w)) / spectral_norm(Z)


def sample_covariance(s: SampleSet) -> np.ndarray:
    """(1/n) sum_i x_i x_i^T."""
    return s.X @ s.X.T / s.n


def _check_spanning(s: SampleSet, w: WeightFunction) -> None:
    """Reject data with too many zero samples for a solution to exist."""
    nonzero = int(np.count_nonzero(np.linalg.norm(s.X, axis=0) > 0))
    zeros = s.n - nonzero
    if nonzero <= s.N:
        raise EstimatorError(f"Only {nonzero} nonzero samples for dimension N={s.N}")
    allowed = int(np.floor(s.n * (1.0 - 1.0 / w.phi_inf)))
    if zeros > allowed:
        raise EstimatorError(f"{zeros} zero samples exceed the admissible {allowed}")


def _normalizing_scale(mean_phi: Callable[[float], float]) -> float:
    """beta > 0 with mean_phi(beta) = 1, for mean_phi decreasing in beta.

    Both iterations rescale their iterate by this factor before each step. The
    fixed point satisfies mean phi(q_i) = 1, so beta is 1 there.
    """
    f = lambda beta: mean_phi(beta) - 1.0
    hi = 1.0
    for _ in range(_MAX_SCALE_DOUBLINGS):
        if f(hi) <= 0:
            break
        hi *= 2.0
    lo = 1.0
    for _ in range(_MAX_SCALE_DOUBLINGS):
        if f(lo) >= 0:
            break
        lo *= 0.5
    if f(lo) < 0 or f(hi) > 0:
        raise EstimatorError("Could not bracket the normalizing scale mean phi = 1")
    return float(optimize.brentq(f, lo, hi, xtol=1e-15 * lo, rtol=1e-15))


def _initial_matrix(s: SampleSet, cfg: EstimatorConfig) -> np.ndarray:
    if cfg.init == 'identity':
        return np.eye(s.N)
    if cfg.init == 'sample-covariance':
        return sample_covariance(s)
    return np.array(cfg.init_matrix, dtype=float)


def estimate_matrix_iteration(s: SampleSet, w: WeightFunction, cfg: EstimatorConfig) -> EstimateResult:
    """Fixed-point iteration Z <- rhs(Z) until the relative residual drops below tol.

    Each step first rescales Z to beta Z with mean phi(q_i / beta) = 1, which
    removes the slowly contracting scale direction without moving the fixed point.
    """
    _check_spanning(s, w)
    Z = _initial_matrix(s, cfg)
    history: List[float] = []
    converged = False
    res = float('inf')

    for step in range(1, cfg.max_iter + 1):
        q = quadratic_forms(Z, s.X, step)
        beta = _normalizing_scale(lambda b: float(np.mean(w.phi(q / b))))
        Z = beta * Z
        R = (s.X * np.asarray(w.u(q / beta))) @ s.X.T / s.n
        R = 0.5 * (R + R.T)
        res = spectral_norm(Z - R) / spectral_norm(Z)
        history.append(res)
        logger.debug(f"matrix iteration {step}: residual {res:.3e}")
        if res <= cfg.tol:
            converged = True
            break
        Z = R

    if not converged:
        res = residual(Z, s, w)
        logger.warning(f"Matrix iteration stopped after {cfg.max_iter} steps, residual {res:.3e}")
    else:
        logger.info(f"Matrix iteration converged in {step} steps, residual {res:.3e}")

    return EstimateResult(C_hat=Z, d=extract_di(Z, s, w), iterations=step, residual=res,
                          converged=converged, route='matrix', residual_history=history)


def _leave_one_out_forms(d: np.ndarray, s: SampleSet, w: WeightFunction,
                         step: Optional[int] = None) -> np.ndarray:
    """One sweep d -> h(d) using a single factorization and rank-one downdates."""
    taus = s.taus
    a = taus * np.asarray(w.v(taus * d))
    S = (s.Z * a) @ s.Z.T / s.n
    S = 0.5 * (S + S.T)
    p = quadratic_forms(S, s.Z, step)
    denom = 1.0 - s.c * a * p
    d_new = np.empty_like(p)
    ok = denom >= DOWNDATE_GUARD
    d_new[ok] = p[ok] / denom[ok]
    for j in np.flatnonzero(~ok):
        z = s.Z[:, j:j + 1]
        S_j = S - a[j] * (z @ z.T) / s.n
        d_new[j] = quadratic_forms(S_j, z, step)[0]
    return d_new


def interference_map(d: np.ndarray, s: SampleSet, w: WeightFunction) -> np.ndarray:
    """h_j(d) = (1/N) z_j^T [(1/n) sum_{i != j} tau_i v(tau_i d_i) z_i z_i^T]^-1 z_j, explicitly.

    One factorization per j; meant for small instances and for checking the
    downdated sweep.
    """
    d = np.asarray(d, dtype=float)
    a = s.taus * np.asarray(w.v(s.taus * d))
    h = np.empty(s.n)
    for j in range(s.n):
        keep = np.arange(s.n) != j
        S_j = (s.Z[:, keep] * a[keep]) @ s.Z[:, keep].T / s.n
        h[j] = quadratic_forms(0.5 * (S_j + S_j.T), s.Z[:, j:j + 1])[0]
    return h


def assemble_from_d(d: np.ndarray, s: SampleSet, w: WeightFunction) -> np.ndarray:
    """(1/n) sum_i tau_i v(tau_i d_i) z_i z_i^T."""
    a = s.taus * np.asarray(w.v(s.taus * np.asarray(d)))
    C = (s.Z * a) @ s.Z.T / s.n
    return 0.5 * (C + C.T)


def estimate_d_iteration(s: SampleSet, w: WeightFunction, cfg: EstimatorConfig) -> EstimateResult:
    """Iterate the leave-one-out forms from d = d_init until the max relative change is below tol.

    d is rescaled before each sweep so that mean phi(g^-1(tau_i d_i)) = 1.
    """
    _check_spanning(s, w)
    d = np.full(s.n, float(cfg.d_init))
    history: List[float] = []
    converged = False

    for step in range(1, cfg.max_iter + 1):
        # tau_i d_i = g(q_i) at the fixed point, so the same normalization applies
        beta = _normalizing_scale(lambda b: float(np.mean(w.phi(w.g_inv(s.taus * d / b)))))
        d = d / beta
        d_new = _leave_one_out_forms(d, s, w, step)
        change = float(np.max(np.abs(d_new - d) / d))
        history.append(change)
        d = d_new
        logger.debug(f"d iteration {step}: max relative change {change:.3e}")
        if change <= cfg.tol:
            converged = True
            break

    if converged:
        logger.info(f"d iteration converged in {step} steps")
    else:
        logger.warning(f"d iteration stopped after {cfg.max_iter} steps, last change {history[-1]:.3e}")

    C_hat = assemble_from_d(d, s, w)
    return EstimateResult(C_hat=C_hat, d=d, iterations=step, residual=residual(C_hat, s, w),
                          converged=converged, route='d-vector', residual_history=history)


def extract_di(C_hat: np.ndarray, s: SampleSet, w: WeightFunction) -> np.ndarray:
    """Leave-one-out forms recovered from C_hat: d_i = g(q_i) / tau_i."""
    q = quadratic_forms(C_hat, s.X)
    taus = np.asarray(s.taus, dtype=float)
    g_q = np.asarray(w.g(q))
    d = np.empty(s.n)
    positive = taus > 0
    d[positive] = g_q[positive] / taus[positive]
    if not np.all(positive):
        d[~positive] = quadratic_forms(C_hat, s.Z[:, ~positive])
    return d


def estimate(s: SampleSet, w: WeightFunction, cfg: EstimatorConfig) -> EstimateResult:
    """Run the configured route; 'both' returns the matrix result with the route gap recorded."""
    if cfg.route == 'matrix':
        return estimate_matrix_iteration(s, w, cfg)
    if cfg.route == 'd-vector':
        return estimate_d_iteration(s, w, cfg)

    by_matrix = estimate_matrix_iteration(s, w, cfg)
    by_d = estimate_d_iteration(s, w, cfg)
    gap = spectral_norm(by_matrix.C_hat - by_d.C_hat) / spectral_norm(by_matrix.C_hat)
    by_matrix.route = 'both'
    by_matrix.route_gap = gap
    by_matrix.converged = by_matrix.converged and by_d.converged
    logger.info(f"Route gap ||C_matrix - C_d|| / ||C_matrix|| = {gap:.3e}")
    return by_matrix
