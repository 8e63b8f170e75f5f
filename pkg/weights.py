"""
Weight functions for Maronna-type scatter estimation.

A weight function u downweights samples with a large normalized quadratic form.
Everything the large-dimensional analysis needs is derived from u and the aspect
ratio c = N/n of the data at hand:

    phi(x) = x u(x)                         increasing, bounded by phi_inf
    g(x)   = x / (1 - c phi(x))             increasing bijection of [0, inf)
    v(x)   = u(g^-1(x))                     non-increasing, positive
    psi(x) = x v(x)                         increasing, bounded by psi_inf

A WeightFunction is bound to one value of c; re-instantiate for another dataset.
"""

import logging
from typing import Union

import numpy as np

from models import WeightSpec
from config import config

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]

# Sampling grid used to vet caller-supplied weight functions
CUSTOM_CHECK_POINTS = 1024
CUSTOM_CHECK_RANGE = (1e-6, 1e9)
PHI_LIMIT_POINT = 1e9
PHI_LIMIT_SLACK = 1e-3

_MAX_BRACKET_DOUBLINGS = 200
_MAX_BISECTIONS = 200


class WeightError(Exception):
    """Custom exception for weight functions violating conditions (i)-(iii)."""
    pass


def _as_output(x_in, values: np.ndarray) -> ArrayLike:
    """Return a Python float for scalar input, the array otherwise."""
    if np.ndim(x_in) == 0:
        return float(values)
    return values


class WeightFunction:
    """Immutable weight function u with its derived transforms at aspect ratio c."""

    def __init__(self, spec: WeightSpec, c: float, phi_inf: float,
                 inversion_tol: float = config.inversion_tol):
        self.spec = spec
        self.c = float(c)
        self.phi_inf = float(phi_inf)
        self.psi_inf = self.phi_inf / (1.0 - self.c * self.phi_inf)
        self.inversion_tol = float(inversion_tol)

    def __repr__(self) -> str:
        return (f"WeightFunction(family={self.spec.family!r}, c={self.c:.6g}, "
                f"phi_inf={self.phi_inf:.6g}, psi_inf={self.psi_inf:.6g})")

    def u(self, x: ArrayLike) -> ArrayLike:
        t = np.asarray(x, dtype=float)
        if self.spec.family == 'student-type':
            alpha = self.spec.alpha
            values = (1.0 + alpha) / (alpha + t)
        else:
            values = np.asarray(self.spec.custom_u(t), dtype=float)
            if values.shape != t.shape:
                values = np.vectorize(lambda s: float(self.spec.custom_u(s)))(t)
        return _as_output(x, values)

    def phi(self, x: ArrayLike) -> ArrayLike:
        t = np.asarray(x, dtype=float)
        return _as_output(x, t * np.asarray(self.u(t)))

    def g(self, x: ArrayLike) -> ArrayLike:
        t = np.asarray(x, dtype=float)
        return _as_output(x, t / (1.0 - self.c * np.asarray(self.phi(t))))

    def g_inv(self, y: ArrayLike) -> ArrayLike:
        """Invert g elementwise; closed form for the student-type family, bisection otherwise."""
        target = np.asarray(y, dtype=float)
        if np.any(target < 0):
            raise ValueError("g^-1 is defined on [0, inf)")
        if self.spec.family == 'student-type':
            return _as_output(y, self._student_g_inv(target))
        return _as_output(y, self._bisect_g_inv(target))

    def _student_g_inv(self, y: np.ndarray) -> np.ndarray:
        # positive root of x^2 + (alpha - y + c y (1 + alpha)) x - alpha y = 0
        alpha = self.spec.alpha
        b = alpha - y + self.c * y * (1.0 + alpha)
        root = np.sqrt(b * b + 4.0 * alpha * y)
        with np.errstate(divide='ignore', invalid='ignore'):
            return np.where(b > 0, 2.0 * alpha * y / (b + root), 0.5 * (root - b))

    def _bisect_g_inv(self, target: np.ndarray) -> np.ndarray:
        """Bracketed bisection.

        Since 0 <= phi <= phi_inf, y (1 - c phi_inf) <= g^-1(y) <= y, which gives
        the starting bracket; it is widened if a custom u undershoots its
        declared limit.
        """
        hi = target.copy()
        for _ in range(_MAX_BRACKET_DOUBLINGS):
            short = np.asarray(self.g(hi)) < target
            if not np.any(short):
                break
            hi = np.where(short, 2.0 * hi, hi)

        lo = target * (1.0 - self.c * self.phi_inf)
        for _ in range(_MAX_BRACKET_DOUBLINGS):
            over = np.asarray(self.g(lo)) > target
            if not np.any(over):
                break
            lo = np.where(over, 0.5 * lo, lo)

        for _ in range(_MAX_BISECTIONS):
            mid = 0.5 * (lo + hi)
            above = np.asarray(self.g(mid)) >= target
            hi = np.where(above, mid, hi)
            lo = np.where(above, lo, mid)
            if np.all(hi - lo <= self.inversion_tol * hi):
                break
        return 0.5 * (lo + hi)

    def v(self, x: ArrayLike) -> ArrayLike:
        return _as_output(x, np.asarray(self.u(self.g_inv(x))))

    def psi(self, x: ArrayLike) -> ArrayLike:
        t = np.asarray(x, dtype=float)
        return _as_output(x, t * np.asarray(self.v(t)))

    def psi_from_phi(self, x: ArrayLike) -> ArrayLike:
        """psi through phi(g^-1(x)) / (1 - c phi(g^-1(x))), the second evaluation route."""
        p = np.asarray(self.phi(self.g_inv(x)))
        return _as_output(x, p / (1.0 - self.c * p))


def make_weight(spec: WeightSpec, c: float) -> WeightFunction:
    """Build a WeightFunction for aspect ratio c after checking conditions (i)-(iii)."""
    if not 0.0 < c < 1.0:
        raise WeightError(f"Aspect ratio c must lie in (0, 1), got {c}")

    if spec.family == 'student-type':
        if spec.alpha <= 0:
            raise WeightError(f"student-type weight needs alpha > 0, got {spec.alpha}")
        phi_inf = 1.0 + spec.alpha
    elif spec.family == 'custom':
        phi_inf = _vet_custom_weight(spec)
    else:
        raise WeightError(f"Unknown weight family: {spec.family}")

    if phi_inf <= 1.0:
        raise WeightError(f"phi_inf = {phi_inf:.6g} <= 1 violates condition (ii)")
    if phi_inf >= 1.0 / c:
        raise WeightError(
            f"phi_inf = {phi_inf:.6g} >= 1/c = {1.0 / c:.6g} violates condition (iii)")

    weight = WeightFunction(spec, c, phi_inf)
    logger.debug(f"Built {weight}")
    return weight


def _vet_custom_weight(spec: WeightSpec) -> float:
    """Sampled check of a black-box u; returns the declared phi_inf."""
    if spec.custom_u is None:
        raise WeightError("custom weight family needs custom_u")
    if spec.declared_phi_inf is None:
        raise WeightError("custom weight must declare phi_inf")
    if not spec.attested_increasing:
        raise WeightError("custom weight must attest that x*u(x) is strictly increasing")

    unbound = WeightFunction(spec, 0.0, spec.declared_phi_inf)
    grid = np.concatenate(([0.0], np.logspace(np.log10(CUSTOM_CHECK_RANGE[0]),
                                              np.log10(CUSTOM_CHECK_RANGE[1]),
                                              CUSTOM_CHECK_POINTS)))
    u_values = np.asarray(unbound.u(grid))
    if not np.all(np.isfinite(u_values)) or np.any(u_values <= 0):
        raise WeightError("custom u must be finite and positive on [0, inf) (condition (i))")
    if np.any(np.diff(u_values) > 0):
        raise WeightError("custom u must be non-increasing (condition (i))")
    phi_values = grid * u_values
    if np.any(np.diff(phi_values) <= 0):
        raise WeightError("x*u(x) must be strictly increasing on the check grid (condition (ii))")

    tail = float(unbound.phi(PHI_LIMIT_POINT))
    declared = float(spec.declared_phi_inf)
    if not tail <= declared <= tail * (1.0 + PHI_LIMIT_SLACK):
        raise WeightError(
            f"declared phi_inf = {declared:.6g} inconsistent with phi(1e9) = {tail:.6g}")
    return declared


def eval_phi(w: WeightFunction, x: ArrayLike) -> ArrayLike:
    """phi(x) = x u(x)."""
    return w.phi(x)


def eval_g(w: WeightFunction, x: ArrayLike) -> ArrayLike:
    """g(x) = x / (1 - c phi(x))."""
    return w.g(x)


def eval_g_inv(w: WeightFunction, y: ArrayLike) -> ArrayLike:
    return w.g_inv(y)


def eval_v(w: WeightFunction, x: ArrayLike) -> ArrayLike:
    """v(x) = u(g^-1(x))."""
    return w.v(x)


def eval_psi(w: WeightFunction, x: ArrayLike) -> ArrayLike:
    """psi(x) = x v(x)."""
    return w.psi(x)
