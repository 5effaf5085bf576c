"""
Data Consistency Checks on Marker Projections

Moments of consistent projection data follow polynomial laws across views:

- parallel: the order-k moment of a (shift-corrected) projection is a
  homogeneous polynomial of degree k in (cos alpha, sin alpha)
- fan-beam, sources on a line: the weighted order-k moment sum_j w_j y_j^k is
  a polynomial of degree at most k in the source position lambda

Each order is fitted by least squares; a fit whose RMS residual exceeds
max(abs_tol, rel_tol * RMS(moments)) fails. Leave-one-out refits point at the
view that breaks the law. These laws are necessary conditions only: a passing
report flags no inconsistency, it does not certify the data.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial import Polynomial

from config import settings

from .exceptions import InputError, InsufficientViewsError, RankDeficientError
from .types import TWO_PI, Geometry

logger = logging.getLogger(__name__)

DISTINCT_ANGLE_TOLERANCE = 1e-12
OPPOSITE_VIEW_TOLERANCE = 1e-9

NECESSARY_ONLY_NOTE = (
    "moment laws are necessary conditions: a pass means no inconsistency was "
    "found, not that the data are consistent"
)


@dataclass(frozen=True)
class OrderFit:
    """Fit of the order-k moments of all views."""

    order: int
    coefficients: Tuple[float, ...]
    rms_residual: float
    threshold: float
    passed: bool
    leave_one_out_drop: Tuple[float, ...] = ()
    suspect_view: Optional[int] = None

    def to_dict(self) -> Dict:
        return {
            "order": self.order,
            "coefficients": list(self.coefficients),
            "rms_residual": self.rms_residual,
            "threshold": self.threshold,
            "passed": self.passed,
            "leave_one_out_drop": list(self.leave_one_out_drop),
            "suspect_view": self.suspect_view,
        }


@dataclass(frozen=True)
class EvennessCheck:
    """Paired-view test p(alpha + pi, s) = p(alpha, -s)."""

    testable: bool
    pairs: Tuple[Tuple[int, int], ...] = ()
    max_deviation: float = 0.0
    passed: bool = True
    note: str = ""

    def to_dict(self) -> Dict:
        return {
            "testable": self.testable,
            "pairs": [list(p) for p in self.pairs],
            "max_deviation": self.max_deviation,
            "passed": self.passed,
            "note": self.note,
        }


@dataclass(frozen=True)
class ConsistencyReport:
    geometry: Geometry
    orders: Tuple[OrderFit, ...]
    evenness: Optional[EvennessCheck] = None
    note: str = field(default=NECESSARY_ONLY_NOTE)

    @property
    def passed(self) -> bool:
        even_ok = self.evenness is None or self.evenness.passed
        return even_ok and all(fit.passed for fit in self.orders)

    @property
    def first_failing_order(self) -> Optional[int]:
        return next((fit.order for fit in self.orders if not fit.passed), None)

    @property
    def suspect_view(self) -> Optional[int]:
        """Leave-one-out suspect at the first failing order."""
        return next((fit.suspect_view for fit in self.orders if not fit.passed), None)

    def to_dict(self) -> Dict:
        return {
            "geometry": self.geometry.value,
            "passed": self.passed,
            "first_failing_order": self.first_failing_order,
            "suspect_view": self.suspect_view,
            "orders": [fit.to_dict() for fit in self.orders],
            "evenness": None if self.evenness is None else self.evenness.to_dict(),
            "note": self.note,
        }


def _rms(values: np.ndarray) -> float:
    return float(np.sqrt(np.mean(values**2))) if len(values) else 0.0


def polynomial_fit(
    xs: Sequence[float],
    ys: Sequence[float],
    degree: Optional[int] = None,
    basis: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, float]:
    """
    Least-squares fit by orthogonal decomposition.

    Either a polynomial degree in xs (fitted on a scaled domain and returned as
    power-series coefficients, lowest first) or an explicit design matrix.

    Returns:
        (coefficients, RMS residual)

    Raises:
        InsufficientViewsError: Fewer samples than unknowns
        RankDeficientError: The design matrix does not have full column rank
    """
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if (degree is None) == (basis is None):
        raise InputError("polynomial_fit needs exactly one of degree or basis")

    if basis is not None:
        design = np.asarray(basis, dtype=float)
        n_unknowns = design.shape[1]
        if len(y) < n_unknowns:
            raise InsufficientViewsError(f"{len(y)} samples for {n_unknowns} unknowns")
        coefficients, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
        if rank < n_unknowns:
            raise RankDeficientError(f"Design matrix rank {rank} < {n_unknowns}")
        return coefficients, _rms(y - design @ coefficients)

    n_unknowns = degree + 1
    if len(np.unique(x)) < n_unknowns:
        raise InsufficientViewsError(
            f"{len(np.unique(x))} distinct abscissae for degree {degree}"
        )
    poly, (_, rank, _, _) = Polynomial.fit(x, y, degree, full=True)
    if rank < n_unknowns:
        raise RankDeficientError(f"Vandermonde rank {rank} < {n_unknowns}")
    residual = _rms(y - poly(x))
    coefficients = np.zeros(n_unknowns)
    converted = poly.convert().coef
    coefficients[: len(converted)] = converted
    return coefficients, residual


def homogeneous_basis(alphas: np.ndarray, order: int) -> np.ndarray:
    """Columns cos^(k-j) sin^j, j = 0 .. k."""
    c, s = np.cos(alphas), np.sin(alphas)
    return np.column_stack([c ** (order - j) * s**j for j in range(order + 1)])


def _threshold(moments: np.ndarray, abs_tol: float, rel_tol: float) -> float:
    return max(abs_tol, rel_tol * _rms(moments))


def _fit_order(
    order: int,
    xs: np.ndarray,
    moments: np.ndarray,
    fit,
    abs_tol: float,
    rel_tol: float,
) -> OrderFit:
    coefficients, residual = fit(xs, moments)
    threshold = _threshold(moments, abs_tol, rel_tol)
    passed = residual <= threshold

    drops = []
    for i in range(len(xs)):
        keep = np.arange(len(xs)) != i
        try:
            _, loo_residual = fit(xs[keep], moments[keep])
        except (InsufficientViewsError, RankDeficientError):
            loo_residual = residual
        drops.append(residual - loo_residual)
    suspect = int(np.argmax(drops)) if drops and not passed else None

    logger.debug(
        f"Order {order}: rms residual {residual:.3e} (threshold {threshold:.3e})"
        + ("" if passed else f", suspect view {suspect}")
    )
    return OrderFit(
        order=order,
        coefficients=tuple(np.asarray(coefficients).tolist()),
        rms_residual=residual,
        threshold=threshold,
        passed=passed,
        leave_one_out_drop=tuple(drops),
        suspect_view=suspect,
    )


def _count_distinct(values: np.ndarray, tolerance: float) -> int:
    ordered = np.sort(values)
    return 1 + int(np.sum(np.diff(ordered) > tolerance)) if len(ordered) else 0


def _tolerances(abs_tol: Optional[float], rel_tol: Optional[float]) -> Tuple[float, float]:
    return (
        settings.DCC_ABS_TOL if abs_tol is None else abs_tol,
        settings.DCC_REL_TOL if rel_tol is None else rel_tol,
    )


def parallel_evenness(
    alphas: np.ndarray, positions: Sequence[np.ndarray], tolerance: float
) -> EvennessCheck:
    """Compare views at alpha and alpha + pi: positions must be negatives."""
    pairs = []
    deviation = 0.0
    for i, j in ((i, j) for i in range(len(alphas)) for j in range(len(alphas)) if i != j):
        gap = math.remainder(alphas[j] - alphas[i] - math.pi, TWO_PI)
        if abs(gap) > OPPOSITE_VIEW_TOLERANCE or i > j:
            continue
        pi_, pj = np.sort(positions[i]), np.sort(-np.asarray(positions[j]))
        if len(pi_) != len(pj):
            deviation = math.inf
        else:
            deviation = max(deviation, float(np.max(np.abs(pi_ - pj), initial=0.0)))
        pairs.append((i, j))
    if not pairs:
        return EvennessCheck(testable=False, note="not testable on this view set")
    return EvennessCheck(
        testable=True,
        pairs=tuple(pairs),
        max_deviation=deviation,
        passed=deviation <= tolerance,
    )


def parallel_moment_consistency(
    views: Sequence[Tuple[float, Sequence[float]]],
    k_max: int = 3,
    abs_tol: Optional[float] = None,
    rel_tol: Optional[float] = None,
) -> ConsistencyReport:
    """
    Check the homogeneous-polynomial law of parallel projection moments.

    Args:
        views: (alpha_i, shift-corrected marker positions) per view
        k_max: Highest moment order checked
        abs_tol, rel_tol: Pass threshold (defaults from settings)

    Raises:
        InsufficientViewsError: Fewer than k + 1 distinct angles for some order
        RankDeficientError: The angle set cannot separate the basis functions
    """
    abs_tol, rel_tol = _tolerances(abs_tol, rel_tol)
    alphas = np.array([float(a) for a, _ in views])
    positions = [np.asarray(p, dtype=float) for _, p in views]
    distinct = _count_distinct(np.mod(alphas, TWO_PI), DISTINCT_ANGLE_TOLERANCE)

    fits = []
    for order in range(k_max + 1):
        if distinct < order + 1:
            raise InsufficientViewsError(
                f"Order {order} needs {order + 1} distinct angles, got {distinct}"
            )
        moments = np.array([np.sum(p**order) for p in positions])

        def fit(xs, ys, order=order):
            return polynomial_fit(xs, ys, basis=homogeneous_basis(xs, order))

        fits.append(_fit_order(order, alphas, moments, fit, abs_tol, rel_tol))

    scale = max((float(np.max(np.abs(p), initial=0.0)) for p in positions), default=0.0)
    evenness = parallel_evenness(alphas, positions, max(abs_tol, rel_tol * scale))
    report = ConsistencyReport(Geometry.PARALLEL, tuple(fits), evenness)
    logger.info(
        f"Parallel consistency check of {len(views)} views up to order {k_max}: "
        f"{'pass' if report.passed else 'FAIL'}"
    )
    return report


def fanbeam_moment_consistency(
    views: Sequence[Tuple[float, Sequence[float], Sequence[float]]],
    k_max: int = 3,
    abs_tol: Optional[float] = None,
    rel_tol: Optional[float] = None,
    expected_mass: Optional[float] = None,
) -> ConsistencyReport:
    """
    Check the polynomial-in-lambda law of weighted fan-beam moments.

    Args:
        views: (lambda_i, jitter-corrected positions, weights) per view
        k_max: Highest moment order checked
        abs_tol, rel_tol: Pass threshold (defaults from settings)
        expected_mass: Known order-0 mass (sum over lines of 4 / (D - C_l));
            a constant fit that misses it fails

    Raises:
        InsufficientViewsError: Fewer than k + 1 distinct source positions
        RankDeficientError: Vandermonde rank loss
    """
    abs_tol, rel_tol = _tolerances(abs_tol, rel_tol)
    lambdas = np.array([float(lam) for lam, _, _ in views])
    positions = [np.asarray(p, dtype=float) for _, p, _ in views]
    weights = [np.asarray(w, dtype=float) for _, _, w in views]
    for i, (p, w) in enumerate(zip(positions, weights)):
        if len(p) != len(w):
            raise InputError(f"View {i}: {len(w)} weights for {len(p)} positions")

    fits = []
    for order in range(k_max + 1):
        moments = np.array([np.sum(w * p**order) for p, w in zip(positions, weights)])

        def fit(xs, ys, order=order):
            return polynomial_fit(xs, ys, degree=order)

        order_fit = _fit_order(order, lambdas, moments, fit, abs_tol, rel_tol)
        if order == 0 and expected_mass is not None:
            miss = abs(order_fit.coefficients[0] - expected_mass)
            if miss > order_fit.threshold:
                logger.warning(
                    f"Order-0 mass {order_fit.coefficients[0]:.12g} misses the "
                    f"expected {expected_mass:.12g}"
                )
                order_fit = OrderFit(
                    order=0,
                    coefficients=order_fit.coefficients,
                    rms_residual=order_fit.rms_residual,
                    threshold=order_fit.threshold,
                    passed=False,
                    leave_one_out_drop=order_fit.leave_one_out_drop,
                    suspect_view=None,
                )
        fits.append(order_fit)

    report = ConsistencyReport(Geometry.FANBEAM, tuple(fits))
    logger.info(
        f"Fan-beam consistency check of {len(views)} views up to order {k_max}: "
        f"{'pass' if report.passed else 'FAIL'}"
    )
    return report


def group_positions_by_view(
    projections: Sequence, n_views: int
) -> Tuple[List[np.ndarray], List[Optional[np.ndarray]]]:
    """Concatenate every group's positions (and weights) per view index."""
    positions: List[List[float]] = [[] for _ in range(n_views)]
    weights: List[Optional[List[float]]] = [[] for _ in range(n_views)]
    for projection in projections:
        i = projection.view_index
        if not 0 <= i < n_views:
            raise InputError(f"Projection of view {i} but only {n_views} views are known")
        positions[i].extend(projection.positions)
        if projection.weights is None or weights[i] is None:
            weights[i] = None
        else:
            weights[i].extend(projection.weights)
    return (
        [np.asarray(p) for p in positions],
        [None if w is None else np.asarray(w) for w in weights],
    )
