"""
Parallel-Beam Self-Calibration

Closed-form recovery of per-view detector shifts and projection angles from
the detected projections of a two-line marker rig.

Pipeline:
1. Per-group shifts: the mean detected position of each group.
2. Centred positions: every group is shifted to its own centre of mass.
3. Moments of order 2 and 3 of the centred positions, per view and group.
4. Reference angle from two views (known only up to the branch choice).
5. Rig coefficients a20, a02, a30, a03 from the reference view.
6. Every angle from its own view's moments and the coefficients.

The recovered angles are defined up to rotations of the scene and reflections;
``equivalent_solutions`` lists the four data-equivalent families.

Usage:
    from core.parallel_calib import calibrate_parallel

    result = calibrate_parallel(detections, branch=Branch.I)
    print(result.angles, result.shifts_all)
"""

import logging
import math
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import (
    DegenerateAngleError,
    DegenerateRigError,
    DegenerateViewError,
    DegenerateViewPairError,
    IncompleteViewError,
    InputError,
    InsufficientViewsError,
)
from .types import TWO_PI, PARALLEL_GROUPS, DiracProjection, Group, group_by_view

logger = logging.getLogger(__name__)

# --- Tolerances ---
PAIR_DETERMINANT_TOLERANCE = 1e-9
SIN2_CLIP_TOLERANCE = 1e-9
AXIS_TOLERANCE = 1e-6
VIEW_MOMENT_TOLERANCE = 1e-12
RIG_MOMENT_TOLERANCE = 1e-6
MIN_GROUP_SIZE = 3


class Branch(str, Enum):
    """Quadrant of the reference angle: I in (0, pi/2), II in (pi/2, pi)."""

    I = "I"  # noqa: E741
    II = "II"


@dataclass(frozen=True)
class RigCoefficients:
    """Second and third central moments of the two marker lines."""

    a20: float
    a02: float
    a30: float
    a03: float


@dataclass(frozen=True)
class ViewMoments:
    """Second and third moments of the centred positions, one entry per view."""

    m2h: np.ndarray
    m2v: np.ndarray
    m3h: np.ndarray
    m3v: np.ndarray


@dataclass(frozen=True)
class ParallelCalibResult:
    """Estimated parallel geometry for P views."""

    shifts_all: Tuple[float, ...]
    shifts_h: Tuple[float, ...]
    shifts_v: Tuple[float, ...]
    angles: Tuple[float, ...]
    branch: Branch
    coefficients: RigCoefficients
    reference_views: Tuple[int, int]
    sin2_alpha0: float
    unit_norm_deviation: Tuple[float, ...]

    @property
    def n_views(self) -> int:
        return len(self.angles)

    def to_dict(self) -> Dict:
        return {
            "geometry": "parallel",
            "branch": self.branch.value,
            "angles": list(self.angles),
            "shifts_all": list(self.shifts_all),
            "shifts_h": list(self.shifts_h),
            "shifts_v": list(self.shifts_v),
            "coefficients": asdict(self.coefficients),
            "reference_views": list(self.reference_views),
            "sin2_alpha0": self.sin2_alpha0,
            "diagnostics": {
                "unit_norm_deviation": list(self.unit_norm_deviation),
                "max_abs_unit_norm_deviation": max(
                    (abs(d) for d in self.unit_norm_deviation), default=0.0
                ),
            },
            "gauge_note": (
                "angles are defined up to a global rotation of the scene and the "
                "branch/reflection ambiguity; shifts_all assumes the rig's centre "
                "of mass is the origin"
            ),
        }


def dirac_moment(positions: Sequence[float], order: int) -> float:
    """Moment of order 0..3 of a Dirac projection: sum of positions**order."""
    if order not in (0, 1, 2, 3):
        raise InputError(f"Moment order must be 0..3, got {order}")
    if order == 0:
        return float(len(positions))
    return float(np.sum(np.asarray(positions, dtype=float) ** order))


def estimate_shift(group_positions: Sequence[float], group_size: Optional[int] = None) -> float:
    """
    Detector shift estimate of one group: the mean of its positions.

    Exact when the group's centre of mass is the frame origin.
    """
    n = len(group_positions)
    if n == 0:
        raise InputError("Cannot estimate a shift from an empty group")
    if group_size is not None and group_size != n:
        raise InputError(f"Expected {group_size} positions, got {n}")
    return dirac_moment(group_positions, 1) / n


def _pair_determinant(m2h_0, m2v_0, m2h_1, m2v_1):
    return m2h_0 * m2v_1 - m2h_1 * m2v_0


def estimate_alpha0(
    m2h_0: float,
    m2v_0: float,
    m2h_1: float,
    m2v_1: float,
    branch: Branch = Branch.I,
    view_indices: Tuple[int, int] = (0, 1),
) -> float:
    """
    Reference angle from the second moments of two views.

    sin^2(alpha0) = (M2h(0) - M2h(1)) M2v(0) / (M2h(0) M2v(1) - M2h(1) M2v(0))

    Args:
        m2h_0, m2v_0: Centred second moments of the reference view
        m2h_1, m2v_1: Centred second moments of the second view
        branch: Quadrant of the returned angle
        view_indices: Reported on errors

    Returns:
        alpha0 in (0, pi/2) for branch I, pi minus that for branch II

    Raises:
        DegenerateViewPairError: The two views do not determine alpha0
    """
    denominator = _pair_determinant(m2h_0, m2v_0, m2h_1, m2v_1)
    if abs(denominator) < PAIR_DETERMINANT_TOLERANCE * abs(m2h_0 * m2v_1) or denominator == 0.0:
        raise DegenerateViewPairError(
            f"Views {view_indices[0]} and {view_indices[1]} do not constrain the "
            f"reference angle (determinant {denominator:.3e})",
            view_indices=view_indices,
        )
    quotient = (m2h_0 - m2h_1) * m2v_0 / denominator
    if quotient < 0.0 or quotient > 1.0:
        if -SIN2_CLIP_TOLERANCE <= quotient <= 1.0 + SIN2_CLIP_TOLERANCE:
            logger.warning(f"Clipping sin^2(alpha0)={quotient!r} into [0, 1]")
            quotient = min(max(quotient, 0.0), 1.0)
        else:
            raise DegenerateViewPairError(
                f"sin^2(alpha0)={quotient:.6g} from views {view_indices[0]} and "
                f"{view_indices[1]} is outside [0, 1]",
                view_indices=view_indices,
            )
    alpha0 = math.asin(math.sqrt(quotient))
    if Branch(branch) is Branch.II:
        alpha0 = math.pi - alpha0
    return alpha0


def estimate_coefficients(
    m2h_0: float, m2v_0: float, m3h_0: float, m3v_0: float, alpha0: float,
    view_index: int = 0,
) -> RigCoefficients:
    """
    Rig coefficients from the reference view and its angle.

    a20 = M2h / cos^2, a02 = M2v / sin^2, a30 = M3h / cos^3, a03 = M3v / sin^3.

    Raises:
        DegenerateAngleError: alpha0 lies on a coordinate axis
    """
    cos0, sin0 = math.cos(alpha0), math.sin(alpha0)
    if abs(cos0) < AXIS_TOLERANCE or abs(sin0) < AXIS_TOLERANCE:
        raise DegenerateAngleError(
            f"Reference angle {alpha0:.6g} rad lies on a coordinate axis",
            view_indices=[view_index],
        )
    return RigCoefficients(
        a20=m2h_0 / cos0**2,
        a02=m2v_0 / sin0**2,
        a30=m3h_0 / cos0**3,
        a03=m3v_0 / sin0**3,
    )


def angle_components(
    moments: ViewMoments, coefficients: RigCoefficients,
    view_indices: Optional[Sequence[int]] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-view estimates of (cos alpha_i, sin alpha_i).

    cos = a20 M3h(i) / (a30 M2h(i)), sin = a02 M3v(i) / (a03 M2v(i)).

    Raises:
        DegenerateRigError: a30 or a03 vanishes
        DegenerateViewError: A view collapses one group to a point
    """
    c = coefficients
    indices = np.arange(len(moments.m2h)) if view_indices is None else np.asarray(view_indices)
    if abs(c.a30) < RIG_MOMENT_TOLERANCE * abs(c.a20) ** 1.5:
        raise DegenerateRigError("h-group third moment a30 vanishes; angles unidentifiable")
    if abs(c.a03) < RIG_MOMENT_TOLERANCE * abs(c.a02) ** 1.5:
        raise DegenerateRigError("v-group third moment a03 vanishes; angles unidentifiable")

    flat = (moments.m2h < VIEW_MOMENT_TOLERANCE * abs(c.a20)) | (
        moments.m2v < VIEW_MOMENT_TOLERANCE * abs(c.a02)
    )
    if np.any(flat):
        bad = indices[flat].tolist()
        raise DegenerateViewError(
            f"View(s) {bad} are axis-aligned: a marker group projects to a point",
            view_indices=bad,
        )
    cos_est = c.a20 * moments.m3h / (c.a30 * moments.m2h)
    sin_est = c.a02 * moments.m3v / (c.a03 * moments.m2v)
    return cos_est, sin_est


def estimate_angles(
    moments: ViewMoments, coefficients: RigCoefficients,
    view_indices: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """Projection angle of every view in [0, 2 pi), via atan2 of the two components."""
    cos_est, sin_est = angle_components(moments, coefficients, view_indices)
    return np.mod(np.arctan2(sin_est, cos_est), TWO_PI)


def view_moments(h_centered: np.ndarray, v_centered: np.ndarray) -> ViewMoments:
    """Moments of centred positions arranged as (P, n_h) and (P, n_v) arrays."""
    return ViewMoments(
        m2h=np.sum(h_centered**2, axis=1),
        m2v=np.sum(v_centered**2, axis=1),
        m3h=np.sum(h_centered**3, axis=1),
        m3v=np.sum(v_centered**3, axis=1),
    )


def _stack_group(views: List[Dict[Group, DiracProjection]], group: Group) -> np.ndarray:
    sizes = [len(view[group].positions) for view in views]
    expected = max(sizes)
    short = [i for i, n in enumerate(sizes) if n != expected]
    if short:
        raise IncompleteViewError(
            f"View(s) {short} have fewer {group.value}-group markers than the "
            f"{expected} found elsewhere",
            view_indices=short,
        )
    if expected < MIN_GROUP_SIZE:
        raise DegenerateRigError(
            f"{group.value}-group has {expected} marker(s); at least "
            f"{MIN_GROUP_SIZE} are needed for a non-zero third moment"
        )
    return np.array([view[group].positions for view in views], dtype=float)


def select_reference_pair(moments: ViewMoments) -> Tuple[int, int]:
    """
    View pair with the best-conditioned reference-angle system.

    Maximises |M2h(i) M2v(j) - M2h(j) M2v(i)| / (M2h(i) M2v(j) + M2h(j) M2v(i)).
    """
    m2h, m2v = moments.m2h, moments.m2v
    cross = np.outer(m2h, m2v)
    scale = cross + cross.T
    with np.errstate(divide="ignore", invalid="ignore"):
        relative = np.where(scale > 0.0, np.abs(cross - cross.T) / scale, 0.0)
    i, j = np.unravel_index(np.argmax(np.triu(relative, k=1)), relative.shape)
    return int(i), int(j)


def calibrate_parallel(
    detections: Iterable[DiracProjection],
    branch: Branch = Branch.I,
    reference_pair: Tuple[int, int] = (0, 1),
    scan_pairs: bool = False,
) -> ParallelCalibResult:
    """
    Recover all detector shifts and projection angles.

    Args:
        detections: Grouped (H and V) projections of P >= 2 views
        branch: Quadrant of the reference view's angle
        reference_pair: Views used for the reference-angle system; the first
            one is the reference view
        scan_pairs: Choose the best-conditioned pair instead of reference_pair

    Returns:
        ParallelCalibResult

    Raises:
        SolverError subclasses, annotated with the offending view indices
    """
    branch = Branch(branch)
    views = group_by_view(detections, PARALLEL_GROUPS)
    n_views = len(views)
    if n_views < 2:
        raise InsufficientViewsError(f"Need at least 2 views, got {n_views}")

    h_positions = _stack_group(views, Group.H)
    v_positions = _stack_group(views, Group.V)

    shifts_h = h_positions.mean(axis=1)
    shifts_v = v_positions.mean(axis=1)
    shifts_all = np.hstack([h_positions, v_positions]).mean(axis=1)

    moments = view_moments(
        h_positions - shifts_h[:, None], v_positions - shifts_v[:, None]
    )

    if scan_pairs:
        ref, other = select_reference_pair(moments)
        logger.debug(f"Best-conditioned reference pair: views {ref} and {other}")
    else:
        ref, other = reference_pair
    if not (0 <= ref < n_views and 0 <= other < n_views) or ref == other:
        raise InputError(f"Invalid reference pair ({ref}, {other}) for {n_views} views")

    denominator = _pair_determinant(
        moments.m2h[ref], moments.m2v[ref], moments.m2h[other], moments.m2v[other]
    )
    sin2_alpha0 = (
        (moments.m2h[ref] - moments.m2h[other]) * moments.m2v[ref] / denominator
        if denominator != 0.0
        else float("nan")
    )
    alpha0 = estimate_alpha0(
        moments.m2h[ref], moments.m2v[ref], moments.m2h[other], moments.m2v[other],
        branch=branch, view_indices=(ref, other),
    )
    coefficients = estimate_coefficients(
        moments.m2h[ref], moments.m2v[ref], moments.m3h[ref], moments.m3v[ref],
        alpha0, view_index=ref,
    )
    logger.debug(f"alpha0={alpha0:.12g} rad, coefficients={coefficients}")

    cos_est, sin_est = angle_components(moments, coefficients)
    angles = np.mod(np.arctan2(sin_est, cos_est), TWO_PI)
    deviation = cos_est**2 + sin_est**2 - 1.0

    logger.info(
        f"Parallel calibration of {n_views} views finished (branch {branch.value}, "
        f"max |cos^2+sin^2-1| = {np.max(np.abs(deviation)):.3e})"
    )
    return ParallelCalibResult(
        shifts_all=tuple(shifts_all.tolist()),
        shifts_h=tuple(shifts_h.tolist()),
        shifts_v=tuple(shifts_v.tolist()),
        angles=tuple(angles.tolist()),
        branch=branch,
        coefficients=coefficients,
        reference_views=(ref, other),
        sin2_alpha0=float(sin2_alpha0),
        unit_norm_deviation=tuple(deviation.tolist()),
    )


def equivalent_solutions(
    result: ParallelCalibResult,
) -> List[Tuple[np.ndarray, np.ndarray]]:
    """
    The four (angles, shifts) families that explain the same detected data.

    (alpha, s), (pi - alpha, s), (alpha + pi, -s) and (-alpha, -s), each with
    angles in [0, 2 pi). The second family belongs to the rig reflected
    across the x2 axis; the last two are the first two seen through a
    reversed detector axis (evenness of projections).
    """
    alpha = np.asarray(result.angles)
    shifts = np.asarray(result.shifts_all)
    return [
        (alpha.copy(), shifts.copy()),
        (np.mod(math.pi - alpha, TWO_PI), shifts.copy()),
        (np.mod(alpha + math.pi, TWO_PI), -shifts),
        (np.mod(-alpha, TWO_PI), -shifts),
    ]

