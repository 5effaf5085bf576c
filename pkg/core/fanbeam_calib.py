"""
Fan-Beam Self-Calibration (sources on a line)

Closed-form recovery of the per-view source positions and detector jitters
together with the placement (C_a, p_a, C_b, p_b) of a two-line marker rig,
given the distance D and the rig's marker pattern (L, k1, k2, k3).

With r_l = C_l / (D - C_l), every detected position on line l reads

    v = (1 + r_l)(p_l + offset) + (y_i - r_l lambda_i)

so line sums give the per-view offsets y_i - r_l lambda_i, and centred second
moments give (1 + r_l)^2. Results are expressed in the gauge lambda_0 = 0,
y_0 = 0 and hold up to the shear/translation and depth-scaling families that
leave the data unchanged.

Key Capabilities:
- Cross-ratio classification of 8 unlabelled positions into the two lines
- Magnification estimate from one reference view or averaged over all views
- Rig placement and per-view (lambda, y) from two linear equations per view

Usage:
    from core.fanbeam_calib import calibrate_fanbeam

    result = calibrate_fanbeam(detections, pattern=rig.pattern, D=rig.D)
    print(result.lambdas, result.jitters, result.C_a, result.C_b)
"""

import logging
import math
from dataclasses import dataclass
from itertools import combinations
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from config import settings

from .exceptions import (
    ClassificationError,
    DegeneratePointsError,
    DegenerateViewPairError,
    IncompleteViewError,
    InputError,
    InsufficientViewsError,
    NegativeDiscriminantError,
    SingularSystemError,
)
from .types import (
    FANBEAM_GROUPS,
    DiracProjection,
    FanBeamPattern,
    Group,
    group_by_view,
)

logger = logging.getLogger(__name__)

MARKERS_PER_LINE = 4
COINCIDENT_POINT_TOLERANCE = 1e-12
MAGNIFICATION_CLAMP_TOLERANCE = 1e-9
SINGULAR_SYSTEM_TOLERANCE = 1e-9
STATIC_VIEW_TOLERANCE = 1e-12
# Partitions whose match scores differ by less than this are indistinguishable
AMBIGUITY_TOLERANCE = 1e-9

GAUGE_NOTE = (
    "lambda and y are relative to view 0 (lambda_0 = 0, y_0 = 0); p_a and p_b "
    "are sheared accordingly; depths hold for the given D, which data cannot "
    "determine"
)


@dataclass(frozen=True)
class FanBeamCalibResult:
    """Estimated fan-beam geometry for P views, in the view-0 gauge."""

    lambdas: Tuple[float, ...]
    jitters: Tuple[float, ...]
    C_a: float
    C_b: float
    p_a: float
    p_b: float
    r_a: float
    r_b: float
    D: float
    reference_view: Optional[int]
    delta_m_a: Tuple[float, ...]
    delta_m_b: Tuple[float, ...]
    classified: bool = False
    gauge_note: str = GAUGE_NOTE

    @property
    def n_views(self) -> int:
        return len(self.lambdas)

    def to_dict(self) -> Dict:
        return {
            "geometry": "fanbeam",
            "lambdas": list(self.lambdas),
            "jitters": list(self.jitters),
            "rig": {"C_a": self.C_a, "C_b": self.C_b, "p_a": self.p_a, "p_b": self.p_b},
            "intermediates": {
                "r_a": self.r_a,
                "r_b": self.r_b,
                "delta_m_a": list(self.delta_m_a),
                "delta_m_b": list(self.delta_m_b),
                "reference_view": self.reference_view,
                "averaged": self.reference_view is None,
                "classified": self.classified,
            },
            "D": self.D,
            "gauge_note": self.gauge_note,
        }


def cross_ratio(z1: float, z2: float, z3: float, z4: float) -> float:
    """
    Cross-ratio |z1 z2| |z3 z4| / (|z1 z3| |z2 z4|) of four collinear points.

    Raises:
        DegeneratePointsError: Two of the points coincide
    """
    points = np.array([z1, z2, z3, z4], dtype=float)
    gaps = np.abs(points[:, None] - points[None, :])
    scale = float(np.max(gaps))
    off_diagonal = gaps[~np.eye(4, dtype=bool)]
    if scale == 0.0 or np.min(off_diagonal) <= COINCIDENT_POINT_TOLERANCE * scale:
        raise DegeneratePointsError(f"Coincident points in {points.tolist()}")
    return float(gaps[0, 1] * gaps[2, 3] / (gaps[0, 2] * gaps[1, 3]))


def pattern_cross_ratios(pattern: FanBeamPattern) -> Tuple[float, float]:
    """Cross-ratios of line A ((k1-1)/(k1+1))^2 and line B ((k3-k2)/(k3+k2))^2."""
    return (
        cross_ratio(*pattern.offsets(Group.A)),
        cross_ratio(*pattern.offsets(Group.B)),
    )


def classify_groups(
    positions: Sequence[float],
    pattern: FanBeamPattern,
    tolerance: Optional[float] = None,
    view_index: Optional[int] = None,
) -> Tuple[Tuple[float, ...], Tuple[float, ...]]:
    """
    Split 8 detected positions into the A and B lines by their cross-ratios.

    All 35 balanced partitions into ascending quadruples are scored by the
    larger relative deviation of their cross-ratios from the pattern values.
    The best-scoring labelled split wins; the tolerance only rejects data
    where even the best split is far from the pattern.

    Args:
        positions: 8 detector coordinates, in any order
        pattern: Known marker pattern
        tolerance: Relative gate on the best score (defaults to
            settings.CROSS_RATIO_TOLERANCE)
        view_index: Reported on errors

    Returns:
        (line-A quadruple, line-B quadruple), both ascending

    Raises:
        ClassificationError: No partition matches, or two partitions match
            equally well
    """
    tol = settings.CROSS_RATIO_TOLERANCE if tolerance is None else tolerance
    where = [] if view_index is None else [view_index]
    label = "" if view_index is None else f"View {view_index}: "
    points = sorted(float(p) for p in positions)
    if len(points) != 2 * MARKERS_PER_LINE:
        raise ClassificationError(
            f"{label}expected {2 * MARKERS_PER_LINE} positions, got {len(points)}",
            view_indices=where,
        )
    target_a, target_b = pattern_cross_ratios(pattern)

    scored = []
    for first in combinations(range(1, 8), 3):
        chosen = (0,) + first
        quad = tuple(points[i] for i in chosen)
        rest = tuple(points[i] for i in range(8) if i not in chosen)
        try:
            cr_quad, cr_rest = cross_ratio(*quad), cross_ratio(*rest)
        except DegeneratePointsError as e:
            raise DegeneratePointsError(f"{label}{e}", view_indices=where) from e
        for line_a, line_b, cr_a, cr_b in (
            (quad, rest, cr_quad, cr_rest),
            (rest, quad, cr_rest, cr_quad),
        ):
            score = max(abs(cr_a - target_a) / target_a, abs(cr_b - target_b) / target_b)
            scored.append((score, line_a, line_b))

    scored.sort(key=lambda m: m[0])
    best, line_a, line_b = scored[0]
    if best > tol:
        raise ClassificationError(
            f"{label}no split of the 8 positions matches cross-ratios "
            f"{target_a:.6g} and {target_b:.6g} within {tol:g} (best {best:.3g})",
            view_indices=where,
        )
    tied = sum(1 for s, _, _ in scored if s - best <= AMBIGUITY_TOLERANCE)
    if tied > 1:
        raise ClassificationError(
            f"{label}{tied} splits match the pattern equally well",
            view_indices=where,
        )
    return line_a, line_b


def delta_m1(line_view_i: Sequence[float], line_view_0: Sequence[float]) -> float:
    """Quarter of the difference of the line sums of view i and view 0."""
    if len(line_view_i) != MARKERS_PER_LINE or len(line_view_0) != MARKERS_PER_LINE:
        raise InputError(
            f"Each line needs {MARKERS_PER_LINE} positions, got "
            f"{len(line_view_i)} and {len(line_view_0)}"
        )
    return (math.fsum(line_view_i) - math.fsum(line_view_0)) / MARKERS_PER_LINE


def _magnification_to_r(R: float, group: Group, view_indices: Sequence[int]) -> float:
    if R < 1.0:
        if R >= 1.0 - MAGNIFICATION_CLAMP_TOLERANCE:
            logger.warning(f"Clamping (1 + r_{group.value.lower()})^2 = {R!r} to 1")
            R = 1.0
        else:
            raise NegativeDiscriminantError(
                f"(1 + r_{group.value.lower()})^2 = {R:.6g} is below 1",
                view_indices=view_indices,
            )
    return math.sqrt(R) - 1.0


def _line_magnification(
    line_0: np.ndarray, line_i: np.ndarray, factor: float, L: float
) -> float:
    """
    (1 + r)^2 from view 0 and view i of one line.

    sum v_i^2 - (sum v_0)^2 / 4 - 2 dM sum v_0 - 4 dM^2 = (1 + r)^2 factor L^2
    """
    dm = (np.sum(line_i, axis=-1) - np.sum(line_0)) / MARKERS_PER_LINE
    sum_0 = np.sum(line_0)
    lhs = (
        np.sum(line_i**2, axis=-1)
        - sum_0**2 / MARKERS_PER_LINE
        - 2.0 * dm * sum_0
        - MARKERS_PER_LINE * dm**2
    )
    return float(np.mean(lhs) / (factor * L**2))


def solve_r(
    line_a: Tuple[Sequence[float], Sequence[float]],
    line_b: Tuple[Sequence[float], Sequence[float]],
    pattern: FanBeamPattern,
    view_index: int = 1,
) -> Tuple[float, float]:
    """
    Depth ratios r_a, r_b from one reference view i and view 0.

    Args:
        line_a: (view-0 positions, view-i positions) of line A
        line_b: (view-0 positions, view-i positions) of line B
        pattern: Known marker pattern
        view_index: Index of view i, reported on errors

    Raises:
        DegenerateViewPairError: View i does not move with respect to view 0
        NegativeDiscriminantError: (1 + r)^2 below 1
    """
    a0, ai = (np.asarray(x, dtype=float) for x in line_a)
    b0, bi = (np.asarray(x, dtype=float) for x in line_b)
    _check_reference_moves(a0, ai, b0, bi, pattern, view_index)
    return _solve_r_from_views(a0, ai[None, :], b0, bi[None, :], pattern, [0, view_index])


def solve_r_averaged(
    lines_a: np.ndarray, lines_b: np.ndarray, pattern: FanBeamPattern
) -> Tuple[float, float]:
    """
    Depth ratios from all views: least-squares over the equations of views i >= 1.

    Args:
        lines_a, lines_b: (P, 4) arrays of detected positions per line
    """
    return _solve_r_from_views(
        lines_a[0], lines_a[1:], lines_b[0], lines_b[1:], pattern,
        list(range(len(lines_a))),
    )


def _check_reference_moves(a0, ai, b0, bi, pattern, view_index):
    scale = max(float(np.max(np.abs(np.concatenate([a0, b0])))), pattern.L)
    dm_a = (np.sum(ai) - np.sum(a0)) / MARKERS_PER_LINE
    dm_b = (np.sum(bi) - np.sum(b0)) / MARKERS_PER_LINE
    if abs(dm_a) <= STATIC_VIEW_TOLERANCE * scale and abs(dm_b) <= STATIC_VIEW_TOLERANCE * scale:
        raise DegenerateViewPairError(
            f"View {view_index} repeats view 0; it cannot fix the magnifications",
            view_indices=[0, view_index],
        )


def _solve_r_from_views(a0, a_views, b0, b_views, pattern, view_indices):
    R_a = _line_magnification(a0, a_views, pattern.second_moment_factor(Group.A), pattern.L)
    R_b = _line_magnification(b0, b_views, pattern.second_moment_factor(Group.B), pattern.L)
    r_a = _magnification_to_r(R_a, Group.A, view_indices)
    r_b = _magnification_to_r(R_b, Group.B, view_indices)
    logger.debug(f"(1+r)^2: A={R_a:.12g}, B={R_b:.12g}; r_a={r_a:.12g}, r_b={r_b:.12g}")
    return r_a, r_b


def recover_rig_positions(
    r_a: float, r_b: float, sum_a0: float, sum_b0: float, D: float
) -> Tuple[float, float, float, float]:
    """
    Rig placement from the depth ratios and the view-0 line sums.

    C_l = D r_l / (1 + r_l), p_l = sum_l / (4 (1 + r_l)).

    Returns:
        (C_a, C_b, p_a, p_b)
    """
    if r_a < 0.0 or r_b < 0.0:
        raise InputError(f"Depth ratios must be non-negative, got {r_a}, {r_b}")
    C_a = D * r_a / (1.0 + r_a)
    C_b = D * r_b / (1.0 + r_b)
    p_a = sum_a0 / (MARKERS_PER_LINE * (1.0 + r_a))
    p_b = sum_b0 / (MARKERS_PER_LINE * (1.0 + r_b))
    return C_a, C_b, p_a, p_b


def order0_masses(r_a: float, r_b: float, D: float) -> Tuple[float, float]:
    """Expected weighted masses 4 / (D - C_l) of the two lines."""
    return (
        MARKERS_PER_LINE * (1.0 + r_a) / D,
        MARKERS_PER_LINE * (1.0 + r_b) / D,
    )


def solve_views(
    r_a: float, r_b: float, delta_m_a: Sequence[float], delta_m_b: Sequence[float]
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-view source positions and jitters.

    Solves y - lambda r_a = dM_a(i), y - lambda r_b = dM_b(i) for every view
    i >= 1; entry 0 is the gauge (0, 0).

    Raises:
        SingularSystemError: r_a and r_b coincide
    """
    gap = r_a - r_b
    if abs(gap) < SINGULAR_SYSTEM_TOLERANCE * (abs(r_a) + abs(r_b)) or gap == 0.0:
        raise SingularSystemError(
            f"Both lines have the same magnification (r_a={r_a:.12g}, r_b={r_b:.12g})"
        )
    dm_a = np.asarray(delta_m_a, dtype=float)
    dm_b = np.asarray(delta_m_b, dtype=float)
    lambdas = (dm_b - dm_a) / gap
    jitters = dm_a + lambdas * r_a
    lambdas[0] = 0.0
    jitters[0] = 0.0
    return lambdas, jitters


def _grouped_lines(
    detections: List[DiracProjection],
    pattern: FanBeamPattern,
    cross_ratio_tolerance: Optional[float],
) -> Tuple[np.ndarray, np.ndarray, bool]:
    groups = {d.group for d in detections}
    if groups == {Group.U}:
        lines_a, lines_b = [], []
        for view in group_by_view(detections, (Group.U,)):
            projection = view[Group.U]
            line_a, line_b = classify_groups(
                projection.positions, pattern, cross_ratio_tolerance,
                view_index=projection.view_index,
            )
            lines_a.append(line_a)
            lines_b.append(line_b)
        return np.array(lines_a), np.array(lines_b), True
    if Group.U in groups:
        raise InputError("Projections mix classified (A/B) and unclassified (U) groups")

    views = group_by_view(detections, FANBEAM_GROUPS)
    for group in FANBEAM_GROUPS:
        short = [
            i for i, view in enumerate(views)
            if len(view[group].positions) != MARKERS_PER_LINE
        ]
        if short:
            raise IncompleteViewError(
                f"View(s) {short} do not have {MARKERS_PER_LINE} line-{group.value} "
                "markers",
                view_indices=short,
            )
    lines_a = np.array([sorted(v[Group.A].positions) for v in views], dtype=float)
    lines_b = np.array([sorted(v[Group.B].positions) for v in views], dtype=float)
    return lines_a, lines_b, False


def default_reference_view(lines_a: np.ndarray) -> int:
    """View i >= 1 whose line-A sum moved most with respect to view 0."""
    sums = np.sum(lines_a, axis=1)
    return int(np.argmax(np.abs(sums[1:] - sums[0]))) + 1


def calibrate_fanbeam(
    detections: Iterable[DiracProjection],
    pattern: FanBeamPattern,
    D: float,
    reference_view: Optional[int] = None,
    average: bool = False,
    cross_ratio_tolerance: Optional[float] = None,
) -> FanBeamCalibResult:
    """
    Recover per-view (lambda, y) and the rig placement.

    Args:
        detections: Per-view projections, either grouped into lines A and B or
            8 unclassified positions per view (group U)
        pattern: Known marker pattern (L, k1, k2, k3)
        D: Known source-line to detector distance
        reference_view: View i >= 1 paired with view 0 for the magnifications;
            defaults to the view that moved most
        average: Use the equations of all views i >= 1 instead of one view
        cross_ratio_tolerance: Relative tolerance for classifying group U

    Returns:
        FanBeamCalibResult in the gauge lambda_0 = 0, y_0 = 0

    Raises:
        SolverError subclasses, annotated with the offending view indices
    """
    if not D > 0.0:
        raise InputError(f"D must be positive, got {D}")
    detections = list(detections)
    lines_a, lines_b, classified = _grouped_lines(detections, pattern, cross_ratio_tolerance)
    n_views = len(lines_a)
    if n_views < 2:
        raise InsufficientViewsError(
            f"Need at least 2 views (view 0 and one more), got {n_views}",
            view_indices=list(range(n_views)),
        )

    if average:
        r_a, r_b = solve_r_averaged(lines_a, lines_b, pattern)
        reference = None
    else:
        reference = default_reference_view(lines_a) if reference_view is None else reference_view
        if not 1 <= reference < n_views:
            raise InputError(f"Reference view must be in 1..{n_views - 1}, got {reference}")
        logger.debug(f"Reference view for the magnifications: {reference}")
        r_a, r_b = solve_r(
            (lines_a[0], lines_a[reference]), (lines_b[0], lines_b[reference]),
            pattern, view_index=reference,
        )

    sums_a = lines_a.sum(axis=1)
    sums_b = lines_b.sum(axis=1)
    C_a, C_b, p_a, p_b = recover_rig_positions(r_a, r_b, sums_a[0], sums_b[0], D)
    delta_m_a = (sums_a - sums_a[0]) / MARKERS_PER_LINE
    delta_m_b = (sums_b - sums_b[0]) / MARKERS_PER_LINE
    lambdas, jitters = solve_views(r_a, r_b, delta_m_a, delta_m_b)

    logger.info(
        f"Fan-beam calibration of {n_views} views finished "
        f"(C_a={C_a:.6g}, C_b={C_b:.6g}, p_a={p_a:.6g}, p_b={p_b:.6g})"
    )
    return FanBeamCalibResult(
        lambdas=tuple(lambdas.tolist()),
        jitters=tuple(jitters.tolist()),
        C_a=C_a,
        C_b=C_b,
        p_a=p_a,
        p_b=p_b,
        r_a=r_a,
        r_b=r_b,
        D=float(D),
        reference_view=reference,
        delta_m_a=tuple(delta_m_a.tolist()),
        delta_m_b=tuple(delta_m_b.tolist()),
        classified=classified,
    )
