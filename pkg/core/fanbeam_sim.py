"""
Fan-Beam Forward Simulation (sources on the line x1 = D)

A marker c = (c1, c2) seen from the source (D, lambda) projects onto the
detector line x1 = 0 at

    (c2 D - c1 lambda) / (D - c1)

with weight 1 / (D - c1); the detected position adds the view's detector
jitter. This module also holds the two scene transformations that leave the
detected positions unchanged: a shear with detector/source translations, and a
depth scaling that comes with an unknown D.
"""

import logging
from typing import Dict, List, Sequence, Tuple

from .exceptions import InputError, MarkerOutsideSlabError
from .types import (
    FANBEAM_GROUPS,
    DiracProjection,
    FanBeamRig,
    FanBeamView,
    Group,
    Point2,
)

logger = logging.getLogger(__name__)


def project_marker_fanbeam(c: Point2, view: FanBeamView, D: float) -> Tuple[float, float]:
    """
    Detected position and weight of one marker.

    Raises:
        MarkerOutsideSlabError: c1 is outside [0, D); a marker on the detector
            line (c1 = 0) projects onto itself
    """
    if not 0.0 <= c.x1 < D:
        raise MarkerOutsideSlabError(
            f"Marker ({c.x1}, {c.x2}) is outside the slab 0 < x1 < D={D}"
        )
    depth = D - c.x1
    position = (c.x2 * D - c.x1 * view.lam) / depth + view.jitter
    return position, 1.0 / depth


def project_rig_fanbeam(
    rig: FanBeamRig, view: FanBeamView, view_index: int = 0
) -> Dict[Group, DiracProjection]:
    """
    Weighted Dirac projections of both marker lines in one view.

    Returns:
        {Group.A: ..., Group.B: ...}, four ascending positions per line with
        simulator-side weights
    """
    projections = {}
    for group in FANBEAM_GROUPS:
        projected = sorted(
            project_marker_fanbeam(m, view, rig.D) for m in rig.markers(group)
        )
        projections[group] = DiracProjection(
            view_index=view_index,
            group=group,
            positions=tuple(p for p, _ in projected),
            weights=tuple(w for _, w in projected),
        )
    return projections


def project_views_fanbeam(
    rig: FanBeamRig, views: Sequence[FanBeamView]
) -> List[DiracProjection]:
    """Flat projection list for a whole scan, view_index i for views[i]."""
    projections = []
    for view_index, view in enumerate(views):
        projections.extend(project_rig_fanbeam(rig, view, view_index).values())
    logger.debug(f"Projected {len(views)} fan-beam views of 8 markers")
    return projections


def _with_markers_moved(rig: FanBeamRig, p_a: float, p_b: float, **changes) -> FanBeamRig:
    fields = {
        "D": rig.D, "C_a": rig.C_a, "C_b": rig.C_b, "p_a": p_a, "p_b": p_b,
        "L": rig.L, "k1": rig.k1, "k2": rig.k2, "k3": rig.k3,
    }
    fields.update(changes)
    return FanBeamRig(**fields)


def apply_gauge_fanbeam(rig: FanBeamRig, lam_shift: float, y_shift: float) -> FanBeamRig:
    """
    Shear and translate the rig: x2 -> x2 - (y' + lambda') x1 / D + y'.

    Projecting the result at (lambda, j) gives the positions of the original
    rig at (lambda + lambda', j + y'). Depths are unchanged, so each line stays
    a 4-marker line with the same pattern and only its centre moves.
    """
    factor = (y_shift + lam_shift) / rig.D

    def sheared(depth: float, center: float) -> float:
        return center - factor * depth + y_shift

    return _with_markers_moved(
        rig, p_a=sheared(rig.C_a, rig.p_a), p_b=sheared(rig.C_b, rig.p_b)
    )


def apply_scaling_ambiguity(rig: FanBeamRig, k: float) -> FanBeamRig:
    """
    Divide every depth and D by k > 0.

    Detected positions are unchanged for every view; weights are multiplied
    by k.
    """
    if not k > 0.0:
        raise InputError(f"Scaling factor must be positive, got {k}")
    return _with_markers_moved(
        rig, p_a=rig.p_a, p_b=rig.p_b, D=rig.D / k, C_a=rig.C_a / k, C_b=rig.C_b / k
    )
