"""
Core Geometric Types for the Calibration Toolkit

This module defines the immutable value objects shared by every other part of
the toolkit: marker rigs for both geometries, per-view acquisition parameters,
detected Dirac projections, projection moments and gauge transforms.

Key Capabilities:
- Parallel rigs made of two perpendicular marker lines ("horizontal" and
  "vertical" groups), with markers kept in ascending order along each line
- Fan-beam rigs made of two 4-marker lines parallel to the detector, described
  by their unknown placement (C_l, p_l) and their known pattern (L, k1, k2, k3)
- Rig validation returning violations as data rather than raising

All lengths are in cm and all angles in rad.

Usage:
    from core.types import ParallelRig, Point2, validate_rig

    rig = ParallelRig(
        h_markers=[Point2(-2.4, 0), Point2(0.4, 0), Point2(2.3, 0)],
        v_markers=[Point2(-0.1, -2.5), Point2(-0.1, 0.5), Point2(-0.1, 2)],
    )
    assert validate_rig(rig) == []
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import IncompleteViewError, InputError

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi

# Rigs are authored analytically; this only absorbs file round-off
GEOMETRY_TOLERANCE = 1e-9
# A group is degenerate when |a30| < THIRD_MOMENT_TOLERANCE * (max |c|)^3
THIRD_MOMENT_TOLERANCE = 1e-6


class Geometry(str, Enum):
    """Acquisition geometry."""

    PARALLEL = "parallel"
    FANBEAM = "fanbeam"


class Group(str, Enum):
    """Marker group label.

    H and V are the two perpendicular lines of a parallel rig, A and B the two
    lines of a fan-beam rig. U marks fan-beam positions that still have to be
    classified.
    """

    H = "H"
    V = "V"
    A = "A"
    B = "B"
    U = "U"


PARALLEL_GROUPS = (Group.H, Group.V)
FANBEAM_GROUPS = (Group.A, Group.B)


def _finite(name: str, *values: float) -> None:
    for value in values:
        if not math.isfinite(value):
            raise InputError(f"{name} must be finite, got {value!r}")


@dataclass(frozen=True)
class Point2:
    """A point of the plane (x1, x2)."""

    x1: float
    x2: float

    def __post_init__(self):
        object.__setattr__(self, "x1", float(self.x1))
        object.__setattr__(self, "x2", float(self.x2))
        _finite("Point2 coordinate", self.x1, self.x2)

    @classmethod
    def from_sequence(cls, xy: Sequence[float]) -> "Point2":
        if len(xy) != 2:
            raise InputError(f"A point needs exactly two coordinates, got {xy!r}")
        return cls(xy[0], xy[1])

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.x2], dtype=float)


def _as_points(markers: Iterable[Union[Point2, Sequence[float]]]) -> Tuple[Point2, ...]:
    return tuple(
        m if isinstance(m, Point2) else Point2.from_sequence(m) for m in markers
    )


def line_direction(points: np.ndarray) -> Optional[np.ndarray]:
    """
    Unit direction of the best-fit line through a set of points.

    The sign is fixed so that the dominant component is positive, which makes
    "ascending along the line" well defined.

    Args:
        points: Array of shape (n, 2)

    Returns:
        The unit direction, or None when fewer than two distinct points exist
    """
    if len(points) < 2:
        return None
    centered = points - points.mean(axis=0)
    _, singular_values, vt = np.linalg.svd(centered)
    if singular_values[0] == 0.0:
        return None
    direction = vt[0]
    if direction[np.argmax(np.abs(direction))] < 0:
        direction = -direction
    return direction


def _sort_along_line(markers: Tuple[Point2, ...]) -> Tuple[Point2, ...]:
    if len(markers) < 2:
        return markers
    coords = np.array([m.as_array() for m in markers])
    direction = line_direction(coords)
    if direction is None:
        return markers
    order = np.argsort(coords @ direction, kind="stable")
    return tuple(markers[i] for i in order)


@dataclass(frozen=True)
class ParallelRig:
    """
    Calibration rig for the parallel geometry: markers on two perpendicular lines.

    Markers are stored in ascending order along their line.
    """

    h_markers: Tuple[Point2, ...]
    v_markers: Tuple[Point2, ...]

    def __post_init__(self):
        object.__setattr__(self, "h_markers", _sort_along_line(_as_points(self.h_markers)))
        object.__setattr__(self, "v_markers", _sort_along_line(_as_points(self.v_markers)))

    @property
    def n_h(self) -> int:
        return len(self.h_markers)

    @property
    def n_v(self) -> int:
        return len(self.v_markers)

    def markers(self, group: Group) -> Tuple[Point2, ...]:
        if group is Group.H:
            return self.h_markers
        if group is Group.V:
            return self.v_markers
        raise InputError(f"Parallel rigs have groups H and V, not {group.value}")

    def coordinates(self, group: Group) -> np.ndarray:
        """Marker centres of one group as an (n, 2) array."""
        return np.array([m.as_array() for m in self.markers(group)]).reshape(-1, 2)

    def all_coordinates(self) -> np.ndarray:
        """All marker centres, h-group first."""
        return np.vstack([self.coordinates(Group.H), self.coordinates(Group.V)])

    def line_coordinates(self, group: Group) -> np.ndarray:
        """Signed coordinates along the group's line, centred at its centre of mass."""
        coords = self.coordinates(group)
        if len(coords) == 0:
            return np.zeros(0)
        centered = coords - coords.mean(axis=0)
        direction = line_direction(coords)
        if direction is None:
            return np.zeros(len(coords))
        return centered @ direction

    def central_moment(self, group: Group, order: int) -> float:
        return float(np.sum(self.line_coordinates(group) ** order))

    @property
    def a20(self) -> float:
        return self.central_moment(Group.H, 2)

    @property
    def a02(self) -> float:
        return self.central_moment(Group.V, 2)

    @property
    def a30(self) -> float:
        return self.central_moment(Group.H, 3)

    @property
    def a03(self) -> float:
        return self.central_moment(Group.V, 3)

    def extent(self) -> float:
        """Largest distance of a marker from the origin."""
        coords = self.all_coordinates()
        return float(np.max(np.linalg.norm(coords, axis=1))) if len(coords) else 0.0


@dataclass(frozen=True)
class FanBeamPattern:
    """Known marker pattern of a fan-beam rig (the solver's prior knowledge)."""

    L: float
    k1: float
    k2: float
    k3: float

    def __post_init__(self):
        for name in ("L", "k1", "k2", "k3"):
            object.__setattr__(self, name, float(getattr(self, name)))
        _finite("Pattern constant", self.L, self.k1, self.k2, self.k3)

    def offsets(self, group: Group) -> Tuple[float, ...]:
        """Marker x2 offsets of one line relative to its centre, ascending."""
        if group is Group.A:
            raw = (-self.k1 * self.L, -self.L, self.L, self.k1 * self.L)
        elif group is Group.B:
            raw = (-self.k3 * self.L, -self.k2 * self.L, self.k2 * self.L, self.k3 * self.L)
        else:
            raise InputError(f"Fan-beam rigs have groups A and B, not {group.value}")
        return tuple(sorted(raw))

    def second_moment_factor(self, group: Group) -> float:
        """Sum of squared offsets divided by L^2 (2 + 2 k1^2 or 2 k2^2 + 2 k3^2)."""
        if group is Group.A:
            return 2.0 + 2.0 * self.k1**2
        if group is Group.B:
            return 2.0 * self.k2**2 + 2.0 * self.k3**2
        raise InputError(f"Fan-beam rigs have groups A and B, not {group.value}")


@dataclass(frozen=True)
class FanBeamRig:
    """
    Calibration rig for fan-beam with sources on the line x1 = D: two lines
    x1 = C_a and x1 = C_b of four markers each, centred at x2 = p_a and p_b.
    """

    D: float
    C_a: float
    C_b: float
    p_a: float
    p_b: float
    L: float
    k1: float
    k2: float
    k3: float

    def __post_init__(self):
        for name in ("D", "C_a", "C_b", "p_a", "p_b", "L", "k1", "k2", "k3"):
            object.__setattr__(self, name, float(getattr(self, name)))
            _finite(name, getattr(self, name))

    @property
    def pattern(self) -> FanBeamPattern:
        return FanBeamPattern(L=self.L, k1=self.k1, k2=self.k2, k3=self.k3)

    def depth(self, group: Group) -> float:
        """x1 coordinate C_l of a marker line."""
        if group is Group.A:
            return self.C_a
        if group is Group.B:
            return self.C_b
        raise InputError(f"Fan-beam rigs have groups A and B, not {group.value}")

    def center(self, group: Group) -> float:
        """x2 centre p_l of a marker line."""
        if group is Group.A:
            return self.p_a
        if group is Group.B:
            return self.p_b
        raise InputError(f"Fan-beam rigs have groups A and B, not {group.value}")

    def markers(self, group: Group) -> Tuple[Point2, ...]:
        depth, center = self.depth(group), self.center(group)
        return tuple(Point2(depth, center + o) for o in self.pattern.offsets(group))

    def r(self, group: Group) -> float:
        """Depth ratio r_l = C_l / (D - C_l)."""
        depth = self.depth(group)
        return depth / (self.D - depth)

    def magnification(self, group: Group) -> float:
        """Magnification D / (D - C_l) of a line at source position 0."""
        return self.D / (self.D - self.depth(group))


Rig = Union[ParallelRig, FanBeamRig]


@dataclass(frozen=True)
class ParallelView:
    """Per-view unknowns of the parallel geometry; alpha is kept in [0, 2 pi)."""

    alpha: float
    shift: float = 0.0

    def __post_init__(self):
        alpha, shift = float(self.alpha), float(self.shift)
        _finite("ParallelView", alpha, shift)
        alpha = math.fmod(alpha, TWO_PI)
        if alpha < 0.0:
            alpha += TWO_PI
        if alpha >= TWO_PI:
            alpha = 0.0
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "shift", shift)

    @property
    def theta(self) -> np.ndarray:
        """Projection direction (cos alpha, sin alpha)."""
        return np.array([math.cos(self.alpha), math.sin(self.alpha)])


@dataclass(frozen=True)
class FanBeamView:
    """Per-view unknowns of the fan-beam geometry: source position and jitter."""

    lam: float
    jitter: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "lam", float(self.lam))
        object.__setattr__(self, "jitter", float(self.jitter))
        _finite("FanBeamView", self.lam, self.jitter)


@dataclass(frozen=True)
class DiracProjection:
    """
    Detected marker projections of one group in one view.

    Weights are only known to simulators (fan-beam: 1 / (D - c1)); solvers
    never read them.
    """

    view_index: int
    group: Group
    positions: Tuple[float, ...]
    weights: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "view_index", int(self.view_index))
        object.__setattr__(self, "group", Group(self.group))
        positions = tuple(float(p) for p in self.positions)
        _finite("Projection position", *positions)
        object.__setattr__(self, "positions", positions)
        if self.weights is not None:
            weights = tuple(float(w) for w in self.weights)
            if len(weights) != len(positions):
                raise InputError(
                    f"View {self.view_index} group {self.group.value}: "
                    f"{len(weights)} weights for {len(positions)} positions"
                )
            if any(not (w > 0.0 and math.isfinite(w)) for w in weights):
                raise InputError(f"View {self.view_index}: weights must be positive")
            object.__setattr__(self, "weights", weights)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.positions, dtype=float)

    def moments(self) -> "MomentVector":
        return MomentVector.from_positions(self.positions, self.weights)


@dataclass(frozen=True)
class MomentVector:
    """Moments of order 0 to 3 of a (possibly weighted) Dirac projection."""

    m0: float
    m1: float
    m2: float
    m3: float

    @classmethod
    def from_positions(
        cls, positions: Sequence[float], weights: Optional[Sequence[float]] = None
    ) -> "MomentVector":
        y = np.asarray(positions, dtype=float)
        w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float)
        return cls(*(float(np.sum(w * y**k)) for k in range(4)))

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.m0, self.m1, self.m2, self.m3)


@dataclass(frozen=True)
class GaugeTransform:
    """
    A data-preserving reparameterisation of the scene.

    Parallel: rotation gamma, translation t and optional axis reflections
    (reflect_x2 maps (c1, c2) to (c1, -c2), reflect_x1 maps it to (-c1, c2)).
    Fan-beam: global source shift lam_shift and detector shift y_shift.
    """

    geometry: Geometry
    gamma: float = 0.0
    t: Point2 = Point2(0.0, 0.0)
    reflect_x2: bool = False
    reflect_x1: bool = False
    lam_shift: float = 0.0
    y_shift: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "geometry", Geometry(self.geometry))
        if not isinstance(self.t, Point2):
            object.__setattr__(self, "t", Point2.from_sequence(self.t))
        _finite("GaugeTransform", self.gamma, self.lam_shift, self.y_shift)

    @classmethod
    def parallel(
        cls,
        gamma: float = 0.0,
        t: Union[Point2, Sequence[float]] = (0.0, 0.0),
        reflect_x2: bool = False,
        reflect_x1: bool = False,
    ) -> "GaugeTransform":
        return cls(
            geometry=Geometry.PARALLEL,
            gamma=gamma,
            t=t if isinstance(t, Point2) else Point2.from_sequence(t),
            reflect_x2=reflect_x2,
            reflect_x1=reflect_x1,
        )

    @classmethod
    def fanbeam(cls, lam_shift: float = 0.0, y_shift: float = 0.0) -> "GaugeTransform":
        return cls(geometry=Geometry.FANBEAM, lam_shift=lam_shift, y_shift=y_shift)


def _parallel_violations(
    rig: ParallelRig, tolerance: float, moment_tolerance: float
) -> List[str]:
    violations = []
    directions = {}
    for group, moment_name in ((Group.H, "a30"), (Group.V, "a03")):
        label = f"{group.value.lower()}-group"
        coords = rig.coordinates(group)
        if len(coords) < 3:
            violations.append(f"{label} has {len(coords)} markers, at least 3 needed")
        if len(coords) >= 2:
            centered = coords - coords.mean(axis=0)
            singular_values = np.linalg.svd(centered, compute_uv=False)
            if singular_values[0] == 0.0:
                violations.append(f"{label} markers coincide")
                continue
            if singular_values[1] > tolerance * singular_values[0]:
                violations.append(f"{label} markers are not collinear")
            directions[group] = line_direction(coords)
        line_coords = rig.line_coordinates(group)
        scale = float(np.max(np.abs(line_coords))) if len(line_coords) else 0.0
        third = float(np.sum(line_coords**3))
        if scale == 0.0 or abs(third) < moment_tolerance * scale**3:
            violations.append(
                f"{moment_name} ≈ 0: {label} third central moment vanishes"
            )
    if Group.H in directions and Group.V in directions:
        if abs(float(directions[Group.H] @ directions[Group.V])) > tolerance:
            violations.append("marker lines are not perpendicular")
    return violations


def _fanbeam_violations(rig: FanBeamRig, tolerance: float) -> List[str]:
    violations = []
    if not rig.D > 0.0:
        violations.append(f"D must be positive, got {rig.D}")
    for name, depth in (("C_a", rig.C_a), ("C_b", rig.C_b)):
        if not 0.0 < depth < rig.D:
            violations.append(f"{name}={depth} is outside (0, D={rig.D})")
    if abs(rig.C_a - rig.C_b) <= tolerance * max(abs(rig.D), 1.0):
        violations.append("degenerate line pair: C_a == C_b")
    if not rig.L > 0.0:
        violations.append(f"L must be positive, got {rig.L}")
    if not rig.k1 > 1.0:
        violations.append(f"k1 must exceed 1, got {rig.k1}")
    if not 0.0 < rig.k2 < rig.k3:
        violations.append(f"pattern needs 0 < k2 < k3, got k2={rig.k2}, k3={rig.k3}")
    else:
        cross_a = ((rig.k1 - 1.0) / (rig.k1 + 1.0)) ** 2
        cross_b = ((rig.k3 - rig.k2) / (rig.k3 + rig.k2)) ** 2
        if abs(cross_a - cross_b) <= tolerance * max(cross_a, cross_b):
            violations.append("line patterns share the same cross-ratio")
    return violations


def validate_rig(
    rig: Rig,
    tolerance: float = GEOMETRY_TOLERANCE,
    moment_tolerance: float = THIRD_MOMENT_TOLERANCE,
) -> List[str]:
    """
    Check the type invariants of a rig.

    Args:
        rig: A ParallelRig or FanBeamRig
        tolerance: Relative tolerance for collinearity, perpendicularity and
            coincident line depths
        moment_tolerance: Scale-free threshold for vanishing third moments

    Returns:
        Human-readable violations; empty when the rig is valid
    """
    if isinstance(rig, ParallelRig):
        violations = _parallel_violations(rig, tolerance, moment_tolerance)
    elif isinstance(rig, FanBeamRig):
        violations = _fanbeam_violations(rig, tolerance)
    else:
        raise InputError(f"Unknown rig type: {type(rig).__name__}")
    if violations:
        logger.debug(f"Rig validation found {len(violations)} violation(s)")
    return violations


def group_by_view(
    detections: Iterable[DiracProjection], groups: Sequence[Group]
) -> List[Dict[Group, DiracProjection]]:
    """
    Arrange a flat list of projections as one {group: projection} map per view.

    View indices must run contiguously from 0 and every view must carry each
    of the requested groups exactly once.

    Raises:
        InputError: A projection has a foreign group or is duplicated
        IncompleteViewError: A view index or a group is missing
    """
    by_view: Dict[int, Dict[Group, DiracProjection]] = {}
    for projection in detections:
        if projection.group not in groups:
            allowed = ", ".join(g.value for g in groups)
            raise InputError(
                f"View {projection.view_index}: group {projection.group.value} "
                f"is not one of {allowed}"
            )
        view = by_view.setdefault(projection.view_index, {})
        if projection.group in view:
            raise InputError(
                f"View {projection.view_index}: group {projection.group.value} "
                "appears twice"
            )
        view[projection.group] = projection

    grouped = []
    for view_index in range(len(by_view)):
        if view_index not in by_view:
            raise IncompleteViewError(
                f"View {view_index} is missing (views must be numbered 0..P-1)",
                view_indices=[view_index],
            )
        view = by_view[view_index]
        absent = [g.value for g in groups if g not in view]
        if absent:
            raise IncompleteViewError(
                f"View {view_index} misses group(s) {', '.join(absent)}",
                view_indices=[view_index],
            )
        grouped.append(view)
    return grouped
