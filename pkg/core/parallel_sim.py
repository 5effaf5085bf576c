"""
Parallel-Beam Forward Simulation

Forward model of the 2D parallel geometry: Dirac-marker projections, analytic
disk projections rendered on a sampled and truncated detector, marker-centre
detection from sampled projections, and the rigid-motion/reflection family of
scene transformations that leaves projection data unchanged.

Detected positions follow the additive convention
``position = c . (cos alpha, sin alpha) + shift``.

Usage:
    from core.parallel_sim import project_markers_parallel

    projections = project_markers_parallel(rig, ParallelView(alpha=0.3, shift=0.01))
    h_positions = projections[Group.H].positions
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from config import settings

from .exceptions import DetectionError, InputError, OverlapError
from .types import (
    PARALLEL_GROUPS,
    DiracProjection,
    GaugeTransform,
    Geometry,
    Group,
    ParallelRig,
    ParallelView,
    Point2,
)

logger = logging.getLogger(__name__)

# Extra samples kept on each side of the detector used for per-group detection
DETECTION_PADDING_SAMPLES = 10


@dataclass(frozen=True)
class Disk:
    """Homogeneous disk of the plane."""

    center: Point2
    radius: float
    density: float = 1.0

    def __post_init__(self):
        if not isinstance(self.center, Point2):
            object.__setattr__(self, "center", Point2.from_sequence(self.center))
        object.__setattr__(self, "radius", float(self.radius))
        object.__setattr__(self, "density", float(self.density))
        if not self.radius > 0.0:
            raise InputError(f"Disk radius must be positive, got {self.radius}")
        if not self.density >= 0.0:
            raise InputError(f"Disk density must be non-negative, got {self.density}")


@dataclass(frozen=True)
class DiskPhantom:
    """An object made of superposed disks."""

    disks: Tuple[Disk, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "disks", tuple(self.disks))

    @classmethod
    def from_rig(
        cls, rig: ParallelRig, radius: float, density: float = 1.0
    ) -> "DiskPhantom":
        """Marker disks of a rig, h-group first."""
        markers = rig.h_markers + rig.v_markers
        return cls(tuple(Disk(m, radius, density) for m in markers))

    def merged(self, other: "DiskPhantom") -> "DiskPhantom":
        return DiskPhantom(self.disks + other.disks)


@dataclass(frozen=True)
class DetectorGrid:
    """Uniform detector sampling s_k = s_min + k * step, k = 0 .. count - 1."""

    s_min: float
    step: float
    count: int

    def __post_init__(self):
        if not self.step > 0.0:
            raise InputError(f"Grid step must be positive, got {self.step}")
        if self.count < 1:
            raise InputError(f"Grid needs at least one sample, got {self.count}")

    @classmethod
    def covering(cls, s_lo: float, s_hi: float, step: float) -> "DetectorGrid":
        """Smallest grid aligned on multiples of step that covers [s_lo, s_hi]."""
        s_min = math.floor(s_lo / step) * step
        count = int(math.ceil((s_hi - s_min) / step)) + 1
        return cls(s_min=s_min, step=step, count=count)

    @property
    def s_max(self) -> float:
        return self.s_min + (self.count - 1) * self.step

    def samples(self) -> np.ndarray:
        return self.s_min + self.step * np.arange(self.count)


@dataclass(frozen=True, eq=False)
class SampledProjection:
    """
    One sampled parallel projection.

    Samples outside the truncation window are NaN (missing), never zero.
    """

    alpha: float
    grid: DetectorGrid
    values: np.ndarray
    window: Tuple[float, float]

    def __post_init__(self):
        if len(self.values) != self.grid.count:
            raise InputError(
                f"{len(self.values)} samples for a grid of {self.grid.count}"
            )

    @property
    def s(self) -> np.ndarray:
        return self.grid.samples()

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.values)


def project_markers_parallel(
    rig: ParallelRig, view: ParallelView, view_index: int = 0
) -> Dict[Group, DiracProjection]:
    """
    Dirac projections of every marker group of a rig in one view.

    Args:
        rig: The parallel rig
        view: Angle and detector shift of the view
        view_index: Index stored on the returned projections

    Returns:
        Mapping {Group.H: ..., Group.V: ...}; positions follow the rig's marker
        order and all weights are 1
    """
    theta = view.theta
    projections = {}
    for group in PARALLEL_GROUPS:
        positions = rig.coordinates(group) @ theta + view.shift
        projections[group] = DiracProjection(
            view_index=view_index,
            group=group,
            positions=tuple(positions.tolist()),
            weights=tuple(1.0 for _ in positions),
        )
    return projections


def disk_projection(
    disk: Disk, alpha: float, shift: float, s: Union[float, np.ndarray]
) -> Union[float, np.ndarray]:
    """
    Analytic parallel projection of a disk.

    Returns density * 2 sqrt(R^2 - (s - s0 - shift)^2) inside the support and 0
    outside, with s0 = c1 cos(alpha) + c2 sin(alpha).
    """
    s0 = disk.center.x1 * math.cos(alpha) + disk.center.x2 * math.sin(alpha)
    offset = np.asarray(s, dtype=float) - s0 - shift
    chord = disk.radius**2 - offset**2
    values = disk.density * 2.0 * np.sqrt(np.clip(chord, 0.0, None))
    if np.ndim(values) == 0:
        return float(values)
    return values


def render_sinogram(
    phantom: DiskPhantom,
    rig: Optional[ParallelRig],
    views: Sequence[ParallelView],
    grid: DetectorGrid,
    window: Optional[Tuple[float, float]] = None,
    marker_radius: Optional[float] = None,
    marker_density: float = 1.0,
) -> List[SampledProjection]:
    """
    Render truncated parallel projections of a disk phantom and a marker rig.

    Args:
        phantom: Object disks
        rig: Marker rig rendered as disks of marker_radius, or None
        views: One projection is rendered per view
        grid: Detector sampling; must cover the window
        window: Truncation window (s_lo, s_hi); defaults to the whole grid
        marker_radius: Marker disk radius (defaults to settings.MARKER_RADIUS)
        marker_density: Marker disk density

    Returns:
        One SampledProjection per view, NaN outside the window
    """
    s_lo, s_hi = window if window is not None else (grid.s_min, grid.s_max)
    if s_lo > s_hi:
        raise InputError(f"Empty truncation window ({s_lo}, {s_hi})")
    if s_lo < grid.s_min - 0.5 * grid.step or s_hi > grid.s_max + 0.5 * grid.step:
        raise InputError(
            f"Window ({s_lo}, {s_hi}) is not covered by the grid "
            f"({grid.s_min}, {grid.s_max})"
        )

    disks = phantom
    if rig is not None:
        radius = settings.MARKER_RADIUS if marker_radius is None else marker_radius
        disks = phantom.merged(DiskPhantom.from_rig(rig, radius, marker_density))

    s = grid.samples()
    outside = (s < s_lo) | (s > s_hi)
    rendered = []
    for view in views:
        values = np.zeros(grid.count)
        for disk in disks.disks:
            values += disk_projection(disk, view.alpha, view.shift, s)
        values[outside] = np.nan
        rendered.append(
            SampledProjection(
                alpha=view.alpha, grid=grid, values=values, window=(s_lo, s_hi)
            )
        )
    logger.debug(
        f"Rendered {len(rendered)} projections of {len(disks.disks)} disks "
        f"on {grid.count} samples"
    )
    return rendered


def _positive_runs(values: np.ndarray) -> List[Tuple[int, int]]:
    """Index ranges [first, last] of consecutive samples with values > 0."""
    positive = np.nan_to_num(values, nan=0.0) > 0.0
    padded = np.concatenate(([False], positive, [False]))
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    return [(int(a), int(b) - 1) for a, b in zip(edges[::2], edges[1::2])]


def detect_marker_centers(
    proj: SampledProjection, expected_count: int, expected_radius: float
) -> List[float]:
    """
    Extract marker centres from a sampled projection.

    Every run of positive samples no wider than one marker support
    (2 R + one grid step) is a marker bump; its centre is the midpoint of the
    first and last positive samples. Wider runs (object disks or merged
    markers) are ignored.

    Args:
        proj: Sampled projection
        expected_count: Number of markers expected in the projection
        expected_radius: Marker radius R

    Returns:
        The detected centres, ascending

    Raises:
        OverlapError: Fewer separated bumps than expected_count
        DetectionError: More bumps than expected, or a bump cut by truncation
    """
    s = proj.s
    missing = proj.missing
    max_width = 2.0 * expected_radius + proj.grid.step
    centers = []
    for first, last in _positive_runs(proj.values):
        if s[last] - s[first] >= max_width:
            continue
        touches_missing = (first > 0 and missing[first - 1]) or (
            last < len(s) - 1 and missing[last + 1]
        )
        if touches_missing:
            raise DetectionError(
                f"Marker bump at s={s[first]:.6g} is cut by the truncation window"
            )
        centers.append(0.5 * (s[first] + s[last]))

    logger.debug(
        f"Detected {len(centers)} marker bumps at alpha={proj.alpha:.6g} "
        f"(expected {expected_count})"
    )
    if len(centers) < expected_count:
        raise OverlapError(
            f"Found {len(centers)} separated marker bumps at alpha={proj.alpha:.6g}, "
            f"expected {expected_count}"
        )
    if len(centers) > expected_count:
        raise DetectionError(
            f"Found {len(centers)} marker bumps at alpha={proj.alpha:.6g}, "
            f"expected {expected_count}"
        )
    return sorted(centers)


def simulate_detected_projections(
    rig: ParallelRig,
    views: Sequence[ParallelView],
    grid_step: Optional[float] = None,
    marker_radius: Optional[float] = None,
) -> List[DiracProjection]:
    """
    Simulate detected marker positions by rendering and detecting each group.

    Each group is rendered alone on a detector that covers the whole rig, so
    detection only sees that group's bumps.

    Args:
        rig: The parallel rig
        views: Acquisition views (index i is view_index i)
        grid_step: Detector sampling step (defaults to settings.GRID_STEP)
        marker_radius: Marker radius (defaults to settings.MARKER_RADIUS)

    Returns:
        Grouped DiracProjection list, two entries per view
    """
    step = settings.GRID_STEP if grid_step is None else grid_step
    radius = settings.MARKER_RADIUS if marker_radius is None else marker_radius
    pad = DETECTION_PADDING_SAMPLES * step
    detections = []
    for view_index, view in enumerate(views):
        half_width = rig.extent() + abs(view.shift) + 2.0 * radius + pad
        grid = DetectorGrid.covering(-half_width, half_width, step)
        for group in PARALLEL_GROUPS:
            group_phantom = DiskPhantom(
                tuple(Disk(m, radius) for m in rig.markers(group))
            )
            (sampled,) = render_sinogram(group_phantom, None, [view], grid)
            try:
                centers = detect_marker_centers(
                    sampled, len(rig.markers(group)), radius
                )
            except DetectionError as e:
                raise type(e)(f"View {view_index} group {group.value}: {e}") from e
            detections.append(
                DiracProjection(
                    view_index=view_index, group=group, positions=tuple(centers)
                )
            )
    return detections


def _rotate(points: np.ndarray, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return points @ np.array([[c, s], [-s, c]])


def _transform_markers(
    markers: Iterable[Point2], gauge: GaugeTransform
) -> List[Point2]:
    coords = np.array([m.as_array() for m in markers]).reshape(-1, 2)
    # R_gamma^{-1} (c - t)
    moved = _rotate(coords - gauge.t.as_array(), -gauge.gamma)
    if gauge.reflect_x2:
        moved[:, 1] = -moved[:, 1]
    if gauge.reflect_x1:
        moved[:, 0] = -moved[:, 0]
    return [Point2(x1, x2) for x1, x2 in moved.tolist()]


def apply_rigid_parallel(rig: ParallelRig, gauge: GaugeTransform) -> ParallelRig:
    """
    Apply a rigid motion (and optional axis reflections) to every marker.

    Each marker c becomes R_gamma^{-1} (c - t); reflect_x2 then maps
    (c1, c2) to (c1, -c2) and reflect_x1 maps it to (-c1, c2).

    Projecting the moved rig at (alpha - gamma, s + theta_alpha . t) gives the
    same data as projecting the original rig at (alpha, s).
    """
    if gauge.geometry is not Geometry.PARALLEL:
        raise InputError("apply_rigid_parallel needs a parallel gauge transform")
    return ParallelRig(
        h_markers=tuple(_transform_markers(rig.h_markers, gauge)),
        v_markers=tuple(_transform_markers(rig.v_markers, gauge)),
    )
