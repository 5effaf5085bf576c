"""
Custom Exception Classes for the Toolkit
"""

from typing import Iterable, Tuple


class TomocalError(Exception):
    """Base class for toolkit-specific errors."""

    pass


class ConfigError(TomocalError):
    """Error related to toolkit configuration."""

    pass


class InputError(TomocalError):
    """Invalid user-supplied data (files, rigs, views)."""

    pass


class DataLoaderError(InputError):
    """Error occurring while reading or writing rig, view or projection files."""

    pass


class RigValidationError(InputError):
    """A rig violates its type invariants where a valid rig is required."""

    def __init__(self, message: str, violations: Iterable[str] = ()):
        super().__init__(message)
        self.violations: Tuple[str, ...] = tuple(violations)


class SimulationError(TomocalError):
    """Error occurring during forward simulation."""

    pass


class MarkerOutsideSlabError(SimulationError):
    """A fan-beam marker does not lie strictly between detector and source lines."""

    pass


class DetectionError(SimulationError):
    """Marker centres could not be extracted from a sampled projection."""

    pass


class OverlapError(DetectionError):
    """Fewer separated marker bumps than expected (projections overlap)."""

    pass


class SolverError(TomocalError):
    """Error raised by a calibration or consistency solver.

    Carries the indices of the views responsible for the failure, if known.
    """

    def __init__(self, message: str, view_indices: Iterable[int] = ()):
        super().__init__(message)
        self.view_indices: Tuple[int, ...] = tuple(int(i) for i in view_indices)


class DegenerateViewPairError(SolverError):
    """The two reference views do not constrain the system."""

    pass


class DegenerateAngleError(SolverError):
    """The reference angle lies on a coordinate axis."""

    pass


class DegenerateViewError(SolverError):
    """A view is (nearly) axis-aligned so one group collapses to a point."""

    pass


class DegenerateRigError(SolverError):
    """The marker groups cannot identify the angles (e.g. zero third moment)."""

    pass


class IncompleteViewError(SolverError):
    """A view misses a group or some of its markers."""

    pass


class NegativeDiscriminantError(SolverError):
    """The magnification estimate (1 + r)^2 is below one."""

    pass


class SingularSystemError(SolverError):
    """Both marker lines have the same magnification."""

    pass


class InsufficientViewsError(SolverError):
    """Not enough (distinct) views for the requested computation."""

    pass


class RankDeficientError(SolverError):
    """A least-squares design matrix does not have full column rank."""

    pass


class ClassificationError(SolverError):
    """Fan-beam marker projections could not be split into the two lines."""

    pass


class DegeneratePointsError(SolverError):
    """Coincident points make a cross-ratio undefined."""

    pass
