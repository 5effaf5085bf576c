"""
File Formats and Data Loading for the Calibration Toolkit

This module is the single place where the toolkit touches the filesystem. It
validates and converts between on-disk artifacts and the core value objects.

Key Capabilities:
- Rig JSON ({"geometry": "parallel", "h_markers": [[x1, x2], ...], ...} or
  {"geometry": "fanbeam", "D": ..., "C_a": ..., ...}) validated with pydantic
- View JSON ({"geometry": ..., "views": [{"alpha", "shift"} | {"lambda", "jitter"}]})
- Projection CSV (view_index,group,marker_index,position[,weight]) via pandas,
  floats written with 17 significant digits and read back bit-exactly
- Experiment configuration, disk phantom and fan-beam pattern files
- Run manifests with a key-order independent configuration hash

All lengths are in cm and all angles in rad.

Usage:
    from core.data_loader import load_rig, read_projections

    rig = load_rig("configs/rig_parallel.json")
    detections = read_projections("projections.csv")
"""

# Standard library imports
import hashlib
import json
import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Annotated, Any, Dict, List, Literal, Optional, Sequence, Tuple, Union

# Third-party library imports
import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

# Local application imports
from config import TOOLKIT_VERSION, settings

from .exceptions import DataLoaderError, TomocalError
from .parallel_sim import Disk, DiskPhantom, SampledProjection
from .types import (
    DiracProjection,
    FanBeamPattern,
    FanBeamRig,
    FanBeamView,
    Geometry,
    Group,
    ParallelRig,
    ParallelView,
    Point2,
    Rig,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

PROJECTION_COLUMNS = ["view_index", "group", "marker_index", "position"]
WEIGHT_COLUMN = "weight"
SINOGRAM_COLUMNS = ["view_index", "s", "value"]


# --- File Schemas ---


class ParallelRigModel(BaseModel):
    model_config = ConfigDict(extra="forbid")

    geometry: Literal["parallel"]
    h_markers: List[Tuple[float, float]]
    v_markers: List[Tuple[float, float]]


class FanBeamRigModel(BaseModel):
    model_config = ConfigDict(extra="forbid")

    geometry: Literal["fanbeam"]
    D: float
    C_a: float
    p_a: float
    C_b: float
    p_b: float
    L: float
    k1: float
    k2: float
    k3: float


RigModel = Annotated[
    Union[ParallelRigModel, FanBeamRigModel], Field(discriminator="geometry")
]


class RigFile(BaseModel):
    rig: RigModel


class ParallelViewModel(BaseModel):
    model_config = ConfigDict(extra="forbid")

    alpha: float
    shift: float = 0.0


class FanBeamViewModel(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    lam: float = Field(alias="lambda")
    jitter: float = 0.0


class ViewsFile(BaseModel):
    geometry: Geometry
    views: List[Dict[str, float]]


class PatternFile(BaseModel):
    """Prior knowledge of the fan-beam solver; rig files are accepted as well."""

    model_config = ConfigDict(extra="ignore")

    D: float = Field(gt=0)
    L: float = Field(gt=0)
    k1: float
    k2: float
    k3: float


class DiskModel(BaseModel):
    model_config = ConfigDict(extra="forbid")

    center: Tuple[float, float]
    radius: float = Field(gt=0)
    density: float = Field(default=1.0, ge=0)


class PhantomFile(BaseModel):
    model_config = ConfigDict(extra="ignore")

    disks: List[DiskModel] = []
    note: Optional[str] = None


class ExperimentConfig(BaseModel):
    """A Monte-Carlo experiment: one scenario, several noise levels."""

    model_config = ConfigDict(extra="forbid")

    name: str = "experiment"
    geometry: Geometry
    rig: RigModel
    P: int = Field(ge=2)
    noise_levels: List[float] = [0.0, 0.1, 0.5, 1.0, 2.0]
    pixel_size: float = Field(default=0.01, gt=0)
    n_realizations: int = Field(default_factory=lambda: settings.N_REALIZATIONS, ge=1)
    seed: int = Field(default=0, ge=0, lt=2**64)

    # Parallel scenario
    angle_margin: float = Field(default=1e-3, ge=0)
    shift_range: Tuple[float, float] = (-0.05, 0.05)
    scan_pairs: bool = False
    use_detection: bool = False

    # Fan-beam scenario
    lambda_range: Tuple[float, float] = (-5.0, 5.0)
    jitter_range: Tuple[float, float] = (-0.05, 0.05)
    average_r: bool = False
    cross_ratio_tolerance: Optional[float] = None
    classify: bool = False

    resample_scenario: bool = False

    @model_validator(mode="after")
    def _check_consistency(self) -> "ExperimentConfig":
        if self.rig.geometry != self.geometry.value:
            raise ValueError(
                f"rig geometry {self.rig.geometry!r} does not match {self.geometry.value!r}"
            )
        if any(level < 0 for level in self.noise_levels):
            raise ValueError("noise levels must be non-negative")
        for name in ("shift_range", "lambda_range", "jitter_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is empty: ({lo}, {hi})")
        if self.angle_margin >= np.pi / 4:
            raise ValueError("angle_margin leaves no room for sampling")
        return self


class RunManifest(BaseModel):
    """Provenance record written next to every command output."""

    command: str
    config_hash: str
    seed: Optional[int] = None
    toolkit_version: str = TOOLKIT_VERSION
    started_at: str
    finished_at: Optional[str] = None
    outputs: List[str] = []


# --- Helpers ---


def _read_json(path: PathLike) -> Any:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        logger.error(f"Error: file not found at {path}")
        raise DataLoaderError(f"File not found: {path}") from None
    except json.JSONDecodeError as e:
        logger.error(f"Malformed JSON in {path}: {e}")
        raise DataLoaderError(f"Malformed JSON in {path}: {e}") from e


def write_json(data: Any, path: PathLike) -> None:
    """Write JSON with a trailing newline (UTF-8, LF)."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(data, f, indent=2, allow_nan=False)
        f.write("\n")


def _validate(model, data: Any, path: PathLike):
    try:
        return model.model_validate(data)
    except ValidationError as e:
        logger.error(f"Schema validation failed for {path}: {e}")
        raise DataLoaderError(f"Invalid content in {path}: {e}") from e


def config_hash(data: Any) -> str:
    """SHA-256 of the canonical JSON form (sorted keys, compact separators)."""
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# --- Rigs ---


def rig_from_model(model: Union[ParallelRigModel, FanBeamRigModel]) -> Rig:
    try:
        if isinstance(model, ParallelRigModel):
            return ParallelRig(
                h_markers=tuple(Point2(*m) for m in model.h_markers),
                v_markers=tuple(Point2(*m) for m in model.v_markers),
            )
        return FanBeamRig(**model.model_dump(exclude={"geometry"}))
    except TomocalError as e:
        raise DataLoaderError(f"Invalid rig: {e}") from e


def rig_to_dict(rig: Rig) -> Dict[str, Any]:
    if isinstance(rig, ParallelRig):
        return {
            "geometry": Geometry.PARALLEL.value,
            "h_markers": [[m.x1, m.x2] for m in rig.h_markers],
            "v_markers": [[m.x1, m.x2] for m in rig.v_markers],
        }
    return {
        "geometry": Geometry.FANBEAM.value,
        "D": rig.D, "C_a": rig.C_a, "p_a": rig.p_a, "C_b": rig.C_b, "p_b": rig.p_b,
        "L": rig.L, "k1": rig.k1, "k2": rig.k2, "k3": rig.k3,
    }


def load_rig(path: PathLike) -> Rig:
    """Load a parallel or fan-beam rig JSON file."""
    data = _read_json(path)
    rig = rig_from_model(_validate(RigFile, {"rig": data}, path).rig)
    logger.info(f"Loaded {type(rig).__name__} from {path}")
    return rig


def save_rig(rig: Rig, path: PathLike) -> None:
    write_json(rig_to_dict(rig), path)


def load_pattern(path: PathLike) -> Tuple[FanBeamPattern, float]:
    """Load the fan-beam solver's prior knowledge: (pattern, D)."""
    model = _validate(PatternFile, _read_json(path), path)
    return FanBeamPattern(L=model.L, k1=model.k1, k2=model.k2, k3=model.k3), model.D


# --- Views ---


def views_to_dict(views: Sequence[Union[ParallelView, FanBeamView]]) -> Dict[str, Any]:
    if views and isinstance(views[0], FanBeamView):
        return {
            "geometry": Geometry.FANBEAM.value,
            "views": [{"lambda": v.lam, "jitter": v.jitter} for v in views],
        }
    return {
        "geometry": Geometry.PARALLEL.value,
        "views": [{"alpha": v.alpha, "shift": v.shift} for v in views],
    }


def views_from_dict(
    data: Any, path: PathLike = "<memory>"
) -> Tuple[Geometry, List[Union[ParallelView, FanBeamView]]]:
    model = _validate(ViewsFile, data, path)
    view_model = ParallelViewModel if model.geometry is Geometry.PARALLEL else FanBeamViewModel
    views = []
    for i, raw in enumerate(model.views):
        try:
            parsed = view_model.model_validate(raw)
        except ValidationError as e:
            logger.error(f"View {i} in {path} is invalid: {e}")
            raise DataLoaderError(f"View {i} in {path} is invalid: {e}") from e
        if isinstance(parsed, ParallelViewModel):
            views.append(ParallelView(alpha=parsed.alpha, shift=parsed.shift))
        else:
            views.append(FanBeamView(lam=parsed.lam, jitter=parsed.jitter))
    return model.geometry, views


def load_views(path: PathLike) -> Tuple[Geometry, List[Union[ParallelView, FanBeamView]]]:
    """Load a view JSON file (ground truth or calibration estimates)."""
    geometry, views = views_from_dict(_read_json(path), path)
    logger.info(f"Loaded {len(views)} {geometry.value} views from {path}")
    return geometry, views


def save_views(views: Sequence[Union[ParallelView, FanBeamView]], path: PathLike) -> None:
    write_json(views_to_dict(views), path)


# --- Projections ---


def projections_to_frame(
    projections: Sequence[DiracProjection], include_weights: bool = False
) -> pd.DataFrame:
    """One row per marker, sorted by view, then group, then marker index."""
    rows = []
    for projection in sorted(projections, key=lambda p: (p.view_index, p.group.value)):
        if include_weights and projection.weights is None:
            raise DataLoaderError(
                f"View {projection.view_index} group {projection.group.value} has no "
                "weights to write"
            )
        for marker_index, position in enumerate(projection.positions):
            row = {
                "view_index": projection.view_index,
                "group": projection.group.value,
                "marker_index": marker_index,
                "position": position,
            }
            if include_weights:
                row[WEIGHT_COLUMN] = projection.weights[marker_index]
            rows.append(row)
    columns = PROJECTION_COLUMNS + ([WEIGHT_COLUMN] if include_weights else [])
    return pd.DataFrame(rows, columns=columns)


def write_projections(
    projections: Sequence[DiracProjection], path: PathLike, include_weights: bool = False
) -> None:
    """Write the projection CSV (header row, LF line endings, %.17g floats)."""
    frame = projections_to_frame(projections, include_weights)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=settings.FLOAT_FORMAT, lineterminator="\n")
    logger.info(f"Wrote {len(frame)} projection rows to {path}")


def projections_from_frame(
    frame: pd.DataFrame, source: PathLike = "<frame>"
) -> List[DiracProjection]:
    missing = [col for col in PROJECTION_COLUMNS if col not in frame.columns]
    if missing:
        logger.error(f"Projection CSV {source} is missing columns: {missing}")
        raise DataLoaderError(f"Projection CSV {source} is missing columns: {missing}")
    has_weights = WEIGHT_COLUMN in frame.columns
    if frame[PROJECTION_COLUMNS].isna().any().any() or (
        has_weights and frame[WEIGHT_COLUMN].isna().any()
    ):
        raise DataLoaderError(f"Projection CSV {source} has empty cells")

    unknown = sorted(set(frame["group"]) - {g.value for g in Group})
    if unknown:
        raise DataLoaderError(f"Projection CSV {source} has unknown groups: {unknown}")

    projections = []
    ordered = frame.sort_values(["view_index", "group", "marker_index"], kind="stable")
    for (view_index, group), rows in ordered.groupby(["view_index", "group"], sort=True):
        if rows["marker_index"].duplicated().any():
            raise DataLoaderError(
                f"Projection CSV {source}: duplicate marker_index in view {view_index} "
                f"group {group}"
            )
        try:
            projections.append(
                DiracProjection(
                    view_index=int(view_index),
                    group=Group(group),
                    positions=tuple(rows["position"].tolist()),
                    weights=tuple(rows[WEIGHT_COLUMN].tolist()) if has_weights else None,
                )
            )
        except TomocalError as e:
            raise DataLoaderError(f"Projection CSV {source}: {e}") from e
    return projections


def read_projections(path: PathLike) -> List[DiracProjection]:
    """Read a projection CSV into grouped DiracProjection objects."""
    try:
        frame = pd.read_csv(
            path,
            float_precision="round_trip",
            dtype={"view_index": "int64", "group": "string", "marker_index": "int64"},
        )
    except FileNotFoundError:
        logger.error(f"Error: projection CSV not found at {path}")
        raise DataLoaderError(f"Projection CSV not found at {path}") from None
    except (ValueError, pd.errors.ParserError) as e:
        logger.error(f"Malformed projection CSV {path}: {e}")
        raise DataLoaderError(f"Malformed projection CSV {path}: {e}") from e
    projections = projections_from_frame(frame, path)
    logger.info(f"Read {len(frame)} projection rows ({len(projections)} groups) from {path}")
    return projections


def has_weights(path: PathLike) -> bool:
    """Whether a projection CSV carries the simulator-side weight column."""
    header = pd.read_csv(path, nrows=0)
    return WEIGHT_COLUMN in header.columns


# --- Tables ---


def write_table(frame: pd.DataFrame, path: PathLike) -> None:
    """Write a summary or plot-data table as CSV (%.17g floats, empty for missing)."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(
        path, index=False, float_format=settings.FLOAT_FORMAT, lineterminator="\n", na_rep=""
    )
    logger.info(f"Wrote {len(frame)} rows to {path}")


def sinogram_to_frame(projections: Sequence[SampledProjection]) -> pd.DataFrame:
    """Long-format sinogram table; samples outside the window stay missing."""
    frames = [
        pd.DataFrame({"view_index": i, "s": proj.s, "value": proj.values})
        for i, proj in enumerate(projections)
    ]
    if not frames:
        return pd.DataFrame(columns=SINOGRAM_COLUMNS)
    return pd.concat(frames, ignore_index=True)[SINOGRAM_COLUMNS]


# --- Phantoms and experiment configs ---


def load_phantom(path: PathLike) -> DiskPhantom:
    """Load a disk phantom JSON ({"disks": [{"center", "radius", "density"}]})."""
    model = _validate(PhantomFile, _read_json(path), path)
    if model.note:
        logger.info(f"Phantom {path}: {model.note}")
    return DiskPhantom(
        tuple(Disk(Point2(*d.center), d.radius, d.density) for d in model.disks)
    )


def load_experiment_config(path: PathLike) -> Tuple[ExperimentConfig, Dict[str, Any]]:
    """
    Load and validate an experiment configuration.

    Returns:
        (validated config, raw JSON data for hashing)
    """
    data = _read_json(path)
    config = _validate(ExperimentConfig, data, path)
    logger.info(
        f"Loaded experiment '{config.name}' ({config.geometry.value}, P={config.P}, "
        f"{len(config.noise_levels)} noise levels) from {path}"
    )
    return config, data


def experiment_config_from_options(source: str, **fields: Any) -> ExperimentConfig:
    """Validate an experiment configuration assembled from command-line options."""
    return _validate(ExperimentConfig, fields, source)


def write_manifest(manifest: RunManifest, output: PathLike) -> Path:
    """Write <output>.manifest.json and return its path."""
    path = Path(f"{output}.manifest.json")
    write_json(manifest.model_dump(), path)
    return path
