"""
Monte-Carlo Experiment Service

Runs noise-sensitivity experiments for both geometries: a seeded scenario
(rig placement, angles or source positions, detector shifts) is simulated,
Gaussian noise is added to the detected marker positions, the closed-form
solver recovers the geometry, and mean absolute errors are aggregated per
noise level.

Random streams are derived from the experiment seed with
``SeedSequence(seed, spawn_key=...)``:
- (0,)                   the scenario shared by all noise levels
- (1, level, k)          detection noise of realization k at a level
- (2, level, k)          resampled scenario (only with resample_scenario)
so every realization is reproducible on its own, independent of run order.

Usage:
    from services.experiment_service import ExperimentService

    report = ExperimentService(config).run()
    print(report.to_frame())
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from core.data_loader import ExperimentConfig, rig_from_model
from core.exceptions import SolverError, TomocalError
from core.fanbeam_calib import FanBeamCalibResult, calibrate_fanbeam
from core.fanbeam_sim import project_views_fanbeam
from core.parallel_calib import Branch, ParallelCalibResult, calibrate_parallel
from core.parallel_sim import project_markers_parallel, simulate_detected_projections
from core.types import (
    TWO_PI,
    DiracProjection,
    FanBeamRig,
    FanBeamView,
    Geometry,
    Group,
    ParallelRig,
    ParallelView,
)

logger = logging.getLogger(__name__)

SCENARIO_STREAM = 0
NOISE_STREAM = 1
RESAMPLED_SCENARIO_STREAM = 2

PARALLEL_METRICS = ("ErrS", "ErrA_I", "ErrA_II")
FANBEAM_METRICS = ("ErrLambda", "ErrY", "ErrP", "ErrC")


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for one named stream of an experiment."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


@dataclass(frozen=True)
class Scenario:
    """Ground truth of one simulated acquisition."""

    geometry: Geometry
    rig: Union[ParallelRig, FanBeamRig]
    views: Tuple[Union[ParallelView, FanBeamView], ...]


@dataclass(frozen=True)
class FanBeamTruth:
    """Fan-beam ground truth expressed in the solver's gauge."""

    lambdas: np.ndarray
    jitters: np.ndarray
    C_a: float
    C_b: float
    p_a: float
    p_b: float


@dataclass
class ErrorSummary:
    """Mean absolute errors of one noise level."""

    geometry: Geometry
    noise_level: float
    sigma: float
    metrics: Dict[str, float]
    n_ok: int
    n_failed: int
    failures: Dict[str, int] = field(default_factory=dict)

    def to_row(self) -> Dict[str, Union[float, int]]:
        row = {"noise_level": self.noise_level, "sigma": self.sigma}
        row.update(self.metrics)
        row.update({"n_ok": self.n_ok, "n_failed": self.n_failed})
        return row


@dataclass
class ExperimentReport:
    name: str
    geometry: Geometry
    seed: int
    summaries: List[ErrorSummary]
    realizations: List[Dict] = field(default_factory=list)

    @property
    def metric_names(self) -> Tuple[str, ...]:
        return PARALLEL_METRICS if self.geometry is Geometry.PARALLEL else FANBEAM_METRICS

    def to_frame(self) -> pd.DataFrame:
        """One row per noise level, the error columns in table order."""
        columns = ["noise_level", "sigma", *self.metric_names, "n_ok", "n_failed"]
        return pd.DataFrame([s.to_row() for s in self.summaries], columns=columns)

    def to_long_frame(self) -> pd.DataFrame:
        """Plot-ready (noise_level, sigma, metric, value) rows."""
        rows = [
            {"noise_level": s.noise_level, "sigma": s.sigma, "metric": m, "value": s.metrics[m]}
            for s in self.summaries
            for m in self.metric_names
        ]
        return pd.DataFrame(rows, columns=["noise_level", "sigma", "metric", "value"])

    @property
    def failed_levels(self) -> List[float]:
        return [s.noise_level for s in self.summaries if s.n_ok == 0]


# --- Scenario sampling and noise ---


def sample_scenario(config: ExperimentConfig, rng: np.random.Generator) -> Scenario:
    """
    Draw the views of one acquisition.

    Parallel: the first half of the angles is uniform in
    (margin, pi/2 - margin), the second half in (pi/2 + margin, pi - margin);
    shifts are uniform on shift_range. Fan-beam: source positions uniform on
    lambda_range, jitters uniform on jitter_range.
    """
    rig = rig_from_model(config.rig)
    P = config.P
    if config.geometry is Geometry.PARALLEL:
        margin = config.angle_margin
        half = P // 2
        first = rng.uniform(margin, math.pi / 2 - margin, size=half)
        second = rng.uniform(math.pi / 2 + margin, math.pi - margin, size=P - half)
        shifts = rng.uniform(*config.shift_range, size=P)
        angles = np.concatenate([first, second])
        views = tuple(ParallelView(alpha=a, shift=s) for a, s in zip(angles, shifts))
    else:
        lambdas = rng.uniform(*config.lambda_range, size=P)
        jitters = rng.uniform(*config.jitter_range, size=P)
        views = tuple(FanBeamView(lam=lam, jitter=j) for lam, j in zip(lambdas, jitters))
    return Scenario(geometry=config.geometry, rig=rig, views=views)


def add_detection_noise(
    positions: Sequence[float], noise_level: float, pixel_size: float, rng: np.random.Generator
) -> np.ndarray:
    """Perturb each position by N(0, noise_level * pixel_size)."""
    clean = np.asarray(positions, dtype=float)
    if noise_level < 0:
        raise ValueError(f"Noise level must be non-negative, got {noise_level}")
    if noise_level == 0:
        return clean.copy()
    return clean + rng.normal(0.0, noise_level * pixel_size, size=clean.shape)


def clean_detections(scenario: Scenario, use_detection: bool = False) -> List[DiracProjection]:
    """Noise-free detected positions of a scenario (analytic or rendered and detected)."""
    if scenario.geometry is Geometry.FANBEAM:
        return project_views_fanbeam(scenario.rig, scenario.views)
    if use_detection:
        return simulate_detected_projections(scenario.rig, scenario.views)
    detections = []
    for view_index, view in enumerate(scenario.views):
        detections.extend(project_markers_parallel(scenario.rig, view, view_index).values())
    return detections


def noisy_detections(
    detections: Sequence[DiracProjection],
    noise_level: float,
    pixel_size: float,
    rng: np.random.Generator,
    merge_lines: bool = False,
) -> List[DiracProjection]:
    """
    Solver input: noisy positions, no weights.

    Projections are perturbed in (view, group) order. With merge_lines the two
    fan-beam lines of a view become one unclassified group of 8 positions.
    """
    ordered = sorted(detections, key=lambda d: (d.view_index, d.group.value))
    noisy = [
        DiracProjection(
            view_index=d.view_index,
            group=d.group,
            positions=tuple(add_detection_noise(d.positions, noise_level, pixel_size, rng)),
        )
        for d in ordered
    ]
    if not merge_lines:
        return noisy
    merged: Dict[int, List[float]] = {}
    for d in noisy:
        merged.setdefault(d.view_index, []).extend(d.positions)
    return [
        DiracProjection(view_index=i, group=Group.U, positions=tuple(sorted(p)))
        for i, p in sorted(merged.items())
    ]


# --- Error metrics ---


def _angle_error(estimate: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Absolute angular difference, wrapped to [0, pi]."""
    return np.abs(np.remainder(estimate - truth + math.pi, TWO_PI) - math.pi)


def compute_errors_parallel(
    results_I: Sequence[ParallelCalibResult],
    results_II: Sequence[ParallelCalibResult],
    truth_views: Sequence[ParallelView],
) -> Dict[str, float]:
    """
    Mean absolute errors over realizations and views.

    ErrS compares shifts_all with the true shifts, ErrA_I compares branch-I
    angles with alpha and ErrA_II compares branch-II angles with pi - alpha.
    """
    alphas = np.array([v.alpha for v in truth_views])
    shifts = np.array([v.shift for v in truth_views])
    errors = {name: math.nan for name in PARALLEL_METRICS}
    if results_I:
        est_shifts = np.array([r.shifts_all for r in results_I])
        est_angles = np.array([r.angles for r in results_I])
        errors["ErrS"] = float(np.mean(np.abs(est_shifts - shifts)))
        errors["ErrA_I"] = float(np.mean(_angle_error(est_angles, alphas)))
    if results_II:
        est_angles = np.array([r.angles for r in results_II])
        errors["ErrA_II"] = float(np.mean(_angle_error(est_angles, math.pi - alphas)))
    return errors


def truth_in_solver_gauge(rig: FanBeamRig, views: Sequence[FanBeamView]) -> FanBeamTruth:
    """
    Re-express fan-beam ground truth with lambda_0 = 0 and y_0 = 0.

    Source positions and jitters lose the view-0 values; line centres are
    sheared: p -> p - (lambda_0 + y_0) C / D + y_0.
    """
    lam0, y0 = views[0].lam, views[0].jitter

    def sheared(depth: float, center: float) -> float:
        return center - (lam0 + y0) * depth / rig.D + y0

    return FanBeamTruth(
        lambdas=np.array([v.lam - lam0 for v in views]),
        jitters=np.array([v.jitter - y0 for v in views]),
        C_a=rig.C_a,
        C_b=rig.C_b,
        p_a=sheared(rig.C_a, rig.p_a),
        p_b=sheared(rig.C_b, rig.p_b),
    )


def compute_errors_fanbeam(
    results: Sequence[FanBeamCalibResult],
    rig: FanBeamRig,
    truth_views: Sequence[FanBeamView],
    gauge_correct: bool = True,
) -> Dict[str, float]:
    """
    Mean absolute errors ErrLambda, ErrY (per view), ErrP and ErrC (per line).

    With gauge_correct=False the raw ground truth is used, which only matches
    when view 0 happens to sit at lambda = 0, y = 0.
    """
    if gauge_correct:
        truth = truth_in_solver_gauge(rig, truth_views)
    else:
        truth = FanBeamTruth(
            lambdas=np.array([v.lam for v in truth_views]),
            jitters=np.array([v.jitter for v in truth_views]),
            C_a=rig.C_a, C_b=rig.C_b, p_a=rig.p_a, p_b=rig.p_b,
        )
    if not results:
        return {name: math.nan for name in FANBEAM_METRICS}
    lambdas = np.array([r.lambdas for r in results])
    jitters = np.array([r.jitters for r in results])
    p_err = [(abs(r.p_a - truth.p_a) + abs(r.p_b - truth.p_b)) / 2 for r in results]
    c_err = [(abs(r.C_a - truth.C_a) + abs(r.C_b - truth.C_b)) / 2 for r in results]
    return {
        "ErrLambda": float(np.mean(np.abs(lambdas - truth.lambdas))),
        "ErrY": float(np.mean(np.abs(jitters - truth.jitters))),
        "ErrP": float(np.mean(p_err)),
        "ErrC": float(np.mean(c_err)),
    }


# --- Experiment runner ---


class ExperimentService:
    """Runs one experiment configuration level by level."""

    def __init__(self, config: ExperimentConfig, seed: Optional[int] = None):
        """
        Args:
            config: Validated experiment configuration
            seed: Overrides config.seed when given
        """
        self.config = config
        self.seed = config.seed if seed is None else seed
        self.base_scenario = sample_scenario(config, stream(self.seed, SCENARIO_STREAM))
        logger.info(
            f"ExperimentService ready: '{config.name}' ({config.geometry.value}), "
            f"P={config.P}, seed={self.seed}"
        )

    def _calibrate(self, detections: List[DiracProjection], scenario: Scenario):
        config = self.config
        if config.geometry is Geometry.PARALLEL:
            return (
                calibrate_parallel(detections, Branch.I, scan_pairs=config.scan_pairs),
                calibrate_parallel(detections, Branch.II, scan_pairs=config.scan_pairs),
            )
        return calibrate_fanbeam(
            detections,
            pattern=scenario.rig.pattern,
            D=scenario.rig.D,
            average=config.average_r,
            cross_ratio_tolerance=config.cross_ratio_tolerance,
        )

    def _errors(self, outcomes: List[Tuple[Scenario, object]]) -> Dict[str, float]:
        """Errors of the successful realizations, grouped by scenario."""
        if not outcomes:
            parallel = self.config.geometry is Geometry.PARALLEL
            names = PARALLEL_METRICS if parallel else FANBEAM_METRICS
            return {name: math.nan for name in names}
        per_scenario: Dict[int, List] = {}
        scenarios: Dict[int, Scenario] = {}
        for scenario, result in outcomes:
            per_scenario.setdefault(id(scenario), []).append(result)
            scenarios[id(scenario)] = scenario
        weighted: Dict[str, float] = {}
        for key, results in per_scenario.items():
            scenario = scenarios[key]
            if scenario.geometry is Geometry.PARALLEL:
                errors = compute_errors_parallel(
                    [r[0] for r in results], [r[1] for r in results], scenario.views
                )
            else:
                errors = compute_errors_fanbeam(results, scenario.rig, scenario.views)
            for name, value in errors.items():
                weighted[name] = weighted.get(name, 0.0) + value * len(results)
        return {name: value / len(outcomes) for name, value in weighted.items()}

    def run_level(self, level_index: int, noise_level: float) -> Tuple[ErrorSummary, List[Dict]]:
        """All realizations of one noise level."""
        config = self.config
        merge = config.geometry is Geometry.FANBEAM and config.classify
        base_clean = clean_detections(self.base_scenario, config.use_detection)

        outcomes = []
        log = []
        failures: Dict[str, int] = {}
        for k in range(config.n_realizations):
            if config.resample_scenario:
                scenario = sample_scenario(
                    config, stream(self.seed, RESAMPLED_SCENARIO_STREAM, level_index, k)
                )
                clean = clean_detections(scenario, config.use_detection)
            else:
                scenario, clean = self.base_scenario, base_clean
            rng = stream(self.seed, NOISE_STREAM, level_index, k)
            detections = noisy_detections(clean, noise_level, config.pixel_size, rng, merge)
            try:
                result = self._calibrate(detections, scenario)
            except SolverError as e:
                name = type(e).__name__
                failures[name] = failures.get(name, 0) + 1
                log.append({
                    "noise_level": noise_level, "realization": k, "status": "failed",
                    "error": name, "message": str(e), "view_indices": list(e.view_indices),
                })
                continue
            outcomes.append((scenario, result))
            log.append({"noise_level": noise_level, "realization": k, "status": "ok"})

        n_failed = config.n_realizations - len(outcomes)
        if n_failed:
            logger.warning(
                f"Noise level {noise_level}: {n_failed} of {config.n_realizations} "
                f"realizations failed and are excluded ({failures})"
            )
        summary = ErrorSummary(
            geometry=config.geometry,
            noise_level=noise_level,
            sigma=noise_level * config.pixel_size,
            metrics=self._errors(outcomes),
            n_ok=len(outcomes),
            n_failed=n_failed,
            failures=failures,
        )
        logger.info(f"Noise level {noise_level} done: {summary.metrics}")
        return summary, log

    def run(self) -> ExperimentReport:
        summaries, realizations = [], []
        for level_index, noise_level in enumerate(self.config.noise_levels):
            try:
                summary, log = self.run_level(level_index, noise_level)
            except TomocalError:
                logger.error(f"Noise level {noise_level} aborted", exc_info=True)
                raise
            summaries.append(summary)
            realizations.extend(log)
        return ExperimentReport(
            name=self.config.name,
            geometry=self.config.geometry,
            seed=self.seed,
            summaries=summaries,
            realizations=realizations,
        )


def run_experiment(config: ExperimentConfig, seed: Optional[int] = None) -> ExperimentReport:
    """Run every noise level of an experiment and aggregate the errors."""
    return ExperimentService(config, seed).run()
