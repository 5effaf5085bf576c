"""
Monte-Carlo experiment tests.

Noisy runs compare against reference error magnitudes for the reference rigs
(factor 2.5 either way) and check that doubling the noise roughly doubles the
error of the scenario-independent metrics.
"""

import math

import numpy as np
import pytest

from conftest import fanbeam_detections, parallel_detections

from core.data_loader import ExperimentConfig
from core.fanbeam_calib import calibrate_fanbeam
from core.parallel_calib import Branch, calibrate_parallel
from core.types import Geometry, Group, ParallelView
from services.experiment_service import (
    FANBEAM_METRICS,
    PARALLEL_METRICS,
    ExperimentService,
    add_detection_noise,
    clean_detections,
    compute_errors_fanbeam,
    compute_errors_parallel,
    noisy_detections,
    run_experiment,
    sample_scenario,
    stream,
)

REFERENCE_PARALLEL = {
    0.1: {"ErrS": 3.26e-4, "ErrA_I": 2.21e-3, "ErrA_II": 2.21e-3},
    0.5: {"ErrS": 1.61e-3, "ErrA_I": 1.13e-2, "ErrA_II": 1.28e-2},
    1.0: {"ErrS": 3.22e-3, "ErrA_I": 2.45e-2, "ErrA_II": 3.54e-2},
    2.0: {"ErrS": 6.51e-3, "ErrA_I": 6.10e-2, "ErrA_II": 8.20e-2},
}
REFERENCE_FANBEAM = {
    0.1: {"ErrLambda": 2.32e-2, "ErrY": 3.40e-3, "ErrP": 1.26e-3, "ErrC": 4.58e-3},
    0.5: {"ErrLambda": 1.01e-1, "ErrY": 1.52e-2, "ErrP": 5.86e-3, "ErrC": 2.12e-2},
    1.0: {"ErrLambda": 2.20e-1, "ErrY": 3.13e-2, "ErrP": 1.15e-2, "ErrC": 4.32e-2},
    2.0: {"ErrLambda": 5.19e-1, "ErrY": 7.45e-2, "ErrP": 2.63e-2, "ErrC": 9.66e-2},
}
BAND = 2.5


def _parallel_config(rig_dict, **overrides):
    fields = dict(name="parallel_test", geometry="parallel", rig=rig_dict, P=80, seed=11)
    fields.update(overrides)
    return ExperimentConfig(**fields)


def _fanbeam_config(rig_dict, **overrides):
    fields = dict(name="fanbeam_test", geometry="fanbeam", rig=rig_dict, P=30, seed=11)
    fields.update(overrides)
    return ExperimentConfig(**fields)


def test_streams_are_reproducible():
    a = stream(5, 1, 0, 3).normal(size=4)
    b = stream(5, 1, 0, 3).normal(size=4)
    c = stream(5, 1, 0, 4).normal(size=4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_parallel_scenario_avoids_axes(parallel_rig_dict):
    config = _parallel_config(parallel_rig_dict)
    scenario = sample_scenario(config, stream(3, 0))
    alphas = np.array([v.alpha for v in scenario.views])
    shifts = np.array([v.shift for v in scenario.views])
    assert len(alphas) == 80
    for axis in (0.0, math.pi / 2, math.pi):
        assert np.min(np.abs(alphas - axis)) >= 1e-3
    assert np.all(alphas[:40] < math.pi / 2)
    assert np.all(alphas[40:] > math.pi / 2)
    assert np.all((shifts >= -0.05) & (shifts < 0.05))


def test_fanbeam_scenario_ranges(fanbeam_rig_dict):
    scenario = sample_scenario(_fanbeam_config(fanbeam_rig_dict), stream(3, 0))
    lambdas = np.array([v.lam for v in scenario.views])
    jitters = np.array([v.jitter for v in scenario.views])
    assert len(lambdas) == 30
    assert np.all((lambdas >= -5.0) & (lambdas < 5.0))
    assert np.all((jitters >= -0.05) & (jitters < 0.05))


def test_detection_noise_level():
    clean = np.zeros(20000)
    assert np.array_equal(add_detection_noise(clean, 0.0, 0.01, stream(1)), clean)
    noisy = add_detection_noise(clean, 2.0, 0.01, stream(1))
    assert np.std(noisy) == pytest.approx(0.02, rel=0.05)
    with pytest.raises(ValueError):
        add_detection_noise(clean, -1.0, 0.01, stream(1))


def test_noisy_detections_strip_weights_and_merge(fanbeam_rig_dict):
    config = _fanbeam_config(fanbeam_rig_dict, P=4)
    clean = clean_detections(sample_scenario(config, stream(2, 0)))
    assert all(d.weights is not None for d in clean)
    noisy = noisy_detections(clean, 0.1, 0.01, stream(2, 1, 0, 0))
    assert all(d.weights is None for d in noisy)
    merged = noisy_detections(clean, 0.1, 0.01, stream(2, 1, 0, 0), merge_lines=True)
    assert len(merged) == 4
    assert all(d.group is Group.U and len(d.positions) == 8 for d in merged)
    assert list(merged[0].positions) == sorted(merged[0].positions)


def test_noise_free_parallel_reproduction(parallel_rig_dict):
    config = _parallel_config(parallel_rig_dict, noise_levels=[0.0], n_realizations=2)
    report = run_experiment(config)
    (summary,) = report.summaries
    assert summary.n_ok == 2
    for name in PARALLEL_METRICS:
        assert summary.metrics[name] < 1e-12


def test_noise_free_fanbeam_reproduction(fanbeam_rig_dict):
    config = _fanbeam_config(fanbeam_rig_dict, noise_levels=[0.0], n_realizations=2)
    (summary,) = run_experiment(config).summaries
    for name in FANBEAM_METRICS:
        assert summary.metrics[name] < 1e-10


def test_parallel_table_matches_reference_magnitudes(parallel_rig_dict):
    config = _parallel_config(parallel_rig_dict, noise_levels=[0.1, 0.5, 1.0, 2.0])
    frame = run_experiment(config).to_frame()
    assert list(frame.columns) == [
        "noise_level", "sigma", "ErrS", "ErrA_I", "ErrA_II", "n_ok", "n_failed"
    ]
    for _, row in frame.iterrows():
        for name, expected in REFERENCE_PARALLEL[row["noise_level"]].items():
            assert expected / BAND <= row[name] <= expected * BAND, (row["noise_level"], name)

    err_s = frame.set_index("noise_level")["ErrS"]
    for low, high in [(0.5, 1.0), (1.0, 2.0)]:
        assert 1.5 <= err_s[high] / err_s[low] <= 3.0


def test_fanbeam_table_matches_reference_magnitudes(fanbeam_rig_dict):
    config = _fanbeam_config(fanbeam_rig_dict, noise_levels=[0.1, 0.5, 1.0, 2.0])
    frame = run_experiment(config).to_frame()
    assert (frame["n_failed"] == 0).all()
    for _, row in frame.iterrows():
        for name, expected in REFERENCE_FANBEAM[row["noise_level"]].items():
            assert expected / BAND <= row[name] <= expected * BAND, (row["noise_level"], name)

    err_c = frame.set_index("noise_level")["ErrC"]
    for low, high in [(0.5, 1.0), (1.0, 2.0)]:
        assert 1.5 <= err_c[high] / err_c[low] <= 3.0


def test_classification_reproduces_grouped_run(fanbeam_rig_dict):
    common = dict(noise_levels=[0.1], n_realizations=20)
    grouped = run_experiment(_fanbeam_config(fanbeam_rig_dict, **common))
    classified = run_experiment(_fanbeam_config(fanbeam_rig_dict, classify=True, **common))
    assert classified.summaries[0].n_failed == 0
    for name in FANBEAM_METRICS:
        assert classified.summaries[0].metrics[name] == pytest.approx(
            grouped.summaries[0].metrics[name], rel=1e-9
        )


def test_averaged_magnifications_run(fanbeam_rig_dict):
    config = _fanbeam_config(
        fanbeam_rig_dict, noise_levels=[0.5], n_realizations=20, average_r=True
    )
    (summary,) = run_experiment(config).summaries
    assert summary.n_ok == 20
    assert summary.metrics["ErrC"] < REFERENCE_FANBEAM[0.5]["ErrC"] * BAND


def test_parallel_run_from_detected_markers(parallel_rig_dict):
    config = _parallel_config(
        parallel_rig_dict, P=40, noise_levels=[0.0], n_realizations=1,
        angle_margin=0.25, use_detection=True,
    )
    (summary,) = run_experiment(config).summaries
    assert summary.n_ok == 1
    assert summary.metrics["ErrS"] < 1e-3
    assert summary.metrics["ErrA_I"] < 5e-3
    assert summary.metrics["ErrA_II"] < 5e-3


def test_runs_are_reproducible(parallel_rig_dict):
    config = _parallel_config(parallel_rig_dict, P=12, noise_levels=[0.5], n_realizations=5)
    first = run_experiment(config).to_frame()
    second = run_experiment(config).to_frame()
    assert first.equals(second)
    other_seed = run_experiment(config, seed=12).to_frame()
    assert not first.equals(other_seed)


def test_scenario_is_shared_across_levels_unless_resampled(parallel_rig_dict):
    config = _parallel_config(parallel_rig_dict, P=12, noise_levels=[0.0, 0.5], n_realizations=3)
    service = ExperimentService(config)
    assert service.base_scenario == ExperimentService(config).base_scenario

    resampled = _parallel_config(
        parallel_rig_dict, P=12, noise_levels=[0.0], n_realizations=3, resample_scenario=True
    )
    (summary,) = run_experiment(resampled).summaries
    assert summary.n_ok == 3
    assert summary.metrics["ErrA_I"] < 1e-12


def test_failed_realizations_are_counted():
    rig = {
        "geometry": "parallel",
        "h_markers": [[-1.0, 0.0], [0.0, 0.0], [1.0, 0.0]],
        "v_markers": [[0.0, -2.5], [0.0, 0.5], [0.0, 2.0]],
    }
    config = ExperimentConfig(
        geometry="parallel", rig=rig, P=6, noise_levels=[0.0], n_realizations=3
    )
    report = run_experiment(config)
    assert report.failed_levels == [0.0]
    for summary in report.summaries:
        assert summary.n_ok == 0 and summary.n_failed == 3
        assert summary.failures == {"DegenerateRigError": 3}
        assert all(math.isnan(summary.metrics[name]) for name in PARALLEL_METRICS)
    assert report.realizations[0]["status"] == "failed"
    assert report.realizations[0]["error"] == "DegenerateRigError"


def test_long_frame_is_plot_ready(parallel_rig_dict):
    config = _parallel_config(parallel_rig_dict, P=8, noise_levels=[0.0, 0.1], n_realizations=2)
    report = run_experiment(config)
    long = report.to_long_frame()
    assert list(long.columns) == ["noise_level", "sigma", "metric", "value"]
    assert len(long) == 2 * len(PARALLEL_METRICS)
    assert report.geometry is Geometry.PARALLEL
    assert report.to_frame()["sigma"].tolist() == pytest.approx([0.0, 0.001])


def test_parallel_error_metrics(parallel_rig, parallel_views):
    detections = parallel_detections(parallel_rig, parallel_views)
    results_I = [calibrate_parallel(detections, Branch.I)]
    results_II = [calibrate_parallel(detections, Branch.II)]
    exact = compute_errors_parallel(results_I, results_II, parallel_views)
    assert all(exact[name] < 1e-12 for name in PARALLEL_METRICS)

    offset = [ParallelView(v.alpha + 0.01, v.shift - 0.002) for v in parallel_views]
    errors = compute_errors_parallel(results_I, results_II, offset)
    assert errors["ErrA_I"] == pytest.approx(0.01, abs=1e-9)
    assert errors["ErrA_II"] == pytest.approx(0.01, abs=1e-9)
    assert errors["ErrS"] == pytest.approx(0.002, abs=1e-9)

    assert math.isnan(compute_errors_parallel([], [], parallel_views)["ErrS"])


def test_fanbeam_error_metrics_use_solver_gauge(fanbeam_rig, fanbeam_views):
    detections = fanbeam_detections(fanbeam_rig, fanbeam_views)
    results = [calibrate_fanbeam(detections, fanbeam_rig.pattern, fanbeam_rig.D)]
    gauged = compute_errors_fanbeam(results, fanbeam_rig, fanbeam_views)
    assert all(gauged[name] < 1e-10 for name in FANBEAM_METRICS)

    raw = compute_errors_fanbeam(results, fanbeam_rig, fanbeam_views, gauge_correct=False)
    assert raw["ErrLambda"] == pytest.approx(abs(fanbeam_views[0].lam), abs=1e-9)
    assert raw["ErrY"] == pytest.approx(abs(fanbeam_views[0].jitter), abs=1e-9)
    assert raw["ErrC"] < 1e-10
