import math

import numpy as np
import pytest
from conftest import parallel_detections

from core.exceptions import (
    DegenerateAngleError,
    DegenerateRigError,
    DegenerateViewError,
    DegenerateViewPairError,
    IncompleteViewError,
    InputError,
    InsufficientViewsError,
)
from core.parallel_calib import (
    Branch,
    calibrate_parallel,
    dirac_moment,
    equivalent_solutions,
    estimate_alpha0,
    estimate_coefficients,
    estimate_angles,
    estimate_shift,
    select_reference_pair,
    view_moments,
)
from core.types import DiracProjection, Group, ParallelRig, ParallelView

A20, A02, A30, A03 = 11.18, 10.5, -4.95, -7.5


def _wrapped(a, b):
    return np.abs(np.remainder(np.asarray(a) - np.asarray(b) + math.pi, 2 * math.pi) - math.pi)


def test_dirac_moments():
    assert dirac_moment([0.5, 1.5], 0) == 2.0
    assert dirac_moment([0.5, 1.5], 1) == 2.0
    assert dirac_moment([0.5, 1.5], 3) == pytest.approx(0.125 + 3.375)
    with pytest.raises(InputError):
        dirac_moment([1.0], 4)


def test_estimate_shift():
    assert estimate_shift([1.0, 2.0, 4.5]) == pytest.approx(2.5)
    with pytest.raises(InputError):
        estimate_shift([])
    with pytest.raises(InputError):
        estimate_shift([1.0, 2.0], group_size=3)


def _second_moments(alpha):
    return A20 * math.cos(alpha) ** 2, A02 * math.sin(alpha) ** 2


@pytest.mark.parametrize("alpha0, alpha1", [(0.6, 1.2), (0.2, 2.5), (1.3, 0.1)])
def test_estimate_alpha0_branches(alpha0, alpha1):
    m2h_0, m2v_0 = _second_moments(alpha0)
    m2h_1, m2v_1 = _second_moments(alpha1)
    assert estimate_alpha0(m2h_0, m2v_0, m2h_1, m2v_1, Branch.I) == pytest.approx(
        alpha0, abs=1e-12
    )
    assert estimate_alpha0(m2h_0, m2v_0, m2h_1, m2v_1, Branch.II) == pytest.approx(
        math.pi - alpha0, abs=1e-12
    )


def test_identical_views_do_not_fix_alpha0():
    m2h, m2v = _second_moments(0.6)
    with pytest.raises(DegenerateViewPairError) as excinfo:
        estimate_alpha0(m2h, m2v, m2h, m2v, view_indices=(2, 5))
    assert excinfo.value.view_indices == (2, 5)


def test_coefficients_need_off_axis_reference():
    with pytest.raises(DegenerateAngleError):
        estimate_coefficients(11.18, 0.0, -4.95, 0.0, 0.0)


def test_coefficients_from_reference_view():
    alpha = 0.9
    c, s = math.cos(alpha), math.sin(alpha)
    coefficients = estimate_coefficients(A20 * c**2, A02 * s**2, A30 * c**3, A03 * s**3, alpha)
    assert coefficients.a20 == pytest.approx(A20, abs=1e-12)
    assert coefficients.a02 == pytest.approx(A02, abs=1e-12)
    assert coefficients.a30 == pytest.approx(A30, abs=1e-12)
    assert coefficients.a03 == pytest.approx(A03, abs=1e-12)


def test_angles_from_centred_moments(parallel_rig, parallel_views):
    h = np.array([[m.x1, m.x2] for m in parallel_rig.h_markers])
    v = np.array([[m.x1, m.x2] for m in parallel_rig.v_markers])
    thetas = np.array([[math.cos(view.alpha), math.sin(view.alpha)] for view in parallel_views])
    h_centred = thetas @ (h - h.mean(axis=0)).T
    v_centred = thetas @ (v - v.mean(axis=0)).T
    moments = view_moments(h_centred, v_centred)

    alpha = parallel_views[0].alpha
    coefficients = estimate_coefficients(
        moments.m2h[0], moments.m2v[0], moments.m3h[0], moments.m3v[0], alpha
    )
    angles = estimate_angles(moments, coefficients)
    assert np.max(_wrapped(angles, [view.alpha for view in parallel_views])) < 1e-12


def test_noise_free_recovery(parallel_rig, parallel_views):
    result = calibrate_parallel(parallel_detections(parallel_rig, parallel_views))
    alphas = [v.alpha for v in parallel_views]
    shifts = [v.shift for v in parallel_views]

    assert result.n_views == len(parallel_views)
    assert np.max(_wrapped(result.angles, alphas)) < 1e-12
    assert result.shifts_all == pytest.approx(shifts, abs=1e-12)
    assert result.coefficients.a30 == pytest.approx(A30, abs=1e-12)
    assert result.coefficients.a03 == pytest.approx(A03, abs=1e-12)
    assert result.coefficients.a20 == pytest.approx(A20, abs=1e-12)
    assert result.sin2_alpha0 == pytest.approx(math.sin(0.3) ** 2, abs=1e-12)
    assert max(abs(d) for d in result.unit_norm_deviation) < 1e-12


def test_group_shifts_carry_the_group_centre(parallel_rig, parallel_views):
    result = calibrate_parallel(parallel_detections(parallel_rig, parallel_views))
    for view, shift_h, shift_v in zip(parallel_views, result.shifts_h, result.shifts_v):
        # h-group centre (0.1, 0), v-group centre (-0.1, 0)
        assert shift_h == pytest.approx(view.shift + 0.1 * math.cos(view.alpha), abs=1e-12)
        assert shift_v == pytest.approx(view.shift - 0.1 * math.cos(view.alpha), abs=1e-12)


def test_branch_two_returns_supplementary_angles(parallel_rig, parallel_views):
    detections = parallel_detections(parallel_rig, parallel_views)
    result = calibrate_parallel(detections, branch=Branch.II)
    supplements = [math.pi - v.alpha for v in parallel_views]
    assert np.max(_wrapped(result.angles, supplements)) < 1e-12
    assert result.branch is Branch.II
    assert result.coefficients.a30 == pytest.approx(-A30, abs=1e-12)


def test_reference_pair_choice_does_not_change_exact_result(parallel_rig, parallel_views):
    detections = parallel_detections(parallel_rig, parallel_views)
    default = calibrate_parallel(detections)
    other = calibrate_parallel(detections, reference_pair=(0, 4))
    assert np.max(_wrapped(default.angles, other.angles)) < 1e-12


def test_repeated_reference_view_is_degenerate(parallel_rig):
    views = [ParallelView(0.5, 0.0), ParallelView(0.5, 0.02), ParallelView(1.2, 0.01)]
    detections = parallel_detections(parallel_rig, views)
    with pytest.raises(DegenerateViewPairError) as excinfo:
        calibrate_parallel(detections)
    assert excinfo.value.view_indices == (0, 1)

    result = calibrate_parallel(detections, scan_pairs=True)
    assert result.reference_views != (0, 1)
    assert np.max(_wrapped(result.angles, [v.alpha for v in views])) < 1e-10


def test_select_reference_pair_prefers_distinct_views():
    alphas = np.array([0.5, 0.5 + 1e-6, 1.3])
    h = np.column_stack([np.cos(alphas) * x for x in (-2.5, 0.3, 2.2)])
    v = np.column_stack([np.sin(alphas) * x for x in (-2.5, 0.5, 2.0)])
    i, j = select_reference_pair(view_moments(h, v))
    assert 2 in (i, j)


def test_axis_aligned_view_is_reported(parallel_rig, parallel_views):
    views = list(parallel_views)
    views[3] = ParallelView(alpha=math.pi / 2, shift=0.0)
    with pytest.raises(DegenerateViewError) as excinfo:
        calibrate_parallel(parallel_detections(parallel_rig, views))
    assert excinfo.value.view_indices == (3,)


def test_equidistant_group_makes_angles_unidentifiable(parallel_views):
    rig = ParallelRig(
        h_markers=[(-1.0, 0.0), (0.0, 0.0), (1.0, 0.0)],
        v_markers=[(0.0, -2.5), (0.0, 0.5), (0.0, 2.0)],
    )
    with pytest.raises(DegenerateRigError):
        calibrate_parallel(parallel_detections(rig, parallel_views))


def test_single_view_is_not_enough(parallel_rig):
    with pytest.raises(InsufficientViewsError):
        calibrate_parallel(parallel_detections(parallel_rig, [ParallelView(0.4)]))


def test_two_marker_groups_are_rejected():
    rig = ParallelRig(h_markers=[(-1.0, 0.0), (2.0, 0.0)], v_markers=[(0.0, -1.0), (0.0, 2.0)])
    views = [ParallelView(0.4), ParallelView(1.1)]
    with pytest.raises(DegenerateRigError):
        calibrate_parallel(parallel_detections(rig, views))


def test_unequal_marker_counts_are_incomplete(parallel_rig, parallel_views):
    detections = parallel_detections(parallel_rig, parallel_views[:3])
    short = [
        DiracProjection(d.view_index, d.group, d.positions[:2])
        if (d.view_index, d.group) == (2, Group.V) else d
        for d in detections
    ]
    with pytest.raises(IncompleteViewError) as excinfo:
        calibrate_parallel(short)
    assert excinfo.value.view_indices == (2,)


def test_invalid_reference_pair(parallel_rig, parallel_views):
    detections = parallel_detections(parallel_rig, parallel_views)
    with pytest.raises(InputError):
        calibrate_parallel(detections, reference_pair=(0, 0))
    with pytest.raises(InputError):
        calibrate_parallel(detections, reference_pair=(0, 99))


def test_equivalent_solution_families(parallel_rig, parallel_views):
    result = calibrate_parallel(parallel_detections(parallel_rig, parallel_views))
    families = equivalent_solutions(result)
    assert len(families) == 4
    alpha = np.asarray(result.angles)
    shifts = np.asarray(result.shifts_all)
    assert np.max(_wrapped(families[1][0], math.pi - alpha)) < 1e-15
    assert families[2][1] == pytest.approx(-shifts)
    assert np.max(_wrapped(families[3][0], -alpha)) < 1e-15
    for angles, _ in families:
        assert np.all((angles >= 0.0) & (angles < 2 * math.pi))


def test_result_serialises_with_diagnostics(parallel_rig, parallel_views):
    result = calibrate_parallel(parallel_detections(parallel_rig, parallel_views))
    data = result.to_dict()
    assert data["geometry"] == "parallel"
    assert data["branch"] == "I"
    assert len(data["angles"]) == len(parallel_views)
    assert data["diagnostics"]["max_abs_unit_norm_deviation"] < 1e-12
    assert "gauge_note" in data
