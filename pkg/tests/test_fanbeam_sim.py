import numpy as np
import pytest

from core.exceptions import InputError, MarkerOutsideSlabError
from core.fanbeam_sim import (
    apply_gauge_fanbeam,
    apply_scaling_ambiguity,
    project_marker_fanbeam,
    project_rig_fanbeam,
    project_views_fanbeam,
)
from core.types import FanBeamView, Group, Point2


def test_single_marker_projection():
    position, weight = project_marker_fanbeam(Point2(1.5, 0.4), FanBeamView(lam=0.0), 10.0)
    assert position == pytest.approx(0.4 * 10 / 8.5)
    assert weight == pytest.approx(1 / 8.5)

    position, _ = project_marker_fanbeam(Point2(1.5, 0.4), FanBeamView(lam=2.0, jitter=0.1), 10.0)
    assert position == pytest.approx((0.4 * 10 - 1.5 * 2.0) / 8.5 + 0.1)


def test_marker_on_detector_projects_onto_itself():
    position, weight = project_marker_fanbeam(Point2(0.0, 0.7), FanBeamView(lam=3.0), 10.0)
    assert position == pytest.approx(0.7)
    assert weight == pytest.approx(0.1)


@pytest.mark.parametrize("c1", [10.0, 12.0, -0.5])
def test_marker_outside_slab(c1):
    with pytest.raises(MarkerOutsideSlabError):
        project_marker_fanbeam(Point2(c1, 0.0), FanBeamView(lam=0.0), 10.0)


def test_line_projections_are_affine_in_pattern(fanbeam_rig):
    view = FanBeamView(lam=2.5, jitter=-0.03)
    projections = project_rig_fanbeam(fanbeam_rig, view, view_index=4)
    for group in (Group.A, Group.B):
        r = fanbeam_rig.r(group)
        offsets = fanbeam_rig.pattern.offsets(group)
        center = fanbeam_rig.center(group)
        expected = [
            (1 + r) * (center + o) + (view.jitter - r * view.lam) for o in offsets
        ]
        projection = projections[group]
        assert projection.view_index == 4
        assert projection.positions == pytest.approx(expected, abs=1e-12)
        assert list(projection.positions) == sorted(projection.positions)
        assert projection.weights == pytest.approx(
            [1 / (fanbeam_rig.D - fanbeam_rig.depth(group))] * 4
        )


def test_order_zero_mass_is_constant(fanbeam_rig, fanbeam_views):
    masses = [
        sum(p.weights)
        for p in project_views_fanbeam(fanbeam_rig, fanbeam_views)
        if p.group is Group.A
    ]
    assert masses == pytest.approx([4 / 8.5] * len(fanbeam_views))


def test_views_are_indexed_in_order(fanbeam_rig, fanbeam_views):
    projections = project_views_fanbeam(fanbeam_rig, fanbeam_views)
    assert len(projections) == 2 * len(fanbeam_views)
    assert sorted({p.view_index for p in projections}) == list(range(len(fanbeam_views)))


@pytest.mark.parametrize("lam_shift, y_shift", [(0.7, -0.2), (-3.0, 0.05), (0.0, 0.4)])
def test_shear_gauge_leaves_data_unchanged(fanbeam_rig, lam_shift, y_shift):
    sheared = apply_gauge_fanbeam(fanbeam_rig, lam_shift, y_shift)
    assert sheared.C_a == fanbeam_rig.C_a
    assert sheared.C_b == fanbeam_rig.C_b
    for lam, jitter in [(-4.0, 0.01), (0.0, 0.0), (3.3, -0.02)]:
        moved = project_rig_fanbeam(sheared, FanBeamView(lam, jitter))
        original = project_rig_fanbeam(
            fanbeam_rig, FanBeamView(lam + lam_shift, jitter + y_shift)
        )
        for group in (Group.A, Group.B):
            assert moved[group].positions == pytest.approx(original[group].positions, abs=1e-12)


def test_depth_scaling_keeps_positions(fanbeam_rig):
    k = 2.5
    scaled = apply_scaling_ambiguity(fanbeam_rig, k)
    assert scaled.D == pytest.approx(4.0)
    assert scaled.C_a == pytest.approx(0.6)
    view = FanBeamView(lam=1.7, jitter=0.02)
    original = project_rig_fanbeam(fanbeam_rig, view)
    seen = project_rig_fanbeam(scaled, view)
    for group in (Group.A, Group.B):
        assert seen[group].positions == pytest.approx(original[group].positions, abs=1e-12)
        assert seen[group].weights == pytest.approx([k * w for w in original[group].weights])


def test_depth_scaling_needs_positive_factor(fanbeam_rig):
    with pytest.raises(InputError):
        apply_scaling_ambiguity(fanbeam_rig, 0.0)


def test_random_shear_gauges_leave_data_unchanged(fanbeam_rig):
    rng = np.random.default_rng(31)
    for _ in range(100):
        lam_shift, y_shift = rng.uniform(-3.0, 3.0), rng.uniform(-0.5, 0.5)
        lam, jitter = rng.uniform(-5.0, 5.0), rng.uniform(-0.05, 0.05)
        sheared = apply_gauge_fanbeam(fanbeam_rig, lam_shift, y_shift)
        moved = project_rig_fanbeam(sheared, FanBeamView(lam, jitter))
        original = project_rig_fanbeam(
            fanbeam_rig, FanBeamView(lam + lam_shift, jitter + y_shift)
        )
        for group in (Group.A, Group.B):
            assert moved[group].positions == pytest.approx(original[group].positions, abs=1e-12)


def test_random_depth_scalings_keep_positions(fanbeam_rig):
    rng = np.random.default_rng(32)
    for _ in range(100):
        k = float(np.exp(rng.uniform(np.log(0.2), np.log(5.0))))
        view = FanBeamView(rng.uniform(-5.0, 5.0), rng.uniform(-0.05, 0.05))
        original = project_rig_fanbeam(fanbeam_rig, view)
        seen = project_rig_fanbeam(apply_scaling_ambiguity(fanbeam_rig, k), view)
        for group in (Group.A, Group.B):
            assert seen[group].positions == pytest.approx(original[group].positions, abs=1e-12)
