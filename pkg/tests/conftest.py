"""
Shared fixtures: the two reference rigs and small hand-picked view sets.
"""

from pathlib import Path
from typing import List

import pytest

from core.fanbeam_sim import project_views_fanbeam
from core.parallel_sim import project_markers_parallel
from core.types import DiracProjection, FanBeamRig, FanBeamView, ParallelRig, ParallelView

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"


def parallel_detections(rig: ParallelRig, views) -> List[DiracProjection]:
    """Analytic H and V projections of every view, without weights."""
    detections = []
    for i, view in enumerate(views):
        for projection in project_markers_parallel(rig, view, i).values():
            detections.append(
                DiracProjection(projection.view_index, projection.group, projection.positions)
            )
    return detections


def fanbeam_detections(rig: FanBeamRig, views) -> List[DiracProjection]:
    """Fan-beam projections of every view with the weights stripped."""
    return [
        DiracProjection(p.view_index, p.group, p.positions)
        for p in project_views_fanbeam(rig, views)
    ]


@pytest.fixture
def parallel_rig() -> ParallelRig:
    return ParallelRig(
        h_markers=[(-2.4, 0.0), (0.4, 0.0), (2.3, 0.0)],
        v_markers=[(-0.1, -2.5), (-0.1, 0.5), (-0.1, 2.0)],
    )


@pytest.fixture
def fanbeam_rig() -> FanBeamRig:
    return FanBeamRig(
        D=10.0, C_a=1.5, C_b=0.5, p_a=0.0, p_b=3.2, L=0.4, k1=3.0, k2=1.0, k3=2.0
    )


@pytest.fixture
def parallel_views() -> List[ParallelView]:
    angles = [0.3, 0.7, 1.1, 1.45, 1.9, 2.4, 2.8, 0.95]
    shifts = [0.01, -0.02, 0.03, 0.0, -0.04, 0.02, 0.045, -0.01]
    return [ParallelView(alpha=a, shift=s) for a, s in zip(angles, shifts)]


@pytest.fixture
def fanbeam_views() -> List[FanBeamView]:
    lambdas = [-1.0, 2.5, -4.0, 0.5, 3.7, -2.2, 4.9, 1.3]
    jitters = [0.01, -0.03, 0.02, 0.04, -0.01, 0.0, 0.035, -0.045]
    return [FanBeamView(lam=lam, jitter=j) for lam, j in zip(lambdas, jitters)]


@pytest.fixture
def parallel_rig_dict():
    return {
        "geometry": "parallel",
        "h_markers": [[-2.4, 0.0], [0.4, 0.0], [2.3, 0.0]],
        "v_markers": [[-0.1, -2.5], [-0.1, 0.5], [-0.1, 2.0]],
    }


@pytest.fixture
def fanbeam_rig_dict():
    return {
        "geometry": "fanbeam",
        "D": 10.0, "C_a": 1.5, "p_a": 0.0, "C_b": 0.5, "p_b": 3.2,
        "L": 0.4, "k1": 3.0, "k2": 1.0, "k3": 2.0,
    }
