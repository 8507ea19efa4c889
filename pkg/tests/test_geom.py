"""Coordinate machinery: depth bins, projection, trilinear sampling, box IoU."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxelfuse.errors import ContractError, NumericError, ShapeError
from voxelfuse.geom import (
    Box3D,
    Calibration,
    DepthBinSpec,
    GridSpec,
    compose_projection,
    depth_to_onehot,
    iou_3d,
    lid_bin_index,
    lid_edges,
    project,
    project_points,
    trilinear_corners,
    trilinear_sample,
    unproject,
    voxel_center,
)
from voxelfuse.kitti import parse_kitti_calib

# ---------------------------------------------------------------------------
# depth bins


def test_lid_edges_0_10_4():
    edges = lid_edges(DepthBinSpec(0, 10, 4))
    assert np.array_equal(edges, [0.0, 1.0, 3.0, 6.0, 10.0])


def test_lid_edges_single_bin():
    for d in (1.0, 7.25, 70.4):
        assert np.array_equal(lid_edges(DepthBinSpec(0, d, 1)), [0.0, d])


def test_lid_edges_widths_increase_at_cloud_range():
    edges = lid_edges(DepthBinSpec(0, 70.4, 80))
    widths = np.diff(edges)
    assert np.all(np.diff(widths) > 0)
    assert edges[0] == 0.0 and edges[-1] == 70.4


@settings(max_examples=100, deadline=None)
@given(
    d_min=st.floats(0, 100),
    span=st.floats(0.1, 500),
    r=st.integers(1, 200),
)
def test_lid_edges_properties(d_min, span, r):
    spec = DepthBinSpec(d_min, d_min + span, r)
    edges = lid_edges(spec)
    assert edges[0] == spec.d_min
    assert edges[-1] == spec.d_max
    assert np.all(np.diff(edges) > 0)
    assert np.all(np.diff(np.diff(edges)) > -1e-9)  # widths non-decreasing


def test_depth_bin_spec_validation():
    with pytest.raises(ContractError):
        DepthBinSpec(5, 5, 4)
    with pytest.raises(ContractError):
        DepthBinSpec(0, 10, 0)
    with pytest.raises(ContractError):
        DepthBinSpec(0, math.inf, 4)


def test_depth_to_onehot_examples():
    spec = DepthBinSpec(0, 10, 4)  # edges [0, 1, 3, 6, 10]
    assert np.array_equal(depth_to_onehot(2.0, spec), [0, 1, 0, 0])
    assert np.array_equal(depth_to_onehot(-0.5, spec), [0, 0, 0, 0])
    assert np.array_equal(depth_to_onehot(10.0, spec), [0, 0, 0, 1])
    assert np.array_equal(depth_to_onehot(0.0, spec), [1, 0, 0, 0])
    # half-open: an interior edge belongs to the bin it opens
    assert np.array_equal(depth_to_onehot(3.0, spec), [0, 0, 1, 0])


@settings(max_examples=100, deadline=None)
@given(depth=st.floats(-50, 150), r=st.integers(1, 40))
def test_depth_to_onehot_sums_to_zero_or_one(depth, r):
    total = depth_to_onehot(depth, DepthBinSpec(0, 100, r)).sum()
    assert total in (0.0, 1.0)


def test_depth_to_onehot_rejects_nonfinite():
    with pytest.raises(NumericError):
        depth_to_onehot(math.nan, DepthBinSpec(0, 10, 4))


def test_lid_bin_index_fractional_position():
    spec = DepthBinSpec(0, 10, 4)  # edges [0, 1, 3, 6, 10]
    assert lid_bin_index(np.array([2.0]), spec)[0] == pytest.approx(1.5)
    assert lid_bin_index(np.array([0.0]), spec)[0] == 0.0
    assert lid_bin_index(np.array([10.0]), spec)[0] == pytest.approx(4.0)
    assert lid_bin_index(np.array([-1.0]), spec)[0] < -1e8  # far out of range


# ---------------------------------------------------------------------------
# projection


def test_project_on_axis_point(identity_calib):
    assert project(identity_calib, (0.0, 0.0, 5.0)) == (0.0, 0.0, 5.0)


def test_project_doubling_focal_doubles_pixels():
    p = (1.5, -2.0, 4.0)
    base = Calibration(np.diag([1.0, 1.0, 1.0]) @ np.hstack([np.eye(3), np.zeros((3, 1))]))
    doubled = Calibration(np.diag([2.0, 2.0, 1.0]) @ np.hstack([np.eye(3), np.zeros((3, 1))]))
    u1, v1, d1 = project(base, p)
    u2, v2, d2 = project(doubled, p)
    assert (u2, v2) == (2 * u1, 2 * v1)
    assert d1 == d2


def test_project_behind_camera_is_none(identity_calib):
    assert project(identity_calib, (0.0, 0.0, -1.0)) is None
    assert project(identity_calib, (0.0, 0.0, 0.0)) is None


def test_project_rejects_nonfinite(identity_calib):
    with pytest.raises(NumericError):
        project(identity_calib, (np.nan, 0.0, 1.0))


def test_project_points_matches_scalar(identity_calib):
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(40, 3)) * 5 + [0, 0, 6]
    u, v, d, ok = project_points(identity_calib, pts)
    for i, p in enumerate(pts):
        single = project(identity_calib, p)
        if single is None:
            assert not ok[i]
        else:
            assert ok[i]
            assert (u[i], v[i], d[i]) == pytest.approx(single, abs=1e-12)


def test_project_unproject_round_trip(kitti_calib_path):
    calib = parse_kitti_calib(kitti_calib_path)
    rng = np.random.default_rng(1)
    for _ in range(50):
        p = rng.uniform([1, -20, -2], [60, 20, 2])
        u, v, depth = project(calib, p)
        assert depth > 0.1
        back = unproject(calib, u, v, depth)
        assert np.max(np.abs(back - p)) < 1e-9


def test_compose_projection_shape_check():
    with pytest.raises(ShapeError):
        compose_projection(np.eye(3), np.eye(3), np.eye(4))


# ---------------------------------------------------------------------------
# voxel lattice


def test_voxel_center_unit_grid():
    spec = GridSpec(np.zeros(3), np.ones(3), (2, 2, 2))
    assert np.array_equal(voxel_center(spec, (0, 0, 0)), [0.5, 0.5, 0.5])


def test_voxel_center_offset_grid():
    spec = GridSpec([0.0, -40.0, -3.0], [0.2, 0.2, 0.4], (352, 400, 10))
    assert np.allclose(voxel_center(spec, (1, 2, 3)), [0.3, -39.5, -1.6], atol=1e-12)


def test_adjacent_voxel_centers_differ_by_voxel_size():
    spec = GridSpec([1.0, 2.0, 3.0], [0.3, 0.5, 0.7], (4, 4, 4))
    a = voxel_center(spec, (1, 1, 1))
    for axis in range(3):
        idx = [1, 1, 1]
        idx[axis] += 1
        step = voxel_center(spec, idx) - a
        expected = np.zeros(3)
        expected[axis] = spec.voxel_size[axis]
        assert np.allclose(step, expected, atol=1e-12)


def test_voxel_center_range_check(small_grid):
    with pytest.raises(IndexError):
        voxel_center(small_grid, (4, 0, 0))
    with pytest.raises(IndexError):
        voxel_center(small_grid, (0, -1, 0))


def test_grid_spec_validation():
    with pytest.raises(ContractError):
        GridSpec(np.zeros(3), [1.0, 0.0, 1.0], (2, 2, 2))
    with pytest.raises(ContractError):
        GridSpec(np.zeros(3), np.ones(3), (2, 0, 2))
    with pytest.raises(ContractError):
        GridSpec([np.inf, 0, 0], np.ones(3), (2, 2, 2))


# ---------------------------------------------------------------------------
# trilinear sampling


def test_trilinear_reproduces_lattice_nodes():
    rng = np.random.default_rng(2)
    grid = rng.normal(size=(3, 4, 5, 2))
    for idx in [(0, 0, 0), (2, 3, 4), (1, 2, 3)]:
        assert np.allclose(trilinear_sample(grid, np.array(idx, dtype=float)),
                           grid[idx], atol=1e-12)


def test_trilinear_cell_center_is_corner_mean():
    rng = np.random.default_rng(3)
    grid = rng.normal(size=(2, 2, 2, 3))
    out = trilinear_sample(grid, np.array([0.5, 0.5, 0.5]))
    assert np.allclose(out, grid.reshape(8, 3).mean(axis=0), atol=1e-12)


def test_trilinear_exact_on_affine_field():
    dims = (5, 6, 4)
    u, v, r = np.meshgrid(*[np.arange(d, dtype=float) for d in dims], indexing="ij")
    grid = (2 * u - v + 3 * r)[..., None]
    rng = np.random.default_rng(4)
    for _ in range(100):
        q = rng.uniform([0, 0, 0], np.array(dims) - 1.0)
        expected = 2 * q[0] - q[1] + 3 * q[2]
        assert abs(trilinear_sample(grid, q)[0] - expected) < 1e-10


def test_trilinear_weights_sum_to_one_in_range():
    rng = np.random.default_rng(5)
    q = rng.uniform(-0.5, 3.5, size=(200, 3))
    _, weights, _, in_range = trilinear_corners(q, (4, 4, 4))
    assert np.all(in_range)
    assert np.max(np.abs(weights.sum(axis=1) - 1.0)) < 1e-12


def test_trilinear_linear_in_grid():
    rng = np.random.default_rng(6)
    g1 = rng.normal(size=(3, 3, 3, 2))
    g2 = rng.normal(size=(3, 3, 3, 2))
    q = rng.uniform(0, 2, size=3)
    lhs = trilinear_sample(2.5 * g1 - 1.5 * g2, q)
    rhs = 2.5 * trilinear_sample(g1, q) - 1.5 * trilinear_sample(g2, q)
    assert np.allclose(lhs, rhs, atol=1e-10)


def test_trilinear_out_of_range_returns_zero():
    grid = np.ones((3, 3, 3, 2))
    assert np.array_equal(trilinear_sample(grid, np.array([-0.6, 1.0, 1.0])), [0.0, 0.0])
    assert np.array_equal(trilinear_sample(grid, np.array([1.0, 1.0, 2.6])), [0.0, 0.0])


def test_trilinear_edge_queries_keep_weights():
    # Between the outermost node and the -0.5 boundary, the missing corner
    # contributes a zero feature but its weight is not renormalized.
    grid = np.ones((2, 2, 2, 1))
    out = trilinear_sample(grid, np.array([-0.25, 0.0, 0.0]))
    assert out[0] == pytest.approx(0.75)


def test_trilinear_rejects_nan_query():
    with pytest.raises(NumericError):
        trilinear_corners(np.array([[np.nan, 0, 0]]), (2, 2, 2))


# ---------------------------------------------------------------------------
# boxes


def test_box_validation_and_yaw_wrap():
    with pytest.raises(ContractError):
        Box3D(np.zeros(3), [1.0, -1.0, 1.0], 0.0)
    # overflow products upstream surface as numeric failures, not contract bugs
    with pytest.raises(NumericError):
        Box3D(np.zeros(3), [np.inf, 1.0, 1.0], 0.0)
    with pytest.raises(NumericError):
        Box3D([np.nan, 0.0, 0.0], np.ones(3), 0.0)
    b = Box3D(np.zeros(3), np.ones(3), yaw=3 * math.pi + 0.25)
    assert -math.pi < b.yaw <= math.pi
    assert b.yaw == pytest.approx(0.25 - math.pi, abs=1e-12)
    assert Box3D(np.zeros(3), np.ones(3), yaw=math.pi).yaw == math.pi  # +pi kept, -pi excluded


def test_box_contains_matches_rotation_algebra():
    box = Box3D([1.0, 2.0, 0.0], [4.0, 2.0, 2.0], yaw=0.7)
    rng = np.random.default_rng(7)
    pts = rng.uniform(-4, 6, size=(500, 3))
    mask = box.contains(pts)
    c, s = math.cos(-0.7), math.sin(-0.7)
    rel = pts - box.center
    lx = rel[:, 0] * c - rel[:, 1] * s
    ly = rel[:, 0] * s + rel[:, 1] * c
    manual = (np.abs(lx) <= 2.0) & (np.abs(ly) <= 1.0) & (np.abs(rel[:, 2]) <= 1.0)
    assert np.array_equal(mask, manual)


def test_iou_identical_boxes():
    b = Box3D([1.0, 2.0, 3.0], [3.9, 1.6, 1.56], yaw=0.4)
    assert iou_3d(b, b) == pytest.approx(1.0, abs=1e-12)


def test_iou_disjoint_boxes():
    a = Box3D([0.0, 0.0, 0.0], np.ones(3))
    b = Box3D([10.0, 0.0, 0.0], np.ones(3))
    assert iou_3d(a, b) == 0.0
    c = Box3D([0.0, 0.0, 5.0], np.ones(3))  # overlapping footprint, disjoint height
    assert iou_3d(a, c) == 0.0


def test_iou_unit_cubes_offset_half():
    a = Box3D([0.0, 0.0, 0.0], np.ones(3))
    b = Box3D([0.5, 0.0, 0.0], np.ones(3))
    assert iou_3d(a, b) == pytest.approx(1.0 / 3.0, abs=1e-12)


def _mc_iou(a: Box3D, b: Box3D, n: int, seed: int) -> float:
    rng = np.random.default_rng(seed)
    lo = np.minimum(a.center - a.size, b.center - b.size)
    hi = np.maximum(a.center + a.size, b.center + b.size)
    pts = rng.uniform(lo, hi, size=(n, 3))
    in_a = a.contains(pts)
    in_b = b.contains(pts)
    union = np.count_nonzero(in_a | in_b)
    return np.count_nonzero(in_a & in_b) / union if union else 0.0


def test_iou_matches_monte_carlo():
    a = Box3D([0.3, -0.2, 0.1], [2.5, 1.2, 1.4], yaw=0.5)
    b = Box3D([0.9, 0.4, -0.2], [1.8, 2.1, 1.0], yaw=-0.9)
    exact = iou_3d(a, b)
    assert abs(exact - _mc_iou(a, b, 1_000_000, seed=8)) < 2e-3


@settings(max_examples=60, deadline=None)
@given(
    cx=st.floats(-2, 2), cy=st.floats(-2, 2), cz=st.floats(-1, 1),
    yaw_a=st.floats(-3, 3), yaw_b=st.floats(-3, 3),
)
def test_iou_symmetry(cx, cy, cz, yaw_a, yaw_b):
    a = Box3D([0.0, 0.0, 0.0], [2.0, 1.0, 1.5], yaw=yaw_a)
    b = Box3D([cx, cy, cz], [1.5, 1.8, 1.2], yaw=yaw_b)
    assert abs(iou_3d(a, b) - iou_3d(b, a)) < 1e-12
    assert 0.0 <= iou_3d(a, b) <= 1.0
