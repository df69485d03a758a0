import numpy as np
import pytest
from pydantic import ValidationError

from stages.position_averaging import (
    PosAvgConfig,
    align_positions_to_truth,
    average_positions,
    position_gradient,
    position_jacobian,
    position_objective,
    position_residuals,
    soft_l1,
    solve_positions_l2,
)
from tools.errors import STATUS_CONVERGED, LengthMismatch
from tools.geometry import RigidTransform, random_rotation
from tools.pose_graph import Edge


def _shift_translations(graph, offsets):
    edges = []
    for e, d in zip(graph.edges, offsets):
        edges.append(Edge(e.i, e.j, RigidTransform(e.relative.rotation, e.relative.translation + d),
                          e.correspondences, e.inlier_count, e.weight))
    return graph.with_edges(edges)


@pytest.fixture
def ring(rng, make_poses, make_graph, make_pairs):
    poses = make_poses(rng, 7)
    return poses, make_graph(rng, poses, make_pairs(7))


def test_soft_l1_is_accurate_for_tiny_arguments():
    assert soft_l1(np.array(1e-20)) == pytest.approx(1e-20, rel=1e-12)
    assert soft_l1(np.array(3.0)) == pytest.approx(2.0)


def test_noiseless_positions_are_recovered(ring):
    poses, graph = ring
    rotations = [p.rotation for p in poses]
    result = average_positions(graph, rotations)
    assert result.status == STATUS_CONVERGED
    np.testing.assert_allclose(result.positions, [p.translation for p in poses], atol=1e-8)
    assert np.array_equal(result.positions[0], np.zeros(3))


def test_wide_loss_matches_least_squares(rng, ring):
    poses, graph = ring
    rotations = [p.rotation for p in poses]
    noisy = _shift_translations(graph, rng.normal(0.0, 0.02, (len(graph.edges), 3)))
    wide = PosAvgConfig(loss_scale=100.0, truncation=1000.0)
    robust = average_positions(noisy, rotations, wide)
    np.testing.assert_allclose(robust.positions, solve_positions_l2(noisy, rotations), atol=1e-6)


def test_truncation_ignores_a_corrupted_edge(ring):
    poses, graph = ring
    rotations = [p.rotation for p in poses]
    edges = list(graph.edges)
    bad = edges[4]
    edges[4] = Edge(bad.i, bad.j, RigidTransform(bad.relative.rotation, bad.relative.translation + [5.0, -3.0, 2.0]),
                    bad.correspondences, 5, bad.weight)
    corrupted = graph.with_edges(edges)
    truth = np.array([p.translation for p in poses])

    robust = average_positions(corrupted, rotations)
    assert np.abs(robust.positions - truth).max() < 1e-6
    assert np.abs(solve_positions_l2(corrupted, rotations) - truth).max() > 1e-2


def test_objective_history_never_increases(rng, ring):
    poses, graph = ring
    rotations = [p.rotation for p in poses]
    noisy = _shift_translations(graph, rng.normal(0.0, 0.1, (len(graph.edges), 3)))
    history = average_positions(noisy, rotations).objective_history
    assert all(b <= a for a, b in zip(history, history[1:]))


def test_jacobian_matches_residual_differences(rng, ring):
    poses, graph = ring
    rotations = [p.rotation for p in poses]
    x = rng.normal(size=(7, 3))
    dx = rng.normal(size=(7, 3))
    jac = position_jacobian(graph, rotations)
    diff = position_residuals(graph, rotations, x + dx) - position_residuals(graph, rotations, x)
    np.testing.assert_allclose(jac @ dx.reshape(-1), diff.reshape(-1), atol=1e-9)


def test_gradient_matches_central_differences(rng, ring):
    poses, graph = ring
    rotations = [p.rotation for p in poses]
    cfg = PosAvgConfig(loss_scale=0.5, truncation=50.0)
    x = np.array([p.translation for p in poses]) + rng.normal(0.0, 0.3, (7, 3))
    grad = position_gradient(graph, rotations, x, cfg)
    h = 1e-6
    numeric = np.zeros_like(x)
    for v in range(7):
        for a in range(3):
            up, down = x.copy(), x.copy()
            up[v, a] += h
            down[v, a] -= h
            numeric[v, a] = (position_objective(graph, rotations, up, cfg)
                             - position_objective(graph, rotations, down, cfg)) / (2 * h)
    np.testing.assert_allclose(grad, numeric, rtol=1e-5, atol=1e-6)


def test_truncated_edges_have_constant_loss(ring):
    poses, graph = ring
    rotations = [p.rotation for p in poses]
    cfg = PosAvgConfig()
    far = np.array([p.translation for p in poses]) * 100.0
    farther = far * 2.0
    assert position_objective(graph, rotations, far, cfg) == pytest.approx(
        position_objective(graph, rotations, farther, cfg)
    )
    assert np.all(position_gradient(graph, rotations, far, cfg) == 0.0)


def test_alignment_removes_gauge_and_offset(rng):
    truth = rng.normal(size=(6, 3))
    gauge = random_rotation(rng)
    est = truth @ gauge.T + np.array([1.0, 2.0, 3.0])
    aligned = align_positions_to_truth(est, truth, gauge)
    assert aligned.errors.max() < 1e-10


def test_mismatched_lengths_are_rejected(ring):
    poses, graph = ring
    with pytest.raises(LengthMismatch):
        average_positions(graph, [np.eye(3)])
    with pytest.raises(LengthMismatch):
        align_positions_to_truth(np.zeros((2, 3)), np.zeros((3, 3)))


def test_truncation_must_exceed_scale():
    with pytest.raises(ValidationError):
        PosAvgConfig(loss_scale=0.2, truncation=0.1)


@pytest.mark.parametrize("seed", range(20))
def test_jacobian_matches_central_differences_on_random_graphs(seed, make_poses, make_graph, make_pairs):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 10))
    poses = make_poses(rng, n)
    graph = make_graph(rng, poses, make_pairs(n))
    rotations = [p.rotation for p in poses]
    x = rng.normal(size=(n, 3))
    jac = position_jacobian(graph, rotations)

    h = 1e-6
    numeric = np.zeros_like(jac)
    for k in range(3 * n):
        step = np.zeros(3 * n)
        step[k] = h
        up = position_residuals(graph, rotations, x + step.reshape(n, 3))
        down = position_residuals(graph, rotations, x - step.reshape(n, 3))
        numeric[:, k] = (up - down).reshape(-1) / (2 * h)
    assert np.abs(numeric - jac).max() / np.abs(jac).max() < 1e-5


@pytest.mark.parametrize("seed", range(50))
def test_objective_history_never_increases_on_random_graphs(seed, make_poses, make_graph, make_pairs):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 12))
    poses = make_poses(rng, n)
    graph = make_graph(rng, poses, make_pairs(n))
    offsets = rng.normal(0.0, 0.05, (len(graph.edges), 3))
    offsets[rng.random(len(graph.edges)) < 0.2] += rng.uniform(-2.0, 2.0, 3)
    history = average_positions(_shift_translations(graph, offsets), [p.rotation for p in poses]).objective_history
    assert all(b <= a + 1e-12 for a, b in zip(history, history[1:]))
