from itertools import product

import numpy as np
import pytest

from stages.translation_consensus import (
    BoxRelation,
    ConsensusConfig,
    SphereSet,
    build_grid,
    candidate_translations,
    classify_box_sphere,
    exhaustive_candidate_oracle,
    make_sphere_instance,
    max_consensus_translation,
    reestimate_all_edges,
)
from tools.errors import (
    STATUS_CONVERGED,
    STATUS_LOW_INLIER,
    STATUS_NO_CORRESPONDENCES,
    STATUS_NON_TERMINATION,
    STATUS_OK,
    EmptyCorrespondences,
    EmptyInput,
    InvalidParameter,
    LengthMismatch,
)
from tools.geometry import RigidTransform
from tools.pose_graph import WEIGHT_FLOOR, CorrespondenceSet, Edge


def _strict_count(centers, eps, points):
    d2 = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    return np.sum(d2 < eps * eps, axis=1)


def test_single_candidate_is_its_own_consensus():
    spheres = SphereSet([[0.3, -0.2, 1.0]], 0.05)
    result = max_consensus_translation(spheres)
    assert result.inlier_count == 1
    np.testing.assert_allclose(result.translation, [0.3, -0.2, 1.0], atol=1e-12)


def test_coincident_cluster_beats_scattered_candidates():
    centers = np.vstack([np.zeros((10, 3)), 10.0 * np.eye(3), [[-10.0, 0, 0], [0, -10.0, 0]]])
    spheres = SphereSet(centers, 0.1)
    result = max_consensus_translation(spheres)
    assert result.status == STATUS_CONVERGED
    assert result.inlier_count == 10
    assert result.inlier_indices.tolist() == list(range(10))
    assert np.linalg.norm(result.translation) < 1e-12
    assert len(result.level_stats) == result.zoom_levels
    assert result.cells_visited == sum(s.cells for s in result.level_stats)

    oracle = exhaustive_candidate_oracle(spheres)
    assert oracle.status == STATUS_OK and oracle.inlier_count == 10


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_branch_and_bound_dominates_the_candidate_oracle(seed):
    rng = np.random.default_rng(seed)
    spheres, _ = make_sphere_instance(80, 0.1, 0.3, rng)
    bnb = max_consensus_translation(spheres)
    oracle = exhaustive_candidate_oracle(spheres)
    assert bnb.inlier_count >= oracle.inlier_count


@pytest.mark.slow
def test_large_instance_matches_or_beats_the_oracle():
    rng = np.random.default_rng(7)
    spheres, _ = make_sphere_instance(3000, 0.05, 0.3, rng)
    bnb = max_consensus_translation(spheres)
    assert bnb.status == STATUS_CONVERGED
    assert bnb.inlier_count >= exhaustive_candidate_oracle(spheres).inlier_count
    assert spheres.count_within(bnb.translation).size == bnb.inlier_count


@pytest.mark.parametrize("seed", [10, 11, 12])
def test_no_sampled_point_beats_the_optimum(seed):
    rng = np.random.default_rng(seed)
    eps = 0.3
    centers = rng.uniform(-0.5, 0.5, (25, 3))
    spheres = SphereSet(centers, eps)
    result = max_consensus_translation(spheres)
    assert result.status == STATUS_CONVERGED

    i, j = np.triu_indices(len(centers), 1)
    samples = np.vstack([centers, 0.5 * (centers[i] + centers[j]), rng.uniform(-0.8, 0.8, (3000, 3))])
    assert _strict_count(centers, eps, samples).max() <= result.inlier_count
    # the returned translation really has that many candidates strictly within eps
    assert _strict_count(centers, eps, result.translation[None, :])[0] == result.inlier_count


def test_returned_inliers_are_strictly_within_eps(rng):
    spheres, truth = make_sphere_instance(200, 0.05, 0.4, rng)
    result = max_consensus_translation(spheres)
    assert result.inlier_count >= 80
    d = np.linalg.norm(spheres.centers[result.inlier_indices] - result.translation, axis=1)
    assert np.all(d < 0.05)
    assert np.linalg.norm(result.translation - truth) < 0.05


def test_offset_moves_the_solution_with_the_candidates(rng):
    spheres, _ = make_sphere_instance(100, 0.1, 0.5, rng)
    offset = np.array([3.0, -2.0, 7.5])
    a = max_consensus_translation(spheres)
    b = max_consensus_translation(SphereSet(spheres.centers + offset, spheres.radius))
    assert a.inlier_count == b.inlier_count
    assert np.array_equal(a.inlier_indices, b.inlier_indices)
    np.testing.assert_allclose(b.translation - offset, a.translation, atol=1e-9)


def test_max_zoom_cap_reports_non_termination():
    eps = 1.0
    spheres = SphereSet([[0.0, 0.0, 0.0], [1.999, 0.0, 0.0]], eps)
    result = max_consensus_translation(spheres, ConsensusConfig(max_zoom=1))
    assert result.status == STATUS_NON_TERMINATION
    assert result.inlier_count >= 1


def test_classify_box_sphere_against_analytic_cases():
    lo, hi = np.zeros(3), np.ones(3)
    centers = np.array([[0.5, 0.5, 0.5], [3.0, 0.5, 0.5], [1.5, 0.5, 0.5], [2.0, 2.0, 2.0]])
    rel = classify_box_sphere(lo, hi, centers, 1.0)
    assert rel.tolist() == [BoxRelation.INSIDE, BoxRelation.OUTSIDE, BoxRelation.BOUNDARY, BoxRelation.OUTSIDE]


def test_build_grid_only_materializes_touched_cells():
    spheres = SphereSet([[0.0, 0.0, 0.0]], 1.0)
    cells = build_grid(spheres, cell_size=0.25)
    assert cells
    assert all(c.intersecting_sphere_indices == [0] for c in cells)
    assert any(c.fully_contained_count == 1 for c in cells)
    assert any(np.all(c.min_corner <= 0.0) and np.all(c.max_corner >= 0.0) for c in cells)
    with pytest.raises(InvalidParameter):
        build_grid(spheres, cell_size=-1.0)


def test_sphere_set_validation():
    with pytest.raises(InvalidParameter):
        SphereSet([[0.0, 0.0, 0.0]], 0.0)
    with pytest.raises(EmptyInput):
        SphereSet(np.zeros((0, 3)), 0.1)
    with pytest.raises(InvalidParameter):
        SphereSet([[np.nan, 0.0, 0.0]], 0.1)


def test_candidate_translations_on_exact_correspondences(rng, make_poses, make_graph):
    poses = make_poses(rng, 2)
    edge = make_graph(rng, poses, [(0, 1)]).edges[0]
    cand = candidate_translations(edge.correspondences, poses[0].rotation, poses[1].rotation)
    np.testing.assert_allclose(cand, np.tile(edge.relative.translation, (len(cand), 1)), atol=1e-9)
    with pytest.raises(EmptyCorrespondences):
        candidate_translations(CorrespondenceSet.empty(), np.eye(3), np.eye(3))


def test_reestimation_keeps_noiseless_translations(rng, make_poses, make_graph, make_pairs):
    poses = make_poses(rng, 5)
    graph = make_graph(rng, poses, make_pairs(5))
    out = reestimate_all_edges(graph, [p.rotation for p in poses], 0.05)
    assert out.flags == []
    for old, new in zip(graph.edges, out.graph.edges):
        assert new.relative.allclose(old.relative, atol=1e-9)
        assert new.inlier_count == len(old.correspondences)


def test_unsupported_edges_are_flagged(rng, make_poses, make_graph):
    poses = make_poses(rng, 3)
    graph = make_graph(rng, poses, [(0, 1), (1, 2), (0, 2)])
    edges = list(graph.edges)
    clutter = CorrespondenceSet(rng.uniform(-10, 10, (10, 3)), rng.uniform(-10, 10, (10, 3)))
    edges[2] = Edge(0, 2, edges[2].relative, clutter, 10, 1.0)
    edges[1] = Edge(1, 2, edges[1].relative, CorrespondenceSet.empty(), 0, 1.0)
    out = reestimate_all_edges(graph.with_edges(edges), [p.rotation for p in poses], 0.01)

    by_pair = {(r.i, r.j): r for r in out.reports}
    assert by_pair[(0, 1)].status == STATUS_CONVERGED
    assert by_pair[(0, 2)].status == STATUS_LOW_INLIER
    assert by_pair[(1, 2)].status == STATUS_NO_CORRESPONDENCES
    assert out.graph.edges[2].weight == WEIGHT_FLOOR
    assert out.graph.edges[1].inlier_count == 0
    assert out.graph.edges[1].relative.allclose(edges[1].relative, atol=1e-12)
    assert {(r.i, r.j) for r in out.flags} == {(0, 2), (1, 2)}


def test_reestimation_is_thread_count_independent(rng, make_poses, make_graph, make_pairs):
    poses = make_poses(rng, 6)
    graph = make_graph(rng, poses, make_pairs(6), noise=0.01)
    rotations = [p.rotation for p in poses]
    a = reestimate_all_edges(graph, rotations, 0.05, threads=1)
    b = reestimate_all_edges(graph, rotations, 0.05, threads=4)
    for x, y in zip(a.graph.edges, b.graph.edges):
        assert np.array_equal(x.relative.translation, y.relative.translation)
        assert x.weight == y.weight


def test_reestimation_rejects_bad_arguments(rng, make_poses, make_graph):
    poses = make_poses(rng, 2)
    graph = make_graph(rng, poses, [(0, 1)])
    with pytest.raises(InvalidParameter):
        reestimate_all_edges(graph, [p.rotation for p in poses], 0.0)
    with pytest.raises(LengthMismatch):
        reestimate_all_edges(graph, [np.eye(3)], 0.05)


def _partly_broken_edge(rng, edge, keep, inlier_count, shift=(0.0, 0.0, 0.0)):
    """Same edge with every correspondence after the first `keep` replaced by clutter"""
    c = edge.correspondences
    points_j = c.points_j.copy()
    points_j[keep:] = rng.uniform(-10.0, 10.0, (len(c) - keep, 3))
    relative = RigidTransform(edge.relative.rotation, edge.relative.translation + np.asarray(shift))
    return Edge(edge.i, edge.j, relative, CorrespondenceSet(c.points_i, points_j), inlier_count, 1.0)


def test_edges_with_little_support_keep_their_pairwise_translation(rng, make_poses, make_graph):
    poses = make_poses(rng, 2)
    graph = make_graph(rng, poses, [(0, 1)])
    edge = _partly_broken_edge(rng, graph.edges[0], 8, 30, shift=(0.3, 0.0, 0.0))
    out = reestimate_all_edges(graph.with_edges([edge]), [p.rotation for p in poses], 0.05)

    report = out.reports[0]
    assert report.inlier_count == 8
    assert not report.applied
    kept = out.graph.edges[0]
    assert kept.relative.allclose(edge.relative, atol=1e-12)
    assert kept.inlier_count == 30
    assert kept.inliers is None


def test_applied_edges_carry_the_consensus_inliers(rng, make_poses, make_graph):
    poses = make_poses(rng, 2)
    graph = make_graph(rng, poses, [(0, 1)])
    true_edge = graph.edges[0]
    edge = _partly_broken_edge(rng, true_edge, 20, 25, shift=(0.3, 0.0, 0.0))
    out = reestimate_all_edges(graph.with_edges([edge]), [p.rotation for p in poses], 0.05)

    assert out.reports[0].applied
    new = out.graph.edges[0]
    assert new.inlier_count == 20
    assert new.inliers == tuple(range(20))
    assert new.relative.allclose(true_edge.relative, atol=1e-9)


def test_support_ratio_zero_applies_every_consensus(rng, make_poses, make_graph):
    poses = make_poses(rng, 2)
    graph = make_graph(rng, poses, [(0, 1)])
    edge = _partly_broken_edge(rng, graph.edges[0], 8, 30)
    out = reestimate_all_edges(
        graph.with_edges([edge]), [p.rotation for p in poses], 0.05, ConsensusConfig(min_support_ratio=0.0)
    )
    assert out.reports[0].applied
    assert out.graph.edges[0].inlier_count == 8


def test_classify_box_sphere_on_random_boxes():
    rng = np.random.default_rng(21)
    n, radius = 10_000, 0.8
    lo = rng.uniform(-1.0, 1.0, (n, 3))
    hi = lo + rng.uniform(0.01, 1.0, (n, 3))
    centers = rng.uniform(-2.0, 2.0, (n, 3))
    rel = classify_box_sphere(lo, hi, centers, radius)

    closest = np.linalg.norm(centers - np.clip(centers, lo, hi), axis=1)
    corners = np.stack([np.where(np.array(mask), hi, lo) for mask in product([False, True], repeat=3)])
    farthest = np.linalg.norm(corners - centers[None], axis=2).max(axis=0)
    expected = np.where(
        farthest < radius, BoxRelation.INSIDE, np.where(closest > radius, BoxRelation.OUTSIDE, BoxRelation.BOUNDARY)
    )
    assert np.array_equal(rel, expected)
    assert {int(r) for r in np.unique(rel)} == {int(r) for r in BoxRelation}

    # a 5x5x5 lattice in every box agrees with the decided relations
    t = np.linspace(0.0, 1.0, 5)
    frac = np.stack(np.meshgrid(t, t, t, indexing="ij"), -1).reshape(-1, 3)
    for start in range(0, n, 1000):
        sl = slice(start, start + 1000)
        pts = lo[sl, None, :] + frac[None] * (hi[sl] - lo[sl])[:, None, :]
        d = np.linalg.norm(pts - centers[sl, None, :], axis=2)
        assert np.all(d[rel[sl] == BoxRelation.INSIDE] < radius)
        assert np.all(d[rel[sl] == BoxRelation.OUTSIDE] > radius)


@pytest.mark.slow
def test_branch_and_bound_dominates_the_oracle_on_random_instances():
    rng = np.random.default_rng(2024)
    strict = 0
    for k in range(1000):
        n = int(rng.integers(50, 501))
        eps = float(rng.uniform(0.01, 0.5))
        if k % 2:
            # dense clutter only: the deepest overlap rarely sits on a candidate
            spheres, _ = make_sphere_instance(n, eps, 0.0, rng, extent=3.0 * eps)
        else:
            spheres, _ = make_sphere_instance(n, eps, float(rng.uniform(0.1, 0.6)), rng)
        bnb = max_consensus_translation(spheres)
        oracle = exhaustive_candidate_oracle(spheres)
        assert bnb.inlier_count >= oracle.inlier_count
        strict += bnb.inlier_count > oracle.inlier_count
    assert strict >= 10


def _lattice_max(centers, eps, pitch, block=16):
    """Largest strict count over the lattice of the given pitch spanning the spheres' bounding box"""
    lo, hi = centers.min(axis=0) - eps, centers.max(axis=0) + eps
    shape = np.floor((hi - lo) / pitch).astype(np.int64) + 1
    blocks = -(-shape // block)
    idx = np.stack(np.meshgrid(*[np.arange(b) for b in blocks], indexing="ij"), -1).reshape(-1, 3)
    b_lo = lo + idx * block * pitch
    b_hi = lo + np.minimum((idx + 1) * block - 1, shape - 1) * pitch
    gap = np.maximum(b_lo[:, None] - centers[None], 0.0) + np.maximum(centers[None] - b_hi[:, None], 0.0)
    near = np.sum(gap * gap, axis=2) < eps * eps
    upper = near.sum(axis=1)

    best = 0
    for b in np.argsort(-upper, kind="stable"):
        if upper[b] <= best:
            break
        axes = [np.arange(idx[b, a] * block, min((idx[b, a] + 1) * block, shape[a])) for a in range(3)]
        pts = lo + np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3) * pitch
        best = max(best, int(_strict_count(centers[near[b]], eps, pts).max()))
    return best


@pytest.mark.slow
def test_branch_and_bound_equals_a_fine_lattice_scan():
    rng = np.random.default_rng(99)
    for _ in range(200):
        eps = float(rng.uniform(0.01, 0.5))
        n = int(rng.integers(15, 31))
        n_in = int(rng.integers(6, 13))
        direction = rng.normal(size=(n_in, 3))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        cluster = 0.499 * eps * rng.uniform(0.0, 1.0, (n_in, 1)) * direction
        clutter = []
        while len(clutter) < n - n_in:
            c = rng.uniform(-6.0 * eps, 6.0 * eps, 3)
            if np.linalg.norm(c) >= 3.0 * eps:
                clutter.append(c)
        centers = rng.permutation(np.vstack([cluster, clutter])) + rng.uniform(-1.0, 1.0, 3)

        result = max_consensus_translation(SphereSet(centers, eps))
        assert result.inlier_count == _lattice_max(centers, eps, eps / 50)
