"""
Pairwise Front-end - Synthetic scenes, RANSAC + SVD pairwise registration and
overlap scoring. Produces the edges the pose-graph back-end consumes.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import Field

from tools.config import StageConfig
from tools.errors import DegenerateGeometry, InvalidParameter, TooFewCorrespondences
from tools.geometry import (
    RigidTransform,
    fit_rigid_svd,
    random_rotation,
    relative_from_global,
    so3_exp,
)
from tools.pose_graph import CorrespondenceSet, Edge, PoseGraph, Vertex, inlier_weights
from tools.spatial_hash import SpatialHash

logger = logging.getLogger(__name__)


class RansacConfig(StageConfig):
    max_iterations: int = Field(1000, ge=1)
    inlier_threshold: float = Field(0.03, gt=0)
    confidence: float = Field(0.999, gt=0, lt=1)
    min_sample: int = Field(3, ge=3)
    rng_seed: int = 0


class OverlapConfig(StageConfig):
    radius: float = Field(0.05, gt=0)
    sense: Literal["symmetric", "p_to_q", "q_to_p"] = "symmetric"


@dataclass(frozen=True, eq=False)
class SceneBundle:
    clouds: List[np.ndarray]
    truth_poses: List[RigidTransform]
    correspondences: Dict[Tuple[int, int], CorrespondenceSet]
    corrupted_pairs: Tuple[Tuple[int, int], ...]
    graph: PoseGraph

    @property
    def pairs(self) -> List[Tuple[int, int]]:
        return sorted(self.correspondences)

    def truth_relative(self, i: int, j: int) -> RigidTransform:
        return relative_from_global(self.truth_poses[i], self.truth_poses[j])


# ---------------------------------------------------------------- scene generation

def _sample_box_faces(rng: np.random.Generator, lo: np.ndarray, hi: np.ndarray, n: int) -> np.ndarray:
    size = hi - lo
    areas = np.array([size[1] * size[2], size[0] * size[2], size[0] * size[1]] * 2)
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = lo + rng.random((n, 3)) * size
    axis = face % 3
    on_hi = face >= 3
    pts[np.arange(n), axis] = np.where(on_hi, hi[axis], lo[axis])
    return pts


def _latent_surface(rng: np.random.Generator, n_points: int, length: float) -> np.ndarray:
    """Floor + back wall + a row of boxes, sorted along the x axis"""
    n_floor = n_points * 2 // 5
    n_wall = n_points // 5
    n_boxes = n_points - n_floor - n_wall
    floor = np.column_stack([rng.uniform(0, length, n_floor), rng.uniform(-1.0, 1.5, n_floor), np.zeros(n_floor)])
    wall = np.column_stack([rng.uniform(0, length, n_wall), np.full(n_wall, 1.5), rng.uniform(0, 1.5, n_wall)])

    n_box_shapes = max(2, int(math.ceil(length / 0.8)))
    counts = np.bincount(rng.integers(0, n_box_shapes, n_boxes), minlength=n_box_shapes)
    boxes = []
    for k, count in enumerate(counts):
        if count == 0:
            continue
        cx = (k + rng.uniform(0.2, 0.8)) * length / n_box_shapes
        size = rng.uniform(0.2, 0.6, 3)
        lo = np.array([cx - size[0] / 2, rng.uniform(-0.6, 0.8), 0.0])
        boxes.append(_sample_box_faces(rng, lo, lo + size, int(count)))
    pts = np.vstack([floor, wall] + boxes)
    return pts[np.argsort(pts[:, 0], kind="stable")]


def _trajectory(rng: np.random.Generator, centers: np.ndarray) -> List[RigidTransform]:
    """Smooth random walk of orientations over the given positions"""
    n = len(centers)
    yaw = np.cumsum(rng.normal(0.0, 0.35, n))
    pitch = 0.15 * np.sin(np.linspace(0, np.pi, n) + rng.uniform(0, np.pi)) + rng.normal(0, 0.05, n)
    roll = rng.normal(0.0, 0.08, n)
    poses = []
    for k in range(n):
        r = so3_exp([0, 0, yaw[k]]) @ so3_exp([0, pitch[k], 0]) @ so3_exp([roll[k], 0, 0])
        poses.append(RigidTransform(r, centers[k]))
    return poses


def generate_scene(
    n_clouds: int,
    points_per_cloud: int,
    overlap_fraction: float,
    noise_sigma: float,
    outlier_ratio: float,
    rng_seed: int,
    correspondences_per_pair: int = 200,
    neighbor_span: int = 1,
    corrupted_edge_ratio: float = 0.0,
) -> SceneBundle:
    """Synthetic multiway registration scene with known poses and correspondences

    Clouds are consecutive windows over a shared latent surface; clouds k apart
    share max(0, 1 - k (1 - overlap_fraction)) of their points. Pairs within
    `neighbor_span` steps receive correspondence sets.
    """
    if n_clouds < 2:
        raise InvalidParameter(f"n_clouds must be >= 2, got {n_clouds}")
    if points_per_cloud < 3:
        raise InvalidParameter(f"points_per_cloud must be >= 3, got {points_per_cloud}")
    if not 0.0 < overlap_fraction <= 1.0:
        raise InvalidParameter(f"overlap_fraction must be in (0, 1], got {overlap_fraction}")
    if noise_sigma < 0:
        raise InvalidParameter(f"noise_sigma must be >= 0, got {noise_sigma}")
    if not 0.0 <= outlier_ratio < 1.0:
        raise InvalidParameter(f"outlier_ratio must be in [0, 1), got {outlier_ratio}")
    if not 0.0 <= corrupted_edge_ratio <= 1.0:
        raise InvalidParameter(f"corrupted_edge_ratio must be in [0, 1], got {corrupted_edge_ratio}")
    if neighbor_span < 1 or correspondences_per_pair < 1:
        raise InvalidParameter("neighbor_span and correspondences_per_pair must be >= 1")

    rng = np.random.default_rng(rng_seed)
    step = int(round((1.0 - overlap_fraction) * points_per_cloud))
    n_latent = points_per_cloud + (n_clouds - 1) * step
    length = max(2.0, 0.6 * n_clouds)
    latent = _latent_surface(rng, n_latent, length)

    windows = [np.arange(k * step, k * step + points_per_cloud) for k in range(n_clouds)]
    centers = np.array([latent[w].mean(axis=0) + [0.0, -1.2, 0.8] for w in windows])
    centers += rng.normal(0.0, 0.1, centers.shape)
    truth = _trajectory(rng, centers)

    clouds = []
    for pose, w in zip(truth, windows):
        local = (latent[w] - pose.translation) @ pose.rotation.T
        if noise_sigma > 0:
            local = local + rng.normal(0.0, noise_sigma, local.shape)
        clouds.append(local)

    pairs = []
    for i in range(n_clouds):
        for j in range(i + 1, min(n_clouds, i + neighbor_span + 1)):
            if points_per_cloud - (j - i) * step > 0:
                pairs.append((i, j))

    n_corrupt = int(round(corrupted_edge_ratio * len(pairs)))
    corrupted = set(map(int, rng.choice(len(pairs), size=n_corrupt, replace=False))) if n_corrupt else set()

    correspondences: Dict[Tuple[int, int], CorrespondenceSet] = {}
    for k, (i, j) in enumerate(pairs):
        offset = (j - i) * step
        shared = points_per_cloud - offset
        m = min(correspondences_per_pair, shared)
        local_i = np.sort(rng.choice(np.arange(offset, points_per_cloud), size=m, replace=False))
        local_j = local_i - offset
        xi = clouds[i][local_i]
        xj = clouds[j][local_j].copy()
        labels = rng.random(m) >= outlier_ratio
        if k in corrupted:
            # A false match: a consistent wrong motion for part of the set.
            wrong = RigidTransform(random_rotation(rng, np.pi), rng.uniform(-1.0, 1.0, 3))
            consistent = rng.random(m) < 0.5 * (1.0 - outlier_ratio)
            xj[consistent] = wrong.apply(xj[consistent])
            labels = np.zeros(m, dtype=bool)
            mismatched = ~consistent
        else:
            mismatched = ~labels
        n_bad = int(np.count_nonzero(mismatched))
        if n_bad:
            shift = rng.integers(1, points_per_cloud, n_bad)
            xj[mismatched] = clouds[j][(local_j[mismatched] + shift) % points_per_cloud]
        correspondences[(i, j)] = CorrespondenceSet(xi, xj, labels)

    edges = []
    for (i, j), corr in sorted(correspondences.items()):
        edges.append(
            Edge(i, j, relative_from_global(truth[i], truth[j]), corr, int(np.count_nonzero(corr.truth_labels)))
        )
    weights = inlier_weights([e.inlier_count for e in edges])
    edges = [Edge(e.i, e.j, e.relative, e.correspondences, e.inlier_count, w) for e, w in zip(edges, weights)]
    graph = PoseGraph(tuple(Vertex(k, p, k == 0) for k, p in enumerate(truth)), tuple(edges))

    corrupted_pairs = tuple(pairs[k] for k in sorted(corrupted))
    logger.info(
        "generated scene: %d clouds x %d points, %d pairs (%d corrupted), seed %d",
        n_clouds, points_per_cloud, len(pairs), len(corrupted_pairs), rng_seed,
    )
    return SceneBundle(clouds, truth, correspondences, corrupted_pairs, graph)


# ---------------------------------------------------------------- RANSAC

def _non_collinear(p: np.ndarray) -> bool:
    a = p[1] - p[0]
    b = p[2] - p[0]
    scale = np.linalg.norm(a) * np.linalg.norm(b)
    return scale > 0 and np.linalg.norm(np.cross(a, b)) > 1e-9 * scale


def sufficient_iterations(inlier_ratio: float, confidence: float, sample_size: int = 3) -> float:
    """Iterations needed to draw one all-inlier sample with the given confidence"""
    good = inlier_ratio ** sample_size
    if good <= 0.0:
        return math.inf
    if good >= 1.0:
        return 1.0
    return math.log(1.0 - confidence) / math.log(1.0 - good)


def estimate_pairwise(corr: CorrespondenceSet, cfg: RansacConfig) -> Tuple[RigidTransform, np.ndarray]:
    """RANSAC over minimal 3-point samples, SVD refit on the best consensus set

    Returns the point map x_j = R x_i + t and the inlier indices. The iteration
    count is always cfg.max_iterations.
    """
    n = len(corr)
    if n < cfg.min_sample:
        raise TooFewCorrespondences(f"RANSAC needs >= {cfg.min_sample} correspondences, got {n}")
    src, dst = corr.points_i, corr.points_j
    rng = np.random.default_rng(cfg.rng_seed)
    thr2 = cfg.inlier_threshold ** 2

    best_mask: Optional[np.ndarray] = None
    best_count = -1
    best_model: Optional[RigidTransform] = None
    for _ in range(cfg.max_iterations):
        sample = rng.choice(n, size=cfg.min_sample, replace=False)
        if not _non_collinear(src[sample[:3]]):
            continue
        try:
            model = fit_rigid_svd(src[sample], dst[sample])
        except DegenerateGeometry:
            continue
        resid = model.apply(src) - dst
        mask = np.sum(resid * resid, axis=1) < thr2
        count = int(np.count_nonzero(mask))
        if count > best_count:
            best_count, best_mask, best_model = count, mask, model

    if best_model is None:
        raise DegenerateGeometry(f"no non-collinear sample found in {cfg.max_iterations} iterations")

    inliers = np.flatnonzero(best_mask)
    final = best_model
    if len(inliers) >= 3:
        try:
            final = fit_rigid_svd(src[inliers], dst[inliers])
        except DegenerateGeometry:
            logger.debug("inlier set is degenerate; keeping the minimal-sample model")

    needed = sufficient_iterations(len(inliers) / n, cfg.confidence, cfg.min_sample)
    logger.debug(
        "RANSAC: %d/%d inliers after %d iterations (%.0f sufficient at confidence %.3f)",
        len(inliers), n, cfg.max_iterations, needed, cfg.confidence,
    )
    return final, inliers


# ---------------------------------------------------------------- overlap

def _directed_overlap(query: np.ndarray, target: np.ndarray, radius: float) -> float:
    grid = SpatialHash(target, radius)
    return float(np.count_nonzero(grid.has_neighbour(query, radius))) / len(query)


def overlap_score(cloud_p, cloud_q, transform: RigidTransform, cfg: OverlapConfig) -> float:
    """Fraction of points with a neighbour within cfg.radius after mapping P into Q's frame

    `transform` is the point map P -> Q. The symmetric sense averages both
    directions.
    """
    p = np.asarray(cloud_p, dtype=float).reshape(-1, 3)
    q = np.asarray(cloud_q, dtype=float).reshape(-1, 3)
    if len(p) == 0 or len(q) == 0:
        raise InvalidParameter("overlap_score needs two non-empty clouds")
    moved = transform.apply(p)
    if cfg.sense == "p_to_q":
        return _directed_overlap(moved, q, cfg.radius)
    if cfg.sense == "q_to_p":
        return _directed_overlap(q, moved, cfg.radius)
    return 0.5 * (_directed_overlap(moved, q, cfg.radius) + _directed_overlap(q, moved, cfg.radius))
