"""
Translation Consensus - Globally optimal re-estimation of relative translations.

With global rotations fixed, every correspondence of an edge proposes one
candidate translation. The translation agreeing with the most candidates is the
point covered by the most radius-eps spheres around them. It is found by a
zooming sparse-grid branch-and-bound: cells are classified against the spheres
they touch (outside / boundary / inside), the fully-inside count is a lower
bound on any point of the cell, the inside + boundary count an upper bound,
and only cells whose upper bound beats the best lower bound are subdivided.
"""

import logging
from dataclasses import dataclass, field, replace
from enum import IntEnum
from itertools import product
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import Field
from scipy.spatial import cKDTree

from tools.config import StageConfig
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
from tools.parallel import ordered_map
from tools.pose_graph import WEIGHT_FLOOR, CorrespondenceSet, PoseGraph, inlier_weights

logger = logging.getLogger(__name__)

# Grid origin offset, in units of eps, so sphere boundaries rarely sit on cell faces.
ORIGIN_JITTER = 1e-7
MAX_PULLBACK = 60
MIN_EDGE_INLIERS = 3
ORACLE_BLOCK = 2_000_000


class BoxRelation(IntEnum):
    OUTSIDE = 0
    BOUNDARY = 1
    INSIDE = 2


class ConsensusConfig(StageConfig):
    initial_cell: Optional[float] = Field(None, gt=0)
    zoom_factor: int = Field(2, ge=2)
    max_zoom: int = Field(40, ge=1)
    min_support_ratio: float = Field(0.5, ge=0, le=1)


@dataclass(frozen=True, eq=False)
class SphereSet:
    centers: np.ndarray
    radius: float

    def __post_init__(self):
        c = np.array(self.centers, dtype=float).reshape(-1, 3)
        if not np.isfinite(self.radius) or self.radius <= 0:
            raise InvalidParameter(f"sphere radius must be > 0, got {self.radius}")
        if len(c) == 0:
            raise EmptyInput("consensus needs at least one candidate")
        if not np.all(np.isfinite(c)):
            raise InvalidParameter("candidate centers must be finite")
        c.setflags(write=False)
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "radius", float(self.radius))

    def __len__(self) -> int:
        return len(self.centers)

    def count_within(self, point) -> np.ndarray:
        """Indices of centers strictly closer than the radius to `point`"""
        d2 = np.sum((self.centers - np.asarray(point, dtype=float)) ** 2, axis=1)
        return np.flatnonzero(d2 < self.radius * self.radius)


@dataclass(frozen=True)
class GridCell:
    min_corner: np.ndarray
    max_corner: np.ndarray
    intersecting_sphere_indices: List[int]
    fully_contained_count: int


@dataclass(frozen=True)
class LevelStat:
    zoom_level: int
    cells: int
    max_count: int


@dataclass
class ConsensusResult:
    translation: np.ndarray
    inlier_indices: np.ndarray
    inlier_count: int
    zoom_levels: int = 0
    cells_visited: int = 0
    status: str = STATUS_CONVERGED
    level_stats: List[LevelStat] = field(default_factory=list)


@dataclass(frozen=True)
class EdgeConsensus:
    i: int
    j: int
    status: str
    inlier_count: int
    result: Optional[ConsensusResult] = None
    applied: bool = True


@dataclass(frozen=True)
class ConsensusReestimation:
    graph: PoseGraph
    reports: List[EdgeConsensus]

    @property
    def flags(self) -> List[EdgeConsensus]:
        return [r for r in self.reports if r.status != STATUS_CONVERGED]


# ---------------------------------------------------------------- candidates

def candidate_translations(corr: CorrespondenceSet, rotation_i, rotation_j) -> np.ndarray:
    """t = X_i - R_i R_j^T X_j for every correspondence (frame-i relative translation)"""
    if len(corr) == 0:
        raise EmptyCorrespondences("no correspondences to propose translations from")
    r_i = np.asarray(rotation_i, dtype=float)
    r_j = np.asarray(rotation_j, dtype=float)
    return corr.points_i - corr.points_j @ r_j @ r_i.T


def make_sphere_instance(
    n: int, eps: float, inlier_fraction: float, rng: np.random.Generator, extent: float = 1.0
) -> Tuple[SphereSet, np.ndarray]:
    """Benchmark instance: a cluster of mutually agreeing candidates among uniform clutter

    Returns the sphere set and the translation the cluster was drawn around.
    """
    if n < 1:
        raise InvalidParameter(f"instance size must be >= 1, got {n}")
    if not 0.0 <= inlier_fraction <= 1.0:
        raise InvalidParameter(f"inlier_fraction must lie in [0, 1], got {inlier_fraction}")
    truth = rng.uniform(-0.5 * extent, 0.5 * extent, 3)
    n_in = int(round(inlier_fraction * n))
    direction = rng.normal(size=(n_in, 3))
    direction /= np.maximum(np.linalg.norm(direction, axis=1, keepdims=True), 1e-12)
    radius = 0.5 * eps * rng.uniform(0.0, 1.0, (n_in, 1)) ** (1.0 / 3.0)
    inliers = truth + 0.999 * radius * direction
    outliers = rng.uniform(-extent, extent, (n - n_in, 3))
    centers = np.vstack([inliers, outliers])
    return SphereSet(centers[rng.permutation(n)], eps), truth


# ---------------------------------------------------------------- grid

def classify_box_sphere(box_min, box_max, centers, radius: float) -> np.ndarray:
    """BoxRelation code per (box, sphere) pair, from closest-point and farthest-corner distances

    OUTSIDE iff closest distance > radius, INSIDE iff farthest corner < radius.
    Arguments broadcast against each other along the leading axes.
    """
    lo = np.asarray(box_min, dtype=float)
    hi = np.asarray(box_max, dtype=float)
    c = np.asarray(centers, dtype=float)
    gap = np.maximum(lo - c, 0.0) + np.maximum(c - hi, 0.0)
    closest = np.sqrt(np.sum(gap * gap, axis=-1))
    far = np.maximum(np.abs(c - lo), np.abs(c - hi))
    farthest = np.sqrt(np.sum(far * far, axis=-1))
    return np.where(
        farthest < radius,
        BoxRelation.INSIDE,
        np.where(closest > radius, BoxRelation.OUTSIDE, BoxRelation.BOUNDARY),
    ).astype(np.int8)


def _grid_origin(spheres: SphereSet) -> np.ndarray:
    eps = spheres.radius
    return spheres.centers.min(axis=0) - eps - ORIGIN_JITTER * eps


def _register(centers: np.ndarray, eps: float, origin: np.ndarray, h: float) -> Tuple[np.ndarray, np.ndarray]:
    """(cell coords, sphere index) for every cell a sphere's bounding box covers"""
    span = int(np.ceil(2.0 * eps / h)) + 1
    offsets = np.array(list(product(range(span), repeat=3)), dtype=np.int64)
    lo = np.floor((centers - eps - origin) / h).astype(np.int64)
    hi = np.floor((centers + eps - origin) / h).astype(np.int64)
    coords = lo[:, None, :] + offsets[None, :, :]
    keep = np.all(coords <= hi[:, None, :], axis=2)
    sphere = np.broadcast_to(np.arange(len(centers))[:, None], keep.shape)[keep]
    return coords[keep], sphere


def _group_cells(coords: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Unique cell rows (lexicographic) and the row -> cell inverse"""
    order = np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))
    ordered = coords[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = np.any(ordered[1:] != ordered[:-1], axis=1)
    inverse = np.empty(len(order), dtype=np.int64)
    inverse[order] = np.cumsum(first) - 1
    return ordered[first], inverse


def build_grid(spheres: SphereSet, cell_size: Optional[float] = None) -> List[GridCell]:
    """Sparse uniform grid over the inflated bounding box; only touched cells are materialized"""
    eps = spheres.radius
    h = eps if cell_size is None else float(cell_size)
    if h <= 0:
        raise InvalidParameter(f"cell size must be > 0, got {h}")
    origin = _grid_origin(spheres)
    coords, sphere = _register(spheres.centers, eps, origin, h)
    lo = origin + coords * h
    rel = classify_box_sphere(lo, lo + h, spheres.centers[sphere], eps)
    hit = rel != BoxRelation.OUTSIDE
    coords, sphere, rel = coords[hit], sphere[hit], rel[hit]
    cells, inv = _group_cells(coords)
    out = []
    for k, cell in enumerate(cells):
        mine = inv == k
        lo_k = origin + cell * h
        out.append(
            GridCell(
                lo_k,
                lo_k + h,
                sorted(int(s) for s in sphere[mine]),
                int(np.sum(rel[mine] == BoxRelation.INSIDE)),
            )
        )
    return out


# ---------------------------------------------------------------- solvers

def _feasible_refit(spheres: SphereSet, inliers: np.ndarray, anchor: np.ndarray) -> np.ndarray:
    """Mean of the inlier centers, pulled back toward `anchor` until every inlier stays strictly inside"""
    members = spheres.centers[inliers]
    eps2 = spheres.radius ** 2
    step = members.mean(axis=0) - anchor
    alpha = 1.0
    for _ in range(MAX_PULLBACK):
        t = anchor + alpha * step
        if np.all(np.sum((members - t) ** 2, axis=1) < eps2):
            return t
        alpha *= 0.5
    return anchor.copy()


def _residual(spheres: SphereSet, inliers: np.ndarray, t: np.ndarray) -> float:
    return float(np.sum((spheres.centers[inliers] - t) ** 2))


def _best_point(spheres: SphereSet, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Pick among feasible points: most inliers, then lowest refit residual, then smallest point"""
    points = np.unique(points, axis=0)
    tree = cKDTree(spheres.centers)
    eps2 = spheres.radius ** 2
    seen = {}
    for p, near in zip(points, tree.query_ball_point(points, spheres.radius)):
        idx = np.array(sorted(near), dtype=np.int64)
        if len(idx):
            idx = idx[np.sum((spheres.centers[idx] - p) ** 2, axis=1) < eps2]
        key = tuple(idx.tolist())
        if key and key not in seen:
            seen[key] = p
    if not seen:
        # every center lies strictly inside its own sphere
        return _best_point(spheres, spheres.centers)

    ranked = []
    for key, p in seen.items():
        idx = np.array(key, dtype=np.int64)
        t = _feasible_refit(spheres, idx, p)
        ranked.append((-len(idx), _residual(spheres, idx, t), tuple(p.tolist()), t))
    ranked.sort(key=lambda r: r[:3])
    t = ranked[0][3]
    return t, spheres.count_within(t)


def max_consensus_translation(spheres: SphereSet, cfg: Optional[ConsensusConfig] = None) -> ConsensusResult:
    """Translation maximizing the number of candidates strictly within eps"""
    cfg = cfg or ConsensusConfig()
    centers, eps = spheres.centers, spheres.radius
    h = cfg.initial_cell or eps
    z = cfg.zoom_factor
    child_offsets = np.array(list(product(range(z), repeat=3)), dtype=np.int64)
    origin = _grid_origin(spheres)

    coords, sphere = _register(centers, eps, origin, h)
    base = np.zeros(len(sphere), dtype=np.int64)
    best = 0
    candidates: List[np.ndarray] = []
    stats: List[LevelStat] = []
    visited = 0
    status = STATUS_CONVERGED
    level = 0
    while True:
        lo = origin + coords * h
        rel = classify_box_sphere(lo, lo + h, centers[sphere], eps)
        hit = rel != BoxRelation.OUTSIDE
        coords, sphere, base, rel = coords[hit], sphere[hit], base[hit], rel[hit]
        if len(coords) == 0:
            break
        cells, inv = _group_cells(coords)
        m = len(cells)
        cell_base = np.zeros(m, dtype=np.int64)
        cell_base[inv] = base
        inside = cell_base + np.bincount(inv[rel == BoxRelation.INSIDE], minlength=m)
        boundary = np.bincount(inv[rel == BoxRelation.BOUNDARY], minlength=m)
        upper = inside + boundary
        visited += m
        stats.append(LevelStat(level, m, int(upper.max())))
        cell_centers = origin + (cells + 0.5) * h

        top = int(inside.max())
        if top > best:
            best = top
            candidates = []
        if best > 0 and top == best:
            candidates.append(cell_centers[inside == best])

        active = upper > best
        logger.debug("consensus level %d: %d cells, best %d, %d active", level, m, best, int(active.sum()))
        if not active.any():
            break
        if level >= cfg.max_zoom:
            status = STATUS_NON_TERMINATION
            candidates.append(cell_centers[active])
            break

        split = active[inv] & (rel == BoxRelation.BOUNDARY)
        parents = inv[split]
        coords = ((cells[parents] * z)[:, None, :] + child_offsets[None, :, :]).reshape(-1, 3)
        sphere = np.repeat(sphere[split], len(child_offsets))
        base = np.repeat(inside[parents], len(child_offsets))
        h /= z
        level += 1

    if status == STATUS_NON_TERMINATION:
        logger.warning("consensus reached max zoom %d with undecided cells; returning best so far", cfg.max_zoom)
    points = np.vstack(candidates) if candidates else centers
    translation, inliers = _best_point(spheres, points)
    return ConsensusResult(
        translation=translation,
        inlier_indices=inliers,
        inlier_count=len(inliers),
        zoom_levels=level + 1,
        cells_visited=visited,
        status=status,
        level_stats=stats,
    )


def _strict_counts(centers: np.ndarray, eps: float) -> np.ndarray:
    n = len(centers)
    block = max(1, ORACLE_BLOCK // n)
    counts = np.empty(n, dtype=np.int64)
    for start in range(0, n, block):
        diff = centers[start : start + block, None, :] - centers[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        counts[start : start + block] = np.sum(d2 < eps * eps, axis=1)
    return counts


def exhaustive_candidate_oracle(spheres: SphereSet) -> ConsensusResult:
    """Best single candidate by inlier count (first index on ties), then refit"""
    counts = _strict_counts(spheres.centers, spheres.radius)
    best = int(np.argmax(counts))
    anchor = spheres.centers[best]
    t = _feasible_refit(spheres, spheres.count_within(anchor), anchor)
    inliers = spheres.count_within(t)
    return ConsensusResult(t, inliers, len(inliers), 0, len(spheres), STATUS_OK)


# ---------------------------------------------------------------- graph

def reestimate_all_edges(
    graph: PoseGraph,
    rotations: Sequence[np.ndarray],
    eps: float,
    cfg: Optional[ConsensusConfig] = None,
    weight_floor: float = WEIGHT_FLOOR,
    threads: Optional[int] = None,
) -> ConsensusReestimation:
    """Replace every edge's relative with (R_j R_i^T, consensus translation)

    Inlier counts, inlier indices and weights come from the consensus inliers;
    edges with fewer than three inliers are flagged LOW_INLIER and floored. An
    edge whose consensus keeps less than `cfg.min_support_ratio` of its stored
    inlier count disagrees with the global rotations and is left unchanged.
    """
    if len(rotations) != graph.num_vertices:
        raise LengthMismatch(f"{len(rotations)} rotations for {graph.num_vertices} vertices")
    if not eps > 0:
        raise InvalidParameter(f"eps must be > 0, got {eps}")
    cfg = cfg or ConsensusConfig()
    rot = [np.asarray(r, dtype=float) for r in rotations]

    def solve(edge) -> Optional[ConsensusResult]:
        if len(edge.correspondences) == 0:
            return None
        cand = candidate_translations(edge.correspondences, rot[edge.i], rot[edge.j])
        return max_consensus_translation(SphereSet(cand, eps), cfg)

    results = ordered_map(solve, graph.edges, threads)
    applied = [
        r is not None
        and (r.inlier_count < MIN_EDGE_INLIERS or r.inlier_count >= cfg.min_support_ratio * e.inlier_count)
        for e, r in zip(graph.edges, results)
    ]
    counts = [
        r.inlier_count if use else (e.inlier_count if r is not None else 0)
        for e, r, use in zip(graph.edges, results, applied)
    ]
    weights = inlier_weights(counts, weight_floor)

    edges, reports = [], []
    for e, r, use, count, w in zip(graph.edges, results, applied, counts, weights):
        if r is None:
            status = STATUS_NO_CORRESPONDENCES
            edge = replace(e, inlier_count=0, weight=float(w))
        elif not use:
            status = r.status
            edge = replace(e, weight=float(w))
        else:
            status = r.status
            if r.inlier_count < MIN_EDGE_INLIERS:
                status = STATUS_LOW_INLIER
                w = weight_floor
            edge = replace(
                e,
                relative=RigidTransform(rot[e.j] @ rot[e.i].T, r.translation),
                inlier_count=int(r.inlier_count),
                weight=float(w),
                inliers=tuple(r.inlier_indices),
            )
        edges.append(edge)
        reports.append(EdgeConsensus(e.i, e.j, status, int(0 if r is None else r.inlier_count), r, use))

    flagged = [r for r in reports if r.status != STATUS_CONVERGED]
    if flagged:
        logger.warning(
            "consensus flagged %d of %d edges: %s",
            len(flagged), len(reports), ", ".join(f"({r.i},{r.j}) {r.status}" for r in flagged),
        )
    kept = [r for r in reports if r.result is not None and not r.applied]
    if kept:
        logger.info(
            "kept the pairwise translation on %d edges with little consensus support: %s",
            len(kept), ", ".join(f"({r.i},{r.j})" for r in kept),
        )
    logger.info("re-estimated %d of %d edge translations by consensus", sum(applied), len(edges))
    return ConsensusReestimation(graph.with_edges(edges), reports)
