"""
Rotation Averaging - Global orientations from relative rotations.

Initial rotations are chained along spanning trees: one ranked by how many
triangles confirm each edge (cycle rotation error below a threshold), one by
inlier count. From each start, stage 1 sweeps per-vertex weighted Weiszfeld
steps (geodesic L1 median of the neighbour-implied rotations) in breadth-first
order from the anchor; stage 2 runs iteratively re-weighted least squares on
the linearized edge residuals of all vertices at once, with weights
sigma^2 / (sigma^2 + theta^2) times the edge weight. The start ending at the
lowest robust objective wins.
"""

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import Field
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from tools.config import StageConfig
from tools.errors import STATUS_CONVERGED, STATUS_NON_CONVERGENCE, LengthMismatch
from tools.geometry import project_to_so3, rotation_angle, rotation_geodesic_angle, so3_exp, so3_log
from tools.pose_graph import PoseGraph, maximum_spanning_tree, require_connected, spanning_tree_poses

logger = logging.getLogger(__name__)

WEISZFELD_EPS = 1e-9
MAX_HALVINGS = 12


class RotAvgConfig(StageConfig):
    l1_max_iters: int = Field(50, ge=1)
    irls_max_iters: int = Field(100, ge=1)
    step_tolerance: float = Field(1e-9, gt=0)
    irls_kernel_width: float = Field(math.radians(5.0), gt=0)
    weight_floor: float = Field(1e-6, gt=0)
    consistency_threshold: float = Field(math.radians(15.0), gt=0)
    use_edge_weights: bool = True


@dataclass
class RotationAveragingResult:
    rotations: List[np.ndarray]
    status: str
    l1_sweeps: int = 0
    irls_iterations: int = 0
    objective_history: List[float] = field(default_factory=list)
    starts: int = 1


class RotationAlignment(NamedTuple):
    aligned: List[np.ndarray]
    errors: np.ndarray
    gauge: np.ndarray


def bfs_order(graph: PoseGraph, root: int) -> List[int]:
    adj = graph.adjacency()
    order, seen = [], {root}
    queue = deque([root])
    while queue:
        v = queue.popleft()
        order.append(v)
        for u in adj.get(v, []):
            if u not in seen:
                seen.add(u)
                queue.append(u)
    return order


def _neighbour_estimates(graph: PoseGraph, rotations: List[np.ndarray], v: int, incident: List[int]) -> List[np.ndarray]:
    """Rotation of vertex v implied by each incident edge"""
    out = []
    for k in incident:
        e = graph.edges[k]
        if e.j == v:
            out.append(e.relative.rotation @ rotations[e.i])
        else:
            out.append(e.relative.rotation.T @ rotations[e.j])
    return out


def edge_angles(graph: PoseGraph, rotations: Sequence[np.ndarray]) -> np.ndarray:
    """theta_ij = |log(R_ij R_i R_j^T)| for every edge"""
    return np.array(
        [rotation_geodesic_angle(e.relative.rotation @ rotations[e.i], rotations[e.j]) for e in graph.edges]
    )


def _edge_scale(graph: PoseGraph, cfg: RotAvgConfig) -> np.ndarray:
    if cfg.use_edge_weights:
        return np.array([e.weight for e in graph.edges], dtype=float)
    return np.ones(len(graph.edges))


def robust_objective(graph: PoseGraph, rotations: Sequence[np.ndarray], cfg: RotAvgConfig) -> float:
    """Sum of scale_e * sigma^2 log(1 + theta_e^2 / sigma^2); its IRLS weights are sigma^2/(sigma^2+theta^2)"""
    s2 = cfg.irls_kernel_width ** 2
    theta = edge_angles(graph, rotations)
    return float(np.sum(_edge_scale(graph, cfg) * s2 * np.log1p(theta * theta / s2)))


def consistency_support(graph: PoseGraph, threshold: float) -> np.ndarray:
    """Per edge, the number of triangles through it whose rotations compose to within `threshold` of identity"""
    oriented: Dict[Tuple[int, int], np.ndarray] = {}
    for e in graph.edges:
        oriented[(e.i, e.j)] = e.relative.rotation
        oriented[(e.j, e.i)] = e.relative.rotation.T
    adj = {v: set(nbrs) for v, nbrs in graph.adjacency().items()}
    support = np.zeros(len(graph.edges), dtype=int)
    for k, e in enumerate(graph.edges):
        for m in sorted(adj[e.i] & adj[e.j]):
            # i -> j -> m -> i
            cycle = oriented[(m, e.i)] @ oriented[(e.j, m)] @ e.relative.rotation
            if rotation_angle(cycle) < threshold:
                support[k] += 1
    return support


def _local_update(
    rotation: np.ndarray,
    estimates: List[np.ndarray],
    weight_fn: Callable[[np.ndarray], np.ndarray],
    cost_fn: Callable[[np.ndarray], float],
) -> Tuple[np.ndarray, float]:
    """One weighted tangent-mean step with backtracking on the local cost"""
    tangents = np.array([so3_log(e @ rotation.T) for e in estimates])
    norms = np.linalg.norm(tangents, axis=1)
    w = weight_fn(norms)
    if w.sum() <= 0:
        return rotation, 0.0
    delta = (w[:, None] * tangents).sum(axis=0) / w.sum()
    base = cost_fn(norms)
    for _ in range(MAX_HALVINGS):
        step = float(np.linalg.norm(delta))
        if step == 0.0:
            break
        candidate = project_to_so3(so3_exp(delta) @ rotation)
        new_norms = np.array([rotation_geodesic_angle(e, candidate) for e in estimates])
        if cost_fn(new_norms) <= base:
            return candidate, step
        delta = 0.5 * delta
    return rotation, 0.0


def _l1_sweeps(graph: PoseGraph, rotations: List[np.ndarray], cfg: RotAvgConfig, scale: np.ndarray) -> int:
    incident = graph.incident_edges()
    order = [v for v in bfs_order(graph, graph.anchor) if v != graph.anchor]
    sweeps = 0
    for sweep in range(cfg.l1_max_iters):
        sweeps = sweep + 1
        max_step = 0.0
        for v in order:
            inc = incident[v]
            c = scale[inc]
            est = _neighbour_estimates(graph, rotations, v, inc)
            rotations[v], step = _local_update(
                rotations[v],
                est,
                lambda n, c=c: c / (n + WEISZFELD_EPS),
                lambda n, c=c: float(np.sum(c * n)),
            )
            max_step = max(max_step, step)
        if max_step < cfg.step_tolerance:
            break
    return sweeps


def _irls_direction(
    graph: PoseGraph, rotations: Sequence[np.ndarray], weights: np.ndarray, index: Dict[int, int]
) -> np.ndarray:
    """Weighted least-squares step for r_e + R_ij d_i - d_j over the free vertices (left perturbation)"""
    m = len(index)
    h = np.zeros((3 * m, 3 * m))
    g = np.zeros(3 * m)
    eye = np.eye(3)
    for e, w in zip(graph.edges, weights):
        rij = e.relative.rotation
        r = so3_log(rij @ rotations[e.i] @ rotations[e.j].T)
        a = index.get(e.i)
        b = index.get(e.j)
        if a is not None:
            sa = slice(3 * a, 3 * a + 3)
            h[sa, sa] += w * eye
            g[sa] += w * (rij.T @ r)
        if b is not None:
            sb = slice(3 * b, 3 * b + 3)
            h[sb, sb] += w * eye
            g[sb] -= w * r
        if a is not None and b is not None:
            h[sa, sb] -= w * rij.T
            h[sb, sa] -= w * rij
    try:
        step = -cho_solve(cho_factor(h), g)
    except LinAlgError:
        step = -np.linalg.lstsq(h, g, rcond=None)[0]
    return step.reshape(m, 3)


def _irls(
    graph: PoseGraph, rotations: List[np.ndarray], cfg: RotAvgConfig, scale: np.ndarray
) -> Tuple[List[np.ndarray], str, int, List[float]]:
    free = [v for v in range(graph.num_vertices) if v != graph.anchor]
    index = {v: k for k, v in enumerate(free)}
    s2 = cfg.irls_kernel_width ** 2
    history = [robust_objective(graph, rotations, cfg)]
    if not free:
        return rotations, STATUS_CONVERGED, 0, history
    status = STATUS_NON_CONVERGENCE
    iterations = 0
    for it in range(cfg.irls_max_iters):
        iterations = it + 1
        theta = edge_angles(graph, rotations)
        weights = np.maximum(cfg.weight_floor, scale * s2 / (s2 + theta * theta))
        delta = _irls_direction(graph, rotations, weights, index)
        if np.linalg.norm(delta, axis=1).max() < cfg.step_tolerance:
            status = STATUS_CONVERGED
            break
        accepted = False
        for _ in range(MAX_HALVINGS):
            trial = list(rotations)
            for v, k in index.items():
                trial[v] = project_to_so3(so3_exp(delta[k]) @ rotations[v])
            value = robust_objective(graph, trial, cfg)
            if value <= history[-1]:
                rotations, accepted = trial, True
                break
            delta = 0.5 * delta
        if not accepted:
            logger.debug("rotation IRLS: no descent left after %d halvings", MAX_HALVINGS)
            status = STATUS_CONVERGED
            break
        history.append(value)
    return rotations, status, iterations, history


def initial_rotations(graph: PoseGraph, cfg: RotAvgConfig) -> List[List[np.ndarray]]:
    """Rotations chained along each distinct spanning tree

    Trees rank edges by triangle support then weight, and by inlier count.
    """
    scale = _edge_scale(graph, cfg)
    support = consistency_support(graph, cfg.consistency_threshold)
    candidates: List[Optional[list]] = [[(int(s), float(c)) for s, c in zip(support, scale)], None]
    trees, starts = [], []
    for scores in candidates:
        tree = maximum_spanning_tree(graph, graph.anchor, scores)
        if tree in trees:
            continue
        trees.append(tree)
        rotations = [p.rotation.copy() for p in spanning_tree_poses(graph, scores=scores)]
        rotations[graph.anchor] = np.eye(3)
        starts.append(rotations)
    return starts


def average_rotations(graph: PoseGraph, cfg: RotAvgConfig) -> RotationAveragingResult:
    """Recover one global rotation per vertex; the anchor stays at identity"""
    require_connected(graph)
    scale = _edge_scale(graph, cfg)
    starts = initial_rotations(graph, cfg)

    best: Optional[RotationAveragingResult] = None
    for n, rotations in enumerate(starts):
        sweeps = _l1_sweeps(graph, rotations, cfg, scale)
        rotations, status, iterations, history = _irls(graph, rotations, cfg, scale)
        logger.debug(
            "rotation start %d: %s after %d L1 sweeps + %d IRLS iterations, objective %.6e",
            n, status, sweeps, iterations, history[-1],
        )
        if best is None or history[-1] < best.objective_history[-1]:
            best = RotationAveragingResult(rotations, status, sweeps, iterations, history, len(starts))

    if best.status != STATUS_CONVERGED:
        logger.warning("rotation IRLS hit the iteration cap (%d)", cfg.irls_max_iters)
    logger.info(
        "rotation averaging: %s after %d L1 sweeps + %d IRLS iterations (%d starts), objective %.3e",
        best.status, best.l1_sweeps, best.irls_iterations, len(starts), best.objective_history[-1],
    )
    return best


def align_rotations_to_truth(estimated: Sequence[np.ndarray], truth: Sequence[np.ndarray]) -> RotationAlignment:
    """Remove the global gauge rotation G (R_est G ~ R_truth) by chordal L2 and report errors"""
    if len(estimated) != len(truth):
        raise LengthMismatch(f"{len(estimated)} estimated vs {len(truth)} truth rotations")
    if len(estimated) == 0:
        return RotationAlignment([], np.zeros(0), np.eye(3))
    m = sum(np.asarray(rt).T @ np.asarray(re) for re, rt in zip(estimated, truth))
    u, _, vt = np.linalg.svd(m)
    d = 1.0 if np.linalg.det(vt.T @ u.T) >= 0 else -1.0
    gauge = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    aligned = [np.asarray(re) @ gauge for re in estimated]
    errors = np.array([rotation_geodesic_angle(a, rt) for a, rt in zip(aligned, truth)])
    return RotationAlignment(aligned, errors, gauge)
