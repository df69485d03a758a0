"""
Joint Refinement - All rotations and positions against the correspondences.

Loss: L = sum_e min(eps_e, gamma), where eps_e is the RMSE of edge e's inlier
correspondences under the relative transform induced by the current global
poses. Edges without recorded inliers are scored on every correspondence. Smooth
edges (eps_e < gamma) enter a damped Gauss-Newton step in squared form,
weighted by 1 / (2 eps_e) so the normal equations carry the exact gradient of L;
truncated edges are constant. Each non-anchor pose moves by a right
perturbation R <- R exp(phi), t <- t + delta.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import Field
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from tools.config import StageConfig
from tools.errors import STATUS_CONVERGED, STATUS_NON_CONVERGENCE, EmptyCorrespondences, LengthMismatch
from tools.geometry import RigidTransform, project_to_so3, so3_exp
from tools.parallel import ordered_map
from tools.pose_graph import Edge, PoseGraph, require_connected

logger = logging.getLogger(__name__)

DAMPING_UP = 10.0
DAMPING_DOWN = 0.5
DAMPING_MAX = 1e16
RESIDUAL_FLOOR = 1e-9


class RefineConfig(StageConfig):
    gamma: float = Field(0.15, gt=0)
    max_iters: int = Field(50, ge=1)
    step_tolerance: float = Field(1e-10, gt=0)
    parameter_damping: float = Field(1e-4, gt=0)


@dataclass
class RefinementResult:
    poses: List[RigidTransform]
    status: str
    iterations: int = 0
    loss_history: List[float] = field(default_factory=list)


def _edge_errors(edge: Edge, pose_i: RigidTransform, pose_j: RigidTransform):
    """Per-correspondence residuals e = R_j (R_i^T p + t_i - t_j) - q, plus u = R_i^T p and d"""
    corr = edge.scored_correspondences()
    p = corr.points_i
    q = corr.points_j
    u = p @ pose_i.rotation
    d = u + (pose_i.translation - pose_j.translation)
    return d @ pose_j.rotation.T - q, u, d


def _is_scored(edge: Edge) -> bool:
    return len(edge.correspondences) > 0 and (edge.inliers is None or len(edge.inliers) > 0)


def edge_residual(edge: Edge, pose_i: RigidTransform, pose_j: RigidTransform) -> float:
    """Inlier RMSE of the relative transform induced by the two global poses"""
    if not _is_scored(edge):
        raise EmptyCorrespondences(f"edge ({edge.i}, {edge.j}) has no inlier correspondences")
    err, _, _ = _edge_errors(edge, pose_i, pose_j)
    return float(np.sqrt(np.mean(np.sum(err * err, axis=1))))


def _scored_edges(graph: PoseGraph) -> List[Edge]:
    return [e for e in graph.edges if _is_scored(e)]


def refinement_loss(graph: PoseGraph, poses: Sequence[RigidTransform], gamma: float) -> float:
    """sum over edges with inlier correspondences of min(eps_e, gamma)"""
    return float(sum(min(edge_residual(e, poses[e.i], poses[e.j]), gamma) for e in _scored_edges(graph)))


def _hat_rows(v: np.ndarray) -> np.ndarray:
    out = np.zeros((len(v), 3, 3))
    out[:, 0, 1], out[:, 0, 2] = -v[:, 2], v[:, 1]
    out[:, 1, 0], out[:, 1, 2] = v[:, 2], -v[:, 0]
    out[:, 2, 0], out[:, 2, 1] = -v[:, 1], v[:, 0]
    return out


def _edge_system(edge: Edge, pose_i: RigidTransform, pose_j: RigidTransform, gamma: float):
    """(eps_e, 12x12 normal block, 12 gradient block) in the order [phi_i, t_i, phi_j, t_j]

    Blocks are zero for truncated edges.
    """
    err, u, d = _edge_errors(edge, pose_i, pose_j)
    c = len(err)
    eps = float(np.sqrt(np.mean(np.sum(err * err, axis=1))))
    if eps >= gamma:
        return eps, np.zeros((12, 12)), np.zeros(12)
    r_j = pose_j.rotation
    jac = np.empty((c, 3, 12))
    jac[:, :, 0:3] = r_j @ _hat_rows(u)
    jac[:, :, 3:6] = r_j
    jac[:, :, 6:9] = -(r_j @ _hat_rows(d))
    jac[:, :, 9:12] = -r_j
    jac = jac.reshape(-1, 12)
    # d eps / dx = (1 / (eps c)) J^T e
    scale = 1.0 / (max(eps, RESIDUAL_FLOOR * gamma) * c)
    return eps, scale * (jac.T @ jac), scale * (jac.T @ err.reshape(-1))


def refinement_gradient(graph: PoseGraph, poses: Sequence[RigidTransform], gamma: float) -> np.ndarray:
    """Gradient of refinement_loss with respect to each pose's (phi, t) perturbation, shape (n, 6)"""
    grad = np.zeros((graph.num_vertices, 6))
    for e in _scored_edges(graph):
        _, _, g = _edge_system(e, poses[e.i], poses[e.j], gamma)
        grad[e.i] += g[:6]
        grad[e.j] += g[6:]
    return grad


def _retract(pose: RigidTransform, step: np.ndarray) -> RigidTransform:
    return RigidTransform(project_to_so3(pose.rotation @ so3_exp(step[:3])), pose.translation + step[3:])


def _assemble(
    graph: PoseGraph, poses: Sequence[RigidTransform], gamma: float, index: dict, threads: Optional[int]
) -> Tuple[np.ndarray, np.ndarray]:
    size = 6 * len(index)
    hess = np.zeros((size, size))
    grad = np.zeros(size)
    edges = _scored_edges(graph)
    blocks = ordered_map(lambda e: _edge_system(e, poses[e.i], poses[e.j], gamma), edges, threads)
    for e, (_, h, g) in zip(edges, blocks):
        slots = [(index.get(e.i), 0), (index.get(e.j), 6)]
        for a, oa in slots:
            if a is None:
                continue
            grad[6 * a : 6 * a + 6] += g[oa : oa + 6]
            for b, ob in slots:
                if b is None:
                    continue
                hess[6 * a : 6 * a + 6, 6 * b : 6 * b + 6] += h[oa : oa + 6, ob : ob + 6]
    return hess, grad


def refine_poses(
    graph: PoseGraph,
    initial: Sequence[RigidTransform],
    cfg: Optional[RefineConfig] = None,
    threads: Optional[int] = None,
) -> RefinementResult:
    """Damped Gauss-Newton on the truncated RMSE loss; the loss never increases"""
    cfg = cfg or RefineConfig()
    if len(initial) != graph.num_vertices:
        raise LengthMismatch(f"{len(initial)} initial poses for {graph.num_vertices} vertices")
    require_connected(graph)
    skipped = len(graph.edges) - len(_scored_edges(graph))
    if skipped:
        logger.warning("joint refinement ignores %d edges without correspondences or inliers", skipped)

    anchor = graph.anchor
    free = [v for v in range(graph.num_vertices) if v != anchor]
    index = {v: k for k, v in enumerate(free)}
    poses = list(initial)
    loss = refinement_loss(graph, poses, cfg.gamma)
    history = [loss]
    damping = cfg.parameter_damping
    status = STATUS_NON_CONVERGENCE
    iterations = 0

    for it in range(cfg.max_iters):
        hess, grad = _assemble(graph, poses, cfg.gamma, index, threads)
        if not np.any(grad):
            status = STATUS_CONVERGED
            break
        iterations = it + 1
        scale = np.maximum(np.diag(hess), 1e-12)

        accepted = False
        while damping < DAMPING_MAX:
            try:
                step = -cho_solve(cho_factor(hess + damping * np.diag(scale)), grad)
            except LinAlgError:
                damping *= DAMPING_UP
                continue
            trial = list(poses)
            for v, k in index.items():
                trial[v] = _retract(poses[v], step[6 * k : 6 * k + 6])
            trial_loss = refinement_loss(graph, trial, cfg.gamma)
            if trial_loss <= loss:
                accepted = True
                break
            damping *= DAMPING_UP
        if not accepted:
            status = STATUS_CONVERGED
            break

        poses, loss = trial, trial_loss
        history.append(loss)
        damping = max(damping * DAMPING_DOWN, 1e-12)
        norm = float(np.linalg.norm(step))
        logger.debug("refinement iteration %d: loss %.6e, step %.3e", iterations, loss, norm)
        if norm < cfg.step_tolerance:
            status = STATUS_CONVERGED
            break

    if status != STATUS_CONVERGED:
        logger.warning("joint refinement hit the iteration cap (%d)", cfg.max_iters)
    logger.info("joint refinement: %s after %d iterations, loss %.6e -> %.6e", status, iterations, history[0], loss)
    return RefinementResult(poses, status, iterations, history)
