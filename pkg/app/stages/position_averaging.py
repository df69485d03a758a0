"""
Position Averaging - Global positions from fixed rotations and relative translations.

Minimizes sum_e w_e s^2 rho(|R_i (t_j - t_i) - t_ij|^2 / s^2) with the truncated
soft-L1 rho(u) = min(2(sqrt(1 + u) - 1), rho(c^2 / s^2)) by Levenberg-Marquardt
on the stacked residuals. The anchor is removed from the parameter vector and
held at the origin.
"""

import logging
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence

import numpy as np
from pydantic import Field, model_validator
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from tools.config import StageConfig
from tools.errors import STATUS_CONVERGED, STATUS_NON_CONVERGENCE, LengthMismatch
from tools.pose_graph import PoseGraph, require_connected, spanning_tree_poses

logger = logging.getLogger(__name__)

LAMBDA_INIT = 1e-3
LAMBDA_UP = 10.0
LAMBDA_DOWN = 0.5
LAMBDA_MAX = 1e16
DIAG_FLOOR = 1e-9


class PosAvgConfig(StageConfig):
    loss_scale: float = Field(0.05, gt=0)
    truncation: float = Field(0.15, gt=0)
    max_iters: int = Field(100, ge=1)
    gradient_tolerance: float = Field(1e-10, gt=0)
    use_edge_weights: bool = True

    @model_validator(mode="after")
    def _truncation_above_scale(self):
        if not self.truncation > self.loss_scale:
            raise ValueError(f"truncation ({self.truncation}) must exceed loss_scale ({self.loss_scale})")
        return self


@dataclass
class PositionAveragingResult:
    positions: np.ndarray
    status: str
    iterations: int = 0
    objective_history: List[float] = field(default_factory=list)


class PositionAlignment(NamedTuple):
    aligned: np.ndarray
    errors: np.ndarray


def _edge_arrays(graph: PoseGraph, rotations: Sequence[np.ndarray]):
    i = np.array([e.i for e in graph.edges], dtype=int)
    j = np.array([e.j for e in graph.edges], dtype=int)
    r_i = np.array([np.asarray(rotations[k], dtype=float) for k in i]).reshape(-1, 3, 3)
    t_ij = np.array([e.relative.translation for e in graph.edges]).reshape(-1, 3)
    return i, j, r_i, t_ij


def _edge_weights(graph: PoseGraph, cfg: PosAvgConfig) -> np.ndarray:
    if cfg.use_edge_weights:
        return np.array([e.weight for e in graph.edges], dtype=float)
    return np.ones(len(graph.edges))


def soft_l1(u: np.ndarray) -> np.ndarray:
    """2 (sqrt(1 + u) - 1) without cancellation for small u"""
    return 2.0 * u / (np.sqrt(1.0 + u) + 1.0)


def position_residuals(graph: PoseGraph, rotations: Sequence[np.ndarray], positions) -> np.ndarray:
    """r_e = R_i (t_j - t_i) - t_ij, one row per edge"""
    t = np.asarray(positions, dtype=float).reshape(-1, 3)
    i, j, r_i, t_ij = _edge_arrays(graph, rotations)
    return np.einsum("eab,eb->ea", r_i, t[j] - t[i]) - t_ij


def position_jacobian(graph: PoseGraph, rotations: Sequence[np.ndarray]) -> np.ndarray:
    """d(stacked residuals)/d(stacked positions), dense (3m, 3n); constant in the positions"""
    n, m = graph.num_vertices, len(graph.edges)
    jac = np.zeros((3 * m, 3 * n))
    for k, e in enumerate(graph.edges):
        r = np.asarray(rotations[e.i], dtype=float)
        jac[3 * k : 3 * k + 3, 3 * e.j : 3 * e.j + 3] = r
        jac[3 * k : 3 * k + 3, 3 * e.i : 3 * e.i + 3] = -r
    return jac


def _loss_terms(res: np.ndarray, cfg: PosAvgConfig):
    """(per-edge loss before weighting, per-edge d loss / d |r|^2)"""
    s2 = cfg.loss_scale ** 2
    u = np.sum(res * res, axis=1) / s2
    u_cap = cfg.truncation ** 2 / s2
    clipped = u >= u_cap
    loss = s2 * np.where(clipped, soft_l1(np.array(u_cap)), soft_l1(u))
    slope = np.where(clipped, 0.0, 1.0 / np.sqrt(1.0 + u))
    return loss, slope


def position_objective(graph: PoseGraph, rotations: Sequence[np.ndarray], positions, cfg: PosAvgConfig) -> float:
    loss, _ = _loss_terms(position_residuals(graph, rotations, positions), cfg)
    return float(np.sum(_edge_weights(graph, cfg) * loss))


def position_gradient(graph: PoseGraph, rotations: Sequence[np.ndarray], positions, cfg: PosAvgConfig) -> np.ndarray:
    """Gradient of position_objective with respect to every position, shape (n, 3)"""
    res = position_residuals(graph, rotations, positions)
    _, slope = _loss_terms(res, cfg)
    w = _edge_weights(graph, cfg) * slope
    jac = position_jacobian(graph, rotations)
    return (2.0 * jac.T @ (np.repeat(w, 3) * res.reshape(-1))).reshape(-1, 3)


def _free_columns(n: int, anchor: int) -> np.ndarray:
    return np.array([3 * v + a for v in range(n) if v != anchor for a in range(3)], dtype=int)


def solve_positions_l2(
    graph: PoseGraph, rotations: Sequence[np.ndarray], use_edge_weights: bool = True
) -> np.ndarray:
    """Closed-form weighted least squares (rho = identity), anchor at the origin"""
    require_connected(graph)
    n = graph.num_vertices
    w = np.array([e.weight for e in graph.edges], dtype=float) if use_edge_weights else np.ones(len(graph.edges))
    jac = position_jacobian(graph, rotations)[:, _free_columns(n, graph.anchor)]
    rhs = np.array([e.relative.translation for e in graph.edges]).reshape(-1)
    wj = np.repeat(w, 3)[:, None] * jac
    x = cho_solve(cho_factor(jac.T @ wj), wj.T @ rhs)
    positions = np.zeros((n, 3))
    positions[np.arange(n) != graph.anchor] = x.reshape(-1, 3)
    return positions


def average_positions(
    graph: PoseGraph,
    rotations: Sequence[np.ndarray],
    cfg: Optional[PosAvgConfig] = None,
    initial: Optional[np.ndarray] = None,
) -> PositionAveragingResult:
    """Robust Levenberg-Marquardt over the non-anchor positions"""
    cfg = cfg or PosAvgConfig()
    if len(rotations) != graph.num_vertices:
        raise LengthMismatch(f"{len(rotations)} rotations for {graph.num_vertices} vertices")
    require_connected(graph)
    n, anchor = graph.num_vertices, graph.anchor
    free = _free_columns(n, anchor)

    if initial is None:
        positions = np.array([p.translation for p in spanning_tree_poses(graph, rotations)])
    else:
        positions = np.array(initial, dtype=float).reshape(n, 3)
    positions = positions - positions[anchor]

    jac = position_jacobian(graph, rotations)[:, free]
    w_edge = _edge_weights(graph, cfg)
    objective = position_objective(graph, rotations, positions, cfg)
    history = [objective]
    lam = LAMBDA_INIT
    status = STATUS_NON_CONVERGENCE
    iterations = 0

    for it in range(cfg.max_iters):
        iterations = it + 1
        res = position_residuals(graph, rotations, positions)
        _, slope = _loss_terms(res, cfg)
        w = np.repeat(w_edge * slope, 3)
        grad = jac.T @ (w * res.reshape(-1))
        if np.max(np.abs(grad), initial=0.0) < cfg.gradient_tolerance:
            status = STATUS_CONVERGED
            break
        hess = jac.T @ (w[:, None] * jac)
        scale = np.maximum(np.diag(hess), DIAG_FLOOR)

        accepted = False
        while lam < LAMBDA_MAX:
            try:
                delta = -cho_solve(cho_factor(hess + lam * np.diag(scale)), grad)
            except LinAlgError:
                lam *= LAMBDA_UP
                continue
            trial = positions.copy()
            trial[np.arange(n) != anchor] += delta.reshape(-1, 3)
            trial_objective = position_objective(graph, rotations, trial, cfg)
            if trial_objective <= objective:
                accepted = True
                break
            lam *= LAMBDA_UP
        if not accepted:
            # no descent left at machine precision
            status = STATUS_CONVERGED
            break

        step = float(np.linalg.norm(delta))
        positions, objective = trial, trial_objective
        history.append(objective)
        lam = max(lam * LAMBDA_DOWN, 1e-12)
        logger.debug("LM iteration %d: objective %.6e, step %.3e, lambda %.1e", iterations, objective, step, lam)
        if step < 1e-14 * (1.0 + float(np.linalg.norm(positions))):
            status = STATUS_CONVERGED
            break

    if status != STATUS_CONVERGED:
        logger.warning("position averaging hit the iteration cap (%d)", cfg.max_iters)
    logger.info("position averaging: %s after %d iterations, objective %.6e", status, iterations, objective)
    return PositionAveragingResult(positions, status, iterations, history)


def align_positions_to_truth(estimated, truth, gauge: Optional[np.ndarray] = None) -> PositionAlignment:
    """Apply the rotation gauge G (from align_rotations_to_truth) then the best offset; report |.| errors"""
    est = np.asarray(estimated, dtype=float).reshape(-1, 3)
    ref = np.asarray(truth, dtype=float).reshape(-1, 3)
    if len(est) != len(ref):
        raise LengthMismatch(f"{len(est)} estimated vs {len(ref)} truth positions")
    if len(est) == 0:
        return PositionAlignment(est, np.zeros(0))
    g = np.eye(3) if gauge is None else np.asarray(gauge, dtype=float)
    rotated = est @ g
    aligned = rotated + np.mean(ref - rotated, axis=0)
    return PositionAlignment(aligned, np.linalg.norm(aligned - ref, axis=1))
