"""
Geometry Tool - Rigid-body math shared by every solver

Conventions:
- A global pose (R_i, t_i) stores R_i as the world-to-cloud orientation and t_i
  as the world position of the cloud origin, so x_i = R_i (w - t_i).
- An edge relative (R_ij, t_ij) is the pair returned by relative_from_global:
  R_ij = R_j R_i^T, t_ij = R_i (t_j - t_i). As a point map it sends x_i to
  x_j = R_ij (x_i - t_ij).
- A plain RigidTransform used as a point map acts as x -> R x + t.
"""

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from tools.errors import DegenerateGeometry, InvalidParameter

ORTHONORMAL_TOL = 1e-9


def _frozen(a, shape) -> np.ndarray:
    arr = np.array(a, dtype=float).reshape(shape)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen(self.rotation, (3, 3)))
        object.__setattr__(self, "translation", _frozen(self.translation, (3,)))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points) -> np.ndarray:
        """Map a point (3,) or points (n, 3) through x -> R x + t"""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def allclose(self, other: "RigidTransform", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol, rtol=0.0)
            and np.allclose(self.translation, other.translation, atol=atol, rtol=0.0)
        )

    def __repr__(self):
        angle = np.degrees(rotation_angle(self.rotation))
        return f"RigidTransform(angle={angle:.4f}deg, t={np.round(self.translation, 6).tolist()})"


# ---------------------------------------------------------------- so(3) maps

def hat(w) -> np.ndarray:
    x, y, z = np.asarray(w, dtype=float).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(w) -> np.ndarray:
    """Axis-angle vector -> rotation matrix"""
    return Rotation.from_rotvec(np.asarray(w, dtype=float).reshape(3)).as_matrix()


def so3_log(r) -> np.ndarray:
    """Rotation matrix -> axis-angle vector with norm in [0, pi]"""
    return Rotation.from_matrix(np.asarray(r, dtype=float)).as_rotvec()


def rot_x(angle: float) -> np.ndarray:
    return so3_exp([angle, 0.0, 0.0])


def rot_y(angle: float) -> np.ndarray:
    return so3_exp([0.0, angle, 0.0])


def rot_z(angle: float) -> np.ndarray:
    return so3_exp([0.0, 0.0, angle])


def random_rotation(rng: np.random.Generator, max_angle: Optional[float] = None) -> np.ndarray:
    """Uniform rotation, or a uniform axis with angle in [0, max_angle]"""
    if max_angle is None:
        q = rng.normal(size=4)
        return Rotation.from_quat(q / np.linalg.norm(q)).as_matrix()
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return so3_exp(axis * rng.uniform(0.0, max_angle))


def is_rotation(r, tol: float = ORTHONORMAL_TOL) -> bool:
    r = np.asarray(r, dtype=float)
    if r.shape != (3, 3) or not np.all(np.isfinite(r)):
        return False
    return bool(
        np.allclose(r.T @ r, np.eye(3), atol=tol, rtol=0.0) and abs(np.linalg.det(r) - 1.0) <= tol
    )


def project_to_so3(m) -> np.ndarray:
    """Closest rotation in Frobenius norm (polar factor with det = +1)"""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=float))
    d = np.sign(np.linalg.det(u @ vt)) or 1.0
    return u @ np.diag([1.0, 1.0, d]) @ vt


def rotation_angle(r) -> float:
    """Rotation angle of a single rotation matrix, in [0, pi]"""
    r = np.asarray(r, dtype=float)
    cos_part = (np.trace(r) - 1.0) / 2.0
    sin_part = 0.5 * np.linalg.norm([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return float(np.arctan2(sin_part, cos_part))


def rotation_geodesic_angle(a, b) -> float:
    """Geodesic distance on SO(3), i.e. arccos((trace(a b^T) - 1) / 2)

    Evaluated through atan2 of the symmetric and skew parts so small angles keep
    full precision.
    """
    return rotation_angle(np.asarray(a, dtype=float) @ np.asarray(b, dtype=float).T)


# ---------------------------------------------------------------- transforms

def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """(a o b)(x) = a.R (b.R x + b.t) + a.t"""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def relative_from_global(pose_i: RigidTransform, pose_j: RigidTransform) -> RigidTransform:
    """Edge relative (R_j R_i^T, R_i (t_j - t_i))"""
    r_i = pose_i.rotation
    return RigidTransform(pose_j.rotation @ r_i.T, r_i @ (pose_j.translation - pose_i.translation))


def pose_from_relative(pose_i: RigidTransform, relative: RigidTransform) -> RigidTransform:
    """Inverse of relative_from_global in its second argument: recover pose_j"""
    r_i = pose_i.rotation
    return RigidTransform(relative.rotation @ r_i, pose_i.translation + r_i.T @ relative.translation)


def source_pose_from_relative(pose_j: RigidTransform, relative: RigidTransform) -> RigidTransform:
    """Inverse of relative_from_global in its first argument: recover pose_i"""
    r_i = relative.rotation.T @ pose_j.rotation
    return RigidTransform(r_i, pose_j.translation - r_i.T @ relative.translation)


def invert_relative(relative: RigidTransform) -> RigidTransform:
    """Relative of the reversed edge (j, i)"""
    r = relative.rotation
    return RigidTransform(r.T, -r @ relative.translation)


def relative_point_map(relative: RigidTransform) -> RigidTransform:
    """Point map frame i -> frame j implied by an edge relative"""
    r = relative.rotation
    return RigidTransform(r, -r @ relative.translation)


def relative_from_point_map(transform: RigidTransform) -> RigidTransform:
    """Edge relative for a point map x_j = R x_i + s"""
    r = transform.rotation
    return RigidTransform(r, -r.T @ transform.translation)


def pose_to_world(pose: RigidTransform) -> RigidTransform:
    """Cloud-to-world point map w = R_i^T x_i + t_i"""
    return RigidTransform(pose.rotation.T, pose.translation)


def pose_from_world(world_map: RigidTransform) -> RigidTransform:
    """Inverse of pose_to_world"""
    return RigidTransform(world_map.rotation.T, world_map.translation)


# ---------------------------------------------------------------- rigid fitting

def fit_rigid_svd(src, dst, weights: Optional[Sequence[float]] = None) -> RigidTransform:
    """Weighted Kabsch/Umeyama fit minimizing sum w_k |R src_k + t - dst_k|^2

    Raises DegenerateGeometry when the weighted points are coincident or
    collinear (second singular value of the cross-covariance at or below 1e-9
    relative to the first).
    """
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    if src.shape != dst.shape:
        raise InvalidParameter(f"src and dst differ in shape: {src.shape} vs {dst.shape}")
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
    if len(w) != len(src):
        raise InvalidParameter("weights must have one entry per point")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise InvalidParameter("weights must be finite and non-negative")
    if np.count_nonzero(w) < 3:
        raise DegenerateGeometry(f"rigid fit needs >= 3 weighted points, got {np.count_nonzero(w)}")

    w_sum = w.sum()
    c_src = w @ src / w_sum
    c_dst = w @ dst / w_sum
    a = src - c_src
    b = dst - c_dst
    h = (a * w[:, None]).T @ b
    # Rank test on the source spread; the cross-covariance inherits it.
    s_src = np.linalg.svd((a * np.sqrt(w)[:, None]), compute_uv=False)
    if s_src[0] <= 0.0 or s_src[1] <= 1e-9 * s_src[0]:
        raise DegenerateGeometry("points are coincident or collinear")

    u, _, vt = np.linalg.svd(h)
    v = vt.T
    d = 1.0 if np.linalg.det(v @ u.T) >= 0 else -1.0
    r = v @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(r, c_dst - r @ c_src)
