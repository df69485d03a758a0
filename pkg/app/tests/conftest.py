"""Shared fixtures: seeded generators and noiseless pose graphs built from known poses."""

from typing import Callable, List, Sequence, Tuple

import numpy as np
import pytest

from tools.geometry import RigidTransform, random_rotation, relative_from_global
from tools.pose_graph import CorrespondenceSet, Edge, PoseGraph, Vertex


def random_poses(rng: np.random.Generator, n: int, spread: float = 2.0) -> List[RigidTransform]:
    """Vertex 0 at identity, the rest uniformly rotated and placed in a cube"""
    poses = [RigidTransform.identity()]
    for _ in range(n - 1):
        poses.append(RigidTransform(random_rotation(rng), rng.uniform(-spread, spread, 3)))
    return poses


def observe(pose: RigidTransform, world: np.ndarray) -> np.ndarray:
    """World points expressed in the cloud frame: x = R (w - t)"""
    return (world - pose.translation) @ pose.rotation.T


def graph_from_poses(
    rng: np.random.Generator,
    poses: Sequence[RigidTransform],
    pairs: Sequence[Tuple[int, int]],
    n_corr: int = 30,
    noise: float = 0.0,
) -> PoseGraph:
    """Edges carry the exact relatives and correspondences of shared world points"""
    edges = []
    for i, j in pairs:
        world = rng.uniform(-1.0, 1.0, (n_corr, 3))
        xi = observe(poses[i], world)
        xj = observe(poses[j], world)
        if noise > 0:
            xj = xj + rng.normal(0.0, noise, xj.shape)
        edges.append(
            Edge(i, j, relative_from_global(poses[i], poses[j]), CorrespondenceSet(xi, xj), n_corr, 1.0)
        )
    vertices = tuple(Vertex(k, p, k == 0) for k, p in enumerate(poses))
    return PoseGraph(vertices, tuple(edges))


def ring_pairs(n: int, span: int = 2) -> List[Tuple[int, int]]:
    """Sequential pairs (i, i+1..i+span), closing the loop"""
    pairs = set()
    for i in range(n):
        for k in range(1, span + 1):
            j = (i + k) % n
            pairs.add((min(i, j), max(i, j)))
    return sorted(pairs)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def make_poses() -> Callable[..., List[RigidTransform]]:
    return random_poses


@pytest.fixture
def make_graph() -> Callable[..., PoseGraph]:
    return graph_from_poses


@pytest.fixture
def make_pairs() -> Callable[..., List[Tuple[int, int]]]:
    return ring_pairs
