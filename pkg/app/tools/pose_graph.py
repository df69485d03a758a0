"""
Pose Graph Tool - Vertices (global poses), edges (relative estimates) and the
line-oriented text format used to exchange them.

Text format ('#' starts a comment, tokens are whitespace-delimited):
    VERTEX <id> <tx> <ty> <tz> <r00> ... <r22>
    FIX <id>
    EDGE <i> <j> <tx> <ty> <tz> <r00> ... <r22> <inliers> <weight> <overlap>
    CORR <i> <j> <xi> <yi> <zi> <xj> <yj> <zj> [<label>]
CORR records belong to the EDGE record directly above them.
"""

import heapq
import io
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, TextIO, Tuple, Union

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components as _csgraph_components

from tools.errors import DisconnectedGraph, EmptyInput, GraphFormatError, InvalidParameter
from tools.geometry import (
    RigidTransform,
    invert_relative,
    is_rotation,
    pose_from_relative,
    relative_from_global,
    rotation_geodesic_angle,
    source_pose_from_relative,
)

logger = logging.getLogger(__name__)

WEIGHT_FLOOR = 1e-3


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Paired points (X_i in frame i, X_j in frame j) with optional truth labels"""

    points_i: np.ndarray
    points_j: np.ndarray
    truth_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        pi = np.array(self.points_i, dtype=float).reshape(-1, 3)
        pj = np.array(self.points_j, dtype=float).reshape(-1, 3)
        if pi.shape != pj.shape:
            raise InvalidParameter(f"correspondence arrays differ in shape: {pi.shape} vs {pj.shape}")
        if not (np.all(np.isfinite(pi)) and np.all(np.isfinite(pj))):
            raise InvalidParameter("correspondence points must be finite")
        pi.setflags(write=False)
        pj.setflags(write=False)
        object.__setattr__(self, "points_i", pi)
        object.__setattr__(self, "points_j", pj)
        if self.truth_labels is not None:
            labels = np.array(self.truth_labels, dtype=bool).reshape(-1)
            if len(labels) != len(pi):
                raise InvalidParameter("truth_labels must have one entry per pair")
            labels.setflags(write=False)
            object.__setattr__(self, "truth_labels", labels)

    @classmethod
    def empty(cls) -> "CorrespondenceSet":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)))

    def __len__(self) -> int:
        return len(self.points_i)

    def subset(self, indices) -> "CorrespondenceSet":
        idx = np.asarray(indices, dtype=int)
        labels = None if self.truth_labels is None else self.truth_labels[idx]
        return CorrespondenceSet(self.points_i[idx], self.points_j[idx], labels)

    def swapped(self) -> "CorrespondenceSet":
        return CorrespondenceSet(self.points_j, self.points_i, self.truth_labels)


@dataclass(frozen=True)
class Vertex:
    id: int
    pose: RigidTransform
    fixed: bool = False


@dataclass(frozen=True)
class Edge:
    i: int
    j: int
    relative: RigidTransform
    correspondences: CorrespondenceSet = field(default_factory=CorrespondenceSet.empty)
    inlier_count: int = 0
    weight: float = 1.0
    overlap_score: float = 0.0
    # indices into `correspondences` supporting `relative`; None means every pair
    inliers: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if self.inliers is not None:
            object.__setattr__(self, "inliers", tuple(int(k) for k in self.inliers))

    @property
    def key(self) -> Tuple[int, int]:
        return (min(self.i, self.j), max(self.i, self.j))

    def reversed(self) -> "Edge":
        return replace(
            self,
            i=self.j,
            j=self.i,
            relative=invert_relative(self.relative),
            correspondences=self.correspondences.swapped(),
        )

    def scored_correspondences(self) -> CorrespondenceSet:
        """The inlier subset when one is recorded, otherwise every pair"""
        if self.inliers is None:
            return self.correspondences
        return self.correspondences.subset(list(self.inliers))


@dataclass(frozen=True)
class PoseGraph:
    vertices: Tuple[Vertex, ...]
    edges: Tuple[Edge, ...]

    def __post_init__(self):
        object.__setattr__(self, "vertices", tuple(self.vertices))
        object.__setattr__(self, "edges", tuple(self.edges))

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def anchor(self) -> int:
        fixed = [v.id for v in self.vertices if v.fixed]
        return fixed[0] if fixed else 0

    def poses(self) -> List[RigidTransform]:
        return [v.pose for v in self.vertices]

    def rotations(self) -> List[np.ndarray]:
        return [v.pose.rotation for v in self.vertices]

    def positions(self) -> np.ndarray:
        return np.array([v.pose.translation for v in self.vertices]).reshape(-1, 3)

    def with_poses(self, poses: Sequence[RigidTransform]) -> "PoseGraph":
        if len(poses) != len(self.vertices):
            raise InvalidParameter(f"expected {len(self.vertices)} poses, got {len(poses)}")
        return PoseGraph(tuple(replace(v, pose=p) for v, p in zip(self.vertices, poses)), self.edges)

    def with_edges(self, edges: Sequence[Edge]) -> "PoseGraph":
        return PoseGraph(self.vertices, tuple(edges))

    def adjacency(self) -> Dict[int, List[int]]:
        """Neighbour lists (sorted) keyed by vertex id"""
        adj: Dict[int, List[int]] = {v.id: [] for v in self.vertices}
        for e in self.edges:
            adj.setdefault(e.i, []).append(e.j)
            adj.setdefault(e.j, []).append(e.i)
        return {k: sorted(set(v)) for k, v in adj.items()}

    def incident_edges(self) -> Dict[int, List[int]]:
        """Edge indices touching each vertex, in edge order"""
        inc: Dict[int, List[int]] = {v.id: [] for v in self.vertices}
        for k, e in enumerate(self.edges):
            inc.setdefault(e.i, []).append(k)
            inc.setdefault(e.j, []).append(k)
        return inc


@dataclass(frozen=True)
class PairwiseResult:
    """One front-end estimate; `relative` follows the edge convention"""

    i: int
    j: int
    relative: RigidTransform
    correspondences: CorrespondenceSet
    inlier_count: int
    overlap_score: float = 0.0
    inliers: Optional[Tuple[int, ...]] = None


@dataclass(frozen=True)
class Violation:
    kind: str
    message: str


@dataclass(frozen=True)
class EdgeResidual:
    i: int
    j: int
    rotation_angle: float
    translation_norm: float


# ---------------------------------------------------------------- graph algorithms

def connected_components(num_vertices: int, pairs: Iterable[Tuple[int, int]]) -> List[List[int]]:
    """Undirected components, each sorted, ordered by smallest member"""
    pairs = list(pairs)
    if num_vertices == 0:
        return []
    rows = np.array([p[0] for p in pairs], dtype=int)
    cols = np.array([p[1] for p in pairs], dtype=int)
    adj = coo_matrix((np.ones(len(pairs)), (rows, cols)), shape=(num_vertices, num_vertices))
    _, labels = _csgraph_components(adj, directed=False)
    groups: Dict[int, List[int]] = {}
    for v, lab in enumerate(labels):
        groups.setdefault(int(lab), []).append(v)
    return sorted(groups.values(), key=lambda c: c[0])


def require_connected(graph: PoseGraph):
    comps = connected_components(graph.num_vertices, [(e.i, e.j) for e in graph.edges])
    if len(comps) > 1:
        raise DisconnectedGraph(comps)


def _priority(score) -> Tuple:
    if isinstance(score, tuple):
        return tuple(-float(x) for x in score)
    return (-float(score),)


def maximum_spanning_tree(
    graph: PoseGraph, root: Optional[int] = None, scores: Optional[Sequence] = None
) -> List[int]:
    """Edge indices of the maximum-score spanning tree, in discovery order from root

    Scores default to the inlier counts; tuple scores compare lexicographically.
    Prim's algorithm; ties go to the lower edge index.
    """
    root = graph.anchor if root is None else root
    if scores is None:
        scores = [e.inlier_count for e in graph.edges]
    if len(scores) != len(graph.edges):
        raise InvalidParameter(f"expected {len(graph.edges)} edge scores, got {len(scores)}")
    priority = [_priority(s) for s in scores]
    incident = graph.incident_edges()
    visited = {root}
    heap: List[Tuple[Tuple, int]] = []
    for k in incident.get(root, []):
        heapq.heappush(heap, (priority[k], k))
    tree: List[int] = []
    while heap and len(visited) < graph.num_vertices:
        _, k = heapq.heappop(heap)
        e = graph.edges[k]
        if e.i in visited and e.j in visited:
            continue
        new = e.j if e.i in visited else e.i
        visited.add(new)
        tree.append(k)
        for k2 in incident.get(new, []):
            e2 = graph.edges[k2]
            if not (e2.i in visited and e2.j in visited):
                heapq.heappush(heap, (priority[k2], k2))
    return tree


def spanning_tree_poses(
    graph: PoseGraph, rotations: Optional[Sequence[np.ndarray]] = None, scores: Optional[Sequence] = None
) -> List[RigidTransform]:
    """Chain poses outward from the anchor along the maximum-score spanning tree

    With `rotations` given, those rotations are kept and only positions are
    chained (t_j = t_i + R_i^T t_ij); otherwise rotations are chained too.
    """
    anchor = graph.anchor
    n = graph.num_vertices
    poses: List[Optional[RigidTransform]] = [None] * n
    if rotations is None:
        poses[anchor] = RigidTransform.identity()
    else:
        poses[anchor] = RigidTransform(rotations[anchor], np.zeros(3))
    for k in maximum_spanning_tree(graph, anchor, scores):
        e = graph.edges[k]
        if poses[e.i] is not None and poses[e.j] is None:
            known, target, forward = e.i, e.j, True
        elif poses[e.j] is not None and poses[e.i] is None:
            known, target, forward = e.j, e.i, False
        else:
            continue
        if rotations is None:
            if forward:
                poses[target] = pose_from_relative(poses[known], e.relative)
            else:
                poses[target] = source_pose_from_relative(poses[known], e.relative)
        else:
            r_known = np.asarray(rotations[known])
            r_target = np.asarray(rotations[target])
            if forward:
                t = poses[known].translation + r_known.T @ e.relative.translation
            else:
                t = poses[known].translation - r_target.T @ e.relative.translation
            poses[target] = RigidTransform(r_target, t)
    missing = [v for v in range(n) if poses[v] is None]
    if missing:
        raise DisconnectedGraph(connected_components(n, [(e.i, e.j) for e in graph.edges]))
    return poses  # type: ignore[return-value]


def inlier_weights(counts: Sequence[int], floor: float = WEIGHT_FLOOR) -> List[float]:
    """inlier_count / max_inlier_count, floored"""
    counts = list(counts)
    top = max(counts) if counts else 0
    if top <= 0:
        return [floor] * len(counts)
    return [max(floor, c / top) for c in counts]


# ---------------------------------------------------------------- operations

def build_graph(pairwise_results: Sequence[Union[PairwiseResult, tuple]], weight_floor: float = WEIGHT_FLOOR) -> PoseGraph:
    """Assemble a pose graph from pairwise estimates

    Vertex ids are compacted to [0, n); vertex 0 is the fixed anchor at identity
    and the remaining poses are chained along the maximum-inlier spanning tree.
    """
    results = [r if isinstance(r, PairwiseResult) else PairwiseResult(*r) for r in pairwise_results]
    if not results:
        raise EmptyInput("no pairwise results to build a graph from")

    ids = sorted({int(r.i) for r in results} | {int(r.j) for r in results})
    if len(ids) < 2:
        raise EmptyInput("a pose graph needs at least 2 vertices")
    remap = {old: new for new, old in enumerate(ids)}

    by_pair: Dict[Tuple[int, int], Edge] = {}
    for r in results:
        i, j = remap[int(r.i)], remap[int(r.j)]
        if i == j:
            raise InvalidParameter(f"self-loop pairwise result on vertex {r.i}")
        if r.inlier_count > len(r.correspondences):
            raise InvalidParameter(
                f"edge ({r.i}, {r.j}) reports {r.inlier_count} inliers for {len(r.correspondences)} correspondences"
            )
        edge = Edge(
            i, j, r.relative, r.correspondences, int(r.inlier_count), 1.0, float(r.overlap_score), r.inliers
        )
        if i > j:
            edge = edge.reversed()
        previous = by_pair.get(edge.key)
        if previous is not None:
            logger.warning("duplicate pairwise result for pair %s; keeping the higher inlier count", edge.key)
            if previous.inlier_count >= edge.inlier_count:
                continue
        by_pair[edge.key] = edge

    edges = [by_pair[k] for k in sorted(by_pair)]
    weights = inlier_weights([e.inlier_count for e in edges], weight_floor)
    edges = [replace(e, weight=w) for e, w in zip(edges, weights)]

    n = len(ids)
    comps = connected_components(n, [(e.i, e.j) for e in edges])
    if len(comps) > 1:
        raise DisconnectedGraph([[ids[v] for v in c] for c in comps])

    placeholder = tuple(Vertex(v, RigidTransform.identity(), v == 0) for v in range(n))
    graph = PoseGraph(placeholder, tuple(edges))
    poses = spanning_tree_poses(graph)
    logger.info("built pose graph: %d vertices, %d edges", n, len(edges))
    return graph.with_poses(poses)


def validate(graph: PoseGraph) -> List[Violation]:
    """Return every invariant violation; an empty list means the graph is valid"""
    violations: List[Violation] = []
    n = graph.num_vertices
    ids = [v.id for v in graph.vertices]
    if ids != list(range(n)):
        violations.append(Violation("NonDenseIds", f"vertex ids must be 0..{n - 1} in order, got {ids}"))

    fixed = [v.id for v in graph.vertices if v.fixed]
    if len(fixed) != 1:
        violations.append(Violation("AnchorCount", f"exactly one fixed vertex required, found {fixed}"))

    for v in graph.vertices:
        if not is_rotation(v.pose.rotation, 1e-6) or not np.all(np.isfinite(v.pose.translation)):
            violations.append(Violation("InvalidPose", f"vertex {v.id} pose is not a finite rigid transform"))

    seen: Dict[Tuple[int, int], int] = {}
    valid_pairs = []
    for k, e in enumerate(graph.edges):
        if e.i == e.j:
            violations.append(Violation("SelfLoop", f"edge {k} connects vertex {e.i} to itself"))
            continue
        if not (0 <= e.i < n and 0 <= e.j < n):
            violations.append(Violation("UnknownVertex", f"edge {k} ({e.i}, {e.j}) references a missing vertex"))
            continue
        if e.key in seen:
            violations.append(
                Violation("DuplicateEdge", f"edges {seen[e.key]} and {k} both connect pair {e.key}")
            )
        else:
            seen[e.key] = k
        if e.inlier_count > len(e.correspondences):
            violations.append(
                Violation("InlierCount", f"edge ({e.i}, {e.j}) has {e.inlier_count} inliers > {len(e.correspondences)}")
            )
        if e.inliers is not None and any(not 0 <= k < len(e.correspondences) for k in e.inliers):
            violations.append(
                Violation("InlierIndex", f"edge ({e.i}, {e.j}) lists inlier indices outside its correspondences")
            )
        if e.weight < 0:
            violations.append(Violation("NegativeWeight", f"edge ({e.i}, {e.j}) has weight {e.weight}"))
        valid_pairs.append((e.i, e.j))

    if n > 0:
        comps = connected_components(n, valid_pairs)
        if len(comps) > 1:
            violations.append(Violation("DisconnectedGraph", f"graph splits into components {comps}"))
    return violations


def consistency_residuals(graph: PoseGraph) -> List[EdgeResidual]:
    """Per-edge residual of the stored relative against the current global poses"""
    poses = graph.poses()
    out = []
    for e in graph.edges:
        implied = relative_from_global(poses[e.i], poses[e.j])
        out.append(
            EdgeResidual(
                e.i,
                e.j,
                rotation_geodesic_angle(e.relative.rotation, implied.rotation),
                float(np.linalg.norm(e.relative.translation - implied.translation)),
            )
        )
    return out


# ---------------------------------------------------------------- text format

def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


def _pose_tokens(t: RigidTransform) -> List[str]:
    return [_fmt(x) for x in t.translation] + [_fmt(x) for x in t.rotation.reshape(-1)]


def format_graph(graph: PoseGraph, header: Optional[str] = None) -> str:
    buf = io.StringIO()
    write_graph(graph, buf, header)
    return buf.getvalue()


def write_graph(graph: PoseGraph, target: Union[str, TextIO], header: Optional[str] = None):
    """Write the graph; `header` lines are emitted as '#' comments"""
    if isinstance(target, str):
        with open(target, "w", newline="\n") as f:
            write_graph(graph, f, header)
        return
    if header:
        for line in header.rstrip("\n").split("\n"):
            target.write(f"# {line}\n")
    for v in graph.vertices:
        target.write(" ".join(["VERTEX", str(v.id)] + _pose_tokens(v.pose)) + "\n")
    target.write(f"FIX {graph.anchor}\n")
    for e in graph.edges:
        target.write(
            " ".join(
                ["EDGE", str(e.i), str(e.j)]
                + _pose_tokens(e.relative)
                + [str(int(e.inlier_count)), _fmt(e.weight), _fmt(e.overlap_score)]
            )
            + "\n"
        )
        c = e.correspondences
        for k in range(len(c)):
            tokens = ["CORR", str(e.i), str(e.j)] + [_fmt(x) for x in c.points_i[k]] + [_fmt(x) for x in c.points_j[k]]
            if c.truth_labels is not None:
                tokens.append("1" if c.truth_labels[k] else "0")
            target.write(" ".join(tokens) + "\n")


def _floats(tokens: Sequence[str], lineno: int) -> List[float]:
    try:
        return [float(t) for t in tokens]
    except ValueError:
        raise GraphFormatError(f"line {lineno}: expected numbers, got {' '.join(tokens)}")


def _int(token: str, lineno: int) -> int:
    try:
        return int(token)
    except ValueError:
        raise GraphFormatError(f"line {lineno}: expected an integer, got {token!r}")


def _transform_from(values: Sequence[float]) -> RigidTransform:
    return RigidTransform(np.array(values[3:12]).reshape(3, 3), np.array(values[0:3]))


def parse_graph(text: str) -> PoseGraph:
    vertices: Dict[int, RigidTransform] = {}
    fixed: Optional[int] = None
    edges: List[dict] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        tag = tok[0]
        if tag == "VERTEX":
            if len(tok) != 14:
                raise GraphFormatError(f"line {lineno}: VERTEX needs 13 fields, got {len(tok) - 1}")
            vid = _int(tok[1], lineno)
            if vid in vertices:
                raise GraphFormatError(f"line {lineno}: duplicate VERTEX {vid}")
            vertices[vid] = _transform_from(_floats(tok[2:], lineno))
        elif tag == "FIX":
            if len(tok) != 2:
                raise GraphFormatError(f"line {lineno}: FIX takes one vertex id")
            fixed = _int(tok[1], lineno)
        elif tag == "EDGE":
            if len(tok) != 18:
                raise GraphFormatError(f"line {lineno}: EDGE needs 17 fields, got {len(tok) - 1}")
            vals = _floats(tok[3:15], lineno)
            weight, overlap = _floats(tok[16:18], lineno)
            edges.append(
                {
                    "i": _int(tok[1], lineno),
                    "j": _int(tok[2], lineno),
                    "relative": _transform_from(vals),
                    "inlier_count": _int(tok[15], lineno),
                    "weight": weight,
                    "overlap_score": overlap,
                    "pi": [],
                    "pj": [],
                    "labels": [],
                }
            )
        elif tag == "CORR":
            if len(tok) not in (9, 10):
                raise GraphFormatError(f"line {lineno}: CORR needs 8 or 9 fields, got {len(tok) - 1}")
            if not edges or (edges[-1]["i"], edges[-1]["j"]) != (_int(tok[1], lineno), _int(tok[2], lineno)):
                raise GraphFormatError(f"line {lineno}: CORR {tok[1]} {tok[2]} does not follow its EDGE")
            vals = _floats(tok[3:9], lineno)
            if len(tok) == 10 and tok[9] not in ("0", "1"):
                raise GraphFormatError(f"line {lineno}: CORR label must be 0 or 1, got {tok[9]!r}")
            edges[-1]["pi"].append(vals[0:3])
            edges[-1]["pj"].append(vals[3:6])
            edges[-1]["labels"].append(tok[9] if len(tok) == 10 else None)
        else:
            raise GraphFormatError(f"line {lineno}: unknown record '{tag}'")

    n = len(vertices)
    if sorted(vertices) != list(range(n)):
        raise GraphFormatError(f"vertex ids must be dense 0..{n - 1}, got {sorted(vertices)}")
    anchor = 0 if fixed is None else fixed
    if n and not 0 <= anchor < n:
        raise GraphFormatError(f"FIX references missing vertex {anchor}")
    built_edges = []
    for e in edges:
        labels = e["labels"]
        if labels and any(l is None for l in labels) and not all(l is None for l in labels):
            raise GraphFormatError(f"edge ({e['i']}, {e['j']}) mixes labelled and unlabelled CORR records")
        truth = None if not labels or labels[0] is None else [l == "1" for l in labels]
        corr = CorrespondenceSet(np.array(e["pi"]).reshape(-1, 3), np.array(e["pj"]).reshape(-1, 3), truth)
        built_edges.append(
            Edge(e["i"], e["j"], e["relative"], corr, e["inlier_count"], e["weight"], e["overlap_score"])
        )
    verts = tuple(Vertex(v, vertices[v], v == anchor) for v in range(n))
    return PoseGraph(verts, tuple(built_edges))


def read_graph(source: Union[str, TextIO]) -> PoseGraph:
    if isinstance(source, str):
        with open(source, "r") as f:
            return parse_graph(f.read())
    return parse_graph(source.read())
