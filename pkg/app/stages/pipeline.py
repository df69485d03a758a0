"""
Pipeline - Wires the stages in their fixed order and runs the experiments.

front-end (pairwise RANSAC) -> build_graph -> rotation averaging (R)
-> translation re-estimation (TR) -> position averaging (TA)
-> joint refinement (D) -> metrics

Each stage runs once. Module errors surface as StageError carrying the stage
name; convergence problems are recorded as stage statuses and never abort.
"""

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from tools.config import StageConfig, build_model, dump_config, load_config, merge_overrides
from tools.errors import STATUS_OK, InvalidParameter, MosaicError, StageError
from tools.geometry import RigidTransform, relative_from_point_map
from tools.parallel import ordered_map
from tools.pose_graph import PairwiseResult, PoseGraph, build_graph, read_graph, spanning_tree_poses, write_graph
from stages.joint_refinement import RefineConfig, refine_poses
from stages.metrics_eval import EvalReport, MetricsConfig, multiway_metrics
from stages.pairwise_frontend import (
    OverlapConfig,
    RansacConfig,
    SceneBundle,
    estimate_pairwise,
    generate_scene,
    overlap_score,
)
from stages.position_averaging import PosAvgConfig, average_positions
from stages.rotation_averaging import RotAvgConfig, average_rotations
from stages.translation_consensus import (
    ConsensusConfig,
    exhaustive_candidate_oracle,
    make_sphere_instance,
    max_consensus_translation,
    reestimate_all_edges,
)

logger = logging.getLogger(__name__)

STAGE_CODES = ("R", "TR", "TA", "D")
DEFAULT_EPS = 0.05


class SceneConfig(StageConfig):
    n_clouds: int = Field(10, ge=2)
    points_per_cloud: int = Field(500, ge=3)
    overlap_fraction: float = Field(0.7, gt=0, le=1)
    noise_sigma: float = Field(0.01, ge=0)
    outlier_ratio: float = Field(0.4, ge=0, lt=1)
    correspondences_per_pair: int = Field(200, ge=1)
    neighbor_span: int = Field(2, ge=1)
    corrupted_edge_ratio: float = Field(0.2, ge=0, le=1)


class StageToggles(StageConfig):
    rotation: bool = True
    consensus: bool = True
    position: bool = True
    refinement: bool = True

    @property
    def mask(self) -> str:
        on = [self.rotation, self.consensus, self.position, self.refinement]
        return "+".join(code for code, flag in zip(STAGE_CODES, on) if flag) or "none"


class InputConfig(StageConfig):
    synthetic: bool = True
    graph: Optional[str] = None
    truth: Optional[str] = None


class OutputConfig(StageConfig):
    graph: Optional[str] = None
    report_csv: Optional[str] = None
    report_json: Optional[str] = None
    include_timings: bool = False


class LoggingConfig(StageConfig):
    level: Literal["DEBUG", "INFO", "WARNING", "ERROR"] = "INFO"


class PipelineConfig(StageConfig):
    eps: float = Field(DEFAULT_EPS, gt=0)
    seed: int = 0
    threads: int = Field(1, ge=1)
    use_edge_weights: bool = True
    stages: StageToggles = Field(default_factory=StageToggles)
    scene: SceneConfig = Field(default_factory=SceneConfig)
    ransac: RansacConfig = Field(default_factory=RansacConfig)
    overlap: OverlapConfig = Field(default_factory=OverlapConfig)
    rotation: RotAvgConfig = Field(default_factory=RotAvgConfig)
    consensus: ConsensusConfig = Field(default_factory=ConsensusConfig)
    position: PosAvgConfig = Field(default_factory=PosAvgConfig)
    refine: RefineConfig = Field(default_factory=RefineConfig)
    metrics: MetricsConfig = Field(default_factory=MetricsConfig)
    input: InputConfig = Field(default_factory=InputConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)
    logging: LoggingConfig = Field(default_factory=LoggingConfig)

    @model_validator(mode="before")
    @classmethod
    def _derive_from_eps(cls, data: Any) -> Any:
        """Unset thresholds follow eps: RANSAC/overlap/loss scale = eps, truncation/gamma = 3 eps"""
        if not isinstance(data, dict):
            return data
        data = dict(data)
        eps = data.get("eps", DEFAULT_EPS)
        if isinstance(eps, bool) or not isinstance(eps, (int, float)):
            return data
        weights = data.get("use_edge_weights", True)
        derived = {
            "ransac": {"inlier_threshold": eps},
            "overlap": {"radius": eps},
            "rotation": {"use_edge_weights": weights},
            "position": {"loss_scale": eps, "truncation": 3 * eps, "use_edge_weights": weights},
            "refine": {"gamma": 3 * eps},
        }
        for section, defaults in derived.items():
            raw = data.get(section) or {}
            if isinstance(raw, BaseModel):
                continue
            data[section] = {**defaults, **raw}
        return data

    def provenance(self) -> str:
        """Effective configuration without thread count, output paths and log level"""
        return dump_config(self.model_dump(mode="json", exclude={"threads", "output", "logging"}))

    def with_stages(self, mask: str) -> "PipelineConfig":
        codes = parse_mask(mask)
        toggles = StageToggles(
            rotation="R" in codes, consensus="TR" in codes, position="TA" in codes, refinement="D" in codes
        )
        return self.model_copy(update={"stages": toggles})


def load_pipeline_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> PipelineConfig:
    """YAML file (default app/mosaic.yaml) + CLI overrides -> validated PipelineConfig"""
    data = merge_overrides(load_config(path), overrides or {})
    return build_model(PipelineConfig, data)


@dataclass
class StageReport:
    name: str
    status: str
    elapsed: float
    details: Dict[str, Any] = field(default_factory=dict)


@dataclass
class PipelineResult:
    graph: PoseGraph
    stages: List[StageReport]
    report: Optional[EvalReport] = None
    scene: Optional[SceneBundle] = None

    @property
    def poses(self) -> List[RigidTransform]:
        return self.graph.poses()


def _run_stage(name: str, reports: List[StageReport], fn: Callable[[], Tuple[Any, str, Dict[str, Any]]]):
    logger.info("=== stage %s ===", name)
    start = time.perf_counter()
    try:
        value, status, details = fn()
    except StageError:
        raise
    except MosaicError as e:
        logger.error("stage %s failed: %s", name, e)
        raise StageError(name, e) from e
    elapsed = time.perf_counter() - start
    reports.append(StageReport(name, status, elapsed, details))
    logger.info("stage %s: %s in %.3fs %s", name, status, elapsed, details or "")
    return value


# ---------------------------------------------------------------- front-end

def scene_from_config(config: PipelineConfig) -> SceneBundle:
    s = config.scene
    return generate_scene(
        s.n_clouds,
        s.points_per_cloud,
        s.overlap_fraction,
        s.noise_sigma,
        s.outlier_ratio,
        config.seed,
        correspondences_per_pair=s.correspondences_per_pair,
        neighbor_span=s.neighbor_span,
        corrupted_edge_ratio=s.corrupted_edge_ratio,
    )


def estimate_scene_pairs(scene: SceneBundle, config: PipelineConfig) -> List[PairwiseResult]:
    """RANSAC every pair of the scene; pair k uses seed ransac.rng_seed + seed + k"""
    jobs = list(enumerate(scene.pairs))

    def estimate(job) -> PairwiseResult:
        k, (i, j) = job
        corr = scene.correspondences[(i, j)]
        cfg = config.ransac.model_copy(update={"rng_seed": config.ransac.rng_seed + config.seed + k})
        point_map, inliers = estimate_pairwise(corr, cfg)
        score = overlap_score(scene.clouds[i], scene.clouds[j], point_map, config.overlap)
        return PairwiseResult(i, j, relative_from_point_map(point_map), corr, len(inliers), score, tuple(inliers))

    return ordered_map(estimate, jobs, config.threads)


def reestimate_graph_pairs(graph: PoseGraph, config: PipelineConfig) -> List[PairwiseResult]:
    """RANSAC the correspondences stored on an input graph's edges"""
    jobs = list(enumerate(graph.edges))

    def estimate(job) -> PairwiseResult:
        k, e = job
        cfg = config.ransac.model_copy(update={"rng_seed": config.ransac.rng_seed + config.seed + k})
        point_map, inliers = estimate_pairwise(e.correspondences, cfg)
        return PairwiseResult(
            e.i, e.j, relative_from_point_map(point_map), e.correspondences, len(inliers), e.overlap_score, tuple(inliers)
        )

    return ordered_map(estimate, jobs, config.threads)


# ---------------------------------------------------------------- pipeline

def run_pipeline(config: PipelineConfig, write_outputs: bool = True) -> PipelineResult:
    """Run every enabled stage once, in order; evaluate against truth when it is known"""
    reports: List[StageReport] = []
    scene: Optional[SceneBundle] = None
    truth: Optional[List[RigidTransform]] = None

    if config.input.graph:
        source = _run_stage("input", reports, lambda: (read_graph(config.input.graph), STATUS_OK, {}))
        if all(len(e.correspondences) >= 3 for e in source.edges):
            pairwise = _run_stage(
                "pairwise", reports, lambda: (reestimate_graph_pairs(source, config), STATUS_OK, {"pairs": len(source.edges)})
            )
            graph = _run_stage("build_graph", reports, lambda: (build_graph(pairwise), STATUS_OK, {}))
        else:
            logger.warning("input graph edges lack correspondences; using the stored relatives")
            graph = source
        if config.input.truth:
            truth = read_graph(config.input.truth).poses()
    elif config.input.synthetic:
        scene = _run_stage("scene", reports, lambda: (scene_from_config(config), STATUS_OK, {}))
        truth = scene.truth_poses
        pairwise = _run_stage(
            "pairwise", reports, lambda: (estimate_scene_pairs(scene, config), STATUS_OK, {"pairs": len(scene.pairs)})
        )
        graph = _run_stage("build_graph", reports, lambda: (build_graph(pairwise), STATUS_OK, {}))
    else:
        raise InvalidParameter("no input: enable input.synthetic or set input.graph")

    toggles = config.stages
    if toggles.rotation:
        rot = _run_stage(
            "rotation_averaging",
            reports,
            lambda: _with_status(average_rotations(graph, config.rotation), {}),
        )
        rotations = rot.rotations
    else:
        rotations = [p.rotation for p in spanning_tree_poses(graph)]

    if toggles.consensus:
        consensus = _run_stage(
            "translation_consensus",
            reports,
            lambda: _consensus_stage(graph, rotations, config),
        )
        graph = consensus.graph

    if toggles.position:
        pos = _run_stage(
            "position_averaging",
            reports,
            lambda: _with_status(average_positions(graph, rotations, config.position), {}),
        )
        positions = pos.positions
    else:
        positions = np.array([p.translation for p in spanning_tree_poses(graph, rotations)])
    poses = [RigidTransform(r, t) for r, t in zip(rotations, positions)]

    if toggles.refinement:
        ref = _run_stage(
            "joint_refinement",
            reports,
            lambda: _with_status(refine_poses(graph, poses, config.refine, config.threads), {}),
        )
        poses = ref.poses

    final = graph.with_poses(poses)
    report = None
    if truth is not None:
        if len(truth) != final.num_vertices:
            raise StageError("metrics", InvalidParameter(f"truth has {len(truth)} poses, graph {final.num_vertices}"))
        report = _run_stage(
            "metrics",
            reports,
            lambda: (multiway_metrics(poses, truth, config.metrics, [e.key for e in final.edges]), STATUS_OK, {}),
        )
        report.statuses = {r.name: r.status for r in reports}
        report.runtimes = {r.name: r.elapsed for r in reports}
        logger.info("mean RE %.6f deg, mean TE %.6f m, RR %s", report.mean_re, report.mean_te, report.recall)

    result = PipelineResult(final, reports, report, scene)
    if write_outputs:
        write_outputs_for(result, config)
    return result


def _with_status(result, details: Dict[str, Any]):
    return result, result.status, details


def _consensus_stage(graph: PoseGraph, rotations, config: PipelineConfig):
    out = reestimate_all_edges(graph, rotations, config.eps, config.consensus, threads=config.threads)
    flagged = out.flags
    status = STATUS_OK if not flagged else flagged[0].status
    return out, status, {"flagged_edges": len(flagged)}


def write_outputs_for(result: PipelineResult, config: PipelineConfig):
    out = config.output
    if out.graph:
        write_graph(result.graph, out.graph, header=config.provenance())
        logger.info("wrote pose graph to %s", out.graph)
    if result.report is not None and out.report_csv:
        with open(out.report_csv, "w", newline="") as f:
            f.write(result.report.to_csv())
    if result.report is not None and out.report_json:
        with open(out.report_json, "w") as f:
            f.write(result.report.to_json(include_timings=out.include_timings))


# ---------------------------------------------------------------- ablation

def parse_mask(mask: str) -> Tuple[str, ...]:
    """'R+TR+TA' -> ('R', 'TR', 'TA'), canonical stage order"""
    codes = {c.strip().upper() for c in mask.split("+") if c.strip()}
    unknown = codes - set(STAGE_CODES)
    if unknown or not codes:
        raise InvalidParameter(f"invalid stage mask '{mask}'; use '+'-joined codes from {STAGE_CODES}")
    return tuple(c for c in STAGE_CODES if c in codes)


@dataclass
class AblationRow:
    mask: str
    re_deg: List[float]
    te: List[float]

    @property
    def mean_re(self) -> float:
        return float(np.mean(self.re_deg))

    @property
    def mean_te(self) -> float:
        return float(np.mean(self.te))


@dataclass
class AblationTable:
    seeds: List[int]
    rows: List[AblationRow]

    def row(self, mask: str) -> AblationRow:
        key = "+".join(parse_mask(mask))
        for r in self.rows:
            if r.mask == key:
                return r
        raise KeyError(mask)

    def to_table(self) -> str:
        lines = [f"{'configuration':<16}{'RE (deg)':>12}{'TE (m)':>12}"]
        for r in self.rows:
            lines.append(f"{r.mask:<16}{r.mean_re:>12.4f}{r.mean_te:>12.4f}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["mask", "seeds", "mean_re_deg", "mean_te"])
        for r in self.rows:
            writer.writerow([r.mask, len(self.seeds), f"{r.mean_re:.17g}", f"{r.mean_te:.17g}"])
        return buf.getvalue()


def run_ablation(config: PipelineConfig, masks: Sequence[str], seeds: Optional[Sequence[int]] = None) -> AblationTable:
    """Same scenes (one per seed) under each stage mask; mean RE/TE per mask"""
    if not config.input.synthetic or config.input.graph:
        raise InvalidParameter("ablation needs the synthetic input (ground truth)")
    canonical: List[str] = []
    for m in masks:
        key = "+".join(parse_mask(m))
        if key in canonical:
            logger.warning("duplicate ablation mask '%s' dropped", m)
            continue
        canonical.append(key)
    if len(canonical) < 2:
        raise InvalidParameter(f"ablation needs at least 2 distinct masks, got {canonical}")
    seeds = list(seeds) if seeds else [config.seed]

    rows = [AblationRow(m, [], []) for m in canonical]
    for seed in seeds:
        for row in rows:
            cfg = config.with_stages(row.mask).model_copy(update={"seed": seed})
            result = run_pipeline(cfg, write_outputs=False)
            row.re_deg.append(result.report.mean_re)
            row.te.append(result.report.mean_te)
            logger.info("ablation %s seed %d: RE %.4f TE %.4f", row.mask, seed, row.re_deg[-1], row.te[-1])
    return AblationTable(seeds, rows)


# ---------------------------------------------------------------- scaling

@dataclass(frozen=True)
class ScalingRow:
    n: int
    proposed_seconds: float
    exhaustive_seconds: float
    proposed_inliers: int
    exhaustive_inliers: int


@dataclass
class ScalingBench:
    rows: List[ScalingRow]

    @property
    def r_squared(self) -> float:
        """Linear-fit R^2 of the proposed solver's runtime against n"""
        n = np.array([r.n for r in self.rows], dtype=float)
        t = np.array([r.proposed_seconds for r in self.rows])
        if len(n) < 3:
            return 1.0
        slope, intercept = np.polyfit(n, t, 1)
        ss_res = float(np.sum((t - (slope * n + intercept)) ** 2))
        ss_tot = float(np.sum((t - t.mean()) ** 2))
        return 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["n", "proposed_seconds", "exhaustive_seconds", "proposed_inliers", "exhaustive_inliers"])
        for r in self.rows:
            writer.writerow(
                [r.n, f"{r.proposed_seconds:.6f}", f"{r.exhaustive_seconds:.6f}", r.proposed_inliers, r.exhaustive_inliers]
            )
        return buf.getvalue()


def _median_time(fn: Callable[[], Any], repeats: int) -> Tuple[float, Any]:
    times, value = [], None
    for _ in range(repeats):
        start = time.perf_counter()
        value = fn()
        times.append(time.perf_counter() - start)
    return float(np.median(times)), value


def run_scaling_bench(
    config: PipelineConfig, candidate_counts: Sequence[int], repeats: int = 5, inlier_fraction: float = 0.5
) -> ScalingBench:
    """Median runtime of branch-and-bound vs the exhaustive oracle per candidate count"""
    counts = [int(c) for c in candidate_counts]
    if not counts:
        raise InvalidParameter("scaling bench needs at least one candidate count")
    if any(c < 1 for c in counts) or counts != sorted(counts):
        raise InvalidParameter(f"candidate counts must be positive and ascending, got {counts}")
    if repeats < 1:
        raise InvalidParameter(f"repeats must be >= 1, got {repeats}")

    rows = []
    for n in counts:
        spheres, _ = make_sphere_instance(n, config.eps, inlier_fraction, np.random.default_rng([config.seed, n]))
        t_bnb, bnb = _median_time(lambda: max_consensus_translation(spheres, config.consensus), repeats)
        t_exh, exh = _median_time(lambda: exhaustive_candidate_oracle(spheres), repeats)
        rows.append(ScalingRow(n, t_bnb, t_exh, bnb.inlier_count, exh.inlier_count))
        logger.info("n=%d: proposed %.4fs (%d inliers), exhaustive %.4fs (%d inliers)",
                    n, t_bnb, bnb.inlier_count, t_exh, exh.inlier_count)
    return ScalingBench(rows)
