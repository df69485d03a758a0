"""
Metrics - Pairwise (RRE/RTE), multiway (RE/TE) and registration recall, plus
the report renderings (table, CSV, JSON).
"""

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import Field

from tools.config import StageConfig
from tools.errors import LengthMismatch
from tools.geometry import RigidTransform, relative_from_global, rotation_geodesic_angle
from stages.position_averaging import align_positions_to_truth
from stages.rotation_averaging import align_rotations_to_truth


class MetricsConfig(StageConfig):
    rre_success_threshold: float = Field(15.0, gt=0)
    rte_success_threshold: float = Field(0.3, gt=0)


@dataclass(frozen=True)
class PairError:
    i: int
    j: int
    rre_deg: float
    rte: float
    success: bool


@dataclass
class EvalReport:
    pair_errors: List[PairError]
    vertex_re_deg: np.ndarray
    vertex_te: np.ndarray
    rre_threshold_deg: float
    rte_threshold: float
    runtimes: Dict[str, float] = field(default_factory=dict)
    statuses: Dict[str, str] = field(default_factory=dict)

    @property
    def recall(self) -> Optional[float]:
        """Fraction of successful pairs; None when there are no pairs"""
        if not self.pair_errors:
            return None
        return sum(p.success for p in self.pair_errors) / len(self.pair_errors)

    @property
    def mean_re(self) -> float:
        return _mean(self.vertex_re_deg)

    @property
    def median_re(self) -> float:
        return _median(self.vertex_re_deg)

    @property
    def mean_te(self) -> float:
        return _mean(self.vertex_te)

    @property
    def median_te(self) -> float:
        return _median(self.vertex_te)

    @property
    def mean_rre(self) -> float:
        return _mean([p.rre_deg for p in self.pair_errors])

    @property
    def mean_rte(self) -> float:
        return _mean([p.rte for p in self.pair_errors])

    def summary(self) -> Dict[str, Optional[float]]:
        return {
            "mean_re_deg": self.mean_re,
            "median_re_deg": self.median_re,
            "mean_te": self.mean_te,
            "median_te": self.median_te,
            "mean_rre_deg": self.mean_rre,
            "mean_rte": self.mean_rte,
            "recall": self.recall,
        }

    def to_dict(self, include_timings: bool = False) -> dict:
        out = {
            "thresholds": {"rre_deg": self.rre_threshold_deg, "rte": self.rte_threshold},
            "summary": self.summary(),
            "recall_defined": self.recall is not None,
            "vertices": [
                {"id": k, "re_deg": float(re), "te": float(te)}
                for k, (re, te) in enumerate(zip(self.vertex_re_deg, self.vertex_te))
            ],
            "pairs": [
                {"i": p.i, "j": p.j, "rre_deg": p.rre_deg, "rte": p.rte, "success": p.success}
                for p in self.pair_errors
            ],
            "statuses": dict(self.statuses),
        }
        if include_timings:
            out["runtimes"] = dict(self.runtimes)
        return out

    def to_json(self, include_timings: bool = False) -> str:
        return json.dumps(self.to_dict(include_timings), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        """One row per pair and per vertex"""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["kind", "i", "j", "rotation_error_deg", "translation_error", "success"])
        for p in self.pair_errors:
            writer.writerow(["pair", p.i, p.j, _num(p.rre_deg), _num(p.rte), int(p.success)])
        for k, (re, te) in enumerate(zip(self.vertex_re_deg, self.vertex_te)):
            writer.writerow(["vertex", k, "", _num(re), _num(te), ""])
        return buf.getvalue()

    def to_table(self) -> str:
        rr = "undefined (no pairs)" if self.recall is None else f"{self.recall:.4f}"
        lines = [
            f"thresholds: RRE < {self.rre_threshold_deg:g} deg, RTE < {self.rte_threshold:g} m",
            f"{'metric':<16}{'mean':>14}{'median':>14}",
            f"{'RE (deg)':<16}{self.mean_re:>14.6f}{self.median_re:>14.6f}",
            f"{'TE (m)':<16}{self.mean_te:>14.6f}{self.median_te:>14.6f}",
            f"{'RRE (deg)':<16}{self.mean_rre:>14.6f}{_median([p.rre_deg for p in self.pair_errors]):>14.6f}",
            f"{'RTE (m)':<16}{self.mean_rte:>14.6f}{_median([p.rte for p in self.pair_errors]):>14.6f}",
            f"RR: {rr}",
        ]
        for stage, status in self.statuses.items():
            lines.append(f"  {stage}: {status}")
        return "\n".join(lines) + "\n"


def _mean(values) -> float:
    values = np.asarray(values, dtype=float)
    return float(values.mean()) if values.size else math.nan


def _median(values) -> float:
    values = np.asarray(values, dtype=float)
    return float(np.median(values)) if values.size else math.nan


def _num(x: float) -> str:
    return f"{float(x):.17g}"


def pairwise_metrics(estimated: RigidTransform, truth: RigidTransform) -> Tuple[float, float]:
    """(RRE in degrees, RTE in meters)"""
    rre = math.degrees(rotation_geodesic_angle(estimated.rotation, truth.rotation))
    rte = float(np.linalg.norm(estimated.translation - truth.translation))
    return rre, rte


def multiway_metrics(
    estimated: Sequence[RigidTransform],
    truth: Sequence[RigidTransform],
    cfg: Optional[MetricsConfig] = None,
    pairs: Sequence[Tuple[int, int]] = (),
) -> EvalReport:
    """Gauge-aligned per-vertex errors and recall over `pairs` (induced relatives vs truth relatives)"""
    cfg = cfg or MetricsConfig()
    if len(estimated) != len(truth):
        raise LengthMismatch(f"{len(estimated)} estimated vs {len(truth)} truth poses")

    rot = align_rotations_to_truth([p.rotation for p in estimated], [p.rotation for p in truth])
    pos = align_positions_to_truth(
        [p.translation for p in estimated], [p.translation for p in truth], rot.gauge
    )

    pair_errors = []
    for i, j in pairs:
        rre, rte = pairwise_metrics(
            relative_from_global(estimated[i], estimated[j]), relative_from_global(truth[i], truth[j])
        )
        ok = rre < cfg.rre_success_threshold and rte < cfg.rte_success_threshold
        pair_errors.append(PairError(int(i), int(j), rre, rte, ok))

    return EvalReport(
        pair_errors=pair_errors,
        vertex_re_deg=np.degrees(rot.errors),
        vertex_te=pos.errors,
        rre_threshold_deg=cfg.rre_success_threshold,
        rte_threshold=cfg.rte_success_threshold,
    )
