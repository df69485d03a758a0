import numpy as np
import pytest

from stages.pipeline import (
    OutputConfig,
    PipelineConfig,
    load_pipeline_config,
    parse_mask,
    run_ablation,
    run_pipeline,
    run_scaling_bench,
)
from tools.config import build_model
from tools.errors import STATUS_CONVERGED, STATUS_OK, InvalidParameter, StageError
from tools.pose_graph import read_graph, write_graph

TINY_SCENE = dict(
    n_clouds=4,
    points_per_cloud=120,
    correspondences_per_pair=40,
    noise_sigma=0.0,
    outlier_ratio=0.0,
    corrupted_edge_ratio=0.0,
)


def _tiny(**kw) -> PipelineConfig:
    scene = dict(TINY_SCENE, **kw.pop("scene", {}))
    return build_model(PipelineConfig, {"scene": scene, "ransac": {"max_iterations": 100}}, **kw)


def test_thresholds_follow_eps_unless_set():
    cfg = PipelineConfig(eps=0.1)
    assert cfg.ransac.inlier_threshold == 0.1
    assert cfg.overlap.radius == 0.1
    assert cfg.position.loss_scale == 0.1
    assert cfg.position.truncation == pytest.approx(0.3)
    assert cfg.refine.gamma == pytest.approx(0.3)

    explicit = PipelineConfig(eps=0.1, refine={"gamma": 0.5}, use_edge_weights=False)
    assert explicit.refine.gamma == 0.5
    assert not explicit.rotation.use_edge_weights and not explicit.position.use_edge_weights


def test_default_config_file_loads_with_overrides():
    cfg = load_pipeline_config(overrides={"eps": 0.2, "scene": {"n_clouds": 4}, "seed": None})
    assert cfg.eps == 0.2
    assert cfg.seed == 0
    assert cfg.scene.n_clouds == 4
    assert cfg.scene.points_per_cloud == 500
    assert cfg.ransac.inlier_threshold == 0.2


def test_unknown_config_keys_are_rejected(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("eps: 0.05\nscene:\n  clouds: 3\n")
    with pytest.raises(InvalidParameter):
        load_pipeline_config(str(path))


def test_stage_masks():
    assert parse_mask("ta+r") == ("R", "TA")
    assert PipelineConfig().with_stages("D+R").stages.mask == "R+D"
    for bad in ("", "R+X", "+"):
        with pytest.raises(InvalidParameter):
            parse_mask(bad)


def test_noiseless_scene_is_recovered():
    clean = {"scene": {"noise_sigma": 0.0, "outlier_ratio": 0.0, "corrupted_edge_ratio": 0.0}}
    result = run_pipeline(build_model(PipelineConfig, clean), write_outputs=False)
    report = result.report
    assert result.scene.graph.num_vertices == 10
    assert report.mean_re < 1e-6
    assert report.mean_te < 1e-8
    assert report.recall == 1.0
    assert [s.name for s in result.stages] == [
        "scene", "pairwise", "build_graph", "rotation_averaging", "translation_consensus",
        "position_averaging", "joint_refinement", "metrics",
    ]
    assert report.statuses["rotation_averaging"] == STATUS_CONVERGED
    assert report.statuses["translation_consensus"] == STATUS_OK


def test_disabled_stages_are_skipped():
    result = run_pipeline(_tiny().with_stages("TA"), write_outputs=False)
    names = [s.name for s in result.stages]
    assert "position_averaging" in names
    assert "rotation_averaging" not in names and "joint_refinement" not in names
    assert result.report.mean_re < 1e-6


def test_results_do_not_depend_on_thread_count():
    noisy = {"noise_sigma": 0.005, "outlier_ratio": 0.3}
    a = run_pipeline(_tiny(scene=noisy, threads=1), write_outputs=False)
    b = run_pipeline(_tiny(scene=noisy, threads=3), write_outputs=False)
    for x, y in zip(a.poses, b.poses):
        assert np.array_equal(x.rotation, y.rotation)
        assert np.array_equal(x.translation, y.translation)


def test_outputs_are_reproducible(tmp_path):
    files = []
    for run in ("a", "b"):
        out = tmp_path / run
        out.mkdir()
        output = OutputConfig(
            graph=str(out / "est.graph"), report_csv=str(out / "report.csv"), report_json=str(out / "report.json")
        )
        run_pipeline(_tiny(seed=5).model_copy(update={"output": output}))
        files.append([(out / name).read_bytes() for name in ("est.graph", "report.csv", "report.json")])
    assert files[0] == files[1]
    assert files[0][0].startswith(b"# ")


def test_graph_input_with_truth(tmp_path):
    first = run_pipeline(_tiny(), write_outputs=False)
    est_path, truth_path = tmp_path / "est.graph", tmp_path / "truth.graph"
    write_graph(first.graph, str(est_path))
    write_graph(first.scene.graph, str(truth_path))

    result = run_pipeline(_tiny(input={"synthetic": False, "graph": str(est_path), "truth": str(truth_path)}),
                          write_outputs=False)
    assert result.scene is None
    assert result.stages[0].name == "input"
    assert result.report.mean_te < 1e-6
    assert read_graph(str(truth_path)).num_vertices == result.graph.num_vertices


def test_module_errors_carry_the_stage_name(tmp_path):
    path = tmp_path / "broken.graph"
    path.write_text("VERTEX 0 oops\n")
    with pytest.raises(StageError) as info:
        run_pipeline(_tiny(input={"graph": str(path)}), write_outputs=False)
    assert info.value.stage == "input"


def test_ablation_drops_duplicate_masks(caplog):
    with caplog.at_level("WARNING"):
        table = run_ablation(_tiny(), ["TA", "ta", "R+TA"])
    assert [r.mask for r in table.rows] == ["TA", "R+TA"]
    assert "duplicate" in caplog.text
    assert table.row("TA+R").mean_re < 1e-6
    assert table.to_csv().splitlines()[0] == "mask,seeds,mean_re_deg,mean_te"


def test_ablation_needs_two_masks_and_synthetic_input():
    with pytest.raises(InvalidParameter):
        run_ablation(_tiny(), ["R+TA", "TA+R"])
    with pytest.raises(InvalidParameter):
        run_ablation(_tiny(input={"graph": "x.graph"}), ["TA", "R+TA"])


def test_scaling_bench_rows():
    bench = run_scaling_bench(PipelineConfig(eps=0.05), [50, 100], repeats=1)
    assert [r.n for r in bench.rows] == [50, 100]
    for r in bench.rows:
        assert r.proposed_inliers >= r.exhaustive_inliers
    assert bench.to_csv().count("\n") == 3


@pytest.mark.parametrize("counts", [[], [100, 50], [0, 10]])
def test_scaling_bench_rejects_bad_counts(counts):
    with pytest.raises(InvalidParameter):
        run_scaling_bench(PipelineConfig(), counts, repeats=1)


ABLATION_MASKS = ["TA", "R+TA", "R+TR+TA", "R+TA+D", "R+TR+TA+D"]


@pytest.fixture(scope="module")
def benchmark_ablation():
    return run_ablation(PipelineConfig(), ABLATION_MASKS, seeds=range(20))


@pytest.mark.slow
def test_full_pipeline_is_no_worse_than_any_ablation(benchmark_ablation):
    full = benchmark_ablation.row("R+TR+TA+D")
    for mask in ("TA", "R+TA", "R+TR+TA"):
        row = benchmark_ablation.row(mask)
        assert full.mean_re <= row.mean_re
        assert full.mean_te <= row.mean_te


@pytest.mark.slow
def test_consensus_lowers_translation_error(benchmark_ablation):
    assert benchmark_ablation.row("R+TR+TA").mean_te < benchmark_ablation.row("R+TA").mean_te
    # refinement pulls both toward the same optimum once inlier sets agree
    assert benchmark_ablation.row("R+TR+TA+D").mean_te <= 1.1 * benchmark_ablation.row("R+TA+D").mean_te


@pytest.mark.slow
def test_branch_and_bound_runtime_grows_linearly():
    bench = run_scaling_bench(PipelineConfig(eps=0.05), [1000, 2000, 4000, 8000], repeats=5)
    assert bench.r_squared >= 0.95
    first, last = bench.rows[0], bench.rows[-1]
    assert last.exhaustive_seconds >= 2 * (last.n / first.n) * first.exhaustive_seconds
    for r in bench.rows:
        assert r.proposed_inliers >= r.exhaustive_inliers
