import json

import pytest
from click.testing import CliRunner

from main import cli
from tools.ply_io import read_ply
from tools.pose_graph import read_graph

TINY_CONFIG = """\
eps: 0.05
seed: 3
scene:
  n_clouds: 4
  points_per_cloud: 120
  correspondences_per_pair: 40
  noise_sigma: 0.005
  outlier_ratio: 0.3
  corrupted_edge_ratio: 0.0
ransac:
  max_iterations: 100
"""


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(TINY_CONFIG)
    return str(path)


@pytest.fixture
def invoke(config_file):
    runner = CliRunner()

    def _invoke(*args, threads=None):
        head = ["--config", config_file]
        if threads is not None:
            head += ["--threads", str(threads)]
        return runner.invoke(cli, head + list(args))

    return _invoke


def _run_outputs(invoke, out_dir, threads):
    out_dir.mkdir()
    paths = [out_dir / "est.graph", out_dir / "report.csv", out_dir / "report.json"]
    result = invoke("run", "--out", str(paths[0]), "--csv", str(paths[1]), "--json", str(paths[2]), threads=threads)
    assert result.exit_code == 0, result.output
    return [p.read_bytes() for p in paths]


def test_run_outputs_are_identical_across_runs_and_threads(invoke, tmp_path):
    first = _run_outputs(invoke, tmp_path / "a", threads=1)
    again = _run_outputs(invoke, tmp_path / "b", threads=1)
    threaded = _run_outputs(invoke, tmp_path / "c", threads=2)
    assert first == again == threaded
    assert "runtimes" not in json.loads(first[2])


def test_run_prints_json_to_stdout(invoke):
    result = invoke("run", "--json", "-", "--disable-refinement")
    assert result.exit_code == 0, result.output
    data = json.loads(result.stdout)
    assert data["recall_defined"] is True
    assert "joint_refinement" not in data["statuses"]


def test_run_with_timings(invoke, tmp_path):
    path = tmp_path / "report.json"
    result = invoke("run", "--json", str(path), "--timings", "--no-edge-weights")
    assert result.exit_code == 0, result.output
    assert "scene" in json.loads(path.read_text())["runtimes"]
    assert "RR:" in result.stdout


def test_run_rejects_synthetic_with_graph(invoke, tmp_path):
    graph = tmp_path / "g.graph"
    graph.write_text("")
    assert invoke("run", "--synthetic", "--graph", str(graph)).exit_code == 2


def test_generate_then_eval(invoke, tmp_path):
    scene_dir = tmp_path / "scene"
    result = invoke("generate", "--out-dir", str(scene_dir))
    assert result.exit_code == 0, result.output
    assert read_ply(str(scene_dir / "cloud_003.ply")).shape == (120, 3)
    truth = scene_dir / "truth.graph"
    assert read_graph(str(truth)).num_vertices == 4

    est = tmp_path / "est.graph"
    assert invoke("run", "--out", str(est)).exit_code == 0
    result = invoke("eval", str(est), str(truth))
    assert result.exit_code == 0, result.output
    assert "RR:" in result.stdout

    result = invoke("eval", str(est), str(truth), "--json")
    assert json.loads(result.stdout)["summary"]["mean_te"] < 0.3


def test_eval_of_a_malformed_graph_exits_1(invoke, tmp_path):
    bad = tmp_path / "bad.graph"
    bad.write_text("VERTEX 0 1 2\n")
    assert invoke("eval", str(bad), str(bad)).exit_code == 1


def test_pairwise_writes_a_graph(invoke, tmp_path):
    out = tmp_path / "pairs.graph"
    result = invoke("pairwise", "--out", str(out))
    assert result.exit_code == 0, result.output
    graph = read_graph(str(out))
    assert graph.num_vertices == 4
    assert all(len(e.correspondences) == 40 for e in graph.edges)


def test_consensus_command(invoke, tmp_path):
    cells = tmp_path / "cells.csv"
    result = invoke("consensus", "--n", "200", "--oracle", "--dump-cells", str(cells))
    assert result.exit_code == 0, result.output
    lines = result.stdout.splitlines()
    assert lines[0].startswith("translation ") and " inliers " in lines[0]
    proposed = int(lines[0].split(" inliers ")[1].split()[0])
    oracle = int(lines[1].split()[-1])
    assert proposed >= oracle
    assert cells.read_text().splitlines()[0] == "zoom_level,cells,max_count"


def test_scale_bench(invoke):
    result = invoke("scale-bench", "--count", "20", "--count", "40", "--repeats", "1")
    assert result.exit_code == 0, result.output
    assert result.stdout.splitlines()[0].startswith("n,proposed_seconds")


@pytest.mark.parametrize("args", [[], ["--count", "40", "--count", "20"]])
def test_scale_bench_usage_errors(invoke, args):
    assert invoke("scale-bench", *args).exit_code == 2


def test_ablate(invoke, tmp_path):
    out = tmp_path / "ablation.csv"
    result = invoke("ablate", "--mask", "TA", "--mask", "R+TA", "--csv", str(out))
    assert result.exit_code == 0, result.output
    assert "R+TA" in result.stdout
    assert len(out.read_text().splitlines()) == 3
