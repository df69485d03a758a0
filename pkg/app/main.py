"""
Mosaic CLI - multiway point-cloud registration from the command line.

Subcommands: generate, pairwise, consensus, run, ablate, scale-bench, eval.
Exit codes: 0 success (warnings allowed), 1 hard error, 2 usage error.
"""

import functools
import json
import logging
import os
import sys
from typing import Any, Dict, Optional

import click
import numpy as np

from tools.errors import MosaicError
from tools.parallel import set_threads
from tools.ply_io import write_ply
from tools.pose_graph import build_graph, read_graph, write_graph
from stages.metrics_eval import multiway_metrics
from stages.pipeline import (
    PipelineConfig,
    estimate_scene_pairs,
    load_pipeline_config,
    reestimate_graph_pairs,
    run_ablation,
    run_pipeline,
    run_scaling_bench,
    scene_from_config,
)
from stages.translation_consensus import (
    exhaustive_candidate_oracle,
    make_sphere_instance,
    max_consensus_translation,
)

logger = logging.getLogger("mosaic")

DEFAULT_MASKS = ("TA", "R+TA", "R+TR+TA", "R+TR+TA+D")


def _handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except MosaicError as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(1)

    return wrapper


def _config(ctx: click.Context, overrides: Dict[str, Any]) -> PipelineConfig:
    base = {"threads": ctx.obj.get("threads")}
    config = load_pipeline_config(ctx.obj.get("config"), {**base, **overrides})
    if not ctx.obj.get("verbose"):
        logging.getLogger().setLevel(config.logging.level)
    return config


def _write_text(path: str, text: str):
    if path == "-":
        click.echo(text, nl=False)
    else:
        with open(path, "w", newline="") as f:
            f.write(text)


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="YAML configuration file.")
@click.option("--threads", type=click.IntRange(min=1), default=None, help="Worker threads for parallel maps.")
@click.option("--verbose", is_flag=True, help="Debug logging on stderr.")
@click.pass_context
def cli(ctx: click.Context, config_path: Optional[str], threads: Optional[int], verbose: bool):
    """Multiway point-cloud registration."""
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    ctx.call_on_close(lambda: root.removeHandler(handler))

    if threads is not None:
        set_threads(threads)
    ctx.obj = {"config": config_path, "threads": threads, "verbose": verbose}


@cli.command()
@click.option("--out-dir", required=True, type=click.Path(file_okay=False), help="Directory for PLY clouds and truth graph.")
@click.option("--n", "n_clouds", type=click.IntRange(min=2), default=None, help="Number of clouds.")
@click.option("--points", type=click.IntRange(min=3), default=None, help="Points per cloud.")
@click.option("--noise", type=float, default=None, help="Gaussian noise sigma (m).")
@click.option("--outliers", type=float, default=None, help="Correspondence outlier ratio.")
@click.option("--corrupted", type=float, default=None, help="Fraction of fully corrupted edges.")
@click.option("--seed", type=int, default=None)
@click.pass_context
@_handle_errors
def generate(ctx, out_dir, n_clouds, points, noise, outliers, corrupted, seed):
    """Write a synthetic scene: one PLY per cloud plus the ground-truth graph."""
    scene_overrides = {
        "n_clouds": n_clouds,
        "points_per_cloud": points,
        "noise_sigma": noise,
        "outlier_ratio": outliers,
        "corrupted_edge_ratio": corrupted,
    }
    config = _config(ctx, {"seed": seed, "scene": scene_overrides})
    scene = scene_from_config(config)
    os.makedirs(out_dir, exist_ok=True)
    for k, cloud in enumerate(scene.clouds):
        write_ply(os.path.join(out_dir, f"cloud_{k:03d}.ply"), cloud)
    truth_path = os.path.join(out_dir, "truth.graph")
    write_graph(scene.graph, truth_path, header=config.provenance())
    click.echo(f"wrote {len(scene.clouds)} clouds and {truth_path} ({len(scene.pairs)} pairs)")


@cli.command()
@click.option("--graph", "graph_path", type=click.Path(exists=True, dir_okay=False), help="Input graph with CORR records.")
@click.option("--n", "n_clouds", type=click.IntRange(min=2), default=None, help="Synthetic clouds when no graph is given.")
@click.option("--seed", type=int, default=None)
@click.option("--eps", type=float, default=None, help="Inlier threshold (m).")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False), help="Output graph file.")
@click.pass_context
@_handle_errors
def pairwise(ctx, graph_path, n_clouds, seed, eps, out_path):
    """Front-end only: RANSAC every pair and write the assembled pose graph."""
    config = _config(ctx, {"seed": seed, "eps": eps, "scene": {"n_clouds": n_clouds}})
    if graph_path:
        results = reestimate_graph_pairs(read_graph(graph_path), config)
    else:
        results = estimate_scene_pairs(scene_from_config(config), config)
    graph = build_graph(results)
    write_graph(graph, out_path, header=config.provenance())
    click.echo(f"wrote {out_path}: {graph.num_vertices} vertices, {len(graph.edges)} edges")


@cli.command()
@click.option("--n", "n_candidates", type=click.IntRange(min=1), default=1000, show_default=True)
@click.option("--inlier-fraction", type=click.FloatRange(0.0, 1.0), default=0.5, show_default=True)
@click.option("--eps", type=float, default=None, help="Sphere radius (m).")
@click.option("--zoom-factor", type=click.IntRange(min=2), default=None)
@click.option("--max-zoom", type=click.IntRange(min=1), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--dump-cells", type=click.Path(dir_okay=False), default=None, help="CSV of per-level cell statistics.")
@click.option("--oracle", is_flag=True, help="Also run the exhaustive candidate oracle.")
@click.pass_context
@_handle_errors
def consensus(ctx, n_candidates, inlier_fraction, eps, zoom_factor, max_zoom, seed, dump_cells, oracle):
    """Solve one synthetic consensus instance by branch-and-bound."""
    config = _config(ctx, {"seed": seed, "eps": eps, "consensus": {"zoom_factor": zoom_factor, "max_zoom": max_zoom}})
    spheres, _ = make_sphere_instance(
        n_candidates, config.eps, inlier_fraction, np.random.default_rng([config.seed, n_candidates])
    )
    result = max_consensus_translation(spheres, config.consensus)
    t = result.translation
    click.echo(
        f"translation {t[0]:.9f} {t[1]:.9f} {t[2]:.9f} inliers {result.inlier_count} "
        f"levels {result.zoom_levels} cells {result.cells_visited} status {result.status}"
    )
    if oracle:
        exh = exhaustive_candidate_oracle(spheres)
        click.echo(f"oracle inliers {exh.inlier_count}")
    if dump_cells:
        lines = ["zoom_level,cells,max_count"] + [f"{s.zoom_level},{s.cells},{s.max_count}" for s in result.level_stats]
        _write_text(dump_cells, "\n".join(lines) + "\n")


@cli.command()
@click.option("--synthetic", is_flag=True, help="Generate the input scene (default when no --graph).")
@click.option("--graph", "graph_path", type=click.Path(exists=True, dir_okay=False), help="Input pose graph.")
@click.option("--truth", "truth_path", type=click.Path(exists=True, dir_okay=False), help="Truth graph for --graph input.")
@click.option("--n", "n_clouds", type=click.IntRange(min=2), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--eps", type=float, default=None)
@click.option("--disable-consensus", is_flag=True, help="Skip translation re-estimation.")
@click.option("--disable-refinement", is_flag=True, help="Skip joint refinement.")
@click.option("--no-edge-weights", is_flag=True, help="Ignore inlier-count edge weights.")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None, help="Final pose graph.")
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False), default=None, help="Report CSV.")
@click.option("--json", "json_path", type=click.Path(dir_okay=False, allow_dash=True), default=None, help="Report JSON ('-' = stdout).")
@click.option("--timings", is_flag=True, help="Include stage runtimes in the JSON report.")
@click.pass_context
@_handle_errors
def run(ctx, synthetic, graph_path, truth_path, n_clouds, seed, eps, disable_consensus, disable_refinement,
        no_edge_weights, out_path, csv_path, json_path, timings):
    """Full pipeline: pairwise, R, TR, TA, D, metrics."""
    if synthetic and graph_path:
        raise click.UsageError("--synthetic and --graph are exclusive")
    overrides: Dict[str, Any] = {
        "seed": seed,
        "eps": eps,
        "scene": {"n_clouds": n_clouds},
        "input": {"synthetic": not graph_path, "graph": graph_path, "truth": truth_path},
        "output": {"graph": out_path, "report_csv": csv_path, "include_timings": timings or None},
    }
    stages = {}
    if disable_consensus:
        stages["consensus"] = False
    if disable_refinement:
        stages["refinement"] = False
    overrides["stages"] = stages
    if no_edge_weights:
        overrides["use_edge_weights"] = False
        overrides["rotation"] = {"use_edge_weights": False}
        overrides["position"] = {"use_edge_weights": False}
    config = _config(ctx, overrides)

    result = run_pipeline(config)
    if result.report is not None and json_path:
        _write_text(json_path, result.report.to_json(include_timings=config.output.include_timings) + "\n")
    if json_path != "-":
        for stage in result.stages:
            click.echo(f"{stage.name:<22}{stage.status}")
        if result.report is not None:
            click.echo(result.report.to_table(), nl=False)


@cli.command()
@click.option("--mask", "masks", multiple=True, help="Stage mask such as R+TR+TA (repeatable).")
@click.option("--seeds", type=click.IntRange(min=1), default=1, show_default=True, help="Number of consecutive seeds.")
@click.option("--seed", type=int, default=None, help="First seed.")
@click.option("--n", "n_clouds", type=click.IntRange(min=2), default=None)
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False), default=None)
@click.pass_context
@_handle_errors
def ablate(ctx, masks, seeds, seed, n_clouds, csv_path):
    """Compare stage combinations on identical scenes."""
    config = _config(ctx, {"seed": seed, "scene": {"n_clouds": n_clouds}})
    table = run_ablation(config, masks or DEFAULT_MASKS, list(range(config.seed, config.seed + seeds)))
    click.echo(table.to_table(), nl=False)
    if csv_path:
        _write_text(csv_path, table.to_csv())


@cli.command("scale-bench")
@click.option("--count", "counts", type=click.IntRange(min=1), multiple=True, help="Candidate count (repeatable, ascending).")
@click.option("--repeats", type=click.IntRange(min=1), default=5, show_default=True)
@click.option("--inlier-fraction", type=click.FloatRange(0.0, 1.0), default=0.5, show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False, allow_dash=True), default="-", show_default=True)
@click.pass_context
@_handle_errors
def scale_bench(ctx, counts, repeats, inlier_fraction, out_path):
    """Runtime of branch-and-bound vs the exhaustive oracle over candidate counts."""
    if not counts:
        raise click.UsageError("give at least one --count")
    if list(counts) != sorted(counts):
        raise click.UsageError("--count values must be ascending")
    config = _config(ctx, {})
    bench = run_scaling_bench(config, counts, repeats, inlier_fraction)
    _write_text(out_path, bench.to_csv())
    logger.info("proposed solver linear fit R^2 = %.4f", bench.r_squared)


@cli.command("eval")
@click.argument("estimate", type=click.Path(exists=True, dir_okay=False))
@click.argument("truth", type=click.Path(exists=True, dir_okay=False))
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False), default=None)
@click.option("--json", "as_json", is_flag=True, help="Print the JSON report instead of the table.")
@click.pass_context
@_handle_errors
def evaluate(ctx, estimate, truth, csv_path, as_json):
    """Score an estimated pose graph against a truth graph."""
    config = _config(ctx, {})
    est = read_graph(estimate)
    ref = read_graph(truth)
    report = multiway_metrics(est.poses(), ref.poses(), config.metrics, [e.key for e in est.edges])
    if csv_path:
        _write_text(csv_path, report.to_csv())
    if as_json:
        click.echo(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    else:
        click.echo(report.to_table(), nl=False)


if __name__ == "__main__":
    cli()
