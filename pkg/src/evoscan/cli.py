"""Command-line interface.

Subcommands mirror the pipeline stages: ``scenario`` emits scene JSON,
``simulate`` produces operator files, ``invert`` single-step maps, ``diff``
evolution maps, ``pipeline`` the whole chain, ``score`` localization
statistics for an exported map.  Exit codes: 0 ok, 2 configuration error,
3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from . import pipeline as pl
from .forward import ForwardError
from .glsm import GlsmError
from .indicators import IndicatorError, assemble_glsm_map, assemble_map, average_maps
from .operator import OperatorError, OperatorIOError, PsdViolationError, load_operator
from .patterns import LibraryError
from .scene import (SceneError, build_table_scene, default_step_assignment,
                    scene_from_json, scene_to_json, sequence_from_json)

EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guard(fn):
    try:
        return fn()
    except (pl.ConfigError, SceneError, LibraryError, IndicatorError,
            OperatorError, click.ClickException) as exc:
        _fail(EXIT_CONFIG, str(exc))
    except (ForwardError, GlsmError, PsdViolationError) as exc:
        _fail(EXIT_NUMERIC, str(exc))
    except pl.PipelineError as exc:
        code = EXIT_IO if isinstance(exc.__cause__, OSError) else EXIT_NUMERIC
        _fail(code, str(exc))
    except OperatorIOError as exc:
        _fail(EXIT_IO, str(exc))
    except OSError as exc:
        _fail(EXIT_IO, str(exc))


def _config_from_options(config: str | None, profile: str) -> pl.RunConfig:
    if config is not None:
        return pl.load_config(config)
    return pl.paper_profile() if profile == "paper" else pl.desk_profile()


@click.group()
def main():
    """Differential imaging of evolving scatterers from sequential far-field data."""


@main.command()
@click.option("--table", type=click.Choice(["damage", "bubble"]), default="damage",
              show_default=True)
@click.option("--step", type=int, required=True, help="Sensing step to instantiate.")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--profile", type=click.Choice(["desk", "paper"]), default="desk")
@click.option("--out", type=click.Path(), required=True, help="Scene JSON output path.")
def scenario(table, step, config_path, profile, out):
    """Write the scene of one scenario step as JSON."""

    def run():
        cfg = _config_from_options(config_path, profile)
        assignment = (cfg.scenario.step_assignment
                      or default_step_assignment(table))
        scn = build_table_scene(table, assignment, step, cfg.medium())
        Path(out).write_text(json.dumps(scene_to_json(scn), indent=1))
        click.echo(f"wrote {out} ({len(scn.scatterers)} scatterers)")

    _guard(run)


@main.command()
@click.option("--scene", "scene_path", type=click.Path(exists=True), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--profile", type=click.Choice(["desk", "paper"]), default="desk")
@click.option("--no-noise", is_flag=True, help="Skip the measurement-noise stage.")
@click.option("--out", type=click.Path(), required=True, help="Operator base path.")
def simulate(scene_path, config_path, profile, no_noise, out):
    """Forward-simulate one scene into a far-field operator file."""

    def run():
        cfg = _config_from_options(config_path, profile)
        scn = scene_from_json(json.loads(Path(scene_path).read_text()))
        if no_noise:
            cfg.noise = None
        op = pl._simulate_step(scn, cfg)
        from .operator import save_operator
        path = save_operator(op, out)
        click.echo(f"wrote {path} (N={op.n_obs}, delta={op.delta:.4g})")

    _guard(run)


@main.command()
@click.option("--operator", "op_paths", type=click.Path(exists=True), multiple=True,
              required=True, help="Operator file(s), one map per file.")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--profile", type=click.Choice(["desk", "paper"]), default="desk")
@click.option("--out-dir", type=click.Path(), required=True)
def invert(op_paths, config_path, profile, out_dir):
    """Single-step imaging maps from operator files."""

    def run():
        cfg = _config_from_options(config_path, profile)
        grid = cfg.sampling_grid()
        for path in op_paths:
            op = load_operator(path)
            batch = pl.invert_step(op, cfg)
            gmap = assemble_glsm_map(batch, grid)
            files = pl.export_map(gmap, Path(out_dir) / f"glsm_t{op.step_id}")
            click.echo(f"wrote {files[0]}")

    _guard(run)


@main.command()
@click.option("--operator", "op_paths", type=click.Path(exists=True), multiple=True,
              required=True, help="Two or more operator files in step order.")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--profile", type=click.Choice(["desk", "paper"]), default="desk")
@click.option("--invariant", type=click.Choice(["lambda", "upsilon"]), default="lambda",
              show_default=True)
@click.option("--reduce", "reduce_mode", type=click.Choice(["argmin", "argmax"]),
              default="argmin", show_default=True)
@click.option("--out-dir", type=click.Path(), required=True)
def diff(op_paths, config_path, profile, invariant, reduce_mode, out_dir):
    """Evolution indicator maps for consecutive operator pairs, plus averages."""

    def run():
        if len(op_paths) < 2:
            raise pl.ConfigError("diff needs at least two operator files")
        cfg = _config_from_options(config_path, profile)
        cfg.invariant = invariant
        cfg.reduce = reduce_mode
        grid = cfg.sampling_grid()
        batches = []
        steps = []
        for path in op_paths:
            op = load_operator(path)
            batches.append(pl.invert_step(op, cfg))
            steps.append(op.step_id)
        i_d_maps, i_hat_maps = [], []
        for a, b in zip(range(len(batches) - 1), range(1, len(batches))):
            m_id, m_ihat = assemble_map(batches[a], batches[b], grid,
                                        d_choice=invariant, reduce=reduce_mode)
            pair = f"t{steps[a]}_t{steps[b]}"
            pl.export_map(m_id, Path(out_dir) / f"diff_I_D_{pair}")
            pl.export_map(m_ihat, Path(out_dir) / f"diff_I_hat_D_{pair}")
            i_d_maps.append(m_id)
            i_hat_maps.append(m_ihat)
            click.echo(f"wrote pair {pair}")
        if len(i_d_maps) > 1:
            pl.export_map(average_maps(i_d_maps), Path(out_dir) / "averaged_I_D")
            pl.export_map(average_maps(i_hat_maps), Path(out_dir) / "averaged_I_hat_D")
            click.echo("wrote averaged maps")

    _guard(run)


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--profile", type=click.Choice(["desk", "paper"]), default="desk")
@click.option("--out-dir", type=click.Path(), default=None,
              help="Overrides the configured output directory.")
def pipeline(config_path, profile, out_dir):
    """Run the full simulate -> invert -> diff -> score chain."""

    def run():
        cfg = _config_from_options(config_path, profile)
        if out_dir is not None:
            cfg.output_dir = out_dir
        report = pl.run_pipeline(cfg)
        click.echo(f"pipeline done in {report.runtime_s:.1f}s; "
                   f"{len(report.entries)} score entries; "
                   f"report at {Path(cfg.output_dir) / 'score_report.json'}")

    _guard(run)


@main.command()
@click.option("--map", "map_path", type=click.Path(exists=True), required=True,
              help="Exported map CSV.")
@click.option("--scene-before", type=click.Path(exists=True), required=True)
@click.option("--scene-after", type=click.Path(exists=True), required=True)
@click.option("--dilation", type=float, default=0.075, show_default=True)
@click.option("--out", type=click.Path(), default=None, help="Optional JSON output.")
def score(map_path, scene_before, scene_after, dilation, out):
    """Localization statistics of a map against a scene pair's ground truth."""

    def run():
        from .grids import SamplingGrid
        from .indicators import IndicatorMap
        from .scene import scene_diff
        meta_path = Path(map_path).with_suffix("").with_suffix("")
        meta_file = Path(str(meta_path) + ".meta.json")
        if not meta_file.exists():
            meta_file = Path(map_path).with_name(
                Path(map_path).stem + ".meta.json")
        meta = json.loads(meta_file.read_text())
        grid = SamplingGrid(**meta["grid"])
        values = pl.load_map_csv(map_path)
        imap = IndicatorMap(grid=grid, values=values, kind=meta.get("kind", "glsm"),
                            steps=tuple(meta.get("steps", ())))
        before = scene_from_json(json.loads(Path(scene_before).read_text()))
        after = scene_from_json(json.loads(Path(scene_after).read_text()))
        entry = pl.score_map(imap, scene_diff(before, after), dilation)
        text = json.dumps(entry, indent=1, sort_keys=True)
        if out is not None:
            Path(out).write_text(text)
        click.echo(text)

    _guard(run)


if __name__ == "__main__":
    main()
