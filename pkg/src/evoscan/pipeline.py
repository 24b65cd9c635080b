"""Experiment harness: configuration, the simulate -> invert -> diff -> score
pipeline, and map/report file formats.

A run is driven by one JSON-serializable :class:`RunConfig`.  Artifacts land
in the output directory: per-step operator files, per-step single-step maps,
per-pair evolution maps, their averages, and a score report quantifying
localization against the ground-truth supports.  Identical config and seeds
reproduce identical bytes.  Files are written through a ``.partial`` rename so
an aborted stage leaves its debris clearly marked.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import scene as scene_mod
from .forward import ForwardConfig, assemble_far_field_matrix
from .glsm import BatchSolutions, RegularizationConfig, batch_solve
from .grids import SamplingGrid
from .indicators import IndicatorMap, assemble_glsm_map, assemble_map, average_maps
from .operator import FarFieldOperator, add_noise, calibrate_epsilon, f_sharp, save_operator
from .patterns import build_library, library_meta
from .scene import (EvolutionGroundTruth, Medium, Scene, SceneError, SensingConfig,
                    build_table_scene, default_step_assignment, rasterize_support,
                    scene_from_json, scene_to_json)

RATIO_CAP = 1e9


class ConfigError(ValueError):
    """Invalid run configuration."""


class PipelineError(RuntimeError):
    """Stage failure, tagged with the stage name."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class NoiseConfig:
    seed: int = 1
    delta_ratio: float | None = 0.05
    epsilon: float | None = None


@dataclass
class ScenarioConfig:
    table: str | None = "damage"
    step_assignment: dict[int, int] | None = None
    steps: list[int] = field(default_factory=lambda: list(range(1, 8)))
    scenes: list[dict] | None = None     # inline scene JSON overrides the table


@dataclass
class RunConfig:
    profile: str = "desk"
    wavenumber: float = 2.0 * np.pi / 0.3
    shear_modulus: float = 1.0
    n_sensors: int = 64
    sensing_radius: float = 1.45
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    noise: NoiseConfig | None = field(default_factory=NoiseConfig)
    grid: dict = field(default_factory=lambda: {
        "x_min": -0.8, "x_max": 0.8, "y_min": -0.8, "y_max": 0.8,
        "n_x": 48, "n_y": 48, "n_normals": 18})
    pattern_kind: str = "dipole_sweep"
    regularization: dict = field(default_factory=dict)
    forward: dict = field(default_factory=dict)
    invariant: str = "lambda"
    mixed_anchor: str = "alpha"
    reduce: str = "argmin"
    dilation: float = 0.075
    output_dir: str = "evoscan_out"

    def medium(self) -> Medium:
        return Medium(wavenumber=self.wavenumber, shear_modulus=self.shear_modulus)

    def sensing(self) -> SensingConfig:
        return SensingConfig(n_sensors=self.n_sensors)

    def sampling_grid(self) -> SamplingGrid:
        return SamplingGrid(**self.grid)

    def forward_config(self) -> ForwardConfig:
        return ForwardConfig(**self.forward)

    def regularization_config(self) -> RegularizationConfig:
        return RegularizationConfig(**self.regularization)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        doc = dict(doc)
        try:
            if "scenario" in doc and doc["scenario"] is not None:
                sc = dict(doc["scenario"])
                if sc.get("step_assignment") is not None:
                    sc["step_assignment"] = {int(k): int(v)
                                             for k, v in sc["step_assignment"].items()}
                doc["scenario"] = ScenarioConfig(**sc)
            if doc.get("noise") is not None:
                doc["noise"] = NoiseConfig(**doc["noise"])
            return cls(**doc)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def desk_profile(**overrides) -> RunConfig:
    """Minutes-scale default: wavelength 0.3, 64 sensors, 48x48x18 trials."""
    return RunConfig(**overrides) if overrides else RunConfig()


def paper_profile(**overrides) -> RunConfig:
    """Full-scale profile: k = 72, 500 sensors, 100x100 grid, 36 half-circle normals."""
    cfg = RunConfig(
        profile="paper",
        wavenumber=72.0,
        n_sensors=500,
        grid={"x_min": -0.8, "x_max": 0.8, "y_min": -0.8, "y_max": 0.8,
              "n_x": 100, "n_y": 100, "n_normals": 36},
        dilation=2.0 * np.pi / 72.0 / 4.0,
    )
    for key, val in overrides.items():
        setattr(cfg, key, val)
    return cfg


def load_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    profile = doc.pop("profile", "desk")
    base = paper_profile() if profile == "paper" else desk_profile()
    merged = base.to_dict()
    merged.update(doc)
    merged["profile"] = profile
    return RunConfig.from_dict(merged)


def config_hash(cfg: RunConfig) -> str:
    """SHA-256 of the canonical JSON form; covers every output-affecting field."""
    canon = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def threads_budget() -> int:
    raw = os.environ.get("EVOSCAN_THREADS")
    if raw is None:
        return 1
    try:
        val = int(raw)
    except ValueError as exc:
        raise ConfigError(f"EVOSCAN_THREADS must be an integer, got {raw!r}") from exc
    if val < 1:
        raise ConfigError("EVOSCAN_THREADS must be >= 1")
    return val


# ---------------------------------------------------------------------------
# Map export
# ---------------------------------------------------------------------------

def _atomic_write(path: Path, writer) -> None:
    tmp = path.with_name(path.name + ".partial")
    writer(tmp)
    tmp.replace(path)


def export_map(imap: IndicatorMap, basename) -> list[Path]:
    """Write ``<basename>.csv``, ``<basename>.pgm`` and ``<basename>.meta.json``.

    CSV holds full-precision values row-major with the grid bounds in the
    header.  PGM is binary 16-bit with the value range mapped linearly onto
    [0, 65535], pixels in the same row-major order as the CSV.
    """
    base = Path(basename)
    base.parent.mkdir(parents=True, exist_ok=True)
    g = imap.grid
    header = (f"x_min={g.x_min} x_max={g.x_max} y_min={g.y_min} y_max={g.y_max} "
              f"n_x={g.n_x} n_y={g.n_y} kind={imap.kind}")
    csv_path = base.with_suffix(".csv")
    _atomic_write(csv_path, lambda p: np.savetxt(
        p, imap.values, fmt="%.17g", delimiter=",", header=header))

    pgm_path = base.with_suffix(".pgm")
    vmax = float(imap.values.max())
    scaled = imap.values / vmax * 65535.0 if vmax > 0 else np.zeros_like(imap.values)
    pixels = np.rint(scaled).astype(">u2")

    def _write_pgm(p: Path):
        with open(p, "wb") as fh:
            fh.write(f"P5\n{g.n_y} {g.n_x}\n65535\n".encode())
            fh.write(pixels.tobytes())

    _atomic_write(pgm_path, _write_pgm)

    meta_path = base.with_name(base.name + ".meta.json")
    meta = {"kind": imap.kind, "steps": list(imap.steps), "grid": g.meta(),
            "value_min": float(imap.values.min()), "value_max": vmax}
    meta.update({k: v for k, v in imap.meta.items()})
    _atomic_write(meta_path, lambda p: p.write_text(
        json.dumps(meta, indent=1, sort_keys=True, default=str)))
    return [csv_path, pgm_path, meta_path]


def load_map_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------

def _ratio(num: float | None, den: float | None) -> float | None:
    if num is None or den is None:
        return None
    if den == 0.0:
        return 1.0 if num == 0.0 else RATIO_CAP
    return min(num / den, RATIO_CAP)


def score_map(imap: IndicatorMap, truth: EvolutionGroundTruth,
              dilation: float) -> dict:
    """Localization statistics of one map against a ground-truth decomposition.

    The separation ratio divides the median on the dilated newborn support by
    the 95th percentile on the dilated stationary support; the background
    ratio uses the 90th percentile off every support.  Empty supports yield
    null ratios with a flag.
    """
    grid = imap.grid
    vals = imap.values

    def support_stats(scatterers, q: float) -> tuple[float | None, float | None]:
        if not scatterers:
            return None, None
        mask = rasterize_support(scatterers, grid, dilation)
        if not mask.any():
            return None, None
        sel = vals[mask]
        return float(np.median(sel)), float(np.percentile(sel, q))

    med_new, _ = support_stats(truth.newborn, 50)
    med_chg, _ = support_stats(truth.changed, 50)
    _, p95_stat = support_stats(truth.stationary, 95)

    everything = truth.newborn + truth.changed + truth.stationary
    if everything:
        on_any = rasterize_support(everything, grid, dilation)
    else:
        on_any = np.zeros_like(vals, dtype=bool)
    off = ~on_any
    p90_off = float(np.percentile(vals[off], 90)) if off.any() else None

    entry = {
        "kind": imap.kind,
        "steps": list(imap.steps),
        "median_newborn": med_new,
        "median_changed": med_chg,
        "p95_stationary": p95_stat,
        "p90_off_support": p90_off,
        "separation_ratio": _ratio(med_new, p95_stat),
        "change_separation_ratio": _ratio(med_chg, p95_stat),
        "background_ratio": _ratio(med_new, p90_off),
        "degenerate": med_new is None or p95_stat is None,
    }
    return entry


@dataclass
class ScoreReport:
    config_hash: str
    runtime_s: float
    entries: list[dict] = field(default_factory=list)
    degenerate: bool = False

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------

def _build_scenes(cfg: RunConfig) -> list[Scene]:
    sc = cfg.scenario
    if sc.scenes is not None:
        return [scene_from_json(doc) for doc in sc.scenes]
    if sc.table is None:
        raise ConfigError("scenario needs a table id or inline scenes")
    assignment = sc.step_assignment or default_step_assignment(sc.table)
    return [build_table_scene(sc.table, assignment, step, cfg.medium())
            for step in sc.steps]


def _simulate_step(scene_obj: Scene, cfg: RunConfig) -> FarFieldOperator:
    op = assemble_far_field_matrix(scene_obj, cfg.sensing(), cfg.forward_config())
    if cfg.noise is None:
        return op
    seed = cfg.noise.seed + scene_obj.step_id
    if cfg.noise.epsilon is not None:
        eps = cfg.noise.epsilon
    else:
        eps = calibrate_epsilon(op, cfg.noise.delta_ratio, seed)
    return add_noise(op, eps, seed)


def step_operator(cfg: RunConfig, step: int) -> FarFieldOperator:
    """Forward-simulate one scenario step (the `simulate` stage for one step)."""
    for scene_obj in _build_scenes(cfg):
        if scene_obj.step_id == step:
            return _simulate_step(scene_obj, cfg)
    raise ConfigError(f"step {step} not in scenario")


def invert_step(op: FarFieldOperator, cfg: RunConfig) -> BatchSolutions:
    """Batch-solve the trial library against one step's operator."""
    grid = cfg.sampling_grid()
    dirs = np.column_stack([np.cos(op.obs_angles), np.sin(op.obs_angles)])
    lib = build_library(grid, cfg.pattern_kind, op.k, dirs)
    meta = library_meta(grid, cfg.pattern_kind, op.k, op.n_obs)
    return batch_solve(op, lib, cfg.regularization_config(),
                       sharp=f_sharp(op), library_meta=meta)


def run_pipeline(cfg: RunConfig) -> ScoreReport:
    """Execute simulate -> invert -> diff -> score and write all artifacts."""
    t_start = time.monotonic()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = cfg.sampling_grid()

    stage = "scenario"
    try:
        scenes = _build_scenes(cfg)
        _atomic_write(out / "scenes.json", lambda p: p.write_text(
            json.dumps([scene_to_json(s) for s in scenes], indent=1)))
    except (SceneError, ConfigError) as exc:
        raise PipelineError(stage, str(exc)) from exc

    report = ScoreReport(config_hash=config_hash(cfg), runtime_s=0.0)
    degenerate = any(s.is_empty for s in scenes)

    # Forward solves are independent across steps: fan out up to the thread
    # budget.  Each step writes its own artifact, so scheduling cannot change
    # any output byte.
    stage = "simulate"
    try:
        workers = threads_budget()
        if workers > 1 and len(scenes) > 1:
            from concurrent.futures import ThreadPoolExecutor
            with ThreadPoolExecutor(max_workers=workers) as pool:
                operators = list(pool.map(lambda s: _simulate_step(s, cfg), scenes))
        else:
            operators = [_simulate_step(s, cfg) for s in scenes]
        for scene_obj, op in zip(scenes, operators):
            save_operator(op, out / f"op_step{scene_obj.step_id}")
    except ConfigError:
        raise
    except Exception as exc:
        raise PipelineError(stage, str(exc)) from exc

    prev_batch: BatchSolutions | None = None
    prev_scene: Scene | None = None
    i_d_maps: list[IndicatorMap] = []
    i_hat_maps: list[IndicatorMap] = []
    glsm_final: IndicatorMap | None = None

    for scene_obj, op in zip(scenes, operators):
        stage = "invert"
        try:
            batch = invert_step(op, cfg)
            gmap = assemble_glsm_map(batch, grid)
            export_map(gmap, out / f"glsm_t{scene_obj.step_id}")
            glsm_final = gmap
        except Exception as exc:
            raise PipelineError(stage, str(exc)) from exc

        if prev_batch is not None:
            stage = "diff"
            try:
                m_id, m_ihat = assemble_map(
                    prev_batch, batch, grid, d_choice=cfg.invariant,
                    mixed_anchor=cfg.mixed_anchor, reduce=cfg.reduce)
                pair = f"t{prev_scene.step_id}_t{scene_obj.step_id}"
                export_map(m_id, out / f"diff_I_D_{pair}")
                export_map(m_ihat, out / f"diff_I_hat_D_{pair}")
                i_d_maps.append(m_id)
                i_hat_maps.append(m_ihat)
            except Exception as exc:
                raise PipelineError(stage, str(exc)) from exc

            stage = "score"
            try:
                truth = scene_mod.scene_diff(prev_scene, scene_obj)
                report.entries.append(score_map(m_id, truth, cfg.dilation))
                report.entries.append(score_map(m_ihat, truth, cfg.dilation))
            except Exception as exc:
                raise PipelineError(stage, str(exc)) from exc

        prev_batch, prev_scene = batch, scene_obj

    if i_d_maps:
        stage = "diff"
        try:
            avg_id = average_maps(i_d_maps)
            avg_ihat = average_maps(i_hat_maps)
            export_map(avg_id, out / "averaged_I_D")
            export_map(avg_ihat, out / "averaged_I_hat_D")
        except Exception as exc:
            raise PipelineError(stage, str(exc)) from exc

        stage = "score"
        try:
            truth_total = scene_mod.scene_diff(scenes[0], scenes[-1])
            entry = score_map(avg_id, truth_total, cfg.dilation)
            entry["kind"] = "averaged_I_D"
            report.entries.append(entry)
            if glsm_final is not None:
                entry = score_map(glsm_final, truth_total, cfg.dilation)
                entry["kind"] = "glsm_final"
                report.entries.append(entry)
        except Exception as exc:
            raise PipelineError(stage, str(exc)) from exc

    report.degenerate = degenerate or any(e.get("degenerate") for e in report.entries)
    report.runtime_s = time.monotonic() - t_start
    _atomic_write(out / "score_report.json", lambda p: p.write_text(
        json.dumps(report.to_dict(), indent=1, sort_keys=True)))
    return report
