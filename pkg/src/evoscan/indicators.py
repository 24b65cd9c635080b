"""Differential evolution indicators over sequential sensing steps.

Two regularized densities per trial, one per sensing step, feed a pair of
invariant functionals

    Lambda(g_a, g_b) = (g_b - g_a, Fs (g_b - g_a)) + delta ||g_b - g_a||^2
    Upsilon          = | Lambda_next(0, g_b) - Lambda_prev(g_a, 0) |

which stay small wherever the background did not change.  The evolution
indicators combine them as

    I     = 1 / sqrt( Lb [1 + Lb / D] )
    I_hat = 1 / sqrt( La + Lb [1 + La / D] )

with ``La = Lambda_prev(g_a, 0)``, ``Lb = Lambda_next(0, g_b)`` and
``D in {Lambda, Upsilon}``.  ``D = 0`` (bit-identical densities) is taken in
the algebraic limit: no change, indicator zero.

Per sampling point the trial-normal sweep is reduced by an argmin: the normal
minimizing the indicator is selected for differential maps, the one minimizing
``||g||^2`` for single-step maps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .glsm import INDICATOR_FLOOR, BatchSolutions
from .grids import SamplingGrid
from .operator import SharpOperator

D_LAMBDA = "lambda"
D_UPSILON = "upsilon"


class IndicatorError(ValueError):
    """Invalid indicator computation."""


@dataclass(frozen=True)
class InvariantPair:
    """Lambda and Upsilon for one trial, with the noise levels that entered."""

    lam: float
    ups: float
    delta_a: float
    delta_b: float


@dataclass(frozen=True)
class IndicatorMap:
    """Real-valued field over the sampling grid with scoring provenance."""

    grid: SamplingGrid
    values: np.ndarray
    kind: str                      # glsm | I_D | I_hat_D | averaged
    steps: tuple[int, ...]
    chosen_trial: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (self.grid.n_x, self.grid.n_y):
            raise IndicatorError("map shape does not match grid")
        if not np.all(np.isfinite(vals)):
            raise IndicatorError("map values must be finite")
        if np.any(vals < 0):
            raise IndicatorError("map values must be nonnegative")
        object.__setattr__(self, "values", vals)


# ---------------------------------------------------------------------------
# Invariants
# ---------------------------------------------------------------------------

def lambda_invariant(g_a: np.ndarray, g_b: np.ndarray, sharp_ref: SharpOperator,
                     delta: float) -> float:
    """Quadratic invariant of a density pair against one reference operator.

    Symmetric under swapping the pair; nonnegative for any PSD reference
    (tiny negative rounding is clamped).
    """
    g_a = np.asarray(g_a, dtype=complex)
    g_b = np.asarray(g_b, dtype=complex)
    if g_a.shape != g_b.shape:
        raise IndicatorError("density vectors must share one length")
    d = g_b - g_a
    return sharp_ref.quadratic_form(d) + delta * float(np.sum(np.abs(d) ** 2))


def upsilon_invariant(g_a: np.ndarray, g_b: np.ndarray,
                      sharp_a: SharpOperator, sharp_b: SharpOperator,
                      delta_a: float, delta_b: float) -> float:
    """|Lambda_next(0, g_b) - Lambda_prev(g_a, 0)|.

    When the two steps carry different recorded noise levels the conservative
    bound max(delta_a, delta_b) enters both terms.
    """
    delta = max(delta_a, delta_b)
    zero = np.zeros_like(np.asarray(g_a))
    lam_b = lambda_invariant(zero, g_b, sharp_b, delta)
    lam_a = lambda_invariant(g_a, zero, sharp_a, delta)
    return abs(lam_b - lam_a)


def indicators_from_invariants(lam_a: float, lam_b: float, d_value: float
                               ) -> tuple[float, float]:
    """Pure arithmetic of the two evolution indicators.

    ``lam_a = Lambda_prev(g_a, 0)``, ``lam_b = Lambda_next(0, g_b)``,
    ``d_value`` the chosen invariant of the pair.  ``d_value = 0`` returns
    zeros (the unchanged-background limit).
    """
    if d_value < 0 or lam_a < 0 or lam_b < 0:
        raise IndicatorError("invariants must be nonnegative")
    if d_value == 0.0:
        return 0.0, 0.0
    i_d = 1.0 / np.sqrt(lam_b * (1.0 + lam_b / d_value) + INDICATOR_FLOOR)
    i_hat = 1.0 / np.sqrt(lam_a + lam_b * (1.0 + lam_a / d_value) + INDICATOR_FLOOR)
    return float(i_d), float(i_hat)


def diff_indicators(g_a: np.ndarray, g_b: np.ndarray,
                    sharp_a: SharpOperator, sharp_b: SharpOperator,
                    delta_a: float, delta_b: float,
                    d_choice: str = D_LAMBDA,
                    mixed_anchor: str = "alpha") -> tuple[float, float]:
    """Evolution indicators for one trial from raw densities and operators.

    ``mixed_anchor`` selects which step's sharp operator carries the
    difference invariant ('alpha' by default, 'alpha_plus_1' for sensitivity
    studies).
    """
    delta = max(delta_a, delta_b)
    zero = np.zeros_like(np.asarray(g_a))
    lam_a = lambda_invariant(g_a, zero, sharp_a, delta)
    lam_b = lambda_invariant(zero, g_b, sharp_b, delta)
    if d_choice == D_LAMBDA:
        anchor = sharp_a if mixed_anchor == "alpha" else sharp_b
        d_value = lambda_invariant(g_a, g_b, anchor, delta)
    elif d_choice == D_UPSILON:
        d_value = abs(lam_b - lam_a)
    else:
        raise IndicatorError(f"unknown invariant choice {d_choice!r}")
    return indicators_from_invariants(lam_a, lam_b, d_value)


# ---------------------------------------------------------------------------
# Normal-sweep reduction
# ---------------------------------------------------------------------------

def reduce_over_normals(values: np.ndarray, key: np.ndarray | None = None
                        ) -> tuple[float, int]:
    """Pick one trial of the sweep: the minimizer of ``key`` (default: values).

    Differential maps reduce on the indicator itself; single-step maps pass
    the density norms as key.  Ties break to the lowest index.
    """
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise IndicatorError("empty normal sweep")
    key = values if key is None else np.asarray(key, dtype=float)
    idx = int(np.argmin(key))
    return float(values[idx]), idx


def _reduce_columns(values: np.ndarray, key: np.ndarray, n_points: int,
                    per: int, mode: str) -> tuple[np.ndarray, np.ndarray]:
    vals = values.reshape(n_points, per)
    keys = key.reshape(n_points, per)
    idx = np.argmax(keys, axis=1) if mode == "argmax" else np.argmin(keys, axis=1)
    rows = np.arange(n_points)
    return vals[rows, idx], idx


# ---------------------------------------------------------------------------
# Map assembly
# ---------------------------------------------------------------------------

def _check_pair_meta(batch_a: BatchSolutions, batch_b: BatchSolutions) -> dict:
    meta_a, meta_b = batch_a.library_meta, batch_b.library_meta
    if meta_a != meta_b:
        raise IndicatorError("mismatched library metadata between steps")
    if batch_a.g.shape != batch_b.g.shape:
        raise IndicatorError("step batches differ in size")
    return dict(meta_a)


def _grid_layout(grid: SamplingGrid, n_cols: int, meta: dict) -> int:
    per = meta.get("trials_per_point")
    if per is None:
        if n_cols % grid.n_points:
            raise IndicatorError("library size is not a multiple of the grid size")
        per = n_cols // grid.n_points
    if grid.n_points * per != n_cols:
        raise IndicatorError("library does not cover the grid")
    return per


def assemble_map(batch_a: BatchSolutions, batch_b: BatchSolutions,
                 grid: SamplingGrid, d_choice: str = D_LAMBDA,
                 mixed_anchor: str = "alpha", reduce: str = "argmin",
                 steps: tuple[int, int] | None = None
                 ) -> tuple[IndicatorMap, IndicatorMap]:
    """Evolution indicator maps (I, I_hat) for one step pair.

    Both batches must come from the same trial library.  Each map reduces the
    normal sweep independently on its own per-trial indicator.
    """
    meta = _check_pair_meta(batch_a, batch_b)
    n_cols = batch_a.g.shape[1]
    per = _grid_layout(grid, n_cols, meta)
    delta = max(batch_a.delta_m, batch_b.delta_m)

    diff = batch_b.g - batch_a.g
    if d_choice == D_LAMBDA:
        anchor = batch_a.sharp if mixed_anchor == "alpha" else batch_b.sharp
        d_vals = np.maximum(
            np.einsum("nm,nm->m", diff.conj(), anchor.matrix @ diff).real, 0.0) \
            + delta * np.sum(np.abs(diff) ** 2, axis=0)
    elif d_choice == D_UPSILON:
        d_vals = None  # filled below from the per-step terms
    else:
        raise IndicatorError(f"unknown invariant choice {d_choice!r}")

    lam_a = batch_a.penalty + delta * batch_a.gnorm_sq
    lam_b = batch_b.penalty + delta * batch_b.gnorm_sq
    if d_vals is None:
        d_vals = np.abs(lam_b - lam_a)

    with np.errstate(divide="ignore"):
        i_d = np.where(d_vals > 0,
                       1.0 / np.sqrt(lam_b * (1.0 + lam_b / np.where(d_vals > 0, d_vals, 1.0))
                                     + INDICATOR_FLOOR),
                       0.0)
        i_hat = np.where(d_vals > 0,
                         1.0 / np.sqrt(lam_a + lam_b * (1.0 + lam_a / np.where(d_vals > 0, d_vals, 1.0))
                                       + INDICATOR_FLOOR),
                         0.0)

    if steps is None:
        steps = (batch_a.op.step_id, batch_b.op.step_id)
    common_meta = {
        "invariant": d_choice, "mixed_anchor": mixed_anchor, "reduce": reduce,
        "delta": delta, "k": batch_a.op.k,
        "gamma_median": float(np.median(np.concatenate([batch_a.gamma, batch_b.gamma]))),
        "seeds": [getattr(batch_a.op.noise, "seed", None),
                  getattr(batch_b.op.noise, "seed", None)],
    }
    maps = []
    for kind, per_trial in (("I_D", i_d), ("I_hat_D", i_hat)):
        vals, idx = _reduce_columns(per_trial, per_trial, grid.n_points, per, reduce)
        maps.append(IndicatorMap(
            grid=grid,
            values=vals.reshape(grid.n_x, grid.n_y),
            kind=kind,
            steps=tuple(steps),
            chosen_trial=idx.reshape(grid.n_x, grid.n_y),
            meta=dict(common_meta),
        ))
    return maps[0], maps[1]


def assemble_glsm_map(batch: BatchSolutions, grid: SamplingGrid,
                      step: int | None = None) -> IndicatorMap:
    """Single-step map: per point, the indicator of the minimum-norm trial."""
    per = _grid_layout(grid, batch.g.shape[1], batch.library_meta)
    sqrt_term = np.sum(np.abs(batch.sharp.sqrt() @ batch.g) ** 2, axis=0)
    denom = sqrt_term + batch.delta_m * batch.gnorm_sq
    indicator = 1.0 / np.sqrt(denom + INDICATOR_FLOOR)
    vals, idx = _reduce_columns(indicator, batch.gnorm_sq, grid.n_points, per, "argmin")
    step_id = batch.op.step_id if step is None else step
    return IndicatorMap(
        grid=grid,
        values=vals.reshape(grid.n_x, grid.n_y),
        kind="glsm",
        steps=(step_id,),
        chosen_trial=idx.reshape(grid.n_x, grid.n_y),
        meta={"delta": batch.delta_m, "k": batch.op.k,
              "gamma_median": float(np.median(batch.gamma)),
              "seeds": [getattr(batch.op.noise, "seed", None)]},
    )


def average_maps(maps: list[IndicatorMap]) -> IndicatorMap:
    """Pointwise arithmetic mean of same-kind maps on one grid."""
    if not maps:
        raise IndicatorError("nothing to average")
    first = maps[0]
    for m in maps[1:]:
        if m.grid != first.grid:
            raise IndicatorError("grid mismatch in average")
        if m.kind != first.kind:
            raise IndicatorError("kind mismatch in average")
    stack = np.stack([m.values for m in maps])
    steps = tuple(sorted({s for m in maps for s in m.steps}))
    return IndicatorMap(
        grid=first.grid,
        values=stack.mean(axis=0),
        kind="averaged",
        steps=steps,
        meta={"source_kind": first.kind, "n_maps": len(maps)},
    )
