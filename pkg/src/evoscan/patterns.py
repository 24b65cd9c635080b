"""Synthetic far-field signatures of point trials: the inversion right-hand sides.

A dipole pattern is the far field of a point dislocation (a vanishing crack
with unit jump) at a sampling point with a trial normal; a monopole pattern is
the plain point-source signature.  Both inherit the forward module's far-field
convention, so the signature of a point source at ``y`` is
``(1/sqrt(8 pi k)) * exp(-i k xhat.y)`` and the dipole applies the source-side
normal derivative to it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .grids import SamplingGrid
from .forward import monopole_amplitude
from .operator import FarFieldOperator, save_operator, load_operator

KIND_DIPOLE = "dipole_sweep"
KIND_MONOPOLE = "monopole"
KIND_COMBINED = "monopole_dipole"

_KINDS = (KIND_DIPOLE, KIND_MONOPOLE, KIND_COMBINED)


class LibraryError(ValueError):
    """Invalid trial-library request."""


class MemoryBudgetError(LibraryError):
    """Requested library exceeds the memory cap; iterate it in chunks instead."""


@dataclass(frozen=True)
class TrialPattern:
    """One synthetic signature: sampling point, normal (None for monopole), vector."""

    point: tuple[float, float]
    normal: tuple[float, float] | None
    values: np.ndarray


def dipole_pattern(point, normal, k: float, obs_dirs: np.ndarray) -> TrialPattern:
    """Far field of a point dislocation with the given trial normal.

    ``Phi(xhat) = c_dip * i k (xhat.n) exp(-i k xhat.x0)`` with
    ``c_dip = -1/sqrt(8 pi k)``: exactly the source-side normal derivative of
    the point-source signature, so dipole trials and crack far fields share one
    normalization.
    """
    obs_dirs = np.atleast_2d(np.asarray(obs_dirs, dtype=float))
    if obs_dirs.size == 0:
        raise LibraryError("empty observation grid")
    n = np.asarray(normal, dtype=float)
    if abs(np.hypot(n[0], n[1]) - 1.0) > 1e-12:
        raise LibraryError("trial normal must be a unit vector")
    x0 = np.asarray(point, dtype=float)
    vals = -monopole_amplitude(k) * 1j * k * (obs_dirs @ n) \
        * np.exp(-1j * k * obs_dirs @ x0)
    return TrialPattern(tuple(map(float, x0)), tuple(map(float, n)), vals)


def monopole_pattern(point, k: float, obs_dirs: np.ndarray) -> TrialPattern:
    """Point-source signature: constant magnitude, pure translation phase."""
    obs_dirs = np.atleast_2d(np.asarray(obs_dirs, dtype=float))
    if obs_dirs.size == 0:
        raise LibraryError("empty observation grid")
    x0 = np.asarray(point, dtype=float)
    vals = monopole_amplitude(k) * np.exp(-1j * k * obs_dirs @ x0)
    return TrialPattern(tuple(map(float, x0)), None, vals)


def trials_per_point(grid: SamplingGrid, kind: str) -> int:
    if kind == KIND_DIPOLE:
        return grid.n_normals
    if kind == KIND_MONOPOLE:
        return 1
    if kind == KIND_COMBINED:
        return grid.n_normals + 1
    raise LibraryError(f"unknown library kind {kind!r}")


def library_meta(grid: SamplingGrid, kind: str, k: float, n_obs: int) -> dict:
    meta = grid.meta()
    meta.update({"kind": kind, "k": k, "n_obs": n_obs,
                 "trials_per_point": trials_per_point(grid, kind)})
    return meta


def _columns_for_points(points: np.ndarray, grid: SamplingGrid, kind: str,
                        k: float, obs_dirs: np.ndarray) -> np.ndarray:
    """Library block for a run of sampling points, point-major / normal-minor.

    For the combined kind each point contributes the monopole first, then the
    dipole sweep; chosen-trial index 0 therefore denotes the monopole.
    """
    n_obs = len(obs_dirs)
    per = trials_per_point(grid, kind)
    phase = np.exp(-1j * k * obs_dirs @ points.T)          # (n_obs, P)
    blocks = []
    if kind in (KIND_MONOPOLE, KIND_COMBINED):
        blocks.append(monopole_amplitude(k) * phase[:, :, None])
    if kind in (KIND_DIPOLE, KIND_COMBINED):
        proj = obs_dirs @ grid.normals().T                 # (n_obs, n_normals)
        dip = -monopole_amplitude(k) * 1j * k * proj[:, None, :] * phase[:, :, None]
        blocks.append(dip)
    out = np.concatenate(blocks, axis=2)                   # (n_obs, P, per)
    return out.reshape(n_obs, len(points) * per)


def build_library(grid: SamplingGrid, kind: str, k: float, obs_dirs: np.ndarray,
                  memory_cap_bytes: int = 1 << 30) -> np.ndarray:
    """Full trial library, one column per (point, trial) pair.

    Column order is point-major, trial-minor: column ``p * per + j`` holds
    sampling point ``p`` with trial ``j``.  Raises
    :class:`MemoryBudgetError` when the matrix would exceed the cap; use
    :func:`iter_library_chunks` to stream it instead.
    """
    obs_dirs = np.atleast_2d(np.asarray(obs_dirs, dtype=float))
    if kind not in _KINDS:
        raise LibraryError(f"unknown library kind {kind!r}")
    n_cols = grid.n_points * trials_per_point(grid, kind)
    need = 16 * len(obs_dirs) * n_cols
    if need > memory_cap_bytes:
        raise MemoryBudgetError(
            f"library needs {need} bytes > cap {memory_cap_bytes};"
            " iterate chunks via iter_library_chunks")
    return _columns_for_points(grid.points(), grid, kind, k, obs_dirs)


def iter_library_chunks(grid: SamplingGrid, kind: str, k: float,
                        obs_dirs: np.ndarray,
                        points_per_chunk: int = 256) -> Iterator[tuple[int, np.ndarray]]:
    """Yield (column_offset, block) pairs covering the library in point order.

    Concatenating the blocks reproduces :func:`build_library` bit for bit: the
    per-column arithmetic is elementwise and independent of chunking.
    """
    obs_dirs = np.atleast_2d(np.asarray(obs_dirs, dtype=float))
    if kind not in _KINDS:
        raise LibraryError(f"unknown library kind {kind!r}")
    per = trials_per_point(grid, kind)
    pts = grid.points()
    for start in range(0, len(pts), points_per_chunk):
        block = _columns_for_points(pts[start:start + points_per_chunk],
                                    grid, kind, k, obs_dirs)
        yield start * per, block


# ---------------------------------------------------------------------------
# Disk cache (FFO container with a kind tag)
# ---------------------------------------------------------------------------

def save_library(matrix: np.ndarray, grid: SamplingGrid, kind: str, k: float,
                 obs_angles: np.ndarray, path) -> None:
    op = FarFieldOperator(
        matrix=matrix,
        obs_angles=obs_angles,
        inc_angles=np.arange(matrix.shape[1], dtype=float),
        k=k,
    )
    save_operator(op, path, extra_meta={"library": library_meta(grid, kind, k, matrix.shape[0])})


def load_library(path) -> tuple[np.ndarray, dict]:
    op = load_operator(path)
    import json as _json
    from pathlib import Path as _Path
    meta = _json.loads(_Path(path).with_suffix(".json").read_text())
    if "library" not in meta:
        raise LibraryError("operator file carries no library tag")
    return op.matrix, meta["library"]
