"""Domain model for evolving scatterer configurations and sensing geometry.

A :class:`Scene` is the scatterer configuration at one sensing step: either a
set of straight crack arcs with (possibly complex) interfacial stiffness, or a
set of circular pores, embedded in a homogeneous medium.  Scenes evolve across
sensing steps by gaining scatterers (or by stiffness changes on persisting
cracks); nothing is ever removed.  The two built-in scenario tables reproduce
the reference damage-zone and bubble-zone test geometries row for row.

All value types are immutable after construction and safe to share across
threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

from .grids import SamplingGrid


class SceneError(ValueError):
    """Invalid scene construction or incompatible scene pair."""


# ---------------------------------------------------------------------------
# Value types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Medium:
    """Homogeneous background: wavenumber and shear modulus (dimensionless units)."""

    wavenumber: float
    shear_modulus: float = 1.0

    def __post_init__(self):
        if not self.wavenumber > 0:
            raise SceneError("wavenumber must be positive")
        if not self.shear_modulus > 0:
            raise SceneError("shear modulus must be positive")

    @property
    def wavelength(self) -> float:
        return 2.0 * np.pi / self.wavenumber


@dataclass(frozen=True)
class CrackArc:
    """Straight crack segment with scalar interfacial stiffness.

    ``stiffness == 0`` is a traction-free crack.  The sign convention for
    dissipative interfaces requires ``Im(stiffness) <= 0``; a positive
    imaginary part would inject energy and is rejected.
    """

    center: tuple[float, float]
    length: float
    orientation: float
    stiffness: complex = 0.0

    def __post_init__(self):
        if not self.length > 0:
            raise SceneError("crack length must be positive")
        if complex(self.stiffness).imag > 0:
            raise SceneError("Im(stiffness) must be <= 0 (dissipative sign convention)")
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))
        object.__setattr__(self, "stiffness", complex(self.stiffness))

    @property
    def tangent(self) -> np.ndarray:
        return np.array([np.cos(self.orientation), np.sin(self.orientation)])

    @property
    def normal(self) -> np.ndarray:
        """Unit normal, the tangent rotated by +pi/2."""
        return np.array([-np.sin(self.orientation), np.cos(self.orientation)])

    @property
    def half_length(self) -> float:
        return 0.5 * self.length

    def endpoints(self) -> tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.center)
        h = self.half_length * self.tangent
        return c - h, c + h

    def geometry_key(self) -> tuple:
        """Identity of the arc ignoring stiffness (used to track persistence)."""
        return ("crack", self.center, self.length, self.orientation)


@dataclass(frozen=True)
class Pore:
    """Circular void (sound-hard disk in the scalar model)."""

    center: tuple[float, float]
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise SceneError("pore radius must be positive")
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))

    def geometry_key(self) -> tuple:
        return ("pore", self.center, self.radius)


Scatterer = Union[CrackArc, Pore]


@dataclass(frozen=True)
class Scene:
    """Scatterer configuration at one sensing step.

    A scene holds cracks or pores, never both: the forward solvers treat the
    two families separately and mixed scenes are out of scope.
    """

    medium: Medium
    cracks: tuple[CrackArc, ...] = ()
    pores: tuple[Pore, ...] = ()
    step_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "cracks", tuple(self.cracks))
        object.__setattr__(self, "pores", tuple(self.pores))
        if self.cracks and self.pores:
            raise SceneError("mixed crack+pore scenes are not supported")
        keys = [c.geometry_key() for c in self.cracks]
        if len(set(keys)) != len(keys):
            raise SceneError("two cracks coincide")
        for i, a in enumerate(self.pores):
            for b in self.pores[i + 1:]:
                gap = np.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1])
                if gap < a.radius + b.radius:
                    raise SceneError("pores overlap")

    @property
    def scatterers(self) -> tuple[Scatterer, ...]:
        return self.cracks + self.pores

    @property
    def is_empty(self) -> bool:
        return not self.scatterers

    @property
    def kind(self) -> str:
        if self.pores:
            return "pore"
        if self.cracks:
            return "crack"
        return "empty"


@dataclass(frozen=True)
class SensingConfig:
    """Full-circle far-field sensing: N coincident incident/observation directions."""

    n_sensors: int

    def __post_init__(self):
        if self.n_sensors < 8:
            raise SceneError("need at least 8 sensors")
        if self.n_sensors % 2 != 0:
            raise SceneError("sensor count must be even (antipodal index map)")

    def angles(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.n_sensors) / self.n_sensors

    def directions(self) -> np.ndarray:
        th = self.angles()
        return np.column_stack([np.cos(th), np.sin(th)])

    def antipodal_index(self, i: int | np.ndarray) -> int | np.ndarray:
        return (i + self.n_sensors // 2) % self.n_sensors


@dataclass(frozen=True)
class EvolutionGroundTruth:
    """Support decomposition between two nested scenes.

    ``newborn`` are scatterers present only in the later scene, ``changed`` are
    persisting cracks whose stiffness differs (reported in their later state),
    ``stationary`` is everything unchanged.
    """

    newborn: tuple[Scatterer, ...]
    changed: tuple[CrackArc, ...]
    stationary: tuple[Scatterer, ...]


@dataclass(frozen=True)
class EvolutionSequence:
    """Ordered scenes sharing one medium, with monotone scatterer sets."""

    scenes: tuple[Scene, ...]
    sensing: SensingConfig | None = None

    def __post_init__(self):
        object.__setattr__(self, "scenes", tuple(self.scenes))
        if not self.scenes:
            raise SceneError("sequence needs at least one scene")
        medium = self.scenes[0].medium
        for s in self.scenes[1:]:
            if s.medium != medium:
                raise SceneError("all scenes in a sequence must share one medium")
        for a, b in zip(self.scenes, self.scenes[1:]):
            scene_diff(a, b)  # raises if not nested

    def __len__(self) -> int:
        return len(self.scenes)

    def __getitem__(self, i: int) -> Scene:
        return self.scenes[i]


# ---------------------------------------------------------------------------
# Scenario tables
# ---------------------------------------------------------------------------
# Crack rows: (x_c, y_c, length, orientation/pi).  Lengths and orientations are
# kept as exact rational strings; floats are derived only at scene build time.

DAMAGE_TABLE: tuple[tuple[float, float, str, str], ...] = (
    (-0.33, -0.62, "1/3", "1/18"),
    (0.21, -0.34, "1/3", "11/36"),
    (-0.21, 0.22, "1/4", "1/3"),
    (-0.68, 0.49, "2/5", "19/36"),
    (0.4, 0.21, "1/3", "1/9"),
    (-0.05, 0.8, "1/3", "1/18"),
    (-0.39, -0.05, "1/3", "13/36"),
    (0.49, -0.37, "3/5", "7/36"),
    (-0.09, 0.06, "1/3", "7/36"),
    (-0.46, 0.72, "2/5", "1/18"),
    (-0.8, -0.5, "3/5", "1/18"),
    (0.21, 0.0, "1/3", "1/12"),
    (-0.5, 0.32, "1/3", "1/6"),
    (-0.8, -0.29, "1/3", "1/6"),
    (-0.15, -0.25, "7/20", "11/36"),
    (0.52, -0.13, "1/3", "-1/12"),
    (0.36, 0.62, "3/5", "1/4"),
    (0.01, 0.43, "1/3", "5/18"),
    (-0.74, 0.1, "1/3", "13/36"),
    (-0.38, -0.34, "1/3", "1/6"),
    (0.34, -0.63, "1/3", "11/90"),
    (0.02, -0.64, "1/3", "-1/12"),
    (-0.45, 0.55, "1/7", "1/9"),
    (-0.51, 0.08, "1/3", "1/3"),
)

# Pore rows: (x_c, y_c, radius).
BUBBLE_TABLE: tuple[tuple[float, float, float], ...] = (
    (0.42, -0.72, 0.08),
    (0.4, -0.27, 0.04),
    (0.51, 0.48, 0.15),
    (-0.66, 0.44, 0.08),
    (-0.65, -0.64, 0.15),
    (0.0, -0.4, 0.15),
    (-0.13, 0.17, 0.08),
    (0.03, 0.72, 0.08),
    (-0.25, -0.73, 0.08),
    (-0.66, 0.02, 0.08),
    (-0.38, 0.64, 0.08),
    (0.67, -0.18, 0.08),
    (-0.31, -0.13, 0.08),
    (-0.42, 0.24, 0.08),
    (0.49, 0.09, 0.08),
    (0.12, 0.36, 0.08),
    (-0.73, -0.3, 0.08),
    (0.72, -0.52, 0.15),
    (0.13, -0.08, 0.08),
    (-0.37, -0.42, 0.08),
    (0.32, -0.45, 0.08),
)

N_STEPS = 7

# Row-to-first-step block sizes for the default seven-step evolution.
_DAMAGE_BLOCKS = (4, 4, 4, 3, 3, 3, 3)
_BUBBLE_BLOCKS = (3, 3, 3, 3, 3, 3, 3)


def _table_size(table_id: str) -> int:
    if table_id == "damage":
        return len(DAMAGE_TABLE)
    if table_id == "bubble":
        return len(BUBBLE_TABLE)
    raise SceneError(f"unknown table id {table_id!r} (expected 'damage' or 'bubble')")


def default_step_assignment(table_id: str) -> dict[int, int]:
    """Default row -> first-step map: contiguous blocks over seven steps."""
    blocks = _DAMAGE_BLOCKS if table_id == "damage" else _BUBBLE_BLOCKS
    _table_size(table_id)
    assignment = {}
    row = 1
    for step, size in enumerate(blocks, start=1):
        for _ in range(size):
            assignment[row] = step
            row += 1
    return assignment


def _crack_from_row(row: tuple[float, float, str, str]) -> CrackArc:
    x, y, ell, phi = row
    return CrackArc(
        center=(x, y),
        length=float(Fraction(ell)),
        orientation=float(Fraction(phi)) * np.pi,
        stiffness=0.0,
    )


def build_table_scene(
    table_id: str,
    step_assignment: Mapping[int, int],
    step: int,
    medium: Medium,
) -> Scene:
    """Scene containing exactly the table rows whose first step is <= ``step``.

    ``step_assignment`` maps 1-based table row indices to the sensing step at
    which the scatterer first exists; it must cover every row.  A ``step``
    preceding all assignments yields an empty scene.
    """
    n_rows = _table_size(table_id)
    missing = [r for r in range(1, n_rows + 1) if r not in step_assignment]
    if missing:
        raise SceneError(f"step assignment missing rows {missing}")
    active = [r for r in range(1, n_rows + 1) if step_assignment[r] <= step]
    if table_id == "damage":
        cracks = tuple(_crack_from_row(DAMAGE_TABLE[r - 1]) for r in active)
        return Scene(medium=medium, cracks=cracks, step_id=step)
    pores = tuple(Pore(center=(x, y), radius=r) for x, y, r in
                  (BUBBLE_TABLE[i - 1] for i in active))
    return Scene(medium=medium, pores=pores, step_id=step)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def scene_diff(s_a: Scene, s_b: Scene) -> EvolutionGroundTruth:
    """Decompose the evolution from ``s_a`` to ``s_b`` into support classes.

    Requires the scenes nested: every scatterer of ``s_a`` must persist in
    ``s_b`` with identical geometry (stiffness may differ, the changed-crack
    case).  Raises :class:`SceneError` otherwise.
    """
    if s_a.medium != s_b.medium:
        raise SceneError("scene pair must share one medium")

    b_cracks = {c.geometry_key(): c for c in s_b.cracks}
    b_pores = {p.geometry_key(): p for p in s_b.pores}

    newborn: list[Scatterer] = []
    changed: list[CrackArc] = []
    stationary: list[Scatterer] = []

    seen = set()
    for c in s_a.cracks:
        key = c.geometry_key()
        if key not in b_cracks:
            raise SceneError("scenes not nested: crack removed between steps")
        seen.add(key)
        partner = b_cracks[key]
        if partner.stiffness != c.stiffness:
            changed.append(partner)
        else:
            stationary.append(partner)
    for p in s_a.pores:
        key = p.geometry_key()
        if key not in b_pores:
            raise SceneError("scenes not nested: pore removed between steps")
        seen.add(key)
        stationary.append(b_pores[key])

    for s in s_b.scatterers:
        if s.geometry_key() not in seen:
            newborn.append(s)

    return EvolutionGroundTruth(tuple(newborn), tuple(changed), tuple(stationary))


def _segment_distance(points: np.ndarray, crack: CrackArc) -> np.ndarray:
    """Distance from each point to the crack segment."""
    p0, p1 = crack.endpoints()
    d = p1 - p0
    seg_len2 = float(d @ d)
    t = np.clip(((points - p0) @ d) / seg_len2, 0.0, 1.0)
    closest = p0[None, :] + t[:, None] * d[None, :]
    return np.linalg.norm(points - closest, axis=1)


def rasterize_support(
    scatterers: Union[Scene, Iterable[Scatterer]],
    grid: SamplingGrid,
    dilation: float = 0.0,
) -> np.ndarray:
    """Boolean mask over the grid, true within ``dilation`` of any scatterer.

    Cracks are thin segments (the mask is the dilated segment); pores count as
    filled disks, so dilation 0 marks the disk itself.
    """
    if dilation < 0:
        raise SceneError("dilation must be nonnegative")
    if isinstance(scatterers, Scene):
        scatterers = scatterers.scatterers
    pts = grid.points()
    if pts.size == 0:
        raise SceneError("empty grid")
    mask = np.zeros(len(pts), dtype=bool)
    for s in scatterers:
        if isinstance(s, CrackArc):
            mask |= _segment_distance(pts, s) <= dilation
        else:
            dist = np.linalg.norm(pts - np.asarray(s.center)[None, :], axis=1)
            mask |= dist <= s.radius + dilation
    return mask.reshape(grid.n_x, grid.n_y)


def build_table_sequence(
    table_id: str,
    medium: Medium,
    step_assignment: Mapping[int, int] | None = None,
    steps: Sequence[int] | None = None,
    sensing: SensingConfig | None = None,
) -> EvolutionSequence:
    """All requested steps of a table scenario as one evolution sequence."""
    assignment = dict(step_assignment) if step_assignment else default_step_assignment(table_id)
    if steps is None:
        steps = range(1, max(assignment.values()) + 1)
    scenes = tuple(build_table_scene(table_id, assignment, s, medium) for s in steps)
    return EvolutionSequence(scenes=scenes, sensing=sensing)


# ---------------------------------------------------------------------------
# JSON serialization
# ---------------------------------------------------------------------------

def scene_to_json(scene: Scene) -> dict:
    return {
        "medium": {"wavenumber": scene.medium.wavenumber,
                   "shear_modulus": scene.medium.shear_modulus},
        "step_id": scene.step_id,
        "cracks": [
            {"center": list(c.center), "length": c.length,
             "orientation": c.orientation,
             "stiffness": [c.stiffness.real, c.stiffness.imag]}
            for c in scene.cracks
        ],
        "pores": [{"center": list(p.center), "radius": p.radius} for p in scene.pores],
    }


def scene_from_json(doc: Mapping) -> Scene:
    med = Medium(wavenumber=doc["medium"]["wavenumber"],
                 shear_modulus=doc["medium"].get("shear_modulus", 1.0))
    cracks = tuple(
        CrackArc(center=tuple(c["center"]), length=c["length"],
                 orientation=c["orientation"],
                 stiffness=complex(c["stiffness"][0], c["stiffness"][1]))
        for c in doc.get("cracks", ())
    )
    pores = tuple(Pore(center=tuple(p["center"]), radius=p["radius"])
                  for p in doc.get("pores", ()))
    return Scene(medium=med, cracks=cracks, pores=pores, step_id=doc.get("step_id", 0))


def sequence_to_json(seq: EvolutionSequence) -> dict:
    doc = {"scenes": [scene_to_json(s) for s in seq.scenes]}
    if seq.sensing is not None:
        doc["sensing"] = {"n_sensors": seq.sensing.n_sensors}
    return doc


def sequence_from_json(doc: Mapping) -> EvolutionSequence:
    sensing = None
    if "sensing" in doc:
        sensing = SensingConfig(n_sensors=doc["sensing"]["n_sensors"])
    return EvolutionSequence(
        scenes=tuple(scene_from_json(s) for s in doc["scenes"]),
        sensing=sensing,
    )
