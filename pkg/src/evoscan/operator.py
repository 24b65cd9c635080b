"""Discrete far-field operator algebra: noise, the sharp combination, file I/O.

The sharp operator is the positive self-adjoint combination of a far-field
matrix used as the inversion penalty.  For noise-free data it is
``|A| + B`` with ``A = (F + F*)/2`` and ``B = (F - F*)/(2i)``; recorded noise
switches to ``|A| + |B|``, which is positive semidefinite by construction.
Matrix absolute values are taken spectrally, ``|A| = V |lam| V*``.

Operator files are a sidecar pair ``<name>.ffo`` / ``<name>.json``.  The
binary layout is: magic ``FFO1``, version u32 = 1, N_obs u64, N_inc u64, then
row-major complex entries as little-endian float64 (re, im).  The JSON carries
grids, wavenumber, step id, the noise record, and the payload SHA-256.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class OperatorError(ValueError):
    """Inconsistent operator construction."""


class OperatorIOError(OSError):
    """Malformed or corrupt operator file."""


class PsdViolationError(ValueError):
    """Sharp operator has a genuinely negative eigenvalue (beyond the clamp)."""


_MAGIC = b"FFO1"
_VERSION = 1

# Negative eigenvalues of the sharp operator are tolerated (and clamped to
# zero) only below this fraction of its spectral norm.
PSD_CLAMP = 1e-10


@dataclass(frozen=True)
class NoiseRecord:
    """Provenance of injected measurement noise."""

    epsilon: float
    seed: int
    delta: float


@dataclass(frozen=True)
class FarFieldOperator:
    """Complex matrix of far-field amplitudes with its angular grids."""

    matrix: np.ndarray
    obs_angles: np.ndarray
    inc_angles: np.ndarray
    k: float
    step_id: int = 0
    noise: NoiseRecord | None = None

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=complex)
        obs = np.asarray(self.obs_angles, dtype=float)
        inc = np.asarray(self.inc_angles, dtype=float)
        if m.shape != (len(obs), len(inc)):
            raise OperatorError("matrix shape does not match angular grids")
        if not np.all(np.isfinite(m.view(float))):
            raise OperatorError("matrix entries must be finite")
        if len(obs) > 1 and not np.all(np.diff(obs) > 0):
            raise OperatorError("observation angles must be strictly increasing")
        if len(inc) > 1 and not np.all(np.diff(inc) > 0):
            raise OperatorError("incident angles must be strictly increasing")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "obs_angles", obs)
        object.__setattr__(self, "inc_angles", inc)

    @property
    def n_obs(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_inc(self) -> int:
        return self.matrix.shape[1]

    @property
    def is_square(self) -> bool:
        return self.n_obs == self.n_inc

    def norm2(self) -> float:
        """Spectral norm of the matrix."""
        return float(np.linalg.norm(self.matrix, 2))

    @property
    def delta(self) -> float:
        """Recorded operator-level noise measure (0 when noise free)."""
        return self.noise.delta if self.noise is not None else 0.0


# ---------------------------------------------------------------------------
# Noise injection
# ---------------------------------------------------------------------------

def _noise_matrix(n: int, epsilon: float, seed: int) -> np.ndarray:
    """Entries uniform in [-eps, eps]^2; real parts drawn first, then imaginary."""
    rng = np.random.default_rng(seed)
    re = rng.uniform(-epsilon, epsilon, size=(n, n))
    im = rng.uniform(-epsilon, epsilon, size=(n, n))
    return re + 1j * im


def add_noise(op: FarFieldOperator, epsilon: float, seed: int) -> FarFieldOperator:
    """Multiplicative noise model: F_delta = (I + N_eps) F.

    The record stores delta = ||N_eps F||_2 exactly as realized, so downstream
    regularization sees the true operator perturbation.  A fixed seed fully
    determines the output.
    """
    if epsilon < 0:
        raise OperatorError("epsilon must be nonnegative")
    if not op.is_square:
        raise OperatorError("noise model requires a square operator")
    n = op.n_obs
    if epsilon == 0.0:
        perturbation = np.zeros_like(op.matrix)
        delta = 0.0
    else:
        perturbation = _noise_matrix(n, epsilon, seed) @ op.matrix
        delta = float(np.linalg.norm(perturbation, 2))
    return FarFieldOperator(
        matrix=op.matrix + perturbation,
        obs_angles=op.obs_angles,
        inc_angles=op.inc_angles,
        k=op.k,
        step_id=op.step_id,
        noise=NoiseRecord(epsilon=float(epsilon), seed=int(seed), delta=delta),
    )


def calibrate_epsilon(op: FarFieldOperator, delta_ratio: float, seed: int) -> float:
    """Epsilon achieving ``||N_eps F|| = delta_ratio * ||F||`` for this seed.

    The perturbation is linear in epsilon for a fixed seed, so the calibration
    is exact: draw the unit-amplitude noise once and rescale.
    """
    if delta_ratio < 0:
        raise OperatorError("delta ratio must be nonnegative")
    if delta_ratio == 0.0:
        return 0.0
    unit = _noise_matrix(op.n_obs, 1.0, seed) @ op.matrix
    scale = float(np.linalg.norm(unit, 2))
    if scale == 0.0:
        return 0.0
    return delta_ratio * op.norm2() / scale


# ---------------------------------------------------------------------------
# Sharp operator
# ---------------------------------------------------------------------------

class SharpOperator:
    """Hermitian positive semidefinite penalty operator with cached spectrum.

    Eigenvalues below ``-PSD_CLAMP * ||F_sharp||`` raise
    :class:`PsdViolationError`; anything negative above that threshold is
    numerical dust and is clamped to zero before square roots are formed.
    """

    def __init__(self, matrix: np.ndarray):
        m = np.asarray(matrix, dtype=complex)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise OperatorError("sharp operator must be square")
        herm_defect = np.max(np.abs(m - m.conj().T)) if m.size else 0.0
        scale = max(float(np.max(np.abs(m))), 1.0) if m.size else 1.0
        if herm_defect > 1e-12 * scale:
            raise OperatorError("sharp operator must be Hermitian")
        self.matrix = 0.5 * (m + m.conj().T)
        eigvals, eigvecs = np.linalg.eigh(self.matrix)
        self.norm2 = float(np.max(np.abs(eigvals))) if eigvals.size else 0.0
        floor = -PSD_CLAMP * self.norm2
        if np.any(eigvals < floor):
            raise PsdViolationError(
                f"eigenvalue {eigvals.min():.3e} below clamp threshold {floor:.3e}")
        self.eigenvalues = np.maximum(eigvals, 0.0)
        self.eigenvectors = eigvecs
        self._sqrt: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def sqrt(self) -> np.ndarray:
        """Hermitian PSD square root, computed once from the eigen cache."""
        if self._sqrt is None:
            root = self.eigenvectors * np.sqrt(self.eigenvalues)[None, :]
            s = root @ self.eigenvectors.conj().T
            self._sqrt = 0.5 * (s + s.conj().T)
        return self._sqrt

    def quadratic_form(self, g: np.ndarray) -> float:
        """Re(g* F_sharp g), clamped at zero against rounding."""
        val = float(np.real(np.vdot(g, self.matrix @ g)))
        return max(val, 0.0)


def f_sharp(op: FarFieldOperator, noisy: bool | None = None) -> SharpOperator:
    """Positive self-adjoint combination of a far-field operator.

    ``noisy`` selects the variant: the noise-free form keeps the skew part
    unabsolved, the noisy form wraps both parts in spectral absolute values.
    By default the choice follows the operator's noise record.
    """
    if not op.is_square:
        raise OperatorError("sharp combination requires a square operator")
    if noisy is None:
        noisy = op.noise is not None
    f = op.matrix
    herm = 0.5 * (f + f.conj().T)
    skew = (f - f.conj().T) / 2j
    if not np.all(np.isfinite(herm.view(float))) or not np.all(np.isfinite(skew.view(float))):
        raise OperatorError("non-finite entries in sharp combination")
    combined = _matrix_abs(herm) + (_matrix_abs(skew) if noisy else skew)
    return SharpOperator(combined)


def _matrix_abs(h: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(h)
    a = (vecs * np.abs(vals)[None, :]) @ vecs.conj().T
    return 0.5 * (a + a.conj().T)


def psd_sqrt(sharp: SharpOperator) -> np.ndarray:
    """Hermitian PSD square root of the (clamped) sharp operator."""
    return sharp.sqrt()


# ---------------------------------------------------------------------------
# Operator files
# ---------------------------------------------------------------------------

def _paths(path) -> tuple[Path, Path]:
    base = Path(path)
    if base.suffix in (".ffo", ".json"):
        base = base.with_suffix("")
    return base.with_suffix(".ffo"), base.with_suffix(".json")


def save_operator(op: FarFieldOperator, path, extra_meta: dict | None = None) -> Path:
    """Write the sidecar pair; returns the binary path."""
    ffo_path, json_path = _paths(path)
    payload = struct.pack("<4sIQQ", _MAGIC, _VERSION, op.n_obs, op.n_inc)
    body = np.ascontiguousarray(op.matrix, dtype="<c16").tobytes()
    blob = payload + body
    ffo_path.parent.mkdir(parents=True, exist_ok=True)
    ffo_path.write_bytes(blob)
    meta = {
        "k": op.k,
        "step_id": op.step_id,
        "obs_angles": op.obs_angles.tolist(),
        "inc_angles": op.inc_angles.tolist(),
        "noise": None if op.noise is None else {
            "epsilon": op.noise.epsilon,
            "seed": op.noise.seed,
            "delta": op.noise.delta,
        },
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    if extra_meta:
        meta.update(extra_meta)
    json_path.write_text(json.dumps(meta, indent=1, sort_keys=True))
    return ffo_path


def load_operator(path) -> FarFieldOperator:
    """Read a sidecar pair back; verifies magic, version, sizes and checksum."""
    ffo_path, json_path = _paths(path)
    if not ffo_path.exists() or not json_path.exists():
        raise OperatorIOError(f"missing operator file pair for {ffo_path}")
    blob = ffo_path.read_bytes()
    header = struct.calcsize("<4sIQQ")
    if len(blob) < header:
        raise OperatorIOError("truncated payload: header incomplete")
    magic, version, n_obs, n_inc = struct.unpack_from("<4sIQQ", blob)
    if magic != _MAGIC:
        raise OperatorIOError(f"magic mismatch: {magic!r}")
    if version != _VERSION:
        raise OperatorIOError(f"unsupported version {version}")
    expected = header + 16 * n_obs * n_inc
    if len(blob) != expected:
        raise OperatorIOError(
            f"truncated payload: expected {expected} bytes, found {len(blob)}")
    meta = json.loads(json_path.read_text())
    digest = hashlib.sha256(blob).hexdigest()
    if meta.get("sha256") != digest:
        raise OperatorIOError("payload checksum does not match metadata")
    obs = np.asarray(meta["obs_angles"], dtype=float)
    inc = np.asarray(meta["inc_angles"], dtype=float)
    if (len(obs), len(inc)) != (n_obs, n_inc):
        raise OperatorIOError("metadata/payload size disagreement")
    matrix = np.frombuffer(blob, dtype="<c16", offset=header).reshape(n_obs, n_inc)
    noise = None
    if meta.get("noise") is not None:
        nz = meta["noise"]
        noise = NoiseRecord(epsilon=nz["epsilon"], seed=nz["seed"], delta=nz["delta"])
    return FarFieldOperator(
        matrix=matrix.copy(),
        obs_angles=obs,
        inc_angles=inc,
        k=meta["k"],
        step_id=meta.get("step_id", 0),
        noise=noise,
    )
