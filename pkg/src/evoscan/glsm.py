"""Regularized scattering-equation solver and the single-step imaging indicator.

For each trial signature ``Phi`` the solver returns the minimizer of

    ||F_d g - Phi||^2 + gamma (g, Fs g) + delta gamma^(1-chi) ||g||^2

by solving the Hermitian normal system

    (F_d* F_d + gamma Fs + delta gamma^(1-chi) I) g = F_d* Phi ,

with ``gamma = eta / (||F_d|| + delta)`` and ``eta`` picked on the classical
Tikhonov path by the Morozov discrepancy principle: the unique ``eta`` with
``||F_d g_eta - Phi|| = delta ||g_eta||``, located by bisection on a bracketed
monotone discrepancy function.

Solution certificates are normwise relative backward errors,
``||A g - b|| <= tol (||A||_F ||g|| + ||b||)``, the quantity a backward-stable
direct solve can actually guarantee at any conditioning.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, lu_factor, lu_solve

from .operator import FarFieldOperator, SharpOperator, f_sharp


class GlsmError(RuntimeError):
    """Inversion failure."""


INDICATOR_FLOOR = 1e-300


@dataclass(frozen=True)
class RegularizationConfig:
    """Morozov bracket and solver tolerances.

    ``eta_floor``/``eta_ceil`` are multiples of ||F||^2; ``chi`` selects the
    exponent in the ``delta gamma^(1-chi)`` penalty (0 reproduces the written
    discrete system; values in ]0,1[ are exposed for sensitivity studies).
    """

    chi: float = 0.0
    eta_floor: float = 1e-14
    eta_ceil: float = 1e2
    bisect_tol: float = 1e-3
    max_bisect: int = 60
    gamma_cache_rtol: float = 1e-3
    certificate_tol: float = 1e-10
    max_refine: int = 8

    def __post_init__(self):
        if not (0.0 <= self.chi < 1.0):
            raise ValueError("chi must lie in [0, 1)")
        if not (0.0 < self.eta_floor < self.eta_ceil):
            raise ValueError("eta bracket must satisfy 0 < floor < ceil")
        if self.bisect_tol <= 0:
            raise ValueError("bisection tolerance must be positive")


@dataclass(frozen=True)
class GlsmSolution:
    """One regularized density with its diagnostics.

    ``penalty`` is the sharp-operator quadratic form (g, Fs g); ``delta_term``
    the companion ``delta ||g||^2`` entering indicator denominators;
    ``residual`` the data misfit ``||F_d g - Phi||``.
    """

    g: np.ndarray
    gamma: float
    eta: float
    residual: float
    penalty: float
    delta_term: float
    gnorm_sq: float
    converged: bool
    morozov_interior: bool
    degenerate: bool = False
    failed: bool = False


class _TikhonovPath:
    """SVD-backed evaluation of the classical Tikhonov discrepancy terms."""

    def __init__(self, matrix: np.ndarray):
        self.u, self.s, self.vh = np.linalg.svd(matrix)
        self.norm2 = float(self.s[0]) if self.s.size else 0.0

    def project(self, phi: np.ndarray) -> np.ndarray:
        return self.u.conj().T @ phi

    def discrepancy_terms(self, phat_sq: np.ndarray, eta: np.ndarray
                          ) -> tuple[np.ndarray, np.ndarray]:
        """(residual norm, solution norm) on the Tikhonov path, vectorized.

        ``phat_sq``: (N, M) squared data coefficients; ``eta``: (M,).
        """
        denom = self.s[:, None] ** 2 + eta[None, :]
        resid = np.sqrt(np.sum((eta[None, :] / denom) ** 2 * phat_sq, axis=0))
        gnorm = np.sqrt(np.sum((self.s[:, None] / denom) ** 2 * phat_sq, axis=0))
        return resid, gnorm

    def solution(self, phi: np.ndarray, eta: float) -> np.ndarray:
        phat = self.project(phi)
        return self.vh.conj().T @ (self.s / (self.s ** 2 + eta) * phat)


def _morozov_vector(path: _TikhonovPath, phi_cols: np.ndarray, delta_m: float,
                    cfg: RegularizationConfig
                    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-column Morozov eta by bracketed log-bisection.

    Returns (eta, interior, converged).  Columns whose discrepancy has no sign
    change get the bracket end and ``interior = False``.
    """
    m_cols = phi_cols.shape[1]
    norm_sq = path.norm2 ** 2
    lo = np.full(m_cols, cfg.eta_floor * norm_sq)
    hi = np.full(m_cols, cfg.eta_ceil * norm_sq)
    if delta_m == 0.0 or norm_sq == 0.0:
        return lo, np.zeros(m_cols, bool), np.ones(m_cols, bool)

    phat_sq = np.abs(path.project(phi_cols)) ** 2
    r_lo, g_lo = path.discrepancy_terms(phat_sq, lo)
    f_lo = r_lo - delta_m * g_lo
    r_hi, g_hi = path.discrepancy_terms(phat_sq, hi)
    f_hi = r_hi - delta_m * g_hi

    at_floor = f_lo > 0
    at_ceil = (f_hi < 0) & ~at_floor
    interior = ~(at_floor | at_ceil)
    eta = np.where(at_floor, lo, np.where(at_ceil, hi, np.nan))
    converged = at_floor | at_ceil

    log_lo, log_hi = np.log(lo), np.log(hi)
    active = interior.copy()
    for _ in range(cfg.max_bisect):
        if not active.any():
            break
        mid = np.exp(0.5 * (log_lo + log_hi))
        resid, gnorm = path.discrepancy_terms(phat_sq, mid)
        f_mid = resid - delta_m * gnorm
        ok = active & (np.abs(f_mid) <= cfg.bisect_tol * delta_m * gnorm)
        eta = np.where(ok, mid, eta)
        converged |= ok
        active &= ~ok
        go_up = active & (f_mid < 0)
        log_lo = np.where(go_up, np.log(mid), log_lo)
        log_hi = np.where(active & ~go_up, np.log(mid), log_hi)
    leftover = interior & ~converged
    eta = np.where(leftover, np.exp(0.5 * (log_lo + log_hi)), eta)
    return eta, interior, converged


def morozov_eta(op: FarFieldOperator, phi: np.ndarray, delta_m: float,
                cfg: RegularizationConfig = RegularizationConfig()) -> float:
    """Morozov-selected eta for one right-hand side.

    With ``delta_m = 0`` the bracket floor is returned directly.  A
    discrepancy function positive already at the floor (or negative at the
    ceiling) yields the bracket end; the companion flag is exposed through
    :func:`solve_glsm` diagnostics.
    """
    phi = np.asarray(phi, dtype=complex)
    if not np.all(np.isfinite(phi.view(float))):
        raise GlsmError("non-finite right-hand side")
    if np.all(phi == 0):
        raise GlsmError("right-hand side must be nonzero")
    path = _TikhonovPath(op.matrix)
    eta, _, _ = _morozov_vector(path, phi[:, None], delta_m, cfg)
    return float(eta[0])


def tikhonov_solution(op: FarFieldOperator, phi: np.ndarray, eta: float) -> np.ndarray:
    """Classical Tikhonov solution (F*F + eta I)^-1 F* phi."""
    return _TikhonovPath(op.matrix).solution(np.asarray(phi, dtype=complex), eta)


# ---------------------------------------------------------------------------
# Normal-system solve
# ---------------------------------------------------------------------------

class _NormalSystem:
    """The penalized normal equations with a gamma-keyed factorization cache."""

    def __init__(self, op: FarFieldOperator, sharp: SharpOperator, delta_m: float,
                 cfg: RegularizationConfig):
        f = op.matrix
        self.fhf = f.conj().T @ f
        self.fh = f.conj().T
        self.sharp_matrix = sharp.matrix
        self.delta_m = delta_m
        self.chi = cfg.chi
        self.cfg = cfg
        self.fhf_fro = float(np.linalg.norm(self.fhf))
        self.sharp_fro = float(np.linalg.norm(sharp.matrix))
        self.sqrt_n = np.sqrt(f.shape[1])
        self._cached_gamma: float | None = None
        self._cached_factor = None

    def ridge(self, gamma: float | np.ndarray):
        return self.delta_m * gamma ** (1.0 - self.chi)

    def matrix(self, gamma: float) -> np.ndarray:
        a = self.fhf + gamma * self.sharp_matrix
        a[np.diag_indices_from(a)] += self.ridge(gamma)
        return a

    def apply(self, gamma: np.ndarray, g_cols: np.ndarray) -> np.ndarray:
        """A(gamma_c) g_c for per-column gammas, batched."""
        return self.fhf @ g_cols + (self.sharp_matrix @ g_cols) * gamma[None, :] \
            + g_cols * self.ridge(gamma)[None, :]

    def scale(self, gamma: np.ndarray) -> np.ndarray:
        """Frobenius-norm bound of A(gamma), the certificate denominator scale."""
        return self.fhf_fro + gamma * self.sharp_fro + self.ridge(gamma) * self.sqrt_n

    def factor(self, gamma: float):
        if self._cached_gamma is not None:
            if abs(gamma - self._cached_gamma) <= self.cfg.gamma_cache_rtol * self._cached_gamma:
                return self._cached_factor
        a = self.matrix(gamma)
        try:
            fac = (cho_factor(a), "cho")
        except np.linalg.LinAlgError:
            try:
                fac = (lu_factor(a), "lu")
            except np.linalg.LinAlgError as exc:
                raise GlsmError("normal system indefinite: upstream PSD violation") from exc
        self._cached_gamma = gamma
        self._cached_factor = fac
        return fac

    @staticmethod
    def backsolve(fac, rhs: np.ndarray) -> np.ndarray:
        handle, kind = fac
        return cho_solve(handle, rhs) if kind == "cho" else lu_solve(handle, rhs)

    def solve_block(self, gamma: np.ndarray, b_cols: np.ndarray
                    ) -> tuple[np.ndarray, np.ndarray]:
        """Solve for a block of columns sharing one cached factorization.

        Iterative refinement against the exact per-column matrices drives each
        column to the certificate tolerance; columns that resist get an exact
        refactorization, and only then are flagged failed.
        """
        fac = self.factor(float(gamma[0]))
        g = self.backsolve(fac, b_cols)
        tol = self.cfg.certificate_tol
        b_norm = np.linalg.norm(b_cols, axis=0)
        ok = np.zeros(b_cols.shape[1], dtype=bool)
        for _ in range(self.cfg.max_refine):
            r = b_cols - self.apply(gamma, g)
            denom = self.scale(gamma) * np.linalg.norm(g, axis=0) + b_norm
            ok = np.linalg.norm(r, axis=0) <= tol * np.where(denom > 0, denom, 1.0)
            if ok.all():
                break
            g = g + self.backsolve(fac, r)
        if not ok.all():
            for c in np.flatnonzero(~ok):
                fac_c = self.factor(float(gamma[c]))
                g[:, c] = self.backsolve(fac_c, b_cols[:, c])
                for _ in range(self.cfg.max_refine):
                    r_c = b_cols[:, c] - self.apply(gamma[c:c + 1], g[:, c:c + 1])[:, 0]
                    denom = self.scale(gamma[c:c + 1])[0] * np.linalg.norm(g[:, c]) \
                        + b_norm[c]
                    if np.linalg.norm(r_c) <= tol * max(denom, 1.0):
                        ok[c] = True
                        break
                    g[:, c] = g[:, c] + self.backsolve(fac_c, r_c)
        return g, ok


def _diagnostics(op: FarFieldOperator, sharp: SharpOperator, delta_m: float,
                 phi_cols: np.ndarray, g_cols: np.ndarray
                 ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    resid = np.linalg.norm(op.matrix @ g_cols - phi_cols, axis=0)
    penalty = np.maximum(
        np.einsum("nm,nm->m", g_cols.conj(), sharp.matrix @ g_cols).real, 0.0)
    gnorm_sq = np.sum(np.abs(g_cols) ** 2, axis=0)
    return resid, penalty, gnorm_sq


def solve_glsm(op: FarFieldOperator, sharp: SharpOperator, delta_m: float,
               phi: np.ndarray,
               cfg: RegularizationConfig = RegularizationConfig()) -> GlsmSolution:
    """Regularized solution for one trial signature.

    The penalty operator enters as the sharp matrix itself, which equals the
    square of its PSD root within the root's reconstruction tolerance.
    """
    phi = np.asarray(phi, dtype=complex)
    if np.all(phi == 0):
        zero = np.zeros(op.n_inc, dtype=complex)
        return GlsmSolution(zero, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
                            converged=True, morozov_interior=False, degenerate=True)
    path = _TikhonovPath(op.matrix)
    eta, interior, conv = _morozov_vector(path, phi[:, None], delta_m, cfg)
    gamma = eta / (path.norm2 + delta_m)
    system = _NormalSystem(op, sharp, delta_m, cfg)
    b = system.fh @ phi[:, None]
    g, ok = system.solve_block(gamma, b)
    resid, penalty, gnorm_sq = _diagnostics(op, sharp, delta_m, phi[:, None], g)
    return GlsmSolution(
        g=g[:, 0],
        gamma=float(gamma[0]),
        eta=float(eta[0]),
        residual=float(resid[0]),
        penalty=float(penalty[0]),
        delta_term=float(delta_m * gnorm_sq[0]),
        gnorm_sq=float(gnorm_sq[0]),
        converged=bool(conv[0] and ok[0]),
        morozov_interior=bool(interior[0]),
        failed=not bool(ok[0]),
    )


def glsm_indicator(sol: GlsmSolution, sharp_sqrt: np.ndarray, delta_m: float) -> float:
    """Single-step imaging value: 1/sqrt(||Fs^(1/2) g||^2 + delta ||g||^2).

    A vanishing density would make the indicator infinite; the additive floor
    keeps the degenerate case at a large finite guard value instead.
    """
    root_term = float(np.sum(np.abs(sharp_sqrt @ sol.g) ** 2))
    val = root_term + delta_m * float(np.sum(np.abs(sol.g) ** 2))
    return 1.0 / np.sqrt(val + INDICATOR_FLOOR)


class BatchSolutions:
    """Column-parallel GLSM solutions over a trial library.

    Behaves as a sequence of :class:`GlsmSolution`; the underlying arrays are
    exposed for vectorized consumers (the map assembly).
    """

    def __init__(self, op: FarFieldOperator, sharp: SharpOperator, delta_m: float,
                 g: np.ndarray, eta: np.ndarray, gamma: np.ndarray,
                 residual: np.ndarray, penalty: np.ndarray, gnorm_sq: np.ndarray,
                 converged: np.ndarray, interior: np.ndarray,
                 degenerate: np.ndarray, failed: np.ndarray,
                 library_meta: dict | None = None):
        self.op = op
        self.sharp = sharp
        self.delta_m = delta_m
        self.g = g
        self.eta = eta
        self.gamma = gamma
        self.residual = residual
        self.penalty = penalty
        self.gnorm_sq = gnorm_sq
        self.converged = converged
        self.interior = interior
        self.degenerate = degenerate
        self.failed = failed
        self.library_meta = library_meta or {}

    def __len__(self) -> int:
        return self.g.shape[1]

    def __getitem__(self, c: int) -> GlsmSolution:
        return GlsmSolution(
            g=self.g[:, c], gamma=float(self.gamma[c]), eta=float(self.eta[c]),
            residual=float(self.residual[c]), penalty=float(self.penalty[c]),
            delta_term=float(self.delta_m * self.gnorm_sq[c]),
            gnorm_sq=float(self.gnorm_sq[c]),
            converged=bool(self.converged[c]), morozov_interior=bool(self.interior[c]),
            degenerate=bool(self.degenerate[c]), failed=bool(self.failed[c]))


def batch_solve(op: FarFieldOperator, library: np.ndarray,
                cfg: RegularizationConfig = RegularizationConfig(),
                delta_m: float | None = None,
                sharp: SharpOperator | None = None,
                library_meta: dict | None = None) -> BatchSolutions:
    """Solve every library column against one operator.

    Morozov runs per column (the discrepancy depends on the signature); the
    normal system is refactorized only when gamma drifts beyond the cache
    tolerance, with iterative refinement holding every accepted column to the
    same certificate.  Failed columns are flagged, never fatal.
    """
    library = np.asarray(library, dtype=complex)
    if library.ndim == 1:
        library = library[:, None]
    if library.shape[0] != op.n_obs:
        raise GlsmError("library rows must match the observation grid")
    if delta_m is None:
        delta_m = op.delta
    if sharp is None:
        sharp = f_sharp(op)

    m_cols = library.shape[1]
    path = _TikhonovPath(op.matrix)
    nonzero = np.any(library != 0, axis=0)
    finite = np.all(np.isfinite(library.view(float)).reshape(library.shape[0], -1)
                    .reshape(op.n_obs, m_cols, 2), axis=(0, 2))
    live = nonzero & finite

    eta = np.full(m_cols, cfg.eta_floor * path.norm2 ** 2)
    interior = np.zeros(m_cols, bool)
    converged = np.ones(m_cols, bool)
    if live.any():
        eta_l, int_l, conv_l = _morozov_vector(path, library[:, live], delta_m, cfg)
        eta[live] = eta_l
        interior[live] = int_l
        converged[live] = conv_l

    denom = path.norm2 + delta_m
    gamma = eta / denom if denom > 0 else np.full(m_cols, np.inf)

    g = np.zeros((op.n_inc, m_cols), dtype=complex)
    ok = np.ones(m_cols, bool)
    degenerate = ~live
    if live.any() and denom > 0:
        system = _NormalSystem(op, sharp, delta_m, cfg)
        b_all = system.fh @ library
        idx = np.flatnonzero(live)
        start = 0
        while start < len(idx):
            gamma_ref = gamma[idx[start]]
            stop = start + 1
            while stop < len(idx) and abs(gamma[idx[stop]] - gamma_ref) \
                    <= cfg.gamma_cache_rtol * gamma_ref:
                stop += 1
            cols = idx[start:stop]
            g_blk, ok_blk = system.solve_block(gamma[cols], b_all[:, cols])
            g[:, cols] = g_blk
            ok[cols] = ok_blk
            start = stop
    elif live.any():
        ok[live] = False

    resid, penalty, gnorm_sq = _diagnostics(op, sharp, delta_m, library, g)
    return BatchSolutions(
        op=op, sharp=sharp, delta_m=delta_m, g=g, eta=eta, gamma=gamma,
        residual=resid, penalty=penalty, gnorm_sq=gnorm_sq,
        converged=converged & ok, interior=interior,
        degenerate=degenerate, failed=~ok, library_meta=library_meta)


def glsm_functional(op: FarFieldOperator, sharp: SharpOperator, delta_m: float,
                    chi: float, gamma: float, phi: np.ndarray,
                    g: np.ndarray) -> float:
    """The discrete cost whose minimizer the solver returns (for audits)."""
    misfit = float(np.sum(np.abs(op.matrix @ g - phi) ** 2))
    pen = float(np.real(np.vdot(g, sharp.matrix @ g)))
    ridge = delta_m * gamma ** (1.0 - chi) * float(np.sum(np.abs(g) ** 2))
    return misfit + gamma * pen + ridge
