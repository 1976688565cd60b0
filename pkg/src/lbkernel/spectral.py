"""Cotan discretisation of the Laplace-Beltrami operator and its eigenbasis.

The generalized problem ``C psi = lambda A psi`` is solved with a lumped
(diagonal) mass matrix ``A``, so it is reduced to the symmetric standard
problem ``A^-1/2 C A^-1/2 u = lambda u`` and ``psi = A^-1/2 u``.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import scipy.linalg
from scipy import sparse
from scipy.sparse import linalg as splinalg

from .mesh import MeshError, TriangleMesh

logger = logging.getLogger(__name__)

DENSE_LIMIT = 300
DEFAULT_K = 500


class AssemblyError(MeshError):
    pass


class SolverError(RuntimeError):
    """Eigensolver failed to reach the requested residual."""

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals


@dataclass(frozen=True)
class FemMatrices:
    stiffness: sparse.csr_matrix
    mass: sparse.dia_matrix

    @property
    def mass_diagonal(self) -> np.ndarray:
        return self.mass.diagonal()


def assemble_cotan(mesh: TriangleMesh) -> FemMatrices:
    """Stiffness matrix from half-cotangent edge weights and lumped mass.

    ``C[i, j] = -(cot a + cot b) / 2`` for every edge ``ij`` with opposite
    angles ``a`` and ``b``, and the diagonal makes each row sum to zero.
    ``A[i, i]`` is one third of the area of the faces around vertex ``i``.
    Obtuse triangles give negative weights, which are kept.
    """
    v, f = mesh.vertices, mesh.faces
    n = mesh.n_vertices
    area = mesh.face_areas()
    scale = np.max(np.ptp(v, axis=0)) if n else 0.0
    tiny = np.flatnonzero(area <= 1e-14 * scale**2)
    if tiny.size:
        raise AssemblyError(f"face {tiny[0]} has zero area: vertices {f[tiny[0]].tolist()}")

    rows, cols, vals = [], [], []
    for corner in range(3):
        i, j, k = f[:, corner], f[:, (corner + 1) % 3], f[:, (corner + 2) % 3]
        e1 = v[j] - v[i]
        e2 = v[k] - v[i]
        cot = np.einsum("ij,ij->i", e1, e2) / (2.0 * area)
        rows += [j, k]
        cols += [k, j]
        vals += [-0.5 * cot, -0.5 * cot]
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    off = sparse.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    off.sum_duplicates()
    diag = -np.asarray(off.sum(axis=1)).ravel()
    stiffness = (off + sparse.diags(diag)).tocsr()

    lumped = np.bincount(f.ravel(), weights=np.repeat(area / 3.0, 3), minlength=n)
    lonely = np.flatnonzero(lumped == 0)
    if lonely.size:
        raise AssemblyError(f"vertex {lonely[0]} belongs to no face")
    return FemMatrices(stiffness, sparse.diags(lumped))


@dataclass(frozen=True)
class SpectralBasis:
    """Leading eigenpairs of the discrete Laplace-Beltrami operator.

    Attributes
    ----------
    eigenvalues : ndarray, shape (k,)
        Nondecreasing eigenvalues, the first one(s) zero.
    eigenfunctions : ndarray, shape (n, k)
        Column ``j`` is ``psi_j`` at the vertices, normalised so that
        ``psi_i' A psi_j = delta_ij``.
    mass : ndarray, shape (n,)
        Diagonal of the lumped mass matrix ``A``.
    """

    eigenvalues: np.ndarray
    eigenfunctions: np.ndarray
    mass: np.ndarray

    @property
    def n(self) -> int:
        return self.eigenfunctions.shape[0]

    @property
    def k(self) -> int:
        return len(self.eigenvalues)

    def truncated(self, k: int) -> "SpectralBasis":
        if not 1 <= k <= self.k:
            raise ValueError(f"truncation {k} outside 1..{self.k}")
        return SpectralBasis(self.eigenvalues[:k], self.eigenfunctions[:, :k], self.mass)

    def n_zero(self, tol: float | None = None) -> int:
        """Number of eigenvalues below ``tol`` (default ``1e-8 * max eigenvalue``)."""
        if tol is None:
            tol = 1e-8 * float(np.max(np.abs(self.eigenvalues)))
        return int(np.sum(self.eigenvalues < tol))


def _shift(fem: FemMatrices) -> float:
    # scale-aware: ratio of traces has units of an eigenvalue
    return 1e-8 * fem.stiffness.diagonal().sum() / fem.mass_diagonal.sum()


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    out = vecs.copy()
    for j in range(out.shape[1]):
        col = out[:, j]
        nz = np.flatnonzero(np.abs(col) > 1e-12 * np.abs(col).max())
        if nz.size and col[nz[0]] < 0:
            out[:, j] = -col
    return out


def solve_eigen(
    fem: FemMatrices,
    k: int = DEFAULT_K,
    tol: float = 1e-8,
    dense_limit: int = DENSE_LIMIT,
    maxiter: int | None = None,
) -> SpectralBasis:
    """Smallest ``k`` eigenpairs of ``C psi = lambda A psi``.

    Small problems (``n <= dense_limit``) and requests for a third or more of
    the spectrum go through a dense symmetric eigensolver, where Lanczos
    would cost more than a full decomposition. Otherwise shift-invert Lanczos
    is run around a small negative shift ``-s``, so the factorised operator
    is congruent to ``C + s A``, which stays nonsingular despite the zero
    eigenvalue(s). The Ritz vectors are then
    re-orthonormalised with one Rayleigh-Ritz step.

    Raises
    ------
    ValueError
        If ``k`` is outside ``1..n`` or ``tol`` is not positive.
    SolverError
        If a residual ``|C psi - lambda A psi|`` exceeds ``tol * |A psi|``.
    """
    C = fem.stiffness
    a = fem.mass_diagonal
    n = C.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in 1..{n}, got {k}")
    if tol <= 0:
        raise ValueError("tol must be positive")

    d = 1.0 / np.sqrt(a)
    S = sparse.diags(d) @ C @ sparse.diags(d)
    S = (0.5 * (S + S.T)).tocsc()

    if n <= dense_limit or 3 * k >= n:
        if 4 * k > n:
            # divide and conquer on the full spectrum beats a large subset solve
            w, u = scipy.linalg.eigh(S.toarray(), driver="evd")
            w, u = w[:k], u[:, :k]
        else:
            w, u = scipy.linalg.eigh(S.toarray(), subset_by_index=[0, k - 1])
    else:
        sigma = -_shift(fem)
        v0 = np.random.default_rng(0).standard_normal(n)
        try:
            w, u = splinalg.eigsh(S, k=k, sigma=sigma, which="LM", v0=v0, maxiter=maxiter)
        except splinalg.ArpackNoConvergence as exc:
            raise SolverError(
                f"Lanczos did not converge: {len(exc.eigenvalues)} of {k} eigenpairs found",
            ) from exc
        # Rayleigh-Ritz cleanup for exact orthonormality inside clusters
        q, _ = np.linalg.qr(u)
        h = q.T @ (S @ q)
        w, y = np.linalg.eigh(0.5 * (h + h.T))
        u = q @ y

    order = np.argsort(w, kind="stable")
    w, u = w[order], u[:, order]
    psi = _fix_signs(d[:, None] * u)

    resid = np.linalg.norm(C @ psi - (a[:, None] * psi) * w, axis=0)
    scale = np.linalg.norm(a[:, None] * psi, axis=0)
    bad = resid > tol * scale
    if bad.any():
        raise SolverError(
            f"{int(bad.sum())} eigenpairs exceed residual tolerance {tol:g} "
            f"(worst {float(np.max(resid / scale)):.3g})",
            residuals=resid / scale,
        )
    return SpectralBasis(w, psi, a.copy())


def spectral_basis(mesh: TriangleMesh, k: int = DEFAULT_K, tol: float = 1e-8) -> SpectralBasis:
    """Assemble and solve in one call; ``k`` is capped at the vertex count."""
    return solve_eigen(assemble_cotan(mesh), min(k, mesh.n_vertices), tol)


def _field_values(field, n: int) -> np.ndarray:
    values = np.asarray(getattr(field, "values", field), dtype=np.float64)
    if values.shape != (n,):
        raise ValueError(f"field has shape {values.shape}, expected ({n},)")
    return values


def fourier_coefficients(field, basis: SpectralBasis) -> np.ndarray:
    """``beta_j = f' A psi_j`` for every basis column."""
    f = _field_values(field, basis.n)
    return basis.eigenfunctions.T @ (basis.mass * f)


class Reconstruction(NamedTuple):
    error: float
    relative: bool


def reconstruction_error(field, basis: SpectralBasis) -> Reconstruction:
    """A-norm error of the truncated Fourier series, relative to ``|f|_A``.

    A zero field has no relative error; the absolute error is returned with
    ``relative=False``.
    """
    f = _field_values(field, basis.n)
    beta = fourier_coefficients(f, basis)
    r = f - basis.eigenfunctions @ beta
    err = float(np.sqrt(r @ (basis.mass * r)))
    norm = float(np.sqrt(f @ (basis.mass * f)))
    if norm == 0.0:
        return Reconstruction(err, False)
    return Reconstruction(err / norm, True)


# --------------------------------------------------------------------------
# binary container: little-endian header (magic, version, n, k) followed by
# eigenvalues[k], eigenfunctions[n, k] row-major and mass[n], all float64

MAGIC = b"LBSB"
VERSION = 1
_HEADER = struct.Struct("<4sIQQ")


def save_basis(basis: SpectralBasis, path) -> None:
    n, k = basis.n, basis.k
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, k))
        fh.write(np.ascontiguousarray(basis.eigenvalues, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(basis.eigenfunctions, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(basis.mass, dtype="<f8").tobytes())


def load_basis(path) -> SpectralBasis:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError("basis file too short")
    magic, version, n, k = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError("not a spectral basis file")
    if version != VERSION:
        raise ValueError(f"unsupported basis file version {version}")
    expected = _HEADER.size + 8 * (k + n * k + n)
    if len(raw) != expected:
        raise ValueError(f"basis file has {len(raw)} bytes, expected {expected}")
    data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    return SpectralBasis(data[:k].copy(), data[k:k + n * k].reshape(n, k).copy(), data[k + n * k:].copy())
