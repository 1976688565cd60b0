"""Spectral kernel regression on a Laplace-Beltrami eigenbasis.

Every smoother here has the form ``h = sum_j tau_j beta_j psi_j`` with
``beta_j = f' A psi_j``; only the weights ``tau_j`` differ. The heat kernel
uses ``exp(-lambda_j t)``, least squares (a truncated Fourier series) uses
ones, and a diffusion wavelet with scale function ``g`` uses
``g(lambda_j t)``.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .spectral import SpectralBasis, fourier_coefficients

DENSE_KERNEL_LIMIT = 2000


@dataclass(frozen=True)
class ScalarField:
    """One finite value per vertex."""

    values: np.ndarray
    name: str = "f"

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).ravel()
        if not np.all(np.isfinite(values)):
            bad = int(np.flatnonzero(~np.isfinite(values))[0])
            raise ValueError(f"field {self.name!r} is not finite at vertex {bad}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return len(self.values)


def as_values(f) -> np.ndarray:
    if isinstance(f, ScalarField):
        return f.values
    return ScalarField(f).values


@dataclass(frozen=True)
class KernelSpec:
    """Spectral weight choice.

    ``kind`` is ``"heat"``, ``"identity"`` or ``"custom"``; ``g`` is the
    scale function of a custom kernel, evaluated at ``lambda * t``. ``k``
    truncates the basis (``None`` uses all of it).
    """

    kind: str
    t: float = 0.0
    g: Callable[[np.ndarray], np.ndarray] | None = field(default=None, compare=False)
    k: int | None = None

    def __post_init__(self):
        if self.kind not in ("heat", "identity", "custom"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.t < 0:
            raise ValueError(f"bandwidth must be nonnegative, got {self.t}")
        if self.kind == "custom" and self.g is None:
            raise ValueError("custom kernel needs a scale function g")

    @classmethod
    def heat(cls, t: float, k: int | None = None) -> "KernelSpec":
        return cls("heat", t=t, k=k)

    @classmethod
    def identity(cls, k: int | None = None) -> "KernelSpec":
        return cls("identity", k=k)

    @classmethod
    def custom(cls, g, t: float, k: int | None = None) -> "KernelSpec":
        return cls("custom", t=t, g=g, k=k)


def kernel_weights(spec: KernelSpec, eigenvalues) -> np.ndarray:
    lam = np.asarray(eigenvalues, dtype=np.float64)
    if spec.kind == "identity":
        return np.ones_like(lam)
    if spec.kind == "heat":
        return np.exp(-lam * spec.t)
    tau = np.asarray(spec.g(lam * spec.t), dtype=np.float64) * np.ones_like(lam)
    g0 = float(np.asarray(spec.g(np.zeros(1)), dtype=np.float64).ravel()[0])
    if g0 == 0.0:
        raise ValueError("scale function vanishes at 0; kernel cannot be normalised")
    if g0 != 1.0:
        warnings.warn(f"scale function rescaled by 1/{g0:g} so that g(0) = 1", stacklevel=2)
        tau = tau / g0
    return tau


def _truncate(basis: SpectralBasis, spec: KernelSpec) -> SpectralBasis:
    if spec.k is None or spec.k == basis.k:
        return basis
    if spec.k > basis.k:
        raise ValueError(f"kernel truncation {spec.k} exceeds basis size {basis.k}")
    return basis.truncated(spec.k)


def regress(f, basis: SpectralBasis, spec: KernelSpec) -> ScalarField:
    """Kernel regression estimate ``sum_j tau_j beta_j psi_j``.

    This is the minimiser of the kernel-weighted squared residual over the
    span of the first ``k`` eigenfunctions, and it is linear in ``f``.
    """
    name = f.name if isinstance(f, ScalarField) else "f"
    values = as_values(f)
    b = _truncate(basis, spec)
    tau = kernel_weights(spec, b.eigenvalues)
    beta = fourier_coefficients(values, b)
    return ScalarField(b.eigenfunctions @ (tau * beta), f"{name}_{spec.kind}")


def smooth_many(fields: np.ndarray, basis: SpectralBasis, spec: KernelSpec) -> np.ndarray:
    """Row-wise :func:`regress` for an array of shape (m, n)."""
    x = np.atleast_2d(np.asarray(fields, dtype=np.float64))
    if x.shape[1] != basis.n:
        raise ValueError(f"fields have {x.shape[1]} columns, expected {basis.n}")
    b = _truncate(basis, spec)
    tau = kernel_weights(spec, b.eigenvalues)
    beta = (x * b.mass) @ b.eigenfunctions
    return (beta * tau) @ b.eigenfunctions.T


def diffusion_solve(f, basis: SpectralBasis, t: float) -> ScalarField:
    """Heat equation ``dg/dt + L g = 0`` with ``g(., 0) = f``, at time ``t``."""
    if t < 0:
        raise ValueError(f"diffusion time must be nonnegative, got {t}")
    return regress(f, basis, KernelSpec.heat(t))


def wavelet_transform(f, basis: SpectralBasis, g, t: float) -> ScalarField:
    """Diffusion wavelet transform with scale function ``g`` at scale ``t``.

    Evaluated at every vertex ``q`` this is ``<W_{t,q}, f>`` with
    ``W_{t,q}(p) = sum_j g(lambda_j t) psi_j(p) psi_j(q)``, i.e. kernel
    regression with weights ``g(lambda_j t)``.
    """
    return regress(f, basis, KernelSpec.custom(g, t))


def kernel_matrix(basis: SpectralBasis, spec: KernelSpec, limit: int = DENSE_KERNEL_LIMIT) -> np.ndarray:
    """Dense ``K = Psi diag(tau) Psi'``; smoothing is ``K @ (A f)``."""
    if basis.n > limit:
        raise ValueError(f"{basis.n} vertices exceed the dense kernel limit {limit}")
    b = _truncate(basis, spec)
    tau = kernel_weights(spec, b.eigenvalues)
    psi = b.eigenfunctions
    K = (psi * tau) @ psi.T
    return 0.5 * (K + K.T)


# --------------------------------------------------------------------------
# field I/O

def write_field_csv(f, path) -> None:
    values = as_values(f)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["vertex_index", "value"])
        for i, x in enumerate(values):
            w.writerow([i, repr(float(x))])


def read_field_csv(path, n: int | None = None) -> ScalarField:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows and rows[0] and not _is_int(rows[0][0]):
        rows = rows[1:]
    idx = np.array([int(r[0]) for r in rows], dtype=np.int64)
    vals = np.array([float(r[1]) for r in rows])
    size = n if n is not None else (idx.max() + 1 if idx.size else 0)
    if len(idx) != size or not np.array_equal(np.sort(idx), np.arange(size)):
        raise ValueError(f"{path}: expected one row per vertex 0..{size - 1}")
    out = np.empty(size)
    out[idx] = vals
    return ScalarField(out, Path(path).stem)


def _is_int(s: str) -> bool:
    try:
        int(s)
    except ValueError:
        return False
    return True


def write_field_vtk(mesh, fields, path) -> None:
    """Legacy ASCII VTK polydata with one POINT_DATA scalar per field."""
    if isinstance(fields, ScalarField):
        fields = [fields]
    lines = [
        "# vtk DataFile Version 3.0",
        "lbkernel scalar field",
        "ASCII",
        "DATASET POLYDATA",
        f"POINTS {mesh.n_vertices} double",
    ]
    lines += [" ".join(repr(float(x)) for x in p) for p in mesh.vertices]
    lines.append(f"POLYGONS {mesh.n_faces} {4 * mesh.n_faces}")
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.faces]
    lines.append(f"POINT_DATA {mesh.n_vertices}")
    for f in fields:
        if len(f) != mesh.n_vertices:
            raise ValueError(f"field {f.name!r} does not match the mesh")
        name = "".join(ch if ch.isalnum() or ch == "_" else "_" for ch in f.name) or "field"
        lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
        lines += [repr(float(x)) for x in f.values]
    Path(path).write_text("\n".join(lines) + "\n")
