"""Test surfaces and fields: icospheres, the hat-shaped step, a torus and
seeded Gaussian noise."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import TriangleMesh, subdivide
from .regress import KernelSpec, ScalarField, regress
from .spectral import SpectralBasis, assemble_cotan, solve_eigen

_PHI = (1.0 + np.sqrt(5.0)) / 2.0

_ICO_FACES = [
    (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
    (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
    (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
    (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
]


def icosahedron(edge: float | None = None) -> TriangleMesh:
    """Regular icosahedron, circumradius 1 unless an edge length is given."""
    v = np.array([
        (-1, _PHI, 0), (1, _PHI, 0), (-1, -_PHI, 0), (1, -_PHI, 0),
        (0, -1, _PHI), (0, 1, _PHI), (0, -1, -_PHI), (0, 1, -_PHI),
        (_PHI, 0, -1), (_PHI, 0, 1), (-_PHI, 0, -1), (-_PHI, 0, 1),
    ], dtype=float)
    if edge is None:
        v /= np.linalg.norm(v[0])
    else:
        v *= edge / 2.0
    return TriangleMesh.from_arrays(v, _ICO_FACES)


def unit_sphere(level: int) -> TriangleMesh:
    """Icosahedron subdivided ``level`` times, projected onto the unit sphere."""
    if not 0 <= level <= 7:
        raise ValueError("subdivision level must be in 0..7")
    mesh = icosahedron()
    for _ in range(level):
        mesh = subdivide(mesh)
        v = mesh.vertices / np.linalg.norm(mesh.vertices, axis=1, keepdims=True)
        mesh = mesh.transformed(v)
    return mesh


def sphere(level: int, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    m = unit_sphere(level)
    return m.transformed(radius * m.vertices + np.asarray(center, dtype=float))


def torus(n_major: int, n_minor: int, major: float = 2.0, minor: float = 1.0) -> TriangleMesh:
    """Closed torus on an ``n_major x n_minor`` parameter grid (Euler characteristic 0)."""
    u = 2 * np.pi * np.arange(n_major) / n_major
    w = 2 * np.pi * np.arange(n_minor) / n_minor
    uu, ww = np.meshgrid(u, w, indexing="ij")
    r = major + minor * np.cos(ww)
    v = np.stack([r * np.cos(uu), r * np.sin(uu), minor * np.sin(ww)], axis=-1).reshape(-1, 3)
    idx = np.arange(n_major * n_minor).reshape(n_major, n_minor)
    a = idx
    b = np.roll(idx, -1, axis=0)
    c = np.roll(np.roll(idx, -1, axis=0), -1, axis=1)
    d = np.roll(idx, -1, axis=1)
    faces = np.concatenate([
        np.stack([a, b, c], axis=-1).reshape(-1, 3),
        np.stack([a, c, d], axis=-1).reshape(-1, 3),
    ])
    return TriangleMesh.from_arrays(v, faces)


def _stitch(inner: np.ndarray, inner_ang: np.ndarray, outer: np.ndarray, outer_ang: np.ndarray):
    """Triangulate the strip between two closed rings of vertex ids (CCW)."""
    faces = []
    ni, no = len(inner), len(outer)
    i = o = 0
    while i < ni or o < no:
        # advance along whichever ring has the smaller next angle
        next_i = inner_ang[(i + 1) % ni] + (2 * np.pi if i + 1 >= ni else 0.0)
        next_o = outer_ang[(o + 1) % no] + (2 * np.pi if o + 1 >= no else 0.0)
        if o < no and (i >= ni or next_o <= next_i):
            faces.append((inner[i % ni], outer[o % no], outer[(o + 1) % no]))
            o += 1
        else:
            faces.append((inner[i % ni], outer[o % no], inner[(i + 1) % ni]))
            i += 1
    return faces


def hat_surface(radial: int = 40, angular: int = 160,
                planar: bool = False) -> tuple[TriangleMesh, ScalarField]:
    """Hat-shaped step: height 1 inside the unit disk, 0 out to radius sqrt(2).

    Vertices lie on concentric rings whose vertex count grows with the radius
    (about ``angular`` on the outer rim), so vertex density is roughly
    uniform in area. A ring sits exactly on radius 1 and belongs to the
    outer, zero-valued part. The returned field equals the z coordinate of
    the embedded hat.

    Intrinsically the embedded hat turns the step into a ramp along its
    one-element wall. ``planar=True`` keeps the same connectivity and field
    but flattens the mesh to ``z = 0``, where the step is a true jump.
    """
    if radial < 8 or angular < 8:
        raise ValueError("resolutions must be at least 8")
    rmax = np.sqrt(2.0)
    n_in = max(2, int(round(radial / rmax)))
    n_out = max(1, radial - n_in)
    radii = np.concatenate([np.linspace(0.0, 1.0, n_in + 1), np.linspace(1.0, rmax, n_out + 1)[1:]])

    pts = [(0.0, 0.0)]
    rings, angles = [np.array([0])], [np.array([0.0])]
    for r in radii[1:]:
        m = max(6, int(round(angular * r / rmax)))
        ang = 2 * np.pi * np.arange(m) / m
        ids = np.arange(len(pts), len(pts) + m)
        pts += list(zip(r * np.cos(ang), r * np.sin(ang)))
        rings.append(ids)
        angles.append(ang)

    faces = []
    centre, first = rings[0][0], rings[1]
    faces += [(centre, first[j], first[(j + 1) % len(first)]) for j in range(len(first))]
    for a in range(1, len(rings) - 1):
        faces += _stitch(rings[a], angles[a], rings[a + 1], angles[a + 1])

    xy = np.array(pts)
    r2 = np.sum(xy**2, axis=1)
    # rings are placed on exact radii; snap r^2 to kill round-off at r = 1
    z = (np.round(r2, 12) < 1.0).astype(float)
    mesh = TriangleMesh.from_arrays(np.column_stack([xy, np.zeros_like(z) if planar else z]), faces)
    return mesh, ScalarField(z, "hat")


@dataclass(frozen=True)
class GibbsResult:
    n_vertices: int
    k: int
    t: float
    lse_overshoot: float
    kernel_overshoot: float
    lse: ScalarField
    kernel: ScalarField
    mesh: TriangleMesh

    @property
    def ratio(self) -> float:
        return self.kernel_overshoot / self.lse_overshoot if self.lse_overshoot > 0 else float("nan")


def overshoot(values) -> float:
    """How far a reconstruction of the 0/1 step rises above 1."""
    return max(float(np.max(values)) - 1.0, 0.0)


def gibbs_comparison(radial: int = 60, angular: int | None = None, t: float = 1e-4,
                     k: int | None = None, basis: SpectralBasis | None = None) -> GibbsResult:
    """Reconstruct the hat step by least squares and by heat kernel regression.

    Both use the same ``k`` eigenfunctions of the flattened hat domain;
    ``k`` defaults to 60% of the vertex count, since a basis close to
    complete interpolates the step and shows no ringing.
    """
    if angular is None:
        angular = int(round(4.4 * radial))
    mesh, f = hat_surface(radial, angular, planar=True)
    n = mesh.n_vertices
    if k is None:
        k = int(round(0.6 * n))
    k = min(k, n)
    if basis is None or basis.k < k:
        basis = solve_eigen(assemble_cotan(mesh), k)
    basis = basis.truncated(k)
    lse = regress(f, basis, KernelSpec.identity())
    smooth = regress(f, basis, KernelSpec.heat(t))
    return GibbsResult(n, k, t, overshoot(lse.values), overshoot(smooth.values), lse, smooth, mesh)


def gaussian_noise_field(mesh: TriangleMesh, sigma: float = 1.0, seed: int | None = 0,
                         rng: np.random.Generator | None = None) -> ScalarField:
    """I.i.d. ``N(0, sigma^2)`` per vertex from a seeded generator."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if rng is None:
        rng = np.random.default_rng(seed)
    return ScalarField(rng.normal(0.0, sigma, mesh.n_vertices), "noise")
