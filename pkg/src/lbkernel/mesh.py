"""Triangle meshes: loading, validation and topology.

A :class:`TriangleMesh` is an immutable pair of vertex and face arrays with
a per-vertex connected-component label. Meshes may be open (for unit tests
and demos) but the Minkowski functionals used for random field inference are
only defined for closed surfaces.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph


class MeshError(ValueError):
    """Base class for invalid mesh input."""


class MeshParseError(MeshError):
    pass


class IndexOutOfRangeError(MeshError):
    pass


class DegenerateFaceError(MeshError):
    pass


class NonManifoldEdgeError(MeshError):
    pass


class OrientationError(MeshError):
    pass


class UnsupportedTopologyError(MeshError):
    pass


@dataclass(frozen=True)
class TriangleMesh:
    """Validated triangle mesh.

    Parameters
    ----------
    vertices : ndarray, shape (n, 3)
        Vertex positions.
    faces : ndarray, shape (m, 3)
        Vertex indices of each triangle, consistently oriented per component.
    component_of : ndarray, shape (n,)
        Connected-component label of each vertex. Labels are ordered by the
        smallest vertex index they contain.

    Use :meth:`from_arrays` rather than the constructor; it validates the
    input and computes the labels.
    """

    vertices: np.ndarray
    faces: np.ndarray
    component_of: np.ndarray

    @classmethod
    def from_arrays(cls, vertices, faces) -> "TriangleMesh":
        v = np.array(vertices, dtype=np.float64).reshape(-1, 3)
        f = np.array(faces, dtype=np.int64).reshape(-1, 3)
        _validate(v, f)
        labels = _component_labels(len(v), f)
        for arr in (v, f, labels):
            arr.setflags(write=False)
        return cls(v, f, labels)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def n_components(self) -> int:
        return int(self.component_of.max()) + 1 if self.n_vertices else 0

    def face_areas(self) -> np.ndarray:
        p = self.vertices[self.faces]
        cross = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        return 0.5 * np.linalg.norm(cross, axis=1)

    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted index pairs, shape (e, 2)."""
        return np.unique(np.sort(_directed_edges(self.faces), axis=1), axis=0)

    def boundary_edges(self) -> np.ndarray:
        und = np.sort(_directed_edges(self.faces), axis=1)
        uniq, counts = np.unique(und, axis=0, return_counts=True)
        return uniq[counts == 1]

    def transformed(self, vertices) -> "TriangleMesh":
        """Same connectivity, new vertex positions."""
        return TriangleMesh.from_arrays(vertices, self.faces)


def _directed_edges(faces: np.ndarray) -> np.ndarray:
    return np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])


def _validate(v: np.ndarray, f: np.ndarray) -> None:
    n = len(v)
    if not np.all(np.isfinite(v)):
        raise MeshError("vertex coordinates must be finite")
    if f.size:
        bad = np.flatnonzero((f < 0) | (f >= n))
        if bad.size:
            face = bad[0] // 3
            raise IndexOutOfRangeError(
                f"face {face} references vertex {f.flat[bad[0]]}, "
                f"but the mesh has {n} vertices"
            )
        degenerate = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 2] == f[:, 0])
        if degenerate.any():
            face = int(np.flatnonzero(degenerate)[0])
            raise DegenerateFaceError(f"face {face} repeats a vertex: {f[face].tolist()}")

    directed = _directed_edges(f)
    und = np.sort(directed, axis=1)
    uniq, counts = np.unique(und, axis=0, return_counts=True)
    if (counts > 2).any():
        a, b = uniq[np.argmax(counts > 2)]
        raise NonManifoldEdgeError(f"edge ({a}, {b}) is shared by more than two faces")
    # consistent orientation: each interior edge used once in each direction
    uniq_d, dcounts = np.unique(directed, axis=0, return_counts=True)
    if (dcounts > 1).any():
        a, b = uniq_d[np.argmax(dcounts > 1)]
        raise OrientationError(f"directed edge ({a}, {b}) appears twice; orientation is inconsistent")


def _component_labels(n: int, faces: np.ndarray) -> np.ndarray:
    e = _directed_edges(faces)
    graph = sparse.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
    _, raw = csgraph.connected_components(graph, directed=False)
    # relabel by first occurrence so label order follows smallest vertex index
    _, first = np.unique(raw, return_index=True)
    order = np.argsort(first)
    remap = np.empty_like(order)
    remap[order] = np.arange(len(order))
    return remap[raw].astype(np.int64)


def disjoint_union(*meshes: TriangleMesh) -> TriangleMesh:
    verts, faces, offset = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + offset)
        offset += m.n_vertices
    return TriangleMesh.from_arrays(np.concatenate(verts), np.concatenate(faces))


def subdivide(mesh: TriangleMesh) -> TriangleMesh:
    """Split every face 1 -> 4 at edge midpoints (topology preserving)."""
    edges = mesh.edges()
    n = mesh.n_vertices
    index = {(int(a), int(b)): n + i for i, (a, b) in enumerate(edges)}
    mids = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])

    def mid(a, b):
        return index[(a, b) if a < b else (b, a)]

    new_faces = []
    for a, b, c in mesh.faces.tolist():
        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
    return TriangleMesh.from_arrays(np.vstack([mesh.vertices, mids]), new_faces)


# --------------------------------------------------------------------------
# topology

@dataclass(frozen=True)
class TopologySummary:
    n_components: int
    euler_per_component: tuple[int, ...]
    total_area: float
    is_closed: bool

    @property
    def euler(self) -> int:
        return sum(self.euler_per_component)


def topology_summary(mesh: TriangleMesh) -> TopologySummary:
    labels = mesh.component_of
    k = mesh.n_components
    n_v = np.bincount(labels, minlength=k)
    n_f = np.bincount(labels[mesh.faces[:, 0]], minlength=k)
    edges = mesh.edges()
    n_e = np.bincount(labels[edges[:, 0]], minlength=k)
    chi = tuple(int(x) for x in n_v - n_e + n_f)
    return TopologySummary(
        n_components=k,
        euler_per_component=chi,
        total_area=float(mesh.face_areas().sum()),
        is_closed=len(mesh.boundary_edges()) == 0,
    )


def minkowski_functionals(summary: TopologySummary) -> tuple[float, float, float]:
    """Intrinsic volumes ``(mu0, mu1, mu2)`` of a closed surface.

    ``mu0`` is the Euler characteristic summed over components, ``mu1`` is
    zero because there is no boundary and ``mu2`` is half the area.
    """
    if summary.n_components == 0:
        raise UnsupportedTopologyError("mesh has no components")
    if not summary.is_closed:
        raise UnsupportedTopologyError(
            "Minkowski functionals are only available for closed surfaces; "
            "the mesh has boundary edges"
        )
    return float(summary.euler), 0.0, summary.total_area / 2.0


# --------------------------------------------------------------------------
# file formats

def load_mesh(path, format: str | None = None) -> TriangleMesh:
    """Read an OFF or ascii PLY triangle mesh.

    ``format`` is ``"off"`` or ``"ply"``; when omitted it is taken from the
    file suffix.
    """
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    text = path.read_text()
    if fmt == "off":
        v, f = _parse_off(text)
    elif fmt == "ply":
        v, f = _parse_ply(text)
    else:
        raise MeshParseError(f"unknown mesh format {fmt!r}")
    return TriangleMesh.from_arrays(v, f)


def _tokens_without_comments(text: str) -> list[list[str]]:
    lines = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            lines.append(line.split())
    return lines


def _parse_off(text: str):
    lines = _tokens_without_comments(text)
    if not lines or not lines[0][0].endswith("OFF"):
        raise MeshParseError("missing OFF header")
    if lines[0][0] != "OFF":
        raise MeshParseError(f"unsupported OFF variant {lines[0][0]!r}")
    # counts may share the header line
    head = lines[0][1:] or (lines[1] if len(lines) > 1 else [])
    body = lines[1:] if lines[0][1:] else lines[2:]
    try:
        nv, nf = int(head[0]), int(head[1])
    except (IndexError, ValueError):
        raise MeshParseError("malformed OFF counts line") from None
    if len(body) < nv + nf:
        raise MeshParseError(f"expected {nv} vertices and {nf} faces, file is truncated")
    try:
        verts = [[float(x) for x in row[:3]] for row in body[:nv]]
        faces = []
        for row in body[nv:nv + nf]:
            count = int(row[0])
            if count != 3 or len(row) < 4:
                raise MeshParseError(f"only triangles are supported, got a {count}-gon")
            faces.append([int(x) for x in row[1:4]])
    except ValueError as exc:
        raise MeshParseError(f"bad number in OFF body: {exc}") from None
    if any(len(p) != 3 for p in verts):
        raise MeshParseError("vertex line with fewer than three coordinates")
    return np.array(verts, dtype=float).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


def _parse_ply(text: str):
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise MeshParseError("missing ply magic")
    elements: list[list] = []  # [name, count, [property names]]
    i = 1
    fmt = None
    while i < len(lines):
        tok = lines[i].split()
        i += 1
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append([tok[1], int(tok[2]), []])
        elif tok[0] == "property":
            if not elements:
                raise MeshParseError("property before element")
            elements[-1][2].append(tok[-1] if tok[1] != "list" else ("list", tok[-1]))
        elif tok[0] == "end_header":
            break
    else:
        raise MeshParseError("missing end_header")
    if fmt != "ascii":
        raise MeshParseError(f"only ascii PLY is supported, got {fmt!r}")

    body = [ln.split() for ln in lines[i:] if ln.strip()]
    pos = 0
    verts = faces = None
    try:
        for name, count, props in elements:
            rows = body[pos:pos + count]
            if len(rows) < count:
                raise MeshParseError(f"element {name!r} is truncated")
            pos += count
            if name == "vertex":
                idx = [props.index(c) for c in ("x", "y", "z")]
                verts = [[float(r[j]) for j in idx] for r in rows]
            elif name == "face":
                faces = []
                for r in rows:
                    if int(r[0]) != 3:
                        raise MeshParseError(f"only triangles are supported, got a {r[0]}-gon")
                    faces.append([int(x) for x in r[1:4]])
    except (ValueError, IndexError) as exc:
        raise MeshParseError(f"bad PLY body: {exc}") from None
    if verts is None or faces is None:
        raise MeshParseError("PLY needs vertex and face elements")
    return np.array(verts, dtype=float).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


def write_off(mesh: TriangleMesh, path) -> None:
    lines = ["OFF", f"{mesh.n_vertices} {mesh.n_faces} 0"]
    lines += [" ".join(repr(float(x)) for x in p) for p in mesh.vertices]
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")
