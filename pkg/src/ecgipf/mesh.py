"""Triangle surface meshes, conductivity annotation, electrodes and VTK output.

Positions are millimetres throughout. Meshes are treated as immutable: every
operation that changes a mesh returns a new :class:`TriMesh`.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import (
    InvalidConductivityError,
    MeshFormatError,
    MeshValidationError,
    ResourceLimitError,
)

MIN_TRIANGLE_AREA = 1e-12
MAX_SUBDIVISIONS = 6


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TriMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    conductivity: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "vertices", _readonly(np.asarray(self.vertices, dtype=float)))
        object.__setattr__(self, "triangles", _readonly(np.asarray(self.triangles, dtype=np.int64)))
        if self.conductivity is not None:
            object.__setattr__(
                self, "conductivity", _readonly(np.asarray(self.conductivity, dtype=float))
            )

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def tensors(self) -> np.ndarray:
        """Per-vertex (m, 3, 3) conductivity; identity when unset."""
        if self.conductivity is None:
            return np.broadcast_to(np.eye(3), (self.n_vertices, 3, 3))
        return self.conductivity

    def with_conductivity(self, tensors: np.ndarray | None) -> "TriMesh":
        return TriMesh(self.vertices, self.triangles, tensors)

    @cached_property
    def face_normals(self) -> np.ndarray:
        """Unnormalised face normals; their length is twice the triangle area."""
        v = self.vertices
        t = self.triangles
        return np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])

    @cached_property
    def triangle_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals, axis=1)

    @cached_property
    def normals(self) -> np.ndarray:
        """Area-weighted vertex normals, unit length."""
        acc = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(acc, self.triangles[:, k], self.face_normals)
        norm = np.linalg.norm(acc, axis=1, keepdims=True)
        norm[norm == 0] = 1.0
        return acc / norm

    @cached_property
    def vertex_areas(self) -> np.ndarray:
        """Barycentric lumped area: one third of the incident triangle areas."""
        a = np.zeros(self.n_vertices)
        for k in range(3):
            np.add.at(a, self.triangles[:, k], self.triangle_areas / 3.0)
        return a

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges as an (E, 2) array with ``i < j``, sorted."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    @cached_property
    def neighbors(self) -> list[np.ndarray]:
        e = self.edges
        both = np.concatenate([e, e[:, ::-1]])
        order = np.lexsort((both[:, 1], both[:, 0]))
        both = both[order]
        splits = np.searchsorted(both[:, 0], np.arange(1, self.n_vertices))
        return np.split(both[:, 1], splits)

    @cached_property
    def checksum(self) -> str:
        """Content hash over geometry and conductivity."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.vertices, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.triangles, dtype="<i8").tobytes())
        if self.conductivity is not None:
            h.update(np.ascontiguousarray(self.conductivity, dtype="<f8").tobytes())
        return h.hexdigest()

    @cached_property
    def geometry_checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.vertices, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.triangles, dtype="<i8").tobytes())
        return h.hexdigest()

    def is_closed(self) -> bool:
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return bool(np.all(counts == 2))


def validate(mesh: TriMesh) -> list[str]:
    """Return every invariant violation found on ``mesh`` (empty when valid)."""
    out = []
    v, t = mesh.vertices, mesh.triangles
    m = len(v)
    if v.ndim != 2 or v.shape[1] != 3:
        return [f"vertices must have shape (m, 3), got {v.shape}"]
    if t.ndim != 2 or t.shape[1] != 3:
        return [f"triangles must have shape (k, 3), got {t.shape}"]
    if m == 0:
        return ["mesh has no vertices"]
    if not np.all(np.isfinite(v)):
        out.append("non-finite vertex coordinates")
    bad = np.flatnonzero((t < 0).any(axis=1) | (t >= m).any(axis=1))
    if len(bad):
        out.append(f"triangle index out of range (triangle {bad[0]}: {t[bad[0]].tolist()}, m={m})")
        return out
    rep = np.flatnonzero((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2]))
    if len(rep):
        out.append(f"triangle with repeated vertices (triangle {rep[0]})")
    small = np.flatnonzero(mesh.triangle_areas <= MIN_TRIANGLE_AREA)
    if len(small):
        out.append(f"zero-area triangle (triangle {small[0]}, area {mesh.triangle_areas[small[0]]:.3g})")
    if len(t):
        e = mesh.edges
        g = coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(m, m))
        n_comp, _ = connected_components(g, directed=False)
    else:
        n_comp = m
    if n_comp != 1:
        out.append(f"edge graph is not connected ({n_comp} components)")
    if mesh.conductivity is not None:
        c = mesh.conductivity
        if c.shape != (m, 3, 3):
            out.append(f"conductivity must have shape ({m}, 3, 3), got {c.shape}")
        else:
            if not np.allclose(c, np.swapaxes(c, 1, 2), atol=1e-12):
                out.append("conductivity tensor not symmetric")
            elif np.linalg.eigvalsh(c).min() <= 0:
                out.append("conductivity tensor not positive definite")
    return out


def check(mesh: TriMesh) -> TriMesh:
    problems = validate(mesh)
    if problems:
        raise MeshValidationError(problems)
    return mesh


# ---------------------------------------------------------------- file input

def _parse_off(lines: list[str]) -> tuple[np.ndarray, np.ndarray]:
    body = []
    for i, raw in enumerate(lines, start=1):
        s = raw.split("#", 1)[0].strip()
        if s:
            body.append((i, s))
    if not body or not body[0][1].upper().startswith("OFF"):
        raise MeshFormatError("missing OFF header", body[0][0] if body else 1)
    lineno, head = body[0]
    rest = head[3:].split()
    pos = 1
    if not rest:
        if len(body) < 2:
            raise MeshFormatError("missing element counts", lineno)
        lineno, head = body[1]
        rest = head.split()
        pos = 2
    try:
        nv, nf = int(rest[0]), int(rest[1])
    except (ValueError, IndexError):
        raise MeshFormatError("bad element counts", lineno) from None
    if len(body) < pos + nv + nf:
        raise MeshFormatError("file ends before all elements were read", body[-1][0])
    verts = np.empty((nv, 3))
    for k in range(nv):
        lineno, s = body[pos + k]
        try:
            verts[k] = [float(x) for x in s.split()[:3]]
        except ValueError:
            raise MeshFormatError(f"bad vertex '{s}'", lineno) from None
    tris = np.empty((nf, 3), dtype=np.int64)
    for k in range(nf):
        lineno, s = body[pos + nv + k]
        try:
            vals = [int(x) for x in s.split()]
        except ValueError:
            raise MeshFormatError(f"bad face '{s}'", lineno) from None
        if not vals or vals[0] != 3 or len(vals) < 4:
            raise MeshFormatError("only triangular faces are supported", lineno)
        tris[k] = vals[1:4]
    return verts, tris


def _parse_obj(lines: list[str]) -> tuple[np.ndarray, np.ndarray]:
    verts, tris = [], []
    for i, raw in enumerate(lines, start=1):
        s = raw.split("#", 1)[0].split()
        if not s:
            continue
        if s[0] == "v":
            try:
                verts.append([float(x) for x in s[1:4]])
            except ValueError:
                raise MeshFormatError(f"bad vertex '{raw.strip()}'", i) from None
            if len(verts[-1]) != 3:
                raise MeshFormatError("vertex needs 3 coordinates", i)
        elif s[0] == "f":
            if len(s) != 4:
                raise MeshFormatError("only triangular faces are supported", i)
            face = []
            for tok in s[1:]:
                try:
                    idx = int(tok.split("/")[0])
                except ValueError:
                    raise MeshFormatError(f"bad face index '{tok}'", i) from None
                face.append(idx - 1 if idx > 0 else len(verts) + idx)
            tris.append(face)
    if not verts:
        raise MeshFormatError("no vertices found", len(lines))
    return np.array(verts, dtype=float), np.array(tris, dtype=np.int64).reshape(-1, 3)


def load_mesh(path: Union[str, Path]) -> TriMesh:
    """Read an ASCII OFF or OBJ triangle mesh (coordinates in mm) and validate it."""
    path = Path(path)
    lines = path.read_text().splitlines()
    if path.suffix.lower() == ".obj":
        v, t = _parse_obj(lines)
    else:
        v, t = _parse_off(lines)
    return check(TriMesh(v, t))


def save_off(path: Union[str, Path], mesh: TriMesh) -> None:
    with open(path, "w") as f:
        f.write(f"OFF\n{mesh.n_vertices} {mesh.n_triangles} 0\n")
        for p in mesh.vertices:
            f.write(" ".join(repr(float(c)) for c in p) + "\n")
        for a, b, c in mesh.triangles:
            f.write(f"3 {a} {b} {c}\n")


# ------------------------------------------------------------ test geometry

def _icosahedron() -> tuple[np.ndarray, list[tuple[int, int, int]]]:
    p = (1.0 + 5 ** 0.5) / 2.0
    v = np.array([
        [-1, p, 0], [1, p, 0], [-1, -p, 0], [1, -p, 0],
        [0, -1, p], [0, 1, p], [0, -1, -p], [0, 1, -p],
        [p, 0, -1], [p, 0, 1], [-p, 0, -1], [-p, 0, 1],
    ], dtype=float)
    f = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    return v / np.linalg.norm(v, axis=1, keepdims=True), f


def icosphere(subdivisions: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit icosphere. Vertices of level s are a prefix of those of level s+1."""
    verts, faces = _icosahedron()
    verts = list(verts)
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return np.array(verts), np.array(faces, dtype=np.int64)


def make_test_mesh(
    kind: str = "sphere",
    radius_mm: float = 30.0,
    subdivisions: int = 3,
    axis_scales: Sequence[float] = (1.0, 0.7, 0.5),
) -> TriMesh:
    """Icosphere of ``10 * 4**s + 2`` vertices, optionally stretched into an ellipsoid."""
    if subdivisions > MAX_SUBDIVISIONS:
        raise ResourceLimitError(
            f"subdivisions={subdivisions} exceeds the limit of {MAX_SUBDIVISIONS}"
        )
    if subdivisions < 0:
        raise ValueError("subdivisions must be >= 0")
    if radius_mm <= 0:
        raise ValueError("radius_mm must be positive")
    v, t = icosphere(subdivisions)
    v = v * radius_mm
    if kind == "ellipsoid":
        v = v * np.asarray(axis_scales, dtype=float)
    elif kind != "sphere":
        raise ValueError(f"unknown mesh kind {kind!r}")
    return check(TriMesh(v, t))


# --------------------------------------------------------------- electrodes

@dataclass(frozen=True, eq=False)
class ElectrodeSet:
    positions: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "positions", _readonly(np.atleast_2d(np.asarray(self.positions, float))))

    @property
    def count(self) -> int:
        return len(self.positions)


def winding_number(mesh: TriMesh, points: np.ndarray) -> np.ndarray:
    """Generalised winding number of a closed mesh around each point."""
    points = np.atleast_2d(points)
    v = mesh.vertices[mesh.triangles]  # (k, 3, 3)
    out = np.empty(len(points))
    for n, p in enumerate(points):
        a, b, c = (v[:, i] - p for i in range(3))
        la, lb, lc = (np.linalg.norm(x, axis=1) for x in (a, b, c))
        num = np.einsum("ij,ij->i", a, np.cross(b, c))
        den = (la * lb * lc + np.einsum("ij,ij->i", a, b) * lc
               + np.einsum("ij,ij->i", b, c) * la + np.einsum("ij,ij->i", c, a) * lb)
        out[n] = np.sum(2.0 * np.arctan2(num, den)) / (4.0 * np.pi)
    return out


def check_electrodes(mesh: TriMesh, electrodes: ElectrodeSet) -> None:
    pos = electrodes.positions
    if electrodes.count < 1:
        raise ValueError("electrode set is empty")
    dmin = np.min(np.linalg.norm(pos[:, None, :] - mesh.vertices[None], axis=2), axis=1)
    if np.any(dmin <= 0):
        raise ValueError(f"electrode {int(np.argmin(dmin))} coincides with a mesh vertex")
    if mesh.is_closed():
        inside = np.flatnonzero(np.abs(winding_number(mesh, pos)) > 0.5)
        if len(inside):
            raise ValueError(f"electrodes {inside.tolist()[:5]} lie inside the mesh")


def sphere_electrodes(count: int, radius_mm: float, center=(0.0, 0.0, 0.0)) -> ElectrodeSet:
    """Fibonacci-lattice electrodes on a sphere, a stand-in for torso surface nodes."""
    i = np.arange(count) + 0.5
    z = 1.0 - 2.0 * i / count
    phi = np.pi * (3.0 - 5 ** 0.5) * i
    rho = np.sqrt(1.0 - z * z)
    p = np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)
    return ElectrodeSet(p * radius_mm + np.asarray(center, float))


# ------------------------------------------------------------- conductivity

class Region:
    """Per-vertex predicate; subclasses implement :meth:`mask`."""

    def mask(self, mesh: TriMesh) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class EuclideanBall(Region):
    center: tuple[float, float, float]
    radius: float

    def mask(self, mesh):
        return np.linalg.norm(mesh.vertices - np.asarray(self.center), axis=1) <= self.radius


@dataclass(frozen=True)
class GeodesicBall(Region):
    """Ball in the geodesic metric of the mesh as currently annotated."""

    center_vertex: int
    radius: float

    def mask(self, mesh):
        from .geodesic import dijkstra_distances

        return dijkstra_distances(mesh, self.center_vertex) <= self.radius


@dataclass(frozen=True)
class Slab(Region):
    """Vertices within ``half_width`` of a plane, optionally clipped by half-spaces.

    Each clip is ``(normal, offset)`` and keeps points with ``normal . x >= offset``.
    Clipped slabs model partial lines of block that a front can detour around.
    """

    normal: tuple[float, float, float]
    offset: float = 0.0
    half_width: float = 3.0
    clips: tuple = ()

    def mask(self, mesh):
        n = np.asarray(self.normal, float)
        n = n / np.linalg.norm(n)
        x = mesh.vertices
        keep = np.abs(x @ n - self.offset) <= self.half_width
        for cn, off in self.clips:
            keep &= x @ np.asarray(cn, float) >= off
        return keep


@dataclass(frozen=True)
class Uniform:
    value: float = 1.0


@dataclass(frozen=True)
class Anisotropic:
    """Transversely isotropic tensor ``t I + (l - t) f f^T`` around a unit direction field.

    ``direction`` is a constant 3-vector or a callable mapping (m, 3) positions
    to (m, 3) directions.
    """

    direction: Union[tuple, Callable[[np.ndarray], np.ndarray]] = (1.0, 0.0, 0.0)
    longitudinal: float = 3.0
    transverse: float = 0.3


@dataclass(frozen=True)
class RegionScaled:
    region: Region
    factor: float
    base: Union[float, Uniform, Anisotropic] = 1.0


ConductivitySpec = Union[float, Uniform, Anisotropic, RegionScaled]


def conductivity_tensors(mesh: TriMesh, spec: ConductivitySpec) -> np.ndarray:
    m = mesh.n_vertices
    if isinstance(spec, (int, float)):
        spec = Uniform(float(spec))
    if isinstance(spec, Uniform):
        if spec.value <= 0:
            raise InvalidConductivityError(f"uniform conductivity must be > 0, got {spec.value}")
        return np.tile(spec.value * np.eye(3), (m, 1, 1))
    if isinstance(spec, Anisotropic):
        if spec.longitudinal <= 0 or spec.transverse <= 0:
            raise InvalidConductivityError("longitudinal and transverse values must be > 0")
        if callable(spec.direction):
            f = np.asarray(spec.direction(mesh.vertices), float)
        else:
            f = np.broadcast_to(np.asarray(spec.direction, float), (m, 3))
        norm = np.linalg.norm(f, axis=1, keepdims=True)
        if np.any(norm == 0):
            raise InvalidConductivityError("fibre direction field has zero vectors")
        f = f / norm
        return (spec.transverse * np.eye(3)[None]
                + (spec.longitudinal - spec.transverse) * f[:, :, None] * f[:, None, :])
    if isinstance(spec, RegionScaled):
        if spec.factor <= 0:
            raise InvalidConductivityError(f"region factor must be > 0, got {spec.factor}")
        base = conductivity_tensors(mesh, spec.base)
        inside = spec.region.mask(mesh)
        base[inside] *= spec.factor
        return base
    raise InvalidConductivityError(f"unsupported conductivity spec {spec!r}")


def set_conductivity(mesh: TriMesh, spec: ConductivitySpec) -> TriMesh:
    """Return a copy of ``mesh`` whose every vertex carries an SPD tensor from ``spec``."""
    tensors = conductivity_tensors(mesh, spec)
    if np.linalg.eigvalsh(tensors).min() <= 0:
        raise InvalidConductivityError("resulting conductivity is not positive definite")
    return mesh.with_conductivity(tensors)


# --------------------------------------------------------------- VTK output

def write_vtk(
    path: Union[str, Path],
    mesh: TriMesh,
    point_data: dict[str, np.ndarray] | None = None,
    title: str = "ecgipf",
) -> None:
    """Legacy ASCII VTK PolyData with optional per-vertex scalar arrays.

    NaN values (e.g. unactivated vertices) are written as NaN, which ParaView
    renders with the NaN colour.
    """
    title = title.replace("\n", " ")[:255]
    with open(path, "w") as f:
        f.write("# vtk DataFile Version 3.0\n")
        f.write(title + "\n")
        f.write("ASCII\nDATASET POLYDATA\n")
        f.write(f"POINTS {mesh.n_vertices} double\n")
        for p in mesh.vertices:
            f.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")
        f.write(f"POLYGONS {mesh.n_triangles} {4 * mesh.n_triangles}\n")
        for a, b, c in mesh.triangles:
            f.write(f"3 {a} {b} {c}\n")
        if point_data:
            f.write(f"POINT_DATA {mesh.n_vertices}\n")
            for name, values in point_data.items():
                values = np.asarray(values, dtype=float)
                if values.shape != (mesh.n_vertices,):
                    raise ValueError(f"field {name!r} has shape {values.shape}")
                f.write(f"SCALARS {name.replace(' ', '_')} double 1\nLOOKUP_TABLE default\n")
                for x in values:
                    f.write(f"{x:.9g}\n")


def transfer_vertex_field(source: TriMesh, target: TriMesh, values: np.ndarray) -> np.ndarray:
    """Nearest-vertex transfer of a per-vertex field between two meshes."""
    from scipy.spatial import cKDTree

    _, idx = cKDTree(source.vertices).query(target.vertices)
    return np.asarray(values)[idx]
