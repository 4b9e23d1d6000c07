"""Conductivity-weighted geodesic distances on triangle meshes.

Each edge length is divided by a directional conductivity correction
``min(sqrt(e^T s_a e / e^T e), sqrt(e^T s_b e / e^T e))`` taken over its two
endpoint tensors. Two backends produce distances from these weights:

* ``dijkstra`` - exact shortest paths on the weighted edge graph (default);
* ``fmm`` - first-arrival fast marching over triangles with a scalar
  per-vertex speed ``sqrt(smallest tensor eigenvalue)`` and the Dijkstra edge
  relaxation kept as a fallback candidate, so ``fmm <= dijkstra`` pointwise.
"""
from __future__ import annotations

import heapq
import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Union

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra as _csgraph_dijkstra

from .errors import GeodesicError, ResourceLimitError
from .mesh import TriMesh

MAX_TABLE_VERTICES = 20_000
BACKENDS = ("dijkstra", "fmm")
_TABLE_MAGIC = b"GEOT"


def edge_weight(pos_a, pos_b, sigma_a, sigma_b) -> float:
    """Corrected length of the edge ``a -> b``."""
    e = np.asarray(pos_b, float) - np.asarray(pos_a, float)
    ee = float(e @ e)
    if ee == 0.0:
        raise GeodesicError("degenerate edge: coincident endpoints")
    qa = float(e @ np.asarray(sigma_a, float) @ e) / ee
    qb = float(e @ np.asarray(sigma_b, float) @ e) / ee
    return math.sqrt(ee) / min(math.sqrt(qa), math.sqrt(qb))


def edge_weights(mesh: TriMesh) -> np.ndarray:
    """Vectorised :func:`edge_weight` over ``mesh.edges``."""
    i, j = mesh.edges.T
    e = mesh.vertices[j] - mesh.vertices[i]
    ee = np.einsum("ij,ij->i", e, e)
    if np.any(ee == 0):
        raise GeodesicError("degenerate edge: coincident endpoints")
    s = mesh.tensors()
    qa = np.einsum("ni,nij,nj->n", e, s[i], e) / ee
    qb = np.einsum("ni,nij,nj->n", e, s[j], e) / ee
    return np.sqrt(ee) / np.minimum(np.sqrt(qa), np.sqrt(qb))


def edge_graph(mesh: TriMesh) -> csr_matrix:
    e = mesh.edges
    w = edge_weights(mesh)
    m = mesh.n_vertices
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    return csr_matrix((np.concatenate([w, w]), (rows, cols)), shape=(m, m))


def _check_reachable(d: np.ndarray, sources) -> np.ndarray:
    bad = ~np.isfinite(d)
    if bad.any():
        rows, cols = np.nonzero(np.atleast_2d(bad))
        unreachable = np.unique(cols)
        raise GeodesicError(
            f"{len(unreachable)} vertices unreachable from source(s) {sources}: "
            f"{unreachable[:10].tolist()}{'...' if len(unreachable) > 10 else ''}"
        )
    return d


def dijkstra_distances(mesh: TriMesh, source: int) -> np.ndarray:
    """Single-source shortest paths on the corrected edge graph."""
    if not 0 <= source < mesh.n_vertices:
        raise IndexError(f"source {source} out of range")
    d = _csgraph_dijkstra(edge_graph(mesh), directed=False, indices=int(source))
    return _check_reachable(d, source)


def vertex_speeds(mesh: TriMesh) -> np.ndarray:
    """Isotropic speed per vertex: sqrt of the smallest conductivity eigenvalue."""
    return np.sqrt(np.linalg.eigvalsh(mesh.tensors())[:, 0])


class _FMMGeometry:
    """Per-mesh precomputation for repeated fast-marching solves."""

    def __init__(self, mesh: TriMesh):
        self.m = mesh.n_vertices
        self.xyz = mesh.vertices.tolist()
        speed = vertex_speeds(mesh)
        tri = mesh.triangles
        tri_speed = speed[tri].min(axis=1)
        self.vertex_tris: list[list[tuple[int, int, float]]] = [[] for _ in range(self.m)]
        for (a, b, c), f in zip(tri.tolist(), tri_speed.tolist()):
            self.vertex_tris[a].append((b, c, f))
            self.vertex_tris[b].append((c, a, f))
            self.vertex_tris[c].append((a, b, f))
        w = edge_weights(mesh)
        self.adj: list[list[tuple[int, float]]] = [[] for _ in range(self.m)]
        for (i, j), wij in zip(mesh.edges.tolist(), w.tolist()):
            self.adj[i].append((j, wij))
            self.adj[j].append((i, wij))

    def triangle_update(self, a: int, b: int, c: int, da: float, db: float, f: float) -> float:
        """Planar unfolding update of ``c`` from accepted ``a`` and ``b``."""
        pa, pb, pc = self.xyz[a], self.xyz[b], self.xyz[c]
        ab = [pb[k] - pa[k] for k in range(3)]
        ac = [pc[k] - pa[k] for k in range(3)]
        cab = math.sqrt(ab[0] ** 2 + ab[1] ** 2 + ab[2] ** 2) / f
        if cab == 0.0:
            return math.inf
        dot = (ab[0] * ac[0] + ab[1] * ac[1] + ab[2] * ac[2]) / (f * f)
        cr = [ab[1] * ac[2] - ab[2] * ac[1], ab[2] * ac[0] - ab[0] * ac[2], ab[0] * ac[1] - ab[1] * ac[0]]
        cross = math.sqrt(cr[0] ** 2 + cr[1] ** 2 + cr[2] ** 2) / (f * f)
        cx, cy = dot / cab, cross / cab
        xs = (da * da - db * db + cab * cab) / (2.0 * cab)
        h2 = da * da - xs * xs
        if h2 < 0.0:
            return math.inf
        ys = -math.sqrt(h2)
        t = -ys / (cy - ys)
        xcross = xs + t * (cx - xs)
        if xcross < 0.0 or xcross > cab:
            return math.inf
        dc = math.hypot(cx - xs, cy - ys)
        if dc < max(da, db):
            return math.inf
        return dc

    def solve(self, source: int) -> np.ndarray:
        d = [math.inf] * self.m
        done = [False] * self.m
        d[source] = 0.0
        heap = [(0.0, source)]
        while heap:
            du, u = heapq.heappop(heap)
            if done[u] or du > d[u]:
                continue
            done[u] = True
            for v, w in self.adj[u]:
                if not done[v] and du + w < d[v]:
                    d[v] = du + w
                    heapq.heappush(heap, (d[v], v))
            for b, c, f in self.vertex_tris[u]:
                # u accepted; update whichever of (b, c) is open from the other if accepted
                for x, y in ((b, c), (c, b)):
                    if done[x] and not done[y]:
                        cand = self.triangle_update(u, x, y, du, d[x], f)
                        if cand < d[y]:
                            d[y] = cand
                            heapq.heappush(heap, (cand, y))
        return np.array(d)


def fmm_distances(mesh: TriMesh, source: int) -> np.ndarray:
    """First-arrival distances from ``source`` by triangle fast marching."""
    if not 0 <= source < mesh.n_vertices:
        raise IndexError(f"source {source} out of range")
    return _check_reachable(_FMMGeometry(mesh).solve(int(source)), source)


@dataclass(eq=False)
class GeodesicTable:
    """All-sources distance matrix (row = source vertex), bound to a mesh."""

    distances: np.ndarray
    metric_id: str = "homogeneous"
    backend: str = "dijkstra"
    mesh_checksum: str = ""
    _sorted: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        self.distances = np.asarray(self.distances, dtype=float)
        self.distances.setflags(write=False)

    @property
    def n_vertices(self) -> int:
        return self.distances.shape[0]

    def rows(self, idx) -> np.ndarray:
        return self.distances[idx]

    @property
    def sorted_rows(self) -> tuple[np.ndarray, np.ndarray]:
        """``(order, values)``: per-row stable argsort and the sorted distances."""
        if self._sorted is None:
            order = np.argsort(self.distances, axis=1, kind="stable")
            vals = np.take_along_axis(self.distances, order, axis=1)
            self._sorted = (order, vals)
        return self._sorted

    def sorted_row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        order, vals = self.sorted_rows
        return order[i], vals[i]


class LazyGeodesicTable:
    """On-demand cached rows for meshes above the full-table memory guard."""

    def __init__(self, mesh: TriMesh, backend: str = "dijkstra", metric_id: str = "homogeneous",
                 cache_rows: int = 4096):
        self.mesh = mesh
        self.backend = backend
        self.metric_id = metric_id
        self.mesh_checksum = mesh.checksum
        self._graph = edge_graph(mesh) if backend == "dijkstra" else None
        self._fmm = _FMMGeometry(mesh) if backend == "fmm" else None
        self._row = lru_cache(maxsize=cache_rows)(self._compute_row)
        self._sorted_row = lru_cache(maxsize=cache_rows)(self._compute_sorted)

    @property
    def n_vertices(self) -> int:
        return self.mesh.n_vertices

    def _compute_row(self, i: int) -> np.ndarray:
        if self._graph is not None:
            d = _csgraph_dijkstra(self._graph, directed=False, indices=i)
        else:
            d = self._fmm.solve(i)
        return _check_reachable(d, i)

    def _compute_sorted(self, i: int):
        r = self._row(i)
        o = np.argsort(r, kind="stable")
        return o, r[o]

    def rows(self, idx) -> np.ndarray:
        idx = np.asarray(idx)
        flat = [self._row(int(i)) for i in idx.ravel()]
        return np.stack(flat).reshape(idx.shape + (self.n_vertices,))

    def sorted_row(self, i: int):
        return self._sorted_row(int(i))


def build_table(mesh: TriMesh, backend: str = "dijkstra", metric_id: str = "homogeneous",
                max_vertices: int = MAX_TABLE_VERTICES) -> GeodesicTable:
    """All-sources distance table for ``mesh`` under its current conductivity."""
    if backend not in BACKENDS:
        raise ValueError(f"unknown backend {backend!r}; expected one of {BACKENDS}")
    m = mesh.n_vertices
    if m > max_vertices:
        raise ResourceLimitError(
            f"{m} vertices exceeds the full-table limit of {max_vertices} "
            f"({m * m * 8 / 1e9:.1f} GB); use LazyGeodesicTable for on-demand rows"
        )
    if backend == "dijkstra":
        d = _csgraph_dijkstra(edge_graph(mesh), directed=False)
    else:
        geo = _FMMGeometry(mesh)
        d = np.stack([geo.solve(i) for i in range(m)])
    _check_reachable(d, "all")
    return GeodesicTable(d, metric_id=metric_id, backend=backend, mesh_checksum=mesh.checksum)


def ball_vertices(table: GeodesicTable, center: int, radius: float) -> np.ndarray:
    """Sorted indices ``j`` with ``d(center, j) <= radius``."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    row = table.rows(int(center))
    return np.flatnonzero(row <= radius)


def _checksum32(hexdigest: str) -> int:
    return int(hexdigest[:8], 16) if hexdigest else 0


def save_table(path: Union[str, Path], table: GeodesicTable) -> None:
    """Write ``magic | m | backend id | mesh checksum`` then row-major float32 LE."""
    m = table.n_vertices
    header = struct.pack("<4sIII", _TABLE_MAGIC, m, BACKENDS.index(table.backend),
                         _checksum32(table.mesh_checksum))
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(table.distances, dtype="<f4").tobytes())


def load_table(path: Union[str, Path], mesh: TriMesh | None = None,
               metric_id: str = "homogeneous") -> GeodesicTable:
    raw = Path(path).read_bytes()
    magic, m, backend_id, chk = struct.unpack("<4sIII", raw[:16])
    if magic != _TABLE_MAGIC:
        raise ValueError(f"{path}: not a distance table (magic {magic!r})")
    if len(raw) != 16 + 4 * m * m:
        raise ValueError(f"{path}: expected {m}x{m} float32 payload")
    if mesh is not None:
        if mesh.n_vertices != m:
            raise ValueError(f"table has {m} vertices, mesh has {mesh.n_vertices}")
        if _checksum32(mesh.checksum) != chk:
            raise ValueError("table checksum does not match mesh")
    d = np.frombuffer(raw, dtype="<f4", offset=16).reshape(m, m).astype(float)
    return GeodesicTable(d, metric_id=metric_id, backend=BACKENDS[backend_id],
                         mesh_checksum=mesh.checksum if mesh is not None else "")
