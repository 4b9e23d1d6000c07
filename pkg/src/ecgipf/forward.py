"""Linear transfer from vertex transmembrane voltage to electrode potentials."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .errors import DimensionError
from .mesh import ElectrodeSet, TriMesh, check_electrodes

_OP_MAGIC = b"TOPM"


@dataclass(eq=False)
class TransferOperator:
    matrix: np.ndarray  # (q, m)
    provenance: str = "loaded"
    mesh_checksum: str = ""

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=float)
        if self.matrix.ndim != 2:
            raise DimensionError("transfer matrix must be 2-D")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("transfer matrix has non-finite entries")
        self.matrix.setflags(write=False)

    @property
    def electrode_count(self) -> int:
        return self.matrix.shape[0]

    @property
    def vertex_count(self) -> int:
        return self.matrix.shape[1]


def build_dipole_layer(mesh: TriMesh, electrodes: ElectrodeSet) -> TransferOperator:
    """Equivalent dipole layer kernel with lumped vertex areas.

    ``O[e, v] = -A_v (r_ev . n_v) / (4 pi |r_ev|^3)`` with ``r_ev`` pointing
    from vertex ``v`` to electrode ``e``.
    """
    check_electrodes(mesh, electrodes)
    r = electrodes.positions[:, None, :] - mesh.vertices[None, :, :]  # (q, m, 3)
    dist = np.linalg.norm(r, axis=2)
    if np.any(dist == 0):
        raise ValueError("singular kernel: electrode coincides with a vertex")
    proj = np.einsum("qmk,mk->qm", r, mesh.normals)
    mat = -mesh.vertex_areas[None, :] * proj / (4.0 * np.pi * dist ** 3)
    return TransferOperator(mat, provenance="dipole_layer", mesh_checksum=mesh.geometry_checksum)


def save_operator(path: Union[str, Path], op: TransferOperator) -> None:
    """16-byte header ``magic | q | m | reserved`` then row-major float64 LE."""
    q, m = op.matrix.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<4sIII", _OP_MAGIC, q, m, 0))
        f.write(np.ascontiguousarray(op.matrix, dtype="<f8").tobytes())


def read_matrix_file(path: Union[str, Path], magic: bytes = _OP_MAGIC) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise ValueError(f"{path}: truncated header")
    mg, q, m, _ = struct.unpack("<4sIII", raw[:16])
    if mg != magic:
        raise ValueError(f"{path}: bad magic {mg!r}")
    if len(raw) != 16 + 8 * q * m:
        raise ValueError(f"{path}: expected {q}x{m} float64 payload")
    return np.frombuffer(raw, dtype="<f8", offset=16).reshape(q, m).copy()


def load_operator(path: Union[str, Path], mesh: TriMesh) -> TransferOperator:
    mat = read_matrix_file(path)
    if mat.shape[1] != mesh.n_vertices:
        raise DimensionError(
            f"operator has {mat.shape[1]} vertex columns but mesh has {mesh.n_vertices} vertices"
        )
    return TransferOperator(mat, provenance="loaded", mesh_checksum=mesh.geometry_checksum)


def apply(op: TransferOperator, field) -> np.ndarray:
    """Electrode potentials ``O v``; accepts a VoltageField, an (m,) or an (..., m) array."""
    v = np.asarray(getattr(field, "values", field), dtype=float)
    if v.shape[-1] != op.vertex_count:
        raise DimensionError(f"field has {v.shape[-1]} vertices, operator expects {op.vertex_count}")
    return v @ op.matrix.T


def zero_mean(vec, axis: int = -1) -> np.ndarray:
    """Remove the mean over electrodes (potentials are defined up to a constant)."""
    vec = np.asarray(vec, dtype=float)
    return vec - vec.mean(axis=axis, keepdims=True)
