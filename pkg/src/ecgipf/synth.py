"""Synthetic ground truth: geodesic front propagation and noisy body-surface data."""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .errors import InvalidConductivityError
from .forward import TransferOperator, read_matrix_file, zero_mean
from .geodesic import GeodesicTable, build_table
from .maps import ActivationMap
from .mesh import ConductivitySpec, TriMesh, set_conductivity
from .template import FrontTemplate, v_template

_OBS_MAGIC = b"OBSQ"


@dataclass
class TruthSpec:
    stim_sites: list  # [(vertex, delay_ms), ...]
    speed: float = 1.0  # mm/ms
    duration: float = 120.0
    dt: float = 1.0
    block_regions: list = field(default_factory=list)  # [(Region, factor), ...]
    backend: str = "dijkstra"

    def __post_init__(self):
        self.stim_sites = [(int(v), float(d)) for v, d in self.stim_sites]
        if not self.stim_sites:
            raise ValueError("at least one stimulation site is required")
        if self.speed <= 0 or self.dt <= 0 or self.duration <= 0:
            raise ValueError("speed, dt and duration must be > 0")
        if any(d < 0 for _, d in self.stim_sites):
            raise ValueError("stimulation delays must be >= 0")
        if any(f <= 0 for _, f in self.block_regions):
            raise ValueError("block factors must be > 0")

    @property
    def times(self) -> np.ndarray:
        n = int(np.floor(self.duration / self.dt + 1e-9)) + 1
        return np.arange(n) * self.dt


@dataclass
class ObservationSeq:
    values: np.ndarray  # (n, q)
    dt: float = 1.0
    t0: float = 0.0
    noise: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if not np.all(np.isfinite(self.values)):
            raise ValueError("observations must be finite")

    @property
    def times(self) -> np.ndarray:
        return self.t0 + np.arange(len(self.values)) * self.dt


@dataclass
class Truth:
    activation: ActivationMap
    voltage: np.ndarray  # (n, m)
    observations: ObservationSeq


def truth_mesh(mesh: TriMesh, spec: TruthSpec, base: ConductivitySpec = 1.0) -> TriMesh:
    """Bake the block regions of ``spec`` into the conductivity of ``mesh``."""
    out = set_conductivity(mesh, base)
    for region, factor in spec.block_regions:
        t = out.tensors().copy()
        t[region.mask(out)] *= factor
        out = out.with_conductivity(t)
    return out


def activation_from_sites(table: GeodesicTable, spec: TruthSpec) -> np.ndarray:
    m = table.n_vertices
    t = np.full(m, np.inf)
    for v, delay in spec.stim_sites:
        if not 0 <= v < m:
            raise IndexError(f"stimulation site {v} out of range for {m} vertices")
        t = np.minimum(t, delay + table.rows(v) / spec.speed)
    return t


def simulate_truth(mesh: TriMesh, spec: TruthSpec, table: GeodesicTable,
                   template: FrontTemplate, operator: TransferOperator) -> Truth:
    """Activation times, voltage series and noiseless zero-mean observations."""
    if table.n_vertices != mesh.n_vertices:
        raise ValueError("distance table does not match the mesh")
    t_act = activation_from_sites(table, spec)
    times = spec.times
    volt = np.clip(v_template(spec.speed * (times[:, None] - t_act[None, :]), template.width),
                   0.0, 1.0)
    obs = zero_mean(volt @ operator.matrix.T)
    amap = np.where(t_act <= times[-1], t_act, np.nan)
    return Truth(ActivationMap(amap), volt, ObservationSeq(obs, spec.dt, float(times[0])))


def add_noise(obs: ObservationSeq, level: float = 0.04,
              rng: np.random.Generator | None = None) -> ObservationSeq:
    """White Gaussian noise with std ``level`` times the mean absolute amplitude."""
    if not level > 0:
        raise ValueError(f"noise level must be > 0, got {level}")
    rng = np.random.default_rng() if rng is None else rng
    y = obs.values
    std = level * float(np.mean(np.abs(y)))
    noise = rng.normal(0.0, 1.0, size=y.shape) * std
    if std == 0:
        warnings.warn("all-zero signal: noise std is zero", RuntimeWarning, stacklevel=2)
        snr = float("nan")
    else:
        snr = float(10.0 * np.log10(np.sum(y * y) / np.sum(noise * noise)))
    meta = {"level": level, "std": std, "snr_db": snr}
    return ObservationSeq(y + noise, obs.dt, obs.t0, meta)


def make_block_metrics(mesh: TriMesh, block_specs: Sequence, backend: str = "dijkstra",
                       names: Sequence[str] | None = None) -> list[GeodesicTable]:
    """Homogeneous table followed by one table per ``(region, factor)`` block spec.

    The base conductivity is whatever ``mesh`` carries (identity if unset).
    """
    names = list(names) if names is not None else [f"block{i}" for i in range(len(block_specs))]
    tables = [build_table(mesh, backend, metric_id="homogeneous")]
    base = mesh.tensors()
    for (region, factor), name in zip(block_specs, names):
        if factor <= 0:
            raise InvalidConductivityError(f"block factor must be > 0, got {factor}")
        t = base.copy()
        t[region.mask(mesh)] *= factor
        tables.append(build_table(mesh.with_conductivity(t), backend, metric_id=name))
    return tables


def save_observations_csv(path: Union[str, Path], obs: ObservationSeq,
                          header_line: str | None = None) -> None:
    q = obs.values.shape[1]
    with open(path, "w") as f:
        if header_line:
            f.write(f"# {header_line}\n")
        f.write("time_ms," + ",".join(f"e{i}" for i in range(q)) + "\n")
        for t, row in zip(obs.times, obs.values):
            f.write(f"{float(t)!r}," + ",".join(repr(float(x)) for x in row) + "\n")


def load_observations_csv(path: Union[str, Path]) -> ObservationSeq:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    data = np.array([[float(x) for x in ln.split(",")] for ln in lines[1:]])
    t = data[:, 0]
    dt = float(t[1] - t[0]) if len(t) > 1 else 1.0
    return ObservationSeq(data[:, 1:], dt, float(t[0]))


def save_observations_bin(path: Union[str, Path], obs: ObservationSeq) -> None:
    """Same 16-byte header layout as the operator file, rows are time steps."""
    n, q = obs.values.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<4sIII", _OBS_MAGIC, n, q, 0))
        f.write(np.ascontiguousarray(obs.values, dtype="<f8").tobytes())


def load_observations_bin(path: Union[str, Path], dt: float = 1.0) -> ObservationSeq:
    return ObservationSeq(read_matrix_file(path, magic=_OBS_MAGIC), dt)
