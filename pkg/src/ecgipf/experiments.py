"""Desk-scale experiment protocol shared by the CLI, scripts and acceptance tests.

The filter works on a sphere mesh; ground truth is generated on the next finer
icosphere (whose vertex list starts with the coarse one) so that data
generation and inversion never share a discretisation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .filter import FilterConfig, FilterTrace, run_filter
from .forward import TransferOperator, build_dipole_layer
from .geodesic import GeodesicTable, build_table
from .maps import (
    ActivationMap,
    activation_map,
    combine_fwd_bwd,
    compare_maps,
    eas_pseudo_probability,
    local_maxima,
)
from .mesh import ElectrodeSet, TriMesh, make_test_mesh, sphere_electrodes
from .synth import Truth, TruthSpec, add_noise, simulate_truth, truth_mesh
from .template import FrontTemplate


def circumferential_fibres(axis=(0.0, 0.0, 1.0)):
    """Direction field along circles of latitude around ``axis``."""
    a = np.asarray(axis, dtype=float)

    def field_(x: np.ndarray) -> np.ndarray:
        f = np.cross(a, x)
        small = np.linalg.norm(f, axis=1) < 1e-9 * np.linalg.norm(x, axis=1).clip(1e-12)
        f[small] = np.cross(a, [1.0, 0.0, 0.0]) if abs(a[0]) < 0.9 else np.cross(a, [0.0, 1.0, 0.0])
        return f

    return field_


@dataclass
class SphereSetup:
    mesh: TriMesh  # filter mesh
    truth_mesh: TriMesh  # finer mesh for data generation
    electrodes: ElectrodeSet
    operator: TransferOperator
    truth_operator: TransferOperator
    template: FrontTemplate
    backend: str = "dijkstra"
    _table: GeodesicTable | None = field(default=None, repr=False)

    @property
    def table(self) -> GeodesicTable:
        if self._table is None:
            self._table = build_table(self.mesh, self.backend)
        return self._table

    def truth_vertex(self, v: int) -> int:
        """Fine-mesh vertex closest to filter-mesh vertex ``v``."""
        d = np.linalg.norm(self.truth_mesh.vertices - self.mesh.vertices[v], axis=1)
        return int(np.argmin(d))


def sphere_setup(radius_mm: float = 30.0, subdivisions: int = 3, truth_subdivisions: int = 4,
                 n_electrodes: int = 128, electrode_radius_mm: float = 45.0, width: float = 5.0,
                 kind: str = "sphere", axis_scales=(1.0, 0.7, 0.5),
                 backend: str = "dijkstra") -> SphereSetup:
    coarse = make_test_mesh(kind, radius_mm, subdivisions, axis_scales)
    fine = make_test_mesh(kind, radius_mm, truth_subdivisions, axis_scales)
    el = sphere_electrodes(n_electrodes, electrode_radius_mm)
    return SphereSetup(coarse, fine, el, build_dipole_layer(coarse, el),
                       build_dipole_layer(fine, el), FrontTemplate(width), backend)


def simulate(setup: SphereSetup, spec: TruthSpec, conductivity=1.0) -> Truth:
    """Truth on the fine mesh; ``spec.stim_sites`` index filter-mesh vertices."""
    fine_spec = TruthSpec([(setup.truth_vertex(v), d) for v, d in spec.stim_sites], spec.speed,
                          spec.duration, spec.dt, spec.block_regions, spec.backend)
    mesh = truth_mesh(setup.truth_mesh, fine_spec, conductivity)
    table = build_table(mesh, spec.backend, metric_id="truth")
    return simulate_truth(setup.truth_mesh, fine_spec, table, setup.template,
                          setup.truth_operator)


def restrict_truth(setup: SphereSetup, truth: Truth) -> ActivationMap:
    """True activation map on filter-mesh vertices."""
    idx = [setup.truth_vertex(v) for v in range(setup.mesh.n_vertices)]
    return ActivationMap(truth.activation.times[idx])


def run_pair(observations: np.ndarray, tables: Sequence, operators: Sequence, seed: int,
             workers: int = 1, **config) -> tuple[FilterTrace, FilterTrace]:
    """Forward and backward runs with the same seed."""
    out = []
    for d in ("forward", "backward"):
        cfg = FilterConfig(direction=d, seed=seed, **config)
        out.append(run_filter(observations, tables, operators, cfg, workers=workers))
    return out[0], out[1]


def noisy_observations(truth: Truth, level: float, seed: int) -> np.ndarray:
    return add_noise(truth.observations, level, np.random.default_rng([seed, 7919])).values


def combined_eas(traces: Sequence[FilterTrace]):
    fwd = [t for t in traces if t.direction == "forward"]
    bwd = [t for t in traces if t.direction == "backward"]
    if fwd and bwd:
        return combine_fwd_bwd(_mean_eas(fwd), _mean_eas(bwd))
    return _mean_eas(list(traces))


def _mean_eas(traces):
    maps = [eas_pseudo_probability(t) for t in traces]
    out = maps[0]
    for extra in maps[1:]:
        out = type(out)(out.values + extra.values, out.tag)
    return type(out)(out.values / len(maps), out.tag)


def eas_site_errors(mesh: TriMesh, table: GeodesicTable, eas_values: np.ndarray,
                    sites: Sequence[int], min_fraction: float = 0.1) -> np.ndarray:
    """Distance from each true site to its assigned significant local maximum.

    Sites are matched to distinct maxima greedily by distance; unmatched sites
    get ``inf``.
    """
    peaks = local_maxima(mesh, eas_values, min_fraction)
    errs = np.full(len(sites), np.inf)
    if not len(peaks):
        return errs
    d = table.distances[np.ix_(list(sites), peaks)]
    used_s, used_p = set(), set()
    for flat in np.argsort(d, axis=None, kind="stable"):
        s, p = np.unravel_index(flat, d.shape)
        if s in used_s or p in used_p:
            continue
        errs[s] = d[s, p]
        used_s.add(s)
        used_p.add(p)
    return errs


def map_fidelity(setup: SphereSetup, traces, true_map: ActivationMap, tables=None,
                 dt: float = 1.0) -> dict:
    tables = tables or [setup.table]
    return compare_maps(activation_map(list(traces), tables, setup.template, dt), true_map)
