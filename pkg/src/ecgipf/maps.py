"""Posterior estimators computed from filter traces."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .errors import DimensionError, UndefinedCorrelationError
from .template import FrontTemplate, VoltageField, reconstruct_batch

SCALAR_TAGS = ("activation_probability", "eas_pseudo_probability")


@dataclass
class ActivationMap:
    """Activation time per vertex in ms; NaN marks vertices that never activate."""

    times: np.ndarray

    @property
    def activated(self) -> np.ndarray:
        return np.isfinite(self.times)

    def shifted(self, dt: float) -> "ActivationMap":
        return ActivationMap(self.times + dt)


@dataclass
class ScalarMap:
    values: np.ndarray
    tag: str

    def __post_init__(self):
        if self.tag not in SCALAR_TAGS:
            raise ValueError(f"unknown map tag {self.tag!r}")


def _weighted_fields(ensemble, tables, template: FrontTemplate):
    """Yield (indices, fields) per mode for an ensemble."""
    for mode, table in enumerate(tables):
        sel = np.flatnonzero(ensemble.modes == mode)
        if len(sel):
            yield sel, reconstruct_batch(ensemble.centers[sel], ensemble.radii[sel], table,
                                         template.width)


def mean_tmv(ensemble, tables: Sequence, template: FrontTemplate) -> VoltageField:
    """Posterior mean transmembrane voltage."""
    acc = np.zeros(tables[0].n_vertices)
    for sel, v in _weighted_fields(ensemble, tables, template):
        acc += ensemble.weights[sel] @ v
    return VoltageField(np.clip(acc, 0.0, 1.0), ensemble.time_index)


def activation_probability(ensemble, tables: Sequence, template: FrontTemplate,
                           threshold: float = 0.5) -> ScalarMap:
    if not 0 < threshold < 1:
        raise ValueError("threshold must be in (0, 1)")
    acc = np.zeros(tables[0].n_vertices)
    for sel, v in _weighted_fields(ensemble, tables, template):
        acc += ensemble.weights[sel] @ (v > threshold)
    return ScalarMap(np.clip(acc, 0.0, 1.0), "activation_probability")


def mean_tmv_series(trace, tables: Sequence, template: FrontTemplate) -> tuple[np.ndarray, np.ndarray]:
    """Mean voltage per step, re-ordered to chronological observation order.

    Returns ``(obs_index, series)`` with ``series`` of shape (n, m).
    """
    order = np.argsort(trace.obs_index, kind="stable")
    series = np.stack([mean_tmv(trace.ensemble(k), tables, template).values for k in order])
    return trace.obs_index[order], series


def activation_times(series: np.ndarray, times: np.ndarray, level: float = 0.5) -> ActivationMap:
    """First upward crossing of ``level`` per vertex, linearly interpolated in time."""
    series = np.asarray(series, dtype=float)
    times = np.asarray(times, dtype=float)
    above = series >= level
    first = np.argmax(above, axis=0)
    hit = above[first, np.arange(series.shape[1])]
    out = np.full(series.shape[1], np.nan)
    v = np.flatnonzero(hit)
    k = first[v]
    at_start = k == 0
    out[v[at_start]] = times[0]
    v, k = v[~at_start], k[~at_start]
    lo, hi = series[k - 1, v], series[k, v]
    frac = (level - lo) / (hi - lo)
    out[v] = times[k - 1] + frac * (times[k] - times[k - 1])
    return ActivationMap(out)


def activation_map(traces, tables: Sequence, template: FrontTemplate, dt: float,
                   t0: float = 0.0) -> ActivationMap:
    """Activation map from one trace or the pooled mean voltage of several.

    Several traces (e.g. forward and backward runs, or repetitions) are pooled
    as an equal-weight mixture of their posteriors before extraction.
    """
    if not isinstance(traces, (list, tuple)):
        traces = [traces]
    idx0, acc = None, None
    for tr in traces:
        idx, s = mean_tmv_series(tr, tables, template)
        if idx0 is None:
            idx0, acc = idx, s.copy()
        else:
            if not np.array_equal(idx, idx0):
                raise DimensionError("traces cover different observation steps")
            acc += s
    return activation_times(acc / len(traces), t0 + idx0 * dt)


def eas_pseudo_probability(trace) -> ScalarMap:
    """Sum over steps and particles of weight times center multiplicity at each vertex."""
    m = trace.n_vertices
    n, N, l = trace.centers.shape
    w = np.repeat(trace.weights[:, :, None], l, axis=2)
    vals = np.bincount(trace.centers.ravel(), weights=w.ravel(), minlength=m)
    return ScalarMap(vals, "eas_pseudo_probability")


def combine_fwd_bwd(map_f: ScalarMap, map_b: ScalarMap) -> ScalarMap:
    if map_f.tag != map_b.tag:
        raise ValueError(f"cannot combine {map_f.tag} with {map_b.tag}")
    if map_f.values.shape != map_b.values.shape:
        raise DimensionError("maps are defined on different meshes")
    return ScalarMap(0.5 * (map_f.values + map_b.values), map_f.tag)


def mode_probability(ensemble, n_modes: int | None = None) -> np.ndarray:
    n_modes = int(ensemble.modes.max()) + 1 if n_modes is None else n_modes
    return np.bincount(ensemble.modes, weights=ensemble.weights, minlength=n_modes)


def mode_timeline(traces, dt: float, t0: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Mode probabilities averaged over traces, on the chronological time axis."""
    if not isinstance(traces, (list, tuple)):
        traces = [traces]
    acc = None
    for tr in traces:
        order = np.argsort(tr.obs_index, kind="stable")
        p = tr.mode_probs[order]
        acc = p.copy() if acc is None else acc + p
    idx = np.sort(traces[0].obs_index)
    return t0 + idx * dt, acc / len(traces)


def compare_maps(map_a: ActivationMap, map_b: ActivationMap) -> dict:
    """Pearson r over jointly activated vertices, plus the covered fraction."""
    a, b = np.asarray(map_a.times), np.asarray(map_b.times)
    if a.shape != b.shape:
        raise DimensionError("maps are defined on different meshes")
    both = np.isfinite(a) & np.isfinite(b)
    if both.sum() < 2:
        raise UndefinedCorrelationError("fewer than 2 jointly activated vertices")
    x, y = a[both], b[both]
    x, y = x - x.mean(), y - y.mean()
    den = np.sqrt((x @ x) * (y @ y))
    if den == 0:
        raise UndefinedCorrelationError("constant activation map")
    r = float(np.clip((x @ y) / den, -1.0, 1.0))
    return {"r": r, "coverage": float(both.mean()), "n_common": int(both.sum())}


def pearson_correlation(map_a: ActivationMap, map_b: ActivationMap) -> float:
    return compare_maps(map_a, map_b)["r"]


def local_maxima(mesh, values: np.ndarray, min_fraction: float = 0.0) -> np.ndarray:
    """Vertices whose value is >= every one-ring neighbour and > ``min_fraction * max``.

    Plateaus keep only their lowest-index vertex.
    """
    values = np.asarray(values, dtype=float)
    floor = min_fraction * values.max()
    out = []
    for i, nb in enumerate(mesh.neighbors):
        vi = values[i]
        if vi <= floor or vi <= 0:
            continue
        nv = values[nb]
        if np.all(vi > nv) or (np.all(vi >= nv) and not np.any((nv == vi) & (nb < i))):
            out.append(i)
    return np.array(out, dtype=np.int64)


def write_scalar_csv(path: Union[str, Path], values: np.ndarray, name: str = "value",
                     header_line: str | None = None) -> None:
    with open(path, "w") as f:
        if header_line:
            f.write(f"# {header_line}\n")
        f.write(f"vertex_id,{name}\n")
        for i, x in enumerate(np.asarray(values, dtype=float)):
            f.write(f"{i},{float(x)!r}\n")


def read_scalar_csv(path: Union[str, Path]) -> np.ndarray:
    rows = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    return np.array([float(r.split(",")[1]) for r in rows[1:]])


def write_mode_timeline_csv(path: Union[str, Path], times: np.ndarray, probs: np.ndarray,
                            names: Sequence[str], header_line: str | None = None) -> None:
    """``time,<mode names...>`` rows in the layout used for the paper-style plots."""
    with open(path, "w") as f:
        if header_line:
            f.write(f"# {header_line}\n")
        f.write("time," + ",".join(names) + "\n")
        for t, p in zip(times, probs):
            f.write(f"{float(t)!r}," + ",".join(repr(float(x)) for x in p) + "\n")
