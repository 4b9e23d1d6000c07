"""Sequential importance resampling over (centers, radii, mode) particle states.

Each particle holds ``l`` center vertices, ``l`` geodesic radii and a discrete
mode selecting one (distance table, transfer operator) pair. A filter step is
predict -> correct -> resample-if-degenerate. Random draws come from
counter-based Philox streams keyed by ``(seed, stream, step)``, so a run is
reproducible and independent of how the work is split across threads.
"""
from __future__ import annotations

import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .errors import DimensionError
from .forward import TransferOperator, zero_mean
from .template import reconstruct_batch

STREAM_INIT, STREAM_PREDICT, STREAM_RESAMPLE = 0, 1, 2
DIRECTIONS = ("forward", "backward")


class DegeneracyWarning(RuntimeWarning):
    pass


def step_rng(seed: int, step: int, stream: int) -> np.random.Generator:
    """Philox generator for one (seed, stream, step) counter."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, stream, step])))


@dataclass
class Particle:
    centers: np.ndarray
    radii: np.ndarray
    mode: int = 0


@dataclass
class Ensemble:
    centers: np.ndarray  # (N, l) vertex indices
    radii: np.ndarray  # (N, l) mm
    modes: np.ndarray  # (N,)
    weights: np.ndarray  # (N,)
    time_index: int = 0
    resampled: bool = False
    degenerate: bool = False

    @property
    def size(self) -> int:
        return len(self.weights)

    def particle(self, i: int) -> Particle:
        return Particle(self.centers[i].copy(), self.radii[i].copy(), int(self.modes[i]))

    @classmethod
    def from_particles(cls, particles: Sequence[Particle], weights=None, time_index: int = 0):
        n = len(particles)
        w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, float)
        return cls(
            np.array([p.centers for p in particles], dtype=np.int64).reshape(n, -1),
            np.array([p.radii for p in particles], dtype=float).reshape(n, -1),
            np.array([p.mode for p in particles], dtype=np.int64),
            w, time_index,
        )


@dataclass
class FilterConfig:
    N: int = 1000
    l: int = 3
    sigma_r: float = 10.0
    lambda_mm: float = 5.0
    sigma_w: float = 0.02
    width: float = 5.0
    direction: str = "forward"
    resample_fraction: float = 1.0 / 3.0
    mode_keep_prob: float = 0.99
    r_init_fwd: float = 1.0
    r_init_bwd: float = 150.0
    seed: int = 0
    resampling: str = "multinomial"
    # optional discrete radius support (used to compare against an exact grid filter)
    radius_grid: tuple | None = None

    def __post_init__(self):
        if self.direction in ("fwd", "bwd"):
            self.direction = {"fwd": "forward", "bwd": "backward"}[self.direction]
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}")
        if self.N < 1 or self.l < 1:
            raise ValueError("N and l must be >= 1")
        if self.sigma_r < 0 or self.lambda_mm < 0:
            raise ValueError("sigma_r and lambda_mm must be >= 0")
        if self.sigma_w <= 0 or self.width <= 0:
            raise ValueError("sigma_w and width must be > 0")
        if not 0 < self.resample_fraction <= 1:
            raise ValueError("resample_fraction must be in (0, 1]")
        if not 0 <= self.mode_keep_prob <= 1:
            raise ValueError("mode_keep_prob must be in [0, 1]")
        if self.r_init_fwd < 0 or self.r_init_bwd < 0:
            raise ValueError("initial radii must be >= 0")
        if self.resampling not in ("multinomial", "systematic"):
            raise ValueError("resampling must be 'multinomial' or 'systematic'")
        if self.radius_grid is not None:
            self.radius_grid = tuple(sorted(float(r) for r in self.radius_grid))

    @property
    def r_init(self) -> float:
        return self.r_init_fwd if self.direction == "forward" else self.r_init_bwd

    def effective_keep_prob(self, n_modes: int) -> float:
        """Redraws are uniform over all modes, including the current one."""
        return self.mode_keep_prob + (1.0 - self.mode_keep_prob) / n_modes


def snap_to_grid(r: np.ndarray, grid) -> np.ndarray:
    g = np.asarray(grid, float)
    return g[np.abs(np.asarray(r)[..., None] - g).argmin(axis=-1)]


def init_ensemble(config: FilterConfig, n_vertices: int, n_modes: int = 1,
                  seed: int | None = None) -> Ensemble:
    """Uniform centers, equal radii, uniform modes, uniform weights."""
    rng = step_rng(config.seed if seed is None else seed, 0, STREAM_INIT)
    n, l = config.N, config.l
    centers = rng.integers(0, n_vertices, size=(n, l))
    modes = rng.integers(0, n_modes, size=n)
    radii = np.full((n, l), float(config.r_init))
    if config.radius_grid is not None:
        radii = snap_to_grid(radii, config.radius_grid)
    return Ensemble(centers, radii, modes, np.full(n, 1.0 / n), 0)


def _ball_counts(table, centers: np.ndarray, dmax: np.ndarray) -> np.ndarray:
    """Number of vertices within ``dmax`` of each center."""
    out = np.empty(centers.shape, dtype=np.int64)
    flat_c, flat_d, flat_o = centers.ravel(), dmax.ravel(), out.reshape(-1)
    if hasattr(table, "sorted_rows"):
        _, vals = table.sorted_rows
        step = max(1, 2_000_000 // table.n_vertices)
        for s in range(0, len(flat_c), step):
            rows = vals[flat_c[s:s + step]]
            flat_o[s:s + step] = (rows <= flat_d[s:s + step, None]).sum(axis=1)
    else:
        for k, (c, d) in enumerate(zip(flat_c, flat_d)):
            flat_o[k] = np.searchsorted(table.sorted_row(int(c))[1], d, side="right")
    return out


def _ball_pick(table, centers: np.ndarray, slot: np.ndarray) -> np.ndarray:
    if hasattr(table, "sorted_rows"):
        order, _ = table.sorted_rows
        return order[centers, slot]
    return np.array([table.sorted_row(int(c))[0][s] for c, s in zip(centers.ravel(), slot.ravel())]
                    ).reshape(centers.shape)


def predict(ensemble: Ensemble, tables: Sequence, config: FilterConfig,
            rng: np.random.Generator) -> Ensemble:
    """Radius random walk, geodesic center jump, mode switch. Weights untouched."""
    n, l = ensemble.centers.shape
    n_modes = len(tables)
    noise = rng.normal(0.0, 1.0, size=(n, l)) * config.sigma_r
    dmax = rng.exponential(1.0, size=(n, l)) * config.lambda_mm
    u = rng.random(size=(n, l))
    switch = rng.random(size=n)
    new_mode = rng.integers(0, n_modes, size=n)

    radii = np.maximum(ensemble.radii + noise, 0.0)
    if config.radius_grid is not None:
        radii = snap_to_grid(radii, config.radius_grid)

    centers = ensemble.centers.copy()
    for mode, table in enumerate(tables):
        sel = np.flatnonzero(ensemble.modes == mode)
        if not len(sel):
            continue
        c = ensemble.centers[sel]
        counts = _ball_counts(table, c, dmax[sel])
        slot = np.minimum((u[sel] * counts).astype(np.int64), counts - 1)
        centers[sel] = _ball_pick(table, c, slot)

    modes = np.where(switch < config.mode_keep_prob, ensemble.modes, new_mode)
    return Ensemble(centers, radii, modes, ensemble.weights.copy(), ensemble.time_index + 1)


def _check_modes(tables: Sequence, operators: Sequence[TransferOperator]):
    if len(tables) != len(operators):
        raise DimensionError(f"{len(tables)} distance tables but {len(operators)} operators")
    for t, o in zip(tables, operators):
        if o.vertex_count != t.n_vertices:
            raise DimensionError(
                f"operator has {o.vertex_count} vertices, distance table has {t.n_vertices}"
            )


def log_likelihoods(ensemble: Ensemble, observation, operators: Sequence[TransferOperator],
                    tables: Sequence, config: FilterConfig, workers: int = 1,
                    chunk: int = 256) -> np.ndarray:
    """Gaussian log-likelihood of each particle up to the additive normaliser."""
    y = np.asarray(observation, dtype=float)
    q = operators[0].electrode_count
    if y.shape != (q,):
        raise DimensionError(f"observation has shape {y.shape}, operators expect ({q},)")
    yz = zero_mean(y)
    n = ensemble.size
    out = np.empty(n)
    jobs = []
    for mode, (table, op) in enumerate(zip(tables, operators)):
        sel = np.flatnonzero(ensemble.modes == mode)
        for s in range(0, len(sel), chunk):
            jobs.append((sel[s:s + chunk], table, op))

    def run(job):
        idx, table, op = job
        v = reconstruct_batch(ensemble.centers[idx], ensemble.radii[idx], table, config.width)
        resid = zero_mean(v @ op.matrix.T) - yz
        out[idx] = -np.einsum("ij,ij->i", resid, resid) / (2.0 * config.sigma_w ** 2)

    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, jobs))
    else:
        for job in jobs:
            run(job)
    return out


def likelihood(particle: Particle, observation, operators: Sequence[TransferOperator],
               tables: Sequence, config: FilterConfig) -> float:
    ens = Ensemble.from_particles([particle])
    return float(np.exp(log_likelihoods(ens, observation, operators, tables, config)[0]))


def reweight(weights: np.ndarray, loglik: np.ndarray) -> tuple[np.ndarray, bool]:
    """Bayes update in the log domain; returns (weights, degenerate)."""
    with np.errstate(divide="ignore"):
        logw = np.log(weights) + loglik
    top = np.max(logw)
    if not np.isfinite(top):
        return np.full(len(weights), 1.0 / len(weights)), True
    w = np.exp(logw - top)
    return w / w.sum(), False


def correct(ensemble: Ensemble, observation, operators: Sequence[TransferOperator],
            tables: Sequence, config: FilterConfig, workers: int = 1) -> Ensemble:
    _check_modes(tables, operators)
    ll = log_likelihoods(ensemble, observation, operators, tables, config, workers)
    w, degenerate = reweight(ensemble.weights, ll)
    if degenerate:
        warnings.warn("all particle likelihoods vanished; weights reset to uniform",
                      DegeneracyWarning, stacklevel=2)
    return replace(ensemble, weights=w, degenerate=degenerate, resampled=False)


def effective_sample_size(weights) -> float:
    w = np.asarray(weights, dtype=float)
    return float(1.0 / np.sum(w * w))


def resample_indices(weights: np.ndarray, rng: np.random.Generator, scheme: str = "multinomial"):
    n = len(weights)
    if scheme == "multinomial":
        return rng.choice(n, size=n, p=weights)
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    positions = (rng.random() + np.arange(n)) / n
    return np.searchsorted(cdf, positions, side="right")


def maybe_resample(ensemble: Ensemble, config: FilterConfig, rng: np.random.Generator) -> Ensemble:
    """Resample when the effective sample size drops below ``resample_fraction * N``."""
    n = ensemble.size
    if effective_sample_size(ensemble.weights) >= config.resample_fraction * n:
        return replace(ensemble, resampled=False)
    idx = resample_indices(ensemble.weights, rng, config.resampling)
    return Ensemble(ensemble.centers[idx], ensemble.radii[idx], ensemble.modes[idx],
                    np.full(n, 1.0 / n), ensemble.time_index, resampled=True,
                    degenerate=ensemble.degenerate)


@dataclass
class FilterTrace:
    """Posterior ensembles after each correction, in processing order."""

    direction: str
    n_vertices: int
    n_modes: int
    obs_index: np.ndarray  # (n,) observation consumed at each step
    weights: np.ndarray  # (n, N)
    centers: np.ndarray  # (n, N, l)
    radii: np.ndarray  # (n, N, l)
    modes: np.ndarray  # (n, N)
    n_eff: np.ndarray
    resampled: np.ndarray
    degenerate: np.ndarray
    mode_probs: np.ndarray  # (n, n_modes)
    config: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.obs_index)

    def ensemble(self, k: int) -> Ensemble:
        return Ensemble(self.centers[k], self.radii[k], self.modes[k], self.weights[k], k + 1,
                        bool(self.resampled[k]), bool(self.degenerate[k]))

    def summaries(self) -> list[dict]:
        return [
            {"step": k + 1, "obs_index": int(self.obs_index[k]), "direction": self.direction,
             "n_eff": float(self.n_eff[k]), "resampled": bool(self.resampled[k]),
             "degenerate": bool(self.degenerate[k]),
             "mode_probs": [float(p) for p in self.mode_probs[k]]}
            for k in range(len(self))
        ]

    def save(self, stem: Union[str, Path], header: dict | None = None) -> tuple[Path, Path]:
        """Write ``<stem>.jsonl`` (per-step summaries) and ``<stem>.npz`` (full ensembles)."""
        stem = Path(stem)
        jl, nz = stem.with_suffix(".jsonl"), stem.with_suffix(".npz")
        head = dict(header or {})
        with open(jl, "w") as f:
            f.write(json.dumps({"header": head}, sort_keys=True) + "\n")
            for rec in self.summaries():
                f.write(json.dumps(rec, sort_keys=True) + "\n")
        np.savez_compressed(
            nz, direction=self.direction, n_vertices=self.n_vertices, n_modes=self.n_modes,
            obs_index=self.obs_index, weights=self.weights, centers=self.centers,
            radii=self.radii, modes=self.modes, n_eff=self.n_eff, resampled=self.resampled,
            degenerate=self.degenerate, mode_probs=self.mode_probs,
            config=json.dumps(self.config, sort_keys=True),
            header=json.dumps(head, sort_keys=True),
        )
        return jl, nz

    @classmethod
    def load(cls, path: Union[str, Path]) -> "FilterTrace":
        with np.load(Path(path).with_suffix(".npz")) as z:
            return cls(
                direction=str(z["direction"]), n_vertices=int(z["n_vertices"]),
                n_modes=int(z["n_modes"]), obs_index=z["obs_index"], weights=z["weights"],
                centers=z["centers"], radii=z["radii"], modes=z["modes"], n_eff=z["n_eff"],
                resampled=z["resampled"], degenerate=z["degenerate"], mode_probs=z["mode_probs"],
                config=json.loads(str(z["config"])),
            )


def _mode_probs(ens: Ensemble, n_modes: int) -> np.ndarray:
    return np.bincount(ens.modes, weights=ens.weights, minlength=n_modes)


def run_filter(observations, tables: Sequence, operators: Sequence[TransferOperator],
               config: FilterConfig, workers: int = 1) -> FilterTrace:
    """Run the SIR filter over an (n, q) observation sequence.

    Backward runs consume the observations in reverse chronological order;
    ``trace.obs_index`` records which observation each step used.
    """
    obs = np.atleast_2d(np.asarray(observations, dtype=float))
    if obs.size == 0 or len(obs) < 1:
        raise ValueError("observation sequence is empty")
    _check_modes(tables, operators)
    q = operators[0].electrode_count
    if any(o.electrode_count != q for o in operators) or obs.shape[1] != q:
        raise DimensionError(f"observations have {obs.shape[1]} channels, operators expect {q}")
    n = len(obs)
    m = tables[0].n_vertices
    n_modes = len(tables)
    order = np.arange(n) if config.direction == "forward" else np.arange(n)[::-1]

    ens = init_ensemble(config, m, n_modes)
    rec = {k: [] for k in ("weights", "centers", "radii", "modes", "n_eff", "resampled",
                           "degenerate", "mode_probs")}
    for k, j in enumerate(order, start=1):
        ens = predict(ens, tables, config, step_rng(config.seed, k, STREAM_PREDICT))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegeneracyWarning)
            ens = correct(ens, obs[j], operators, tables, config, workers)
        rec["weights"].append(ens.weights)
        rec["centers"].append(ens.centers.astype(np.int32))
        rec["radii"].append(ens.radii)
        rec["modes"].append(ens.modes.astype(np.int16))
        rec["n_eff"].append(effective_sample_size(ens.weights))
        rec["degenerate"].append(ens.degenerate)
        rec["mode_probs"].append(_mode_probs(ens, n_modes))
        ens = maybe_resample(ens, config, step_rng(config.seed, k, STREAM_RESAMPLE))
        rec["resampled"].append(ens.resampled)

    return FilterTrace(
        direction=config.direction, n_vertices=m, n_modes=n_modes, obs_index=order.copy(),
        **{k: np.array(v) for k, v in rec.items()},
        config={k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(config).items()},
    )
