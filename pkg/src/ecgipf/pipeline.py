"""Experiment configuration and the simulate / filter / maps / report stages.

Stages exchange data only through files in the output directory, so each one
can be rerun on its own. Every file starts with a header carrying the config
hash and seed.
"""
from __future__ import annotations

import configparser
import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Union

import numpy as np

from .errors import ConfigError, MissingInputError, UndefinedCorrelationError
from .experiments import (
    SphereSetup,
    circumferential_fibres,
    combined_eas,
    eas_site_errors,
    restrict_truth,
    simulate,
    sphere_setup,
)
from .filter import FilterConfig, FilterTrace, run_filter
from .geodesic import BACKENDS, save_table
from .maps import (
    ActivationMap,
    activation_map,
    activation_probability,
    compare_maps,
    eas_pseudo_probability,
    mode_timeline,
    read_scalar_csv,
    write_mode_timeline_csv,
    write_scalar_csv,
)
from .mesh import Anisotropic, EuclideanBall, Region, Slab, write_vtk
from .synth import (
    TruthSpec,
    add_noise,
    load_observations_csv,
    make_block_metrics,
    save_observations_csv,
)

log = logging.getLogger(__name__)

DIR_TAGS = {"forward": "fwd", "backward": "bwd"}


@dataclass
class BlockSpec:
    name: str
    region: Region
    factor: float


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    reps: int = 1
    direction: str = "both"
    backend: str = "dijkstra"
    out: Path = Path("out")
    mesh: dict = field(default_factory=dict)
    electrodes: dict = field(default_factory=dict)
    truth: TruthSpec | None = None
    noise_level: float = 0.04
    anisotropy: str = "none"
    longitudinal: float = 3.0
    transverse: float = 0.3
    truth_blocks: list = field(default_factory=list)
    filter: FilterConfig = field(default_factory=FilterConfig)
    mode_blocks: list = field(default_factory=list)
    snapshot_times: list = field(default_factory=lambda: [20.0, 40.0, 60.0, 80.0])
    config_hash: str = ""

    def __post_init__(self):
        if self.reps < 1:
            raise ConfigError("experiment.reps must be >= 1")
        if self.direction not in ("fwd", "bwd", "both"):
            raise ConfigError("experiment.direction must be fwd, bwd or both")
        if self.backend not in BACKENDS:
            raise ConfigError(f"experiment.distance_backend must be one of {BACKENDS}")

    @property
    def directions(self) -> list[str]:
        return {"fwd": ["forward"], "bwd": ["backward"], "both": ["forward", "backward"]}[self.direction]

    @property
    def mode_names(self) -> list[str]:
        return ["homogeneous"] + [b.name for b in self.mode_blocks]

    def header(self) -> str:
        return f"config_sha256={self.config_hash} seed={self.seed}"


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.replace(";", ",").split(",") if x.strip()]


def _parse_region(sec: configparser.SectionProxy, where: str) -> Region:
    kind = sec.get("kind", "slab")
    try:
        if kind == "slab":
            clips = []
            for part in sec.get("clip", "").split(";"):
                if part.strip():
                    n, off = part.split(":")
                    clips.append((tuple(_floats(n)), float(off)))
            return Slab(tuple(_floats(sec["normal"])), sec.getfloat("offset", 0.0),
                        sec.getfloat("half_width", 3.0), tuple(clips))
        if kind == "ball":
            return EuclideanBall(tuple(_floats(sec["center"])), sec.getfloat("radius"))
    except KeyError as exc:
        raise ConfigError(f"[{where}] missing field {exc.args[0]!r}") from None
    raise ConfigError(f"[{where}] unknown region kind {kind!r}")


def _blocks(cp: configparser.ConfigParser, names: str, where: str) -> list[BlockSpec]:
    out = []
    for name in [n.strip() for n in names.split(",") if n.strip()]:
        sec_name = f"block.{name}"
        if not cp.has_section(sec_name):
            raise ConfigError(f"{where} refers to undefined section [{sec_name}]")
        sec = cp[sec_name]
        out.append(BlockSpec(name, _parse_region(sec, sec_name), sec.getfloat("factor", 0.01)))
    return out


def _canonical(cp: configparser.ConfigParser) -> str:
    # the output location does not change results, so it stays out of the hash
    lines = []
    for s in sorted(cp.sections()):
        for k in sorted(cp[s]):
            if (s, k) != ("experiment", "out"):
                lines.append(f"{s}.{k}={cp[s][k].strip()}")
    return "\n".join(lines)


def load_config(path: Union[str, Path], overrides: dict | None = None) -> ExperimentConfig:
    """Parse an INI experiment file; ``overrides`` maps ``section.key`` to values."""
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"config file {path} not found")
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        sec, k = key.split(".", 1)
        if not cp.has_section(sec):
            cp.add_section(sec)
        cp[sec][k] = str(val)
    try:
        return _build_config(cp)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def _build_config(cp: configparser.ConfigParser) -> ExperimentConfig:
    ex = cp["experiment"] if cp.has_section("experiment") else {}
    if not cp.has_section("truth"):
        raise ConfigError("missing section [truth]")
    tr = cp["truth"]
    if not tr.get("stim_sites", "").strip():
        raise ConfigError("[truth] missing field 'stim_sites'")
    sites = []
    for part in tr["stim_sites"].split(","):
        v, _, d = part.strip().partition(":")
        sites.append((int(v), float(d or 0.0)))
    truth_blocks = _blocks(cp, tr.get("blocks", ""), "[truth] blocks")
    backend = ex.get("distance_backend", "dijkstra")
    spec = TruthSpec(sites, tr.getfloat("speed", 1.0), tr.getfloat("duration", 120.0),
                     tr.getfloat("dt", 1.0), [(b.region, b.factor) for b in truth_blocks],
                     backend)
    fkw = {}
    if cp.has_section("filter"):
        names = {f.name.lower(): f.name for f in fields(FilterConfig)}
        for k, v in cp["filter"].items():
            if k not in names or k in ("direction", "seed", "radius_grid"):
                raise ConfigError(f"[filter] unknown field {k!r}")
            name = names[k]
            fkw[name] = int(v) if name in ("N", "l") else v if name == "resampling" else float(v)
    seed = int(ex.get("seed", 0))
    modes = _blocks(cp, cp["modes"].get("blocks", "") if cp.has_section("modes") else "",
                    "[modes] blocks")
    maps_sec = cp["maps"] if cp.has_section("maps") else {}
    return ExperimentConfig(
        name=ex.get("name", "experiment"),
        seed=seed,
        reps=int(ex.get("reps", 1)),
        direction=ex.get("direction", "both"),
        backend=backend,
        out=Path(ex.get("out", "out")),
        mesh=dict(cp["mesh"]) if cp.has_section("mesh") else {},
        electrodes=dict(cp["electrodes"]) if cp.has_section("electrodes") else {},
        truth=spec,
        noise_level=tr.getfloat("noise_level", 0.04),
        anisotropy=tr.get("anisotropy", "none"),
        longitudinal=tr.getfloat("longitudinal", 3.0),
        transverse=tr.getfloat("transverse", 0.3),
        truth_blocks=truth_blocks,
        filter=FilterConfig(seed=seed, **fkw),
        mode_blocks=modes,
        snapshot_times=_floats(maps_sec.get("snapshot_times", "20, 40, 60, 80")),
        config_hash=hashlib.sha256(_canonical(cp).encode()).hexdigest()[:16],
    )


def make_setup(cfg: ExperimentConfig) -> SphereSetup:
    m, e = cfg.mesh, cfg.electrodes
    return sphere_setup(
        radius_mm=float(m.get("radius_mm", 30.0)),
        subdivisions=int(m.get("subdivisions", 3)),
        truth_subdivisions=int(m.get("truth_subdivisions", int(m.get("subdivisions", 3)) + 1)),
        n_electrodes=int(e.get("count", 128)),
        electrode_radius_mm=float(e.get("radius_mm", 45.0)),
        width=cfg.filter.width,
        kind=m.get("kind", "sphere"),
        axis_scales=tuple(_floats(m.get("axis_scales", "1, 0.7, 0.5"))),
        backend=cfg.backend,
    )


def truth_conductivity(cfg: ExperimentConfig):
    if cfg.anisotropy == "none":
        return 1.0
    if cfg.anisotropy == "circumferential":
        direction = circumferential_fibres()
    elif cfg.anisotropy in ("x", "y", "z"):
        direction = tuple(float(cfg.anisotropy == a) for a in "xyz")
    else:
        raise ConfigError(f"[truth] unknown anisotropy {cfg.anisotropy!r}")
    return Anisotropic(direction, cfg.longitudinal, cfg.transverse)


def _write_lines(path: Path, header: str, rows: list[str]) -> None:
    path.write_text(f"# {header}\n" + "\n".join(rows) + "\n")


def _save_npz(path: Path, header: str, **arrays) -> None:
    # plain (uncompressed) zip members carry fixed timestamps, keeping reruns byte-identical
    np.savez(path, header=np.array(header), **arrays)


# ------------------------------------------------------------------ stages

def cmd_simulate(cfg: ExperimentConfig) -> list[Path]:
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    setup = make_setup(cfg)
    truth = simulate(setup, cfg.truth, truth_conductivity(cfg))
    true_map = restrict_truth(setup, truth)
    h = cfg.header()
    files = []
    p = out / "truth_activation.csv"
    write_scalar_csv(p, true_map.times, "activation_ms", h)
    files.append(p)
    p = out / "truth_voltage.npz"
    _save_npz(p, h, voltage=truth.voltage, times=cfg.truth.times,
              truth_vertices=setup.truth_mesh.vertices)
    files.append(p)
    p = out / "observations_noiseless.csv"
    save_observations_csv(p, truth.observations, h)
    files.append(p)
    for r in range(cfg.reps):
        noisy = add_noise(truth.observations, cfg.noise_level,
                          np.random.default_rng([cfg.seed + r, 7919]))
        p = out / f"observations_rep{r}.csv"
        save_observations_csv(p, noisy, f"{h} rep={r} noise_std={noisy.noise['std']!r} "
                                        f"snr_db={noisy.noise['snr_db']!r}")
        files.append(p)
    p = out / "truth.vtk"
    write_vtk(p, setup.mesh, {"activation_ms": true_map.times}, title=h)
    files.append(p)
    return files


def _mode_tables(cfg: ExperimentConfig, setup: SphereSetup):
    return make_block_metrics(setup.mesh, [(b.region, b.factor) for b in cfg.mode_blocks],
                              cfg.backend, names=[b.name for b in cfg.mode_blocks])


def _filter_job(args):
    obs, tables, operators, fcfg = args
    return run_filter(obs, tables, operators, fcfg)


def cmd_filter(cfg: ExperimentConfig, workers: int = 1) -> list[Path]:
    out = cfg.out
    obs_files = [out / f"observations_rep{r}.csv" for r in range(cfg.reps)]
    missing = [str(p) for p in obs_files if not p.exists()]
    if missing:
        raise MissingInputError(f"missing observations: {', '.join(missing)} (run simulate first)")
    setup = make_setup(cfg)
    tables = _mode_tables(cfg, setup)
    operators = [setup.operator] * len(tables)
    (out / "tables").mkdir(exist_ok=True)
    for k, t in enumerate(tables):
        save_table(out / "tables" / f"mode{k}_{t.metric_id}.geot", t)
    jobs, names = [], []
    base = {f.name: getattr(cfg.filter, f.name) for f in fields(FilterConfig)}
    for r, p in enumerate(obs_files):
        obs = load_observations_csv(p).values
        for d in cfg.directions:
            fcfg = FilterConfig(**{**base, "direction": d, "seed": cfg.seed + r})
            jobs.append((obs, tables, operators, fcfg))
            names.append(f"trace_{DIR_TAGS[d]}_rep{r}")
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            traces = list(pool.map(_filter_job, jobs))
    else:
        traces = [_filter_job(j) for j in jobs]
    files = []
    for name, tr, job in zip(names, traces, jobs):
        head = {"config_sha256": cfg.config_hash, "seed": job[3].seed,
                "direction": tr.direction, "modes": cfg.mode_names}
        files.extend(tr.save(out / name, head))
    return files


def _load_traces(cfg: ExperimentConfig) -> dict[str, FilterTrace]:
    found = sorted(cfg.out.glob("trace_*_rep*.npz"))
    if not found:
        raise MissingInputError(f"no traces in {cfg.out} (run filter first)")
    return {p.stem: FilterTrace.load(p) for p in found}


def _report_row(name: str, amap: ActivationMap, true_map: ActivationMap) -> str:
    try:
        c = compare_maps(amap, true_map)
    except UndefinedCorrelationError as exc:
        log.warning("%s: %s", name, exc)
        c = {"r": float("nan"), "coverage": float(np.mean(amap.activated & true_map.activated))}
    return f"{name},{c['r']!r},{c['coverage']!r}"


def cmd_maps(cfg: ExperimentConfig) -> list[Path]:
    out = cfg.out
    traces = _load_traces(cfg)
    truth_file = out / "truth_activation.csv"
    if not truth_file.exists():
        raise MissingInputError(f"{truth_file} not found (run simulate first)")
    true_map = ActivationMap(read_scalar_csv(truth_file))
    setup = make_setup(cfg)
    tables = _mode_tables(cfg, setup)
    tpl = setup.template
    dt = cfg.truth.dt
    h = cfg.header()
    mdir = out / "maps"
    mdir.mkdir(exist_ok=True)
    files, report = [], []
    for name, tr in traces.items():
        amap = activation_map(tr, tables, tpl, dt)
        p = mdir / f"{name}_activation.csv"
        write_scalar_csv(p, amap.times, "activation_ms", h)
        files.append(p)
        p = mdir / f"{name}_eas.csv"
        write_scalar_csv(p, eas_pseudo_probability(tr).values, "eas_pseudo_probability", h)
        files.append(p)
        t, probs = mode_timeline(tr, dt)
        p = mdir / f"{name}_modes.csv"
        write_mode_timeline_csv(p, t, probs, cfg.mode_names, h)
        files.append(p)
        order = np.argsort(tr.obs_index, kind="stable")
        for ts in cfg.snapshot_times:
            k = int(round(ts / dt))
            if 0 <= k < len(order):
                ap = activation_probability(tr.ensemble(int(order[k])), tables, tpl)
                p = mdir / f"{name}_actprob_t{int(ts)}.csv"
                write_scalar_csv(p, ap.values, "activation_probability", h)
                files.append(p)
        report.append(_report_row(name, amap, true_map))

    all_traces = list(traces.values())
    amap = activation_map(all_traces, tables, tpl, dt)
    eas = combined_eas(all_traces)
    t, probs = mode_timeline(all_traces, dt)
    p = mdir / "combined_activation.csv"
    write_scalar_csv(p, amap.times, "activation_ms", h)
    files.append(p)
    p = mdir / "combined_eas.csv"
    write_scalar_csv(p, eas.values, "eas_pseudo_probability", h)
    files.append(p)
    p = mdir / "combined_modes.csv"
    write_mode_timeline_csv(p, t, probs, cfg.mode_names, h)
    files.append(p)
    report.append(_report_row("combined", amap, true_map))
    p = mdir / "correlation_report.csv"
    _write_lines(p, h, ["run,pearson_r,coverage"] + report)
    files.append(p)
    p = mdir / "maps.vtk"
    write_vtk(p, setup.mesh, {"activation_ms": amap.times, "true_activation_ms": true_map.times,
                              "eas_pseudo_probability": eas.values}, title=h)
    files.append(p)
    return files


def cmd_report(cfg: ExperimentConfig) -> list[Path]:
    out = cfg.out
    mdir = out / "maps"
    need = [mdir / "correlation_report.csv", mdir / "combined_eas.csv", mdir / "combined_modes.csv"]
    missing = [str(p) for p in need if not p.exists()]
    if missing:
        raise MissingInputError(f"missing map outputs: {', '.join(missing)} (run maps first)")
    rows = [ln.split(",") for ln in need[0].read_text().splitlines()[2:] if ln]
    pearson = {r[0]: float(r[1]) for r in rows}
    setup = make_setup(cfg)
    eas = read_scalar_csv(need[1])
    sites = [v for v, _ in cfg.truth.stim_sites]
    errs = eas_site_errors(setup.mesh, setup.table, eas, sites)
    mode_lines = [ln for ln in need[2].read_text().splitlines() if ln and not ln.startswith("#")]
    probs = np.array([[float(x) for x in ln.split(",")[1:]] for ln in mode_lines[1:]])
    summary = {
        "pearson_r": pearson["combined"],
        "pearson_r_runs": {k: v for k, v in pearson.items() if k != "combined"},
        "eas_error_mm": [float(e) for e in errs],
        "eas_argmax_error_mm": float(min(setup.table.distances[int(np.argmax(eas)), s] for s in sites)),
        "mode_prob_mean": dict(zip(cfg.mode_names, probs.mean(axis=0).tolist())),
    }
    p_txt = out / "summary.txt"
    body = [f"# {cfg.header()}"]
    body += [f"{k} = {json.dumps(v)}" for k, v in summary.items()]
    p_txt.write_text("\n".join(body) + "\n")
    p_csv = out / "summary.csv"
    _write_lines(p_csv, cfg.header(), [
        "key,value",
        f"pearson_r,{summary['pearson_r']!r}",
        f"eas_error_mm,{max(summary['eas_error_mm'])!r}",
        *[f"mode_prob_mean.{k},{v!r}" for k, v in summary["mode_prob_mean"].items()],
    ])
    return [p_txt, p_csv]
