"""Command-line scenario runner.

    sat run <config>
    sat sweep <config> --axis channel.Omega --values 0,0.5,1
    sat validate [--config <config>]

Configs are YAML (JSON is accepted as a YAML subset). Units: hbar = a = 1 and
all energies and rates are in units of the ``J`` given in the channel block.
Every run writes its resolved config, CSV tables and a JSON summary into the
output directory. ``SAT_WORKERS`` sets the number of parallel sweep workers.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from sat import __version__, fermiflow, mps, observables, oracle, scattering
from sat.model import ChannelParams, LatticeGeometry, Species, transparency_detuning

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ENGINE = 3
EXIT_VALIDATION = 4

WORKERS_ENV = "SAT_WORKERS"


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        self.key, self.line = key, line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key:
            where.append(f"key '{key}'")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


class EngineError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# config schema


@dataclass
class ChannelConfig:
    J: float = 1.0
    Omega: float = 0.0
    Delta: float | str = 0.0  # a number or "transparent"
    U_qb: float = 0.0
    U_bm: float = 0.0
    U_bb: float = 0.0
    species: str = "boson"
    n_max: int = 1
    label: str = ""

    def params(self, n_max: int | None = None) -> ChannelParams:
        base = ChannelParams(J=self.J, Omega=self.Omega, Delta=0.0, U_qb=self.U_qb, U_bm=self.U_bm,
                             U_bb=self.U_bb, species=Species(self.species), n_max=n_max or self.n_max)
        if self.Delta == "transparent":
            return base.with_(Delta=transparency_detuning(base))
        return base.with_(Delta=float(self.Delta))


@dataclass
class GeometryConfig:
    M_left: int = 16
    M_right: int = 16
    N: int = 16

    def build(self) -> LatticeGeometry:
        return LatticeGeometry(self.M_left, self.M_right, self.N)


@dataclass
class NumericsConfig:
    dt: float = 0.02
    T_final: float = 10.0
    chi_max: int = 128
    discard_tol: float = 1e-8
    n_max: int | None = None
    obs_interval: float = 0.1
    ramp: str = "sudden"
    truncation_budget: float = 1e-3
    window: list | None = None
    snapshot_interval: float = 1.0
    n_samples: int = 400
    gs_tol: float = 1e-8
    dynamics: bool = True


@dataclass
class ScanConfig:
    fillings: list = field(default_factory=lambda: [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0])
    omegas: list = field(default_factory=lambda: [0.0, 1.0, 2.0])
    filling: float | None = None
    k0: float = math.pi / 2
    boson: bool = False


@dataclass
class OutputConfig:
    directory: str = "sat-output"
    csv: bool = True
    json: bool = True
    checkpoint: bool = False


@dataclass
class ScenarioConfig:
    scenario: str
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    channels: list = field(default_factory=list)
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    numerics: NumericsConfig = field(default_factory=NumericsConfig)
    scan: ScanConfig = field(default_factory=ScanConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def resolved(self) -> dict:
        d = asdict(self)
        d["engine_version"] = __version__
        d["units"] = "hbar = a = 1; energies and rates in units of channel J"
        return d


SECTIONS = {
    "channel": ChannelConfig,
    "geometry": GeometryConfig,
    "numerics": NumericsConfig,
    "scan": ScanConfig,
    "output": OutputConfig,
}

REFERENCE_CHANNELS = [
    {"Omega": 4.0, "Delta": 0.0, "U_qb": 0.0, "label": "omega4"},
    {"Omega": 8.0, "Delta": 4.0, "U_qb": 2.0, "label": "omega8_delta4_u2"},
    {"Omega": 1.0, "Delta": 0.0, "U_qb": 2.0, "label": "omega1_u2"},
    {"Omega": 1.0, "Delta": 0.0, "U_qb": 0.0, "label": "omega1"},
]

SCENARIO_DEFAULTS = {
    "transmission-scan": {"channels": REFERENCE_CHANNELS},
    "fermi-transport": {
        "channel": {"species": "fermion", "Omega": 1.0},
        "geometry": {"M_left": 40, "M_right": 40, "N": 40},
        "numerics": {"T_final": 12.0},
    },
    "boson-transport": {
        "channel": {"Omega": 1.0},
        "geometry": {"M_left": 16, "M_right": 16, "N": 16},
        "numerics": {"T_final": 6.4},
    },
    "current-vs-filling": {
        "geometry": {"M_left": 16, "M_right": 16, "N": 16},
        "numerics": {"T_final": 6.4},
    },
    "current-vs-omega": {
        "geometry": {"M_left": 16, "M_right": 16, "N": 16},
        "numerics": {"T_final": 6.4},
        "scan": {"omegas": [0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0], "filling": 1.0},
    },
    "mi-melting": {
        "geometry": {"M_left": 18, "M_right": 54, "N": 18},
        "numerics": {"T_final": 12.0, "snapshot_interval": 0.5},
    },
    "boosted-gas": {
        "channel": {"Omega": 1.0},
        "geometry": {"M_left": 40, "M_right": 60, "N": 2},
        "numerics": {"T_final": 20.0},
    },
    "qubit-readout": {
        "channels": [
            {"Omega": 8.0, "U_qb": 2.0, "Delta": "transparent", "label": "up"},
            {"Omega": 8.0, "U_qb": 2.0, "Delta": 0.0, "label": "down"},
        ],
        "geometry": {"M_left": 18, "M_right": 54, "N": 18},
        "numerics": {"T_final": 12.0, "snapshot_interval": 0.5},
    },
    "oracle-validate": {},
}

LONG_RUNNING_N = 24


# ---------------------------------------------------------------------------
# parsing


def _key_lines(node, prefix="", out=None) -> dict:
    """Map dotted key paths to 1-based source lines from a composed YAML tree."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            path = f"{prefix}.{k.value}" if prefix else str(k.value)
            out[path] = k.start_mark.line + 1
            _key_lines(v, path, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            path = f"{prefix}[{i}]"
            out[path] = v.start_mark.line + 1
            _key_lines(v, path, out)
    return out


def load_config_text(text: str) -> tuple[dict, dict]:
    try:
        node = yaml.compose(text)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"unparseable config: {getattr(exc, 'problem', exc)}",
                          line=mark.line + 1 if mark else None) from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping at top level", line=1)
    return raw, _key_lines(node)


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _coerce(cls, data, path: str, lines: dict):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("expected a mapping", key=path, line=lines.get(path))
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            full = f"{path}.{key}"
            raise ConfigError(f"unknown key (allowed: {', '.join(sorted(known))})", key=full, line=lines.get(full))
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(str(exc), key=path, line=lines.get(path)) from exc


def _check_channel(ch: ChannelConfig, path: str, lines: dict) -> None:
    try:
        Species(ch.species)
    except ValueError:
        raise ConfigError(f"species must be 'boson' or 'fermion', got {ch.species!r}",
                          key=f"{path}.species", line=lines.get(f"{path}.species")) from None
    if isinstance(ch.Delta, str) and ch.Delta != "transparent":
        raise ConfigError("Delta must be a number or 'transparent'", key=f"{path}.Delta",
                          line=lines.get(f"{path}.Delta"))
    try:
        ch.params()
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(str(exc), key=path, line=lines.get(path)) from exc


def build_config(raw: dict, lines: dict | None = None) -> ScenarioConfig:
    lines = lines or {}
    allowed = {"scenario", "channels", *SECTIONS}
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"unknown key (allowed: {', '.join(sorted(allowed))})", key=key, line=lines.get(key))
    name = raw.get("scenario")
    if name not in SCENARIO_DEFAULTS:
        raise ConfigError(f"scenario must be one of {', '.join(SCENARIO_DEFAULTS)}", key="scenario",
                          line=lines.get("scenario"))
    merged = _merge(SCENARIO_DEFAULTS[name], raw)
    kwargs = {"scenario": name}
    for key, cls in SECTIONS.items():
        kwargs[key] = _coerce(cls, merged.get(key), key, lines)
    chans = merged.get("channels") or []
    if not isinstance(chans, list):
        raise ConfigError("expected a list", key="channels", line=lines.get("channels"))
    base = asdict(kwargs["channel"])
    kwargs["channels"] = [
        _coerce(ChannelConfig, _merge(base, c if isinstance(c, dict) else {}), f"channels[{i}]", lines)
        for i, c in enumerate(chans)
    ]
    cfg = ScenarioConfig(**kwargs)
    _check_channel(cfg.channel, "channel", lines)
    for i, c in enumerate(cfg.channels):
        _check_channel(c, f"channels[{i}]", lines)
    if cfg.numerics.ramp not in ("sudden", "slow"):
        raise ConfigError("ramp must be 'sudden' or 'slow'", key="numerics.ramp", line=lines.get("numerics.ramp"))
    try:
        geo = cfg.geometry.build()
        for ch in cfg.channels or [cfg.channel]:
            geo.check_capacity(1 if ch.species == "fermion" else (cfg.numerics.n_max or ch.n_max))
    except ValueError as exc:
        raise ConfigError(str(exc), key="geometry", line=lines.get("geometry")) from exc
    if name == "qubit-readout" and len(cfg.channels) != 2:
        raise ConfigError("qubit-readout needs exactly two channels (transparent, blocking)", key="channels",
                          line=lines.get("channels"))
    return cfg


def load_config(path) -> ScenarioConfig:
    text = Path(path).read_text()
    raw, lines = load_config_text(text)
    return build_config(raw, lines)


# ---------------------------------------------------------------------------
# output helpers


def _num(x):
    if isinstance(x, (bool, np.bool_)):
        return int(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return x


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_num(x) for x in r])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


def write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")


def _schedule(cfg: ScenarioConfig, params: ChannelParams) -> mps.OmegaSchedule:
    if cfg.numerics.ramp == "slow":
        return mps.OmegaSchedule.slow(params.Omega, params.J)
    return mps.OmegaSchedule.sudden(params.Omega)


def _fit(series, cfg: ScenarioConfig) -> dict:
    window = tuple(cfg.numerics.window) if cfg.numerics.window else None
    try:
        fit = fermiflow.steady_current(series, window=window)
    except fermiflow.InsufficientWindowError as exc:
        if window is not None:
            raise  # an explicit window that cannot be honoured is an error
        return {"current": float("nan"), "stderr": float("nan"), "fit_error": str(exc)}
    return {"current": fit.current, "stderr": fit.stderr, "window": list(fit.window), "n_samples": fit.n_samples}


# ---------------------------------------------------------------------------
# engines


def _fermion_run(params: ChannelParams, geometry: LatticeGeometry, cfg: ScenarioConfig):
    params = params.with_(species=Species.FERMION)
    system = fermiflow.build_system(params, geometry)
    state = fermiflow.prepare_fermi_sea(system, geometry)
    n_steps = int(round(cfg.numerics.T_final / cfg.numerics.obs_interval))
    return fermiflow.evolve(state, system, cfg.numerics.obs_interval, n_steps)


def _boson_ground(params: ChannelParams, geometry: LatticeGeometry, cfg: ScenarioConfig) -> mps.MPSState:
    return mps.ground_state(params, geometry, chi_max=cfg.numerics.chi_max, discard_tol=cfg.numerics.discard_tol,
                            tol=cfg.numerics.gs_tol)


def _boson_run(params, geometry, cfg, state=None, observer=None):
    if params.species is not Species.BOSON:
        params = params.with_(species=Species.BOSON)
    n = cfg.numerics
    state = state if state is not None else _boson_ground(params, geometry, cfg)
    traj = mps.evolve_quench(state, params, geometry, dt=n.dt, T_final=n.T_final, schedule=_schedule(cfg, params),
                             obs_interval=n.obs_interval, truncation_budget=n.truncation_budget, observer=observer)
    return traj, state


def _boson_params(ch: ChannelConfig, cfg: ScenarioConfig) -> ChannelParams:
    return ch.params(n_max=cfg.numerics.n_max).with_(species=Species.BOSON)


# ---------------------------------------------------------------------------
# scenarios


def scenario_transmission_scan(cfg: ScenarioConfig, out: Path) -> dict:
    curves = []
    for i, ch in enumerate(cfg.channels or [cfg.channel]):
        params = ch.params()
        prof = scattering.transmission_profile(params, cfg.numerics.n_samples)
        label = ch.label or f"channel{i}"
        if cfg.output.csv:
            write_csv(out / f"transmission_{i}_{label}.csv", scattering.PROFILE_COLUMNS, prof.rows())
        entry = {
            "label": label,
            "Omega": params.Omega,
            "Delta": params.Delta,
            "U_qb": params.U_qb,
            "max_T": float(prof.T.max()),
            "min_T": float(prof.T.min()),
        }
        if params.Delta == 0 and params.U_qb == 0:
            entry["analytic_max_T"] = scattering.max_transmission_resonant(params)
        curves.append(entry)
    return {"curves": curves}


def scenario_fermi_transport(cfg: ScenarioConfig, out: Path) -> dict:
    params = cfg.channel.params().with_(species=Species.FERMION)
    geometry = cfg.geometry.build()
    n = cfg.scan.filling if cfg.scan.filling is not None else geometry.filling
    summary = {
        "filling": n,
        "analytic_current": fermiflow.analytic_current_integral(params, n),
        "free_current": fermiflow.free_current(n, params.J),
    }
    if params.Delta == 0 and params.U_qb == 0:
        summary["closed_form_current"] = fermiflow.closed_form_value(params, n)
    if cfg.numerics.dynamics:
        series = _fermion_run(params, geometry, cfg)
        if cfg.output.csv:
            write_csv(out / "trajectory.csv", ("t", "n_right", "n_mol", "n_left", "n_impurity"),
                      zip(series.times, series.n_right, series.n_mol, series.n_left, series.n_impurity))
        summary.update(_fit(series, cfg))
        summary["norm_drift"] = float(np.max(np.abs(series.total - geometry.N)))
    return summary


def scenario_boson_transport(cfg: ScenarioConfig, out: Path) -> dict:
    params = _boson_params(cfg.channel, cfg)
    geometry = cfg.geometry.build()
    traj, state = _boson_run(params, geometry, cfg)
    if cfg.output.csv:
        write_csv(out / "trajectory.csv", mps.Trajectory.COLUMNS, traj.rows())
    if cfg.output.checkpoint:
        mps.save_checkpoint(out / "final_state.npz", state, {"t": traj.times[-1]})
    summary = _fit(traj, cfg)
    summary.update({
        "status": traj.status,
        "truncated_weight": traj.truncated_weight[-1],
        "max_bond": max(traj.max_bond),
        "final_n_right": traj.n_right[-1],
    })
    return summary


def _filling_geometry(cfg: ScenarioConfig, n: float) -> LatticeGeometry:
    g = cfg.geometry
    return LatticeGeometry(g.M_left, g.M_right, max(1, int(round(n * g.M_left))))


def scenario_current_vs_filling(cfg: ScenarioConfig, out: Path) -> dict:
    rows = []
    for om in cfg.scan.omegas:
        for n in cfg.scan.fillings:
            params = cfg.channel.params().with_(Omega=float(om))
            row = [float(om), float(n), fermiflow.analytic_current_integral(params, float(n)),
                   float("nan"), float("nan"), ""]
            if cfg.scan.boson:
                geo = _filling_geometry(cfg, float(n))
                traj, _ = _boson_run(_boson_params(cfg.channel, cfg).with_(Omega=float(om)), geo, cfg)
                fit = _fit(traj, cfg)
                row[3:6] = [fit["current"], fit["stderr"], traj.status]
            rows.append(row)
    header = ("Omega", "n", "fermion_analytic", "boson_current", "boson_stderr", "boson_status")
    if cfg.output.csv:
        write_csv(out / "current_vs_filling.csv", header, rows)
    return {"rows": len(rows)}


def scenario_current_vs_omega(cfg: ScenarioConfig, out: Path) -> dict:
    n = cfg.scan.filling if cfg.scan.filling is not None else cfg.geometry.build().filling
    geo = _filling_geometry(cfg, n)
    rows = []
    for om in cfg.scan.omegas:
        params = cfg.channel.params().with_(Omega=float(om))
        row = [float(om), float(n), fermiflow.analytic_current_integral(params, n), float("nan"),
               float("nan"), float("nan"), ""]
        if cfg.numerics.dynamics:
            row[3] = _fit(_fermion_run(params, geo, cfg), cfg)["current"]
        if cfg.scan.boson:
            traj, _ = _boson_run(_boson_params(cfg.channel, cfg).with_(Omega=float(om)), geo, cfg)
            fit = _fit(traj, cfg)
            row[4:7] = [fit["current"], fit["stderr"], traj.status]
        rows.append(row)
    header = ("Omega", "n", "fermion_analytic", "fermion_dynamic", "boson_current", "boson_stderr", "boson_status")
    if cfg.output.csv:
        write_csv(out / "current_vs_omega.csv", header, rows)
    return {"rows": len(rows)}


def _snapshot_tables(traj: mps.Trajectory, out: Path, prefix: str = "") -> dict:
    times = sorted(traj.snapshots)
    snaps = [traj.snapshots[t] for t in times]
    if not snaps:
        return {}
    L = snaps[0].spdm.L
    k_grid = snaps[0].momentum.k_grid
    m = len(snaps[0].modes.lambdas)
    write_csv(out / f"{prefix}momentum.csv", ["t"] + [f"k{q}" for q in range(L)],
              ([t, *s.momentum.n_k] for t, s in zip(times, snaps)))
    write_csv(out / f"{prefix}k_grid.csv", ("q", "k"), enumerate(k_grid))
    write_csv(out / f"{prefix}lambdas.csv", ["t"] + [f"lambda_{i + 1}" for i in range(m)],
              ([t, *s.modes.lambdas] for t, s in zip(times, snaps)))
    write_csv(out / f"{prefix}mode_density.csv", ["t"] + [f"site{j}" for j in range(L)],
              ([t, *np.abs(s.modes.modes[:, 0]) ** 2] for t, s in zip(times, snaps)))
    final = snaps[-1]
    write_csv(out / f"{prefix}spdm_final_real.csv", [f"site{j}" for j in range(L)], final.spdm.rho.real)
    write_csv(out / f"{prefix}spdm_final_imag.csv", [f"site{j}" for j in range(L)], final.spdm.rho.imag)
    lam1 = np.array([s.modes.lambdas[0] for s in snaps])
    peaks = [s.momentum.peak() for s in snaps]
    return {
        "peak_lambda1": float(lam1.max()),
        "peak_lambda1_time": float(times[int(lam1.argmax())]),
        "final_lambdas": final.modes.lambdas,
        "final_momentum_peak": peaks[-1],
        "lambda1_history": lam1,
        "momentum_peak_history": peaks,
        "snapshot_times": times,
    }


def scenario_mi_melting(cfg: ScenarioConfig, out: Path) -> dict:
    params = _boson_params(cfg.channel, cfg)
    geometry = cfg.geometry.build()
    if geometry.N > LONG_RUNNING_N:
        logger.warning("N=%d is beyond the desk-scale default and may run for hours", geometry.N)
    observer = observables.SnapshotObserver(geometry, interval=cfg.numerics.snapshot_interval)
    traj, _ = _boson_run(params, geometry, cfg, observer=observer)
    if cfg.output.csv:
        write_csv(out / "trajectory.csv", mps.Trajectory.COLUMNS, traj.rows())
    summary = {"status": traj.status, "truncated_weight": traj.truncated_weight[-1], "max_bond": max(traj.max_bond),
               "final_n_right": traj.n_right[-1]}
    summary.update(_snapshot_tables(traj, out) if cfg.output.csv else {})
    if cfg.output.json and traj.snapshots:
        last = traj.snapshots[max(traj.snapshots)]
        write_json(out / "eigenmodes.json", {"t": last.t, "lambdas": last.modes.lambdas,
                                              "degenerate": last.modes.degenerate, "trace": last.spdm.trace})
    return summary


def scenario_boosted_gas(cfg: ScenarioConfig, out: Path) -> dict:
    params = _boson_params(cfg.channel, cfg)
    geometry = cfg.geometry.build()
    k0 = float(cfg.scan.k0)
    state = mps.boost_state(_boson_ground(params, geometry, cfg), k0)
    traj, _ = _boson_run(params, geometry, cfg, state=state)
    if cfg.output.csv:
        write_csv(out / "trajectory.csv", mps.Trajectory.COLUMNS, traj.rows())
    summary = _fit(traj, cfg)
    summary.update({
        "k0": k0,
        "dilute_prediction": scattering.dilute_gas_current(k0, geometry.N, params, geometry.M_left),
        "status": traj.status,
        "truncated_weight": traj.truncated_weight[-1],
    })
    return summary


def scenario_qubit_readout(cfg: ScenarioConfig, out: Path) -> dict:
    geometry = cfg.geometry.build()
    runs = []
    for ch in cfg.channels:
        params = _boson_params(ch, cfg)
        observer = observables.SnapshotObserver(geometry, interval=cfg.numerics.snapshot_interval)
        traj, _ = _boson_run(params, geometry, cfg, observer=observer)
        if cfg.output.csv:
            write_csv(out / f"trajectory_{ch.label}.csv", mps.Trajectory.COLUMNS, traj.rows())
            _snapshot_tables(traj, out, prefix=f"{ch.label}_")
        runs.append(traj)
    report = observables.readout_visibility(runs[0], runs[1], runs[0].times[-1], geometry.N)
    return {
        "t": report.t,
        "up": asdict(report.up),
        "down": asdict(report.down),
        "separation": report.separation,
        "score": report.score,
        "status": [r.status for r in runs],
    }


@dataclass(frozen=True)
class Check:
    name: str
    value: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.value <= self.tolerance)


def oracle_checks() -> list[Check]:
    """Cross-engine comparisons on instances small enough for exact evolution."""
    checks = []

    # TEBD against exact evolution
    params = ChannelParams(Omega=1.0, U_bb=4.0, n_max=2)
    geo = LatticeGeometry(4, 3, 3)
    state = mps.ground_state(params, geo, chi_max=None, discard_tol=0.0, tol=1e-13)
    H, basis = oracle.exact_hamiltonian(params, geo)
    _, dense = oracle.exact_ground_state(params, geo)
    traj = mps.evolve_quench(state, params, geo, dt=0.002, T_final=1.0, obs_interval=0.1, truncation_budget=1.0)
    ref = oracle.exact_evolve(dense, H, 0.1, 10)
    dn = max(float(np.max(np.abs(d - r.densities()))) for d, r in zip(traj.densities, ref))
    checks.append(Check("tebd_vs_exact_densities", dn, 1e-6))
    checks.append(Check("tebd_vs_exact_molecule",
                        max(abs(m - r.molecule()) for m, r in zip(traj.n_mol, ref)), 1e-6))

    # single particle: dense sector vs fermion orbital evolution
    p1 = ChannelParams(Omega=0.7, Delta=0.3, U_qb=0.4, n_max=1)
    g1 = LatticeGeometry(3, 3, 1)
    H1, _ = oracle.exact_hamiltonian(p1, g1)
    _, d1 = oracle.exact_ground_state(p1, g1)
    traj1 = oracle.exact_evolve(d1, H1, 0.25, 8)
    fp = p1.with_(species=Species.FERMION)
    system = fermiflow.build_system(fp, g1)
    series = fermiflow.evolve(fermiflow.prepare_fermi_sea(system, g1), system, 0.25, 8)
    checks.append(Check("dense_vs_fermion_single_particle",
                        max(abs(a - b.n_right()) for a, b in zip(series.n_right, traj1)), 1e-10))

    # wave packet against the scattering formula
    pw = ChannelParams(Omega=1.0)
    k0 = math.pi / 3
    res = oracle.wavepacket_transmission(k0, pw)
    checks.append(Check("wavepacket_vs_T", abs(res.transmitted - float(scattering.transmission(k0, pw))), 0.02))
    return checks


def scenario_oracle_validate(cfg: ScenarioConfig, out: Path) -> dict:
    checks = oracle_checks()
    if cfg.output.csv:
        write_csv(out / "validation.csv", ("check", "value", "tolerance", "passed"),
                  ((c.name, c.value, c.tolerance, c.passed) for c in checks))
    return {"checks": {c.name: {"value": c.value, "tolerance": c.tolerance, "passed": c.passed} for c in checks},
            "all_passed": all(c.passed for c in checks)}


SCENARIOS = {
    "transmission-scan": scenario_transmission_scan,
    "fermi-transport": scenario_fermi_transport,
    "boson-transport": scenario_boson_transport,
    "current-vs-filling": scenario_current_vs_filling,
    "current-vs-omega": scenario_current_vs_omega,
    "mi-melting": scenario_mi_melting,
    "boosted-gas": scenario_boosted_gas,
    "qubit-readout": scenario_qubit_readout,
    "oracle-validate": scenario_oracle_validate,
}


# ---------------------------------------------------------------------------
# orchestration


def run(cfg: ScenarioConfig, directory: Path | None = None) -> dict:
    """Run one scenario; returns its summary. Engine failures become ``EngineError``."""
    out = Path(directory or cfg.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.resolved.json", cfg.resolved())
    start = time.perf_counter()
    try:
        summary = SCENARIOS[cfg.scenario](cfg, out)
    except (ValueError, ArithmeticError, RuntimeError, np.linalg.LinAlgError) as exc:
        raise EngineError(f"scenario {cfg.scenario} failed: {type(exc).__name__}: {exc}") from exc
    summary = {"scenario": cfg.scenario, "engine_version": __version__, **summary,
               "runtime_seconds": time.perf_counter() - start}
    if cfg.output.json:
        write_json(out / "summary.json", summary)
    return summary


def _set_path(raw: dict, path: str, value) -> dict:
    out = copy.deepcopy(raw)
    node = out
    parts = path.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError("axis does not name a mapping entry", key=path)
    node[parts[-1]] = value
    return out


def _axis_exists(cfg: ScenarioConfig, path: str) -> bool:
    parts = path.split(".")
    if len(parts) != 2 or parts[0] not in SECTIONS:
        return False
    return parts[1] in {f.name for f in fields(SECTIONS[parts[0]])}


def _flatten(d: dict, prefix="") -> dict:
    flat = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            flat.update(_flatten(v, key + "."))
        elif isinstance(v, (int, float, str, bool, np.floating, np.integer)):
            flat[key] = v
    return flat


def _sweep_point(args):
    raw, axis, value, directory = args
    try:
        cfg = build_config(_set_path(raw, axis, value))
        summary = run(cfg, directory)
        return {"status": "ok", "error": "", **_flatten(summary)}
    except (ConfigError, EngineError) as exc:
        return {"status": "failed", "error": str(exc)}


def sweep(raw: dict, axis: str, values: list, directory: Path, workers: int = 1) -> list[dict]:
    """Run the scenario once per axis value and collate flat scalar summaries into ``sweep.csv``."""
    base = build_config(raw)
    if not _axis_exists(base, axis):
        raise ConfigError("sweep axis does not exist in the config schema", key=axis)
    directory.mkdir(parents=True, exist_ok=True)
    jobs = [(raw, axis, v, directory / f"point_{i:03d}") for i, v in enumerate(values)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_point, jobs))
    else:
        results = [_sweep_point(j) for j in jobs]
    keys = sorted({k for r in results for k in r if k not in ("status", "error", "runtime_seconds")})
    header = [axis, "status", "error", *keys]
    write_csv(directory / "sweep.csv", header,
              ([v, r["status"], r["error"], *(r.get(k, "") for k in keys)] for v, r in zip(values, results)))
    return results


def parse_values(text: str) -> list:
    if not text.strip():
        return []
    return [yaml.safe_load(item) for item in text.split(",")]


def _workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="sat", description="Single-atom transistor scenario runner")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run one scenario config")
    p_run.add_argument("config")
    p_run.add_argument("-o", "--output", help="override the output directory")
    p_sweep = sub.add_parser("sweep", help="run a config across values of one parameter")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--axis", required=True, help="dotted path, e.g. channel.Omega")
    p_sweep.add_argument("--values", required=True, help="comma separated list")
    p_sweep.add_argument("-o", "--output")
    p_val = sub.add_parser("validate", help="check a config, or run the oracle suite when none is given")
    p_val.add_argument("--config")
    p_val.add_argument("-o", "--output", default="sat-validate")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")

    try:
        if args.command == "run":
            cfg = load_config(args.config)
            summary = run(cfg, Path(args.output) if args.output else None)
            if cfg.scenario == "oracle-validate" and not summary["all_passed"]:
                print("oracle validation failed", file=sys.stderr)
                return EXIT_VALIDATION
        elif args.command == "sweep":
            raw, lines = load_config_text(Path(args.config).read_text())
            build_config(raw, lines)
            directory = Path(args.output or raw.get("output", {}).get("directory", "sat-sweep"))
            results = sweep(raw, args.axis, parse_values(args.values), directory, _workers())
            failed = sum(r["status"] != "ok" for r in results)
            if failed:
                print(f"{failed} of {len(results)} sweep points failed; see sweep.csv", file=sys.stderr)
        else:
            if args.config:
                cfg = load_config(args.config)
                print(json.dumps(_jsonable(cfg.resolved()), indent=2, sort_keys=True))
                return EXIT_OK
            summary = run(build_config({"scenario": "oracle-validate"}), Path(args.output))
            for name, c in summary["checks"].items():
                print(f"{'PASS' if c['passed'] else 'FAIL'} {name}: {c['value']:.3e} <= {c['tolerance']:.0e}")
            if not summary["all_passed"]:
                return EXIT_VALIDATION
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EngineError as exc:
        print(f"engine error: {exc}", file=sys.stderr)
        return EXIT_ENGINE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
