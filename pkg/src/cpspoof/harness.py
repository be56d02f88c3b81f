"""Run orchestration: simulate, inject, filter, detect and report through files.

Every stage reads and writes artifacts in a run directory, so the full
pipeline and a chain of separately invoked stages produce the same bytes.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import detector as det
from . import estimator as est
from . import observables as obs
from . import scenario as scn
from . import spoofing as spf
from .geometry import default_constellation, load_constellation, save_constellation

log = logging.getLogger(__name__)

TRUTH = "truth.csv"
IMU = "imu.csv"
OBSERVABLES = "observables.jsonl"
SPOOFED = "observables_spoofed.jsonl"
CONSTELLATION = "constellation.json"
FIXES = "fixes.csv"
STATES = "states.csv"
VERDICTS = "verdicts.csv"
ERRORS = "position_errors.csv"
REPORT = "report.json"
RESOLVED = "config.json"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DetectorConfig:
    mode: str = "chi2"
    pf: float = 0.01
    window: int = 10
    thresholds: dict | None = None  # env label -> gamma

    def state(self):
        return det.DetectorState(length=self.window, mode=self.mode, pf=self.pf,
                                 thresholds=dict(self.thresholds or {}))

    def to_json(self):
        out = {"mode": self.mode, "pf": self.pf, "window": self.window}
        if self.thresholds is not None:
            out["thresholds"] = det.thresholds_to_json(self.thresholds)
        return out


@dataclass(frozen=True)
class RunConfig:
    scenario: scn.ScenarioConfig
    environment: obs.EnvSchedule
    imu_grade: str = "industrial"
    attack: object = None
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    seed: int = 0
    constellation: list | None = None  # JSON document; None -> built-in default
    epoch_rate_hz: float = 5.0
    record_rate_hz: float = 20.0
    vehicle_constraints: bool = False

    def __post_init__(self):
        scn.imu_grade(self.imu_grade)
        if not self.environment.covers(self.scenario.start_s, self.scenario.end_s):
            raise ConfigError("environment schedule does not cover the scenario")
        if self.detector.mode == "empirical" and not self.detector.thresholds:
            raise ConfigError("empirical detector mode needs a thresholds file")

    @property
    def imu_model(self):
        return scn.imu_grade(self.imu_grade)

    def load_constellation(self):
        if self.constellation is None:
            return default_constellation()
        from .geometry import Constellation
        return Constellation.from_json(self.constellation)

    def to_json(self):
        return {
            "scenario": self.scenario.to_json(),
            "environment": self.environment.to_json(),
            "imu_grade": self.imu_grade,
            "attack": None if self.attack is None else self.attack.to_json(),
            "detector": self.detector.to_json(),
            "seed": self.seed,
            "constellation": self.constellation,
            "epoch_rate_hz": self.epoch_rate_hz,
            "record_rate_hz": self.record_rate_hz,
            "vehicle_constraints": self.vehicle_constraints,
        }

    def digest(self):
        return config_digest(self.to_json())


def _canonical(doc):
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def config_digest(doc):
    return hashlib.sha256(_canonical(doc).encode()).hexdigest()


def _resolve(value, base, loader):
    """Inline JSON value, or a path (relative to the config file) to load."""
    if isinstance(value, str) and value != "none":
        p = Path(value)
        if not p.is_absolute() and base is not None:
            p = Path(base) / p
        if not p.exists():
            raise ConfigError(f"referenced file {p} does not exist")
        return loader(p)
    return value


def _read_json(path):
    with open(path) as fh:
        return json.load(fh)


def load_run_configs(doc, base_dir=None, overrides=None):
    """Expand a config document (``seeds`` list allowed) into RunConfigs."""
    doc = copy.deepcopy(doc)
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    try:
        scen = _resolve(doc.get("scenario"), base_dir, _read_json)
        if scen is None:
            raise ConfigError("config lacks a scenario")
        scenario = scn.ScenarioConfig.from_json(scen)
        env_doc = doc.get("environment", "open_sky")
        if isinstance(env_doc, str) and env_doc.endswith(".json"):
            env_doc = _resolve(env_doc, base_dir, _read_json)
        environment = obs.EnvSchedule.from_json(env_doc)
        attack_doc = overrides.get("attack", doc.get("attack"))
        if attack_doc == "none":
            attack_doc = None
        attack_doc = _resolve(attack_doc, None if "attack" in overrides else base_dir,
                              _read_json)
        attack = spf.attack_from_json(attack_doc)

        dd = dict(doc.get("detector") or {})
        mode = overrides.get("detector", dd.get("mode", "chi2"))
        pf = float(overrides.get("pf", dd.get("pf", 0.01)))
        thr = overrides.get("thresholds", dd.get("thresholds"))
        thr = _resolve(thr, None if "thresholds" in overrides else base_dir, _read_json)
        thresholds = None if thr is None else det.thresholds_from_json(thr)
        detcfg = DetectorConfig(mode, pf, int(dd.get("window", 10)), thresholds)

        con = _resolve(doc.get("constellation"), base_dir, _read_json)
        grade = overrides.get("imu", doc.get("imu_grade", "industrial"))
        if "seed" in overrides:
            seeds = [int(overrides["seed"])]
        elif "seeds" in doc:
            seeds = [int(s) for s in doc["seeds"]]
        else:
            seeds = [int(doc.get("seed", 0))]
        return [
            RunConfig(
                scenario=scenario, environment=environment, imu_grade=grade, attack=attack,
                detector=detcfg, seed=s, constellation=con,
                epoch_rate_hz=float(doc.get("epoch_rate_hz", 5.0)),
                record_rate_hz=float(doc.get("record_rate_hz", 20.0)),
                vehicle_constraints=bool(doc.get("vehicle_constraints", False)),
            )
            for s in seeds
        ]
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid run config: {exc}") from exc


def read_run_configs(path, overrides=None):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        doc = _read_json(path)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return load_run_configs(doc, path.parent, overrides)


# -- stages --------------------------------------------------------------------


def _write_json(doc, path):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def stage_simulate(cfg, out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(cfg.to_json(), out / RESOLVED)
    con = cfg.load_constellation()
    truth = scn.generate_trajectory(cfg.scenario, cfg.seed)
    imu = scn.synthesize_imu(truth, cfg.imu_model, cfg.seed)
    stream = obs.synthesize_stream(truth, con, cfg.environment, cfg.seed, cfg.record_rate_hz)
    save_constellation(con, out / CONSTELLATION)
    scn.save_truth_csv(truth, out / TRUTH)
    scn.save_imu_csv(imu, out / IMU)
    obs.write_jsonl(stream, out / OBSERVABLES)


def stage_inject(cfg, out):
    out = Path(out)
    if cfg.attack is None:
        return None
    con = load_constellation(out / CONSTELLATION)
    truth = scn.load_truth_csv(out / TRUTH)
    stream = obs.read_jsonl(out / OBSERVABLES)
    spoofed = spf.apply_attack(stream, cfg.attack, con, truth)
    obs.write_jsonl(spoofed, out / SPOOFED)
    return out / SPOOFED


def stage_filter(cfg, out):
    out = Path(out)
    con = load_constellation(out / CONSTELLATION)
    truth = scn.load_truth_csv(out / TRUTH)
    imu = scn.load_imu_csv(out / IMU)
    src = out / (SPOOFED if cfg.attack is not None else OBSERVABLES)
    if not src.exists():
        raise ConfigError(f"{src.name} missing; run the earlier stages first")
    stream = obs.decimate(obs.read_jsonl(src), cfg.epoch_rate_hz)
    if not stream:
        raise ConfigError("no epochs on the filter grid")
    model = cfg.imu_model
    x0 = est.initial_state(truth.at(stream[0].t), model, np.random.default_rng([cfg.seed, 2]))
    fcfg = est.FilterConfig(imu=model, vehicle_constraints=cfg.vehicle_constraints)
    fixes, states = est.run_filter(imu, stream, x0, con, fcfg)
    est.save_fixes_csv(fixes, out / FIXES)
    est.save_states_csv(states, out / STATES)
    return fixes, states


def stage_detect(cfg, out):
    out = Path(out)
    fixes = est.load_fixes_csv(out / FIXES)
    envs = [cfg.environment.label(f.t) for f in fixes]
    verdicts = det.run_detector(fixes, envs, cfg.detector.state())
    det.save_verdicts_csv(verdicts, out / VERDICTS)
    return verdicts


@dataclass
class RunReport:
    digest: str
    verdicts: list
    time_to_detect: float | None
    false_alarms: int
    position_errors: np.ndarray  # columns t, ex, ey, ez (truth minus estimate)
    ccdf: dict
    summary: dict

    @property
    def psi(self):
        return np.array([v.psi for v in self.verdicts])

    @property
    def t(self):
        return np.array([v.t for v in self.verdicts])


def emit_ccdf(fixes, env_labels, length=10, points=60):
    """Per-environment CCDF tables of the windowed statistic."""
    psi = det.windowed_psi(fixes, length)
    labels = np.array(env_labels)
    out = {}
    for env in sorted(set(env_labels)):
        out[env] = det.ccdf_table(psi[labels == env], points)
    return out


def stage_report(cfg, out):
    out = Path(out)
    verdicts = det.load_verdicts_csv(out / VERDICTS)
    fixes = est.load_fixes_csv(out / FIXES)
    truth = scn.load_truth_csv(out / TRUTH)
    states = est.load_states_csv(out / STATES)
    truth_pos = np.array([truth.at(t).position for t in states["t"]])
    err = truth_pos - states["position"]
    with open(out / ERRORS, "w") as fh:
        fh.write("t,ex,ey,ez,norm\n")
        for t, e in zip(states["t"], err):
            fh.write(",".join(repr(float(x)) for x in (t, *e, np.linalg.norm(e))) + "\n")

    envs = [v.env for v in verdicts]
    ccdf = emit_ccdf(fixes, envs, cfg.detector.window)
    for env, (grid, c) in ccdf.items():
        det.save_ccdf_csv(grid, c, out / f"ccdf_{env}.csv")

    atk = cfg.attack
    if atk is None:
        ttd = None
        false_alarms = sum(v.hypothesis == "H1" for v in verdicts)
    else:
        ttd = det.time_to_detect(verdicts, atk.start_s)
        false_alarms = sum(v.hypothesis == "H1" and v.t < atk.start_s - 1e-9 for v in verdicts)
    norms = np.linalg.norm(err, axis=1)
    n_used = sum(f.n_k for f in fixes if f.fix_applied)
    summary = {
        "digest": cfg.digest(),
        "config": cfg.to_json(),
        "epochs": len(verdicts),
        "h1_count": int(sum(v.hypothesis == "H1" for v in verdicts)),
        "false_alarms": int(false_alarms),
        "time_to_detect_s": ttd,
        "fixes_skipped": int(sum(not f.fix_applied for f in fixes)),
        "mean_eps_per_pair": float(sum(f.eps_phi for f in fixes) / max(1, n_used)),
        "position_error_final_m": float(norms[-1]) if norms.size else None,
        "position_error_max_m": float(norms.max()) if norms.size else None,
    }
    if atk is not None:
        k = int(np.argmin(np.abs(states["t"] - atk.end_s)))
        summary["position_error_attack_end_m"] = float(norms[k])
        in_atk = [v.psi for v in verdicts if atk.active(v.t)]
        summary["median_psi_attack"] = float(np.median(in_atk)) if in_atk else None
    _write_json(summary, out / REPORT)
    return RunReport(summary["digest"], verdicts, ttd, int(false_alarms),
                     np.column_stack([states["t"], err]), ccdf, summary)


@dataclass
class InMemoryRun:
    cfg: RunConfig
    truth: scn.Trajectory
    fixes: list
    states: list
    envs: list
    verdicts: list

    @property
    def t(self):
        return np.array([f.t for f in self.fixes])

    @property
    def psi(self):
        return np.array([v.psi for v in self.verdicts])

    def position_errors(self):
        """Truth minus estimate at each filter epoch."""
        return np.array([self.truth.at(s.t).position - s.position for s in self.states])


def execute(cfg, detector=None):
    """The whole pipeline without touching the filesystem."""
    con = cfg.load_constellation()
    truth = scn.generate_trajectory(cfg.scenario, cfg.seed)
    imu = scn.synthesize_imu(truth, cfg.imu_model, cfg.seed)
    stream = obs.synthesize_stream(truth, con, cfg.environment, cfg.seed, cfg.record_rate_hz)
    stream = spf.apply_attack(stream, cfg.attack, con, truth)
    stream = obs.decimate(stream, cfg.epoch_rate_hz)
    model = cfg.imu_model
    x0 = est.initial_state(truth.at(stream[0].t), model, np.random.default_rng([cfg.seed, 2]))
    fcfg = est.FilterConfig(imu=model, vehicle_constraints=cfg.vehicle_constraints)
    fixes, states = est.run_filter(imu, stream, x0, con, fcfg)
    envs = [cfg.environment.label(f.t) for f in fixes]
    state = (detector or cfg.detector).state()
    verdicts = det.run_detector(fixes, envs, state)
    return InMemoryRun(cfg, truth, fixes, states, envs, verdicts)


def run_scenario(cfg, out):
    """simulate -> inject (if configured) -> filter -> detect -> report."""
    stage_simulate(cfg, out)
    stage_inject(cfg, out)
    stage_filter(cfg, out)
    stage_detect(cfg, out)
    return stage_report(cfg, out)


def run_dir(out, cfg, many):
    """Output directory for one run; campaigns are namespaced by digest."""
    return Path(out) / cfg.digest()[:16] if many else Path(out)


def _run_one(args):
    cfg, out = args
    return run_scenario(cfg, out)


def run_campaign(cfgs, out, workers=1):
    """Independent runs (optionally in parallel processes); results in input order."""
    jobs = [(c, run_dir(out, c, len(cfgs) > 1)) for c in cfgs]
    if workers <= 1 or len(jobs) <= 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_one, jobs))


def _null_fixes(args):
    cfg, out = args
    stage_simulate(cfg, out)
    fixes, _ = stage_filter(cfg, out)
    return fixes, [cfg.environment.label(f.t) for f in fixes]


def calibrate(cfgs, out, workers=1, required=("shallow_urban", "deep_urban")):
    """Empirical thresholds (pooled per-environment maxima) from null runs."""
    for c in cfgs:
        if c.attack is not None:
            raise ConfigError("calibration runs must not contain an attack")
    out = Path(out)
    jobs = [(c, out / c.digest()[:16]) for c in cfgs]
    if workers <= 1:
        runs = [_null_fixes(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_null_fixes, jobs))
    length = cfgs[0].detector.window if cfgs else 10
    best = det.pooled_thresholds(runs, length, required)
    out.mkdir(parents=True, exist_ok=True)
    det.save_thresholds(best, out / "thresholds.json")
    return best, runs
