"""Windowed fixed-ambiguity residual cost (WFARC) detector.

``Psi_k`` sums ``eps_phi`` over the last ``l`` epochs and is compared with
either a chi-square threshold at ``N_Psi`` degrees of freedom or an
empirical per-environment threshold just above the largest null value.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import chi2

log = logging.getLogger(__name__)

MODES = ("chi2", "empirical")

# threshold-file keys <-> environment labels
THRESHOLD_KEYS = {"open_sky": "open_sky", "shallow_urban": "shallow", "deep_urban": "deep"}


class DetectorError(ValueError):
    pass


@dataclass(frozen=True)
class DetectorState:
    length: int = 10
    mode: str = "chi2"
    pf: float = 0.01
    thresholds: dict = field(default_factory=dict)  # env label -> gamma
    window: tuple = ()
    psi: float = 0.0
    n_psi: int = 0

    def __post_init__(self):
        if self.length < 1:
            raise DetectorError("window length must be at least 1")
        if self.mode not in MODES:
            raise DetectorError(f"unknown detector mode {self.mode!r}")


def update_wfarc(state, fix):
    """Slide the window by one epoch; skipped or empty epochs contribute (0, 0)."""
    if fix.fix_applied and fix.n_k > 0:
        entry = (float(fix.eps_phi), int(fix.n_k))
    else:
        entry = (0.0, 0)
    window = (state.window + (entry,))[-state.length:]
    return replace(state, window=window, psi=math.fsum(e for e, _ in window),
                   n_psi=sum(n for _, n in window))


def chi2_threshold(n_psi, pf):
    """``gamma`` with ``P(chi2(n_psi) >= gamma) = pf``."""
    if not 0.0 < pf < 1.0:
        raise DetectorError(f"false-alarm probability must lie in (0, 1), got {pf}")
    if n_psi < 1:
        raise DetectorError("chi-square threshold needs at least one degree of freedom")
    return float(chi2.isf(pf, n_psi))


@dataclass(frozen=True)
class Verdict:
    t: float
    psi: float
    n_psi: int
    gamma: float
    mode: str
    env: str
    hypothesis: str


def threshold_for(state, env):
    if state.mode == "chi2":
        if state.n_psi == 0:
            return math.inf
        return chi2_threshold(state.n_psi, state.pf)
    try:
        return float(state.thresholds[env])
    except KeyError:
        raise DetectorError(f"no empirical threshold for environment {env!r}") from None


def decide(state, env, t=math.nan):
    gamma = threshold_for(state, env)
    hyp = "H1" if state.psi >= gamma else "H0"
    return Verdict(float(t), state.psi, state.n_psi, gamma, state.mode, env, hyp)


def run_detector(fixes, envs, state):
    verdicts = []
    for fix, env in zip(fixes, envs, strict=True):
        state = update_wfarc(state, fix)
        verdicts.append(decide(state, env, fix.t))
    return verdicts


def windowed_psi(fixes, length=10):
    """``Psi_k`` for every epoch of one run."""
    state = DetectorState(length=length)
    out = np.empty(len(fixes))
    for k, fix in enumerate(fixes):
        state = update_wfarc(state, fix)
        out[k] = state.psi
    return out


def zero_alarm_threshold(values):
    """Smallest threshold that no value reaches: one ulp above the maximum.

    Under the ``Psi >= gamma`` rule a threshold equal to the maximum would
    flag the maximum itself on replay.
    """
    return float(np.nextafter(max(values), math.inf))


def pooled_thresholds(runs, length=10, required=("shallow_urban", "deep_urban")):
    """Per-environment zero-alarm thresholds over null runs.

    ``runs`` is a sequence of ``(fixes, env_labels)``; windows never straddle runs.
    """
    peak = {}
    for fixes, envs in runs:
        psi = windowed_psi(fixes, length)
        for p, e in zip(psi, envs, strict=True):
            peak[e] = max(peak.get(e, -math.inf), float(p))
    best = {e: zero_alarm_threshold([v]) for e, v in peak.items()}
    missing = [e for e in required if e not in best]
    if missing:
        raise DetectorError(f"null series lacks environment labels {missing}")
    deep, shallow = best.get("deep_urban", math.inf), best.get("shallow_urban", -math.inf)
    if deep < shallow:
        log.warning("deep-urban threshold %.3f below shallow-urban %.3f",
                    best["deep_urban"], best["shallow_urban"])
    return best


def calibrate_empirical_threshold(null_fixes, env_labels, length=10,
                                  required=("shallow_urban", "deep_urban")):
    """``(gamma_shallow, gamma_deep)`` from a single null series."""
    best = pooled_thresholds([(null_fixes, env_labels)], length, required)
    return best.get("shallow_urban"), best.get("deep_urban")


def time_to_detect(verdicts, attack_start):
    for v in verdicts:
        if v.t >= attack_start - 1e-9 and v.hypothesis == "H1":
            return round(v.t - attack_start, 9)
    return None


def ccdf_table(values, points=60):
    """Log-spaced CCDF ``P(Psi >= x)``; starts at 1 (x = 0) and ends at 0."""
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        raise DetectorError("CCDF needs at least one value")
    pos = v[v > 0]
    if pos.size:
        lo, hi = pos[0], v[-1]
        grid = np.geomspace(lo, hi, points) if hi > lo else np.array([hi])
        step = (hi / lo) ** (1.0 / max(points - 1, 1)) if hi > lo else 1.1
        grid = np.concatenate([[0.0], grid, [hi * step]])
    else:
        grid = np.array([0.0, 1.0])
    ccdf = 1.0 - np.searchsorted(v, grid, side="left") / v.size
    return grid, ccdf


# -- persistence ---------------------------------------------------------------


def _fmt(x):
    return repr(float(x))


def save_verdicts_csv(verdicts, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "Psi", "N_Psi", "gamma", "mode", "env", "hypothesis"])
        for v in verdicts:
            w.writerow([_fmt(v.t), _fmt(v.psi), v.n_psi, _fmt(v.gamma), v.mode, v.env,
                        v.hypothesis])


def load_verdicts_csv(path):
    with open(path, newline="") as fh:
        return [Verdict(float(r["t"]), float(r["Psi"]), int(r["N_Psi"]), float(r["gamma"]),
                        r["mode"], r["env"], r["hypothesis"]) for r in csv.DictReader(fh)]


def save_ccdf_csv(grid, ccdf, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["psi_value", "ccdf"])
        for x, c in zip(grid, ccdf):
            w.writerow([_fmt(x), _fmt(c)])


def thresholds_to_json(best):
    return {THRESHOLD_KEYS[e]: g for e, g in sorted(best.items()) if e in THRESHOLD_KEYS}


def thresholds_from_json(doc):
    inverse = {v: k for k, v in THRESHOLD_KEYS.items()}
    out = {}
    for key, g in doc.items():
        if key not in inverse:
            raise DetectorError(f"unknown threshold key {key!r}")
        out[inverse[key]] = float(g)
    return out


def save_thresholds(best, path):
    with open(path, "w") as fh:
        json.dump(thresholds_to_json(best), fh, indent=2, sort_keys=True)


def load_thresholds(path):
    with open(path) as fh:
        return thresholds_from_json(json.load(fh))
