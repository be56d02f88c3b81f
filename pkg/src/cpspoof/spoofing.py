"""Observation-domain spoofing injectors that rewrite DD observable streams."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace

import numpy as np

from .geometry import build_geometry, dd_offset_mapping, dd_ranges
from .observables import DEFAULT_BASE_POS, DEFAULT_LEVER_ARM, DDPair

log = logging.getLogger(__name__)

_TOL = 1e-6


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class PositionOffsetAttack:
    """Ramp offset: zero at ``start_s``, linear growth to ``terminal_offset_m`` at ``end_s``."""

    start_s: float
    end_s: float
    terminal_offset_m: np.ndarray

    def __post_init__(self):
        if not self.end_s > self.start_s:
            raise AttackError("attack must end after it starts")
        off = np.asarray(self.terminal_offset_m, dtype=float).reshape(-1)
        if off.size == 1:
            off = np.array([off[0], 0.0, 0.0])
        if off.size != 3 or not np.all(np.isfinite(off)):
            raise AttackError("terminal offset must be a finite 3-vector")
        object.__setattr__(self, "terminal_offset_m", off)

    def active(self, t):
        return self.start_s - _TOL <= t <= self.end_s + _TOL

    def offset(self, t):
        if not self.active(t):
            return np.zeros(3)
        frac = np.clip((t - self.start_s) / (self.end_s - self.start_s), 0.0, 1.0)
        return frac * self.terminal_offset_m

    def to_json(self):
        return {"type": "position_offset", "start_s": self.start_s, "end_s": self.end_s,
                "terminal_offset_m": self.terminal_offset_m.tolist()}


@dataclass(frozen=True)
class TimestampAttack:
    """Observables at ``t`` replaced by those recorded at ``t + shift_s`` (step onset)."""

    start_s: float
    end_s: float
    shift_s: float

    def __post_init__(self):
        if not self.end_s > self.start_s:
            raise AttackError("attack must end after it starts")
        if not np.isfinite(self.shift_s):
            raise AttackError("shift must be finite")

    def active(self, t):
        return self.start_s - _TOL <= t <= self.end_s + _TOL

    def to_json(self):
        return {"type": "timestamp", "start_s": self.start_s, "end_s": self.end_s,
                "shift_s": self.shift_s}


def attack_from_json(doc):
    if doc is None:
        return None
    kind = doc.get("type")
    if kind == "position_offset":
        return PositionOffsetAttack(float(doc["start_s"]), float(doc["end_s"]),
                                    doc["terminal_offset_m"])
    if kind == "timestamp":
        return TimestampAttack(float(doc["start_s"]), float(doc["end_s"]), float(doc["shift_s"]))
    raise AttackError(f"unknown attack type {kind!r}")


def load_attack(path):
    if path is None or str(path) == "none":
        return None
    with open(path) as fh:
        return attack_from_json(json.load(fh))


def save_attack(atk, path):
    with open(path, "w") as fh:
        json.dump(atk.to_json(), fh, indent=2)


def _check_window(stream, atk):
    if not stream:
        raise AttackError("empty observable stream")
    if atk.start_s < stream[0].t - _TOL or atk.end_s > stream[-1].t + _TOL:
        raise AttackError(
            f"attack window [{atk.start_s}, {atk.end_s}] outside stream "
            f"[{stream[0].t}, {stream[-1].t}]"
        )


def apply_position_offset(stream, atk, constellation, truth, lever_arm=DEFAULT_LEVER_ARM,
                          base_pos=DEFAULT_BASE_POS):
    """Shift pseudorange and phase by the exact DD mapping of ``atk.offset(t)``.

    Everything else in the authentic observables, including the dither,
    passes through untouched.
    """
    _check_window(stream, atk)
    out = []
    for ep in stream:
        dr = atk.offset(ep.t)
        if ep.n == 0 or not np.any(dr):
            out.append(ep)
            continue
        geom = build_geometry(constellation, truth.antenna(ep.t, lever_arm), base_pos, ep.t,
                              pivot=ep.pivot, sats=ep.sats)
        offs = dd_offset_mapping(geom, dr)
        pairs = tuple(replace(p, rho=p.rho + offs[p.sat][0], phi=p.phi + offs[p.sat][1])
                      for p in ep.pairs)
        out.append(replace(ep, pairs=pairs))
    return out


def _borrow(index, times, target):
    key = round(target, 6)
    if key in index:
        return index[key]
    j = int(np.argmin(np.abs(times - target)))
    log.warning("no epoch at t=%.6f; substituting nearest t=%.6f", target, times[j])
    return j


def timestamp_correction(constellation, pivot, sats, rover_at_borrow, base_pos, t, t_borrow):
    """Delta-rho removing satellite motion and clock evolution over ``[t, t_borrow]``."""
    if not sats:
        return np.zeros(0)
    at_t = dd_ranges(constellation, pivot, sats, rover_at_borrow, base_pos, t)
    at_b = dd_ranges(constellation, pivot, sats, rover_at_borrow, base_pos, t_borrow)
    return at_t - at_b


def apply_timestamp_shift(stream, atk, constellation, truth, lever_arm=DEFAULT_LEVER_ARM,
                          base_pos=DEFAULT_BASE_POS):
    """Replace attacked epochs with observables recorded at ``t + shift``, corrected so
    their implied satellite geometry is that of time ``t``.

    Epochs whose satellite sets do not intersect are dropped.
    """
    _check_window(stream, atk)
    times = np.array([ep.t for ep in stream])
    lo, hi = atk.start_s + min(atk.shift_s, 0.0), atk.end_s + max(atk.shift_s, 0.0)
    if lo < times[0] - _TOL or hi > times[-1] + _TOL:
        raise AttackError("shifted lookups fall outside the recorded stream")
    index = {round(t, 6): j for j, t in enumerate(times)}
    out = []
    for ep in stream:
        if not atk.active(ep.t) or atk.shift_s == 0.0:
            out.append(ep)
            continue
        src = stream[_borrow(index, times, ep.t + atk.shift_s)]
        current = set(ep.sats) | ({ep.pivot} if ep.pivot is not None else set())
        if src.pivot is None or src.pivot not in current:
            log.warning("t=%.3f: borrowed pivot not tracked now; epoch dropped", ep.t)
            continue
        keep = [p for p in src.pairs if p.sat in current]
        if not keep:
            log.warning("t=%.3f: empty satellite intersection; epoch dropped", ep.t)
            continue
        rover = truth.antenna(src.t, lever_arm)
        corr = timestamp_correction(constellation, src.pivot, [p.sat for p in keep], rover,
                                    base_pos, ep.t, src.t)
        pairs = tuple(DDPair(p.sat, p.rho + c, p.phi + c, p.wavelength) for p, c in zip(keep, corr))
        out.append(replace(ep, pivot=src.pivot, pairs=pairs))
    return out


def apply_attack(stream, atk, constellation, truth, lever_arm=DEFAULT_LEVER_ARM,
                 base_pos=DEFAULT_BASE_POS):
    if atk is None:
        return list(stream)
    if isinstance(atk, PositionOffsetAttack):
        return apply_position_offset(stream, atk, constellation, truth, lever_arm, base_pos)
    return apply_timestamp_shift(stream, atk, constellation, truth, lever_arm, base_pos)
