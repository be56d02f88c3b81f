"""Satellite constellation, line-of-sight geometry and double-difference ranges.

Satellites fly circular Keplerian orbits in an Earth-fixed frame (no Earth
rotation).  Rover and base positions live in a local East-North-Up tangent
frame anchored at a fixed site; satellite positions are projected into it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MU_EARTH = 3.986004418e14  # m^3/s^2
EARTH_RADIUS = 6371.0e3  # m
SPEED_OF_LIGHT = 299792458.0  # m/s
GPS_ORBIT_RADIUS = 26560.0e3  # m
ELEVATION_MASK = np.radians(10.0)

# Austin, TX; only fixes the orientation of the local tangent frame.
DEFAULT_SITE_DEG = (30.28, -97.74)


class GeometryError(ValueError):
    """Raised for a misconfigured constellation or DD geometry."""


@dataclass(frozen=True)
class SatelliteEphemeris:
    sat_id: int
    orbit_radius: float
    inclination: float
    raan: float
    phase_at_t0: float
    clock_bias: float = 0.0
    clock_drift: float = 0.0

    def __post_init__(self):
        if not self.orbit_radius > EARTH_RADIUS:
            raise GeometryError(f"sat {self.sat_id}: orbit radius inside the Earth")
        angles = (self.inclination, self.raan, self.phase_at_t0)
        if not np.all(np.isfinite(angles)):
            raise GeometryError(f"sat {self.sat_id}: non-finite orbital angle")

    @property
    def mean_motion(self):
        return np.sqrt(MU_EARTH / self.orbit_radius**3)

    @property
    def period(self):
        return 2.0 * np.pi / self.mean_motion

    def clock(self, t):
        """Satellite clock offset in seconds at time ``t``."""
        return self.clock_bias + self.clock_drift * t


def satellite_position(eph, t):
    """Earth-fixed position and velocity of a satellite on its circular orbit.

    Returns
    -------
    pos, vel : ndarray, shape (3,)
        Meters and meters/second.  ``vel`` is the exact time derivative of
        ``pos``.
    """
    n = eph.mean_motion
    u = eph.phase_at_t0 + n * t
    cu, su = np.cos(u), np.sin(u)
    co, so = np.cos(eph.raan), np.sin(eph.raan)
    ci, si = np.cos(eph.inclination), np.sin(eph.inclination)
    r = eph.orbit_radius
    pos = r * np.array([co * cu - so * su * ci, so * cu + co * su * ci, su * si])
    vel = r * n * np.array([-co * su - so * cu * ci, -so * su + co * cu * ci, cu * si])
    return pos, vel


def _enu_basis(lat, lon):
    east = np.array([-np.sin(lon), np.cos(lon), 0.0])
    north = np.array([-np.sin(lat) * np.cos(lon), -np.sin(lat) * np.sin(lon), np.cos(lat)])
    up = np.array([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)])
    return np.vstack([east, north, up])


@dataclass(frozen=True)
class Constellation:
    """A set of satellites plus the site defining the local ENU frame."""

    satellites: tuple
    site_deg: tuple = DEFAULT_SITE_DEG
    _by_id: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ids = [s.sat_id for s in self.satellites]
        if len(set(ids)) != len(ids):
            raise GeometryError("duplicate sat_id in constellation")
        object.__setattr__(self, "_by_id", {s.sat_id: s for s in self.satellites})

    @property
    def sat_ids(self):
        return sorted(self._by_id)

    def get(self, sat_id):
        try:
            return self._by_id[sat_id]
        except KeyError:
            raise GeometryError(f"unknown sat_id {sat_id}") from None

    @property
    def _frame(self):
        lat, lon = np.radians(self.site_deg)
        rot = _enu_basis(lat, lon)
        origin = EARTH_RADIUS * rot[2]
        return rot, origin

    def position_enu(self, sat_id, t):
        """Satellite position and velocity expressed in the local ENU frame."""
        rot, origin = self._frame
        pos, vel = satellite_position(self.get(sat_id), t)
        return rot @ (pos - origin), rot @ vel

    def positions_enu(self, t):
        rot, origin = self._frame
        out = {}
        for sat in self.satellites:
            pos, _ = satellite_position(sat, t)
            out[sat.sat_id] = rot @ (pos - origin)
        return out

    def visible(self, receiver_pos, t, mask=ELEVATION_MASK):
        """Sorted list of ``(sat_id, elevation)`` above the elevation mask."""
        vis = []
        for sid, p in self.positions_enu(t).items():
            los = p - receiver_pos
            el = np.arcsin(los[2] / np.linalg.norm(los))
            if el >= mask:
                vis.append((sid, el))
        return sorted(vis)

    # -- JSON interface ---------------------------------------------------
    def to_json(self):
        return [
            {
                "sat_id": s.sat_id,
                "orbit_radius_m": s.orbit_radius,
                "inclination_rad": s.inclination,
                "raan_rad": s.raan,
                "phase_rad": s.phase_at_t0,
                "clock_bias_s": s.clock_bias,
                "clock_drift_sps": s.clock_drift,
            }
            for s in self.satellites
        ]

    @classmethod
    def from_json(cls, doc, site_deg=DEFAULT_SITE_DEG):
        sats = tuple(
            SatelliteEphemeris(
                sat_id=int(d["sat_id"]),
                orbit_radius=float(d["orbit_radius_m"]),
                inclination=float(d["inclination_rad"]),
                raan=float(d["raan_rad"]),
                phase_at_t0=float(d["phase_rad"]),
                clock_bias=float(d.get("clock_bias_s", 0.0)),
                clock_drift=float(d.get("clock_drift_sps", 0.0)),
            )
            for d in doc
        )
        return cls(sats, site_deg)


def load_constellation(path):
    with open(path) as fh:
        return Constellation.from_json(json.load(fh))


def save_constellation(constellation, path):
    Path(path).write_text(json.dumps(constellation.to_json(), indent=2) + "\n")


# Sky directions (azimuth, elevation) in degrees at t = 0 for the default
# constellation.  Nine are visible; two sit below the horizon.
_DEFAULT_SKY = [
    (40, 78), (95, 52), (160, 38), (215, 61), (270, 33),
    (320, 47), (125, 22), (245, 20), (300, 25), (60, -20), (150, -15),
]


def _orbit_through(direction_enu, site_deg, radius, inclination):
    lat, lon = np.radians(site_deg)
    rot = _enu_basis(lat, lon)
    site = EARTH_RADIUS * rot[2]
    d = rot.T @ direction_enu
    b = 2.0 * site @ d
    c = site @ site - radius**2
    s = (-b + np.sqrt(b * b - 4.0 * c)) / 2.0
    p = (site + s * d) / radius
    if abs(p[2]) > np.sin(inclination):
        raise GeometryError("direction not reachable with this inclination")
    u = np.arcsin(p[2] / np.sin(inclination))
    a, bb = np.cos(u), np.sin(u) * np.cos(inclination)
    raan = np.arctan2(p[1] * a - p[0] * bb, p[0] * a + p[1] * bb)
    return raan % (2 * np.pi), u % (2 * np.pi)


def default_constellation(site_deg=DEFAULT_SITE_DEG):
    """Eleven GPS-like satellites (26 560 km, 55 deg) with nine in view at t = 0."""
    inc = np.radians(55.0)
    sats = []
    for k, (az, el) in enumerate(_DEFAULT_SKY):
        az, el = np.radians(az), np.radians(el)
        direction = np.array([np.cos(el) * np.sin(az), np.cos(el) * np.cos(az), np.sin(el)])
        raan, phase = _orbit_through(direction, site_deg, GPS_ORBIT_RADIUS, inc)
        sats.append(
            SatelliteEphemeris(
                sat_id=k + 1,
                orbit_radius=GPS_ORBIT_RADIUS,
                inclination=inc,
                raan=raan,
                phase_at_t0=phase,
                clock_bias=1e-5 * ((k * 7) % 5 - 2),
                clock_drift=1e-11 * ((k * 3) % 5 - 2),
            )
        )
    return Constellation(tuple(sats), site_deg)


# -- double differences -----------------------------------------------------


def receiver_range(constellation, sat_id, receiver_pos, t):
    """Geometric range plus the satellite clock term (meters)."""
    sat_pos, _ = constellation.position_enu(sat_id, t)
    eph = constellation.get(sat_id)
    return np.linalg.norm(sat_pos - receiver_pos) - SPEED_OF_LIGHT * eph.clock(t)


@dataclass(frozen=True)
class DDGeometry:
    constellation: Constellation
    pivot_sat: int
    other_sats: tuple
    rover_pos: np.ndarray
    base_pos: np.ndarray
    unit_los: dict
    t: float = 0.0

    def __post_init__(self):
        if self.pivot_sat in self.other_sats:
            raise GeometryError("pivot satellite repeated among DD pairs")
        if len(self.other_sats) < 1:
            raise GeometryError("DD geometry needs at least two satellites")

    def dd_range(self, sat_i, t):
        return dd_range(self, sat_i, t)

    def with_rover(self, rover_pos):
        """Same satellites and pivot, different rover position."""
        rover_pos = np.asarray(rover_pos, dtype=float)
        return build_geometry(
            self.constellation, rover_pos, self.base_pos, self.t,
            pivot=self.pivot_sat, sats=self.other_sats,
        )


def build_geometry(constellation, rover_pos, base_pos, t, pivot=None, sats=None,
                   mask=ELEVATION_MASK):
    """Choose visible satellites and a pivot, and compute rover LOS vectors.

    The pivot is the highest-elevation satellite (lowest ``sat_id`` on ties)
    unless given explicitly.
    """
    rover_pos = np.asarray(rover_pos, dtype=float)
    base_pos = np.asarray(base_pos, dtype=float)
    if sats is None:
        vis = constellation.visible(rover_pos, t, mask)
        if len(vis) < 2:
            raise GeometryError("fewer than two satellites above the mask")
        if pivot is None:
            pivot = min(vis, key=lambda v: (-v[1], v[0]))[0]
        others = tuple(sid for sid, _ in vis if sid != pivot)
    else:
        others = tuple(s for s in sats if s != pivot)
    los = {}
    for sid in (pivot,) + others:
        p, _ = constellation.position_enu(sid, t)
        d = p - rover_pos
        los[sid] = d / np.linalg.norm(d)
    return DDGeometry(constellation, pivot, others, rover_pos, base_pos, los, t)


def dd_range(geom, sat_i, t):
    """Double-difference range ``[r_i - r_p]_rover - [r_i - r_p]_base`` (m)."""
    if sat_i not in geom.other_sats:
        raise GeometryError(f"sat {sat_i} is not a DD pair of this geometry")
    c, p = geom.constellation, geom.pivot_sat
    rover = receiver_range(c, sat_i, geom.rover_pos, t) - receiver_range(c, p, geom.rover_pos, t)
    base = receiver_range(c, sat_i, geom.base_pos, t) - receiver_range(c, p, geom.base_pos, t)
    return rover - base


def dd_ranges(constellation, pivot, sats, rover_pos, base_pos, t):
    """Vector of DD ranges for ``sats`` against ``pivot``; clock terms cancel."""
    pos = constellation.positions_enu(t)
    rover_pos = np.asarray(rover_pos, dtype=float)
    base_pos = np.asarray(base_pos, dtype=float)

    def diff(sid, rx):
        return np.linalg.norm(pos[sid] - rx) - np.linalg.norm(pos[pivot] - rx)

    return np.array([diff(s, rover_pos) - diff(s, base_pos) for s in sats])


def dd_offset_mapping(geom, delta_r):
    """Exact pseudorange/phase offsets induced by moving the rover by ``delta_r``.

    Returns
    -------
    dict
        ``sat_id -> (d_rho, d_phi)`` in meters; both entries are equal.
    """
    delta_r = np.asarray(delta_r, dtype=float)
    moved = geom.with_rover(geom.rover_pos + delta_r)
    out = {}
    for sid in geom.other_sats:
        d = dd_range(moved, sid, geom.t) - dd_range(geom, sid, geom.t)
        out[sid] = (d, d)
    return out


def dd_los_matrix(geom, sats=None):
    """Rows ``-(u_i - u_pivot)``: gradient of each DD range w.r.t. rover position."""
    sats = geom.other_sats if sats is None else sats
    up = geom.unit_los[geom.pivot_sat]
    return np.array([-(geom.unit_los[s] - up) for s in sats])
