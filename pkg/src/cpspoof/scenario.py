"""Truth trajectories with road dither, and IMU measurement synthesis.

The truth is generated on the IMU sample grid from a piecewise-constant
(zero-order-hold) acceleration sequence, i.e. sample ``k`` carries the
acceleration acting over ``(t_{k-1}, t_k]``.  A strapdown integrator using
the same convention reproduces the truth to round-off, so filter innovations
under the null hypothesis contain sensor noise only.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

GRAVITY = 9.80665
GRAVITY_ENU = np.array([0.0, 0.0, -GRAVITY])


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class DitherConfig:
    band_hz: tuple = (2.0, 15.0)
    vertical_rms_m: float = 0.01
    lateral_rms_m: float = 0.005
    speed_threshold_mps: float = 0.5
    ramp_mps: float = 0.25

    @classmethod
    def from_json(cls, doc):
        doc = dict(doc or {})
        rms = doc.pop("rms_m", None)
        if isinstance(rms, dict):
            doc.setdefault("vertical_rms_m", rms.get("vertical", cls.vertical_rms_m))
            doc.setdefault("lateral_rms_m", rms.get("lateral", cls.lateral_rms_m))
        elif rms is not None:
            doc.setdefault("vertical_rms_m", float(rms))
            doc.setdefault("lateral_rms_m", float(rms) / 2)
        if "band_hz" in doc:
            doc["band_hz"] = tuple(float(b) for b in doc["band_hz"])
        return cls(**doc)

    def to_json(self):
        return {
            "band_hz": list(self.band_hz),
            "rms_m": {"vertical": self.vertical_rms_m, "lateral": self.lateral_rms_m},
            "speed_threshold_mps": self.speed_threshold_mps,
            "ramp_mps": self.ramp_mps,
        }


@dataclass(frozen=True)
class ScenarioConfig:
    """Stop-then-launch longitudinal profile with road dither.

    The vehicle sits still until ``stop_until_s``, accelerates at
    ``accel_mps2`` until ``accel_end_s`` (or the end of the run), then
    cruises.
    """

    duration_s: float
    stop_until_s: float = 0.0
    accel_mps2: float = 1.0
    accel_end_s: float | None = None
    start_s: float = 0.0
    heading_deg: float = 30.0
    origin_m: tuple = (0.0, 0.0, 0.0)
    imu_rate_hz: float = 100.0
    dither: DitherConfig = field(default_factory=DitherConfig)

    def __post_init__(self):
        if not self.duration_s > 0:
            raise ScenarioError("scenario duration must be positive")
        if not self.imu_rate_hz > 0:
            raise ScenarioError("IMU rate must be positive")

    @property
    def end_s(self):
        return self.start_s + self.duration_s

    @classmethod
    def from_json(cls, doc):
        doc = dict(doc)
        known = {f for f in cls.__dataclass_fields__}
        dither = DitherConfig.from_json(doc.pop("dither", None))
        kwargs = {k: v for k, v in doc.items() if k in known}
        if "origin_m" in kwargs:
            kwargs["origin_m"] = tuple(kwargs["origin_m"])
        return cls(dither=dither, **kwargs)

    def to_json(self):
        out = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "dither"}
        out["origin_m"] = list(self.origin_m)
        out["dither"] = self.dither.to_json()
        return out


@dataclass(frozen=True)
class TruthState:
    t: float
    position: np.ndarray
    velocity: np.ndarray
    attitude: np.ndarray  # body (FRD) -> ENU rotation matrix
    angular_rate: np.ndarray
    specific_force: np.ndarray


@dataclass
class Trajectory:
    """Truth series on the IMU grid (arrays indexed by sample)."""

    t: np.ndarray
    position: np.ndarray
    velocity: np.ndarray
    attitude: np.ndarray  # (K, 3, 3)
    angular_rate: np.ndarray | None = None
    specific_force: np.ndarray | None = None

    def __len__(self):
        return len(self.t)

    @property
    def rate_hz(self):
        return 1.0 / (self.t[1] - self.t[0])

    def index(self, t, tol=1e-6):
        k = int(round((t - self.t[0]) * self.rate_hz))
        if k < 0 or k >= len(self.t) or abs(self.t[k] - t) > tol:
            raise ScenarioError(f"time {t} not on the truth grid")
        return k

    def state(self, k):
        return TruthState(
            t=float(self.t[k]),
            position=self.position[k],
            velocity=self.velocity[k],
            attitude=self.attitude[k],
            angular_rate=None if self.angular_rate is None else self.angular_rate[k],
            specific_force=None if self.specific_force is None else self.specific_force[k],
        )

    def at(self, t):
        return self.state(self.index(t))

    def antenna(self, t, lever_arm):
        k = self.index(t)
        return self.position[k] + self.attitude[k] @ np.asarray(lever_arm)


def body_to_enu(heading_rad):
    """FRD body -> ENU rotation for a level vehicle with compass heading."""
    s, c = np.sin(heading_rad), np.cos(heading_rad)
    forward = np.array([s, c, 0.0])
    right = np.array([c, -s, 0.0])
    down = np.array([0.0, 0.0, -1.0])
    return np.column_stack([forward, right, down])


def _longitudinal(cfg, t):
    t0 = cfg.stop_until_s
    t1 = cfg.end_s if cfg.accel_end_s is None else cfg.accel_end_s
    a = cfg.accel_mps2
    ta = np.clip(t - t0, 0.0, max(t1 - t0, 0.0))
    speed = a * ta
    dist = 0.5 * a * ta**2 + speed * np.maximum(t - max(t1, t0), 0.0)
    return dist, speed


def _band_limited(rng, n, rate, band, rms):
    if rms == 0.0:
        return np.zeros(n)
    white = rng.standard_normal(n)
    spectrum = np.fft.rfft(white)
    f = np.fft.rfftfreq(n, 1.0 / rate)
    spectrum[(f < band[0]) | (f > band[1])] = 0.0
    x = np.fft.irfft(spectrum, n)
    return x * (rms / np.sqrt(np.mean(x**2)))


def _gate(speed, threshold, ramp):
    s = np.clip((speed - threshold) / ramp, 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


def generate_trajectory(cfg, seed):
    """Generate the truth trajectory at the IMU rate.

    Road dither is a band-limited Gaussian process (vertical and lateral)
    that switches on smoothly once the speed exceeds the dither threshold.
    """
    if not isinstance(cfg, ScenarioConfig):
        cfg = ScenarioConfig.from_json(cfg)
    rate = cfg.imu_rate_hz
    dt = 1.0 / rate
    n = int(round(cfg.duration_s * rate)) + 1
    k = np.arange(n + 1)
    t_ext = cfg.start_s + k / rate  # one extra sample for the last difference
    rng = np.random.default_rng(seed)

    C = body_to_enu(np.radians(cfg.heading_deg))
    fwd, right, down = C[:, 0], C[:, 1], C[:, 2]
    dist, speed = _longitudinal(cfg, t_ext)
    g = _gate(speed, cfg.dither.speed_threshold_mps, cfg.dither.ramp_mps)
    d = cfg.dither
    lat = _band_limited(rng, n + 1, rate, d.band_hz, d.lateral_rms_m)
    vert = _band_limited(rng, n + 1, rate, d.band_hz, d.vertical_rms_m)
    target = (np.asarray(cfg.origin_m) + np.outer(dist, fwd)
              + np.outer(g * lat, right) - np.outer(g * vert, down))

    acc = np.zeros((n, 3))
    acc[1:] = (target[2:] - 2 * target[1:-1] + target[:-2]) / dt**2
    pos = np.empty((n, 3))
    vel = np.empty((n, 3))
    pos[0] = target[0]
    vel[0] = (target[1] - target[0]) / dt - 0.5 * acc[1] * dt if n > 1 else 0.0
    for i in range(1, n):
        pos[i] = pos[i - 1] + vel[i - 1] * dt + 0.5 * acc[i] * dt**2
        vel[i] = vel[i - 1] + acc[i] * dt

    att = np.broadcast_to(C, (n, 3, 3)).copy()
    sf = (acc - GRAVITY_ENU) @ C  # rows: C^T (a - g)
    return Trajectory(
        t=t_ext[:n].copy(), position=pos, velocity=vel, attitude=att,
        angular_rate=np.zeros((n, 3)), specific_force=sf,
    )


# -- IMU ---------------------------------------------------------------------


@dataclass(frozen=True)
class ImuGradeModel:
    grade: str
    accel_noise_density: float  # m/s^2/sqrt(Hz)
    gyro_noise_density: float  # rad/s/sqrt(Hz)
    accel_bias_instability: float  # m/s^2
    gyro_bias_instability: float  # rad/s
    sample_rate: float = 100.0
    bias_horizon_s: float = 100.0

    @property
    def accel_bias_rw(self):
        """Bias random-walk density, scaled so the drift over the horizon equals the instability."""
        return self.accel_bias_instability / np.sqrt(self.bias_horizon_s)

    @property
    def gyro_bias_rw(self):
        return self.gyro_bias_instability / np.sqrt(self.bias_horizon_s)

    def scaled(self, factor):
        return ImuGradeModel(
            self.grade, self.accel_noise_density * factor, self.gyro_noise_density * factor,
            self.accel_bias_instability * factor, self.gyro_bias_instability * factor,
            self.sample_rate, self.bias_horizon_s,
        )


INDUSTRIAL = ImuGradeModel(
    grade="industrial",
    accel_noise_density=1.0e-3,
    gyro_noise_density=3.0e-4,
    accel_bias_instability=4.0e-4,
    gyro_bias_instability=2.0e-5,
)
CONSUMER = ImuGradeModel(
    grade="consumer",
    accel_noise_density=3.0e-3,
    gyro_noise_density=9.0e-4,
    accel_bias_instability=1.2e-3,
    gyro_bias_instability=6.0e-5,
)
IMU_GRADES = {"industrial": INDUSTRIAL, "consumer": CONSUMER}


def imu_grade(name):
    try:
        return IMU_GRADES[name]
    except KeyError:
        raise ScenarioError(f"unknown IMU grade {name!r}") from None


@dataclass
class ImuSeries:
    t: np.ndarray
    accel: np.ndarray
    gyro: np.ndarray
    accel_bias: np.ndarray | None = None
    gyro_bias: np.ndarray | None = None

    def __len__(self):
        return len(self.t)

    def window(self, t0, t1, tol=1e-9):
        """Indices of samples with ``t0 < t <= t1``."""
        lo = np.searchsorted(self.t, t0 + tol, side="left")
        hi = np.searchsorted(self.t, t1 + tol, side="left")
        return lo, hi


def synthesize_imu(truth, model, seed):
    """Accelerometer and gyro samples: truth + random-walk bias + white noise."""
    if len(truth) < 2 or truth.specific_force is None:
        raise ScenarioError("truth series too short or lacks specific force")
    if abs(truth.rate_hz - model.sample_rate) > 1e-6 * model.sample_rate:
        raise ScenarioError("truth grid must match the IMU sample rate")
    n = len(truth)
    dt = 1.0 / model.sample_rate
    rng = np.random.default_rng(seed)
    wa = rng.standard_normal((n, 3))
    wg = rng.standard_normal((n, 3))
    ba0 = rng.standard_normal(3)
    bg0 = rng.standard_normal(3)
    rwa = rng.standard_normal((n, 3))
    rwg = rng.standard_normal((n, 3))
    rwa[0] = 0.0
    rwg[0] = 0.0

    walk = np.sqrt(dt)
    ba = ba0 * model.accel_bias_instability + np.cumsum(rwa, axis=0) * model.accel_bias_rw * walk
    bg = bg0 * model.gyro_bias_instability + np.cumsum(rwg, axis=0) * model.gyro_bias_rw * walk
    sa = model.accel_noise_density / np.sqrt(dt)
    sg = model.gyro_noise_density / np.sqrt(dt)
    accel = truth.specific_force + ba + sa * wa
    gyro = truth.angular_rate + bg + sg * wg
    return ImuSeries(truth.t.copy(), accel, gyro, ba, bg)


# -- CSV interfaces ----------------------------------------------------------


def _fmt(x):
    return repr(float(x))


def save_truth_csv(traj, path):
    quats = Rotation.from_matrix(traj.attitude).as_quat()  # x, y, z, w
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "px", "py", "pz", "vx", "vy", "vz", "qw", "qx", "qy", "qz"])
        for k in range(len(traj)):
            q = quats[k]
            w.writerow([_fmt(traj.t[k]), *map(_fmt, traj.position[k]), *map(_fmt, traj.velocity[k]),
                        _fmt(q[3]), _fmt(q[0]), _fmt(q[1]), _fmt(q[2])])


def load_truth_csv(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    quat = data[:, [8, 9, 10, 7]]
    att = Rotation.from_quat(quat).as_matrix()
    return Trajectory(t=data[:, 0], position=data[:, 1:4], velocity=data[:, 4:7], attitude=att)


def save_imu_csv(imu, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "ax", "ay", "az", "gx", "gy", "gz"])
        for k in range(len(imu)):
            w.writerow([_fmt(imu.t[k]), *map(_fmt, imu.accel[k]), *map(_fmt, imu.gyro[k])])


def load_imu_csv(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return ImuSeries(t=data[:, 0], accel=data[:, 1:4], gyro=data[:, 4:7])
