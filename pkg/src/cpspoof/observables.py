"""Double-difference GNSS observables: synthesis, persistence, linearization."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import SPEED_OF_LIGHT, GeometryError, dd_ranges
from .ils import IllConditionedError  # noqa: F401

L1_FREQUENCY = 1575.42e6
L1_WAVELENGTH = SPEED_OF_LIGHT / L1_FREQUENCY

DEFAULT_BASE_POS = np.array([180.0, -140.0, 1.5])
DEFAULT_LEVER_ARM = np.array([0.5, 0.0, -1.2])  # body FRD, IMU -> antenna

ENVIRONMENTS = ("open_sky", "shallow_urban", "deep_urban")


@dataclass(frozen=True)
class EnvironmentModel:
    """Per-DD-pair Gaussian mixture plus per-epoch blockage.

    ``sigma_rho`` and ``sigma_phi`` are the nominal DD standard deviations;
    an outlier pair has its variance multiplied by ``inflation``.
    """

    name: str
    p_outlier: float
    inflation: float
    p_block: float
    sigma_rho: float = 1.0
    sigma_phi: float = 0.005


ENVIRONMENT_MODELS = {
    "open_sky": EnvironmentModel("open_sky", 0.001, 3.0, 0.0),
    "shallow_urban": EnvironmentModel("shallow_urban", 0.02, 5.0, 0.05),
    "deep_urban": EnvironmentModel("deep_urban", 0.10, 10.0, 0.20),
}


def environment_model(name):
    try:
        return ENVIRONMENT_MODELS[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}") from None


@dataclass(frozen=True)
class DDPair:
    sat: int
    rho: float
    phi: float
    wavelength: float = L1_WAVELENGTH


@dataclass(frozen=True)
class EpochMeasurement:
    t: float
    pivot: int | None
    pairs: tuple = ()
    env: str = "open_sky"

    @property
    def n(self):
        return len(self.pairs)

    @property
    def sats(self):
        return tuple(p.sat for p in self.pairs)

    def to_json(self):
        return {
            "t": self.t,
            "env": self.env,
            "pivot": self.pivot,
            "pairs": [{"sat": p.sat, "rho": p.rho, "phi": p.phi, "lambda": p.wavelength}
                      for p in self.pairs],
        }

    @classmethod
    def from_json(cls, doc):
        pairs = tuple(DDPair(int(p["sat"]), float(p["rho"]), float(p["phi"]),
                             float(p.get("lambda", L1_WAVELENGTH)))
                      for p in doc.get("pairs", ()))
        pivot = doc.get("pivot")
        return cls(float(doc["t"]), None if pivot is None else int(pivot), pairs,
                   doc.get("env", "open_sky"))


def write_jsonl(stream, path):
    with open(path, "w") as fh:
        for ep in stream:
            fh.write(json.dumps(ep.to_json()) + "\n")


def read_jsonl(path):
    with open(path) as fh:
        return [EpochMeasurement.from_json(json.loads(line)) for line in fh if line.strip()]


@dataclass
class AmbiguityLedger:
    """Undifferenced integer ambiguity per satellite; DD ambiguity is n_i - n_pivot."""

    values: dict = field(default_factory=dict)
    valid_from: dict = field(default_factory=dict)

    @classmethod
    def random(cls, sat_ids, rng, spread=30):
        led = cls()
        for s in sat_ids:
            led.values[s] = int(rng.integers(-spread, spread + 1))
            led.valid_from[s] = -np.inf
        return led

    @classmethod
    def zeros(cls, sat_ids):
        return cls({s: 0 for s in sat_ids}, {s: -np.inf for s in sat_ids})

    def reset(self, sat, t, rng, spread=30):
        self.values[sat] = int(rng.integers(-spread, spread + 1))
        self.valid_from[sat] = t

    def dd(self, sat, pivot):
        return self.values.get(sat, 0) - self.values.get(pivot, 0)


@dataclass
class EnvSchedule:
    """Time-ranged environment labels ``[(start, end, env), ...]`` (end exclusive)."""

    segments: list

    def __post_init__(self):
        segs = sorted((float(a), float(b), e) for a, b, e in self.segments)
        for (a0, b0, _), (a1, _, _) in zip(segs, segs[1:]):
            if a1 < b0 - 1e-9:
                raise ValueError("environment schedule segments overlap")
            if a1 > b0 + 1e-9:
                raise ValueError("environment schedule has a gap")
        for _, _, e in segs:
            environment_model(e)
        self.segments = segs

    @classmethod
    def constant(cls, env, start=-np.inf, end=np.inf):
        return cls([(start, end, env)])

    @classmethod
    def from_json(cls, doc):
        """A bare label, or ``[{start_s, end_s, env}, ...]`` with null for an open end."""
        if isinstance(doc, str):
            return cls.constant(doc)
        return cls([(-np.inf if d.get("start_s") is None else d["start_s"],
                     np.inf if d.get("end_s") is None else d["end_s"], d["env"]) for d in doc])

    def to_json(self):
        if len(self.segments) == 1 and np.all(np.isinf(self.segments[0][:2])):
            return self.segments[0][2]
        return [{"start_s": None if np.isinf(a) else a, "end_s": None if np.isinf(b) else b,
                 "env": e} for a, b, e in self.segments]

    def label(self, t):
        for a, b, e in self.segments:
            if a - 1e-9 <= t < b - 1e-9:
                return e
        # the final segment end is inclusive
        a, b, e = self.segments[-1]
        if abs(t - b) <= 1e-9:
            return e
        raise ValueError(f"time {t} not covered by the environment schedule")

    def covers(self, t0, t1):
        return self.segments[0][0] <= t0 + 1e-9 and self.segments[-1][1] >= t1 - 1e-9


def draw_dd_errors(n, model, rng):
    """DD pseudorange/phase errors for ``n`` pairs sharing one pivot.

    Single-difference noise gives the 0.5 off-diagonal correlation; outlier
    pairs get extra independent noise so their DD variance is
    ``inflation * sigma^2``.  Returns ``(d_rho, d_phi, outlier_mask)``.
    """
    e_rho = rng.standard_normal(n + 1) * model.sigma_rho / np.sqrt(2.0)
    e_phi = rng.standard_normal(n + 1) * model.sigma_phi / np.sqrt(2.0)
    outlier = rng.random(n) < model.p_outlier
    extra = np.sqrt(np.where(outlier, model.inflation - 1.0, 0.0))
    d_rho = e_rho[1:] - e_rho[0] + extra * rng.standard_normal(n) * model.sigma_rho
    d_phi = e_phi[1:] - e_phi[0] + extra * rng.standard_normal(n) * model.sigma_phi
    return d_rho, d_phi, outlier


def synthesize_epoch(antenna_pos, t, constellation, ledger, env="open_sky", rng=None,
                     base_pos=DEFAULT_BASE_POS, wavelength=L1_WAVELENGTH, noise=True):
    """One epoch of DD pseudorange/phase for the rover antenna at ``antenna_pos``.

    Errors come from ``draw_dd_errors``.  Blockage removes satellites for
    this epoch and resets their ambiguities.
    """
    model = environment_model(env)
    rng = np.random.default_rng() if rng is None else rng
    vis = constellation.visible(antenna_pos, t)
    if len(vis) < 2:
        return EpochMeasurement(t, None, (), env)
    pivot = min(vis, key=lambda v: (-v[1], v[0]))[0]
    others = [s for s, _ in vis if s != pivot]

    if noise and model.p_block > 0 and rng.random() < model.p_block:
        k = min(int(rng.integers(1, 4)), len(others))
        blocked = set(rng.choice(others, size=k, replace=False).tolist())
        for s in sorted(blocked):
            ledger.reset(s, t, rng)
        others = [s for s in others if s not in blocked]
    if not others:
        return EpochMeasurement(t, pivot, (), env)

    rng_dd = dd_ranges(constellation, pivot, others, antenna_pos, base_pos, t)
    if noise:
        d_rho, d_phi, _ = draw_dd_errors(len(others), model, rng)
    else:
        d_rho = d_phi = np.zeros(len(others))

    pairs = tuple(
        DDPair(s, float(r + dr), float(r + wavelength * ledger.dd(s, pivot) + dp), wavelength)
        for s, r, dr, dp in zip(others, rng_dd, d_rho, d_phi)
    )
    return EpochMeasurement(t, pivot, pairs, env)


def synthesize_stream(truth, constellation, schedule, seed, record_rate_hz=20.0,
                      lever_arm=DEFAULT_LEVER_ARM, base_pos=DEFAULT_BASE_POS, noise=True,
                      ledger=None):
    """Observable stream at ``record_rate_hz`` along a truth trajectory."""
    if isinstance(schedule, str):
        schedule = EnvSchedule.constant(schedule)
    if ledger is None:
        ledger = AmbiguityLedger.random(constellation.sat_ids, np.random.default_rng([seed, 0]))
    step = int(round(truth.rate_hz / record_rate_hz))
    if step < 1 or abs(step * record_rate_hz - truth.rate_hz) > 1e-6:
        raise ValueError("record rate must divide the truth rate")
    stream = []
    for j, k in enumerate(range(0, len(truth), step)):
        t = float(truth.t[k])
        ant = truth.position[k] + truth.attitude[k] @ lever_arm
        rng = np.random.default_rng([seed, 1, j])
        stream.append(synthesize_epoch(ant, t, constellation, ledger, schedule.label(t), rng,
                                       base_pos, noise=noise))
    return stream


def decimate(stream, rate_hz, tol=1e-6):
    """Keep epochs whose timestamps fall on the ``rate_hz`` grid."""
    out = []
    for ep in stream:
        x = ep.t * rate_hz
        if abs(x - round(x)) < tol:
            out.append(ep)
    return out


def with_env(stream, schedule):
    return [replace(ep, env=schedule.label(ep.t)) for ep in stream]


# -- linearization ----------------------------------------------------------


def skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def dd_covariance(n, sigma):
    """DD covariance from a shared pivot: diagonal sigma^2, off-diagonal sigma^2 / 2."""
    return sigma**2 * 0.5 * (np.eye(n) + np.ones((n, n)))


@dataclass
class LinearizedMeasurement:
    t: float
    nu: np.ndarray
    H_r: np.ndarray
    H_n: np.ndarray
    cov: np.ndarray
    sats: tuple
    pivot: int | None
    ill_conditioned: bool = False

    @property
    def n(self):
        return len(self.sats)


STATE_DIM = 15


def linearize(epoch, prior, constellation, lever_arm=DEFAULT_LEVER_ARM,
              base_pos=DEFAULT_BASE_POS, sigma_rho=1.0, sigma_phi=0.005):
    """Innovations and Jacobians about the a-priori state.

    ``nu = z - h(x_prior)`` with ambiguities excluded, ordered ``[rho; phi]``.
    The error-state model is ``nu = H_r dx + H_n n + w`` with
    ``dx = truth - estimate`` in (pos, vel, att, accel bias, gyro bias) order.
    """
    n = epoch.n
    if n == 0:
        raise GeometryError("linearize needs at least one DD pair")
    C = prior.attitude
    lever_n = C @ np.asarray(lever_arm)
    ant = prior.position + lever_n
    sats = epoch.sats
    h = dd_ranges(constellation, epoch.pivot, sats, ant, base_pos, epoch.t)

    pos = constellation.positions_enu(epoch.t)
    u = {s: (pos[s] - ant) / np.linalg.norm(pos[s] - ant) for s in (epoch.pivot,) + sats}
    G = np.array([-(u[s] - u[epoch.pivot]) for s in sats])

    block = np.zeros((n, STATE_DIM))
    block[:, 0:3] = G
    block[:, 6:9] = -G @ skew(lever_n)
    H_r = np.vstack([block, block])
    lam = np.array([p.wavelength for p in epoch.pairs])
    H_n = np.vstack([np.zeros((n, n)), np.diag(lam)])

    z_rho = np.array([p.rho for p in epoch.pairs])
    z_phi = np.array([p.phi for p in epoch.pairs])
    nu = np.concatenate([z_rho - h, z_phi - h])

    cov = np.zeros((2 * n, 2 * n))
    cov[:n, :n] = dd_covariance(n, sigma_rho)
    cov[n:, n:] = dd_covariance(n, sigma_phi)

    sv = np.linalg.svd(G, compute_uv=False)
    ill = sv[min(n, 3) - 1] < 1e-9 * max(sv[0], 1e-300)
    return LinearizedMeasurement(epoch.t, nu, H_r, H_n, cov, sats, epoch.pivot, bool(ill))
