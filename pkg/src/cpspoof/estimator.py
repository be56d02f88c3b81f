"""Tightly-coupled square-root CDGNSS/IMU estimator.

The IMU replaces a dynamics model in the propagation step.  The GNSS update
whitens the DD innovations, stacks them under the prior square-root
information, and QR-factors the stack so that the cost splits into

    J1(dx, n) = ||nu1 - Rxx dx - Rxn n||^2
    J2(n)     = ||nu2 - Rnn n||^2
    J3        = ||nu3||^2

Ambiguities are resolved each epoch by integer least squares on J2; the
fixed-ambiguity residual cost ``eps_phi = J2(n_fixed)`` is the detection
ingredient.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_factor, solve_triangular
from scipy.spatial.transform import Rotation

from . import ils
from .observables import (
    DEFAULT_BASE_POS,
    DEFAULT_LEVER_ARM,
    STATE_DIM,
    linearize,
    skew,
)
from .scenario import GRAVITY_ENU, IMU_GRADES, ImuGradeModel

log = logging.getLogger(__name__)

IllConditionedError = ils.IllConditionedError

POS, VEL, ATT, BA, BG = (slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 12), slice(12, 15))


class ImuGapError(RuntimeError):
    pass


class OrderError(ValueError):
    pass


def so3_exp(phi):
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < 1e-12:
        return np.eye(3) + K
    return np.eye(3) + np.sin(theta) / theta * K + (1 - np.cos(theta)) / theta**2 * K @ K


def orthonormalize(C):
    u, _, vt = np.linalg.svd(C)
    return u @ vt


def upper_with_positive_diagonal(R):
    d = np.sign(np.diag(R))
    d[d == 0] = 1.0
    return d[:, None] * R


@dataclass(frozen=True)
class NavState:
    t: float
    position: np.ndarray
    velocity: np.ndarray
    attitude: np.ndarray  # body FRD -> ENU
    accel_bias: np.ndarray
    gyro_bias: np.ndarray
    sqrt_info: np.ndarray  # upper triangular, R^T R = P^-1

    def covariance(self):
        Rinv = solve_triangular(self.sqrt_info, np.eye(STATE_DIM), lower=False)
        return Rinv @ Rinv.T

    def sigmas(self):
        return np.sqrt(np.diag(self.covariance()))

    def corrected(self, dx, sqrt_info):
        """Apply an error-state correction ``dx = truth - estimate``."""
        return replace(
            self,
            position=self.position + dx[POS],
            velocity=self.velocity + dx[VEL],
            attitude=orthonormalize(so3_exp(dx[ATT]) @ self.attitude),
            accel_bias=self.accel_bias + dx[BA],
            gyro_bias=self.gyro_bias + dx[BG],
            sqrt_info=sqrt_info,
        )

    def to_json(self):
        return {
            "t": self.t,
            "position": self.position.tolist(),
            "velocity": self.velocity.tolist(),
            "attitude": self.attitude.tolist(),
            "accel_bias": self.accel_bias.tolist(),
            "gyro_bias": self.gyro_bias.tolist(),
            "sqrt_info": self.sqrt_info.tolist(),
        }

    @classmethod
    def from_json(cls, doc):
        a = {k: np.array(v, dtype=float) for k, v in doc.items() if k != "t"}
        return cls(t=float(doc["t"]), **a)


@dataclass(frozen=True)
class FilterConfig:
    imu: ImuGradeModel = IMU_GRADES["industrial"]
    lever_arm: np.ndarray = field(default_factory=lambda: DEFAULT_LEVER_ARM.copy())
    base_pos: np.ndarray = field(default_factory=lambda: DEFAULT_BASE_POS.copy())
    sigma_rho: float = 1.0
    sigma_phi: float = 0.005
    vehicle_constraints: bool = False
    constraint_sigma_mps: float = 0.05
    check_identity: bool = False


@dataclass(frozen=True)
class CostDecomposition:
    nu1: np.ndarray
    nu2: np.ndarray
    nu3: np.ndarray
    R_xx: np.ndarray
    R_xn: np.ndarray
    R_nn: np.ndarray
    Q: np.ndarray  # orthogonal factor of the stacked Jacobian
    nu_prime: np.ndarray
    H_prime: np.ndarray

    @property
    def n(self):
        return self.nu2.size

    def total_cost(self, dx, n):
        r = self.nu_prime - self.H_prime @ np.concatenate([dx, n])
        return float(r @ r)

    def j1(self, dx, n):
        r = self.nu1 - self.R_xx @ dx - self.R_xn @ n
        return float(r @ r)

    def j2(self, n):
        r = self.nu2 - self.R_nn @ n
        return float(r @ r)

    @property
    def j3(self):
        return float(self.nu3 @ self.nu3)


@dataclass(frozen=True)
class FixResult:
    t: float
    n_k: int
    eps_phi: float
    j3: float
    fix_applied: bool
    dx_float: np.ndarray | None = None
    n_float: np.ndarray | None = None
    dx_fixed: np.ndarray | None = None
    n_fixed: np.ndarray | None = None


# -- propagation ---------------------------------------------------------------


def _srif_time_update(R, Phi, Q):
    """Square-root information after ``x' = Phi x + w``, ``w ~ N(0, Q)``."""
    s, V = np.linalg.eigh(0.5 * (Q + Q.T))
    keep = s > 1e-30 * max(s.max(), 1e-300)
    G = V[:, keep] * np.sqrt(s[keep])
    m = G.shape[1]
    RPhiInv = np.linalg.solve(Phi.T, R.T).T
    A = np.zeros((m + STATE_DIM, m + STATE_DIM))
    A[:m, :m] = np.eye(m)
    A[m:, :m] = -RPhiInv @ G
    A[m:, m:] = RPhiInv
    T = np.linalg.qr(A, mode="r")
    return upper_with_positive_diagonal(T[m:, m:])


def propagate(state, imu, t_to, model=None):
    """Strapdown mechanization from ``state.t`` to ``t_to`` with IMU samples in
    ``(state.t, t_to]`` (each held over the preceding sample interval)."""
    model = IMU_GRADES["industrial"] if model is None else model
    dt = 1.0 / model.sample_rate
    lo, hi = imu.window(state.t, t_to)
    if t_to <= state.t + 1e-9:
        return state
    times = np.concatenate([[state.t], imu.t[lo:hi]])
    if hi == lo or np.any(np.diff(times) > 2.0 * dt + 1e-9) or t_to - times[-1] > 2.0 * dt + 1e-9:
        raise ImuGapError(f"IMU gap between t={state.t} and t={t_to}")

    p, v, C = state.position.copy(), state.velocity.copy(), state.attitude.copy()
    ba, bg = state.accel_bias, state.gyro_bias
    qa = model.accel_noise_density**2
    qg = model.gyro_noise_density**2
    qba = model.accel_bias_rw**2
    qbg = model.gyro_bias_rw**2
    Phi_tot = np.eye(STATE_DIM)
    Q_tot = np.zeros((STATE_DIM, STATE_DIM))
    I3 = np.eye(3)
    prev = state.t
    for k in range(lo, hi):
        h = imu.t[k] - prev
        prev = imu.t[k]
        f = imu.accel[k] - ba
        w = imu.gyro[k] - bg
        Cf = C @ f
        acc = Cf + GRAVITY_ENU
        A = -skew(Cf)
        Phi = np.eye(STATE_DIM)
        Phi[POS, VEL] = h * I3
        Phi[POS, ATT] = 0.5 * h * h * A
        Phi[POS, BA] = -0.5 * h * h * C
        Phi[VEL, ATT] = h * A
        Phi[VEL, BA] = -h * C
        Phi[ATT, BG] = -h * C
        Qk = np.zeros((STATE_DIM, STATE_DIM))
        # accelerometer white noise held over the interval (variance qa / h)
        Qk[POS, POS] = 0.25 * h**3 * qa * I3
        Qk[POS, VEL] = Qk[VEL, POS] = 0.5 * h**2 * qa * I3
        Qk[VEL, VEL] = h * qa * I3
        Qk[ATT, ATT] = h * qg * I3
        Qk[BA, BA] = h * qba * I3
        Qk[BG, BG] = h * qbg * I3
        Q_tot = Phi @ Q_tot @ Phi.T + Qk
        Phi_tot = Phi @ Phi_tot

        p = p + v * h + 0.5 * acc * h * h
        v = v + acc * h
        C = C @ so3_exp(w * h)

    R = _srif_time_update(state.sqrt_info, Phi_tot, Q_tot)
    return replace(state, t=float(t_to), position=p, velocity=v, attitude=orthonormalize(C),
                   sqrt_info=R)


def apply_vehicle_constraints(state, sigma=0.05):
    """Pseudo-measurements of zero lateral and vertical body velocity."""
    C = state.attitude
    vb = C.T @ state.velocity
    H = np.zeros((2, STATE_DIM))
    H[:, VEL] = C.T[1:3]
    H[:, ATT] = (C.T @ skew(state.velocity))[1:3]
    resid = -vb[1:3] / sigma
    A = np.vstack([state.sqrt_info, H / sigma])
    b = np.concatenate([np.zeros(STATE_DIM), resid])
    Q, T = np.linalg.qr(A)
    d = np.sign(np.diag(T))
    d[d == 0] = 1.0
    T = d[:, None] * T
    z = d * (Q.T @ b)
    dx = solve_triangular(T, z, lower=False)
    return state.corrected(dx, T)


# -- measurement update -----------------------------------------------------


def cost_decompose(lin, R_xx_prior):
    """Whiten, stack and QR-factor the measurement update cost."""
    nx = STATE_DIM
    n = lin.n
    if n == 0:
        R = upper_with_positive_diagonal(np.linalg.qr(R_xx_prior, mode="r"))
        z = np.zeros(0)
        return CostDecomposition(np.zeros(nx), z, z, R, np.zeros((nx, 0)), np.zeros((0, 0)),
                                 np.eye(nx), np.zeros(nx), R_xx_prior.copy())
    L = cho_factor(lin.cov, lower=True)[0]
    L = np.tril(L)
    w_nu = solve_triangular(L, lin.nu, lower=True)
    w_Hr = solve_triangular(L, lin.H_r, lower=True)
    w_Hn = solve_triangular(L, lin.H_n, lower=True)

    nu_p = np.concatenate([np.zeros(nx), w_nu])
    H_p = np.zeros((nx + 2 * n, nx + n))
    H_p[:nx, :nx] = R_xx_prior
    H_p[nx:, :nx] = w_Hr
    H_p[nx:, nx:] = w_Hn

    Q, Rt = np.linalg.qr(H_p, mode="complete")
    m = nx + n
    d = np.sign(np.diag(Rt))
    d[d == 0] = 1.0
    Rt[:m] = d[:, None] * Rt[:m]
    Q[:, :m] = Q[:, :m] * d
    diag = np.abs(np.diag(Rt))
    if diag.min() <= 1e-12 * diag.max() or np.linalg.cond(Rt[:m]) > ils.COND_LIMIT:
        raise IllConditionedError("stacked measurement Jacobian is rank deficient")
    nu_pp = Q.T @ nu_p
    return CostDecomposition(
        nu1=nu_pp[:nx], nu2=nu_pp[nx:m], nu3=nu_pp[m:],
        R_xx=Rt[:nx, :nx], R_xn=Rt[:nx, nx:m], R_nn=np.triu(Rt[nx:m, nx:m]),
        Q=Q, nu_prime=nu_p, H_prime=H_p,
    )


def measurement_update(prior, epoch, constellation, cfg=None, rng=None):
    """One CDGNSS update: linearize, decompose, fix ambiguities, back-substitute."""
    cfg = FilterConfig() if cfg is None else cfg
    if abs(prior.t - epoch.t) > 1e-9:
        raise OrderError(f"prior at t={prior.t} but epoch at t={epoch.t}")
    if epoch.n == 0:
        return FixResult(epoch.t, 0, 0.0, 0.0, False), prior
    lin = linearize(epoch, prior, constellation, cfg.lever_arm, cfg.base_pos,
                    cfg.sigma_rho, cfg.sigma_phi)
    try:
        if lin.ill_conditioned:
            raise IllConditionedError("degenerate DD geometry")
        dec = cost_decompose(lin, prior.sqrt_info)
        prob = ils.IlsProblem(dec.nu2, dec.R_nn)
        n_fixed, j2 = ils.ils_solve(prob)
    except IllConditionedError as exc:
        log.warning("t=%.3f: update skipped (%s)", epoch.t, exc)
        return FixResult(epoch.t, epoch.n, 0.0, 0.0, False), prior

    n_float = ils.float_ambiguities(prob)
    dx_float = solve_triangular(dec.R_xx, dec.nu1 - dec.R_xn @ n_float, lower=False)
    dx_fixed = solve_triangular(dec.R_xx, dec.nu1 - dec.R_xn @ n_fixed, lower=False)
    if cfg.check_identity:
        _check_identity(dec, rng or np.random.default_rng(0))
    post = prior.corrected(dx_fixed, dec.R_xx)
    fix = FixResult(epoch.t, epoch.n, j2, dec.j3, True, dx_float, n_float, dx_fixed, n_fixed)
    return fix, post


def _check_identity(dec, rng, tol=1e-9):
    dx = rng.standard_normal(STATE_DIM) * 0.01
    n = rng.integers(-5, 6, dec.n).astype(float)
    total = dec.total_cost(dx, n)
    parts = dec.j1(dx, n) + dec.j2(n) + dec.j3
    if abs(total - parts) > tol * max(1.0, abs(total)):
        raise AssertionError(f"cost identity violated: {total} vs {parts}")


def run_filter(imu, epochs, initial, constellation, cfg=None):
    """Interleave IMU propagation and CDGNSS updates over an epoch stream."""
    cfg = FilterConfig() if cfg is None else cfg
    state = initial
    fixes, states = [], []
    last_t = -np.inf
    for ep in epochs:
        if ep.t <= last_t + 1e-9:
            raise OrderError(f"epoch at t={ep.t} out of order")
        last_t = ep.t
        if ep.t < initial.t - 1e-9:
            raise OrderError(f"epoch at t={ep.t} precedes the initial state")
        state = propagate(state, imu, ep.t, cfg.imu)
        if cfg.vehicle_constraints:
            state = apply_vehicle_constraints(state, cfg.constraint_sigma_mps)
        fix, state = measurement_update(state, ep, constellation, cfg)
        fixes.append(fix)
        states.append(state)
    return fixes, states


def dead_reckon(imu, initial, t_end, model=None, step=0.2):
    """Propagation only; returns states every ``step`` seconds."""
    states = []
    state = initial
    t = initial.t
    while t + step <= t_end + 1e-9:
        t = round(t + step, 9)
        state = propagate(state, imu, t, model)
        states.append(state)
    return states


# -- initialization ------------------------------------------------------------


def initial_sigmas(model, position=0.01, velocity=0.01, attitude=2e-3):
    return np.concatenate([
        np.full(3, position), np.full(3, velocity), np.full(3, attitude),
        np.full(3, model.accel_bias_instability), np.full(3, model.gyro_bias_instability),
    ])


def initial_state(truth_state, model, rng, sigmas=None):
    """Estimate drawn from the prior around the truth; bias estimates start at zero."""
    sig = initial_sigmas(model) if sigmas is None else np.asarray(sigmas)
    dx = rng.standard_normal(STATE_DIM) * sig
    C = orthonormalize(so3_exp(-dx[ATT]) @ truth_state.attitude)
    return NavState(
        t=float(truth_state.t),
        position=truth_state.position - dx[POS],
        velocity=truth_state.velocity - dx[VEL],
        attitude=C,
        accel_bias=np.zeros(3),
        gyro_bias=np.zeros(3),
        sqrt_info=np.diag(1.0 / sig),
    )


# -- persistence ---------------------------------------------------------------


def _fmt(x):
    return repr(float(x))


def save_fixes_csv(fixes, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "N_k", "eps_phi", "j3", "fix_applied"])
        for f in fixes:
            w.writerow([_fmt(f.t), f.n_k, _fmt(f.eps_phi), _fmt(f.j3), int(f.fix_applied)])


def load_fixes_csv(path):
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(FixResult(float(row["t"]), int(row["N_k"]), float(row["eps_phi"]),
                                 float(row["j3"]), bool(int(row["fix_applied"]))))
    return out


def save_states_csv(states, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "px", "py", "pz", "vx", "vy", "vz", "qw", "qx", "qy", "qz",
                    "bax", "bay", "baz", "bgx", "bgy", "bgz", "sig_px", "sig_py", "sig_pz"])
        for s in states:
            q = Rotation.from_matrix(s.attitude).as_quat()
            sig = s.sigmas()[POS]
            w.writerow([_fmt(s.t), *map(_fmt, s.position), *map(_fmt, s.velocity),
                        _fmt(q[3]), _fmt(q[0]), _fmt(q[1]), _fmt(q[2]),
                        *map(_fmt, s.accel_bias), *map(_fmt, s.gyro_bias), *map(_fmt, sig)])


def load_states_csv(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return {"t": data[:, 0], "position": data[:, 1:4], "velocity": data[:, 4:7]}


def save_state_json(state, path):
    with open(path, "w") as fh:
        json.dump(state.to_json(), fh)


def load_state_json(path):
    with open(path) as fh:
        return NavState.from_json(json.load(fh))
