from dataclasses import replace

import numpy as np
import pytest
from scipy.spatial.transform import Rotation
from scipy.stats import chi2

from cpspoof.estimator import (
    FilterConfig,
    FixResult,
    ImuGapError,
    NavState,
    OrderError,
    cost_decompose,
    dead_reckon,
    initial_state,
    load_fixes_csv,
    load_state_json,
    load_states_csv,
    measurement_update,
    propagate,
    run_filter,
    save_fixes_csv,
    save_state_json,
    save_states_csv,
)
from cpspoof.geometry import Constellation, default_constellation
from cpspoof.ils import IllConditionedError
from cpspoof.observables import (
    L1_WAVELENGTH,
    AmbiguityLedger,
    EpochMeasurement,
    decimate,
    linearize,
    synthesize_epoch,
    synthesize_stream,
)
from cpspoof.scenario import (
    GRAVITY_ENU,
    INDUSTRIAL,
    ImuGradeModel,
    ImuSeries,
    ScenarioConfig,
    body_to_enu,
    generate_trajectory,
    synthesize_imu,
)

ANT = np.array([3.0, 4.0, 1.0])
NO_LEVER = FilterConfig(lever_arm=np.zeros(3))
QUIET = ImuGradeModel("industrial", 0.0, 0.0, 0.0, 0.0)
z3 = np.zeros(3)


def nav(pos=ANT, t=0.0, C=np.eye(3), sqrt_info=None, vel=z3):
    R = np.eye(15) if sqrt_info is None else sqrt_info
    return NavState(t, np.array(pos, float), np.array(vel, float), C, z3, z3, R)


def tight(pos_sigma=1e-3, other=1e-2):
    return np.diag(np.r_[np.full(3, 1 / pos_sigma), np.full(12, 1 / other)])


def constant_imu(C, accel_enu, seconds, rate=100.0):
    t = np.arange(1, int(round(seconds * rate)) + 1) / rate
    f = C.T @ (np.asarray(accel_enu) - GRAVITY_ENU)
    return ImuSeries(t, np.tile(f, (t.size, 1)), np.zeros((t.size, 3)))


def random_prior(rng):
    A = rng.standard_normal((15, 15))
    P = 1e-3 * A @ A.T + 1e-4 * np.eye(15)
    return np.linalg.cholesky(np.linalg.inv(P)).T, P


def state_error(truth, imu, s):
    k = truth.index(s.t)
    return np.concatenate([
        truth.position[k] - s.position,
        truth.velocity[k] - s.velocity,
        Rotation.from_matrix(truth.attitude[k] @ s.attitude.T).as_rotvec(),
        imu.accel_bias[k] - s.accel_bias,
        imu.gyro_bias[k] - s.gyro_bias,
    ])


def pipeline(seconds, seed, env="open_sky", cfg=None, model=INDUSTRIAL):
    con = default_constellation()
    sc = ScenarioConfig(duration_s=seconds, stop_until_s=5.0, accel_end_s=15.0)
    truth = generate_trajectory(sc, seed)
    imu = synthesize_imu(truth, model, seed)
    obs = decimate(synthesize_stream(truth, con, env, seed), 5.0)
    init = initial_state(truth.state(0), model, np.random.default_rng([seed, 2]))
    return truth, imu, obs, init, con


@pytest.fixture(scope="module")
def open_sky_run():
    truth, imu, obs, init, con = pipeline(200.0, 21)
    fixes, states = run_filter(imu, obs, init, con)
    return truth, imu, obs, init, con, fixes, states


@pytest.fixture
def clean(constellation):
    led = AmbiguityLedger.random(constellation.sat_ids, np.random.default_rng(0))
    return synthesize_epoch(ANT, 0.0, constellation, led, "open_sky", noise=False), led


# -- propagation ---------------------------------------------------------------


def test_static_equilibrium():
    C = body_to_enu(0.4)
    s = nav(C=C)
    out = propagate(s, constant_imu(C, z3, 0.2), 0.2, QUIET)
    assert np.linalg.norm(out.position - s.position) < 1e-9
    assert out.t == 0.2


def test_constant_forward_acceleration():
    C = body_to_enu(np.radians(30.0))
    fwd = C[:, 0]
    out = propagate(nav(pos=z3, C=C), constant_imu(C, fwd, 1.0), 1.0, QUIET)
    np.testing.assert_allclose(out.position, 0.5 * fwd, atol=1e-6)
    np.testing.assert_allclose(out.velocity, fwd, atol=1e-6)


def test_position_uncertainty_grows():
    C = body_to_enu(0.0)
    s = nav(C=C, sqrt_info=tight())
    out = propagate(s, constant_imu(C, z3, 0.2), 0.2, INDUSTRIAL)
    assert np.all(out.sigmas()[:3] > s.sigmas()[:3])
    assert np.allclose(np.tril(out.sqrt_info, -1), 0.0)
    assert np.all(np.diag(out.sqrt_info) > 0)


def test_time_update_only_loses_information():
    C = body_to_enu(0.3)
    imu = constant_imu(C, [0.3, 0.1, 0.0], 0.2)
    R, P = random_prior(np.random.default_rng(5))
    s = nav(C=C, sqrt_info=R)
    out = propagate(s, imu, 0.2, INDUSTRIAL)
    assert np.trace(out.covariance()) > np.trace(P)
    np.testing.assert_allclose(out.attitude.T @ out.attitude, np.eye(3), atol=1e-12)


def test_imu_gap_is_rejected():
    C = np.eye(3)
    imu = constant_imu(C, z3, 1.0)
    holed = ImuSeries(np.delete(imu.t, [40, 41, 42]), np.delete(imu.accel, [40, 41, 42], 0),
                      np.delete(imu.gyro, [40, 41, 42], 0))
    with pytest.raises(ImuGapError):
        propagate(nav(C=C), holed, 0.6, QUIET)
    with pytest.raises(ImuGapError):
        propagate(nav(C=C), imu, 1.5, QUIET)


def test_dead_reckoning_drifts(open_sky_run):
    truth, imu, _, init, *_ = open_sky_run
    states = dead_reckon(imu, init, 20.0, INDUSTRIAL)
    err = [np.linalg.norm(truth.position[truth.index(s.t)] - s.position) for s in states]
    assert err[-1] > err[len(err) // 4] > 0
    assert states[-1].sigmas()[0] > states[0].sigmas()[0]


def test_empty_epoch_stream_is_dead_reckoning(open_sky_run):
    truth, imu, obs, init, con, *_ = open_sky_run
    empty = [EpochMeasurement(e.t, None, (), e.env) for e in obs[1:51]]
    fixes, states = run_filter(imu, empty, init, con)
    assert not any(f.fix_applied for f in fixes)
    dr = dead_reckon(imu, init, empty[-1].t, INDUSTRIAL)
    np.testing.assert_allclose(states[-1].position, dr[-1].position, atol=1e-9)


# -- cost decomposition --------------------------------------------------------


def test_cost_identity_random_points(constellation, clean):
    ep, _ = clean
    rng = np.random.default_rng(8)
    noisy = synthesize_epoch(ANT, 0.0, constellation, AmbiguityLedger.zeros(
        constellation.sat_ids), "shallow_urban", rng)
    R, _ = random_prior(rng)
    s = nav(pos=ANT + rng.standard_normal(3) * 0.2, sqrt_info=R)
    dec = cost_decompose(linearize(noisy, s, constellation), R)
    for _ in range(100):
        dx = rng.standard_normal(15) * 0.1
        n = rng.integers(-20, 21, noisy.n).astype(float)
        total = dec.total_cost(dx, n)
        assert dec.j1(dx, n) + dec.j2(n) + dec.j3 == pytest.approx(total, rel=1e-9)


def test_decomposition_structure(constellation, clean):
    ep, _ = clean
    R, _ = random_prior(np.random.default_rng(1))
    dec = cost_decompose(linearize(ep, nav(sqrt_info=R), constellation), R)
    n = ep.n
    np.testing.assert_allclose(dec.Q.T @ dec.Q, np.eye(15 + 2 * n), atol=1e-10)
    assert dec.R_xx.shape == (15, 15) and dec.R_xn.shape == (15, n)
    assert dec.R_nn.shape == (n, n) and dec.nu3.shape == (2 * n - n,)
    for M in (dec.R_xx, dec.R_nn):
        np.testing.assert_array_equal(np.tril(M, -1), 0.0)
        assert np.all(np.diag(M) > 0)


def test_no_measurements_degenerate_to_prior():
    R, _ = random_prior(np.random.default_rng(2))
    lin = type("Lin", (), {"n": 0})()
    dec = cost_decompose(lin, R)
    assert dec.j3 == 0.0 and dec.n == 0
    np.testing.assert_allclose(dec.R_xx.T @ dec.R_xx, R.T @ R, rtol=1e-9, atol=1e-6)


def test_rank_deficient_stack_raises(constellation, clean):
    ep, _ = clean
    R = tight()
    R[14, 14] = 0.0
    with pytest.raises(IllConditionedError):
        cost_decompose(linearize(ep, nav(sqrt_info=R), constellation), R)


def test_j3_equals_pseudorange_nis(constellation):
    rng = np.random.default_rng(3)
    led = AmbiguityLedger.random(constellation.sat_ids, rng)
    for j in range(20):
        ep = synthesize_epoch(ANT, 0.2 * j, constellation, led, "open_sky", rng)
        R, P = random_prior(rng)
        s = nav(pos=ANT + 0.3 * rng.standard_normal(3), t=0.2 * j, sqrt_info=R)
        lin = linearize(ep, s, constellation)
        dec = cost_decompose(lin, R)
        n = ep.n
        H = lin.H_r[:n]
        S = lin.cov[:n, :n] + H @ P @ H.T
        nis = lin.nu[:n] @ np.linalg.solve(S, lin.nu[:n])
        assert dec.j3 == pytest.approx(nis, rel=1e-6)


# -- measurement update --------------------------------------------------------


def test_noiseless_update_at_truth(constellation, clean):
    ep, led = clean
    fix, post = measurement_update(nav(sqrt_info=tight()), ep, constellation, NO_LEVER)
    assert fix.fix_applied and fix.n_k == ep.n
    assert fix.eps_phi < 1e-12
    assert np.max(np.abs(fix.dx_fixed)) < 1e-9
    assert fix.n_fixed.tolist() == [led.dd(s, ep.pivot) for s in ep.sats]
    np.testing.assert_allclose(post.position, ANT, atol=1e-9)


def test_wavelength_conflict_spikes_eps(constellation, clean):
    ep, _ = clean
    s = nav(sqrt_info=tight())
    G = linearize(ep, s, constellation, np.zeros(3)).H_r[: ep.n, :3]
    shift = L1_WAVELENGTH * G[0] / (G[0] @ G[0])
    fix, _ = measurement_update(replace(s, position=ANT - shift), ep, constellation, NO_LEVER)
    assert fix.eps_phi > chi2.ppf(0.999, ep.n)


def test_integer_folding_leaves_eps_unchanged(constellation):
    rng = np.random.default_rng(6)
    led = AmbiguityLedger.zeros(constellation.sat_ids)
    ep = synthesize_epoch(ANT, 0.0, constellation, led, "open_sky", rng)
    s = nav(pos=ANT + 0.01, sqrt_info=tight(0.02, 0.1))
    base, _ = measurement_update(s, ep, constellation, NO_LEVER)
    for _ in range(10):
        m = rng.integers(-100, 101, ep.n)
        folded = replace(ep, pairs=tuple(replace(p, phi=p.phi + p.wavelength * k)
                                         for p, k in zip(ep.pairs, m)))
        fix, _ = measurement_update(s, folded, constellation, NO_LEVER)
        assert fix.eps_phi == pytest.approx(base.eps_phi, abs=1e-9)
        assert (fix.n_fixed - base.n_fixed).tolist() == m.tolist()


def test_time_mismatch_rejected(constellation, clean):
    ep, _ = clean
    with pytest.raises(OrderError):
        measurement_update(nav(t=0.2), ep, constellation)


def test_empty_epoch_skips_update(constellation):
    s = nav()
    fix, post = measurement_update(s, EpochMeasurement(0.0, None, ()), constellation)
    assert fix == FixResult(0.0, 0, 0.0, 0.0, False)
    assert post is s


def test_degenerate_geometry_skips_and_carries_prior(constellation, caplog):
    other = constellation.get(2)
    con = Constellation((constellation.get(1), other, replace(other, sat_id=20)))
    led = AmbiguityLedger.zeros(con.sat_ids)
    ep = synthesize_epoch(ANT, 0.0, con, led, "open_sky", noise=False)
    s = nav()
    fix, post = measurement_update(s, ep, con)
    assert not fix.fix_applied and fix.n_k == ep.n
    assert post is s
    assert "skipped" in caplog.text


def test_check_identity_runs_on_live_updates(open_sky_run):
    truth, imu, obs, init, con, *_ = open_sky_run
    cfg = FilterConfig(check_identity=True)
    fixes, _ = run_filter(imu, obs[:100], init, con, cfg)
    assert all(f.fix_applied for f in fixes)


# -- filter runs ---------------------------------------------------------------


def test_open_sky_eps_mean_tracks_pair_count(open_sky_run):
    fixes = open_sky_run[5]
    assert len(fixes) >= 1000
    eps = np.array([f.eps_phi for f in fixes])
    n = np.array([f.n_k for f in fixes])
    assert eps.mean() == pytest.approx(n.mean(), rel=0.10)


def test_open_sky_position_accuracy(open_sky_run):
    truth, imu, *_, states = open_sky_run
    lever = FilterConfig().lever_arm
    err = [truth.antenna(s.t, lever) - (s.position + s.attitude @ lever) for s in states]
    assert np.sqrt(np.mean(np.sum(np.square(err), axis=1))) <= 0.05


def test_posterior_invariants(open_sky_run):
    for s in open_sky_run[6][::97]:
        np.testing.assert_array_equal(np.tril(s.sqrt_info, -1), 0.0)
        assert np.all(np.diag(s.sqrt_info) > 0)
        np.testing.assert_allclose(s.attitude.T @ s.attitude, np.eye(3), atol=1e-12)


def test_fix_result_invariants(open_sky_run):
    for f in open_sky_run[5]:
        assert f.eps_phi >= 0 and f.j3 >= 0
        assert f.n_fixed.dtype.kind == "i"


def test_filter_consistency_nees():
    nees = []
    for seed in range(10):
        truth, imu, obs, init, con = pipeline(60.0, seed)
        _, states = run_filter(imu, obs, init, con)
        for s in states:
            y = s.sqrt_info @ state_error(truth, imu, s)
            nees.append(y @ y)
    assert np.mean(nees) == pytest.approx(15.0, rel=0.20)


def test_restart_reproduces_tail(tmp_path, open_sky_run):
    truth, imu, obs, init, con, fixes, states = open_sky_run
    k = 300
    save_state_json(states[k - 1], tmp_path / "state.json")
    resumed = load_state_json(tmp_path / "state.json")
    tail_fixes, tail_states = run_filter(imu, obs[k:600], resumed, con)
    for a, b in zip(tail_fixes, fixes[k:600]):
        assert a.eps_phi == b.eps_phi and a.j3 == b.j3
    np.testing.assert_array_equal(tail_states[-1].position, states[599].position)


def test_run_is_deterministic(open_sky_run):
    truth, imu, obs, init, con, fixes, _ = open_sky_run
    again, _ = run_filter(imu, obs[:200], init, con)
    assert [f.eps_phi for f in again] == [f.eps_phi for f in fixes[:200]]


def test_out_of_order_epochs_rejected(open_sky_run):
    truth, imu, obs, init, con, *_ = open_sky_run
    with pytest.raises(OrderError):
        run_filter(imu, [obs[3], obs[2]], init, con)


def test_vehicle_constraints_option(open_sky_run):
    truth, imu, obs, init, con, _, base = open_sky_run
    cfg = FilterConfig(vehicle_constraints=True)
    fixes, states = run_filter(imu, obs[:300], init, con, cfg)
    err = [np.linalg.norm(truth.position[truth.index(s.t)] - s.position) for s in states]
    assert max(err) < 0.1
    assert states[-1].position.tolist() != base[299].position.tolist()


def test_initial_state_is_drawn_around_truth(short_drive):
    truth = short_drive.state(0)
    draws = np.array([initial_state(truth, INDUSTRIAL, np.random.default_rng(i)).position
                      for i in range(400)])
    assert np.std(draws - truth.position) == pytest.approx(0.01, rel=0.15)
    s = initial_state(truth, INDUSTRIAL, np.random.default_rng(0))
    assert s.accel_bias.tolist() == [0.0, 0.0, 0.0]


def test_csv_persistence(tmp_path, open_sky_run):
    fixes, states = open_sky_run[5][:50], open_sky_run[6][:50]
    save_fixes_csv(fixes, tmp_path / "fixes.csv")
    assert (tmp_path / "fixes.csv").read_text().startswith("t,N_k,eps_phi,j3,fix_applied\n")
    back = load_fixes_csv(tmp_path / "fixes.csv")
    assert [(f.t, f.n_k, f.eps_phi, f.j3, f.fix_applied) for f in back] == [
        (f.t, f.n_k, f.eps_phi, f.j3, f.fix_applied) for f in fixes]
    save_states_csv(states, tmp_path / "states.csv")
    loaded = load_states_csv(tmp_path / "states.csv")
    np.testing.assert_array_equal(loaded["position"], [s.position for s in states])
