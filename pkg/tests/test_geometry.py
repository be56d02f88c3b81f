import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cpspoof.geometry import (
    EARTH_RADIUS,
    ELEVATION_MASK,
    GPS_ORBIT_RADIUS,
    MU_EARTH,
    SPEED_OF_LIGHT,
    Constellation,
    GeometryError,
    SatelliteEphemeris,
    build_geometry,
    dd_offset_mapping,
    dd_range,
    dd_ranges,
    default_constellation,
    load_constellation,
    save_constellation,
    satellite_position,
)

ROVER = np.array([12.0, -7.0, 1.0])
BASE = np.array([180.0, -140.0, 1.5])

vec10 = arrays(np.float64, 3, elements=st.floats(-10.0, 10.0))


def eph(**kw):
    base = dict(sat_id=1, orbit_radius=GPS_ORBIT_RADIUS, inclination=np.radians(55.0),
                raan=0.7, phase_at_t0=1.3, clock_bias=2e-5, clock_drift=1e-11)
    base.update(kw)
    return SatelliteEphemeris(**base)


@pytest.fixture
def geom(constellation):
    return build_geometry(constellation, ROVER, BASE, 10.0)


def test_position_is_periodic():
    e = eph()
    p0, _ = satellite_position(e, 3.0)
    p1, _ = satellite_position(e, 3.0 + e.period)
    assert np.linalg.norm(p1 - p0) < 1e-6


def test_equatorial_orbit_stays_in_plane():
    e = eph(inclination=0.0, raan=0.0)
    for t in np.linspace(0, 40000, 17):
        p, _ = satellite_position(e, t)
        assert abs(p[2]) < 1e-6


def test_speed_matches_vis_viva_by_finite_difference():
    e = eph()
    h = 1e-3
    t = 1234.5
    p_plus, _ = satellite_position(e, t + h)
    p_minus, _ = satellite_position(e, t - h)
    fd_speed = np.linalg.norm((p_plus - p_minus) / (2 * h))
    expected = np.sqrt(MU_EARTH / e.orbit_radius)
    assert fd_speed == pytest.approx(expected, rel=1e-6)


@pytest.mark.parametrize("t", [0.0, 17.3, 900.0, 5000.0])
def test_analytic_velocity_matches_finite_difference(t):
    e = eph()
    h = 1e-3
    _, v = satellite_position(e, t)
    fd = (satellite_position(e, t + h)[0] - satellite_position(e, t - h)[0]) / (2 * h)
    assert np.linalg.norm(fd - v) / np.linalg.norm(v) < 1e-4


def test_deterministic():
    e = eph()
    a = satellite_position(e, 77.7)
    b = satellite_position(e, 77.7)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_orbit_radius_must_exceed_earth():
    with pytest.raises(GeometryError):
        eph(orbit_radius=EARTH_RADIUS * 0.5)


def test_default_constellation_visibility(constellation):
    assert 8 <= len(constellation.sat_ids) <= 12
    for t in (0.0, 150.0, 300.0, 600.0, 1000.0):
        vis = constellation.visible(ROVER, t)
        assert 6 <= len(vis) <= 10
        assert all(el >= ELEVATION_MASK for _, el in vis)


def test_dd_range_zero_baseline(constellation):
    g = build_geometry(constellation, BASE, BASE, 5.0)
    for s in g.other_sats:
        assert abs(dd_range(g, s, 5.0)) < 1e-9


def test_dd_range_matches_four_norms():
    sats = tuple(
        SatelliteEphemeris(k, GPS_ORBIT_RADIUS, np.radians(55.0), 0.3 * k, 0.5 + 0.2 * k, 0.0, 0.0)
        for k in (1, 2, 3)
    )
    con = Constellation(sats)
    rover, base = np.array([0.0, 0.0, 0.0]), np.array([100.0, 0.0, 0.0])
    g = build_geometry(con, rover, base, 0.0, pivot=1, sats=(2, 3))
    p = {k: con.position_enu(k, 0.0)[0] for k in (1, 2, 3)}
    for i in (2, 3):
        expected = (np.linalg.norm(p[i] - rover) - np.linalg.norm(p[1] - rover)) - (
            np.linalg.norm(p[i] - base) - np.linalg.norm(p[1] - base)
        )
        assert dd_range(g, i, 0.0) == pytest.approx(expected, abs=1e-9)


def test_dd_range_with_clock_terms_cancels(constellation):
    g = build_geometry(constellation, ROVER, BASE, 3.0)
    clockless = Constellation(
        tuple(SatelliteEphemeris(s.sat_id, s.orbit_radius, s.inclination, s.raan,
                                 s.phase_at_t0, 0.0, 0.0) for s in constellation.satellites)
    )
    g0 = build_geometry(clockless, ROVER, BASE, 3.0, pivot=g.pivot_sat, sats=g.other_sats)
    for s in g.other_sats:
        assert dd_range(g, s, 3.0) == pytest.approx(dd_range(g0, s, 3.0), abs=1e-6)


def test_common_translation_bounded_by_far_field_term(constellation, geom):
    shift = np.array([40.0, -25.0, 3.0])
    moved = build_geometry(constellation, ROVER + shift, BASE + shift, 10.0,
                           pivot=geom.pivot_sat, sats=geom.other_sats)
    baseline = np.linalg.norm(ROVER - BASE)
    rmin = min(np.linalg.norm(constellation.position_enu(s, 10.0)[0]) for s in geom.other_sats)
    bound = 4.0 * np.linalg.norm(shift) * baseline / (rmin - EARTH_RADIUS)
    for s in geom.other_sats:
        assert abs(dd_range(moved, s, 10.0) - dd_range(geom, s, 10.0)) <= bound


def test_unknown_sat_raises(geom):
    with pytest.raises(GeometryError):
        dd_range(geom, 999, 10.0)
    with pytest.raises(GeometryError):
        dd_range(geom, geom.pivot_sat, 10.0)


def test_geometry_invariants(geom):
    assert geom.pivot_sat not in geom.other_sats
    assert len(geom.other_sats) >= 1
    for u in geom.unit_los.values():
        assert abs(np.linalg.norm(u) - 1.0) < 1e-12


def test_pivot_is_highest_elevation(constellation, geom):
    vis = dict(constellation.visible(ROVER, 10.0))
    assert vis[geom.pivot_sat] == max(vis.values())


def test_pivot_ties_choose_lowest_id(constellation):
    from dataclasses import replace

    top = constellation.get(1)  # 78 deg elevation at t = 0
    con = Constellation((replace(top, sat_id=7), replace(top, sat_id=3), constellation.get(2)))
    g = build_geometry(con, np.zeros(3), BASE, 0.0)
    assert g.pivot_sat == 3


def test_repeated_pivot_rejected(constellation, geom):
    with pytest.raises(GeometryError):
        build_geometry(constellation, ROVER, BASE, 10.0, pivot=geom.pivot_sat,
                       sats=(geom.pivot_sat,))


def test_offset_zero(geom):
    assert all(v == (0.0, 0.0) for v in dd_offset_mapping(geom, np.zeros(3)).values())


@given(vec10)
def test_offset_matches_first_order_model(geom, delta):
    offs = dd_offset_mapping(geom, delta)
    up = geom.unit_los[geom.pivot_sat]
    for s, (d_rho, d_phi) in offs.items():
        linear = -(geom.unit_los[s] - up) @ delta
        assert abs(d_rho - linear) < 1e-3
        assert d_rho == d_phi


@given(vec10, vec10)
def test_offset_composition_law(geom, a, b):
    whole = dd_offset_mapping(geom, a + b)
    first = dd_offset_mapping(geom, a)
    second = dd_offset_mapping(geom.with_rover(geom.rover_pos + a), b)
    for s in geom.other_sats:
        assert whole[s][0] == pytest.approx(first[s][0] + second[s][0], abs=1e-9)


@given(arrays(np.float64, 3, elements=st.floats(-500.0, 500.0)))
def test_dd_range_antisymmetric(constellation, rover):
    g = build_geometry(constellation, rover, BASE, 20.0)
    swapped = build_geometry(constellation, BASE, rover, 20.0, pivot=g.pivot_sat,
                             sats=g.other_sats)
    for s in g.other_sats:
        assert dd_range(swapped, s, 20.0) == pytest.approx(-dd_range(g, s, 20.0), abs=1e-9)


def test_vectorised_dd_ranges_agree(constellation, geom):
    vec = dd_ranges(constellation, geom.pivot_sat, geom.other_sats, ROVER, BASE, 10.0)
    scalar = [dd_range(geom, s, 10.0) for s in geom.other_sats]
    np.testing.assert_allclose(vec, scalar, atol=1e-8)


def test_constellation_json_round_trip(tmp_path, constellation):
    path = tmp_path / "con.json"
    save_constellation(constellation, path)
    doc = json.loads(path.read_text())
    assert set(doc[0]) == {"sat_id", "orbit_radius_m", "inclination_rad", "raan_rad",
                           "phase_rad", "clock_bias_s", "clock_drift_sps"}
    back = load_constellation(path)
    for t in (0.0, 100.0):
        for s in constellation.sat_ids:
            np.testing.assert_array_equal(back.position_enu(s, t)[0],
                                          constellation.position_enu(s, t)[0])


def test_receiver_range_includes_clock(constellation):
    from cpspoof.geometry import receiver_range

    s = constellation.sat_ids[0]
    e = constellation.get(s)
    geo = np.linalg.norm(constellation.position_enu(s, 4.0)[0] - ROVER)
    assert receiver_range(constellation, s, ROVER, 4.0) == pytest.approx(
        geo - SPEED_OF_LIGHT * e.clock(4.0), abs=1e-6)


def test_default_constellation_deterministic():
    a, b = default_constellation(), default_constellation()
    assert a.to_json() == b.to_json()
