import math

import numpy as np
import pymap3d
import pytest
from geographiclib.geodesic import Geodesic
from hypothesis import given
from hypothesis import strategies as st

from rangecorr.geo import (
    GeodesicConvergenceError,
    ecef_to_enu_matrix,
    ecef_to_lla,
    ecef_to_lla_jacobian,
    ecef_to_ned_matrix,
    elevation_azimuth,
    geodesic_distance,
    lla_to_ecef,
    lla_to_ecef_jacobian,
    unit_geometry_vector,
)

lat_st = st.floats(-89.9, 89.9)
lon_st = st.floats(-180.0, 180.0)
alt_st = st.floats(-500.0, 30_000.0)


@given(lat_st, lon_st, alt_st)
def test_lla_to_ecef_matches_pymap3d(lat, lon, alt):
    ours = lla_to_ecef([math.radians(lat), math.radians(lon), alt])
    ref = pymap3d.geodetic2ecef(lat, lon, alt)
    np.testing.assert_allclose(ours, ref, atol=1e-6)


@given(lat_st, lon_st, alt_st)
def test_ecef_round_trip(lat, lon, alt):
    lla = np.array([math.radians(lat), math.radians(lon), alt])
    back = ecef_to_lla(lla_to_ecef(lla))
    assert abs(back[0] - lla[0]) < 1e-11
    assert abs(math.remainder(back[1] - lla[1], 2 * math.pi)) < 1e-11
    assert abs(back[2] - alt) < 1e-6


def test_ecef_to_lla_matches_pymap3d(rng):
    pts = rng.normal(size=(50, 3))
    pts = 6.4e6 * pts / np.linalg.norm(pts, axis=1, keepdims=True)
    lla = ecef_to_lla(pts)
    for p, (la, lo, al) in zip(pts, lla):
        rlat, rlon, ralt = pymap3d.ecef2geodetic(*p)
        assert math.degrees(la) == pytest.approx(rlat, abs=1e-9)
        assert math.degrees(lo) == pytest.approx(rlon, abs=1e-9)
        assert al == pytest.approx(ralt, abs=1e-5)


def test_jacobians_match_finite_differences():
    lla = np.array([0.6, -2.1, 120.0])
    J = lla_to_ecef_jacobian(lla)
    h = np.array([1e-7, 1e-7, 1e-2])
    for k in range(3):
        d = np.zeros(3)
        d[k] = h[k]
        fd = (lla_to_ecef(lla + d) - lla_to_ecef(lla - d)) / (2 * h[k])
        np.testing.assert_allclose(J[:, k], fd, rtol=1e-6, atol=1e-6)
    p = lla_to_ecef(lla)
    Ji = ecef_to_lla_jacobian(p)
    for k in range(3):
        d = np.zeros(3)
        d[k] = 1.0
        fd = (ecef_to_lla(p + d) - ecef_to_lla(p - d)) / 2.0
        np.testing.assert_allclose(Ji[:, k], fd, rtol=1e-5, atol=1e-12)


def test_local_frames_are_rotations():
    R = ecef_to_ned_matrix((0.7, 0.3, 0.0))
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-15)
    assert np.linalg.det(R) == pytest.approx(1.0)
    E = ecef_to_enu_matrix((0.7, 0.3, 0.0))
    np.testing.assert_allclose(E[0], R[1])
    np.testing.assert_allclose(E[2], -R[2])


def test_elevation_of_zenith_and_horizon():
    origin = np.array([0.4, 1.2, 0.0])
    user = lla_to_ecef(origin)
    up = -ecef_to_ned_matrix(origin)[2]
    north = ecef_to_ned_matrix(origin)[0]
    el, _ = elevation_azimuth(user, user + 2e7 * up)
    assert el == pytest.approx(math.pi / 2)
    el, az = elevation_azimuth(user, user + 1e3 * north)
    assert el == pytest.approx(0.0, abs=1e-12)
    assert math.remainder(az, 2 * math.pi) == pytest.approx(0.0, abs=1e-12)


def test_geometry_vector_rejects_coincident_points():
    with pytest.raises(ValueError):
        unit_geometry_vector(np.ones(3), np.ones((2, 3)))


def test_vincenty_reference_distances():
    one = math.radians(1.0)
    assert geodesic_distance((0.0, 0.0), (0.0, one)) == pytest.approx(111319.491, abs=0.01)
    assert geodesic_distance((0.0, 0.0), (one, 0.0)) == pytest.approx(110574.389, abs=0.01)
    assert geodesic_distance((0.3, 0.2), (0.3, 0.2)) == 0.0


@given(lat_st, lon_st, lat_st, lon_st)
def test_vincenty_matches_geographiclib(lat1, lon1, lat2, lon2):
    ref = Geodesic.WGS84.Inverse(lat1, lon1, lat2, lon2)["s12"]
    a = (math.radians(lat1), math.radians(lon1))
    b = (math.radians(lat2), math.radians(lon2))
    try:
        ours = geodesic_distance(a, b)
    except GeodesicConvergenceError:
        assert abs(lat1 + lat2) < 1.0 and abs(abs(lon1 - lon2) - 180.0) < 1.0
        return
    assert ours == pytest.approx(ref, abs=1e-3)


def test_antipodal_needs_fallback():
    a, b = (0.0, 0.0), (0.0, math.pi)
    with pytest.raises(GeodesicConvergenceError):
        geodesic_distance(a, b)
    with pytest.warns(RuntimeWarning):
        d = geodesic_distance(a, b, fallback=True)
    assert d == pytest.approx(Geodesic.WGS84.Inverse(0, 0, 0, 180)["s12"], rel=5e-3)
