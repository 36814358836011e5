"""WGS-84 frames, conversions and geodesic distance.

Positions are plain ``numpy`` arrays. ECEF points are ``(..., 3)`` arrays in
meters; geodetic points are ``(..., 3)`` arrays of ``(lat, lon, alt)`` with
angles in radians and altitude in meters.
"""
from __future__ import annotations

import math
import warnings

import numpy as np

WGS84_A = 6378137.0
WGS84_F = 1.0 / 298.257223563
WGS84_B = WGS84_A * (1.0 - WGS84_F)
WGS84_E2 = WGS84_F * (2.0 - WGS84_F)


class GeodesicConvergenceError(ArithmeticError):
    """Vincenty's inverse iteration did not converge (near-antipodal points)."""


def lla_to_ecef(lla):
    lla = np.asarray(lla, dtype=float)
    lat, lon, alt = lla[..., 0], lla[..., 1], lla[..., 2]
    sin_lat = np.sin(lat)
    cos_lat = np.cos(lat)
    n = WGS84_A / np.sqrt(1.0 - WGS84_E2 * sin_lat**2)
    x = (n + alt) * cos_lat * np.cos(lon)
    y = (n + alt) * cos_lat * np.sin(lon)
    z = (n * (1.0 - WGS84_E2) + alt) * sin_lat
    return np.stack([x, y, z], axis=-1)


def ecef_to_lla(p):
    """Closed-form ECEF to geodetic conversion (Vermeille, 2004).

    Non-iterative, so the map is smooth away from the Earth's center and can be
    differentiated exactly (see :func:`ecef_to_lla_jacobian`). Points on the
    rotation axis get longitude 0.
    """
    p = np.asarray(p, dtype=float)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    a2 = WGS84_A**2
    e4 = WGS84_E2**2
    rho2 = x**2 + y**2
    rho = np.sqrt(rho2)

    pp = rho2 / a2
    q = (1.0 - WGS84_E2) * z**2 / a2
    r = (pp + q - e4) / 6.0
    s = e4 * pp * q / (4.0 * r**3)
    t = np.cbrt(1.0 + s + np.sqrt(s * (2.0 + s)))
    u = r * (1.0 + t + 1.0 / t)
    v = np.sqrt(u**2 + e4 * q)
    w = WGS84_E2 * (u + v - q) / (2.0 * v)
    k = np.sqrt(u + v + w**2) - w
    d = k * rho / (k + WGS84_E2)
    dz = np.sqrt(d**2 + z**2)

    lat = 2.0 * np.arctan2(z, d + dz)
    lon = np.arctan2(y, x)
    alt = (k + WGS84_E2 - 1.0) / k * dz
    return np.stack([lat, lon, alt], axis=-1)


def lla_to_ecef_jacobian(lla):
    """d(x, y, z) / d(lat, lon, alt), shape ``(..., 3, 3)``."""
    lla = np.asarray(lla, dtype=float)
    lat, lon, alt = lla[..., 0], lla[..., 1], lla[..., 2]
    sl, cl = np.sin(lat), np.cos(lat)
    so, co = np.sin(lon), np.cos(lon)
    w2 = 1.0 - WGS84_E2 * sl**2
    n = WGS84_A / np.sqrt(w2)
    m = WGS84_A * (1.0 - WGS84_E2) / w2**1.5  # meridian radius: d(arc)/d(lat)

    jac = np.empty(lla.shape[:-1] + (3, 3))
    jac[..., 0, 0] = -(m + alt) * sl * co
    jac[..., 1, 0] = -(m + alt) * sl * so
    jac[..., 2, 0] = (m + alt) * cl
    jac[..., 0, 1] = -(n + alt) * cl * so
    jac[..., 1, 1] = (n + alt) * cl * co
    jac[..., 2, 1] = 0.0
    jac[..., 0, 2] = cl * co
    jac[..., 1, 2] = cl * so
    jac[..., 2, 2] = sl
    return jac


def ecef_to_lla_jacobian(p):
    """d(lat, lon, alt) / d(x, y, z) at ECEF point(s) ``p``.

    Computed as the inverse of the forward Jacobian, which is exact because the
    closed-form conversion is an exact inverse of :func:`lla_to_ecef`.
    Singular on the polar axis.
    """
    return np.linalg.inv(lla_to_ecef_jacobian(ecef_to_lla(p)))


def ecef_to_ned_matrix(origin):
    """Rotation taking ECEF vectors to the local north-east-down frame."""
    lat, lon = origin[0], origin[1]
    sl, cl = math.sin(lat), math.cos(lat)
    so, co = math.sin(lon), math.cos(lon)
    return np.array(
        [
            [-sl * co, -sl * so, cl],
            [-so, co, 0.0],
            [-cl * co, -cl * so, -sl],
        ]
    )


def ecef_vector_to_ned(v, origin):
    """Rotate ECEF vector(s) ``v`` into the NED frame at geodetic ``origin``."""
    return np.asarray(v, dtype=float) @ ecef_to_ned_matrix(origin).T


def ecef_to_enu_matrix(origin):
    r = ecef_to_ned_matrix(origin)
    return np.stack([r[1], r[0], -r[2]])


def unit_geometry_vector(user, sat):
    """Unit vector(s) pointing from satellite(s) to the user, and the range.

    Works on broadcastable ``(..., 3)`` arrays. Raises ``ValueError`` if any
    user/satellite pair coincides.
    """
    diff = np.asarray(user, dtype=float) - np.asarray(sat, dtype=float)
    rng = np.linalg.norm(diff, axis=-1)
    if np.any(rng == 0.0):
        raise ValueError("user and satellite positions coincide")
    return diff / rng[..., None], rng


def elevation_azimuth(user, sat):
    """Elevation and azimuth (radians) of satellites seen from ``user`` (ECEF)."""
    lla = ecef_to_lla(user)
    los = np.asarray(sat, dtype=float) - np.asarray(user, dtype=float)
    los = los / np.linalg.norm(los, axis=-1, keepdims=True)
    ned = ecef_vector_to_ned(los, lla)
    el = np.arcsin(np.clip(-ned[..., 2], -1.0, 1.0))
    az = np.mod(np.arctan2(ned[..., 1], ned[..., 0]), 2.0 * np.pi)
    return el, az


def _vincenty_inverse(lat1, lon1, lat2, lon2, tol=1e-12, max_iter=200):
    a, b, f = WGS84_A, WGS84_B, WGS84_F
    L = lon2 - lon1
    U1 = math.atan((1 - f) * math.tan(lat1))
    U2 = math.atan((1 - f) * math.tan(lat2))
    sinU1, cosU1 = math.sin(U1), math.cos(U1)
    sinU2, cosU2 = math.sin(U2), math.cos(U2)

    lam = L
    for _ in range(max_iter):
        sin_lam, cos_lam = math.sin(lam), math.cos(lam)
        sin_sigma = math.hypot(cosU2 * sin_lam, cosU1 * sinU2 - sinU1 * cosU2 * cos_lam)
        if sin_sigma == 0.0:
            return 0.0  # coincident points
        cos_sigma = sinU1 * sinU2 + cosU1 * cosU2 * cos_lam
        sigma = math.atan2(sin_sigma, cos_sigma)
        sin_alpha = cosU1 * cosU2 * sin_lam / sin_sigma
        cos2_alpha = 1.0 - sin_alpha**2
        cos_2sm = cos_sigma - 2.0 * sinU1 * sinU2 / cos2_alpha if cos2_alpha != 0.0 else 0.0
        C = f / 16.0 * cos2_alpha * (4.0 + f * (4.0 - 3.0 * cos2_alpha))
        lam_prev = lam
        lam = L + (1.0 - C) * f * sin_alpha * (
            sigma + C * sin_sigma * (cos_2sm + C * cos_sigma * (-1.0 + 2.0 * cos_2sm**2))
        )
        if abs(lam - lam_prev) < tol:
            break
    else:
        raise GeodesicConvergenceError(
            f"Vincenty inverse failed to converge for ({lat1}, {lon1}) -> ({lat2}, {lon2})"
        )

    u2 = cos2_alpha * (a**2 - b**2) / b**2
    A = 1.0 + u2 / 16384.0 * (4096.0 + u2 * (-768.0 + u2 * (320.0 - 175.0 * u2)))
    B = u2 / 1024.0 * (256.0 + u2 * (-128.0 + u2 * (74.0 - 47.0 * u2)))
    d_sigma = B * sin_sigma * (
        cos_2sm
        + B / 4.0 * (
            cos_sigma * (-1.0 + 2.0 * cos_2sm**2)
            - B / 6.0 * cos_2sm * (-3.0 + 4.0 * sin_sigma**2) * (-3.0 + 4.0 * cos_2sm**2)
        )
    )
    return b * A * (sigma - d_sigma)


def _spherical_fallback(lat1, lon1, lat2, lon2):
    # haversine on the mean-radius sphere
    r = (2.0 * WGS84_A + WGS84_B) / 3.0
    h = math.sin((lat2 - lat1) / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2
    return 2.0 * r * math.asin(min(1.0, math.sqrt(h)))


def geodesic_distance(a, b, fallback=False):
    """Ellipsoidal surface distance (m) between two geodetic points.

    Uses Vincenty's inverse formula on WGS-84; altitudes are ignored. For
    near-antipodal pairs the iteration may not converge, which raises
    :class:`GeodesicConvergenceError` unless ``fallback`` is true, in which
    case a spherical haversine distance is returned and a ``RuntimeWarning``
    is emitted.
    """
    lat1, lon1 = float(a[0]), float(a[1])
    lat2, lon2 = float(b[0]), float(b[1])
    try:
        return _vincenty_inverse(lat1, lon1, lat2, lon2)
    except GeodesicConvergenceError:
        if not fallback:
            raise
        warnings.warn("Vincenty did not converge; using spherical approximation", RuntimeWarning)
        return _spherical_fallback(lat1, lon1, lat2, lon2)
