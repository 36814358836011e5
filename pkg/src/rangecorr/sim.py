"""Synthetic GNSS scenarios with repeatable, site-dependent ranging errors.

The constellation is a simplified set of circular orbits whose ground tracks
repeat every simulated day (86400 s), so a scenario regenerated for another
day sees identical satellite geometry at the same time of day. Ranging biases
come from a deterministic :class:`ErrorField`, which makes them repeat across
days while the white measurement noise does not.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .edf import RoutePolyline, interpolate_route
from .geo import ecef_to_enu_matrix, elevation_azimuth, lla_to_ecef, unit_geometry_vector
from .model import Epoch, state_vector

DAY = 86400.0
ORBIT_RADIUS = 26_560_000.0
INCLINATION = math.radians(55.0)
N_PLANES = 6
SATS_PER_PLANE = 5
# two revolutions per simulated day, Earth turns once per day
MEAN_MOTION = 2.0 * (2.0 * math.pi / DAY)
EARTH_RATE = 2.0 * math.pi / DAY
ROUTE_SPACING = 0.5


def constellation_at(t, seed=0):
    """Satellite PRNs, ECEF positions and velocities at time ``t`` (s).

    Returns ``(prn, pos, vel)`` with shapes ``(S,)``, ``(S, 3)``, ``(S, 3)``.
    """
    rng = np.random.default_rng([seed, 7])
    raan0 = rng.uniform(0, 2 * math.pi)
    phase0 = rng.uniform(0, 2 * math.pi, N_PLANES)

    planes = np.repeat(np.arange(N_PLANES), SATS_PER_PLANE)
    slots = np.tile(np.arange(SATS_PER_PLANE), N_PLANES)
    raan = raan0 + planes * (2 * math.pi / N_PLANES)
    u = phase0[planes] + slots * (2 * math.pi / SATS_PER_PLANE) + MEAN_MOTION * t

    cu, su = np.cos(u), np.sin(u)
    co, so = np.cos(raan), np.sin(raan)
    ci, si = math.cos(INCLINATION), math.sin(INCLINATION)
    r = ORBIT_RADIUS
    pos_i = r * np.stack([co * cu - so * su * ci, so * cu + co * su * ci, su * si], axis=-1)
    vel_i = r * MEAN_MOTION * np.stack([-co * su - so * cu * ci, -so * su + co * cu * ci, cu * si], axis=-1)

    th = EARTH_RATE * t
    ct, st = math.cos(th), math.sin(th)
    rot = np.array([[ct, st, 0.0], [-st, ct, 0.0], [0.0, 0.0, 1.0]])
    pos = pos_i @ rot.T
    vel = vel_i @ rot.T - np.cross([0.0, 0.0, EARTH_RATE], pos)
    prn = np.arange(1, N_PLANES * SATS_PER_PLANE + 1)
    return prn, pos, vel


@dataclass
class ErrorField:
    """Deterministic multipath/NLOS-like ranging bias.

    Bias is a sum of Gaussian bumps over the sky (azimuth/elevation), each
    modulated by a spatial pattern over the user's local east/north position,
    plus a per-PRN low-elevation term. The total is softly limited to
    ``max_bias`` meters and is always non-negative.
    """

    seed: int = 0
    max_bias: float = 50.0
    n_bumps: int = 14
    wavelength: float = 400.0
    prn_scale: float = 8.0
    scale: float = 1.0

    def __post_init__(self):
        rng = np.random.default_rng([self.seed, 11])
        k = self.n_bumps
        self._az = rng.uniform(0, 2 * math.pi, k)
        self._el = np.radians(rng.uniform(12, 65, k))
        self._width = np.radians(rng.uniform(10, 22, k))
        self._amp = rng.uniform(12, 40, k)
        heading = rng.uniform(0, 2 * math.pi, k)
        self._dir = np.stack([np.cos(heading), np.sin(heading)], axis=-1)
        self._phase = rng.uniform(0, 2 * math.pi, k)
        self._prn_amp = rng.uniform(0, self.prn_scale, 33)

    def bias(self, prn, el, az, enu):
        """Bias (m) for satellites ``prn`` at ``el``/``az`` seen from ``enu``."""
        if self.scale == 0.0:
            return np.zeros(np.shape(prn))
        el = np.asarray(el)[:, None]
        az = np.asarray(az)[:, None]
        # angular distance on the sky sphere
        cos_d = np.sin(el) * np.sin(self._el) + np.cos(el) * np.cos(self._el) * np.cos(az - self._az)
        ang = np.arccos(np.clip(cos_d, -1.0, 1.0))
        bumps = np.exp(-0.5 * (ang / self._width) ** 2)
        pos = np.asarray(enu, dtype=float)[:2]
        spatial = 0.6 + 0.4 * np.cos(2 * math.pi * (self._dir @ pos) / self.wavelength + self._phase)
        raw = (bumps * self._amp * spatial).sum(axis=1)
        raw = raw + self._prn_amp[np.asarray(prn)] * (1.0 - np.sin(el[:, 0]))
        return self.scale * self.max_bias * np.tanh(raw / self.max_bias)


@dataclass
class ScenarioConfig:
    duration: float = 300.0
    rate: float = 1.0
    trajectory: str = "static"  # static | constant_velocity | route
    origin: tuple = (math.radians(37.4), math.radians(-122.1), 10.0)
    velocity_enu: tuple = (0.0, 0.0, 0.0)
    route: RoutePolyline | None = None
    speed: float = 2.0
    sigma_range: float = 5.0
    sigma_rate: float = 0.5
    clock_offset: float = 3.0e4
    clock_drift: float = 0.5
    bias_scale: float = 1.0
    max_bias: float = 50.0
    elevation_mask_deg: float = 10.0
    start_time: float = 36000.0
    day: int = 0
    seed: int = 0

    def __post_init__(self):
        if not self.duration > 0 or not self.rate > 0:
            raise ValueError("duration and rate must be positive")
        if self.sigma_range < 0 or self.sigma_rate < 0:
            raise ValueError("sigmas must be non-negative")
        if self.trajectory not in ("static", "constant_velocity", "route"):
            raise ValueError(f"unknown trajectory kind {self.trajectory!r}")
        if self.trajectory == "route" and self.route is None:
            raise ValueError("route trajectory needs a RoutePolyline")

    def error_field(self) -> ErrorField:
        return ErrorField(seed=self.seed, max_bias=self.max_bias, scale=self.bias_scale)


@dataclass
class TruthRecord:
    timestamp: float
    state: np.ndarray
    bias: np.ndarray  # aligned with the epoch's PRN array
    enu: np.ndarray


@dataclass
class Trace:
    epochs: list
    truth: list
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.epochs)

    def truth_states(self) -> np.ndarray:
        return np.array([t.state for t in self.truth])

    def true_corrections(self) -> list:
        return [t.bias.copy() for t in self.truth]

    def slice(self, start, stop) -> "Trace":
        return Trace(self.epochs[start:stop], self.truth[start:stop], dict(self.metadata))


def route_enu(route: RoutePolyline, origin) -> np.ndarray:
    """Route waypoints in the local ENU plane at ``origin`` (east, north)."""
    ll = np.column_stack([route.points, np.full(len(route.points), origin[2])])
    p = lla_to_ecef(ll) - lla_to_ecef(origin)
    return (p @ ecef_to_enu_matrix(origin).T)[:, :2]


def _route_motion(pts: np.ndarray, s: np.ndarray, speed: float):
    """Position and velocity after travelling arc length ``s`` (ping-pong)."""
    seg = np.diff(pts, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = cum[-1]
    s = np.mod(s, 2 * total)
    forward = s <= total
    s_eff = np.where(forward, s, 2 * total - s)
    idx = np.clip(np.searchsorted(cum, s_eff, side="right") - 1, 0, len(seg) - 1)
    frac = (s_eff - cum[idx]) / seg_len[idx]
    pos = pts[idx] + frac[:, None] * seg[idx]
    direction = seg[idx] / seg_len[idx, None]
    vel = np.where(forward[:, None], 1.0, -1.0) * speed * direction
    return pos, vel


def user_motion(cfg: ScenarioConfig, t_rel: np.ndarray):
    """Truth ENU position/velocity (east, north, up) at relative times."""
    n = len(t_rel)
    enu = np.zeros((n, 3))
    venu = np.zeros((n, 3))
    if cfg.trajectory == "constant_velocity":
        venu[:] = cfg.velocity_enu
        enu = t_rel[:, None] * venu
    elif cfg.trajectory == "route":
        # follow the same spline-densified path the cost maps are built from
        pts = route_enu(interpolate_route(cfg.route, ROUTE_SPACING), cfg.origin)
        pos, vel = _route_motion(pts, cfg.speed * t_rel, cfg.speed)
        enu[:, :2] = pos
        venu[:, :2] = vel
    return enu, venu


def synthesize_trace(cfg: ScenarioConfig) -> Trace:
    """Generate epochs and truth for one scenario/day."""
    n = int(round(cfg.duration * cfg.rate))
    dt = 1.0 / cfg.rate
    t_rel = np.arange(n) * dt
    t_abs = cfg.day * DAY + cfg.start_time + t_rel

    origin_ecef = lla_to_ecef(cfg.origin)
    enu2ecef = ecef_to_enu_matrix(cfg.origin).T
    enu, venu = user_motion(cfg, t_rel)
    pos = origin_ecef + enu @ enu2ecef.T
    vel = venu @ enu2ecef.T

    field_ = cfg.error_field()
    noise_rng = np.random.default_rng([cfg.seed, cfg.day, 3])
    mask = math.radians(cfg.elevation_mask_deg)

    epochs, truth = [], []
    warnings = []
    for i in range(n):
        prn, spos, svel = constellation_at(t_abs[i], cfg.seed)
        el, az = elevation_azimuth(pos[i], spos)
        vis = el >= mask
        prn, spos, svel, el, az = prn[vis], spos[vis], svel[vis], el[vis], az[vis]
        m = len(prn)
        if m < 4:
            warnings.append(f"epoch {i} at t={t_abs[i]:.1f}: only {m} visible satellites")

        b = cfg.clock_offset + cfg.clock_drift * t_rel[i]
        d = cfg.clock_drift
        g, rng = unit_geometry_vector(pos[i], spos)
        bias = field_.bias(prn, el, az, enu[i])
        pr = rng + b + bias + cfg.sigma_range * noise_rng.standard_normal(m)
        rr = np.einsum("ij,ij->i", vel[i] - svel, g) + d + cfg.sigma_rate * noise_rng.standard_normal(m)
        cn0 = np.clip(28.0 + 18.0 * np.sin(el) - 0.25 * bias + noise_rng.normal(0, 1.0, m), 10.0, 55.0)

        epochs.append(
            Epoch(
                timestamp=float(t_abs[i]),
                prn=prn,
                sat_pos=spos,
                sat_vel=svel,
                pseudorange=pr,
                pseudorange_rate=rr,
                cn0=cn0,
                elevation=el,
                range_sigma=np.full(m, max(cfg.sigma_range, 1e-3)),
                rate_sigma=np.full(m, max(cfg.sigma_rate, 1e-4)),
                sampling_interval_to_next=dt if i + 1 < n else float("nan"),
            )
        )
        truth.append(
            TruthRecord(
                timestamp=float(t_abs[i]),
                state=state_vector(pos[i], vel[i], b, d),
                bias=bias,
                enu=enu[i].copy(),
            )
        )
    meta = {"day": cfg.day, "seed": cfg.seed, "trajectory": cfg.trajectory, "warnings": warnings}
    return Trace(epochs, truth, meta)


def synthesize_days(cfg: ScenarioConfig, n_days: int) -> list[Trace]:
    """The same scenario regenerated on ``n_days`` consecutive days."""
    from dataclasses import replace

    return [synthesize_trace(replace(cfg, day=cfg.day + k)) for k in range(n_days)]


def split_days(traces) -> tuple[list[Trace], Trace]:
    """Use all but the last day for training and the last day for testing."""
    traces = list(traces)
    if len(traces) < 2:
        raise ValueError("need at least two days to split")
    return traces[:-1], traces[-1]
