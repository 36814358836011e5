"""GNSS state-space model: dynamics, measurement prediction, covariances.

State layout (8 entries, interleaved per axis)::

    [x, vx, y, vy, z, vz, clock_offset, clock_drift]

Positions in ECEF meters, velocities in m/s, clock offset in meters (c * dt)
and clock drift in m/s. Measurement vectors interleave pseudorange and
pseudorange rate per visible satellite: ``(rho1, rhodot1, rho2, rhodot2, ...)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geo import unit_geometry_vector

STATE_DIM = 8
POS = np.array([0, 2, 4])
VEL = np.array([1, 3, 5])
CLOCK = 6
DRIFT = 7
NUM_SV = 32

# diag(0.05) prior covariance used to seed the Riccati recursion
DEFAULT_P0 = 0.05


@dataclass(frozen=True)
class SatelliteObservation:
    prn: int
    sat_position: np.ndarray
    sat_velocity: np.ndarray
    pseudorange: float
    pseudorange_rate: float
    cn0: float
    elevation: float
    range_sigma: float
    rate_sigma: float
    visible: bool = True


@dataclass
class Epoch:
    """Measurements of the visible satellites at one timestamp.

    Only visible satellites are stored (compact layout); the PRN array maps
    each row to its slot ``prn - 1`` of the fixed 32-slot constellation layout.
    Pseudoranges are assumed already corrected for satellite clock,
    atmosphere and relativistic effects.
    """

    timestamp: float
    prn: np.ndarray
    sat_pos: np.ndarray
    sat_vel: np.ndarray
    pseudorange: np.ndarray
    pseudorange_rate: np.ndarray
    cn0: np.ndarray
    elevation: np.ndarray
    range_sigma: np.ndarray
    rate_sigma: np.ndarray
    sampling_interval_to_next: float = float("nan")
    meta: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        self.prn = np.asarray(self.prn, dtype=int)
        m = self.prn.shape[0]
        self.sat_pos = np.asarray(self.sat_pos, dtype=float).reshape(m, 3)
        self.sat_vel = np.asarray(self.sat_vel, dtype=float).reshape(m, 3)
        for name in ("pseudorange", "pseudorange_rate", "cn0", "elevation", "range_sigma", "rate_sigma"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).reshape(m))

    @property
    def n_visible(self) -> int:
        return int(self.prn.shape[0])

    @classmethod
    def from_observations(cls, timestamp, observations, sampling_interval_to_next=float("nan")):
        obs = [o for o in observations if o.visible]
        return cls(
            timestamp=timestamp,
            prn=[o.prn for o in obs],
            sat_pos=np.array([o.sat_position for o in obs], dtype=float).reshape(-1, 3),
            sat_vel=np.array([o.sat_velocity for o in obs], dtype=float).reshape(-1, 3),
            pseudorange=[o.pseudorange for o in obs],
            pseudorange_rate=[o.pseudorange_rate for o in obs],
            cn0=[o.cn0 for o in obs],
            elevation=[o.elevation for o in obs],
            range_sigma=[o.range_sigma for o in obs],
            rate_sigma=[o.rate_sigma for o in obs],
            sampling_interval_to_next=sampling_interval_to_next,
        )

    def observations(self) -> list[SatelliteObservation]:
        return [
            SatelliteObservation(
                prn=int(self.prn[i]),
                sat_position=self.sat_pos[i].copy(),
                sat_velocity=self.sat_vel[i].copy(),
                pseudorange=float(self.pseudorange[i]),
                pseudorange_rate=float(self.pseudorange_rate[i]),
                cn0=float(self.cn0[i]),
                elevation=float(self.elevation[i]),
                range_sigma=float(self.range_sigma[i]),
                rate_sigma=float(self.rate_sigma[i]),
            )
            for i in range(self.n_visible)
        ]

    def subset(self, idx) -> "Epoch":
        idx = np.asarray(idx)
        return replace(
            self,
            prn=self.prn[idx],
            sat_pos=self.sat_pos[idx],
            sat_vel=self.sat_vel[idx],
            pseudorange=self.pseudorange[idx],
            pseudorange_rate=self.pseudorange_rate[idx],
            cn0=self.cn0[idx],
            elevation=self.elevation[idx],
            range_sigma=self.range_sigma[idx],
            rate_sigma=self.rate_sigma[idx],
            meta=dict(self.meta),
        )


@dataclass(frozen=True)
class NoiseModel:
    """White-acceleration spectral densities for the two-state blocks.

    ``q_pos`` applies to each spatial axis (scalar or 3 values); ``q_clock`` to
    the clock offset/drift pair. Units m^2/s^3.
    """

    q_pos: float | tuple = 1.0
    q_clock: float = 1.0

    def densities(self) -> np.ndarray:
        q = np.broadcast_to(np.asarray(self.q_pos, dtype=float), (3,))
        out = np.append(q, float(self.q_clock))
        if np.any(out <= 0):
            raise ValueError("spectral densities must be positive")
        return out


def state_vector(position=(0.0, 0.0, 0.0), velocity=(0.0, 0.0, 0.0), clock_offset=0.0, clock_drift=0.0):
    x = np.zeros(STATE_DIM)
    x[POS] = position
    x[VEL] = velocity
    x[CLOCK] = clock_offset
    x[DRIFT] = clock_drift
    return x


def dynamics_matrix(T: float) -> np.ndarray:
    if not T > 0:
        raise ValueError(f"sampling interval must be positive, got {T}")
    A = np.eye(STATE_DIM)
    A[[0, 2, 4, 6], [1, 3, 5, 7]] = T
    return A


def propagate(x, T):
    return dynamics_matrix(T) @ np.asarray(x, dtype=float)


def process_covariance(T: float, noise: NoiseModel) -> np.ndarray:
    if not T > 0:
        raise ValueError(f"sampling interval must be positive, got {T}")
    block = np.array([[T**3 / 3.0, T**2 / 2.0], [T**2 / 2.0, T]])
    Q = np.zeros((STATE_DIM, STATE_DIM))
    for i, q in enumerate(noise.densities()):
        Q[2 * i : 2 * i + 2, 2 * i : 2 * i + 2] = q * block
    return Q


def measurement_covariance(epoch: Epoch) -> np.ndarray:
    if np.any(epoch.range_sigma <= 0) or np.any(epoch.rate_sigma <= 0):
        raise ValueError("measurement sigmas must be positive")
    var = np.empty(2 * epoch.n_visible)
    var[0::2] = epoch.range_sigma**2
    var[1::2] = epoch.rate_sigma**2
    return np.diag(var)


def predict_measurements(x, epoch: Epoch, linearization=None) -> np.ndarray:
    """Predicted interleaved ``(rho, rhodot)`` vector for state ``x``.

    The geometry vector used in the rate prediction is evaluated at
    ``linearization`` (a state vector) when given, otherwise at ``x`` itself.
    """
    if epoch.n_visible == 0:
        raise ValueError("no visible satellites")
    x = np.asarray(x, dtype=float)
    lin = x if linearization is None else np.asarray(linearization, dtype=float)
    _, rng = unit_geometry_vector(x[POS], epoch.sat_pos)
    g, _ = unit_geometry_vector(lin[POS], epoch.sat_pos)
    out = np.empty(2 * epoch.n_visible)
    out[0::2] = rng + x[CLOCK]
    out[1::2] = np.einsum("ij,ij->i", x[VEL] - epoch.sat_vel, g) + x[DRIFT]
    return out


def jacobian_from_geometry(g: np.ndarray) -> np.ndarray:
    """Interleaved range/rate Jacobian rows from unit geometry vectors ``(M, 3)``."""
    m = g.shape[0]
    C = np.zeros((2 * m, STATE_DIM))
    C[0::2, 0] = C[1::2, 1] = g[:, 0]
    C[0::2, 2] = C[1::2, 3] = g[:, 1]
    C[0::2, 4] = C[1::2, 5] = g[:, 2]
    C[0::2, CLOCK] = 1.0
    C[1::2, DRIFT] = 1.0
    return C


def measurement_jacobian(x_lin, epoch: Epoch) -> np.ndarray:
    if epoch.n_visible == 0:
        raise ValueError("no visible satellites")
    g, _ = unit_geometry_vector(np.asarray(x_lin, dtype=float)[POS], epoch.sat_pos)
    return jacobian_from_geometry(g)


def riccati_update(P, A, C, Q, R) -> np.ndarray:
    """One step of the discrete filtering Riccati recursion.

    ``P' = Q + A [P - P C^T (C P C^T + R)^-1 C P] A^T``, symmetrized.
    """
    P = np.asarray(P, dtype=float)
    A = np.atleast_2d(A)
    C = np.atleast_2d(C)
    S = C @ P @ C.T + np.atleast_2d(R)
    PCt = P @ C.T
    try:
        gain = np.linalg.solve(S, PCt.T).T
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("singular innovation covariance in Riccati update") from exc
    P_post = P - gain @ PCt.T
    out = np.atleast_2d(Q) + A @ P_post @ A.T
    return 0.5 * (out + out.T)
