"""Localization engines: WLS, EKF, filtering MHE and optimization MHE.

The moving-horizon problem over epochs ``0..N`` minimizes

    ||x_0 - x_prior||^2_{P^-1}                      (arrival, optional)
  + sum_j ||x_{j+1} - A_j x_j||^2_{Q_j^-1}           (transitions)
  + sum_j ||y_j - h_j(x_j)||^2_{R_j^-1}              (measurements)

where ``y_j`` carries the pseudoranges minus the supplied corrections. Every
term is written as a residual multiplied by the inverse Cholesky factor of its
covariance, and Gauss-Newton solves the resulting block-tridiagonal normal
equations with a banded Cholesky factorization.

Range rows are evaluated exactly at the current iterate. Rate rows use the
geometry vector frozen at the problem's linearization trajectory (the warm
start unless given), which keeps the rate model linear in the state.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve_banded, cholesky_banded

from .geo import unit_geometry_vector
from .model import (
    CLOCK,
    DEFAULT_P0,
    DRIFT,
    POS,
    STATE_DIM,
    VEL,
    Epoch,
    NoiseModel,
    dynamics_matrix,
    jacobian_from_geometry,
    measurement_covariance,
    predict_measurements,
    process_covariance,
    riccati_update,
)

GAP_THRESHOLD = 10.0
ENGINES = ("wls", "ekf", "mhe_f", "mhe_ac", "mhe_noac")


class EstimationError(RuntimeError):
    """An estimator could not produce a fix."""


class SingularSystemError(EstimationError, np.linalg.LinAlgError):
    """Normal equations are not positive definite."""


def _corrections_for(epoch: Epoch, corrections) -> np.ndarray:
    if corrections is None:
        return np.zeros(epoch.n_visible)
    c = np.asarray(corrections, dtype=float)
    if c.shape != (epoch.n_visible,):
        raise ValueError(f"corrections shape {c.shape} does not match {epoch.n_visible} visible satellites")
    return c


# ---------------------------------------------------------------------------
# single-epoch weighted least squares


def wls_solve(epoch: Epoch, corrections=None, init=None, max_iter: int = 20, tol: float = 1e-4) -> np.ndarray:
    """Position/clock by iterated WLS on corrected pseudoranges, then velocity/drift.

    ``init`` is an ECEF position (defaults to the Earth's center).
    """
    m = epoch.n_visible
    if m < 4:
        raise EstimationError(f"WLS needs at least 4 satellites, got {m}")
    y = epoch.pseudorange - _corrections_for(epoch, corrections)
    w = 1.0 / epoch.range_sigma
    pos = np.zeros(3) if init is None else np.asarray(init, dtype=float).copy()
    clock = 0.0
    for _ in range(max_iter):
        diff = pos - epoch.sat_pos
        rng = np.linalg.norm(diff, axis=1)
        g = diff / rng[:, None]
        H = np.column_stack([g, np.ones(m)]) * w[:, None]
        r = (y - rng - clock) * w
        delta, *_ = np.linalg.lstsq(H, r, rcond=None)
        if not np.all(np.isfinite(delta)) or np.linalg.norm(delta[:3]) > 1e7:
            raise EstimationError("WLS diverged")
        pos += delta[:3]
        clock += delta[3]
        if np.linalg.norm(delta[:3]) < tol:
            break

    g, _ = unit_geometry_vector(pos, epoch.sat_pos)
    wd = 1.0 / epoch.rate_sigma
    Hd = np.column_stack([g, np.ones(m)]) * wd[:, None]
    rd = (epoch.pseudorange_rate + np.einsum("ij,ij->i", epoch.sat_vel, g)) * wd
    vel_drift, *_ = np.linalg.lstsq(Hd, rd, rcond=None)

    x = np.zeros(STATE_DIM)
    x[POS] = pos
    x[CLOCK] = clock
    x[VEL] = vel_drift[:3]
    x[DRIFT] = vel_drift[3]
    return x


def wls_residuals(epoch: Epoch, state, corrections=None) -> np.ndarray:
    """Pseudorange residuals ``y - h(state)`` after a WLS fit."""
    y = epoch.pseudorange - _corrections_for(epoch, corrections)
    _, rng = unit_geometry_vector(np.asarray(state)[POS], epoch.sat_pos)
    return y - rng - state[CLOCK]


# ---------------------------------------------------------------------------
# horizon problem and residuals


@dataclass
class HorizonProblem:
    """An ``N+1`` epoch window ready for Gauss-Newton.

    ``corrections`` holds one array per epoch aligned with that epoch's PRNs
    (``None`` means zero). ``linearization`` fixes the trajectory used for the
    rate-row geometry; when ``linear`` is true range rows are also linearized
    there, making the whole problem affine.
    """

    epochs: list
    warm_start: np.ndarray
    noise: NoiseModel = field(default_factory=NoiseModel)
    corrections: list | None = None
    prior_state: np.ndarray | None = None
    prior_covariance: np.ndarray | None = None
    include_arrival_cost: bool = True
    linearization: np.ndarray | None = None
    linear: bool = False

    def __post_init__(self):
        self.warm_start = np.asarray(self.warm_start, dtype=float).reshape(len(self.epochs), STATE_DIM)
        if len(self.epochs) == 0:
            raise ValueError("empty horizon")
        if self.corrections is None:
            self.corrections = [None] * len(self.epochs)
        if len(self.corrections) != len(self.epochs):
            raise ValueError("one correction array per epoch required")
        self.corrections = [_corrections_for(e, c) for e, c in zip(self.epochs, self.corrections)]
        if self.include_arrival_cost and (self.prior_state is None or self.prior_covariance is None):
            raise ValueError("arrival cost needs prior_state and prior_covariance")
        if not np.all(np.isfinite(self.warm_start)):
            raise ValueError("warm start must be finite")

    @property
    def horizon(self) -> int:
        return len(self.epochs) - 1

    def intervals(self) -> np.ndarray:
        t = np.array([e.timestamp for e in self.epochs])
        return np.diff(t)

    def compile(self) -> "CompiledHorizon":
        return CompiledHorizon(self)


def _inv_chol(cov: np.ndarray, what: str) -> np.ndarray:
    """Square-root information weight ``W`` with ``W^T W = cov^-1``."""
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"{what} covariance is not positive definite") from exc
    return np.linalg.inv(L)


# lower-banded storage indices for a block-tridiagonal matrix of 8x8 blocks
_A, _B = np.tril_indices(STATE_DIM)
_OA, _OB = np.divmod(np.arange(STATE_DIM * STATE_DIM), STATE_DIM)
_BANDS = 2 * STATE_DIM


class CompiledHorizon:
    """Flattened, vectorized form of a :class:`HorizonProblem`."""

    def __init__(self, p: HorizonProblem):
        self.problem = p
        n = len(p.epochs)
        self.n = n
        counts = [e.n_visible for e in p.epochs]
        self.counts = np.array(counts)
        self.ep = np.repeat(np.arange(n), counts)
        self.sat_pos = np.concatenate([e.sat_pos for e in p.epochs]).reshape(-1, 3)
        self.sat_vel = np.concatenate([e.sat_vel for e in p.epochs]).reshape(-1, 3)
        rho = np.concatenate([e.pseudorange for e in p.epochs])
        self.corr = np.concatenate(p.corrections) if self.ep.size else np.zeros(0)
        self.y_range = rho - self.corr
        self.y_rate = np.concatenate([e.pseudorange_rate for e in p.epochs])
        sr = np.concatenate([e.range_sigma for e in p.epochs])
        sd = np.concatenate([e.rate_sigma for e in p.epochs])
        if np.any(sr <= 0) or np.any(sd <= 0):
            raise ValueError("measurement covariance is not positive definite")
        self.s_r = 1.0 / sr
        self.s_d = 1.0 / sd

        lin = p.warm_start if p.linearization is None else np.asarray(p.linearization, dtype=float)
        self.lin_pos = lin[self.ep][:, POS]
        if self.ep.size:
            self.g_lin, self.r_lin = unit_geometry_vector(self.lin_pos, self.sat_pos)
        else:
            self.g_lin, self.r_lin = np.zeros((0, 3)), np.zeros(0)
        self.linear = p.linear

        dts = p.intervals()
        if np.any(dts <= 0):
            raise ValueError("epoch timestamps must be strictly increasing")
        self.A = np.array([dynamics_matrix(T) for T in dts]).reshape(-1, STATE_DIM, STATE_DIM)
        self.Wq = np.array([_inv_chol(process_covariance(T, p.noise), "process") for T in dts]).reshape(
            -1, STATE_DIM, STATE_DIM
        )
        self.Mq = np.einsum("nki,nkj->nij", self.Wq, self.Wq)
        self.MqA = self.Mq @ self.A
        self.AtMqA = np.einsum("nki,nkj->nij", self.A, self.MqA)

        if p.include_arrival_cost:
            self.prior = np.asarray(p.prior_state, dtype=float)
            self.Wp = _inv_chol(np.asarray(p.prior_covariance, dtype=float), "prior")
            self.Mp = self.Wp.T @ self.Wp
        else:
            self.prior = None

    def residuals(self, X: np.ndarray) -> "ResidualStack":
        X = np.asarray(X, dtype=float)
        xs = X[self.ep]
        pos = xs[:, POS]
        if self.linear:
            g = self.g_lin
            rng = self.r_lin + np.einsum("ij,ij->i", g, pos - self.lin_pos)
        elif self.ep.size:
            g, rng = unit_geometry_vector(pos, self.sat_pos)
        else:
            g, rng = np.zeros((0, 3)), np.zeros(0)
        rr = self.s_r * (self.y_range - rng - xs[:, CLOCK])
        rd = self.s_d * (self.y_rate - np.einsum("ij,ij->i", xs[:, VEL] - self.sat_vel, self.g_lin) - xs[:, DRIFT])
        pred = np.einsum("nij,nj->ni", self.A, X[:-1])
        trans = np.einsum("nij,nj->ni", self.Wq, X[1:] - pred)
        arr = None if self.prior is None else self.Wp @ (X[0] - self.prior)
        return ResidualStack(self, X, arr, trans, rr, rd, g)


@dataclass
class ResidualStack:
    """Square-root weighted residual blocks at one trajectory."""

    horizon: CompiledHorizon
    trajectory: np.ndarray
    arrival: np.ndarray | None
    transition: np.ndarray  # (N, 8)
    range_res: np.ndarray  # (R,) weighted pseudorange residuals
    rate_res: np.ndarray  # (R,) weighted rate residuals
    range_geometry: np.ndarray  # (R, 3) geometry vectors of range rows

    def objective(self) -> float:
        total = float(np.sum(self.transition**2) + np.sum(self.range_res**2) + np.sum(self.rate_res**2))
        if self.arrival is not None:
            total += float(self.arrival @ self.arrival)
        return total

    def blocks(self):
        """``(kind, residual, weight)`` tuples in order: arrival, transitions, measurements."""
        h = self.horizon
        out = []
        if self.arrival is not None:
            out.append(("arrival", self.arrival, h.Wp))
        for j in range(h.n - 1):
            out.append(("transition", self.transition[j], h.Wq[j]))
        for j in range(h.n):
            sel = h.ep == j
            res = np.empty(2 * int(sel.sum()))
            res[0::2] = self.range_res[sel]
            res[1::2] = self.rate_res[sel]
            w = np.empty_like(res)
            w[0::2] = h.s_r[sel]
            w[1::2] = h.s_d[sel]
            out.append(("measurement", res, np.diag(w)))
        return out

    def _measurement_rows(self):
        h = self.horizon
        R = h.ep.size
        cr = np.zeros((R, STATE_DIM))
        cr[:, POS] = self.range_geometry
        cr[:, CLOCK] = 1.0
        cd = np.zeros((R, STATE_DIM))
        cd[:, VEL] = h.g_lin
        cd[:, DRIFT] = 1.0
        return cr, cd

    def normal_equations(self):
        """Banded GN Hessian (lower form) and gradient ``J^T r``."""
        h = self.horizon
        n = h.n
        D = np.zeros((n, STATE_DIM, STATE_DIM))
        b = np.zeros((n, STATE_DIM))

        cr, cd = self._measurement_rows()
        wr = (h.s_r**2)[:, None, None] * (cr[:, :, None] * cr[:, None, :])
        wd = (h.s_d**2)[:, None, None] * (cd[:, :, None] * cd[:, None, :])
        np.add.at(D, h.ep, wr + wd)
        np.add.at(b, h.ep, -(h.s_r * self.range_res)[:, None] * cr - (h.s_d * self.rate_res)[:, None] * cd)

        off = np.zeros((max(n - 1, 0), STATE_DIM, STATE_DIM))
        if n > 1:
            D[1:] += h.Mq
            D[:-1] += h.AtMqA
            off = -h.MqA
            wt = np.einsum("nki,nk->ni", h.Wq, self.transition)
            b[1:] += wt
            b[:-1] -= np.einsum("nki,nk->ni", h.A, wt)
        if self.arrival is not None:
            D[0] += h.Mp
            b[0] += h.Wp.T @ self.arrival

        ab = np.zeros((_BANDS, n * STATE_DIM))
        cols = STATE_DIM * np.arange(n)[:, None]
        ab[(_A - _B)[None, :], cols + _B[None, :]] = D[:, _A, _B]
        if n > 1:
            ocols = STATE_DIM * np.arange(n - 1)[:, None]
            ab[(STATE_DIM + _OA - _OB)[None, :], ocols + _OB[None, :]] = off[:, _OA, _OB]
        return ab, b.reshape(-1)

    def factorize(self):
        ab, grad = self.normal_equations()
        try:
            cb = cholesky_banded(ab, lower=True)
        except np.linalg.LinAlgError as exc:
            counts = self.horizon.counts.tolist()
            diag_min = float(ab[0].min())
            raise SingularSystemError(
                f"singular GN normal equations (satellites per epoch {counts}, min diagonal {diag_min:.3g})"
            ) from exc
        return cb, grad


def build_horizon_costs(problem: HorizonProblem, trajectory=None) -> ResidualStack:
    X = problem.warm_start if trajectory is None else trajectory
    return problem.compile().residuals(X)


# ---------------------------------------------------------------------------
# Gauss-Newton


@dataclass
class SolveReport:
    trajectory: np.ndarray
    iterations: int
    objective: float
    converged: bool
    history: list
    step_norm: float
    increases: int = 0
    final_stack: ResidualStack | None = field(default=None, repr=False)
    factor: tuple | None = field(default=None, repr=False)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Apply the inverse GN Hessian at the final trajectory."""
        return cho_solve_banded((self.factor, True), rhs)


def gauss_newton(builder, warm_start, step_size: float = 0.5, max_iters: int = 10, tol: float = 1e-6) -> SolveReport:
    """Fixed-step damped Gauss-Newton.

    ``builder(X)`` must return a :class:`ResidualStack`. Each iteration applies
    ``X <- X + step_size * dX`` regardless of the objective change (increases
    are counted). Stops early once ``max|dX| < tol``. The returned report is
    linearized at the final trajectory so that it can be differentiated.
    """
    X = np.array(warm_start, dtype=float)
    if not np.all(np.isfinite(X)):
        raise ValueError("warm start must be finite")
    history = []
    increases = 0
    it = 0
    while True:
        stack = builder(X)
        obj = stack.objective()
        if history and obj > history[-1]:
            increases += 1
        history.append(obj)
        cb, grad = stack.factorize()
        delta = -cho_solve_banded((cb, True), grad).reshape(X.shape)
        step = float(np.max(np.abs(delta)))
        if not np.isfinite(step):
            raise EstimationError("non-finite Gauss-Newton step")
        if step < tol or it >= max_iters:
            break
        X = X + step_size * delta
        it += 1
    return SolveReport(
        trajectory=X,
        iterations=it,
        objective=obj,
        converged=step < tol,
        history=history,
        step_norm=step,
        increases=increases,
        final_stack=stack,
        factor=cb,
    )


def mhe_solve(problem: HorizonProblem, step_size: float = 0.5, max_iters: int = 10, tol: float = 1e-6) -> SolveReport:
    """Solve one horizon; without arrival cost this is the sliding-window FGO."""
    compiled = problem.compile()
    return gauss_newton(compiled.residuals, problem.warm_start, step_size, max_iters, tol)


# ---------------------------------------------------------------------------
# recursive filters


def _corrected_measurements(epoch: Epoch, corrections) -> np.ndarray:
    y = np.empty(2 * epoch.n_visible)
    y[0::2] = epoch.pseudorange - _corrections_for(epoch, corrections)
    y[1::2] = epoch.pseudorange_rate
    return y


def ekf_step(x, P, epoch: Epoch, corrections=None, T: float | None = None, noise: NoiseModel | None = None):
    """Predict over ``T`` (skipped when ``T`` is None) then update with ``epoch``.

    Kalman-gain form with the Joseph covariance update.
    """
    x = np.asarray(x, dtype=float)
    P = np.asarray(P, dtype=float)
    if T is not None:
        A = dynamics_matrix(T)
        x = A @ x
        P = A @ P @ A.T + process_covariance(T, noise or NoiseModel())
    if epoch.n_visible == 0:
        return x, 0.5 * (P + P.T)
    C = jacobian_from_geometry(unit_geometry_vector(x[POS], epoch.sat_pos)[0])
    R = measurement_covariance(epoch)
    innov = _corrected_measurements(epoch, corrections) - predict_measurements(x, epoch)
    S = C @ P @ C.T + R
    try:
        K = np.linalg.solve(S, C @ P).T
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError("singular innovation covariance") from exc
    x_new = x + K @ innov
    IKC = np.eye(STATE_DIM) - K @ C
    P_new = IKC @ P @ IKC.T + K @ R @ K.T
    return x_new, 0.5 * (P_new + P_new.T)


def _information_update(x_prior, P_prior, epoch, corrections):
    C = jacobian_from_geometry(unit_geometry_vector(x_prior[POS], epoch.sat_pos)[0])
    Rinv = 1.0 / np.diag(measurement_covariance(epoch))
    info = np.linalg.inv(P_prior) + C.T @ (Rinv[:, None] * C)
    innov = _corrected_measurements(epoch, corrections) - predict_measurements(x_prior, epoch)
    x = x_prior + np.linalg.solve(info, C.T @ (Rinv * innov))
    return x, C


def mhe_filtering(epochs, corrections=None, noise: NoiseModel | None = None, horizon: int = 5, p0: float = DEFAULT_P0):
    """Filtering-form MHE: the window collapses into the arrival cost.

    Each step minimizes the arrival cost around the propagated estimate plus
    the newest measurement; the prior covariance advances with
    :func:`riccati_update`. Because older data only enter through that prior,
    the result does not depend on ``horizon``.
    """
    if horizon < 0:
        raise ValueError("horizon must be non-negative")
    noise = noise or NoiseModel()
    corrections = corrections or [None] * len(epochs)
    out = np.zeros((len(epochs), STATE_DIM))
    x_prior = wls_solve(epochs[0], corrections[0])
    P = np.eye(STATE_DIM) * p0
    for k, ep in enumerate(epochs):
        x, C = _information_update(x_prior, P, ep, corrections[k])
        out[k] = x
        if k + 1 < len(epochs):
            T = epochs[k + 1].timestamp - ep.timestamp
            A = dynamics_matrix(T)
            P = riccati_update(P, A, C, process_covariance(T, noise), measurement_covariance(ep))
            x_prior = A @ x
    return out


def ekf_filter(epochs, corrections=None, noise: NoiseModel | None = None, p0: float = DEFAULT_P0):
    """Run :func:`ekf_step` over a trace, bootstrapped from WLS."""
    noise = noise or NoiseModel()
    corrections = corrections or [None] * len(epochs)
    out = np.zeros((len(epochs), STATE_DIM))
    x = wls_solve(epochs[0], corrections[0])
    P = np.eye(STATE_DIM) * p0
    x, P = ekf_step(x, P, epochs[0], corrections[0])
    out[0] = x
    for k in range(1, len(epochs)):
        T = epochs[k].timestamp - epochs[k - 1].timestamp
        x, P = ekf_step(x, P, epochs[k], corrections[k], T, noise)
        out[k] = x
    return out


# ---------------------------------------------------------------------------
# sliding-window engine shared by offline runs and the service


@dataclass
class EngineConfig:
    engine: str = "mhe_ac"
    horizon: int = 5
    noise: NoiseModel = field(default_factory=NoiseModel)
    step_size: float = 0.5
    max_iters: int = 10
    tol: float = 1e-6
    p0: float = DEFAULT_P0
    gap_threshold: float = GAP_THRESHOLD

    def __post_init__(self):
        if self.engine not in ENGINES:
            raise ValueError(f"unknown engine {self.engine!r}; expected one of {ENGINES}")
        if self.horizon < 0:
            raise ValueError("horizon must be non-negative")


def gap_check(last_utc: float | None, new_utc: float, threshold: float = GAP_THRESHOLD) -> str:
    """``'keep'`` or ``'reset'``; raises on non-increasing timestamps."""
    if last_utc is None:
        return "reset"
    if not new_utc > last_utc:
        raise ValueError(f"timestamp {new_utc} does not advance past {last_utc}")
    return "reset" if new_utc - last_utc > threshold else "keep"


@dataclass
class StepResult:
    timestamp: float
    state: np.ndarray
    status: str  # OK | WARMUP | RESET | ERROR
    window: int
    message: str = ""
    report: SolveReport | None = field(default=None, repr=False)


@dataclass
class _Entry:
    epoch: Epoch
    corrections: np.ndarray
    filtered: np.ndarray  # x_{j|j}, the fix emitted at epoch j
    covariance: np.ndarray  # prior covariance P_j
    jacobian: np.ndarray | None = None  # C_j used to advance P_j


class MovingHorizonEstimator:
    """Incremental estimator fed one epoch at a time.

    Holds a ring of the most recent epochs with their corrections, emitted
    fixes ``x_{j|j}`` and prior covariances ``P_j``; only the newest ``P`` is
    computed per epoch, with :func:`riccati_update`. Window solves warm-start
    from the previous window's trajectory plus a one-step prediction, and the
    arrival prior is the prediction from the fix just before the window. The
    emitted fix is the newest window state. A timestamp gap above
    ``gap_threshold`` or a failed solve restarts from a WLS fix.
    """

    def __init__(self, config: EngineConfig | None = None):
        self.config = config or EngineConfig()
        self.reset()

    def reset(self):
        self.history = deque(maxlen=self.config.horizon + 2)
        self.count = 0  # epochs since the last bootstrap
        self.window_estimate = None
        self.bootstrap_state = None
        self._P_post = None

    @property
    def last_timestamp(self):
        return self.history[-1].epoch.timestamp if self.history else None

    def __len__(self):
        return min(self.count, self.config.horizon + 1)

    def step(self, epoch: Epoch, corrections=None) -> StepResult:
        cfg = self.config
        corrections = _corrections_for(epoch, corrections)
        status = "OK"
        if self.history and gap_check(self.last_timestamp, epoch.timestamp, cfg.gap_threshold) == "reset":
            self.reset()
            status = "RESET"
        try:
            if not self.history:
                x, rep = self._bootstrap(epoch, corrections)
            else:
                x, rep = self._advance(epoch, corrections)
        except (EstimationError, np.linalg.LinAlgError, ValueError) as exc:
            self.reset()
            return StepResult(epoch.timestamp, np.full(STATE_DIM, np.nan), "ERROR", 0, str(exc))
        n = len(self)
        if status == "OK" and n < cfg.horizon + 1:
            status = "WARMUP"
        return StepResult(epoch.timestamp, x.copy(), status, n, report=rep)

    def _bootstrap(self, epoch, corrections):
        cfg = self.config
        x0 = wls_solve(epoch, corrections)
        P0 = np.eye(STATE_DIM) * cfg.p0
        rep = None
        C = None
        if cfg.engine == "wls":
            x = x0
        elif cfg.engine == "ekf":
            x, self._P_post = ekf_step(x0, P0, epoch, corrections)
        elif cfg.engine == "mhe_f":
            x, C = _information_update(x0, P0, epoch, corrections)
        else:
            prob = HorizonProblem(
                [epoch], x0[None], cfg.noise, [corrections], x0, P0, include_arrival_cost=cfg.engine == "mhe_ac"
            )
            rep = mhe_solve(prob, cfg.step_size, cfg.max_iters, cfg.tol)
            x = rep.trajectory[-1]
            self.window_estimate = rep.trajectory
        self.bootstrap_state = x0
        self.history.append(_Entry(epoch, corrections, x, P0, C))
        self.count = 1
        return x, rep

    def _advance(self, epoch, corrections):
        cfg = self.config
        last = self.history[-1]
        T = epoch.timestamp - last.epoch.timestamp
        A = dynamics_matrix(T)
        Q = process_covariance(T, cfg.noise)
        rep = None

        if cfg.engine == "wls":
            x = wls_solve(epoch, corrections, init=last.filtered[POS])
            self.history.append(_Entry(epoch, corrections, x, last.covariance))
            self.count += 1
            return x, rep
        if cfg.engine == "ekf":
            # EKF carries its posterior covariance separately from the P ring
            x, P_post = ekf_step(last.filtered, self._P_post, epoch, corrections, T, cfg.noise)
            self._P_post = P_post
            self.history.append(_Entry(epoch, corrections, x, P_post))
            self.count += 1
            return x, rep

        C = last.jacobian
        if C is None:
            C = jacobian_from_geometry(unit_geometry_vector(last.filtered[POS], last.epoch.sat_pos)[0])
        P_new = riccati_update(last.covariance, A, C, Q, measurement_covariance(last.epoch))
        prediction = A @ last.filtered

        if cfg.engine == "mhe_f":
            x, C_new = _information_update(prediction, P_new, epoch, corrections)
            self.history.append(_Entry(epoch, corrections, x, P_new, C_new))
            self.count += 1
            return x, rep

        self.history.append(_Entry(epoch, corrections, prediction, P_new))
        self.count += 1
        n = len(self)
        window = list(self.history)[-n:]
        if self.count > n:
            before = self.history[-n - 1]
            Ts = window[0].epoch.timestamp - before.epoch.timestamp
            prior = dynamics_matrix(Ts) @ before.filtered
        else:
            prior = self.bootstrap_state
        warm = np.vstack([self.window_estimate[-(n - 1):], prediction[None]]) if n > 1 else prediction[None]
        prob = HorizonProblem(
            [e.epoch for e in window],
            warm,
            cfg.noise,
            [e.corrections for e in window],
            prior,
            window[0].covariance,
            include_arrival_cost=cfg.engine == "mhe_ac",
        )
        rep = mhe_solve(prob, cfg.step_size, cfg.max_iters, cfg.tol)
        traj = rep.trajectory
        if not np.all(np.isfinite(traj)):
            raise EstimationError("non-finite trajectory")
        self.window_estimate = traj
        x = traj[-1]
        self.history[-1].filtered = x
        return x, rep


@dataclass
class TraceResult:
    timestamps: np.ndarray
    states: np.ndarray
    status: list
    failures: list

    @property
    def positions(self) -> np.ndarray:
        return self.states[:, POS]


def run_trace(epochs, corrections=None, config: EngineConfig | None = None) -> TraceResult:
    """Run one engine over a time-ordered list of epochs."""
    est = MovingHorizonEstimator(config)
    corrections = corrections if corrections is not None else [None] * len(epochs)
    states, status, failures, stamps = [], [], [], []
    for k, ep in enumerate(epochs):
        res = est.step(ep, corrections[k])
        states.append(res.state)
        status.append(res.status)
        stamps.append(res.timestamp)
        if res.status == "ERROR":
            failures.append((k, res.message))
    return TraceResult(np.array(stamps), np.array(states).reshape(-1, STATE_DIM), status, failures)


def horizontal_rmse_ecef(pred, truth) -> float:
    """RMS horizontal (local tangent plane) error between ECEF tracks."""
    from .geo import ecef_to_lla, ecef_to_ned_matrix

    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    ok = np.all(np.isfinite(pred), axis=1)
    if not ok.any():
        return math.inf
    errs = []
    for p, t in zip(pred[ok], truth[ok]):
        ned = ecef_to_ned_matrix(ecef_to_lla(t)) @ (p - t)
        errs.append(ned[0] ** 2 + ned[1] ** 2)
    return float(math.sqrt(np.mean(errs)))
