"""Gradients of horizon solutions with respect to pseudorange corrections.

At a Gauss-Newton stationary point ``F(X, eps) = J^T r = 0``. Implicit
differentiation with the GN Hessian ``H = J^T J`` gives, for an upstream seed
``S = dL/dX``::

    H lam = S
    dL/deps_i = -s_i^2 * c_i . lam[epoch(i)]

where ``c_i`` is the Jacobian row of pseudorange ``i`` and ``s_i`` its inverse
sigma. Corrections never enter rate rows, so those contribute nothing.
"""
from __future__ import annotations

from dataclasses import replace

import numpy as np

from .estimate import (
    EstimationError,
    HorizonProblem,
    SolveReport,
    _corrected_measurements,
    dynamics_matrix,
    process_covariance,
    wls_solve,
)
from .geo import unit_geometry_vector
from .model import POS, STATE_DIM, NoiseModel, jacobian_from_geometry, measurement_covariance, predict_measurements


class NotConvergedError(EstimationError):
    """The solution is not a stationary point within the requested tolerance."""


def split_by_epoch(flat: np.ndarray, counts) -> list:
    bounds = np.cumsum(counts)[:-1]
    return [a.copy() for a in np.split(np.asarray(flat), bounds)]


def adjoint_flat(report: SolveReport, seed, tol: float | None = 1e-6) -> np.ndarray:
    """``dL/deps`` for every pseudorange of the horizon, concatenated in epoch order."""
    if tol is not None and not report.step_norm < tol:
        raise NotConvergedError(
            f"solution not converged (|dX| = {report.step_norm:.3g} >= {tol:.3g}); implicit gradients would be biased"
        )
    stack = report.final_stack
    h = stack.horizon
    seed = np.asarray(seed, dtype=float).reshape(h.n, STATE_DIM)
    if not np.all(np.isfinite(seed)):
        raise ValueError("seed must be finite")
    lam = report.solve(seed.reshape(-1)).reshape(h.n, STATE_DIM)
    lam_rows = lam[h.ep]
    # range row c = (g, 0, ..., clock 1) in the interleaved state layout
    dot = np.einsum("ij,ij->i", stack.range_geometry, lam_rows[:, POS]) + lam_rows[:, 6]
    return -(h.s_r**2) * dot


def mhe_adjoint(problem: HorizonProblem, solution: SolveReport, seed, tol: float | None = 1e-6) -> list:
    """Per-epoch arrays of ``dL/deps`` aligned with each epoch's PRNs.

    ``solution`` must come from :func:`~rangecorr.estimate.mhe_solve` on
    ``problem``. Raises :class:`NotConvergedError` if its final step exceeds
    ``tol`` (pass ``tol=None`` to skip the check).
    """
    flat = adjoint_flat(solution, seed, tol)
    return split_by_epoch(flat, [e.n_visible for e in problem.epochs])


def with_corrections(problem: HorizonProblem, corrections) -> HorizonProblem:
    return replace(problem, corrections=[np.array(c, dtype=float) for c in corrections])


def finite_diff_gradient(solve, problem: HorizonProblem, seed, h: float = 1e-2) -> list:
    """Central differences of ``seed . X(eps)`` over every correction entry.

    ``solve(problem)`` must return the trajectory or a :class:`SolveReport`.
    """
    if not h > 0:
        raise ValueError("h must be positive")
    seed = np.asarray(seed, dtype=float)

    def trajectory(p):
        out = solve(p)
        return out.trajectory if isinstance(out, SolveReport) else np.asarray(out)

    # differences are taken against the unperturbed solution to avoid
    # cancellation in ECEF-sized coordinates
    ref = trajectory(problem)

    def objective(corr):
        return float(np.sum(seed * (trajectory(with_corrections(problem, corr)) - ref)))

    base = [np.array(c, dtype=float) for c in problem.corrections]
    grads = []
    for j, c in enumerate(base):
        g = np.zeros_like(c)
        for i in range(c.size):
            plus = [a.copy() for a in base]
            minus = [a.copy() for a in base]
            plus[j][i] += h
            minus[j][i] -= h
            g[i] = (objective(plus) - objective(minus)) / (2 * h)
        grads.append(g)
    return grads


def chain_to_loss(problem: HorizonProblem, solution: SolveReport, loss_grad, tol: float | None = 1e-6):
    """Compose a trajectory loss with the solve.

    ``loss_grad(trajectory) -> (value, dL/dX)``. Returns ``(value, gradients)``
    where ``gradients`` is the per-epoch ``dL/deps`` list.
    """
    value, seed = loss_grad(solution.trajectory)
    return value, mhe_adjoint(problem, solution, seed, tol)


def filter_adjoint(epochs, corrections, seed, noise: NoiseModel | None = None, p0: float = 0.05):
    """Reverse pass through an EKF run (filtering-form MHE) for ``dL/deps``.

    Gains and Jacobians are recorded on the forward pass and treated as
    constants, so the state obeys the linear recursion
    ``dx_k = (I - K_k C_k) A_k dx_{k-1} - K_k[:, range] deps_k``. The WLS
    bootstrap of the first epoch is held fixed.
    Returns ``(trajectory, per-epoch gradients)``.
    """
    noise = noise or NoiseModel()
    n = len(epochs)
    corrections = corrections if corrections is not None else [np.zeros(e.n_visible) for e in epochs]
    seed = np.asarray(seed, dtype=float).reshape(n, STATE_DIM)
    traj = np.zeros((n, STATE_DIM))
    gains, transfer, As = [], [], []
    x = wls_solve(epochs[0], corrections[0])
    P = np.eye(STATE_DIM) * p0
    for k, ep in enumerate(epochs):
        if k > 0:
            T = ep.timestamp - epochs[k - 1].timestamp
            A = dynamics_matrix(T)
            x = A @ x
            P = A @ P @ A.T + process_covariance(T, noise)
        else:
            A = np.eye(STATE_DIM)
        C = jacobian_from_geometry(unit_geometry_vector(x[POS], ep.sat_pos)[0])
        R = measurement_covariance(ep)
        K = np.linalg.solve(C @ P @ C.T + R, C @ P).T
        x = x + K @ (_corrected_measurements(ep, corrections[k]) - predict_measurements(x, ep))
        IKC = np.eye(STATE_DIM) - K @ C
        P = IKC @ P @ IKC.T + K @ R @ K.T
        traj[k] = x
        gains.append(K)
        transfer.append(IKC)
        As.append(A)

    grads = [None] * n
    lam = np.zeros(STATE_DIM)
    for k in range(n - 1, -1, -1):
        lam = lam + seed[k]
        grads[k] = -gains[k][:, 0::2].T @ lam
        lam = As[k].T @ (transfer[k].T @ lam)
    return traj, grads
