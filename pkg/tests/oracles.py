"""Independent reference computations used by several test modules."""
import numpy as np
import scipy.linalg

from rangecorr.model import STATE_DIM, dynamics_matrix, measurement_jacobian, predict_measurements, process_covariance


def sqrt_information(cov):
    # any W with W^T W = cov^-1 gives the same least-squares solution
    return scipy.linalg.cholesky(np.linalg.inv(cov), lower=False)


def batched_linear_least_squares(problem):
    """Solve a linear horizon problem as one dense weighted least-squares system.

    Rows are assembled from the model functions directly; the solution is
    returned as a trajectory ``(n, 8)``.
    """
    L = problem.linearization
    n = len(problem.epochs)
    rows, rhs = [], []

    def add(W, block_cols, target):
        J = np.zeros((W.shape[0], n * STATE_DIM))
        for col, M in block_cols:
            J[:, col * STATE_DIM : (col + 1) * STATE_DIM] += W @ M
        rows.append(J)
        rhs.append(W @ target)

    if problem.include_arrival_cost:
        add(sqrt_information(problem.prior_covariance), [(0, np.eye(STATE_DIM))], problem.prior_state - L[0])
    for k in range(n - 1):
        T = problem.epochs[k + 1].timestamp - problem.epochs[k].timestamp
        A = dynamics_matrix(T)
        # x_{k+1} - A x_k = 0, written in deviations from L
        add(sqrt_information(process_covariance(T, problem.noise)), [(k + 1, np.eye(STATE_DIM)), (k, -A)],
            A @ L[k] - L[k + 1])
    for k, ep in enumerate(problem.epochs):
        y = np.empty(2 * ep.n_visible)
        y[0::2] = ep.pseudorange - problem.corrections[k]
        y[1::2] = ep.pseudorange_rate
        w = np.empty_like(y)
        w[0::2] = 1.0 / ep.range_sigma
        w[1::2] = 1.0 / ep.rate_sigma
        add(np.diag(w), [(k, measurement_jacobian(L[k], ep))], y - predict_measurements(L[k], ep))
    J = np.vstack(rows)
    b = np.concatenate(rhs)
    delta, *_ = np.linalg.lstsq(J, b, rcond=None)
    return L + delta.reshape(n, STATE_DIM)


def banded_to_dense(ab):
    """Symmetric dense matrix from lower banded storage."""
    bands, m = ab.shape
    H = np.zeros((m, m))
    for d in range(bands):
        idx = np.arange(m - d)
        H[idx + d, idx] = ab[d, : m - d]
        H[idx, idx + d] = ab[d, : m - d]
    return H


def brute_force_edt(grid, spacing=(1.0, 1.0)):
    """Distance from every cell to the nearest nonzero cell by exhaustive search."""
    occ = np.argwhere(np.asarray(grid) != 0).astype(float)
    ii, jj = np.indices(np.shape(grid))
    cells = np.column_stack([ii.ravel(), jj.ravel()]).astype(float)
    best = np.full(len(cells), np.inf)
    for chunk in np.array_split(occ, max(1, len(occ) // 256)):
        dy = (cells[:, None, 0] - chunk[None, :, 0]) * spacing[0]
        dx = (cells[:, None, 1] - chunk[None, :, 1]) * spacing[1]
        best = np.minimum(best, (dy * dy + dx * dx).min(axis=1))
    return np.sqrt(best).reshape(np.shape(grid))
