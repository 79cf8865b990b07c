"""Levenberg-Marquardt damped least squares.

A compact, dependency-free (numpy only) implementation shared by the spectral,
saturation and lifetime fitters. Steps are only accepted when they lower the
cost, so the returned cost never exceeds the cost at ``x0``.
"""
from dataclasses import dataclass
import logging

import numpy as np

from .errors import ConvergenceError

_logger = logging.getLogger(__name__)

MAX_ITER = 200
RTOL = 1e-10


@dataclass
class LMResult:
    x: np.ndarray
    cost: float
    initial_cost: float
    n_iter: int
    jac: np.ndarray
    residual: np.ndarray
    converged: bool


def numerical_jacobian(residual, x, r0=None):
    """Forward-difference Jacobian of ``residual`` at ``x``."""
    x = np.asarray(x, dtype=float)
    if r0 is None:
        r0 = residual(x)
    J = np.empty((r0.size, x.size))
    for i in range(x.size):
        h = 1.5e-8 * max(abs(x[i]), 1.0)
        xp = x.copy()
        xp[i] += h
        J[:, i] = (residual(xp) - r0) / h
    return J


def levenberg_marquardt(residual, x0, jac=None, max_iter=MAX_ITER, rtol=RTOL,
                        lam0=1e-3, raise_on_failure=True):
    """Minimise ``sum(residual(x)**2)`` starting from ``x0``.

    Parameters
    ----------
    residual : callable
        ``residual(x) -> (m,)`` array.
    jac : callable, optional
        ``jac(x) -> (m, n)`` Jacobian of ``residual``. Forward differences
        are used when omitted.
    max_iter : int
        Maximum number of damped steps (accepted or rejected).
    rtol : float
        Converged once an accepted step lowers the cost by a relative amount
        smaller than this.

    Raises
    ------
    ConvergenceError
        If ``max_iter`` is reached first (and ``raise_on_failure``); the
        exception carries the best parameters seen.
    """
    x = np.array(x0, dtype=float)
    r = np.asarray(residual(x), dtype=float)
    cost = float(r @ r)
    if not np.isfinite(cost):
        raise ConvergenceError("residual is not finite at the initial guess", x, cost)
    initial_cost = cost
    get_jac = jac if jac is not None else (lambda p: numerical_jacobian(residual, p))
    J = get_jac(x)
    scale = np.zeros(x.size)
    lam = lam0
    converged = False
    n_iter = 0

    while n_iter < max_iter:
        if cost == 0.0:
            converged = True
            break
        n_iter += 1
        colsq = np.einsum("ij,ij->j", J, J)
        scale = np.maximum(scale, colsq)
        d = np.maximum(scale, 1e-12 * max(scale.max(), 1e-300))
        A = np.vstack([J, np.diag(np.sqrt(lam * d))])
        b = np.concatenate([-r, np.zeros(x.size)])
        step = np.linalg.lstsq(A, b, rcond=None)[0]

        x_new = x + step
        r_new = np.asarray(residual(x_new), dtype=float)
        cost_new = float(r_new @ r_new)

        if np.isfinite(cost_new) and cost_new < cost:
            rel = (cost - cost_new) / cost
            x, r, cost = x_new, r_new, cost_new
            J = get_jac(x)
            lam = max(lam / 3.0, 1e-15)
            if rel < rtol or np.linalg.norm(step) <= 1e-15 * (np.linalg.norm(x) + 1e-15):
                converged = True
                break
        else:
            lam *= 4.0
            if lam > 1e16:
                # No descent direction left at machine precision.
                converged = True
                break

    if not converged:
        _logger.debug("LM stopped after %d iterations, cost %.6g", n_iter, cost)
        if raise_on_failure:
            raise ConvergenceError(
                f"no convergence after {max_iter} iterations (cost {cost:.6g})", x, cost)
    return LMResult(x=x, cost=cost, initial_cost=initial_cost, n_iter=n_iter,
                    jac=J, residual=r, converged=converged)


def covariance(J):
    """Parameter covariance ``(J^T J)^-1`` from a weighted-residual Jacobian.

    Columns are normalised before the pseudo-inverse so parameters of very
    different magnitude are not truncated as numerically singular.
    """
    J = np.asarray(J, dtype=float)
    scale = np.linalg.norm(J, axis=0)
    scale[scale == 0] = 1.0
    Js = J / scale
    return np.linalg.pinv(Js.T @ Js) / np.outer(scale, scale)
