"""Numerical kernel for stacked estimating equations.

Provides damped-Newton root finding, Gauss-Newton GMM minimization, central
finite differences, a Moore-Penrose pseudo-inverse, and the sandwich variance
for stacked per-record moment functions. Everything here is deterministic:
identical inputs produce bit-identical outputs, and all reductions over
records use numpy's fixed-order pairwise summation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConvergenceError, IdentifiabilityError

# Default step scale for central differences: cube root of machine epsilon,
# which balances truncation against rounding error for smooth functions.
DEFAULT_FD_SCALE = float(np.finfo(float).eps) ** (1.0 / 3.0)

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 100
MAX_HALVINGS = 20


def ordered_mean(rows: np.ndarray) -> np.ndarray:
    """Mean over axis 0 in a fixed deterministic order.

    numpy's add.reduce applies chunked pairwise summation over the record
    axis, so the result depends only on the array contents and order, never
    on thread or worker count.
    """
    rows = np.asarray(rows, dtype=float)
    if rows.ndim == 1:
        rows = rows[:, None]
    return np.add.reduce(rows, axis=0) / rows.shape[0]


@dataclass(frozen=True)
class EstimatingSystem:
    """A stack of per-record moment functions G_i(theta).

    Attributes:
        param_dim: dimension p of the parameter vector.
        moment_dim: dimension d >= p of each per-record moment vector.
        moments: callable mapping a p-vector theta to an (n, d) array of
            per-record moment values. Must be deterministic.
        n: number of records.
    """

    param_dim: int
    moment_dim: int
    moments: Callable[[np.ndarray], np.ndarray]
    n: int

    def __post_init__(self):
        if self.moment_dim < self.param_dim:
            raise IdentifiabilityError(
                f"moment dimension {self.moment_dim} is smaller than "
                f"parameter dimension {self.param_dim}: under-identified system"
            )
        if self.n < 1:
            raise ValueError("estimating system needs at least one record")

    def mean_moment(self, theta: np.ndarray) -> np.ndarray:
        """Sample mean of the per-record moments at theta (length d)."""
        rows = np.asarray(self.moments(np.asarray(theta, dtype=float)), dtype=float)
        if rows.ndim == 1:
            rows = rows[:, None]
        if rows.shape != (self.n, self.moment_dim):
            raise ValueError(
                f"moment evaluator returned shape {rows.shape}, "
                f"expected {(self.n, self.moment_dim)}"
            )
        return ordered_mean(rows)


@dataclass(frozen=True)
class SolveResult:
    """Outcome of a root-finding or GMM run.

    converged is always True on a returned result (failures raise); it is
    kept explicit so serialized diagnostics are self-describing.
    """

    theta_hat: np.ndarray
    residual_norm: float
    iterations: int
    converged: bool
    jacobian_at_solution: np.ndarray


def numeric_jacobian(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray,
                     scale: float = DEFAULT_FD_SCALE) -> np.ndarray:
    """Central-difference Jacobian of a vector function at x.

    Step size for coordinate j is scale * max(1, |x_j|). Central differences
    are exact on affine maps and keep full accuracy through the exp() terms
    that appear in the estimating functions.

    Returns a (d, p) matrix for f: R^p -> R^d.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    p = x.shape[0]
    cols = []
    for j in range(p):
        h = scale * max(1.0, abs(x[j]))
        xp = x.copy()
        xm = x.copy()
        xp[j] += h
        xm[j] -= h
        fp = np.atleast_1d(np.asarray(f(xp), dtype=float))
        fm = np.atleast_1d(np.asarray(f(xm), dtype=float))
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise ValueError(f"function not finite near x (coordinate {j})")
        cols.append((fp - fm) / (2.0 * h))
    return np.column_stack(cols)


def solve_root(system: EstimatingSystem, init: np.ndarray,
               tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER) -> SolveResult:
    """Solve mean_i G_i(theta) = 0 for an exactly identified system.

    Damped Newton iteration: numeric Jacobian, full step first, step halved
    up to MAX_HALVINGS times whenever the residual norm fails to decrease.
    Convergence is declared when the Euclidean norm of the mean moment drops
    to tol or below.

    Raises:
        IdentifiabilityError: singular Jacobian.
        ConvergenceError: iteration budget or line search exhausted; the
            error carries the residual-norm trajectory.
    """
    if system.moment_dim != system.param_dim:
        raise ValueError("solve_root requires an exactly identified system (d == p)")
    theta = np.atleast_1d(np.asarray(init, dtype=float)).copy()
    if not np.all(np.isfinite(theta)):
        raise ValueError("initial point must be finite")

    trajectory = []
    for it in range(max_iter + 1):
        g = system.mean_moment(theta)
        norm = float(np.linalg.norm(g))
        trajectory.append(norm)
        if norm <= tol:
            jac = numeric_jacobian(system.mean_moment, theta)
            return SolveResult(theta, norm, it, True, jac)
        if it == max_iter:
            break
        jac = numeric_jacobian(system.mean_moment, theta)
        try:
            step = np.linalg.solve(jac, -g)
        except np.linalg.LinAlgError as exc:
            raise IdentifiabilityError(f"singular Jacobian in Newton step: {exc}") from exc
        if not np.all(np.isfinite(step)):
            raise IdentifiabilityError("non-finite Newton step (ill-conditioned Jacobian)")

        # Backtracking: accept the first damped step that reduces the residual.
        accepted = False
        damp = 1.0
        for _ in range(MAX_HALVINGS + 1):
            cand = theta + damp * step
            g_new = system.mean_moment(cand)
            new_norm = float(np.linalg.norm(g_new))
            if np.isfinite(new_norm) and new_norm < norm:
                theta = cand
                accepted = True
                break
            damp *= 0.5
        if not accepted:
            raise ConvergenceError(
                f"line search stalled at residual norm {norm:.3e}", trajectory
            )
    raise ConvergenceError(
        f"no convergence after {max_iter} iterations "
        f"(last residual norm {trajectory[-1]:.3e})",
        trajectory,
    )


def gmm_minimize(system: EstimatingSystem, weight: np.ndarray, init: np.ndarray,
                 tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER) -> SolveResult:
    """Minimize the GMM objective gbar(theta)' W gbar(theta) for d >= p.

    Levenberg-Marquardt steps solve (J'WJ + lam diag(J'WJ)) delta =
    -J'W gbar, with lam raised tenfold after a rejected step and relaxed
    after an accepted one. Along each step a parabolic line search (fit
    through damping 0, 1/2, 1) picks the damping with the lowest objective;
    plain Gauss-Newton oscillates with a slowly shrinking envelope on
    large-residual problems, and the half-step probe quenches exactly that
    mode. Convergence is declared when the gradient norm ||2 J'W gbar||
    drops to tol or below, or when the undamped Gauss-Newton step predicts
    an objective decrease of at most tol * max(1, objective). The second
    test is invariant to rescaling the weight matrix, so a huge
    second-stage weight cannot make an already-converged problem look
    unconverged.

    The weight matrix must be symmetric positive definite.
    """
    weight = np.asarray(weight, dtype=float)
    d = system.moment_dim
    if weight.shape != (d, d):
        raise ValueError(f"weight must be {d}x{d}, got {weight.shape}")
    if not np.allclose(weight, weight.T, atol=1e-12):
        raise ValueError("weight matrix must be symmetric")
    try:
        np.linalg.cholesky(weight)
    except np.linalg.LinAlgError as exc:
        raise ValueError("weight matrix must be positive definite") from exc

    theta = np.atleast_1d(np.asarray(init, dtype=float)).copy()
    if not np.all(np.isfinite(theta)):
        raise ValueError("initial point must be finite")

    def objective(g):
        return float(g @ weight @ g)

    lam = 0.0
    trajectory = []
    for it in range(max_iter + 1):
        g = system.mean_moment(theta)
        jac = numeric_jacobian(system.mean_moment, theta)
        grad = 2.0 * jac.T @ weight @ g
        grad_norm = float(np.linalg.norm(grad))
        trajectory.append(grad_norm)
        if grad_norm <= tol:
            return SolveResult(theta, float(np.linalg.norm(g)), it, True, jac)
        if it == max_iter:
            break
        hess = jac.T @ weight @ jac
        diag = np.diag(hess).copy()
        diag[diag <= 0.0] = max(float(diag.max()), 1.0) * 1e-12
        try:
            gn_step = np.linalg.solve(hess, -0.5 * grad)
        except np.linalg.LinAlgError as exc:
            raise IdentifiabilityError(f"rank-deficient GMM Jacobian: {exc}") from exc
        q0 = objective(g)
        if -0.5 * float(grad @ gn_step) <= tol * max(1.0, q0):
            return SolveResult(theta, float(np.linalg.norm(g)), it, True, jac)
        def eval_at(alpha, step):
            g_new = system.mean_moment(theta + alpha * step)
            if not np.all(np.isfinite(g_new)):
                return math.inf
            return objective(g_new)

        accepted = False
        for _ in range(MAX_HALVINGS + 1):
            if lam == 0.0:
                step = gn_step
            else:
                step = np.linalg.solve(hess + lam * np.diag(diag), -0.5 * grad)
            probes = [(1.0, eval_at(1.0, step)), (0.5, eval_at(0.5, step))]
            # parabola through damping 0, 1/2, 1; probe its minimizer too
            curv = 2.0 * (probes[0][1] + q0 - 2.0 * probes[1][1])
            if math.isfinite(curv) and curv > 0.0:
                slope = probes[0][1] - q0 - curv
                alpha_star = min(1.0, max(1e-4, -slope / (2.0 * curv)))
                probes.append((alpha_star, eval_at(alpha_star, step)))
            alpha_best, q_best = min(probes, key=lambda p: p[1])
            if q_best < q0:
                theta = theta + alpha_best * step
                accepted = True
                lam = 0.0 if lam < 1e-10 else lam / 3.0
                break
            lam = 1e-4 if lam == 0.0 else lam * 10.0
        if not accepted:
            raise ConvergenceError(
                f"GMM step rejected at gradient norm {grad_norm:.3e}", trajectory
            )
    raise ConvergenceError(
        f"GMM did not converge after {max_iter} iterations "
        f"(last gradient norm {trajectory[-1]:.3e})",
        trajectory,
    )


def pinv(m: np.ndarray) -> np.ndarray:
    """Moore-Penrose pseudo-inverse via SVD.

    Singular values below 1e-12 times the largest one are treated as zero.
    Satisfies the four Penrose conditions to within that cutoff.
    """
    m = np.atleast_2d(np.asarray(m, dtype=float))
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix must be finite")
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((m.shape[1], m.shape[0]))
    keep = s > 1e-12 * s[0]
    s_inv = np.where(keep, 1.0 / np.where(keep, s, 1.0), 0.0)
    return (vt.T * s_inv) @ u.T


def sandwich_vcov(per_record_moments: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """Sandwich variance for stacked estimating equations.

    Given the n x d matrix of per-record moments evaluated at the estimate
    and the d x p Jacobian omega of the mean moment, returns

        omega^+ Var(G_i) (omega^+)' / n

    with omega^+ the Moore-Penrose pseudo-inverse. The moment covariance is
    centered at the sample mean (the mean is ~0 at the estimate for exactly
    identified systems; centering keeps over-identified stacks honest). The
    result is symmetrized as (S + S') / 2.
    """
    g = np.atleast_2d(np.asarray(per_record_moments, dtype=float))
    omega = np.atleast_2d(np.asarray(omega, dtype=float))
    n, d = g.shape
    if omega.shape[0] != d:
        raise ValueError(f"omega has {omega.shape[0]} rows, expected {d}")
    if not np.any(omega):
        raise IdentifiabilityError("all-zero Jacobian: parameters not identified")
    centered = g - ordered_mean(g)
    var_g = centered.T @ centered / n
    omega_pinv = pinv(omega)
    s = omega_pinv @ var_g @ omega_pinv.T / n
    return (s + s.T) / 2.0
