"""Box-constrained nonlinear least squares via projected Levenberg-Marquardt.

Minimizes cost(theta) = ||r(theta)||^2 subject to lo <= theta <= hi.  Steps
are computed from damped normal equations and projected onto the box;
accepted iterates never increase the cost.  The normal equations exploit the
row structure typical of single-shooting estimation windows: rows with few
nonzeros (stage-local penalties) are accumulated sparsely while the dense
rows (rolled-out output residuals) go through BLAS.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla

__all__ = [
    "ResidualProblem",
    "NormalStructure",
    "SolverOptions",
    "SolveReport",
    "solve",
    "finite_difference_jacobian",
    "is_convex_window",
]

_LAMBDA_MAX = 1e15


@dataclass(frozen=True)
class NormalStructure:
    """Row/column block structure of a residual Jacobian.

    blocks lists disjoint (row_slice, col_slice) pairs such that within
    those rows only the given columns are nonzero, and the column slices
    partition the decision vector.  dense_rows covers every remaining row
    (arbitrary sparsity, including all-zero rows).  With this metadata the
    damped normal equations reduce to small block factorizations plus a
    low-rank correction of the dense rows.
    """

    blocks: tuple
    dense_rows: slice


@dataclass
class ResidualProblem:
    """Residual map r(theta), its Jacobian, and box bounds on theta.

    structure is optional Jacobian block metadata enabling the structured
    linear-algebra path; correctness does not depend on it.
    """

    residual: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray]
    lower: np.ndarray
    upper: np.ndarray
    dim_theta: int
    dim_r: int
    structure: Optional[NormalStructure] = None

    def project(self, theta: np.ndarray) -> np.ndarray:
        return np.clip(theta, self.lower, self.upper)

    def cost(self, theta: np.ndarray) -> float:
        r = self.residual(theta)
        return float(r @ r)


@dataclass
class SolverOptions:
    tol_g: float = 1e-8
    tol_step: float = 1e-12
    max_iter: int = 100
    lambda0: float = 1e-3


@dataclass
class SolveReport:
    """Result of one solve.

    status is 'converged' (projected gradient within tol_g), 'max_iter'
    (iteration or progress budget exhausted before reaching tol_g), or
    'stalled' (non-finite residual encountered; theta is the last good
    iterate).
    """

    theta: np.ndarray
    cost: float
    status: str
    iterations: int
    projected_gradient_norm: float
    n_residual_evals: int = 0


def finite_difference_jacobian(residual, theta, h_rel: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian with per-component step h_rel*(1+|theta_i|)."""
    theta = np.asarray(theta, dtype=float)
    r0 = np.asarray(residual(theta))
    J = np.empty((r0.size, theta.size))
    for i in range(theta.size):
        step = h_rel * (1.0 + abs(theta[i]))
        tp = theta.copy()
        tp[i] += step
        tm = theta.copy()
        tm[i] -= step
        J[:, i] = (np.asarray(residual(tp)) - np.asarray(residual(tm))) / (2 * step)
    return J


def _projected_gradient_norm(theta, grad, lo, hi) -> float:
    """Inf-norm of theta - project(theta - grad); zero exactly at a KKT point."""
    return float(np.max(np.abs(theta - np.clip(theta - grad, lo, hi)), initial=0.0))


class _DenseNormal:
    """Damped normal-equation solves via a full Cholesky factorization."""

    def __init__(self, J: np.ndarray):
        self.H = J.T @ J
        self.diag = np.diag(self.H).copy()

    def try_step(self, lam: float, rhs: np.ndarray) -> np.ndarray:
        d = np.maximum(self.diag, _diag_floor(self.diag))
        M = self.H + np.diag(lam * d)
        cf = sla.cho_factor(M, lower=True, check_finite=False)
        return sla.cho_solve(cf, rhs, check_finite=False)


class _StructuredNormal:
    """Block-diagonal-plus-low-rank normal equations.

    The sparse rows contribute a block-diagonal Gram matrix assembled per
    column block; the dense rows (with all-zero rows dropped) enter through
    the matrix-inversion lemma, so only an nd x nd system is factorized.
    Blocks of equal shape are solved in one batched LAPACK call.
    """

    def __init__(self, J: np.ndarray, st: NormalStructure):
        Jd = J[st.dense_rows]
        keep = Jd.any(axis=1)
        self.Jd = np.ascontiguousarray(Jd[keep]) if not keep.all() else Jd
        self.dim = J.shape[1]
        diag = np.zeros(self.dim)
        groups: dict = {}
        for rs, cs in st.blocks:
            shape = (rs.stop - rs.start, cs.stop - cs.start)
            groups.setdefault(shape, []).append((rs, cs))
        self.batches = []
        for (nr, nc), items in groups.items():
            Jb = np.empty((len(items), nr, nc))
            cols = np.empty((len(items), nc), dtype=np.intp)
            for i, (rs, cs) in enumerate(items):
                Jb[i] = J[rs, cs]
                cols[i] = np.arange(cs.start, cs.stop)
            Hb = np.einsum("kri,krj->kij", Jb, Jb)
            didx = np.arange(nc)
            np.add.at(diag, cols.ravel(), Hb[:, didx, didx].ravel())
            self.batches.append((Hb, cols, didx))
        if self.Jd.shape[0]:
            diag += np.einsum("ij,ij->j", self.Jd, self.Jd)
        self.diag = diag

    def try_step(self, lam: float, rhs: np.ndarray) -> np.ndarray:
        d = np.maximum(self.diag, _diag_floor(self.diag))
        nd = self.Jd.shape[0]
        R = np.empty((rhs.size, 1 + nd))
        R[:, 0] = rhs
        if nd:
            R[:, 1:] = self.Jd.T
        Y = np.empty_like(R)
        for Hb, cols, didx in self.batches:
            M = Hb.copy()
            M[:, didx, didx] += lam * d[cols]
            Y[cols.ravel()] = np.linalg.solve(M, R[cols]).reshape(-1, R.shape[1])
        if nd == 0:
            return Y[:, 0]
        K = np.eye(nd) + self.Jd @ Y[:, 1:]
        cf = sla.cho_factor(K, lower=True, check_finite=False)
        t = sla.cho_solve(cf, self.Jd @ Y[:, 0], check_finite=False)
        return Y[:, 0] - Y[:, 1:] @ t


def _diag_floor(diag: np.ndarray) -> float:
    return max(1e-12, 1e-10 * diag.max()) if diag.size else 1e-12


def solve(problem: ResidualProblem, theta0, opts: Optional[SolverOptions] = None) -> SolveReport:
    """Projected Levenberg-Marquardt with Marquardt diagonal scaling.

    Damping follows the classic schedule: lambda/3 on acceptance, lambda*2 on
    rejection.  Ties on cost keep the old iterate.  A non-finite residual at
    theta0 is a usage error; a non-finite residual later stalls the solve and
    returns the last good iterate.
    """
    opts = opts or SolverOptions()
    lo, hi = problem.lower, problem.upper
    theta = np.clip(np.asarray(theta0, dtype=float).copy(), lo, hi)

    r = np.asarray(problem.residual(theta))
    n_evals = 1
    if not np.all(np.isfinite(r)):
        raise ValueError("residual is not finite at the initial point")
    cost = float(r @ r)

    lam = opts.lambda0
    status = "max_iter"
    pg = np.inf
    it = 0
    for it in range(1, opts.max_iter + 1):
        J = np.asarray(problem.jacobian(theta))
        grad = 2.0 * (J.T @ r)
        pg = _projected_gradient_norm(theta, grad, lo, hi)
        if pg <= opts.tol_g:
            status = "converged"
            break

        if problem.structure is not None:
            normal = _StructuredNormal(J, problem.structure)
        else:
            normal = _DenseNormal(J)
        rhs = -0.5 * grad

        accepted = False
        while lam <= _LAMBDA_MAX:
            try:
                step = normal.try_step(lam, rhs)
            except np.linalg.LinAlgError:
                lam *= 2.0
                continue
            cand = np.clip(theta + step, lo, hi)
            r_cand = np.asarray(problem.residual(cand))
            n_evals += 1
            if not np.all(np.isfinite(r_cand)):
                return SolveReport(theta, cost, "stalled", it, pg, n_evals)
            cost_cand = float(r_cand @ r_cand)
            if cost_cand < cost:
                moved = float(np.max(np.abs(cand - theta), initial=0.0))
                theta, r, cost = cand, r_cand, cost_cand
                lam = max(lam / 3.0, 1e-12)
                accepted = True
                if moved <= opts.tol_step * (1.0 + float(np.max(np.abs(theta), initial=0.0))):
                    grad = 2.0 * (np.asarray(problem.jacobian(theta)).T @ r)
                    pg = _projected_gradient_norm(theta, grad, lo, hi)
                    status = "converged" if pg <= opts.tol_g else "max_iter"
                    return SolveReport(theta, cost, status, it, pg, n_evals)
                break
            lam *= 2.0
        if not accepted:
            # Damping exhausted without descent; pg > tol_g here or we would
            # have exited at the top of the iteration.
            return SolveReport(theta, cost, "max_iter", it, pg, n_evals)

    if status != "converged" and it == opts.max_iter:
        grad = 2.0 * (np.asarray(problem.jacobian(theta)).T @ r)
        pg = _projected_gradient_norm(theta, grad, lo, hi)
        if pg <= opts.tol_g:
            status = "converged"
    return SolveReport(theta, cost, status, it, pg, n_evals)


def is_convex_window(problem: ResidualProblem, seed: int = 0) -> bool:
    """True iff the residual is affine, detected by Jacobian constancy.

    The Jacobian is evaluated at three random feasible points; an affine
    residual (linear dynamics and output map after single shooting) yields
    the same matrix everywhere, in which case the squared cost is a convex
    quadratic and any stationary point is the global minimum.
    """
    rng = np.random.default_rng(seed)
    lo = np.where(np.isfinite(problem.lower), problem.lower, -1.0)
    hi = np.where(np.isfinite(problem.upper), problem.upper, 1.0)
    thetas = [rng.uniform(lo, hi) for _ in range(3)]
    # copy: jacobian implementations may reuse an internal buffer
    mats = [np.array(problem.jacobian(t), copy=True) for t in thetas]
    scale = max(np.max(np.abs(mats[0]), initial=0.0), 1.0)
    return all(
        np.allclose(mats[0], Mk, rtol=1e-9, atol=1e-11 * scale) for Mk in mats[1:]
    )
