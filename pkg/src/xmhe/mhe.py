"""Moving horizon estimator for joint state and parameter estimation.

At each time t the estimator solves a single-shooting window problem over
the last N_t = min(t, N) input/output pairs.  The decision vector stacks the
window-start state, the constant parameter, and the disturbance sequence;
intermediate states are recovered by forward rollout, so the dynamics hold
by construction.  The squared residual norm equals

    gamma(N_t) * ||x0 - xbar||^2_W  +  eta1^N_t * ||p - pbar||^2_V
      + sum_j eta2^(j-1) * ( ||w_{t-j}||^2_Q + ||yhat_{t-j} - y_{t-j}||^2_R )

in prediction form (the newest measurement y_t is not part of the time-t
window), plus a hinge penalty keeping rolled-out states near the state box.

Priors follow the filtering rule for the state and an excitation-gated rule
for the parameter: the parameter anchor moves only when the window that
produced it was excited.  The excitation_aware variant additionally reports
the most recent excitation-backed parameter estimate instead of the raw
window optimum; the naive variant treats every window as excited.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla

from .excitation import GainCertificate, gramian_over_window, is_excited
from .model import SystemModel
from .solver import NormalStructure, ResidualProblem, SolveReport, SolverOptions, solve

__all__ = [
    "MheConfig",
    "MheState",
    "EstimateRecord",
    "MovingHorizonEstimator",
    "gamma",
    "build_window",
    "rmse",
]

VARIANTS = ("naive", "excitation_aware")


def gamma(s: int, eta_x: float, eta_p: float, lambda_gamma: float) -> float:
    """State-prior discount eta_x^s + lambda_gamma * eta_p^s."""
    if s < 0:
        raise ValueError("s must be nonnegative")
    return eta_x ** s + lambda_gamma * eta_p ** s


def rmse(errors: Sequence[np.ndarray]) -> float:
    """Root of the mean squared vector norm over the given samples."""
    if len(errors) == 0:
        raise ValueError("rmse of an empty sequence is undefined")
    sq = [float(np.dot(np.atleast_1d(e), np.atleast_1d(e))) for e in errors]
    return float(np.sqrt(np.mean(sq)))


@dataclass
class MheConfig:
    """Estimator configuration; weights are constant over time."""

    N: int
    eta1: float
    eta2: float
    eta_x: float
    eta_p: float
    lambda_gamma: float
    W: np.ndarray
    V: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    variant: str = "excitation_aware"
    alpha: float = 1e-3
    monitor_mu: float = 0.99
    state_penalty: float = 1e3
    solver: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("horizon N must be at least 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        for name in ("W", "V", "Q", "R"):
            setattr(self, name, np.atleast_2d(np.asarray(getattr(self, name), float)))
        if not (0.0 < self.eta1 < 1.0 and 0.0 < self.eta2 < 1.0):
            raise ValueError("discounts eta1, eta2 must lie in (0, 1)")
        if self.alpha <= 0.0:
            raise ValueError("excitation threshold alpha must be positive")


@dataclass
class MheState:
    """Rolling data buffers and prior anchors of one estimator instance.

    xhat_hist and pbar_hist keep the last N+1 values with hist_start the
    absolute time of their first entry, so the window anchor at t - N_t is
    always addressable.
    """

    t: int
    y_buf: deque
    u_buf: deque
    xhat_hist: deque
    pbar_hist: deque
    hist_start: int
    phat_held: np.ndarray
    phat_last: np.ndarray
    pe_flags: list
    last_solution: Optional[tuple]  # (t, theta_star, x_rollout)

    def anchor(self, tau: int):
        """Prior anchors (xbar_tau, pbar_tau) for a window starting at tau."""
        idx = tau - self.hist_start
        if idx < 0 or idx >= len(self.xhat_hist):
            raise IndexError(f"anchor time {tau} left the history buffer")
        return self.xhat_hist[idx], self.pbar_hist[idx]


@dataclass
class EstimateRecord:
    """Per-step estimator output and diagnostics."""

    t: int
    xhat: np.ndarray
    phat: np.ndarray
    alpha_t: float
    pe: bool
    cost_star: float
    solver_status: str
    window_start_estimate: Optional[np.ndarray] = None
    what_seq: Optional[np.ndarray] = None
    iterations: int = 0
    solve_time: float = 0.0


class _Window:
    """Single-shooting residual for one estimation window.

    theta = [x0 (n), p (o), w_0 .. w_{T-1} (T*q)]; rows are ordered as the
    two prior blocks, the T disturbance blocks, the T output blocks, and the
    T hinge blocks for the rolled-out states.
    """

    def __init__(self, model: SystemModel, cfg: MheConfig, u_win, y_win,
                 xbar, pbar, T: int, roots, discounts):
        self.model = model
        self.cfg = cfg
        self.u_win = u_win
        self.y_win = y_win
        self.xbar = np.asarray(xbar, float)
        self.pbar = np.asarray(pbar, float)
        self.T = T
        n, o, q, p_out = model.n, model.o, model.q, model.p_out
        self.n, self.o, self.q, self.p_out = n, o, q, p_out
        self.dim_theta = n + o + T * q
        self.rW, self.rV, self.rQ, self.rR = roots
        self.disc = discounts                    # eta2^((T-1-k)/2), k = 0..T-1
        self.pen = np.sqrt(cfg.state_penalty)
        self.i_w = n + o
        self.i_y = self.i_w + T * q
        self.i_h = self.i_y + T * p_out
        self.dim_r = self.i_h + T * n
        lo = np.concatenate([model.X.lo, model.P.lo, np.tile(model.W.lo, T)])
        hi = np.concatenate([model.X.hi, model.P.hi, np.tile(model.W.hi, T)])
        self.lower, self.upper = lo, hi
        self.x_lo = np.where(np.isfinite(model.X.lo), model.X.lo, -np.inf)
        self.x_hi = np.where(np.isfinite(model.X.hi), model.X.hi, np.inf)
        self._J = np.zeros((self.dim_r, self.dim_theta))
        blocks = [(slice(0, n), slice(0, n)), (slice(n, n + o), slice(n, n + o))]
        for k in range(T):
            blocks.append((slice(self.i_w + k * q, self.i_w + (k + 1) * q),
                           slice(n + o + k * q, n + o + (k + 1) * q)))
        self.structure = NormalStructure(blocks=tuple(blocks),
                                         dense_rows=slice(self.i_y, self.dim_r))

    def split(self, theta):
        n, o = self.n, self.o
        return (theta[:n], theta[n:n + o],
                theta[n + o:].reshape(self.T, self.q))

    def rollout(self, theta):
        x0, p, w = self.split(theta)
        xs = np.empty((self.T + 1, self.n))
        ys = np.empty((self.T, self.p_out))
        xs[0] = x0
        f, h = self.model.f, self.model.h
        for k in range(self.T):
            ys[k] = h(xs[k], self.u_win[k], w[k], p)
            xs[k + 1] = f(xs[k], self.u_win[k], w[k], p)
        return xs, ys

    def residual(self, theta):
        x0, p, w = self.split(theta)
        xs, ys = self.rollout(theta)
        r = np.empty(self.dim_r)
        r[:self.n] = self.rW @ (x0 - self.xbar)
        r[self.n:self.i_w] = self.rV @ (p - self.pbar)
        r[self.i_w:self.i_y] = (self.disc[:, None] * (w @ self.rQ.T)).ravel()
        r[self.i_y:self.i_h] = (self.disc[:, None]
                                * ((ys - self.y_win) @ self.rR.T)).ravel()
        viol = np.maximum(self.x_lo - xs[1:], 0.0) + np.maximum(xs[1:] - self.x_hi, 0.0)
        r[self.i_h:] = (self.pen * viol).ravel()
        return r

    def jacobian(self, theta):
        """Analytic Jacobian by forward sensitivity propagation.

        Returns an internal buffer that is overwritten by the next call.
        """
        x0, p, w = self.split(theta)
        n, o, q, p_out, T = self.n, self.o, self.q, self.p_out, self.T
        J = self._J
        J[self.i_h:] = 0.0                      # hinge rows are written sparsely
        J[:n, :n] = self.rW
        J[n:self.i_w, n:n + o] = self.rV
        S = np.zeros((n, self.dim_theta))
        S2 = np.empty_like(S)
        S[:, :n] = np.eye(n)
        xs, _ = self.rollout(theta)
        jac = self.model.jac
        for k in range(T):
            A, B, C, D, E, F = jac(xs[k], self.u_win[k], w[k], p)
            d = self.disc[k]
            wcol = n + o + k * q
            row_w = self.i_w + k * q
            J[row_w:row_w + q, wcol:wcol + q] = d * self.rQ
            row_y = self.i_y + k * p_out
            np.matmul((d * self.rR) @ C, S, out=J[row_y:row_y + p_out])
            J[row_y:row_y + p_out, n:n + o] += (d * self.rR) @ F
            J[row_y:row_y + p_out, wcol:wcol + q] += (d * self.rR) @ D
            np.matmul(A, S, out=S2)
            S, S2 = S2, S
            S[:, n:n + o] += E
            S[:, wcol:wcol + q] += B
            x_next = xs[k + 1]
            over = x_next > self.x_hi
            under = x_next < self.x_lo
            if over.any() or under.any():
                sign = over.astype(float) - under.astype(float)
                row_h = self.i_h + k * n
                J[row_h:row_h + n] = (self.pen * sign)[:, None] * S
        return J

    def as_problem(self) -> ResidualProblem:
        prob = ResidualProblem(
            residual=self.residual, jacobian=self.jacobian,
            lower=self.lower, upper=self.upper,
            dim_theta=self.dim_theta, dim_r=self.dim_r,
            structure=self.structure,
        )
        prob.window = self
        return prob


def build_window(model: SystemModel, cfg: MheConfig, state: MheState) -> ResidualProblem:
    """Window problem for the estimator's current time; t >= 1 required."""
    t = state.t
    if t < 1:
        raise ValueError("no estimation window exists at t = 0")
    T = min(t, cfg.N)
    u_win = list(state.u_buf)[-T:]
    y_win = np.asarray(list(state.y_buf)[-T:], float).reshape(T, model.p_out)
    xbar, pbar = state.anchor(t - T)
    roots, disc = _weight_roots(model, cfg, T)
    win = _Window(model, cfg, u_win, y_win, xbar, pbar, T, roots, disc)
    return win.as_problem()


def _weight_roots(model: SystemModel, cfg: MheConfig, T: int):
    """Square-root weight factors for a window of length T (cached on cfg)."""
    cache = cfg.__dict__.setdefault("_root_cache", {})
    hit = cache.get(T)
    if hit is not None:
        return hit
    cW = sla.cholesky(cfg.W, lower=False)
    cV = sla.cholesky(cfg.V, lower=False)
    cQ = sla.cholesky(cfg.Q, lower=False)
    cR = sla.cholesky(cfg.R, lower=False)
    g = gamma(T, cfg.eta_x, cfg.eta_p, cfg.lambda_gamma)
    roots = (np.sqrt(g) * cW, np.sqrt(cfg.eta1 ** T) * cV, cQ, cR)
    disc = cfg.eta2 ** (0.5 * (T - 1 - np.arange(T)))
    cache[T] = (roots, disc)
    return roots, disc


class MovingHorizonEstimator:
    """Sequential estimator; one instance per estimated plant.

    A GainCertificate enables the excitation monitor; without one the
    monitor reports zero excitation (every window counts as non-excited for
    the excitation_aware variant, while the naive variant never consults it).
    """

    def __init__(self, model: SystemModel, cfg: MheConfig, xhat0, phat0,
                 gain: Optional[GainCertificate] = None):
        self.model = model
        self.cfg = cfg
        self.gain = gain
        xhat0 = model.X.project(np.asarray(xhat0, float))
        phat0 = model.P.project(np.asarray(phat0, float))
        self.state = MheState(
            t=0,
            y_buf=deque(maxlen=cfg.N),
            u_buf=deque(maxlen=cfg.N),
            xhat_hist=deque([xhat0.copy()], maxlen=cfg.N + 1),
            pbar_hist=deque([phat0.copy()], maxlen=cfg.N + 1),
            hist_start=0,
            phat_held=phat0.copy(),
            phat_last=phat0.copy(),
            pe_flags=[False],
            last_solution=None,
        )
        self._record0 = EstimateRecord(
            t=0, xhat=xhat0.copy(), phat=phat0.copy(), alpha_t=0.0, pe=False,
            cost_star=0.0, solver_status="prior",
        )

    def initial_record(self) -> EstimateRecord:
        """The t = 0 output: the priors themselves (no window exists yet)."""
        return self._record0

    # -- warm starting ------------------------------------------------------

    def _warm_start(self, T: int, xbar, pbar):
        st = self.state
        n, o, q = self.model.n, self.model.o, self.model.q
        theta0 = np.concatenate([xbar, pbar, np.zeros(T * q)])
        prev = st.last_solution
        if prev is not None:
            t_prev, theta_prev, xs_prev = prev
            T_prev = min(t_prev, self.cfg.N)
            w_prev = theta_prev[n + o:].reshape(T_prev, q)
            s_prev = t_prev - T_prev
            s_now = st.t - T
            w0 = np.zeros((T, q))
            if s_now == s_prev:                       # growing window
                theta0[:n] = theta_prev[:n]
                w0[:T_prev] = w_prev
            elif s_now == s_prev + 1:                 # sliding window
                theta0[:n] = xs_prev[1]
                w0[:T_prev - 1] = w_prev[1:]
            theta0[n:n + o] = theta_prev[n:n + o]
            theta0[n + o:] = w0.ravel()
        lo = np.concatenate([self.model.X.lo, self.model.P.lo,
                             np.tile(self.model.W.lo, T)])
        hi = np.concatenate([self.model.X.hi, self.model.P.hi,
                             np.tile(self.model.W.hi, T)])
        return np.clip(theta0, lo, hi)

    # -- main step ----------------------------------------------------------

    def estimate_step(self, u_prev, y_prev) -> EstimateRecord:
        """Advance one time step with the newest input/output pair appended."""
        st = self.state
        model, cfg = self.model, self.cfg
        st.u_buf.append(np.atleast_1d(np.asarray(u_prev, float)))
        st.y_buf.append(np.atleast_1d(np.asarray(y_prev, float)))
        st.t += 1
        t = st.t
        T = min(t, cfg.N)
        xbar, pbar = st.anchor(t - T)

        problem = build_window(model, cfg, st)
        win = problem.window
        theta0 = self._warm_start(T, xbar, pbar)
        t_solve = time.perf_counter()
        report = solve(problem, theta0, cfg.solver)
        t_solve = time.perf_counter() - t_solve

        if report.status == "stalled":
            return self._failed_step(report, t_solve)

        xs, _ = win.rollout(report.theta)
        x0_star, p_star, w_star = win.split(report.theta)
        xhat = model.X.project(xs[-1])

        alpha_t = 0.0
        if self.gain is not None:
            points = [(xs[k], win.u_win[k], w_star[k], p_star) for k in range(T)]
            _, alpha_t = gramian_over_window(points, model, self.gain, cfg.monitor_mu)
        pe_flag = is_excited(alpha_t, cfg.alpha)

        if pe_flag:
            st.phat_held = p_star.copy()
        if cfg.variant == "naive":
            phat = p_star.copy()
            gate = True
        else:
            phat = st.phat_held.copy()
            gate = pe_flag

        self._update_priors(xhat, p_star, gate, pe_flag, t, T)
        st.last_solution = (t, report.theta, xs)
        st.phat_last = phat.copy()
        return EstimateRecord(
            t=t, xhat=xhat, phat=phat, alpha_t=alpha_t, pe=pe_flag,
            cost_star=report.cost, solver_status=report.status,
            window_start_estimate=x0_star.copy(), what_seq=w_star.copy(),
            iterations=report.iterations, solve_time=t_solve,
        )

    # spec-facing alias
    step = estimate_step

    def _update_priors(self, xhat, p_star, gate: bool, pe_flag: bool,
                       t: int, T: int):
        """Filtering state prior; excitation-gated parameter prior."""
        st = self.state
        if gate and t >= self.cfg.N:
            pbar_new = p_star.copy()
        else:
            _, pbar_new = st.anchor(t - T)
            pbar_new = pbar_new.copy()
        if len(st.xhat_hist) == st.xhat_hist.maxlen:
            st.hist_start += 1
        st.xhat_hist.append(np.asarray(xhat, float).copy())
        st.pbar_hist.append(pbar_new)
        st.pe_flags.append(pe_flag)

    def _failed_step(self, report: SolveReport, t_solve: float) -> EstimateRecord:
        """Fallback on solver failure: propagate the previous estimate one
        step with zero disturbance; priors are not updated from the failed
        solution."""
        st = self.state
        model = self.model
        t = st.t
        T = min(t, self.cfg.N)
        idx = (t - 1) - st.hist_start
        x_prev = st.xhat_hist[idx]
        p_prev = st.phat_last
        xhat = model.X.project(
            model.step(x_prev, st.u_buf[-1], np.zeros(model.q), p_prev)
        )
        self._update_priors(xhat, p_prev, False, False, t, T)
        st.last_solution = None
        st.phat_last = np.asarray(p_prev, float).copy()
        return EstimateRecord(
            t=t, xhat=xhat, phat=np.asarray(p_prev, float).copy(),
            alpha_t=0.0, pe=False, cost_star=report.cost,
            solver_status=report.status, iterations=report.iterations,
            solve_time=t_solve,
        )
