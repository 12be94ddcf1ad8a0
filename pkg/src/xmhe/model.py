"""System abstractions: dynamics, outputs, Jacobians, constraint boxes.

A model is a discrete-time uncertain system

    x[t+1] = f(x[t], u[t], w[t], p),      y[t] = h(x[t], u[t], w[t], p),

with a known input u, an unknown generalized disturbance w (process noise
and measurement noise stacked into one vector), and an unknown constant
parameter p.  Prior knowledge about states, inputs, disturbances and
parameters is encoded as axis-aligned boxes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Box",
    "SystemModel",
    "Trajectory",
    "ChuaParams",
    "chua_model",
    "scalar_benchmark_model",
    "finite_difference_model_jacobians",
    "check_jacobians",
]


class Box:
    """Axis-aligned box set {v : lo <= v <= hi}; entries may be +-inf."""

    def __init__(self, lo, hi):
        self.lo = np.atleast_1d(np.asarray(lo, dtype=float))
        self.hi = np.atleast_1d(np.asarray(hi, dtype=float))
        if self.lo.shape != self.hi.shape:
            raise ValueError("box bounds must have matching shapes")
        if np.any(self.lo > self.hi):
            raise ValueError("box lower bounds must not exceed upper bounds")

    @property
    def dim(self) -> int:
        return self.lo.size

    def project(self, v) -> np.ndarray:
        """Componentwise clamp of v into the box (idempotent)."""
        v = np.asarray(v, dtype=float)
        if v.shape[-1:] != self.lo.shape and v.shape != self.lo.shape:
            if v.size != self.lo.size:
                raise ValueError(
                    f"vector of size {v.size} cannot be projected into a "
                    f"box of dimension {self.dim}"
                )
        return np.clip(v, self.lo, self.hi)

    def contains(self, v, tol: float = 0.0) -> bool:
        v = np.asarray(v, dtype=float)
        return bool(np.all(v >= self.lo - tol) and np.all(v <= self.hi + tol))

    def sample(self, rng: np.random.Generator, fallback: float = 1.0) -> np.ndarray:
        """Uniform sample; unbounded axes are restricted to [-fallback, fallback]."""
        lo = np.where(np.isfinite(self.lo), self.lo, -fallback)
        hi = np.where(np.isfinite(self.hi), self.hi, fallback)
        return rng.uniform(lo, hi)

    @staticmethod
    def unbounded(dim: int) -> "Box":
        return Box(np.full(dim, -np.inf), np.full(dim, np.inf))

    def __repr__(self):
        return f"Box(lo={self.lo!r}, hi={self.hi!r})"


def _as_vec(v, dim: int, name: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(v, dtype=float))
    if arr.shape != (dim,):
        raise ValueError(f"{name} must have shape ({dim},), got {arr.shape}")
    return arr


@dataclass(frozen=True)
class SystemModel:
    """Immutable system description.

    f, h map (x, u, w, p) to the successor state / measurement.  jac maps the
    same point to the six point Jacobians (A, B, C, D, E, F) of f and h with
    respect to x, w and p:

        A = df/dx (n x n),   B = df/dw (n x q),   E = df/dp (n x o),
        C = dh/dx (p x n),   D = dh/dw (p x q),   F = dh/dp (p x o).
    """

    n: int
    m: int
    p_out: int
    q: int
    o: int
    f: Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    h: Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    jac: Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], tuple]
    X: Box = field(default=None)
    U: Box = field(default=None)
    W: Box = field(default=None)
    P: Box = field(default=None)
    name: str = "model"

    def __post_init__(self):
        for attr, dim in (("X", self.n), ("U", self.m), ("W", self.q), ("P", self.o)):
            if getattr(self, attr) is None:
                object.__setattr__(self, attr, Box.unbounded(dim))
            elif getattr(self, attr).dim != dim:
                raise ValueError(f"{attr} box dimension does not match model")

    def _check_point(self, x, u, w, p):
        return (
            _as_vec(x, self.n, "x"),
            _as_vec(u, self.m, "u"),
            _as_vec(w, self.q, "w"),
            _as_vec(p, self.o, "p"),
        )

    def step(self, x, u, w, p) -> np.ndarray:
        """One application of the dynamics; no constraint projection."""
        x, u, w, p = self._check_point(x, u, w, p)
        out = np.asarray(self.f(x, u, w, p), dtype=float)
        if out.shape != (self.n,):
            raise ValueError(f"f returned shape {out.shape}, expected ({self.n},)")
        return out

    def output(self, x, u, w, p) -> np.ndarray:
        x, u, w, p = self._check_point(x, u, w, p)
        out = np.asarray(self.h(x, u, w, p), dtype=float)
        if out.shape != (self.p_out,):
            raise ValueError(f"h returned shape {out.shape}, expected ({self.p_out},)")
        return out

    def jacobians(self, x, u, w, p) -> tuple:
        """Point Jacobians (A, B, C, D, E, F) at (x, u, w, p)."""
        x, u, w, p = self._check_point(x, u, w, p)
        A, B, C, D, E, F = (np.asarray(M, dtype=float) for M in self.jac(x, u, w, p))
        shapes = {
            "A": (A, (self.n, self.n)),
            "B": (B, (self.n, self.q)),
            "C": (C, (self.p_out, self.n)),
            "D": (D, (self.p_out, self.q)),
            "E": (E, (self.n, self.o)),
            "F": (F, (self.p_out, self.o)),
        }
        for name, (M, want) in shapes.items():
            if M.shape != want:
                raise ValueError(f"Jacobian {name} has shape {M.shape}, expected {want}")
        return A, B, C, D, E, F

    def simulate(self, x0, p, u_seq, w_seq) -> "Trajectory":
        """Roll the dynamics forward; records (without aborting) X violations."""
        x0 = _as_vec(x0, self.n, "x0")
        p = _as_vec(p, self.o, "p")
        w_seq = np.asarray(w_seq, dtype=float).reshape(-1, self.q)
        T = len(w_seq)
        if self.m == 0:
            u_seq = np.zeros((T, 0))
        else:
            u_seq = np.asarray(u_seq, dtype=float).reshape(-1, self.m)
        if len(u_seq) != len(w_seq):
            raise ValueError("u_seq and w_seq must have equal length")
        x_seq = np.empty((T + 1, self.n))
        y_seq = np.empty((T, self.p_out))
        x_seq[0] = x0
        for t in range(T):
            y_seq[t] = self.h(x_seq[t], u_seq[t], w_seq[t], p)
            x_seq[t + 1] = self.f(x_seq[t], u_seq[t], w_seq[t], p)
        in_x = np.array([self.X.contains(x_seq[t]) for t in range(T + 1)])
        return Trajectory(x_seq, u_seq, w_seq, p.copy(), y_seq, in_x)


@dataclass
class Trajectory:
    """A simulated trajectory over [0, T] with its inputs and outputs."""

    x_seq: np.ndarray       # (T+1, n)
    u_seq: np.ndarray       # (T, m)
    w_seq: np.ndarray       # (T, q)
    p: np.ndarray           # (o,)
    y_seq: np.ndarray       # (T, p_out)
    x_in_bounds: np.ndarray  # (T+1,) bool, diagnostic only

    @property
    def T(self) -> int:
        return len(self.u_seq)


def finite_difference_model_jacobians(f, h, n, m, q, o, p_out, h_rel=1e-6):
    """Fallback Jacobian map built from central finite differences."""

    def _fd(fun, args, idx, out_dim):
        base = np.asarray(args[idx], dtype=float)
        J = np.empty((out_dim, base.size))
        for i in range(base.size):
            step = h_rel * (1.0 + abs(base[i]))
            hi = list(args)
            lo = list(args)
            vhi = base.copy()
            vhi[i] += step
            vlo = base.copy()
            vlo[i] -= step
            hi[idx] = vhi
            lo[idx] = vlo
            J[:, i] = (np.asarray(fun(*hi)) - np.asarray(fun(*lo))) / (2 * step)
        return J

    def jac(x, u, w, p):
        args = (x, u, w, p)
        A = _fd(f, args, 0, n)
        B = _fd(f, args, 2, n)
        E = _fd(f, args, 3, n)
        C = _fd(h, args, 0, p_out)
        D = _fd(h, args, 2, p_out)
        F = _fd(h, args, 3, p_out)
        return A, B, C, D, E, F

    return jac


def check_jacobians(model: SystemModel, n_points: int = 100, seed: int = 0,
                    rtol: float = 1e-5) -> float:
    """Cross-validate analytic Jacobians against central finite differences.

    Returns the worst relative deviation max ||analytic - fd|| / (1 + ||analytic||)
    over interior sample points; callers assert it against rtol.
    """
    rng = np.random.default_rng(seed)
    fd = finite_difference_model_jacobians(
        model.f, model.h, model.n, model.m, model.q, model.o, model.p_out
    )
    worst = 0.0
    for _ in range(n_points):
        x = model.X.sample(rng, fallback=2.0)
        u = model.U.sample(rng, fallback=1.0)
        w = model.W.sample(rng, fallback=0.5)
        p = model.P.sample(rng, fallback=1.0)
        exact = model.jacobians(x, u, w, p)
        approx = fd(x, u, w, p)
        for Ma, Mf in zip(exact, approx):
            if Ma.size == 0:
                continue
            dev = np.linalg.norm(Ma - Mf) / (1.0 + np.linalg.norm(Ma))
            worst = max(worst, dev)
    if worst > rtol:
        raise ValueError(f"analytic Jacobians deviate from finite differences: {worst:.3e}")
    return worst


@dataclass(frozen=True)
class ChuaParams:
    """Coefficients of the Euler-discretized modified Chua circuit.

    The cubic coefficient a3 doubles as the uncertain parameter estimated by
    the benchmark; the remaining coefficients are treated as known.
    """

    t_delta: float = 0.01
    b1: float = 12.8
    b2: float = 19.1
    a1: float = 0.6
    a2: float = -1.1
    a3: float = 0.45


# Benchmark prior knowledge: state box, parameter range and disturbance
# amplitudes used throughout the reproduction experiment.
CHUA_STATE_BOX = ((-1.0, -1.0, -3.0), (3.0, 1.0, 3.0))
CHUA_PARAM_BOX = ((0.2,), (0.8,))
CHUA_DISTURBANCE_AMPLITUDES = (1e-3, 1e-3, 1e-3, 0.1)


def chua_model(params: ChuaParams = ChuaParams(),
               w_amplitudes: Sequence[float] = CHUA_DISTURBANCE_AMPLITUDES) -> SystemModel:
    """Chua circuit instance: three states, scalar output y = x1 + w4.

    The system is autonomous (m = 0).  w stacks three process disturbances
    and the measurement noise.  The uncertain parameter is the cubic
    coefficient; the box on it is the benchmark's [0.2, 0.8].
    """
    td, b1, b2 = params.t_delta, params.b1, params.b2
    a1, a2 = params.a1, params.a2

    def f(x, u, w, p):
        x1, x2, x3 = float(x[0]), float(x[1]), float(x[2])
        pp = float(p[0])
        return np.array([
            x1 + td * b1 * (x2 - a1 * x1 - a2 * x1 * x1 - pp * x1 ** 3) + w[0],
            x2 + td * (x1 - x2 + x3) + w[1],
            x3 - td * b2 * x2 + w[2],
        ])

    def h(x, u, w, p):
        return np.array([x[0] + w[3]])

    B = np.zeros((3, 4))
    B[:, :3] = np.eye(3)
    C = np.array([[1.0, 0.0, 0.0]])
    D = np.array([[0.0, 0.0, 0.0, 1.0]])
    F = np.zeros((1, 1))

    def jac(x, u, w, p):
        x1 = float(x[0])
        pp = float(p[0])
        A = np.array([
            [1.0 + td * b1 * (-a1 - 2 * a2 * x1 - 3 * pp * x1 * x1), td * b1, 0.0],
            [td, 1.0 - td, td],
            [0.0, -td * b2, 1.0],
        ])
        E = np.array([[-td * b1 * x1 ** 3], [0.0], [0.0]])
        return A, B, C, D, E, F

    amp = np.asarray(w_amplitudes, dtype=float)
    return SystemModel(
        n=3, m=0, p_out=1, q=4, o=1, f=f, h=h, jac=jac,
        X=Box(*CHUA_STATE_BOX),
        U=Box.unbounded(0),
        W=Box(-amp, amp),
        P=Box(*CHUA_PARAM_BOX),
        name="chua",
    )


def scalar_benchmark_model(a: float = 0.5,
                           x_halfwidth: float = 10.0,
                           p_box=(-2.0, 2.0),
                           w_amplitude: float = 1e-3) -> SystemModel:
    """Scalar affine system x+ = a*x + p + w, y = x.

    Every Jacobian is constant, so window costs are convex quadratics and
    the excitation test is exact; used for desk-scale verification of the
    error-bound machinery.
    """

    def f(x, u, w, p):
        return np.array([a * x[0] + p[0] + w[0]])

    def h(x, u, w, p):
        return np.array([x[0]])

    A = np.array([[a]])
    B = np.array([[1.0]])
    C = np.array([[1.0]])
    D = np.array([[0.0]])
    E = np.array([[1.0]])
    F = np.array([[0.0]])

    def jac(x, u, w, p):
        return A, B, C, D, E, F

    return SystemModel(
        n=1, m=0, p_out=1, q=1, o=1, f=f, h=h, jac=jac,
        X=Box([-x_halfwidth], [x_halfwidth]),
        U=Box.unbounded(0),
        W=Box([-w_amplitude], [w_amplitude]),
        P=Box([p_box[0]], [p_box[1]]),
        name="scalar",
    )
