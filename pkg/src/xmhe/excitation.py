"""Online persistence-of-excitation monitoring.

Parameter excitation over an estimation window is scored by a discounted
observability Gramian built from output-injection-stabilized sensitivities.
With Phi = A + L*C the parameter sensitivity Y evolves as

    Y[t+1] = Phi(z_t) Y[t] + E(z_t) + L(z_t) F(z_t),      Y[0] = 0,

its output row is Ybar[t] = C(z_t) Y[t] + F(z_t), and the window score is
the smallest eigenvalue of

    G = sum_t mu^(T-1-t) Ybar[t]^T Ybar[t].

A window counts as excited when that eigenvalue clears a user threshold;
all quantities are evaluated along the current optimal window, the only
trajectory available online.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .model import SystemModel

__all__ = [
    "GainCertificate",
    "MonitorState",
    "phi",
    "advance",
    "gramian_over_window",
    "is_excited",
]


@dataclass(frozen=True)
class GainCertificate:
    """Output-injection gain with its quadratic contraction certificate.

    L maps a point (x, u, w, p) to an n x p_out gain matrix such that
    Phi = A + L*C satisfies Phi^T P Phi <= eta * P on the constraint set,
    with ||L|| <= L_bar.  Validation of those properties lives in the
    certificates module.
    """

    L: Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    P: np.ndarray
    eta: float
    L_bar: float


@dataclass
class MonitorState:
    """Sensitivity and Gramian accumulator state for one window sweep."""

    Y: np.ndarray          # n x o
    G: np.ndarray          # o x o, symmetric PSD
    mu: float
    steps: int = 0

    @staticmethod
    def reset(n: int, o: int, mu: float) -> "MonitorState":
        if not 0.0 < mu < 1.0:
            raise ValueError("monitor discount mu must lie in (0, 1)")
        return MonitorState(np.zeros((n, o)), np.zeros((o, o)), mu, 0)


def phi(model: SystemModel, gain: GainCertificate, x, u, w, p) -> np.ndarray:
    """Closed-loop sensitivity matrix A + L*C at one point."""
    A, _, C, _, _, _ = model.jacobians(x, u, w, p)
    L = np.asarray(gain.L(x, u, w, p), dtype=float)
    return A + L @ C


def advance(ms: MonitorState, model: SystemModel, gain: GainCertificate,
            x, u, w, p) -> MonitorState:
    """One stage of the Gramian sweep.

    The Gramian absorbs the stage output row built from the current Y before
    Y itself is advanced.  Jacobians are taken unchecked for speed; the
    window points come from a validated rollout.
    """
    A, _, C, _, E, F = model.jac(x, u, w, p)
    L = np.asarray(gain.L(x, u, w, p), dtype=float)
    Ybar = C @ ms.Y + F
    G = ms.mu * ms.G + Ybar.T @ Ybar
    Y = (A + L @ C) @ ms.Y + E + L @ F
    return MonitorState(Y, 0.5 * (G + G.T), ms.mu, ms.steps + 1)


def gramian_over_window(points: Sequence[tuple], model: SystemModel,
                        gain: GainCertificate, mu: float):
    """Discounted Gramian over a window of points (x, u, w, p).

    Resets the sensitivity state, sweeps the window, and returns
    (G, alpha) where alpha is the smallest eigenvalue of G.
    """
    if len(points) == 0:
        raise ValueError("excitation window must contain at least one point")
    ms = MonitorState.reset(model.n, model.o, mu)
    for (x, u, w, p) in points:
        ms = advance(ms, model, gain, x, u, w, p)
    alpha = float(np.linalg.eigvalsh(ms.G)[0])
    return ms.G, alpha


def is_excited(alpha_t: float, alpha_threshold: float) -> bool:
    """Threshold test on the window excitation level (boundary inclusive)."""
    return bool(alpha_t >= alpha_threshold)
