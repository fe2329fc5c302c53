"""Discrete-time LQR synthesis with explicit constraint-force channels.

The plant model is the tangent-space step

    dz1 = A dz + B du + C dlam,    G dz1 = 0,

where dlam is the deviation of the constraint multipliers. The
multipliers are not free inputs: they take whatever value keeps the
next state on the constraint manifold, so the synthesis solves for a
control gain K and a multiplier sensitivity L simultaneously,

    du = -K dz,    dlam = -L dz.

Eliminating the feasibility multiplier with the projected input matrix
D = B - C (GC)^-1 GB reduces each backward step to one saddle solve.
The closed-loop map Abar = A - B K - C L then satisfies G Abar = 0:
feedback keeps every closed-loop direction feasible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (NoConvergence, SingularGC, SingularInnerMatrix,
                     SingularSaddle)


@dataclass
class GainSet:
    """Feedback gain, multiplier sensitivity, cost-to-go, closed loop."""

    K: np.ndarray
    L: np.ndarray
    P: np.ndarray
    Abar: np.ndarray


def _unpack(system):
    if hasattr(system, "A"):
        return system.A, system.B, system.C, system.G
    return system


def _symmetrize(P):
    return 0.5 * (P + P.T)


def _unconstrained_step(A, B, Q, R, P1):
    n = A.shape[0]
    S = R + B.T @ P1 @ B
    if np.linalg.cond(S) > 1e12:
        raise SingularInnerMatrix("R + B'PB is numerically singular")
    K = np.linalg.solve(S, B.T @ P1 @ A)
    Abar = A - B @ K
    P = _symmetrize(Q + K.T @ R @ K + Abar.T @ P1 @ Abar)
    L = np.zeros((0, n))
    return GainSet(K, L, P, Abar)


def _constrained_step(A, B, C, G, Q, R, P1, D, GB, GC):
    m = B.shape[1]
    c = C.shape[1]
    DtP1 = D.T @ P1
    M = np.zeros((m + c, m + c))
    M[:m, :m] = R + DtP1 @ B
    M[:m, m:] = DtP1 @ C
    M[m:, :m] = GB
    M[m:, m:] = GC
    rhs = np.vstack([DtP1 @ A, G @ A])
    try:
        sol = np.linalg.solve(M, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularSaddle(str(exc)) from None
    check = np.max(np.abs(M @ sol - rhs))
    if not np.isfinite(check) or check > 1e-6 * (1.0 + np.max(np.abs(rhs))):
        raise SingularSaddle(f"gain system solve inaccurate ({check:.3e})")
    K = sol[:m]
    L = sol[m:]
    Abar = A - B @ K - C @ L
    P = _symmetrize(Q + K.T @ R @ K + Abar.T @ P1 @ Abar)
    return GainSet(K, L, P, Abar)


def _projection_data(B, C, G):
    GC = G @ C
    if np.linalg.cond(GC) > 1e12:
        raise SingularGC("G C is numerically singular; constraints cannot "
                         "determine the multipliers")
    GB = G @ B
    D = B - C @ np.linalg.solve(GC, GB)
    return D, GB, GC


def riccati_step(A, B, C, G, Q, R, P1):
    """One backward step of the constrained recursion.

    With no constraint rows this reduces exactly to the standard LQR
    backward step.
    """
    A, B, C, G = (np.asarray(x, dtype=float) for x in (A, B, C, G))
    if C.shape[1] == 0:
        return _unconstrained_step(A, B, Q, R, P1)
    D, GB, GC = _projection_data(B, C, G)
    return _constrained_step(A, B, C, G, Q, R, P1, D, GB, GC)


def infinite_horizon(system, Q, R, tol=1e-10, max_iters=200000):
    """Iterate the backward recursion to its fixed point.

    Returns (GainSet, iterations). The projected input matrix and the
    GC factor depend only on the plant, so they are computed once.
    """
    A, B, C, G = (np.asarray(x, dtype=float) for x in _unpack(system))
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    constrained = C.shape[1] > 0
    if constrained:
        D, GB, GC = _projection_data(B, C, G)
    P = _symmetrize(Q)
    for it in range(1, max_iters + 1):
        if constrained:
            gains = _constrained_step(A, B, C, G, Q, R, P, D, GB, GC)
        else:
            gains = _unconstrained_step(A, B, Q, R, P)
        dP = np.max(np.abs(gains.P - P))
        P = gains.P
        if dP < tol * (1.0 + np.max(np.abs(P))):
            return gains, it
    raise NoConvergence(
        f"cost-to-go iteration did not settle in {max_iters} steps "
        f"(last change {dP:.3e})")


def finite_horizon(systems, Q, R, QN=None):
    """Backward sweep along a trajectory of linearized systems.

    systems is a list of per-step models (anything with A, B, C, G or a
    tuple of the four matrices), ordered forward in time. Q is either a
    single state weight or one per step; QN is the terminal weight and
    defaults to the last stage weight. Returns one GainSet per step;
    entry k holds the cost-to-go at time k.
    """
    n_steps = len(systems)
    if isinstance(Q, (list, tuple)):
        Qs = [np.asarray(q, dtype=float) for q in Q]
        if len(Qs) != n_steps:
            raise ValueError(f"{n_steps} steps but {len(Qs)} state weights")
    else:
        Qs = [np.asarray(Q, dtype=float)] * n_steps
    R = np.asarray(R, dtype=float)
    P = _symmetrize(np.asarray(QN, dtype=float)) if QN is not None else \
        _symmetrize(Qs[-1])
    out = [None] * n_steps
    for k in range(n_steps - 1, -1, -1):
        A, B, C, G = (np.asarray(x, dtype=float) for x in _unpack(systems[k]))
        gains = riccati_step(A, B, C, G, Qs[k], R, P)
        P = gains.P
        out[k] = gains
    return out
