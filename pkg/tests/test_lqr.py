"""Gain synthesis against independent constructions.

The constrained backward step is checked two ways: against the plain
textbook recursion when there are no constraint channels, and against a
direct KKT solve of the equivalent one-step quadratic program when
there are.
"""

import math

import numpy as np
import pytest

from maxlqr.errors import NoConvergence, SingularGC
from maxlqr.lqr import GainSet, finite_horizon, infinite_horizon, riccati_step

GOLDEN = (1.0 + math.sqrt(5.0)) / 2.0


def empty_channels(n):
    return np.zeros((n, 0)), np.zeros((0, n))


def random_constrained(rng, n=6, m=2, c=2):
    """Random plant with well-conditioned constraint coupling."""
    while True:
        A = rng.standard_normal((n, n)) * 0.5
        B = rng.standard_normal((n, m))
        C = rng.standard_normal((n, c))
        G = rng.standard_normal((c, n))
        if np.linalg.cond(G @ C) < 50.0:
            return A, B, C, G


def kkt_gains(A, B, C, G, R, P1):
    """One-step QP solved directly: minimize du'R du + dz1'P1 dz1 over
    (du, dlam, dz1) subject to dz1 = A dz + B du + C dlam and G dz1 = 0.
    Stationarity and constraints stacked into one symmetric solve."""
    n, m = B.shape
    c = C.shape[1]
    dim = m + c + n + n + c
    M = np.zeros((dim, dim))
    i_u, i_l, i_z = 0, m, m + c
    i_nu, i_rho = m + c + n, m + c + 2 * n
    M[i_u:i_l, i_u:i_l] = R
    M[i_u:i_l, i_nu:i_rho] = B.T
    M[i_l:i_z, i_nu:i_rho] = C.T
    M[i_z:i_nu, i_z:i_nu] = P1
    M[i_z:i_nu, i_nu:i_rho] = -np.eye(n)
    M[i_z:i_nu, i_rho:] = G.T
    M[i_nu:i_rho, i_u:i_l] = B
    M[i_nu:i_rho, i_l:i_z] = C
    M[i_nu:i_rho, i_z:i_nu] = -np.eye(n)
    M[i_rho:, i_z:i_nu] = G
    K = np.zeros((m, n))
    L = np.zeros((c, n))
    for j in range(n):
        rhs = np.zeros(dim)
        rhs[i_nu:i_rho] = -A[:, j]
        sol = np.linalg.solve(M, rhs)
        K[:, j] = -sol[i_u:i_l]
        L[:, j] = -sol[i_l:i_z]
    return K, L


def test_scalar_fixed_point_is_golden_ratio():
    # P = 1 + P/(1+P) has the positive root (1+sqrt(5))/2, and the gain
    # is its reciprocal
    one = np.eye(1)
    gains, iters = infinite_horizon((one, one, *empty_channels(1)), one, one)
    assert gains.P[0, 0] == pytest.approx(GOLDEN, abs=1e-9)
    assert gains.K[0, 0] == pytest.approx(1.0 / GOLDEN, abs=1e-9)
    assert iters < 100


def test_no_constraint_channels_reduce_to_textbook_step():
    rng = np.random.default_rng(11)
    for _ in range(100):
        n, m = 5, 2
        A = rng.standard_normal((n, n))
        B = rng.standard_normal((n, m))
        Q = np.eye(n)
        R = np.eye(m)
        P1 = np.eye(n) * rng.uniform(0.5, 2.0)
        gains = riccati_step(A, B, *empty_channels(n), Q, R, P1)
        # the standard recursion written out
        S = R + B.T @ P1 @ B
        K = np.linalg.solve(S, B.T @ P1 @ A)
        Abar = A - B @ K
        P = Q + K.T @ R @ K + Abar.T @ P1 @ Abar
        assert np.max(np.abs(gains.K - K)) < 1e-12
        assert np.max(np.abs(gains.P - P)) < 1e-12


def test_saddle_gains_agree_with_direct_kkt_solve():
    rng = np.random.default_rng(23)
    for _ in range(100):
        A, B, C, G = random_constrained(rng)
        R = np.eye(2)
        P1 = np.eye(6)
        gains = riccati_step(A, B, C, G, np.eye(6), R, P1)
        K_ref, L_ref = kkt_gains(A, B, C, G, R, P1)
        scale = 1.0 + np.max(np.abs(K_ref))
        assert np.max(np.abs(gains.K - K_ref)) < 1e-8 * scale
        assert np.max(np.abs(gains.L - L_ref)) < 1e-8 * (1.0 + np.max(np.abs(L_ref)))


def test_closed_loop_stays_on_constraint_surface():
    rng = np.random.default_rng(31)
    for _ in range(20):
        A, B, C, G = random_constrained(rng)
        gains = riccati_step(A, B, C, G, np.eye(6), np.eye(2), np.eye(6))
        assert np.max(np.abs(G @ gains.Abar)) < 1e-9


def test_infinite_horizon_stabilizes_random_plants():
    rng = np.random.default_rng(47)
    A = rng.standard_normal((4, 4))
    A *= 1.1 / np.max(np.abs(np.linalg.eigvals(A)))
    B = rng.standard_normal((4, 2))
    gains, _ = infinite_horizon((A, B, *empty_channels(4)),
                                np.eye(4), np.eye(2))
    assert np.max(np.abs(np.linalg.eigvals(gains.Abar))) < 1.0
    eigs = np.linalg.eigvalsh(gains.P)
    assert np.all(eigs > 0.0)


def test_uncontrollable_unstable_plant_raises():
    A = np.eye(3) * 2.0
    B = np.zeros((3, 1))
    with pytest.raises(NoConvergence):
        infinite_horizon((A, B, *empty_channels(3)), np.eye(3), np.eye(1),
                         max_iters=500)


def test_degenerate_constraint_coupling_raises():
    n, m, c = 4, 1, 2
    rng = np.random.default_rng(5)
    A = rng.standard_normal((n, n))
    B = rng.standard_normal((n, m))
    C = np.zeros((n, c))
    G = rng.standard_normal((c, n))
    with pytest.raises(SingularGC):
        riccati_step(A, B, C, G, np.eye(n), np.eye(m), np.eye(n))


def test_finite_horizon_backward_sweep_indexing():
    rng = np.random.default_rng(3)
    n, m = 3, 1
    A = rng.standard_normal((n, n))
    B = rng.standard_normal((n, m))
    sys_k = (A, B, *empty_channels(n))
    Q = np.eye(n)
    R = np.eye(m)
    QN = 3.0 * np.eye(n)
    schedule = finite_horizon([sys_k] * 4, Q, R, QN)
    assert len(schedule) == 4
    # the last entry is one backward step from the terminal weight
    last = riccati_step(A, B, *empty_channels(n), Q, R, QN)
    assert np.allclose(schedule[-1].K, last.K, atol=1e-13)
    # earlier entries accumulate cost, so cost-to-go grows backward
    assert np.trace(schedule[0].P) > np.trace(schedule[-1].P)


def test_finite_horizon_per_step_weights():
    rng = np.random.default_rng(9)
    n, m = 3, 1
    A = 0.9 * np.eye(n)
    B = rng.standard_normal((n, m))
    sys_k = (A, B, *empty_channels(n))
    Qs = [np.eye(n) * (k + 1) for k in range(3)]
    schedule = finite_horizon([sys_k] * 3, Qs, np.eye(m))
    # terminal weight defaults to the last stage weight
    last = riccati_step(A, B, *empty_channels(n), Qs[-1], np.eye(m), Qs[-1])
    assert np.allclose(schedule[-1].P, last.P, atol=1e-13)
    with pytest.raises(ValueError):
        finite_horizon([sys_k] * 3, Qs[:2], np.eye(m))


def test_gain_set_shapes():
    gains = riccati_step(np.eye(2), np.ones((2, 1)), *empty_channels(2),
                         np.eye(2), np.eye(1), np.eye(2))
    assert isinstance(gains, GainSet)
    assert gains.K.shape == (1, 2)
    assert gains.L.shape == (0, 2)
    assert gains.P.shape == (2, 2)
    assert gains.Abar.shape == (2, 2)
