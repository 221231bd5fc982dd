"""Independent reference solutions used by the test suite.

Nothing here imports the package's solvers: the two-bus power flow is solved
in closed form and small chains by a vectorised backward/forward sweep, so the
oracles can check the Newton-Raphson and SLP code rather than echo it.
"""
from __future__ import annotations

import numpy as np


def two_bus_voltage(p_inj, q_inj, r, x, v1=1.0):
    """|V2| of a slack bus feeding bus 2 through z = r + jx.

    ``p_inj``/``q_inj`` are the net injections at bus 2 (generation minus
    load) and may be arrays.  Solves the quartic
    ``|V2|^4 + (2 (r P_L + x Q_L) - |V1|^2) |V2|^2 + |z|^2 |S_L|^2 = 0``
    with ``S_L = -(p_inj + j q_inj)`` for its high-voltage root.
    """
    p_l = -np.asarray(p_inj, dtype=float)
    q_l = -np.asarray(q_inj, dtype=float)
    b = 2.0 * (r * p_l + x * q_l) - v1**2
    c = (r * r + x * x) * (p_l * p_l + q_l * q_l)
    disc = b * b - 4.0 * c
    with np.errstate(invalid="ignore"):
        u = (-b + np.sqrt(disc)) / 2.0
    return np.sqrt(np.where(disc >= 0, u, np.nan))


def two_bus_losses(p_inj, q_inj, r, x, v1=1.0):
    """Series losses of the two-bus system, |S2|^2 r / |V2|^2."""
    v2 = two_bus_voltage(p_inj, q_inj, r, x, v1)
    s2 = np.asarray(p_inj, float) ** 2 + np.asarray(q_inj, float) ** 2
    return s2 * r / v2**2


def two_bus_sending_power(p_inj, q_inj, r, x, v1=1.0):
    """|S| at the slack end of the two-bus line."""
    v2 = two_bus_voltage(p_inj, q_inj, r, x, v1)
    s2 = np.asarray(p_inj, float) ** 2 + np.asarray(q_inj, float) ** 2
    i2 = s2 / v2**2
    p1 = -np.asarray(p_inj, float) + i2 * r
    q1 = -np.asarray(q_inj, float) + i2 * x
    return np.hypot(p1, q1)


def chain_sweep(z, s_inj, v1=1.0, tol=1e-13, max_iter=200):
    """Backward/forward sweep on a chain slack - 1 - 2 - ... - n.

    :param z: complex series impedances, ``z[k]`` connects node k to node k+1
              (node 0 is the slack)
    :param s_inj: complex net injections at nodes 1..n, shape (n, ...) so a
                  whole lattice of operating points is solved at once
    :returns: (complex node voltages shape (n+1, ...), complex branch
               currents shape (n, ...), flag array of converged points)
    """
    z = np.asarray(z, dtype=complex)
    s_inj = np.asarray(s_inj, dtype=complex)
    n = len(z)
    shape = s_inj.shape[1:]
    v = np.ones((n + 1,) + shape, dtype=complex) * v1
    done = np.zeros(shape, dtype=bool)
    i_br = np.zeros((n,) + shape, dtype=complex)
    for _ in range(max_iter):
        i_node = np.conj(s_inj / v[1:])  # current injected at each node
        # backward: branch k carries the load current of every node downstream
        i_br = -np.cumsum(i_node[::-1], axis=0)[::-1]
        v_new = np.empty_like(v)
        v_new[0] = v1
        for k in range(n):
            v_new[k + 1] = v_new[k] - z[k] * i_br[k]
        change = np.max(np.abs(v_new - v), axis=0)
        v = v_new
        done = change < tol
        if np.all(done):
            break
    return v, i_br, done


def chain_quantities(z, s_inj, v1=1.0):
    """Voltage magnitudes, losses and max branch |S| (both ends) on a chain."""
    v, i_br, ok = chain_sweep(z, s_inj, v1)
    z = np.asarray(z, dtype=complex)
    zz = z.reshape((-1,) + (1,) * (s_inj.ndim - 1))
    losses = np.sum(np.abs(i_br) ** 2 * zz.real, axis=0)
    s_send = np.abs(v[:-1] * np.conj(i_br))
    s_recv = np.abs(v[1:] * np.conj(i_br))
    return np.abs(v), losses, np.maximum(s_send, s_recv), ok


def two_bus_droop_equilibrium(p_inj, r, x, v_knots, q_knots, v1=1.0):
    """Bus-2 voltage where a Q(V) droop line meets the network's V(Q) curve.

    ``q_knots`` are absolute reactive injections (p.u.) at ``v_knots``; the
    droop is linear between them and flat outside.  Returns (v, q).
    """
    from scipy.optimize import brentq

    def droop(v):
        return float(np.interp(v, v_knots, q_knots))

    def gap(v):
        return float(two_bus_voltage(p_inj, droop(v), r, x, v1)) - v

    v = brentq(gap, 0.8, 1.2, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    return v, droop(v)
