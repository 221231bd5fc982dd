"""Newton-Raphson AC power flow in polar coordinates.

Injections are given per bus in per-unit (generation minus load). The slack
entry of the injection vectors is ignored.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid_model import Network


class PowerFlowError(RuntimeError):
    pass


@dataclass(frozen=True)
class PFOptions:
    tol: float = 1e-8
    max_iter: int = 50
    v_slack: float = 1.0


@dataclass
class PFSolution:
    v: np.ndarray  # complex bus voltages
    s_from: np.ndarray
    s_to: np.ndarray
    p_inj: np.ndarray
    q_inj: np.ndarray
    iterations: int
    converged: bool
    mismatch: float
    slack_injection: complex = 0j

    @property
    def v_mag(self) -> np.ndarray:
        return np.abs(self.v)

    @property
    def v_ang(self) -> np.ndarray:
        return np.angle(self.v)

    @property
    def branch_loading(self) -> np.ndarray:
        """max(|S_from|, |S_to|) per branch, p.u."""
        return np.maximum(np.abs(self.s_from), np.abs(self.s_to))

    @property
    def losses(self) -> float:
        return float(np.sum(np.abs((self.s_from + self.s_to).real)))

    def to_dict(self) -> dict:
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "mismatch": self.mismatch,
            "v_mag": self.v_mag.tolist(),
            "v_ang": self.v_ang.tolist(),
            "s_from": [[z.real, z.imag] for z in self.s_from],
            "s_to": [[z.real, z.imag] for z in self.s_to],
            "losses": self.losses,
            "slack_injection": [self.slack_injection.real, self.slack_injection.imag],
        }


def bus_injections(net: Network, p_load=None, q_load=None, p_gen=None, q_gen=None):
    """Net (P, Q) injection vectors from per-bus load and generation arrays."""
    n = net.n_bus
    zero = np.zeros(n)
    p = (zero if p_gen is None else np.asarray(p_gen, float)) - (zero if p_load is None else np.asarray(p_load, float))
    q = (zero if q_gen is None else np.asarray(q_gen, float)) - (zero if q_load is None else np.asarray(q_load, float))
    return p, q


def power_derivatives(ybus: np.ndarray, v: np.ndarray):
    """dS/dVa and dS/dVm of the bus power injections (dense)."""
    i_bus = ybus @ v
    vn = v / np.abs(v)
    dS_dVm = (v[:, None] * np.conj(ybus * vn[None, :])) + np.diag(np.conj(i_bus) * vn)
    dS_dVa = 1j * (np.diag(v * np.conj(i_bus)) - v[:, None] * np.conj(ybus * v[None, :]))
    return dS_dVa, dS_dVm


def jacobian(net: Network, v: np.ndarray) -> np.ndarray:
    """Polar Jacobian over PQ buses, ordered [dP; dQ] x [dVa, dVm]."""
    dS_dVa, dS_dVm = power_derivatives(net.ybus, v)
    pq = net.pq
    a = dS_dVa[np.ix_(pq, pq)]
    m = dS_dVm[np.ix_(pq, pq)]
    return np.block([[a.real, m.real], [a.imag, m.imag]])


def branch_flows(net: Network, v: np.ndarray):
    f, t = net.from_idx, net.to_idx
    i_f = net.y_series * (v[f] - v[t])
    return v[f] * np.conj(i_f), v[t] * np.conj(-i_f)


def solve_pf(net: Network, p_inj, q_inj, options: PFOptions | None = None, v0=None) -> PFSolution:
    """Solve the AC power flow for the given net injections.

    Non-convergence is reported through ``converged=False``; a singular
    Jacobian raises :class:`PowerFlowError`.
    """
    opt = options or PFOptions()
    p_inj = np.asarray(p_inj, dtype=float)
    q_inj = np.asarray(q_inj, dtype=float)
    n = net.n_bus
    if p_inj.shape != (n,) or q_inj.shape != (n,):
        raise ValueError(f"injection vectors must have length {n}")
    ybus, pq, sl = net.ybus, net.pq, net.slack
    npq = len(pq)

    if v0 is None:
        v = np.ones(n, dtype=complex)
    else:
        v = np.array(v0, dtype=complex)
    v[sl] = opt.v_slack
    s_spec = p_inj + 1j * q_inj

    def residual(v):
        s = v * np.conj(ybus @ v)
        d = (s - s_spec)[pq]
        return np.concatenate([d.real, d.imag])

    f = residual(v)
    err = float(np.max(np.abs(f))) if npq else 0.0
    it = 0
    converged = err < opt.tol
    while not converged and it < opt.max_iter:
        try:
            dx = np.linalg.solve(jacobian(net, v), -f)
        except np.linalg.LinAlgError as exc:
            raise PowerFlowError(f"singular Jacobian at iteration {it}") from exc
        va = np.angle(v)
        vm = np.abs(v)
        va[pq] += dx[:npq]
        vm[pq] += dx[npq:]
        v = vm * np.exp(1j * va)
        it += 1
        f = residual(v)
        err = float(np.max(np.abs(f)))
        if not np.isfinite(err) or np.any(vm[pq] <= 0) or np.any(vm > 10):
            break
        converged = err < opt.tol

    if converged and it > 0 and err > 1e-6 * opt.tol:
        # one more Newton step is nearly free near the solution and leaves the
        # residual far below tol, so independent re-evaluations also pass
        try:
            dx = np.linalg.solve(jacobian(net, v), -f)
            vm = np.abs(v)
            va = np.angle(v)
            va[pq] += dx[:npq]
            vm[pq] += dx[npq:]
            v_pol = vm * np.exp(1j * va)
            f_pol = residual(v_pol)
            err_pol = float(np.max(np.abs(f_pol)))
            if err_pol < err:
                v, f, err = v_pol, f_pol, err_pol
        except np.linalg.LinAlgError:
            pass

    s_from, s_to = branch_flows(net, v)
    s_slack = complex(v[sl] * np.conj(ybus[sl] @ v))
    return PFSolution(v, s_from, s_to, p_inj, q_inj, it, bool(converged), err, s_slack)


def transformer_loading(pf: PFSolution, net: Network) -> float:
    """Transformer loading in percent of its rating."""
    k = net.transformer
    return 100.0 * max(abs(pf.s_from[k]), abs(pf.s_to[k])) / net.branches[k].s_max


def losses_percent(losses: float, total_generation: float) -> float:
    if total_generation <= 0:
        raise ValueError("losses percentage needs positive total generation")
    return 100.0 * losses / total_generation
