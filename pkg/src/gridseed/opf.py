"""Single-period AC OPF over DG active/reactive setpoints.

The objective per timestep is

    c_el * losses + c_P * sum(p_avail - p_g) + c_Q * sum(|q_g|)

subject to the AC power flow, bus voltage limits, branch thermal limits on
both branch ends and the inverter capability region of every DG.

It is solved by sequential linear programming: around the latest exact power
flow the voltage, flow and loss sensitivities are taken from the Newton
Jacobian, an LP in (dp, q+, q-) is solved inside a trust region, and the step
is accepted against an exact-penalty merit function evaluated with a fresh
power flow. Limit violations enter the LP through penalised slacks so the
subproblem is always feasible; a solution whose slacks stay positive is
returned flagged infeasible.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linprog

from .grid_model import FIXED_UNITY_PF, TYPE1, TYPE2, DGUnit, Network
from .power_flow import PFOptions, PFSolution, jacobian, solve_pf
from .profiles import Forecast, StepForecast

log = logging.getLogger(__name__)


class OPFError(RuntimeError):
    def __init__(self, message: str, trace: list | None = None, t: int | None = None):
        super().__init__(message)
        self.trace = trace or []
        self.t = t


@dataclass(frozen=True)
class ControlCosts:
    c_el: float = 1.0
    c_P: float = 1.0
    c_Q: float = 0.01

    def __post_init__(self):
        if min(self.c_el, self.c_P, self.c_Q) < 0:
            raise ValueError("control costs must be non-negative")
        if not self.c_Q < self.c_P:
            raise ValueError("reactive power must be cheaper than curtailment (c_Q < c_P)")


@dataclass(frozen=True)
class CapabilityRegion:
    kind: str
    cos_phi_max: float
    p_max: float
    s_inv: float

    @classmethod
    def of(cls, dg: DGUnit) -> CapabilityRegion:
        return cls(dg.capability, dg.cos_phi_max, dg.p_max, dg.s_inv)

    @property
    def tan_phi(self) -> float:
        return math.tan(math.acos(self.cos_phi_max))


def capability_bounds(region: CapabilityRegion, p_g: float) -> tuple[float, float]:
    """Reactive power range (q_min, q_max) available at active output ``p_g``."""
    if p_g > region.s_inv + 1e-12:
        raise ValueError(f"p_g={p_g} exceeds inverter rating {region.s_inv}")
    if p_g < -1e-12:
        raise ValueError(f"p_g={p_g} is negative")
    if region.kind == FIXED_UNITY_PF:
        return 0.0, 0.0
    if region.kind == TYPE1:
        q = region.tan_phi * max(p_g, 0.0)
    elif region.kind == TYPE2:
        q = region.tan_phi * region.p_max
    else:
        raise ValueError(f"unknown capability kind {region.kind!r}")
    q = min(q, math.sqrt(max(region.s_inv**2 - p_g**2, 0.0)))
    return -q, q


@dataclass(frozen=True)
class OPFOptions:
    v_tol: float = 1e-4  # certification tolerance, p.u.
    flow_tol: float = 1e-3  # certification tolerance, p.u.
    trust_region: float = 0.1
    step_tol: float = 1e-5
    pred_tol: float = 1e-9  # stop once the LP model promises less merit decrease than this
    max_outer: int = 30
    obj_tol: float = 1e-8  # stop when an accepted step at a feasible point gains less than this
    accept_ratio: float = 0.01  # accept a step when actual / predicted merit decrease exceeds this
    penalty_factor: float = 1e4  # slack penalty = penalty_factor * c_P
    margin: float = 0.0  # internal tightening of voltage limits
    circle_cuts: int = 13
    pf: PFOptions = field(default_factory=PFOptions)


@dataclass
class OPFStepSolution:
    p_g: np.ndarray
    q_g: np.ndarray
    p_avail: np.ndarray
    v: np.ndarray  # bus voltage magnitudes
    pf: PFSolution
    losses: float
    objective: float
    feasible: bool
    converged: bool
    iterations: int
    binding: list[str]
    max_violation: dict
    trace: list = field(default_factory=list)  # (iteration, merit, trust radius, step, outcome)

    @property
    def p_curt(self) -> np.ndarray:
        return self.p_avail - self.p_g

    @property
    def branch_flows(self) -> np.ndarray:
        return self.pf.branch_loading

    def to_dict(self) -> dict:
        return {
            "p_g": self.p_g.tolist(),
            "q_g": self.q_g.tolist(),
            "p_avail": self.p_avail.tolist(),
            "p_curt": self.p_curt.tolist(),
            "v": self.v.tolist(),
            "losses": self.losses,
            "objective": self.objective,
            "feasible": self.feasible,
            "converged": self.converged,
            "iterations": self.iterations,
            "binding": list(self.binding),
        }


def _injections(net: Network, step: StepForecast, p: np.ndarray, q: np.ndarray):
    p_inj = -np.asarray(step.p_load, float).copy()
    q_inj = -np.asarray(step.q_load, float).copy()
    np.add.at(p_inj, net.dg_idx, p)
    np.add.at(q_inj, net.dg_idx, q)
    return p_inj, q_inj


def _violations(net: Network, pf: PFSolution) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    vm = pf.v_mag
    over = np.maximum(vm - net.v_max, 0.0)
    under = np.maximum(net.v_min - vm, 0.0)
    over[net.slack] = under[net.slack] = 0.0
    finite = np.isfinite(net.s_max)
    thermal = np.zeros(len(net.branches))
    thermal[finite] = np.maximum(pf.branch_loading[finite] - net.s_max[finite], 0.0)
    return over, under, thermal


def objective_value(costs: ControlCosts, losses: float, p_avail, p_g, q_g) -> float:
    return float(costs.c_el * losses + costs.c_P * np.sum(np.asarray(p_avail) - np.asarray(p_g))
                 + costs.c_Q * np.sum(np.abs(q_g)))


def _sensitivities(net: Network, pf: PFSolution):
    """Derivatives of |V|, branch |S| at both ends and losses w.r.t. DG (P, Q) injections."""
    v = pf.v
    pq = net.pq
    npq = len(pq)
    pos = {b: k for k, b in enumerate(pq)}
    n_dg = len(net.dgs)
    rhs = np.zeros((2 * npq, 2 * n_dg))
    for i, b in enumerate(net.dg_idx):
        rhs[pos[b], i] += 1.0
        rhs[npq + pos[b], n_dg + i] += 1.0
    x = np.linalg.solve(jacobian(net, v), rhs)
    d_va = np.zeros((net.n_bus, 2 * n_dg))
    d_vm = np.zeros((net.n_bus, 2 * n_dg))
    d_va[pq] = x[:npq]
    d_vm[pq] = x[npq:]
    dv = 1j * v[:, None] * d_va + (v / np.abs(v))[:, None] * d_vm

    f, t, y = net.from_idx, net.to_idx, net.y_series
    i_f = y * (v[f] - v[t])
    d_if = y[:, None] * (dv[f] - dv[t])
    ds_f = dv[f] * np.conj(i_f)[:, None] + v[f][:, None] * np.conj(d_if)
    ds_t = -(dv[t] * np.conj(i_f)[:, None] + v[t][:, None] * np.conj(d_if))
    s_f, s_t = pf.s_from, pf.s_to

    def abs_grad(s, ds):
        mag = np.abs(s)
        safe = np.where(mag > 1e-12, mag, 1.0)
        return np.where(mag[:, None] > 1e-12, (np.conj(s)[:, None] * ds).real / safe[:, None], 0.0)

    g_loss = (ds_f + ds_t).real.sum(axis=0)
    return d_vm, abs_grad(s_f, ds_f), abs_grad(s_t, ds_t), g_loss


class _Problem:
    def __init__(self, net: Network, step: StepForecast, costs: ControlCosts, opt: OPFOptions):
        self.net, self.step, self.costs, self.opt = net, step, costs, opt
        self.p_avail = np.clip(np.asarray(step.p_avail, float), 0.0, None)
        self.regions = [CapabilityRegion.of(g) for g in net.dgs]
        self.fixed = np.array([r.kind == FIXED_UNITY_PF for r in self.regions], dtype=bool)
        self.penalty = opt.penalty_factor * max(costs.c_P, 1.0)

    def power_flow(self, p, q, v0=None) -> PFSolution:
        p_inj, q_inj = _injections(self.net, self.step, p, q)
        return solve_pf(self.net, p_inj, q_inj, self.opt.pf, v0=v0)

    def merit(self, pf: PFSolution, p, q) -> float:
        over, under, thermal = _violations(self.net, pf)
        return objective_value(self.costs, pf.losses, self.p_avail, p, q) + self.penalty * (
            over.sum() + under.sum() + thermal.sum())

    def violation(self, pf: PFSolution) -> float:
        over, under, thermal = _violations(self.net, pf)
        return float(over.sum() + under.sum() + thermal.sum())

    def correction(self, pf: PFSolution, p, q, radius: float):
        """Second-order correction from a trial point, or None if it fails.

        The radius is of the order of the trial point's violation, so the LP
        mostly restores the linearised limits; any slide along them is second
        order small.
        """
        try:
            dp, q_c, _ = self.lp_step(pf, p, q, radius)
        except OPFError:
            return None
        p_c = np.clip(p + dp, 0.0, self.p_avail)
        pf_c = self.power_flow(p_c, q_c, v0=pf.v)
        return (p_c, q_c, pf_c) if pf_c.converged else None

    def lp_step(self, pf: PFSolution, p, q, delta):
        net, c, opt = self.net, self.costs, self.opt
        n = len(p)
        pq = net.pq
        npq = len(pq)
        finite = np.flatnonzero(np.isfinite(net.s_max))
        nth = len(finite)
        d_vm, g_f, g_t, g_loss = _sensitivities(net, pf)
        # variable layout: dp | q+ | q- | s_vu | s_vl | s_th
        nv = 3 * n + 2 * npq + nth
        i_dp, i_qp, i_qm = 0, n, 2 * n
        i_su, i_sl, i_st = 3 * n, 3 * n + npq, 3 * n + 2 * npq

        def expand(sens):  # rows x (dp, dq) -> rows x (dp, q+, q-)
            a = np.zeros((sens.shape[0], nv))
            a[:, i_dp:i_dp + n] = sens[:, :n]
            a[:, i_qp:i_qp + n] = sens[:, n:]
            a[:, i_qm:i_qm + n] = -sens[:, n:]
            return a

        cost = np.zeros(nv)
        cost[:3 * n] = expand(g_loss[None, :])[0, :3 * n] * c.c_el
        cost[i_dp:i_dp + n] -= c.c_P
        cost[i_qp:i_qm + n] += c.c_Q
        cost[i_su:] = self.penalty

        rows, rhs = [], []
        vm = pf.v_mag
        sq_q = d_vm[:, n:] @ q  # linear term folded into rhs since dq = q_new - q
        a_v = expand(d_vm)[pq]
        for k, b in enumerate(pq):
            up = a_v[k].copy()
            up[i_su + k] = -1.0
            rows.append(up)
            rhs.append(net.v_max[b] - opt.margin - vm[b] + sq_q[b])
            lo = -a_v[k]
            lo[i_sl + k] = -1.0
            rows.append(lo)
            rhs.append(vm[b] - net.v_min[b] - opt.margin - sq_q[b])
        loading_f, loading_t = np.abs(pf.s_from), np.abs(pf.s_to)
        for j, br in enumerate(finite):
            for mag, grad in ((loading_f[br], g_f[br]), (loading_t[br], g_t[br])):
                row = expand(grad[None, :])[0]
                row[i_st + j] = -1.0
                rows.append(row)
                rhs.append(net.s_max[br] - mag + grad[n:] @ q)

        bounds = []
        for i in range(n):
            if self.fixed[i]:
                bounds.append((self.p_avail[i] - p[i],) * 2)
            else:
                bounds.append((max(-p[i], -delta), min(self.p_avail[i] - p[i], delta)))
        q_caps = []
        for i, r in enumerate(self.regions):
            if r.kind == TYPE2:
                q_caps.append(r.tan_phi * r.p_max)
            elif r.kind == TYPE1:
                q_caps.append(r.tan_phi * self.p_avail[i])
            else:
                q_caps.append(0.0)
        for _ in range(2):
            bounds.extend((0.0, None if cap > 0 else 0.0) for cap in q_caps)
        bounds.extend((0.0, None) for _ in range(2 * npq + nth))

        for i, r in enumerate(self.regions):
            if self.fixed[i]:
                continue
            # trust region on the reactive setpoint
            row = np.zeros(nv)
            row[i_qp + i], row[i_qm + i] = 1.0, -1.0
            rows.append(row.copy())
            rhs.append(q[i] + delta)
            rows.append(-row)
            rhs.append(delta - q[i])
            if r.kind == TYPE1:
                tan = r.tan_phi
                for sign in (1.0, -1.0):
                    row = np.zeros(nv)
                    row[i_qp + i], row[i_qm + i] = sign, -sign
                    row[i_dp + i] = -tan
                    rows.append(row)
                    rhs.append(tan * p[i])
            elif r.kind == TYPE2:
                rows.append(np.eye(1, nv, i_qp + i)[0])
                rhs.append(q_caps[i])
                rows.append(np.eye(1, nv, i_qm + i)[0])
                rhs.append(q_caps[i])
            if self.p_avail[i] ** 2 + q_caps[i] ** 2 > r.s_inv**2:
                for th in np.linspace(-0.5 * math.pi, 0.5 * math.pi, opt.circle_cuts):
                    row = np.zeros(nv)
                    row[i_dp + i] = math.cos(th)
                    row[i_qp + i], row[i_qm + i] = math.sin(th), -math.sin(th)
                    rows.append(row)
                    rhs.append(r.s_inv - math.cos(th) * p[i])

        res = linprog(cost, A_ub=np.array(rows), b_ub=np.array(rhs), bounds=bounds, method="highs")
        if res.status != 0:
            raise OPFError(f"LP subproblem failed: {res.message}")
        z = res.x
        dp = z[i_dp:i_dp + n]
        q_new = z[i_qp:i_qp + n] - z[i_qm:i_qm + n]
        # model value of the merit function at the step
        model = (c.c_el * (pf.losses + g_loss[:n] @ dp + g_loss[n:] @ (q_new - q))
                 + c.c_P * np.sum(self.p_avail - p - dp)
                 + c.c_Q * np.sum(z[i_qp:i_qm + n])
                 + self.penalty * np.sum(z[i_su:]))
        return dp, q_new, float(model)


def solve_opf_step(net: Network, step: StepForecast, costs: ControlCosts | None = None,
                   options: OPFOptions | None = None) -> OPFStepSolution:
    """Optimal DG setpoints for one timestep."""
    costs = costs or ControlCosts()
    opt = options or OPFOptions()
    prob = _Problem(net, step, costs, opt)
    n = len(net.dgs)
    p = prob.p_avail.copy()
    q = np.zeros(n)
    pf = prob.power_flow(p, q)
    if not pf.converged:
        pf = prob.power_flow(p, q, v0=None)
        if not pf.converged:
            raise OPFError("power flow at the uncontrolled operating point did not converge")
    phi = prob.merit(pf, p, q)
    delta = opt.trust_region
    trace = []
    converged = False
    it = 0
    if n == 0:
        converged = True
    while not converged and it < opt.max_outer:
        it += 1
        dp, q_new, model = prob.lp_step(pf, p, q, delta)
        pred = phi - model
        step_norm = float(max(np.max(np.abs(dp)), np.max(np.abs(q_new - q))))
        if pred <= opt.pred_tol or step_norm < 1e-12:
            converged = True
            trace.append((it, phi, delta, step_norm, "stationary"))
            break
        p_try = np.clip(p + dp, 0.0, prob.p_avail)
        pf_try = prob.power_flow(p_try, q_new, v0=pf.v)
        if not pf_try.converged:
            delta = 0.5 * step_norm
            trace.append((it, phi, delta, step_norm, "pf-diverged"))
            continue
        phi_try = prob.merit(pf_try, p_try, q_new)
        rho = (phi - phi_try) / pred
        if rho < opt.accept_ratio and prob.violation(pf_try) > prob.violation(pf):
            # second-order correction: a step along a curved limit (|S|, |V|)
            # leaves it; re-linearise at the trial point and pull back
            p_c, q_c, pf_c = p_try, q_new, pf_try
            for _ in range(2):
                soc = prob.correction(pf_c, p_c, q_c, 2.0 * prob.violation(pf_c))
                if soc is None:
                    break
                p_c, q_c, pf_c = soc
                phi_c = prob.merit(pf_c, p_c, q_c)
                rho_c = (phi - phi_c) / pred
                if rho_c >= opt.accept_ratio:
                    p_try, q_new, pf_try, phi_try, rho = p_c, q_c, pf_c, phi_c, rho_c
                    step_norm = float(max(np.max(np.abs(p_try - p)), np.max(np.abs(q_new - q))))
                    break
        if rho < opt.accept_ratio:
            # minimiser of the parabola through phi(0), its model slope and phi(1)
            curv = phi_try - phi + pred
            alpha = pred / (2.0 * curv) if curv > 0 else 0.5
            delta = float(np.clip(alpha, 0.25, 0.5)) * step_norm
            trace.append((it, phi, delta, step_norm, "rejected"))
            if delta < opt.step_tol:
                converged = True
            continue
        gain = phi - phi_try
        p, q, pf, phi = p_try, q_new, pf_try, phi_try
        trace.append((it, phi, delta, step_norm, "accepted"))
        if step_norm < opt.step_tol or (gain < opt.obj_tol and prob.violation(pf) == 0.0):
            converged = True
        elif rho < 0.25:
            delta = 0.5 * step_norm
        elif rho > 0.75 and step_norm > 0.9 * delta:
            delta = min(2.0 * delta, opt.trust_region)

    # certify with an independent flat-start power flow
    p_inj, q_inj = _injections(net, step, p, q)
    cert = solve_pf(net, p_inj, q_inj, opt.pf)
    if not cert.converged:
        raise OPFError("certification power flow did not converge", trace)
    over, under, thermal = _violations(net, cert)
    v_viol = float(max(over.max(initial=0.0), under.max(initial=0.0)))
    th_viol = float(thermal.max(initial=0.0))
    feasible = v_viol <= opt.v_tol and th_viol <= opt.flow_tol
    if not converged:
        if not feasible:
            raise OPFError(f"SLP did not converge in {opt.max_outer} iterations", trace)
        log.warning("SLP stopped at the iteration cap with a feasible point (trust region %.2e)", delta)

    binding = _binding(net, prob, cert, p, q)
    return OPFStepSolution(
        p_g=p, q_g=q, p_avail=prob.p_avail, v=cert.v_mag, pf=cert, losses=cert.losses,
        objective=objective_value(costs, cert.losses, prob.p_avail, p, q),
        feasible=feasible, converged=converged, iterations=it, binding=binding,
        max_violation={"voltage": v_viol, "thermal": th_viol}, trace=trace,
    )


def _binding(net: Network, prob: _Problem, pf: PFSolution, p, q, tol: float = 1e-4) -> list[str]:
    out = []
    vm = pf.v_mag
    for k, b in enumerate(net.buses):
        if k == net.slack:
            continue
        if vm[k] >= b.v_max - tol:
            out.append(f"v_max@{b.id}")
        if vm[k] <= b.v_min + tol:
            out.append(f"v_min@{b.id}")
    loading = pf.branch_loading
    for j, br in enumerate(net.branches):
        if math.isfinite(br.s_max) and loading[j] >= br.s_max * (1 - 1e-3):
            out.append(f"thermal@{br.from_bus}-{br.to_bus}")
    for i, (g, r) in enumerate(zip(net.dgs, prob.regions)):
        if p[i] < prob.p_avail[i] - 1e-6:
            out.append(f"p_curt@{g.bus}")
        if r.kind != FIXED_UNITY_PF:
            _, q_hi = capability_bounds(r, min(p[i], r.s_inv))
            if q_hi > 0 and abs(q[i]) >= q_hi - 1e-6:
                out.append(f"q_cap@{g.bus}")
    return out


def solve_opf_horizon(net: Network, forecast: Forecast, costs: ControlCosts | None = None,
                      options: OPFOptions | None = None) -> list[OPFStepSolution]:
    """Independent step solutions over the forecast horizon (no coupling across time)."""
    out = []
    for t in range(forecast.n_steps):
        try:
            out.append(solve_opf_step(net, forecast.step(t), costs, options))
        except OPFError as exc:
            raise OPFError(f"timestep {t}: {exc}", exc.trace, t) from exc
    return out


def day_trace(net: Network, solutions: Sequence[OPFStepSolution]) -> dict:
    """Per-day JSON trace: timestep -> per-DG setpoints and bus voltages."""
    return {
        "buses": [b.id for b in net.buses],
        "dgs": [{"bus": g.bus, "p_max": g.p_max, "s_inv": g.s_inv} for g in net.dgs],
        "steps": [dict(t=t, **sol.to_dict()) for t, sol in enumerate(solutions)],
    }


def save_day_trace(path, net: Network, solutions: Sequence[OPFStepSolution]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(day_trace(net, solutions), fh, indent=1, sort_keys=True)
        fh.write("\n")
