"""Local inverter control: piecewise-linear Q(V) / curtailment(V) curves and the
damped fixed-point iteration that finds the steady state of a feeder whose
DGs all follow their own curves.

Curve ordinates are normalised: reactive power in p.u. of the unit's inverter
rating ``s_inv`` (positive = injection), curtailment as the fraction of the
currently available active power.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .grid_model import Network
from .opf import CapabilityRegion, capability_bounds
from .power_flow import PFOptions, PFSolution, PowerFlowError, solve_pf
from .profiles import SEASONS, StepForecast

log = logging.getLogger(__name__)

REACTIVE = "reactive_power"
CURTAILMENT = "curtailment_fraction"

NONE = "none"
GERMAN = "german_cosphi"
CURVES = "curves"

# grid-code style reference curves (knots are this package's choice)
Q_CAP = math.sin(math.acos(0.9))
QV_DEADBAND = {1: 0.0, 2: 0.02, 3: 0.05}
PCURT_KNOTS = {
    1: ((0.9, 0.0), (1.08, 0.0), (1.12, 1.0)),
    2: ((0.9, 0.0), (1.10, 0.0), (1.13, 1.0)),
    3: ((0.9, 0.0), (1.10, 0.0), (1.20, 1.0)),
}


class CurveError(ValueError):
    pass


class ClosedLoopError(RuntimeError):
    def __init__(self, message: str, trace: list | None = None):
        super().__init__(message)
        self.trace = trace or []


@dataclass(frozen=True)
class PiecewiseCurve:
    v: np.ndarray
    y: np.ndarray
    y_kind: str = REACTIVE

    def __post_init__(self):
        v = np.array(self.v, dtype=float)
        y = np.array(self.y, dtype=float)
        if v.ndim != 1 or v.shape != y.shape:
            raise CurveError("curve needs matching one-dimensional v and y arrays")
        if len(v) < 2:
            raise CurveError("curve needs at least two points")
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(y))):
            raise CurveError("curve points must be finite")
        if np.any(np.diff(v) <= 0):
            raise CurveError("curve voltages must be strictly increasing")
        if self.y_kind == REACTIVE:
            if np.any(np.diff(y) > 0):
                raise CurveError("reactive power curve must be non-increasing in v")
        elif self.y_kind == CURTAILMENT:
            if np.any(np.diff(y) < 0):
                raise CurveError("curtailment curve must be non-decreasing in v")
        else:
            raise CurveError(f"unknown curve kind {self.y_kind!r}")
        v.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "y", y)

    @classmethod
    def from_points(cls, points, y_kind: str = REACTIVE) -> PiecewiseCurve:
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        return cls(pts[:, 0], pts[:, 1], y_kind)

    @property
    def points(self) -> list[tuple[float, float]]:
        return [(float(a), float(b)) for a, b in zip(self.v, self.y)]

    def __call__(self, v):
        return eval_curve(self, v)

    def __eq__(self, other):
        if not isinstance(other, PiecewiseCurve):
            return NotImplemented
        return (self.y_kind == other.y_kind and np.array_equal(self.v, other.v)
                and np.array_equal(self.y, other.y))

    def __hash__(self):
        return hash((self.y_kind, self.v.tobytes(), self.y.tobytes()))


def eval_curve(curve: PiecewiseCurve, v):
    """Linear interpolation between knots, held constant beyond the end knots."""
    out = np.interp(v, curve.v, curve.y)
    return float(out) if np.ndim(out) == 0 else out


def save_curve(path, curve: PiecewiseCurve) -> None:
    """Lookup-table CSV with ``v,y`` rows; floats are written round-trip exact."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("v", "y"))
        for a, b in curve.points:
            w.writerow((repr(a), repr(b)))


def load_curve(path, y_kind: str = REACTIVE) -> PiecewiseCurve:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != ["v", "y"]:
        raise CurveError(f"{path}: expected a 'v,y' header")
    try:
        pts = [(float(r[0]), float(r[1])) for r in rows[1:] if r]
    except (ValueError, IndexError):
        raise CurveError(f"{path}: malformed curve row") from None
    return PiecewiseCurve.from_points(pts, y_kind)


def german_cosphi(p_g: float, p_max: float, cos_phi_max: float = 0.9) -> float:
    """cos(phi)(P) rule: unity up to half power, then linearly down to cos_phi_max
    (absorbing) at full power."""
    if p_max <= 0:
        return 0.0
    x = min(max(p_g / p_max, 0.0), 1.0)
    if x <= 0.5:
        return 0.0
    cos_phi = 1.0 - (1.0 - cos_phi_max) * (x - 0.5) / 0.5
    return -p_g * math.tan(math.acos(cos_phi))


def builtin_qv(kind: int) -> PiecewiseCurve:
    if kind not in QV_DEADBAND:
        raise CurveError(f"unknown Q(V) type {kind}")
    db = QV_DEADBAND[kind]
    if db == 0:
        pts = [(0.9, Q_CAP), (1.1, -Q_CAP)]
    else:
        pts = [(0.9, Q_CAP), (1.0 - db, 0.0), (1.0 + db, 0.0), (1.1, -Q_CAP)]
    return PiecewiseCurve.from_points(pts, REACTIVE)


def builtin_pcurt(kind: int) -> PiecewiseCurve:
    if kind not in PCURT_KNOTS:
        raise CurveError(f"unknown curtailment type {kind}")
    return PiecewiseCurve.from_points(PCURT_KNOTS[kind], CURTAILMENT)


@dataclass(frozen=True)
class Scheme:
    """What one DG does. ``p_thr`` gates the Q curve: below ``p_thr * p_max`` of
    available power the unit stays at unity power factor."""

    kind: str = NONE
    q_curve: PiecewiseCurve | None = None
    p_curve: PiecewiseCurve | None = None
    p_thr: float = 0.0

    def __post_init__(self):
        if self.kind not in (NONE, GERMAN, CURVES):
            raise CurveError(f"unknown scheme {self.kind!r}")
        if self.q_curve is not None and self.q_curve.y_kind != REACTIVE:
            raise CurveError("q_curve must be a reactive power curve")
        if self.p_curve is not None and self.p_curve.y_kind != CURTAILMENT:
            raise CurveError("p_curve must be a curtailment curve")

    @classmethod
    def none(cls) -> Scheme:
        return cls(NONE)

    @classmethod
    def german(cls) -> Scheme:
        return cls(GERMAN)

    @classmethod
    def qv(cls, kind: int) -> Scheme:
        return cls(CURVES, q_curve=builtin_qv(kind))

    @classmethod
    def pcurt(cls, kind: int) -> Scheme:
        return cls(CURVES, p_curve=builtin_pcurt(kind))

    @classmethod
    def extracted(cls, q_curve, p_curve, p_thr: float = 0.0) -> Scheme:
        return cls(CURVES, q_curve=q_curve, p_curve=p_curve, p_thr=p_thr)


@dataclass(frozen=True)
class ControllerAssignment:
    """Per-DG schemes, optionally switched by season."""

    schemes: tuple = ()
    seasonal: Mapping[str, tuple] | None = None

    def __post_init__(self):
        object.__setattr__(self, "schemes", tuple(self.schemes))
        if self.seasonal is not None:
            if set(self.seasonal) != set(SEASONS):
                missing = sorted(set(SEASONS) - set(self.seasonal))
                raise CurveError(f"seasonal assignment must cover all four seasons, missing {missing}")
            object.__setattr__(self, "seasonal", {s: tuple(self.seasonal[s]) for s in SEASONS})

    @classmethod
    def uniform(cls, net: Network, scheme: Scheme) -> ControllerAssignment:
        return cls(tuple(scheme for _ in net.dgs))

    def for_season(self, season: str | None = None) -> tuple:
        if self.seasonal is None:
            return self.schemes
        if season is None:
            raise CurveError("seasonal assignment needs a season")
        return self.seasonal[season]


@dataclass(frozen=True)
class ClosedLoopOptions:
    damping: float = 0.5
    tol_v: float = 1e-4
    max_iter: int = 100
    max_halvings: int = 3  # damping reductions allowed after a failed power flow
    min_damping: float = 1e-3  # floor for the reductions made when the iteration stalls
    disconnect: bool = False  # trip the unit outside its curve's voltage range
    pf: PFOptions = field(default_factory=PFOptions)


@dataclass
class ClosedLoopResult:
    pf: PFSolution
    p_g: np.ndarray
    q_g: np.ndarray
    p_avail: np.ndarray
    iterations: int
    converged: bool
    trace: list  # max |dV| per iteration
    damping: float

    @property
    def p_curt(self) -> np.ndarray:
        return self.p_avail - self.p_g


def _targets(net: Network, schemes: Sequence[Scheme], p_avail: np.ndarray, vm: np.ndarray,
             disconnect: bool):
    """Setpoints every controller asks for at bus voltages ``vm``."""
    n = len(net.dgs)
    p = p_avail.copy()
    q = np.zeros(n)
    for i, (g, sc) in enumerate(zip(net.dgs, schemes)):
        v = vm[net.dg_idx[i]]
        if sc.kind == NONE:
            continue
        if sc.kind == GERMAN:
            q[i] = german_cosphi(p[i], g.p_max, g.cos_phi_max)
        else:
            if disconnect:
                lo = min(c.v[0] for c in (sc.q_curve, sc.p_curve) if c is not None)
                hi = max(c.v[-1] for c in (sc.q_curve, sc.p_curve) if c is not None)
                if v < lo or v > hi:
                    p[i] = 0.0
                    continue
            if sc.p_curve is not None:
                p[i] = p_avail[i] * (1.0 - min(max(eval_curve(sc.p_curve, v), 0.0), 1.0))
            if sc.q_curve is not None and p_avail[i] > sc.p_thr * g.p_max:
                q[i] = eval_curve(sc.q_curve, v) * g.s_inv
        q_lo, q_hi = capability_bounds(CapabilityRegion.of(g), min(p[i], g.s_inv))
        q[i] = min(max(q[i], q_lo), q_hi)
    return p, q


def _pf(net: Network, step: StepForecast, p, q, opts: PFOptions, v0=None) -> PFSolution:
    p_inj = -np.asarray(step.p_load, float).copy()
    q_inj = -np.asarray(step.q_load, float).copy()
    np.add.at(p_inj, net.dg_idx, p)
    np.add.at(q_inj, net.dg_idx, q)
    return solve_pf(net, p_inj, q_inj, opts, v0=v0)


def simulate_closed_loop(net: Network, step: StepForecast, assignment: ControllerAssignment | Sequence[Scheme],
                         options: ClosedLoopOptions | None = None, season: str | None = None) -> ClosedLoopResult:
    """Steady state of the feeder with every DG following its local scheme.

    Iterates ``u <- u + lam * (f(V(u)) - u)`` from the uncontrolled point,
    halving ``lam`` whenever an iteration fails to shrink the voltage change or
    reverses it without halving it (steep curves otherwise oscillate). It is
    declared converged when an iteration moves no bus voltage by more than
    ``tol_v`` and the undamped controller response at the final voltages
    would not move any bus voltage by more than ``tol_v`` either.
    """
    opt = options or ClosedLoopOptions()
    if not 0 < opt.damping <= 1:
        raise ValueError("damping must be in (0, 1]")
    schemes = assignment.for_season(season) if isinstance(assignment, ControllerAssignment) else tuple(assignment)
    if len(schemes) != len(net.dgs):
        raise ValueError(f"assignment has {len(schemes)} schemes for {len(net.dgs)} DGs")
    p_avail = np.asarray(step.p_avail, dtype=float)
    lam = opt.damping

    p, q = p_avail.copy(), np.zeros(len(net.dgs))
    pf = _pf(net, step, p, q, opt.pf)
    if not pf.converged:
        raise ClosedLoopError("power flow of the uncontrolled point did not converge")
    trace: list[float] = []
    it = 1
    while it <= opt.max_iter:
        p_t, q_t = _targets(net, schemes, p_avail, pf.v_mag, opt.disconnect)
        if np.array_equal(p_t, p) and np.array_equal(q_t, q):
            return ClosedLoopResult(pf, p, q, p_avail, it, True, trace, lam)
        for _ in range(opt.max_halvings + 1):
            p_n = p + lam * (p_t - p)
            q_n = q + lam * (q_t - q)
            try:
                pf_n = _pf(net, step, p_n, q_n, opt.pf, v0=pf.v)
            except PowerFlowError:
                pf_n = None
            if pf_n is not None and pf_n.converged:
                break
            lam *= 0.5
            log.debug("closed loop: power flow failed, damping reduced to %g", lam)
        else:
            raise ClosedLoopError("power flow diverged after repeated damping reductions", trace)
        step_v = pf_n.v_mag - pf.v_mag
        dv = float(np.max(np.abs(step_v)))
        if trace and lam > opt.min_damping:
            # no contraction, or a slowly decaying oscillation: the loop gain
            # is too high for this damping
            stalled = dv >= trace[-1]
            ringing = float(step_v @ last_step) < 0 and dv > 0.5 * trace[-1]
            if stalled or ringing:
                lam = max(0.5 * lam, opt.min_damping)
                log.debug("closed loop: |dV| %.2e not contracting, damping reduced to %g", dv, lam)
        trace.append(dv)
        last_step = step_v
        p, q, pf = p_n, q_n, pf_n
        it += 1
        if dv < opt.tol_v and _certified(net, step, schemes, p_avail, p, q, pf, opt):
            return ClosedLoopResult(pf, p, q, p_avail, it, True, trace, lam)
    log.warning("closed loop did not converge in %d iterations (last dV %.2e)", opt.max_iter,
                trace[-1] if trace else float("nan"))
    return ClosedLoopResult(pf, p, q, p_avail, it - 1, False, trace, lam)


def _certified(net, step, schemes, p_avail, p, q, pf, opt) -> bool:
    p_t, q_t = _targets(net, schemes, p_avail, pf.v_mag, opt.disconnect)
    try:
        check = _pf(net, step, p_t, q_t, opt.pf, v0=pf.v)
    except PowerFlowError:
        return False
    return check.converged and float(np.max(np.abs(check.v_mag - pf.v_mag))) <= opt.tol_v


def fixed_point_residual(net: Network, step: StepForecast, schemes: Sequence[Scheme], result: ClosedLoopResult,
                         options: ClosedLoopOptions | None = None) -> float:
    """max |dV| caused by re-applying every controller at the result's voltages."""
    opt = options or ClosedLoopOptions()
    p_t, q_t = _targets(net, tuple(schemes), result.p_avail, result.pf.v_mag, opt.disconnect)
    check = _pf(net, step, p_t, q_t, opt.pf, v0=result.pf.v)
    return float(np.max(np.abs(check.v_mag - result.pf.v_mag)))
