"""Per-DG Q(V) and curtailment(V) curves derived from OPF setpoint traces.

For every DG the optimal (setpoint, local voltage) pairs of a day are
filtered and sorted by voltage, reduced to a monotone sequence, completed
with template knots so that the curve covers the whole protection range and
finally flattened wherever a segment is steeper than ``tan(phi_thr)``.

Sample values are normalised: reactive power in p.u. of the unit's ``s_inv``,
curtailment as the fraction of available power (or of ``p_max`` in absolute
mode), active output in p.u. of ``p_max``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .grid_model import Network
from .local_control import CURTAILMENT, REACTIVE, ControllerAssignment, PiecewiseCurve, Scheme, save_curve
from .opf import OPFStepSolution, day_trace
from .profiles import SEASONS

log = logging.getLogger(__name__)

# where the monotone Q sequence starts: the first sorted sample with capacitive
# output >= Q_thr_ind, or the maximum-Q sample (when max >= / > Q_thr_ind);
# all fall back to the first sorted sample
FIRST_CAPACITIVE = "first_capacitive"
MAX_Q = "max_q"
PSEUDOCODE = "pseudocode"
CAP = "cap"
SHIFT = "shift"
FRACTION = "fraction"
ABSOLUTE = "absolute"


class ExtractionError(ValueError):
    pass


@dataclass(frozen=True)
class SamplePair:
    value: float
    v_opf: float
    p_g: float
    t: int = 0

    def __post_init__(self):
        if not 0.5 < self.v_opf < 1.5:
            raise ExtractionError(f"sample voltage {self.v_opf} outside (0.5, 1.5) p.u.")


@dataclass(frozen=True)
class CurveTemplate:
    V1: float = 0.88
    V2: float = 0.90
    V3: float = 0.92
    V6: float = 1.079
    V8: float = 1.08
    V9: float = 1.10
    V10: float = 1.30
    Q1: float = 1.0
    Q4: float = -1.0
    V1P: float = 0.88
    V2P: float = 0.92
    V4P: float = 1.10
    V5P: float = 1.12
    V6P: float = 1.30
    P1: float = 1.0

    def __post_init__(self):
        if not self.V1 < self.V2 < self.V3 < self.V6 <= self.V8 < self.V9 < self.V10:
            raise ExtractionError("template needs V1 < V2 < V3 < V6 <= V8 < V9 < V10")
        if not self.Q1 > 0 > self.Q4:
            raise ExtractionError("template needs Q1 > 0 > Q4")
        if not self.V1P < self.V2P < self.V4P < self.V5P < self.V6P:
            raise ExtractionError("template needs V1P < V2P < V4P < V5P < V6P")
        if not self.P1 > 0:
            raise ExtractionError("template needs P1 > 0")

    @property
    def reactive_first(self) -> bool:
        """True when curtailment cannot start before the Q curve saturates (V2P >= V9)."""
        return self.V2P >= self.V9


@dataclass(frozen=True)
class ExtractionParams:
    P_thr: float = 0.1
    Q_thr_ind: float = 0.1
    phi_thr: float = 88.85  # degrees
    template: CurveTemplate = field(default_factory=CurveTemplate)
    init_rule: str = FIRST_CAPACITIVE
    curtail_mode: str = FRACTION
    slope_rule: str = CAP
    min_gap: float = 1e-9

    def __post_init__(self):
        if self.init_rule not in (FIRST_CAPACITIVE, MAX_Q, PSEUDOCODE):
            raise ExtractionError(f"unknown init rule {self.init_rule!r}")
        if self.slope_rule not in (CAP, SHIFT):
            raise ExtractionError(f"unknown slope rule {self.slope_rule!r}")
        if self.curtail_mode not in (FRACTION, ABSOLUTE):
            raise ExtractionError(f"unknown curtailment mode {self.curtail_mode!r}")
        if not 0 < self.phi_thr < 90:
            raise ExtractionError("phi_thr must be in (0, 90) degrees")

    @property
    def tan_thr(self) -> float:
        return math.tan(math.radians(self.phi_thr))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> ExtractionParams:
        d = dict(d)
        if "template" in d and not isinstance(d["template"], CurveTemplate):
            d["template"] = CurveTemplate(**d["template"])
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class CurvePair:
    q_curve: PiecewiseCurve
    p_curve: PiecewiseCurve
    q_template_only: bool = False
    p_template_only: bool = False
    warnings: tuple = ()

    @property
    def template_only(self) -> bool:
        return self.q_template_only and self.p_template_only


# --- the individual steps ---------------------------------------------------

def _retain(samples: Sequence[SamplePair], p_thr: float, v_lo: float = 0.0, v_hi: float = math.inf,
            notes: list | None = None, label: str = "") -> list[SamplePair]:
    """Keep samples with real injection inside (v_lo, v_hi], ascending in voltage (stable)."""
    active = [s for s in samples if s.p_g > p_thr]
    kept = [s for s in active if v_lo < s.v_opf <= v_hi]
    if notes is not None and len(kept) < len(active):
        notes.append(f"{label}: dropped {len(active) - len(kept)} samples outside ({v_lo:.6g}, {v_hi:.6g}] p.u.")
    return sorted(kept, key=lambda s: s.v_opf)


def _window(v_first: float, v_last: float, swing: float, tan_thr: float) -> tuple[float, float]:
    # the curve must open with the template knot at v_first, and slope limiting
    # moves knots right by at most swing / tan_thr in total, so samples left of
    # the upper bound cannot push the closing template knot past v_last
    return v_first, v_last - swing / tan_thr - 1e-6


def _monotone_q(sorted_s1: Sequence[SamplePair], q_thr: float, rule: str) -> list[SamplePair]:
    values = [s.value for s in sorted_s1]
    q_max = max(values)
    if rule == FIRST_CAPACITIVE:
        start = next((k for k, q in enumerate(values) if q >= q_thr), 0)
    else:
        use_max = q_max >= q_thr if rule == MAX_Q else not q_max <= q_thr
        start = values.index(q_max) if use_max else 0
    kept = [sorted_s1[start]]
    for s in sorted_s1[start + 1:]:
        if s.value <= kept[-1].value:
            kept.append(s)
    return kept


def _monotone_p(sorted_s2: Sequence[SamplePair]) -> list[SamplePair]:
    kept = [sorted_s2[0]]
    for s in sorted_s2[1:]:
        if s.value >= kept[-1].value:
            kept.append(s)
    return kept


def _append(pts: list, v: float, y: float, notes: list, label: str) -> None:
    # a template knot that would land left of the curve's end is already covered
    if v < pts[-1][0]:
        notes.append(f"{label}: skipped template knot at v={v:g} (curve already extends to {pts[-1][0]:g})")
        return
    pts.append((v, y))


def _complete_q(pts: list, tm: CurveTemplate, notes: list) -> list:
    if pts[0][0] >= tm.V3:
        pts = [(tm.V1, tm.Q1), (tm.V2, tm.Q1), (tm.V3, pts[0][1])] + pts
    if pts[-1][1] >= 0:
        _append(pts, pts[-1][0], 0.0, notes, "q")
        _append(pts, tm.V6, 0.0, notes, "q")
    if pts[-1][0] <= tm.V8:
        y_end = pts[-1][1]
        _append(pts, tm.V8, y_end, notes, "q")
        _append(pts, tm.V9, tm.Q4, notes, "q")
        _append(pts, tm.V10, tm.Q4, notes, "q")
    # close the protection range if the trace reached past the template knots
    if pts[0][0] > tm.V1:
        pts.insert(0, (tm.V1, max(tm.Q1, pts[0][1])))
    if pts[-1][0] < tm.V10:
        pts.append((tm.V10, min(tm.Q4, pts[-1][1])))
    return pts


def _complete_p(pts: list, tm: CurveTemplate, notes: list) -> list:
    if pts[0][0] >= tm.V2P:
        pts = [(tm.V1P, 0.0), (tm.V2P, 0.0)] + pts
    if pts[-1][0] <= tm.V4P:
        y_end = pts[-1][1]
        _append(pts, tm.V4P, y_end, notes, "p")
        _append(pts, tm.V5P, tm.P1, notes, "p")
        _append(pts, tm.V6P, tm.P1, notes, "p")
    if pts[0][0] > tm.V1P:
        pts.insert(0, (tm.V1P, min(0.0, pts[0][1])))
    if pts[-1][0] < tm.V6P:
        pts.append((tm.V6P, max(tm.P1, pts[-1][1])))
    return pts


def _dedupe(pts: list) -> list:
    out = [pts[0]]
    for p in pts[1:]:
        if p != out[-1]:
            out.append(p)
    return out


def limit_slope(pts: Sequence[tuple], tan_thr: float, min_gap: float = 1e-9,
                notes: list | None = None, rule: str = CAP) -> list:
    """Move knots right wherever a segment is steeper than ``tan_thr``.

    ``CAP`` places the later knot of a too-steep segment exactly |dy| / tan_thr
    right of its predecessor, so the segment ends at the slope cap. ``SHIFT``
    moves it right by |dy| / tan_thr from where it was. Either way a knot is
    kept at least ``min_gap`` right of its predecessor.
    """
    out = [tuple(map(float, pts[0]))]
    for v, y in pts[1:]:
        v, y = float(v), float(y)
        v_prev, y_prev = out[-1]
        dy = abs(y - y_prev)
        if dy > tan_thr * (v - v_prev) or v <= v_prev:
            need = max(dy / tan_thr, min_gap)
            if rule == SHIFT:
                v = max(v + dy / tan_thr, v_prev + need)
            else:
                v = v_prev + need
            while dy > tan_thr * (v - v_prev):  # rounding of v_prev + need
                v = math.nextafter(v, math.inf)
            if dy == 0:
                if notes is not None:
                    notes.append(f"duplicate voltage {v_prev:.9f} after slope limiting, perturbed by {min_gap:g}")
                log.debug("duplicate voltage %.9f after slope limiting, perturbed", v_prev)
        out.append((v, y))
    return out


def _template_q(tm: CurveTemplate) -> list:
    return [(tm.V1, tm.Q1), (tm.V2, tm.Q1), (tm.V3, 0.0), (tm.V6, 0.0), (tm.V8, 0.0),
            (tm.V9, tm.Q4), (tm.V10, tm.Q4)]


def _template_p(tm: CurveTemplate) -> list:
    return [(tm.V1P, 0.0), (tm.V2P, 0.0), (tm.V4P, 0.0), (tm.V5P, tm.P1), (tm.V6P, tm.P1)]


def template_curves(params: ExtractionParams | None = None) -> CurvePair:
    """Curves used when a DG has no usable samples."""
    prm = params or ExtractionParams()
    q = limit_slope(_template_q(prm.template), prm.tan_thr, prm.min_gap, rule=prm.slope_rule)
    p = limit_slope(_template_p(prm.template), prm.tan_thr, prm.min_gap, rule=prm.slope_rule)
    return CurvePair(PiecewiseCurve.from_points(q, REACTIVE), PiecewiseCurve.from_points(p, CURTAILMENT),
                     True, True)


def extract_curves(s1: Sequence[SamplePair], s2: Sequence[SamplePair],
                   params: ExtractionParams | None = None) -> CurvePair:
    """Q(V) and curtailment(V) curves of one DG from its (setpoint, voltage) samples.

    ``s1`` holds reactive setpoints, ``s2`` curtailment, both normalised as
    described in the module docstring and both carrying the unit's output.
    """
    prm = params or ExtractionParams()
    tm = prm.template
    notes: list[str] = []
    tmpl = template_curves(prm)

    k1 = _retain(s1, prm.P_thr, *_window(tm.V1, tm.V10, tm.Q1 - tm.Q4, prm.tan_thr), notes, "q")
    if k1:
        kept = _monotone_q(k1, prm.Q_thr_ind, prm.init_rule)
        pts = _complete_q([(s.v_opf, s.value) for s in kept], tm, notes)
        q_pts = limit_slope(_dedupe(pts), prm.tan_thr, prm.min_gap, notes, prm.slope_rule)
        q_curve = PiecewiseCurve.from_points(q_pts, REACTIVE)
    else:
        q_curve = tmpl.q_curve

    k2 = _retain(s2, prm.P_thr, *_window(tm.V1P, tm.V6P, tm.P1, prm.tan_thr), notes, "p")
    if k2:
        kept = _monotone_p(k2)
        pts = _complete_p([(s.v_opf, s.value) for s in kept], tm, notes)
        p_pts = limit_slope(_dedupe(pts), prm.tan_thr, prm.min_gap, notes, prm.slope_rule)
        p_curve = PiecewiseCurve.from_points(p_pts, CURTAILMENT)
    else:
        p_curve = tmpl.p_curve
    if not k1 or not k2:
        notes.append("no samples above P_thr" + ("" if not (k1 or k2) else (" for Q" if not k1 else " for curtailment")))
    return CurvePair(q_curve, p_curve, not k1, not k2, tuple(notes))


# --- traces -----------------------------------------------------------------

def samples_from_trace(trace: Mapping, dg: int, mode: str = FRACTION) -> tuple[list, list]:
    """(S1, S2) sample lists of DG number ``dg`` from a per-day OPF JSON trace."""
    unit = trace["dgs"][dg]
    bus_pos = trace["buses"].index(unit["bus"])
    p_max, s_inv = float(unit["p_max"]), float(unit["s_inv"])
    s1, s2 = [], []
    for step in trace["steps"]:
        p_g = float(step["p_g"][dg])
        p_av = float(step["p_avail"][dg])
        v = float(step["v"][bus_pos])
        curt = p_av - p_g
        if mode == FRACTION:
            c = curt / p_av if p_av > 0 else 0.0
        else:
            c = curt / p_max
        c = min(max(c, 0.0), 1.0)
        t = int(step.get("t", len(s1)))
        s1.append(SamplePair(float(step["q_g"][dg]) / s_inv, v, p_g / p_max, t))
        s2.append(SamplePair(c, v, p_g / p_max, t))
    return s1, s2


def trace_from_opf(net: Network, solutions: Sequence[OPFStepSolution]) -> dict:
    return day_trace(net, solutions)


def extract_seasonal(net: Network, traces: Mapping[str, Mapping | Sequence[OPFStepSolution]],
                     params: ExtractionParams | None = None) -> tuple[ControllerAssignment, dict]:
    """Seasonal curve assignment from the four worst-day OPF traces.

    Returns the assignment and ``{season: [CurvePair per DG]}``.
    """
    prm = params or ExtractionParams()
    for s in SEASONS:
        if s not in traces:
            raise ExtractionError(f"missing worst-day trace for season {s!r}")
    pairs: dict[str, list[CurvePair]] = {}
    seasonal = {}
    for s in SEASONS:
        tr = traces[s]
        if not isinstance(tr, Mapping):
            tr = trace_from_opf(net, tr)
        if len(tr["dgs"]) != len(net.dgs):
            raise ExtractionError(f"{s} trace has {len(tr['dgs'])} DGs, network has {len(net.dgs)}")
        pairs[s] = [extract_curves(*samples_from_trace(tr, i, prm.curtail_mode), prm) for i in range(len(net.dgs))]
        seasonal[s] = tuple(Scheme.extracted(cp.q_curve, cp.p_curve, prm.P_thr) for cp in pairs[s])
    return ControllerAssignment(seasonal[SEASONS[0]], seasonal), pairs


def save_curves(out_dir, net: Network, pairs: Mapping[str, Sequence[CurvePair]],
                params: ExtractionParams, source_days: Mapping[str, str] | None = None) -> list[Path]:
    """Write one ``v,y`` CSV per DG, season and curve plus a provenance JSON."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    prov = {"params": params.to_dict(), "params_sha256": params.digest(),
            "source_days": dict(source_days or {}), "curves": []}
    for s in SEASONS:
        for g, cp in zip(net.dgs, pairs[s]):
            for kind, curve, tmpl in (("q", cp.q_curve, cp.q_template_only), ("pcurt", cp.p_curve, cp.p_template_only)):
                name = f"{s}_dg{g.bus}_{kind}.csv"
                save_curve(out / name, curve)
                written.append(out / name)
                prov["curves"].append({"file": name, "season": s, "bus": g.bus, "kind": kind,
                                       "template_only": tmpl, "notes": list(cp.warnings)})
    with open(out / "provenance.json", "w", encoding="utf-8") as fh:
        json.dump(prov, fh, indent=1, sort_keys=True)
        fh.write("\n")
    written.append(out / "provenance.json")
    return written
