"""Run the four control methods over a day or a year and summarise them.

Method 0: plain power flow, every PV at unity power factor.
Method 1: per-timestep OPF on the forecast.
Method 2: closed loop with the cos(phi)(P) grid-code rule on every PV.
Method 3: closed loop with per-DG seasonal curves extracted from the
          Method 1 solutions of the four worst days.

A year is 4 seasons x (10 worst + 80 typical days). Days that share a profile
produce identical results, so each distinct (season, kind) day is simulated
once and weighted by its multiplicity.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .curve_extraction import ExtractionParams, extract_seasonal, save_curves, trace_from_opf
from .grid_model import CigreOptions, Network, build_cigre_lv
from .local_control import ClosedLoopError, ClosedLoopOptions, ControllerAssignment, Scheme, simulate_closed_loop
from .opf import ControlCosts, OPFError, OPFOptions, solve_opf_step
from .power_flow import PFSolution, solve_pf
from .profiles import SEASONS, TYPICAL, WORST, DayProfile, SeasonPlan, default_plans, expand_year, make_forecast

log = logging.getLogger(__name__)

METHODS = (0, 1, 2, 3)
METHOD_NAMES = {0: "no control", 1: "AC OPF", 2: "cos(phi)(P) grid code", 3: "extracted local curves"}
YES, MARGINAL, NO = "yes", "marginal", "no"

LOSSES_NOTE = "losses in percent of supplied energy (slack import + PV generation)"
CURT_NOTE = "curtailment in percent of available PV energy"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    case: int = 1
    methods: tuple = METHODS
    horizon: str = "worst:summer"  # "worst:<season>", "typical:<season>" or "year"
    seed: int = 0
    costs: ControlCosts = field(default_factory=ControlCosts)
    opf: OPFOptions = field(default_factory=OPFOptions)
    closed_loop: ClosedLoopOptions = field(default_factory=ClosedLoopOptions)
    extraction: ExtractionParams = field(default_factory=ExtractionParams)
    network: CigreOptions = field(default_factory=CigreOptions)
    marginal_band: float = 0.015  # relative to the limit
    marginal_duration: float = 0.05  # share of timesteps
    v_tol: float = 1e-4  # p.u., below this a voltage excursion is not a violation
    flow_tol: float = 1e-3  # p.u. of base power, likewise for branch flows
    out_dir: str | None = None

    def __post_init__(self):
        if self.case not in (1, 2):
            raise ConfigError(f"case must be 1 or 2, got {self.case!r}")
        methods = tuple(sorted(set(int(m) for m in self.methods)))
        if not methods or any(m not in METHODS for m in methods):
            raise ConfigError(f"methods must be a non-empty subset of {METHODS}")
        object.__setattr__(self, "methods", methods)
        parse_horizon(self.horizon)
        if self.marginal_band < 0 or not 0 <= self.marginal_duration <= 1:
            raise ConfigError("marginal band and duration must be non-negative (duration <= 1)")

    @classmethod
    def from_dict(cls, d: Mapping) -> RunConfig:
        d = dict(d)
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "costs" in d:
            d["costs"] = ControlCosts(**d["costs"])
        if "opf" in d:
            d["opf"] = OPFOptions(**d["opf"])
        if "closed_loop" in d:
            d["closed_loop"] = ClosedLoopOptions(**d["closed_loop"])
        if "extraction" in d:
            d["extraction"] = ExtractionParams.from_dict(d["extraction"])
        if "network" in d:
            d["network"] = CigreOptions(**d["network"])
        if "methods" in d:
            d["methods"] = tuple(d["methods"])
        return cls(**d)


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return RunConfig.from_dict(data)


def parse_horizon(horizon: str) -> tuple[str, str | None]:
    if horizon == "year":
        return "year", None
    kind, _, season = horizon.partition(":")
    if kind not in (WORST, TYPICAL) or season not in SEASONS:
        raise ConfigError(f"horizon must be 'year' or '<worst|typical>:<season>', got {horizon!r}")
    return kind, season


# --- per-timestep records ---------------------------------------------------

@dataclass
class StepRecord:
    v: np.ndarray  # bus voltage magnitudes
    branch_loading: np.ndarray  # p.u.
    trafo_loading: float  # percent
    losses: float  # p.u.
    slack_import: float  # p.u., >= 0
    p_g: np.ndarray
    q_g: np.ndarray
    p_avail: np.ndarray
    converged: bool = True
    note: str = ""

    @property
    def generation(self) -> float:
        return float(np.sum(self.p_g))

    @property
    def curtailed(self) -> float:
        return float(np.sum(self.p_avail - self.p_g))


def _record(net: Network, pf: PFSolution, p_g, q_g, p_avail, converged=True, note="") -> StepRecord:
    k = net.transformer
    loading = pf.branch_loading
    return StepRecord(
        v=pf.v_mag.copy(), branch_loading=loading.copy(),
        trafo_loading=100.0 * float(loading[k]) / net.branches[k].s_max,
        losses=pf.losses, slack_import=max(float(pf.slack_injection.real), 0.0),
        p_g=np.array(p_g, float), q_g=np.array(q_g, float), p_avail=np.array(p_avail, float),
        converged=converged, note=note,
    )


def _uncontrolled(net: Network, step, pf_opts=None) -> tuple[PFSolution, np.ndarray, np.ndarray]:
    p = np.asarray(step.p_avail, float)
    q = np.zeros(len(net.dgs))
    p_inj = -np.asarray(step.p_load, float).copy()
    q_inj = -np.asarray(step.q_load, float).copy()
    np.add.at(p_inj, net.dg_idx, p)
    return solve_pf(net, p_inj, q_inj, pf_opts), p, q


# --- reports ----------------------------------------------------------------

@dataclass
class MethodReport:
    method: int
    v_max: float
    v_min: float
    losses_pct: float
    p_curt_pct: float
    max_trafo_loading: float
    constraints_ok: str
    worst_violation_pct: float  # worst excursion beyond any limit, percent of the limit
    violation_share: float  # share of timesteps with a violation
    loss_energy: float  # p.u. x steps
    curtailed_energy: float
    available_energy: float
    supplied_energy: float
    hours: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    def summary(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "hours"}
        d["name"] = METHOD_NAMES[self.method]
        return d


@dataclass
class YearlyReport:
    case: int
    methods: dict  # method -> MethodReport
    relative_losses: dict  # method -> percent vs Method 1 (None if unavailable)
    relative_p_curt: dict
    horizon: str = "year"

    def summary(self) -> dict:
        return {
            "case": self.case,
            "horizon": self.horizon,
            "methods": {str(m): r.summary() for m, r in self.methods.items()},
            "relative_losses_pct": {str(m): v for m, v in self.relative_losses.items()},
            "relative_p_curt_pct": {str(m): v for m, v in self.relative_p_curt.items()},
        }


@dataclass
class DayReport:
    case: int
    horizon: str
    methods: dict

    def summary(self) -> dict:
        return {"case": self.case, "horizon": self.horizon,
                "methods": {str(m): r.summary() for m, r in self.methods.items()}}


def _violation(net: Network, rec: StepRecord, v_tol: float, flow_tol: float) -> float:
    """Worst excursion beyond any limit as a fraction of that limit (0 if none)."""
    mask = np.ones(net.n_bus, bool)
    mask[net.slack] = False
    v = rec.v[mask]
    over = (v - net.v_max[mask]) / net.v_max[mask]
    under = (net.v_min[mask] - v) / net.v_min[mask]
    worst = 0.0
    if np.any(v - net.v_max[mask] > v_tol):
        worst = max(worst, float(over.max()))
    if np.any(net.v_min[mask] - v > v_tol):
        worst = max(worst, float(under.max()))
    finite = np.isfinite(net.s_max)
    excess = rec.branch_loading[finite] - net.s_max[finite]
    if np.any(excess > flow_tol):
        worst = max(worst, float(np.max(excess / net.s_max[finite])))
    return worst


def summarise(net: Network, method: int, days: Sequence[tuple[str, str, int, list]],
              config: RunConfig) -> MethodReport:
    """Aggregate step records. ``days`` holds (season, kind, multiplicity, records)."""
    v_max, v_min, trafo = -math.inf, math.inf, 0.0
    loss = curt = avail = supplied = 0.0
    worst = 0.0
    n_steps = n_viol = 0
    hours, failures = [], []
    day_no = 0
    for season, kind, count, records in days:
        for rec in records:
            v_max = max(v_max, float(rec.v.max()))
            v_min = min(v_min, float(rec.v.min()))
            trafo = max(trafo, rec.trafo_loading)
        loss += count * sum(r.losses for r in records)
        curt += count * sum(r.curtailed for r in records)
        avail += count * sum(float(np.sum(r.p_avail)) for r in records)
        supplied += count * sum(r.slack_import + r.generation for r in records)
        viol = [_violation(net, r, config.v_tol, config.flow_tol) for r in records]
        worst = max(worst, max(viol, default=0.0))
        n_viol += count * sum(1 for x in viol if x > 0)
        n_steps += count * len(records)
        for t, r in enumerate(records):
            if not r.converged:
                failures.append({"season": season, "kind": kind, "hour": t, "note": r.note})
        for d in range(count):
            for t, (r, x) in enumerate(zip(records, viol)):
                hours.append(_hour_row(net, day_no + d, season, kind, t, r, x))
        day_no += count
    share = n_viol / n_steps if n_steps else 0.0
    if worst == 0.0:
        status = YES
    elif worst <= config.marginal_band and share <= config.marginal_duration:
        status = MARGINAL
    else:
        status = NO
    return MethodReport(
        method=method, v_max=v_max, v_min=v_min,
        losses_pct=100.0 * loss / supplied if supplied > 0 else 0.0,
        p_curt_pct=100.0 * curt / avail if avail > 0 else 0.0,
        max_trafo_loading=trafo, constraints_ok=status,
        worst_violation_pct=100.0 * worst, violation_share=share,
        loss_energy=loss, curtailed_energy=curt, available_energy=avail, supplied_energy=supplied,
        hours=hours, failures=failures,
    )


def _hour_row(net: Network, day: int, season: str, kind: str, t: int, r: StepRecord, viol: float) -> dict:
    base_kw = net.base_MVA * 1000.0
    row = {"day": day, "season": season, "kind": kind, "hour": t,
           "v_max": float(r.v.max()), "v_min": float(r.v.min()),
           "trafo_loading_pct": r.trafo_loading, "losses_kw": r.losses * base_kw,
           "p_curt_kw": r.curtailed * base_kw, "violation_pct": 100.0 * viol,
           "converged": int(r.converged)}
    for b, v in zip(net.buses, r.v):
        row[f"v_{b.id}"] = float(v)
    for g, q, pc in zip(net.dgs, r.q_g, r.p_avail - r.p_g):
        row[f"q_kvar_{g.bus}"] = float(q) * base_kw
        row[f"p_curt_kw_{g.bus}"] = float(pc) * base_kw
    return row


# --- the study --------------------------------------------------------------

class Study:
    """Network, profiles and cached per-day results for one configuration."""

    def __init__(self, config: RunConfig, network: Network | None = None,
                 plans: Sequence[SeasonPlan] | None = None):
        self.config = config
        self.net = network if network is not None else build_cigre_lv(config.case, config.network)
        self.plans = list(plans) if plans is not None else default_plans(config.seed)
        self._days: dict = {}
        self._opf: dict = {}
        self._curves = None

    def day_profile(self, season: str, kind: str) -> DayProfile:
        for p in self.plans:
            if p.season == season:
                return p.worst_day if kind == WORST else p.typical_day
        raise ConfigError(f"no profile plan for season {season!r}")

    def opf_day(self, season: str, kind: str = WORST) -> list:
        """Method 1 step solutions (``None`` where the OPF failed)."""
        key = (season, kind)
        if key not in self._opf:
            fc = make_forecast(self.net, self.day_profile(season, kind))
            sols = []
            for t, step in enumerate(fc):
                try:
                    sols.append(solve_opf_step(self.net, step, self.config.costs, self.config.opf))
                except OPFError as exc:
                    log.warning("OPF failed at %s/%s hour %d: %s", season, kind, t, exc)
                    sols.append(exc)
            self._opf[key] = sols
        return self._opf[key]

    def curves(self):
        """(assignment, {season: [CurvePair]}) extracted from the worst-day OPF runs."""
        if self._curves is None:
            traces = {}
            for s in SEASONS:
                sols = self.opf_day(s, WORST)
                ok = [x for x in sols if not isinstance(x, Exception)]
                traces[s] = trace_from_opf(self.net, ok)
            self._curves = extract_seasonal(self.net, traces, self.config.extraction)
        return self._curves

    def run_day(self, method: int, season: str, kind: str) -> list[StepRecord]:
        key = (method, season, kind)
        if key in self._days:
            return self._days[key]
        net = self.net
        fc = make_forecast(net, self.day_profile(season, kind))
        out = []
        if method == 1:
            for step, sol in zip(fc, self.opf_day(season, kind)):
                if isinstance(sol, Exception):
                    pf, p, q = _uncontrolled(net, step, self.config.opf.pf)
                    out.append(_record(net, pf, p, q, step.p_avail, False, f"OPF failed: {sol}"))
                else:
                    out.append(_record(net, sol.pf, sol.p_g, sol.q_g, sol.p_avail,
                                       sol.feasible, "" if sol.feasible else "OPF infeasible"))
        elif method == 0:
            for step in fc:
                pf, p, q = _uncontrolled(net, step, self.config.opf.pf)
                out.append(_record(net, pf, p, q, step.p_avail, pf.converged))
        elif method in (2, 3):
            if method == 2:
                assignment = ControllerAssignment.uniform(net, Scheme.german())
            else:
                assignment = self.curves()[0]
            for step in fc:
                try:
                    res = simulate_closed_loop(net, step, assignment, self.config.closed_loop, season=season)
                    out.append(_record(net, res.pf, res.p_g, res.q_g, res.p_avail, res.converged,
                                       "" if res.converged else "closed loop did not converge"))
                except ClosedLoopError as exc:
                    pf, p, q = _uncontrolled(net, step, self.config.opf.pf)
                    out.append(_record(net, pf, p, q, step.p_avail, False, f"closed loop failed: {exc}"))
        else:
            raise ConfigError(f"unknown method {method!r}")
        self._days[key] = out
        return out


def run_method(config: RunConfig, method: int, study: Study | None = None) -> MethodReport:
    """One method over the configured horizon (a single day or the year)."""
    study = study or Study(config)
    kind, season = parse_horizon(config.horizon)
    if kind == "year":
        counts = []
        for a in expand_year(study.plans):
            if counts and counts[-1][:2] == (a.season, a.kind):
                counts[-1][2] += 1
            else:
                counts.append([a.season, a.kind, 1])
        days = [(s, k, c, study.run_day(method, s, k)) for s, k, c in counts]
    else:
        days = [(season, kind, 1, study.run_day(method, season, kind))]
    return summarise(study.net, method, days, config)


def run_day_report(config: RunConfig, study: Study | None = None) -> DayReport:
    study = study or Study(config)
    return DayReport(config.case, config.horizon, {m: run_method(config, m, study) for m in config.methods})


def run_year(config: RunConfig, study: Study | None = None) -> YearlyReport:
    """Yearly evaluation of the configured methods; relative figures use Method 1."""
    cfg = replace(config, horizon="year")
    study = study or Study(cfg)
    methods = tuple(sorted(set(cfg.methods) | {1}))
    reports = {m: run_method(cfg, m, study) for m in methods}
    ref = reports[1]
    rel_l, rel_c = {}, {}
    for m, r in reports.items():
        rel_l[m] = 100.0 * (r.loss_energy / ref.loss_energy - 1.0) if ref.loss_energy > 0 else None
        if ref.curtailed_energy > 0 and (r.curtailed_energy > 0 or m == 1):
            rel_c[m] = 100.0 * (r.curtailed_energy / ref.curtailed_energy - 1.0)
        else:
            rel_c[m] = None
    keep = set(cfg.methods)
    return YearlyReport(cfg.case, {m: reports[m] for m in methods if m in keep},
                        {m: v for m, v in rel_l.items() if m in keep},
                        {m: v for m, v in rel_c.items() if m in keep})


def run(config: RunConfig, study: Study | None = None):
    kind, _ = parse_horizon(config.horizon)
    return run_year(config, study) if kind == "year" else run_day_report(config, study)


def exit_status(report) -> int:
    return 2 if any(r.constraints_ok == NO for r in report.methods.values()) else 0


# --- rendering --------------------------------------------------------------

def _fmt(x, digits: int) -> str:
    return "--" if x is None else f"{x:.{digits}f}"


def render_markdown(report) -> str:
    ms = list(report.methods)
    reps = [report.methods[m] for m in ms]
    yearly = isinstance(report, YearlyReport)
    lines = [f"# Case {report.case}, {'year' if yearly else report.horizon}", ""]
    lines.append("| | " + " | ".join(f"Method {m}" for m in ms) + " |")
    lines.append("|---|" + "---|" * len(ms))

    def row(label, vals):
        lines.append(f"| {label} | " + " | ".join(vals) + " |")

    row("Vmax (p.u.)", [_fmt(r.v_max, 4) for r in reps])
    row("Vmin (p.u.)", [_fmt(r.v_min, 4) for r in reps])
    if yearly:
        row("Relative losses with respect to Method 1 (%)",
            ["ref" if m == 1 else _fmt(report.relative_losses[m], 2) for m in ms])
        row("Relative Pcurt with respect to Method 1 (%)",
            ["ref" if m == 1 else _fmt(report.relative_p_curt[m], 2) for m in ms])
    else:
        row("Losses (%)", [_fmt(r.losses_pct, 4) for r in reps])
        row("Pcurt (%)", [_fmt(r.p_curt_pct, 2) for r in reps])
    row("Max transformer loading (%)", [_fmt(r.max_trafo_loading, 2) for r in reps])
    row("Security constraints satisfied", [r.constraints_ok.upper() for r in reps])
    lines += ["", f"- {LOSSES_NOTE}", f"- {CURT_NOTE}",
              "- MARGINAL: worst excursion within the marginal band for a limited share of timesteps", ""]
    return "\n".join(lines)


def render_json(report) -> str:
    return json.dumps(report.summary(), indent=1, sort_keys=True, allow_nan=False) + "\n"


def render_hours_csv(report: MethodReport) -> str:
    buf = io.StringIO()
    if not report.hours:
        return ""
    w = csv.DictWriter(buf, fieldnames=list(report.hours[0]), lineterminator="\n")
    w.writeheader()
    for row in report.hours:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()


def render_summary_csv(report) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = ["method", "v_max", "v_min", "losses_pct", "p_curt_pct", "max_trafo_loading",
            "constraints_ok", "worst_violation_pct", "violation_share"]
    yearly = isinstance(report, YearlyReport)
    w.writerow(cols + (["relative_losses_pct", "relative_p_curt_pct"] if yearly else []))
    for m, r in report.methods.items():
        vals = [m] + [repr(getattr(r, c)) if isinstance(getattr(r, c), float) else getattr(r, c) for c in cols[1:]]
        if yearly:
            vals += ["" if report.relative_losses[m] is None else repr(report.relative_losses[m]),
                     "" if report.relative_p_curt[m] is None else repr(report.relative_p_curt[m])]
        w.writerow(vals)
    return buf.getvalue()


def emit_report(report, out_dir, formats: Sequence[str] = ("csv", "json", "md")) -> list[Path]:
    """Write the report; identical reports give byte-identical files."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    written = []
    for fmt in formats:
        if fmt == "md":
            files = {"report.md": render_markdown(report)}
        elif fmt == "json":
            files = {"report.json": render_json(report)}
        elif fmt == "csv":
            files = {"summary.csv": render_summary_csv(report)}
            for m, r in report.methods.items():
                files[f"hours_method{m}.csv"] = render_hours_csv(r)
        else:
            raise ConfigError(f"unknown report format {fmt!r}")
        for name, text in files.items():
            path = out / name
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
            written.append(path)
    return written


def export_curves(study: Study, out_dir) -> list[Path]:
    _, pairs = study.curves()
    src = {s: f"{s} worst day" for s in SEASONS}
    return save_curves(out_dir, study.net, pairs, study.config.extraction, src)
