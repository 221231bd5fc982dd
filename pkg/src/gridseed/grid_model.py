"""Network data model and the modified CIGRE LV benchmark feeder.

All electrical quantities stored on :class:`Network` are per-unit on the
system base (``base_MVA``) and the base voltage of the bus they attach to.
The JSON representation uses SI units (ohms, kVA, kW) plus the bases, so a
file can be edited by hand without doing per-unit arithmetic.
"""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

SLACK = "slack"
PQ = "pq"
LINE = "line"
TRANSFORMER = "transformer"

TYPE1 = "Type1"
TYPE2 = "Type2"
FIXED_UNITY_PF = "FixedUnityPF"
CAPABILITY_KINDS = (TYPE1, TYPE2, FIXED_UNITY_PF)

RESIDENTIAL = "residential"
COMMERCIAL = "commercial"


class NetworkError(ValueError):
    pass


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str
    base_kV: float
    v_min: float = 0.90
    v_max: float = 1.10


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    s_max: float
    length_m: float = 0.0
    kind: str = LINE

    @property
    def z(self) -> complex:
        return complex(self.r, self.x)


@dataclass(frozen=True)
class DGUnit:
    bus: int
    p_max: float
    s_inv: float
    capability: str = TYPE1
    cos_phi_max: float = 0.9

    def __post_init__(self):
        if self.capability not in CAPABILITY_KINDS:
            raise NetworkError(f"unknown capability {self.capability!r}")
        if not 0.0 < self.cos_phi_max <= 1.0:
            raise NetworkError(f"cos_phi_max must lie in (0, 1], got {self.cos_phi_max}")
        if not self.s_inv >= self.p_max > 0.0:
            raise NetworkError(f"DG at bus {self.bus}: need s_inv >= p_max > 0")


@dataclass(frozen=True)
class Load:
    bus: int
    s_nom: float
    power_factor: float = 0.95
    profile_class: str = RESIDENTIAL

    def __post_init__(self):
        if self.s_nom < 0:
            raise NetworkError(f"load at bus {self.bus}: negative s_nom")
        if not 0.0 < self.power_factor <= 1.0:
            raise NetworkError(f"load at bus {self.bus}: power factor outside (0, 1]")

    @property
    def p_nom(self) -> float:
        return self.s_nom * self.power_factor

    @property
    def q_nom(self) -> float:
        return self.p_nom * math.tan(math.acos(self.power_factor))


@dataclass(frozen=True)
class Network:
    base_MVA: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    dgs: tuple[DGUnit, ...] = ()
    loads: tuple[Load, ...] = ()
    name: str = ""

    def __post_init__(self):
        # accept lists from callers, store tuples
        for attr in ("buses", "branches", "dgs", "loads"):
            object.__setattr__(self, attr, tuple(getattr(self, attr)))

    @cached_property
    def index(self) -> dict[int, int]:
        """Bus id -> position in ``buses``."""
        return {b.id: k for k, b in enumerate(self.buses)}

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @cached_property
    def slack(self) -> int:
        slacks = [k for k, b in enumerate(self.buses) if b.kind == SLACK]
        if len(slacks) != 1:
            raise NetworkError(f"expected exactly one slack bus, found {len(slacks)}")
        return slacks[0]

    @cached_property
    def pq(self) -> np.ndarray:
        return np.array([k for k in range(self.n_bus) if k != self.slack], dtype=int)

    @cached_property
    def from_idx(self) -> np.ndarray:
        return np.array([self.index[br.from_bus] for br in self.branches], dtype=int)

    @cached_property
    def to_idx(self) -> np.ndarray:
        return np.array([self.index[br.to_bus] for br in self.branches], dtype=int)

    @cached_property
    def dg_idx(self) -> np.ndarray:
        return np.array([self.index[g.bus] for g in self.dgs], dtype=int)

    @cached_property
    def v_min(self) -> np.ndarray:
        return np.array([b.v_min for b in self.buses])

    @cached_property
    def v_max(self) -> np.ndarray:
        return np.array([b.v_max for b in self.buses])

    @cached_property
    def s_max(self) -> np.ndarray:
        return np.array([br.s_max for br in self.branches])

    @cached_property
    def y_series(self) -> np.ndarray:
        return np.array([1.0 / br.z for br in self.branches], dtype=complex)

    @cached_property
    def ybus(self) -> np.ndarray:
        n = self.n_bus
        y = np.zeros((n, n), dtype=complex)
        f, t, ys = self.from_idx, self.to_idx, self.y_series
        np.add.at(y, (f, f), ys)
        np.add.at(y, (t, t), ys)
        np.add.at(y, (f, t), -ys)
        np.add.at(y, (t, f), -ys)
        return y

    @cached_property
    def transformer(self) -> int:
        for k, br in enumerate(self.branches):
            if br.kind == TRANSFORMER:
                return k
        raise NetworkError("network has no transformer branch")

    def load_at(self, bus: int) -> Load | None:
        for load in self.loads:
            if load.bus == bus:
                return load
        return None

    def dg_at(self, bus: int) -> DGUnit | None:
        for g in self.dgs:
            if g.bus == bus:
                return g
        return None

    def with_voltage_limits(self, v_min: float | None = None, v_max: float | None = None) -> Network:
        buses = tuple(
            replace(b, v_min=b.v_min if v_min is None else v_min, v_max=b.v_max if v_max is None else v_max)
            for b in self.buses
        )
        return replace(self, buses=buses)


def to_per_unit(z_ohm_per_km: complex, length_m: float, base_kV: float, base_MVA: float) -> complex:
    """Series impedance of a cable section in per-unit.

    :param z_ohm_per_km: impedance per kilometre
    :param length_m: section length in metres
    :param base_kV: line-to-line base voltage at the section
    :param base_MVA: three-phase system base power
    """
    if base_kV <= 0 or base_MVA <= 0:
        raise NetworkError("base quantities must be positive")
    return complex(z_ohm_per_km) * (length_m / 1000.0) * base_MVA / base_kV**2


def from_per_unit(z_pu: complex, base_kV: float, base_MVA: float) -> complex:
    if base_kV <= 0 or base_MVA <= 0:
        raise NetworkError("base quantities must be positive")
    return complex(z_pu) * base_kV**2 / base_MVA


def balanced_equivalent(phase_matrix) -> complex:
    """Positive-sequence impedance of a transposed 3x3 phase impedance matrix."""
    z = np.asarray(phase_matrix, dtype=complex)
    if z.shape != (3, 3):
        raise NetworkError("phase impedance matrix must be 3x3")
    self_avg = np.trace(z) / 3.0
    mutual_avg = (z.sum() - np.trace(z)) / 6.0
    return complex(self_avg - mutual_avg)


def validate(network: Network) -> list[str]:
    """Structural diagnostics; an empty list means the network is usable."""
    problems: list[str] = []
    ids = [b.id for b in network.buses]
    if len(set(ids)) != len(ids):
        problems.append("duplicate bus ids")
    n_slack = sum(b.kind == SLACK for b in network.buses)
    if n_slack != 1:
        problems.append(f"expected exactly one slack bus, found {n_slack}")
    for b in network.buses:
        if not 0 < b.v_min < b.v_max:
            problems.append(f"bus {b.id}: voltage limits v_min={b.v_min} v_max={b.v_max} are not ordered")
    known = set(ids)
    for br in network.branches:
        for end in (br.from_bus, br.to_bus):
            if end not in known:
                problems.append(f"branch {br.from_bus}-{br.to_bus}: unknown bus {end}")
        if br.r < 0:
            problems.append(f"branch {br.from_bus}-{br.to_bus}: negative resistance")
        if br.s_max <= 0:
            problems.append(f"branch {br.from_bus}-{br.to_bus}: non-positive s_max")
        if br.from_bus == br.to_bus:
            problems.append(f"branch {br.from_bus}-{br.to_bus}: self loop")
    for g in network.dgs:
        if g.bus not in known:
            problems.append(f"DG references unknown bus {g.bus}")
    for load in network.loads:
        if load.bus not in known:
            problems.append(f"load references unknown bus {load.bus}")

    # union-find for cycles, BFS for connectivity
    parent = {i: i for i in known}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    adjacency: dict[int, list[int]] = {i: [] for i in known}
    for br in network.branches:
        if br.from_bus not in known or br.to_bus not in known:
            continue
        ra, rb = find(br.from_bus), find(br.to_bus)
        if ra == rb:
            problems.append(f"branch {br.from_bus}-{br.to_bus} closes a cycle (network is not radial)")
        else:
            parent[ra] = rb
        adjacency[br.from_bus].append(br.to_bus)
        adjacency[br.to_bus].append(br.from_bus)
    if ids:
        seen = {ids[0]}
        queue = deque([ids[0]])
        while queue:
            for nb in adjacency[queue.popleft()]:
                if nb not in seen:
                    seen.add(nb)
                    queue.append(nb)
        missing = sorted(known - seen)
        if missing:
            problems.append(f"disconnected buses: {missing}")
    if len(network.branches) != len(network.buses) - 1 and not any("cycle" in p for p in problems):
        problems.append(f"|branches|={len(network.branches)} != |buses|-1={len(network.buses) - 1}")
    return problems


# ---------------------------------------------------------------------------
# CIGRE LV residential feeder, modified for the two case studies

UG1_MATRIX = [
    [0.287 + 0.167j, 0.121 + 0.110j, 0.125 + 0.070j],
    [0.121 + 0.110j, 0.279 + 0.203j, 0.121 + 0.110j],
    [0.125 + 0.070j, 0.121 + 0.110j, 0.287 + 0.167j],
]
UG3_MATRIX = [
    [1.152 + 0.458j, 0.321 + 0.390j, 0.330 + 0.359j],
    [0.321 + 0.390j, 1.134 + 0.477j, 0.321 + 0.390j],
    [0.330 + 0.359j, 0.321 + 0.390j, 1.152 + 0.458j],
]
TRAFO_Z_OHM = 0.0032 + 0.0128j  # referred to the 0.4 kV side
TRAFO_S_RATED_KVA = 500.0
MV_KV = 20.0
LV_KV = 0.4

TRUNK = [(k, k + 1, 35.0) for k in range(2, 11)]
SPURS = [(4, 12, 30.0), (5, 13, 35.0), (13, 14, 35.0), (14, 15, 35.0), (15, 16, 30.0),
         (7, 17, None), (10, 18, 30.0), (11, 19, 30.0)]
LINE_7_17_M = {1: 30.0, 2: 90.0}

# bus -> (kVA, power factor); node 17 differs per case
LOADS_KVA = {2: (200.0, 0.95), 12: (15.0, 0.95), 16: (52.0, 0.95), 18: (35.0, 0.95), 19: (47.0, 0.95)}
LOAD_17 = {1: (55.0, 0.95), 2: (210.0, 0.85)}

# bus -> installed PV in percent of the case's total load
PV_PERCENT = {
    1: {3: 50.0, 4: 50.0, 12: 15.0, 16: 60.0, 18: 30.0, 19: 40.0},
    2: {12: 15.0, 16: 42.0, 18: 30.0, 19: 40.0},
}


@dataclass(frozen=True)
class CigreOptions:
    """Knobs for the ambiguous parts of the benchmark data."""

    pv_sizing: str = "total_load"  # or "node_load"
    line_limit_factor: float = 1.5
    spur_conductor: str = "UG3"
    trunk_conductor: str = "UG1"
    capability: str = TYPE1
    cos_phi_max: float = 0.9
    inverter_oversize: float | None = None  # s_inv / p_max; None -> 1/cos_phi_max
    v_min: float = 0.90
    v_max: float = 1.10
    line_7_17_m: float | None = None
    base_MVA: float = 1.0
    conductor_overrides: dict = field(default_factory=dict)  # (from, to) -> "UG1" | "UG3"


def _parse_case(case) -> int:
    if isinstance(case, str):
        digits = "".join(ch for ch in case if ch.isdigit())
        case = int(digits) if digits else 0
    if case not in (1, 2):
        raise NetworkError(f"unknown case {case!r}; expected Case1 or Case2")
    return int(case)


def build_cigre_lv(case, options: CigreOptions | None = None) -> Network:
    """Modified 19-bus CIGRE LV feeder for Case 1 or Case 2."""
    case = _parse_case(case)
    opt = options or CigreOptions()
    base = opt.base_MVA
    conductors = {"UG1": balanced_equivalent(UG1_MATRIX), "UG3": balanced_equivalent(UG3_MATRIX)}

    buses = [Bus(1, SLACK, MV_KV, opt.v_min, opt.v_max)]
    buses += [Bus(k, PQ, LV_KV, opt.v_min, opt.v_max) for k in range(2, 20)]

    z_tr = TRAFO_Z_OHM * base / LV_KV**2
    branches = [Branch(1, 2, z_tr.real, z_tr.imag, TRAFO_S_RATED_KVA / 1000.0 / base, 0.0, TRANSFORMER)]
    segments = [(f, t, length, opt.trunk_conductor) for f, t, length in TRUNK]
    for f, t, length in SPURS:
        if length is None:
            length = opt.line_7_17_m if opt.line_7_17_m is not None else LINE_7_17_M[case]
        segments.append((f, t, length, opt.spur_conductor))
    for f, t, length, cond in segments:
        cond = opt.conductor_overrides.get((f, t), cond)
        z = to_per_unit(conductors[cond], length, LV_KV, base)
        branches.append(Branch(f, t, z.real, z.imag, math.inf, length, LINE))

    load_table = dict(LOADS_KVA)
    load_table[17] = LOAD_17[case]
    loads = []
    for bus in sorted(load_table):
        kva, pf = load_table[bus]
        cls = COMMERCIAL if (case == 2 and bus == 17) else RESIDENTIAL
        loads.append(Load(bus, kva / 1000.0 / base, pf, cls))
    total_kva = sum(kva for kva, _ in load_table.values())

    dgs = []
    for bus, pct in sorted(PV_PERCENT[case].items()):
        if opt.pv_sizing == "total_load":
            p_kw = pct / 100.0 * total_kva
        elif opt.pv_sizing == "node_load":
            p_kw = pct / 100.0 * load_table.get(bus, (0.0, 1.0))[0]
        else:
            raise NetworkError(f"unknown pv_sizing {opt.pv_sizing!r}")
        if p_kw <= 0:
            continue
        p = p_kw / 1000.0 / base
        oversize = opt.inverter_oversize if opt.inverter_oversize is not None else 1.0 / opt.cos_phi_max
        dgs.append(DGUnit(bus, p, p * oversize, opt.capability, opt.cos_phi_max))

    net = Network(base, tuple(buses), tuple(branches), tuple(dgs), tuple(loads), name=f"cigre_lv_case{case}")
    return _with_line_limits(net, opt.line_limit_factor)


def _with_line_limits(net: Network, factor: float) -> Network:
    """Set every cable limit to ``factor`` x its peak flow under uncontrolled extremes.

    The peak envelope takes two snapshots: all PV at rated output with no load,
    and all loads at nameplate with no PV.
    """
    from .power_flow import solve_pf  # local import: power_flow depends on this module

    n = net.n_bus
    p_gen = np.zeros(n)
    p_load = np.zeros(n)
    q_load = np.zeros(n)
    for g in net.dgs:
        p_gen[net.index[g.bus]] += g.p_max
    for load in net.loads:
        p_load[net.index[load.bus]] += load.p_nom
        q_load[net.index[load.bus]] += load.q_nom
    flows = np.zeros(len(net.branches))
    for p_inj, q_inj in ((p_gen, np.zeros(n)), (-p_load, -q_load)):
        sol = solve_pf(net, p_inj, q_inj)
        if not sol.converged:
            raise NetworkError("could not size line limits: envelope power flow did not converge")
        flows = np.maximum(flows, np.maximum(np.abs(sol.s_from), np.abs(sol.s_to)))
    branches = []
    for br, f in zip(net.branches, flows):
        if br.kind == LINE:
            br = replace(br, s_max=max(factor * f, 1e-3))
        branches.append(br)
    return replace(net, branches=tuple(branches))


def total_load_kva(net: Network) -> float:
    return sum(load.s_nom for load in net.loads) * net.base_MVA * 1000.0


# ---------------------------------------------------------------------------
# JSON (SI units)

def network_to_dict(net: Network) -> dict:
    kv = {b.id: b.base_kV for b in net.buses}
    kw = net.base_MVA * 1000.0
    out = {
        "name": net.name,
        "base_MVA": net.base_MVA,
        "buses": [
            {"id": b.id, "kind": b.kind, "base_kV": b.base_kV, "v_min": b.v_min, "v_max": b.v_max}
            for b in net.buses
        ],
        "branches": [],
        "dgs": [
            {"bus": g.bus, "p_max_kW": g.p_max * kw, "s_inv_kVA": g.s_inv * kw,
             "capability": g.capability, "cos_phi_max": g.cos_phi_max}
            for g in net.dgs
        ],
        "loads": [
            {"bus": ld.bus, "s_nom_kVA": ld.s_nom * kw, "power_factor": ld.power_factor,
             "profile_class": ld.profile_class}
            for ld in net.loads
        ],
    }
    for br in net.branches:
        z = from_per_unit(br.z, kv[br.to_bus], net.base_MVA)
        out["branches"].append({
            "from": br.from_bus, "to": br.to_bus, "r_ohm": z.real, "x_ohm": z.imag,
            "s_max_kVA": None if math.isinf(br.s_max) else br.s_max * kw,
            "length_m": br.length_m, "kind": br.kind,
        })
    return out


def network_from_dict(data: dict) -> Network:
    base = float(data["base_MVA"])
    kw = base * 1000.0
    buses = tuple(Bus(int(b["id"]), b["kind"], float(b["base_kV"]), float(b.get("v_min", 0.9)),
                      float(b.get("v_max", 1.1))) for b in data["buses"])
    kv = {b.id: b.base_kV for b in buses}
    branches = []
    for br in data["branches"]:
        to_bus = int(br["to"])
        if to_bus not in kv:
            raise NetworkError(f"branch {br['from']}-{to_bus}: unknown bus {to_bus}")
        z = complex(br["r_ohm"], br["x_ohm"]) * base / kv[to_bus] ** 2
        s_max = math.inf if br.get("s_max_kVA") is None else float(br["s_max_kVA"]) / kw
        branches.append(Branch(int(br["from"]), to_bus, z.real, z.imag, s_max,
                               float(br.get("length_m", 0.0)), br.get("kind", LINE)))
    dgs = tuple(DGUnit(int(g["bus"]), float(g["p_max_kW"]) / kw, float(g["s_inv_kVA"]) / kw,
                       g.get("capability", TYPE1), float(g.get("cos_phi_max", 0.9))) for g in data.get("dgs", []))
    loads = tuple(Load(int(ld["bus"]), float(ld["s_nom_kVA"]) / kw, float(ld.get("power_factor", 0.95)),
                       ld.get("profile_class", RESIDENTIAL)) for ld in data.get("loads", []))
    return Network(base, buses, tuple(branches), dgs, loads, name=data.get("name", ""))


def save_network(net: Network, path) -> None:
    Path(path).write_text(json.dumps(network_to_dict(net), indent=2) + "\n", encoding="utf-8")


def load_network(path) -> Network:
    return network_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def radial_path(net: Network, bus: int) -> list[int]:
    """Bus ids from the slack bus to ``bus`` along the tree."""
    slack_id = net.buses[net.slack].id
    adjacency: dict[int, list[int]] = {b.id: [] for b in net.buses}
    for br in net.branches:
        adjacency[br.from_bus].append(br.to_bus)
        adjacency[br.to_bus].append(br.from_bus)
    prev = {slack_id: None}
    queue = deque([slack_id])
    while queue:
        a = queue.popleft()
        for nb in adjacency[a]:
            if nb not in prev:
                prev[nb] = a
                queue.append(nb)
    path = []
    node: int | None = bus
    while node is not None:
        path.append(node)
        node = prev[node]
    return path[::-1]


def make_network(buses: Sequence[Bus], branches: Sequence[Branch], dgs: Sequence[DGUnit] = (),
                 loads: Sequence[Load] = (), base_MVA: float = 1.0, name: str = "") -> Network:
    return Network(base_MVA, tuple(buses), tuple(branches), tuple(dgs), tuple(loads), name)
