import math
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gridseed.evaluation import RunConfig, Study, run_year  # noqa: E402
from gridseed.grid_model import (LINE, PQ, SLACK, TRANSFORMER, TYPE1, Branch, Bus, DGUnit, Load,  # noqa: E402
                                 make_network)
from gridseed.profiles import StepForecast  # noqa: E402


def chain_network(z, dg_bus=None, p_max=0.1, s_inv=None, capability=TYPE1, loads=(), v_max=1.1, v_min=0.9,
                  s_max=None, transformer=False):
    """Slack bus 1 feeding a chain 1-2-...-(n+1) with series impedances ``z``."""
    n = len(z)
    buses = [Bus(1, SLACK, 0.4)] + [Bus(k, PQ, 0.4, v_min, v_max) for k in range(2, n + 2)]
    limits = s_max if s_max is not None else [math.inf] * n
    branches = [Branch(k + 1, k + 2, complex(zk).real, complex(zk).imag, limits[k], 0.0,
                       TRANSFORMER if (transformer and k == 0) else LINE) for k, zk in enumerate(z)]
    dgs = []
    if dg_bus is not None:
        dgs = [DGUnit(dg_bus, p_max, s_inv if s_inv is not None else p_max / 0.9, capability)]
    lds = [Load(bus, s, pf) for bus, s, pf in loads]
    return make_network(buses, branches, dgs, lds)


def step_for(net, p_avail=(), p_load=None, q_load=None):
    n = net.n_bus
    return StepForecast(np.zeros(n) if p_load is None else np.asarray(p_load, float),
                        np.zeros(n) if q_load is None else np.asarray(q_load, float),
                        np.asarray(p_avail, float).reshape(len(net.dgs)))


def load_step(net, p_avail, load_scale=1.0):
    """Step with every load at ``load_scale`` of nameplate."""
    p = np.zeros(net.n_bus)
    q = np.zeros(net.n_bus)
    for ld in net.loads:
        k = net.index[ld.bus]
        p[k] += load_scale * ld.p_nom
        q[k] += load_scale * ld.q_nom
    return StepForecast(p, q, np.asarray(p_avail, float))


class _Cache:
    """Session-wide cache of studies and yearly reports (each costs seconds)."""

    def __init__(self):
        self.studies = {}
        self.years = {}

    def study(self, case):
        if case not in self.studies:
            self.studies[case] = Study(RunConfig(case=case))
        return self.studies[case]

    def year(self, case):
        if case not in self.years:
            st = self.study(case)
            self.years[case] = run_year(st.config, st)
        return self.years[case]


_CACHE = _Cache()


@pytest.fixture(scope="session")
def cache():
    return _CACHE


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE: list[str] = []


def record_criterion(label: str, ok: bool, detail: str) -> bool:
    line = f"{label}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
