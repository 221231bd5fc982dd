import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import chain_network, step_for
from gridseed.grid_model import TYPE1, TYPE2, build_cigre_lv
from gridseed.local_control import (CURTAILMENT, REACTIVE, ClosedLoopOptions, ControllerAssignment, CurveError,
                                    PiecewiseCurve, Scheme, builtin_pcurt, builtin_qv, eval_curve,
                                    fixed_point_residual, german_cosphi, load_curve, save_curve,
                                    simulate_closed_loop)
from gridseed.opf import CapabilityRegion, capability_bounds
from gridseed.power_flow import solve_pf, transformer_loading
from gridseed.profiles import SEASONS, WORST, make_forecast, synth_profiles
from oracles import two_bus_droop_equilibrium

TAN = math.tan(math.acos(0.9))


# --- curves ----------------------------------------------------------------------

def test_eval_curve_examples():
    c = PiecewiseCurve.from_points([(0.9, 1.0), (1.1, -1.0)])
    assert eval_curve(c, 1.0) == pytest.approx(0.0, abs=1e-15)
    assert eval_curve(c, 0.5) == 1.0
    assert eval_curve(c, 2.0) == -1.0
    assert eval_curve(c, 0.9) == 1.0 and eval_curve(c, 1.1) == -1.0
    assert np.allclose(c(np.array([0.9, 1.0, 1.1])), [1.0, 0.0, -1.0])


def test_eval_at_knots():
    c = PiecewiseCurve.from_points([(0.88, 1.0), (0.9, 1.0), (0.95, 0.3), (1.05, -0.2), (1.3, -1.0)])
    for v, y in c.points:
        assert eval_curve(c, v) == y


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=2, max_size=8), st.floats(0, 1))
def test_eval_curve_is_the_affine_interpolant(ys, frac):
    ys = sorted(ys, reverse=True)
    vs = 0.9 + 0.05 * np.arange(len(ys))
    c = PiecewiseCurve.from_points(list(zip(vs, ys)))
    k = min(int(frac * (len(ys) - 1)), len(ys) - 2)
    t = frac * (len(ys) - 1) - k
    t = min(max(t, 0.0), 1.0)
    v = vs[k] + t * (vs[k + 1] - vs[k])
    exact = ys[k] + (ys[k + 1] - ys[k]) * (v - vs[k]) / (vs[k + 1] - vs[k])
    assert abs(eval_curve(c, v) - exact) <= 1e-15


def test_curve_invariants():
    with pytest.raises(CurveError):
        PiecewiseCurve.from_points([(1.0, 0.0)])
    with pytest.raises(CurveError):
        PiecewiseCurve.from_points([(1.0, 0.0), (1.0, -0.1)])
    with pytest.raises(CurveError):
        PiecewiseCurve.from_points([(0.9, 0.0), (1.1, 0.5)], REACTIVE)
    with pytest.raises(CurveError):
        PiecewiseCurve.from_points([(0.9, 0.5), (1.1, 0.0)], CURTAILMENT)
    with pytest.raises(CurveError):
        PiecewiseCurve.from_points([(0.9, np.nan), (1.1, 0.0)])
    with pytest.raises(CurveError):
        PiecewiseCurve.from_points([(0.9, 0.0), (1.1, 0.0)], "bogus")


def test_csv_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(3)
    v = np.cumsum(rng.uniform(1e-3, 0.05, 9)) + 0.85
    y = -np.cumsum(rng.uniform(0, 0.3, 9)) + 1 / 3
    c = PiecewiseCurve(v, y)
    save_curve(tmp_path / "c.csv", c)
    back = load_curve(tmp_path / "c.csv")
    assert back == c
    assert back.v.tobytes() == c.v.tobytes() and back.y.tobytes() == c.y.tobytes()
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "v,y"


def test_csv_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(CurveError, match="header"):
        load_curve(p)
    p.write_text("v,y\n1.0,x\n")
    with pytest.raises(CurveError, match="malformed"):
        load_curve(p)


def test_german_cosphi_examples():
    assert german_cosphi(0.5, 1.0) == 0.0
    assert german_cosphi(0.0, 1.0) == 0.0
    assert german_cosphi(1.0, 1.0) == pytest.approx(-TAN, rel=1e-14)
    assert german_cosphi(0.2, 0.2) == pytest.approx(-0.4843 * 0.2, abs=1e-5)
    # at 75 % output the power factor is halfway, 0.95
    assert german_cosphi(0.75, 1.0) == pytest.approx(-0.75 * math.tan(math.acos(0.95)), rel=1e-14)


def test_german_cosphi_monotone():
    q = [german_cosphi(p, 1.0) for p in np.linspace(0, 1, 101)]
    assert np.all(np.diff(q) <= 1e-15)


def test_builtin_curves():
    assert builtin_qv(1)(1.0) == pytest.approx(0.0, abs=1e-15)
    assert builtin_qv(2)(1.01) == 0.0
    assert builtin_qv(3)(1.04) == 0.0 and builtin_qv(2)(1.04) < 0.0
    assert builtin_qv(1)(0.9) > 0 > builtin_qv(1)(1.1)
    assert builtin_pcurt(1)(1.07) == 0.0 and builtin_pcurt(1)(1.09) > 0.0
    assert builtin_pcurt(2)(1.10) == 0.0 and builtin_pcurt(3)(1.10) == 0.0
    assert builtin_pcurt(2)(1.12) > builtin_pcurt(3)(1.12) > 0.0
    for k in (1, 2, 3):
        assert builtin_qv(k).y_kind == REACTIVE and builtin_pcurt(k).y_kind == CURTAILMENT
    with pytest.raises(CurveError):
        builtin_qv(4)
    with pytest.raises(CurveError):
        builtin_pcurt(0)


def test_scheme_checks_curve_kinds():
    with pytest.raises(CurveError):
        Scheme.extracted(builtin_pcurt(1), None)
    with pytest.raises(CurveError):
        Scheme.extracted(None, builtin_qv(1))
    with pytest.raises(CurveError):
        Scheme("mystery")


def test_seasonal_assignment_needs_four_seasons():
    sc = (Scheme.none(),)
    with pytest.raises(CurveError, match="autumn"):
        ControllerAssignment(sc, {"winter": sc, "spring": sc, "summer": sc})
    a = ControllerAssignment(sc, {s: sc for s in SEASONS})
    assert a.for_season("summer") == sc
    with pytest.raises(CurveError):
        a.for_season()


# --- closed loop -----------------------------------------------------------------

@pytest.fixture(scope="module")
def case1_peak():
    net = build_cigre_lv(1)
    return net, make_forecast(net, synth_profiles("summer", WORST)).step(13)


def test_none_scheme_is_plain_power_flow(case1_peak):
    net, step = case1_peak
    res = simulate_closed_loop(net, step, ControllerAssignment.uniform(net, Scheme.none()))
    p = -step.p_load.copy()
    np.add.at(p, net.dg_idx, step.p_avail)
    plain = solve_pf(net, p, -step.q_load)
    assert res.converged and res.iterations == 1
    assert np.array_equal(res.pf.v, plain.v)
    assert np.all(res.q_g == 0) and np.array_equal(res.p_g, step.p_avail)


def _droop_net():
    r, x = 0.05, 0.3
    net = chain_network([complex(r, x)], dg_bus=2, p_max=0.3, s_inv=0.4, capability=TYPE2)
    curve = PiecewiseCurve.from_points([(1.02, 0.3), (1.04, -0.3)])  # steep: loop gain about 3.6
    return net, r, x, curve


def test_steep_droop_oscillates_undamped():
    net, _, _, curve = _droop_net()
    res = simulate_closed_loop(net, step_for(net, [0.3]), [Scheme.extracted(curve, None)],
                               ClosedLoopOptions(damping=1.0, min_damping=1.0))
    assert not res.converged and res.iterations == 100
    tail = np.array(res.trace[-10:])
    assert tail.min() > 0.01  # keeps jumping between the two clipped branches


def test_damped_droop_matches_analytic_intersection():
    net, r, x, curve = _droop_net()
    g = net.dgs[0]
    res = simulate_closed_loop(net, step_for(net, [0.3]), [Scheme.extracted(curve, None)],
                               ClosedLoopOptions(damping=0.5, tol_v=1e-9))
    assert res.converged
    v, q = two_bus_droop_equilibrium(0.3, r, x, curve.v, curve.y * g.s_inv)
    assert abs(res.pf.v_mag[1] - v) < 1e-6
    assert abs(res.q_g[0] - q) < 1e-6


@pytest.mark.parametrize("kind", [1, 2, 3])
def test_builtin_qv_fixed_point_certificate(case1_peak, kind):
    net, step = case1_peak
    opt = ClosedLoopOptions()
    schemes = [Scheme.qv(kind)] * len(net.dgs)
    res = simulate_closed_loop(net, step, schemes, opt)
    assert res.converged
    assert fixed_point_residual(net, step, schemes, res, opt) <= opt.tol_v


@pytest.mark.parametrize("scheme", [Scheme.german(), Scheme.qv(1), Scheme.pcurt(1),
                                    Scheme(kind="curves", q_curve=builtin_qv(2), p_curve=builtin_pcurt(3))])
def test_realised_setpoints_inside_capability(case1_peak, scheme):
    net, step = case1_peak
    res = simulate_closed_loop(net, step, ControllerAssignment.uniform(net, scheme))
    assert res.converged
    for g, p, q, pav in zip(net.dgs, res.p_g, res.q_g, res.p_avail):
        assert 0.0 <= p <= pav
        lo, hi = capability_bounds(CapabilityRegion.of(g), min(p, g.s_inv))
        assert lo - 1e-12 <= q <= hi + 1e-12


def test_german_raises_transformer_loading_over_uncontrolled(case1_peak):
    net, step = case1_peak
    m0 = simulate_closed_loop(net, step, ControllerAssignment.uniform(net, Scheme.none()))
    m2 = simulate_closed_loop(net, step, ControllerAssignment.uniform(net, Scheme.german()))
    assert m2.converged
    assert transformer_loading(m2.pf, net) > transformer_loading(m0.pf, net)
    assert m2.pf.v_mag.max() < m0.pf.v_mag.max()


def test_q_curve_gated_below_threshold():
    net = chain_network([0.05 + 0.1j], dg_bus=2, p_max=0.3, capability=TYPE2)
    sc = Scheme.extracted(builtin_qv(1), None, p_thr=0.5)
    low = simulate_closed_loop(net, step_for(net, [0.1]), [sc])
    high = simulate_closed_loop(net, step_for(net, [0.2]), [sc])
    assert low.q_g[0] == 0.0 and high.q_g[0] < 0.0


def test_curtailment_curve_reduces_output():
    net = chain_network([0.25 + 0.05j], dg_bus=2, p_max=0.5, capability=TYPE1)
    res = simulate_closed_loop(net, step_for(net, [0.5]), [Scheme.pcurt(1)])
    assert res.converged and 0.0 < res.p_curt[0] < 0.5
    assert 1.08 < res.pf.v_mag[1] < 1.12
    assert res.q_g[0] == 0.0


def test_disconnect_mode_trips_outside_range():
    net = chain_network([0.2 + 0.05j], dg_bus=2, p_max=0.5, capability=TYPE1)
    narrow = Scheme.extracted(PiecewiseCurve.from_points([(0.95, 0.0), (1.05, 0.0)]), None)
    step = step_for(net, [0.5])
    clamp = simulate_closed_loop(net, step, [narrow])
    trip = simulate_closed_loop(net, step, [narrow], ClosedLoopOptions(disconnect=True))
    assert clamp.p_g[0] == 0.5 and clamp.pf.v_mag[1] > 1.05
    assert trip.p_g[0] < 0.5


def test_bad_inputs():
    net = chain_network([0.05 + 0.1j], dg_bus=2, p_max=0.3)
    step = step_for(net, [0.1])
    with pytest.raises(ValueError):
        simulate_closed_loop(net, step, [], ClosedLoopOptions())
    with pytest.raises(ValueError):
        simulate_closed_loop(net, step, [Scheme.none()], ClosedLoopOptions(damping=0.0))


@pytest.mark.parametrize("case", [1, 2])
def test_every_benchmark_hour_converges(case):
    # monotone curves with damping 0.5 on both worst days of summer and winter
    net = build_cigre_lv(case)
    schemes = [Scheme.german(), Scheme.qv(1), Scheme.qv(3)]
    for season in ("summer", "winter"):
        for step in make_forecast(net, synth_profiles(season, WORST)):
            for sc in schemes:
                res = simulate_closed_loop(net, step, ControllerAssignment.uniform(net, sc))
                assert res.converged and res.iterations <= 100


def test_type1_q_limited_by_output():
    net = chain_network([0.05 + 0.2j], dg_bus=2, p_max=0.3, capability=TYPE1)
    res = simulate_closed_loop(net, step_for(net, [0.05]), [Scheme.qv(1)])
    assert abs(res.q_g[0]) <= TAN * 0.05 + 1e-15
