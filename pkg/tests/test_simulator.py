import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pdecq.curves import MixtureCurve
from pdecq.simulator import (
    Grid1D,
    SimulationTrace,
    StabilityError,
    WindowError,
    break_report,
    break_time,
    decay_exponent,
    derivative_jet,
    evolve,
    fd_weights,
    monitor_cq,
    observed_break_time,
    relative_drift,
    stable_dt,
    verify_infinite_cqs,
)
from pdecq.symbolic import parse

TWO_PI = 2 * math.pi


def gaussian(A=1.0, mu=0.0, s=1.5):
    return MixtureCurve(np.array([A]), np.array([mu]), np.array([s]))


@pytest.fixture(scope="module")
def gaussian_run():
    grid = Grid1D(-15.0, 15.0, 601)
    u0 = gaussian()
    tb = break_time(u0, grid)
    trace = evolve("u_x^3", u0, grid, 1.5 * tb, tb / 400, save_every=tb / 100)
    return trace, tb


# -- finite differences -------------------------------------------------------


def test_fd_weights_known_stencils():
    np.testing.assert_allclose(fd_weights([-1, 0, 1], 1), [-0.5, 0, 0.5])
    np.testing.assert_allclose(fd_weights([-1, 0, 1], 2), [1, -2, 1])
    np.testing.assert_allclose(fd_weights([-2, -1, 0, 1, 2], 1), [1 / 12, -2 / 3, 0, 2 / 3, -1 / 12])
    with pytest.raises(ValueError):
        fd_weights([0, 1], 2)


@given(st.integers(1, 4), st.integers(0, 3))
def test_fd_weights_exact_on_polynomials(order, shift):
    offsets = np.arange(-3, 4) + shift
    w = fd_weights(offsets, order)
    # exact for monomials up to the stencil size minus one
    for p in range(offsets.size):
        exact = math.factorial(p) if p == order else 0.0
        assert np.dot(w, offsets.astype(float) ** p) == pytest.approx(exact, abs=1e-8 * 10**p)


@pytest.mark.parametrize("periodic", [True, False])
def test_spatial_fourth_order_convergence(periodic):
    errs = []
    for N in (32, 64, 128):
        grid = Grid1D(0.0, TWO_PI, N, periodic=periodic)
        x = grid.x
        jet = derivative_jet(np.sin(x), grid, 3)
        exact = np.stack([np.sin(x), np.cos(x), -np.sin(x), -np.cos(x)], axis=-1)
        errs.append(np.abs(jet - exact)[:, 1:].max())
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(rates > 3.5)


def test_grid_validation():
    with pytest.raises(ValueError):
        Grid1D(0, 1, 8)
    with pytest.raises(ValueError):
        Grid1D(1, 0, 32)
    g = Grid1D(0, 1, 20, periodic=True)
    assert g.x[-1] < 1 and g.dx == pytest.approx(0.05)


# -- time stepping ------------------------------------------------------------


def test_zero_rhs_keeps_state():
    grid = Grid1D(-5, 5, 64)
    u0 = np.exp(-grid.x**2)
    tr = evolve("0", u0, grid, 1.0, 0.1)
    np.testing.assert_array_equal(tr.fields[-1], u0)
    assert tr.times.size == 11


def test_advection_matches_shifted_profile():
    grid = Grid1D(0.0, TWO_PI, 128, periodic=True)
    tr = evolve("u_x", np.sin, grid, 1.0, 0.01, save_every=0.5)
    np.testing.assert_allclose(tr.times, [0, 0.5, 1.0])
    assert np.abs(tr.fields[-1] - np.sin(grid.x + 1.0)).max() < 1e-3


def test_time_fourth_order_convergence():
    # u_t = u has no spatial error, so only the integrator is measured
    grid = Grid1D(0, 1, 16)
    errs = [abs(evolve("u", np.ones(16), grid, 1.0, dt).fields[-1][0] - math.e) for dt in (0.2, 0.1, 0.05)]
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(rates > 3.8)


def test_stability_check():
    grid = Grid1D(-10, 10, 200)
    u0 = np.exp(-grid.x**2)
    limit = stable_dt(parse("u_xx"), u0, grid)
    assert limit == pytest.approx(2.5 / (16 / 3) * grid.dx**2, rel=0.05)
    with pytest.raises(StabilityError):
        evolve("u_xx", u0, grid, 1.0, 10 * limit)
    # the adaptive mode shrinks the step instead
    tr = evolve("u_xx", u0, grid, 0.1, 10 * limit, adaptive=True)
    assert np.all(np.isfinite(tr.fields))


def test_argument_checks():
    grid = Grid1D(0, 1, 32)
    with pytest.raises(ValueError):
        evolve("0", np.zeros(32), grid, -1, 0.1)
    with pytest.raises(ValueError):
        evolve("0", np.zeros(5), grid, 1, 0.1)
    with pytest.raises(ValueError):
        evolve("0", np.zeros(32), grid, 1, 0.1, viscosity=-1)


def test_blowup_truncates_trace():
    grid = Grid1D(0, 1, 16)
    tr = evolve("u^2", np.ones(16), grid, 2.0, 0.01, save_every=0.1, check_stability=False)
    # u' = u^2 from 1 blows up at t = 1
    assert tr.blowup_time is not None and 0.9 < tr.blowup_time <= 1.01
    assert tr.times[-1] < tr.blowup_time


def test_kdv_mass_and_energy():
    grid = Grid1D(-20, 20, 256, periodic=True)
    tr = evolve("u_xxx - 6*u*u_x", gaussian(0.5), grid, 1.0, 0.002, save_every=0.1)
    for h in ("u", "u^2", "u^3 + 1/2*u_x^2"):
        assert relative_drift(monitor_cq(tr, h)).max() < 1e-3


def test_trace_io(tmp_path):
    grid = Grid1D(0, 1, 16)
    tr = evolve("0", np.linspace(0, 1, 16), grid, 0.2, 0.1)
    monitor_cq(tr, "u", name="mass")
    csv_path, json_path = tr.save(tmp_path / "run")
    rows = csv_path.read_text().splitlines()
    assert rows[0] == "t,x,u" and len(rows) == 1 + 3 * 16
    meta = json.loads(json_path.read_text())
    assert meta["grid"]["N"] == 16
    assert "mass" in tr.observables_dict()["observables"]


def test_trace_validation():
    grid = Grid1D(0, 1, 16)
    with pytest.raises(ValueError):
        SimulationTrace(grid, np.array([0.0, 0.0]), np.zeros((2, 16)))
    with pytest.raises(ValueError):
        SimulationTrace(grid, np.array([0.0]), np.zeros((1, 8)))


# -- breaking -----------------------------------------------------------------


def test_sine_break_time():
    grid = Grid1D(0.0, TWO_PI, 4096, periodic=True)
    assert break_time(np.sin(grid.x), grid) == pytest.approx(1 / 3, abs=1e-6)


def test_break_time_scales_inversely_with_amplitude_squared():
    grid = Grid1D(-15, 15, 1001)
    t1 = break_time(gaussian(1.0), grid)
    t2 = break_time(gaussian(2.0), grid)
    assert t1 / t2 == pytest.approx(4.0, rel=1e-9)


def test_linear_profile_never_breaks():
    grid = Grid1D(-1, 1, 64)
    assert break_time(grid.x, grid) is None
    with pytest.raises(ValueError):
        break_time(gaussian())


def test_gaussian_observed_break(gaussian_run):
    trace, tb = gaussian_run
    t_obs = observed_break_time(trace)
    assert t_obs is not None and abs(t_obs / tb - 1) < 0.2
    rep = break_report(trace, u0=gaussian())
    assert rep.t_b_analytic == pytest.approx(tb)
    assert rep.to_dict()["t_b_observed"] == t_obs


def test_observed_break_absent_for_diffusion():
    grid = Grid1D(-10, 10, 128)
    tr = evolve("u_xx", np.exp(-grid.x**2), grid, 1.0, 1e-3, save_every=0.1)
    assert observed_break_time(tr) is None


def _synthetic(times, amplitude):
    grid = Grid1D(0, 1, 16)
    fields = np.outer(amplitude, np.ones(16))
    return SimulationTrace(grid, np.asarray(times, float), fields, {"max_abs_u": np.asarray(amplitude, float)})


@pytest.mark.parametrize("p", [-1.0, -0.5, 0.0])
def test_decay_exponent_on_power_law(p):
    t = np.linspace(0.1, 20, 400)
    slope, window = decay_exponent(_synthetic(t, t**p), t_b=1.0)
    assert slope == pytest.approx(p, abs=1e-10)
    assert window[0] >= 2.0 and window[1] == pytest.approx(20)


def test_decay_window_errors():
    t = np.linspace(0.1, 5, 50)
    with pytest.raises(WindowError):
        decay_exponent(_synthetic(t, 1 / t), t_b=1.0)
    with pytest.raises(WindowError):
        decay_exponent(_synthetic(t, 1 / t), t_b=None)


# -- u_x^n family -------------------------------------------------------------


def test_power_family_is_conserved():
    results = verify_infinite_cqs([1, 2, 3, 4, 5])
    for r in results:
        assert r["symbolic"]
        assert r["max_drift"] < 1e-2
    assert results[1]["antiderivative"] == "3/2*u_x^4"
    with pytest.raises(ValueError):
        verify_infinite_cqs([0])


def test_monitor_separates_conserved_from_not(gaussian_run):
    trace, tb = gaussian_run
    pre = trace.times <= tb
    conserved = relative_drift(monitor_cq(trace, "u*u_xx")[pre]).max()
    other = relative_drift(monitor_cq(trace, "u_xx^2")[pre]).max()
    assert conserved < 5e-3
    assert other > 5e-2


def test_gaussian_advection_translates():
    grid = Grid1D(-15.0, 15.0, 601)
    u0 = gaussian()
    tr = evolve("u_x", u0, grid, 2.0, 0.01)
    assert np.abs(tr.fields[-1] - u0(grid.x + 2.0)).max() < 1e-3


@given(st.sampled_from(["u^2", "u_x^2*u", "u_xx^3 + u", "u*u_x*u_xxx"]))
def test_static_equation_conserves_everything_exactly(h):
    grid = Grid1D(-10, 10, 128)
    tr = evolve("0", gaussian(), grid, 0.5, 0.1)
    series = monitor_cq(tr, h)
    np.testing.assert_array_equal(series, series[0])


def test_sine_forms_cusp_then_decays():
    grid = Grid1D(0.0, TWO_PI, 256, periodic=True)
    tb = break_time(np.sin(grid.x), grid)
    tr = evolve("u_x^3", np.sin, grid, 3 * tb, 0.01, save_every=tb / 10, viscosity=0.005, adaptive=True)
    curv = np.array([np.abs(derivative_jet(f, grid, 2)[:, 2]).max() for f in tr.fields])
    amp = np.abs(tr.fields).max(axis=1)
    # u_x stays bounded while u_xx steepens into a cusp
    assert curv.max() > 10 * curv[0]
    pre = (amp[0] - amp[tr.times <= 0.9 * tb][-1]) / (0.9 * tb)
    after = tr.times >= 1.5 * tb
    post = (amp[after][0] - amp[after][-1]) / (tr.times[after][-1] - tr.times[after][0])
    assert np.all(np.diff(amp[after]) < 0)
    # viscosity alone sets the slow pre-break loss; the cusp dissipates far faster
    assert post > 5 * pre
