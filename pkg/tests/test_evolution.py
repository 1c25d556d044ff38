import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from halfspace_be.spectral_symbols import ModelParams
from halfspace_be import halfspace_resolvent_solver as hs, evolution_solver as ev
from halfspace_be.errors import ConfigError

P = ModelParams(a=1.0, beta=1.0, dim=2)
L = 8.0


def small_grid(nc=16, nx=32):
    return hs.make_field_grid(2, L, nc, x_max=8.0, kind="uniform", nx=nx)


def pulse_data(g, n_t=16, T=1.0):
    x1 = g.tangential_coords()[0]
    bump = np.exp(-((x1 - L / 2) / 1.0) ** 2)
    dt = T / n_t
    t = dt * np.arange(n_t + 1)
    chi = np.sin(np.pi * t / T) ** 6
    h = np.zeros((n_t + 1, 2, g.counts[0]))
    h[:, 0] = chi[:, None] * bump
    H = np.zeros((n_t + 1, 2, 2, g.counts[0]))
    H[:, 0, 0] = 0.5 * chi[:, None] * bump
    H[:, 1, 1] = -H[:, 0, 0]
    return ev.EvolutionData(dt, n_t, h=h, H=H)


def test_zero_data_zero_solution():
    g = small_grid()
    d = ev.EvolutionData(1 / 16, 16)
    for tr in (ev.laplace_contour_solve(P, g, d), ev.time_step_solve(P, g, d),
               ev.time_step_solve(P, g, d, method="march")):
        assert np.all(tr.u == 0) and np.all(tr.Q == 0)


def test_invariants_along_trajectory():
    g = small_grid()
    tr = ev.laplace_contour_solve(P, g, pulse_data(g))
    inv = tr.invariants()
    assert np.abs(tr.u).max() > 1e-3
    assert inv["Q_asymmetry"] < 1e-10 and inv["Q_trace"] < 1e-10


def test_transfer_matches_march():
    # same Crank-Nicolson sequence: agreement up to the march's normal discretization
    g = small_grid(nx=128)
    d = pulse_data(g)
    a = ev.time_step_solve(P, g, d, method="transfer")
    b = ev.time_step_solve(P, g, d, method="march")
    assert np.abs(a.u - b.u).max() / np.abs(b.u).max() < 5e-2


def test_linearity():
    g = small_grid()
    d = pulse_data(g)
    d2 = ev.EvolutionData(d.dt, d.n_t, h=2 * d.h, H=-3 * d.H)
    da = ev.EvolutionData(d.dt, d.n_t, h=d.h)
    dq = ev.EvolutionData(d.dt, d.n_t, H=d.H)
    ta, tq, t2 = (ev.laplace_contour_solve(P, g, x) for x in (da, dq, d2))
    assert np.allclose(t2.u, 2 * ta.u - 3 * tq.u, atol=1e-12 * np.abs(t2.u).max())


def test_maxreg_zero_trajectory():
    g = small_grid()
    tr = ev.laplace_contour_solve(P, g, ev.EvolutionData(1 / 16, 16))
    rep = ev.maxreg_norms(tr, P)
    assert rep["lhs"] == 0.0 and rep["rhs"] == 0.0 and rep["ratio"] is None


def test_maxreg_ratio_finite():
    g = small_grid()
    tr = ev.laplace_contour_solve(P, g, pulse_data(g))
    rep = ev.maxreg_norms(tr, P)
    assert np.isfinite(rep["ratio"]) and rep["ratio"] > 0


def test_incompatible_initial_data():
    g = small_grid()
    u0 = np.ones((2, g.counts[0], g.nx))
    with pytest.raises(ConfigError):
        ev.time_step_solve(P, g, ev.EvolutionData(1 / 16, 16, u0=u0))


def test_nonlinearity_constant_Q():
    g = small_grid(8, 16)
    nl = ev.NonlinearityParams(xi=1.0, a=1.0, b=0.7, c=0.3, dim=2)
    u = np.zeros((2, 8, 16))
    Q = np.zeros((2, 2, 8, 16))
    Q[0, 0], Q[1, 1] = 0.4, -0.4
    f, G = ev.nonlinearity_eval(u, Q, nl, g)
    Qc = np.diag([0.4, -0.4])
    want = ev.traceless(0.7 * Qc @ Qc - 0.3 * np.sum(Qc * Qc) * Qc)
    # normal finite differences of a constant leave roundoff of the stencil size
    assert np.abs(f).max() < 1e-12
    assert np.abs(G - want[:, :, None, None]).max() < 1e-12


def random_fields(g, seed):
    rng = np.random.default_rng(seed)
    x1 = g.tangential_coords()[0][:, None]
    x = g.x[None]
    env = np.exp(-x ** 2)
    modes = lambda: sum(rng.normal() * np.cos(2 * np.pi * k * x1 / L + rng.uniform(0, 6)) for k in range(3))
    u = np.stack([modes() * env * x for _ in range(2)])
    A = np.array([[modes() * env for _ in range(2)] for _ in range(2)])
    Q = ev.traceless(0.5 * (A + np.swapaxes(A, 0, 1)))
    return u, Q


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2 ** 31), xi=st.floats(-2, 2), b=st.floats(-1, 1), c=st.floats(0, 1))
def test_nonlinearity_G_symmetric_traceless(seed, xi, b, c):
    g = small_grid(8, 16)
    u, Q = random_fields(g, seed)
    nl = ev.NonlinearityParams(xi=xi, a=1.0, b=b, c=c, dim=2)
    f, G = ev.nonlinearity_eval(u, Q, nl, g)
    s = 1 + np.abs(G).max()
    assert np.abs(G - np.swapaxes(G, 0, 1)).max() < 1e-12 * s
    assert np.abs(np.trace(G)).max() < 1e-12 * s
    assert np.all(np.isfinite(f))


def test_nonlinearity_params_consistency():
    nl = ev.NonlinearityParams(xi=1.0, a=1.0, dim=2)
    assert nl.consistent_with(P)
    assert not ev.NonlinearityParams(xi=0.7, a=1.0, dim=2).consistent_with(P)
    g = small_grid()
    with pytest.raises(ConfigError):
        ev.picard_iterate(P, ev.NonlinearityParams(xi=0.7, dim=2), g, None, None, None, None, 1.0, 8)


def test_picard_zero_data():
    g = small_grid()
    nl = ev.NonlinearityParams(xi=1.0, a=1.0, b=0.5, c=0.5, dim=2)
    tr, rep = ev.picard_iterate(P, nl, g, None, None, None, None, 1.0, 8)
    assert rep.success and len(rep.d) == 1 and rep.d[0] == 0.0
    assert np.all(tr.u == 0)


def test_stream_function_data_compatible():
    # the measured trace mismatch is pure extrapolation error: it shrinks with nx
    errs = []
    for nx in (64, 256):
        g = small_grid(nx=nx)
        u0, Q0 = ev.stream_function_data(g, 1e-2, seed=1)
        assert abs(max(np.abs(u0).max(), np.abs(Q0).max()) - 1e-2) < 1e-15
        assert np.abs(np.trace(Q0)).max() < 1e-15
        errs.append(ev.check_compatibility(g, ev.EvolutionData(0.1, 4, u0=u0, Q0=Q0)))
    assert errs[1] < 1e-8 and errs[1] < errs[0] / 1e3


@pytest.mark.parametrize("fmt", ["binary", "csv"])
def test_trajectory_roundtrip(tmp_path, fmt):
    g = small_grid(8, 16)
    tr = ev.laplace_contour_solve(P, g, pulse_data(g, n_t=8))
    ev.write_trajectory(tr, tmp_path / "traj", fmt=fmt)
    back = ev.read_trajectory(tmp_path / "traj")
    assert np.array_equal(back.t, tr.t)
    tol = 0 if fmt == "binary" else 1e-15
    assert np.abs(back.u - tr.u).max() <= tol * np.abs(tr.u).max()
    # only the upper triangle of Q is stored
    Qs = np.triu(np.ones((2, 2)))[None, :, :, None, None] * tr.Q
    Qs = Qs + np.swapaxes(Qs, 1, 2) - np.eye(2)[None, :, :, None, None] * tr.Q
    assert np.abs(back.Q - Qs).max() <= tol * np.abs(tr.Q).max()
