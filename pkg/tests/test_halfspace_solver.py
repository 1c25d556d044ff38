import math

import numpy as np
import pytest
import sympy as sp

from halfspace_be.spectral_symbols import ModelParams
from halfspace_be import halfspace_resolvent_solver as hs


def P(beta=1.0, dim=2):
    return ModelParams(a=1.0, beta=beta, dim=dim)


def graded(lam, N=2, L=8 * math.pi, n=64, xm=30.0):
    return hs.make_field_grid(N, L, n, x_max=xm, kind="graded", h0=hs.default_h0(lam, math.pi * n / L))


def bdata(g, seed=0):
    rng = np.random.default_rng(seed)
    N = g.dim
    coords = np.meshgrid(*g.tangential_coords(), indexing="ij")
    bump = np.exp(-sum(((c - l / 2) / 2) ** 2 for c, l in zip(coords, g.lengths)))
    h = np.zeros((N,) + bump.shape)
    for k in range(N - 1):
        h[k] = rng.normal() * bump
    S = rng.normal(size=(N, N))
    S = S + S.T
    S -= np.trace(S) / N * np.eye(N)
    return h, S.reshape((N, N) + (1,) * bump.ndim) * bump


def test_zero_data_zero_fields():
    g = graded(2.0, n=16)
    s = hs.solve_boundary(P(), 2.0, np.zeros((2, 16)), np.zeros((2, 2, 16)), g)
    assert not np.any(s.u) and not np.any(s.Q) and not np.any(s.p)


def test_single_mode_stays_single_mode():
    g = graded(1 + 2j, n=32)
    x1 = g.tangential_coords()[0]
    h = np.zeros((2, 32))
    h[0] = np.cos(2 * math.pi * 3 * x1 / g.lengths[0])
    s = hs.solve_boundary(P(), 1 + 2j, h, np.zeros((2, 2, 32)), g)
    spec = np.abs(np.fft.fft(s.u, axis=1)).max(axis=(0, 2))
    k = np.argsort(spec)[::-1]
    assert set(k[:2]) == {3, 29}
    assert spec[k[2]] < 1e-12 * spec[k[0]]


def test_random_data_256_residual_and_traces():
    lam = 1 + 2j
    g = graded(lam, n=256)
    h, H = bdata(g)
    s = hs.solve_boundary(P(), lam, h, H, g, threads=4)
    assert s.meta["max_mode_residual"] < 1e-9
    hr = hs.from_modes(g, hs.to_modes(g, h, 1), 1)
    assert np.abs(s.u[..., 0] - hr).max() < 1e-8 * np.abs(h).max()


def test_real_lambda_real_fields():
    g = graded(5.0, n=32)
    h, H = bdata(g)
    s = hs.solve_boundary(P(), 5.0, h, H, g)
    for k in ("u", "Q", "p"):
        v = getattr(s, k)
        assert np.abs(np.imag(v)).max() < 1e-13 * np.abs(v).max()


def test_linearity():
    lam = 3 - 1j
    g = graded(lam, n=32)
    h1, H1 = bdata(g, 1)
    h2, H2 = bdata(g, 2)
    s1 = hs.solve_boundary(P(), lam, h1, H1, g)
    s2 = hs.solve_boundary(P(), lam, h2, H2, g)
    s = hs.solve_boundary(P(), lam, 2.5 * h1 + h2, 2.5 * H1 + H2, g)
    for k in ("u", "Q", "p"):
        want = 2.5 * getattr(s1, k) + getattr(s2, k)
        assert np.abs(getattr(s, k) - want).max() < 1e-10 * np.abs(want).max()


def test_extension_parity_and_roundtrip():
    N = 3
    g = hs.make_field_grid(N, 4.0, 4, x_max=3.0, kind="uniform", nx=6)
    rng = np.random.default_rng(0)
    f = rng.normal(size=(N, 4, 4, 6))
    G = rng.normal(size=(N, N, 4, 4, 6))
    fe, Ge = hs.extend_data(f, G, g)
    assert np.array_equal(hs.restrict(fe), f) and np.array_equal(hs.restrict(Ge), G)
    # odd normal component: f_N(-x) = -f_N(x), so it vanishes at 0 in the
    # cell-centered sense (pairs cancel)
    assert np.allclose(fe[N - 1, ..., 5] + fe[N - 1, ..., 6], 0)
    assert np.allclose(Ge[0, 1][..., ::-1], Ge[0, 1])
    assert np.allclose(Ge[0, N - 1][..., ::-1], -Ge[0, N - 1])


def test_wholespace_zero_and_stokes_closed_form():
    g = hs.make_field_grid(2, 2 * math.pi, 8, x_max=2 * math.pi, kind="uniform", nx=16)
    fe, Ge = hs.extend_data(np.zeros((2, 8, 16)), np.zeros((2, 2, 8, 16)), g)
    ws = hs.solve_wholespace(P(), 2.0, fe, Ge, g)
    assert not np.any(ws.v_hat)
    # beta = 0, single full-space Fourier mode: v = P f / (lam + |xi|^2)
    x1 = g.tangential_coords()[0]
    xe = np.concatenate([-g.x[::-1], g.x])
    f = np.zeros((2, 8, 32), complex)
    ph = np.exp(1j * (1 * x1[:, None] + 1 * (xe[None, :] - xe[0])))
    f[0] = 2.0 * ph
    f[1] = 0.5 * ph
    lam = 2 + 1j
    ws = hs.solve_wholespace(P(0.0), lam, f, np.zeros((2, 2, 8, 32)), g)
    xi = np.array([1.0, 1.0])
    fv = np.array([2.0, 0.5])
    want = (fv - xi * (xi @ fv) / 2) / (lam + 2)
    # xi' = 1 is tangential index 1; xi_N = 1 is index 2 on the doubled box of length 4 pi
    got = np.array([ws.v_hat[j][1, 2] for j in range(2)])
    assert np.allclose(got, want, rtol=1e-13)


def test_wholespace_random_residual():
    g = hs.make_field_grid(2, 8.0, 16, x_max=6.0, kind="uniform", nx=32)
    rng = np.random.default_rng(1)
    fe, Ge = hs.extend_data(rng.normal(size=(2, 16, 32)), rng.normal(size=(2, 2, 16, 32)), g)
    ws = hs.solve_wholespace(P(), 1 + 3j, fe, Ge, g)
    assert ws.residual < 1e-10


def _manufactured():
    beta, a = 1.0, 1.0
    L = 4 * math.pi
    x1, x2 = sp.symbols("x1 x2", real=True)
    k = 2 * sp.pi / sp.Float(L)
    psi = sp.sin(k * x1) * x2 * sp.exp(-x2 ** 2) + sp.cos(2 * k * x1) * x2 * sp.exp(-x2 ** 2 / 2)
    u = [sp.diff(psi, x2), -sp.diff(psi, x1)]
    p = sp.cos(k * x1) * sp.exp(-x2 ** 2)
    q11 = sp.cos(k * x1) * sp.exp(-x2 ** 2) * (1 + x2 ** 2)
    q12 = sp.sin(2 * k * x1) * x2 * sp.exp(-x2 ** 2)
    Q = [[q11, q12], [q12, -q11]]
    X = [x1, x2]
    lm = 1 + 2 * sp.I

    def lap(e):
        return sum(sp.diff(e, v, 2) for v in X)
    f = [lm * u[j] - lap(u[j]) + sp.diff(p, X[j])
         + beta * sum(sp.diff(lap(Q[j][kk]) - a * Q[j][kk], X[kk]) for kk in range(2)) for j in range(2)]
    D = [[(sp.diff(u[kk], X[j]) + sp.diff(u[j], X[kk])) / 2 for kk in range(2)] for j in range(2)]
    G = [[lm * Q[j][kk] + a * Q[j][kk] - lap(Q[j][kk]) - beta * D[j][kk] for kk in range(2)] for j in range(2)]
    g = hs.make_field_grid(2, L, 48, x_max=12.0, kind="uniform", nx=192)
    t1 = g.tangential_coords()[0]
    T1, T2 = np.meshgrid(t1, g.x, indexing="ij")

    def ev(e, a1=T1, a2=T2):
        return np.broadcast_to(np.asarray(sp.lambdify((x1, x2), e, "numpy")(a1, a2), complex), a1.shape)
    pack = dict(
        f=np.array([ev(e) for e in f]), G=np.array([[ev(e) for e in r] for r in G]),
        u=np.array([ev(e) for e in u]), Q=np.array([[ev(e) for e in r] for r in Q]),
        gp=np.array([ev(sp.diff(p, v)) for v in X]),
        h=np.array([ev(e, t1, 0 * t1) for e in u]),
        H=np.array([[ev(sp.diff(e, x2), t1, 0 * t1) for e in r] for r in Q]))
    return g, complex(lm), pack


def test_manufactured_solution():
    g, lam, m = _manufactured()
    s = hs.solve_resolvent_full(P(), lam, m["f"], m["G"], m["h"], m["H"], g)
    rel = lambda A, B: np.abs(A - B).max() / np.abs(B).max()
    assert rel(s.u, m["u"]) < 1e-6 and rel(s.Q, m["Q"]) < 1e-6 and rel(s.grad_p, m["gp"]) < 1e-6


def test_full_solve_without_forcing_equals_boundary_solve():
    g = hs.make_field_grid(2, 8.0, 16, x_max=8.0, kind="uniform", nx=64)
    h, H = bdata(g)
    a = hs.solve_resolvent_full(P(), 2 + 1j, np.zeros((2, 16, 64)), np.zeros((2, 2, 16, 64)), h, H, g)
    b = hs.solve_boundary(P(), 2 + 1j, h, H, g)
    assert np.abs(a.u - b.u).max() < 1e-12 * np.abs(b.u).max()


def test_full_solve_zero_traces_with_forcing():
    # parity-smooth forcing (odd components vanish at x_N = 0)
    nx = 256
    g = hs.make_field_grid(2, 8.0, 16, x_max=8.0, kind="uniform", nx=nx)
    c = g.tangential_coords()[0][:, None]
    x = g.x[None]
    ev = np.exp(-(c - 4) ** 2) * np.exp(-x ** 2)
    od = np.exp(-(c - 4) ** 2) * x * np.exp(-x ** 2)
    f = np.stack([ev, 0.5 * od])
    G = np.zeros((2, 2, 16, nx))
    G[0, 0], G[1, 1] = ev, -ev
    G[0, 1] = G[1, 0] = 0.3 * od
    s = hs.solve_resolvent_full(P(), 2 + 1j, f, G, np.zeros((2, 16)), np.zeros((2, 2, 16)), g)
    assert s.meta["max_mode_residual"] < 1e-9 and s.meta["wholespace_residual"] < 1e-10
    # traces at x = 0 by one-sided extrapolation from the first 12 cell centers
    w = hs.fornberg_weights(0.0, g.x[:12], 1)
    u0 = np.tensordot(s.u[..., :12], w[0], axes=([-1], [0]))
    DQ0 = np.tensordot(s.Q[..., :12], w[1], axes=([-1], [0]))
    assert np.abs(u0).max() < 1e-8 * np.abs(s.u).max()
    assert np.abs(DQ0).max() < 1e-8 * np.abs(s.Q).max()


@pytest.mark.parametrize("lam", [1 + 2j, 30.0])
def test_pressure_recovery_matches_amplitude_pressure(lam):
    g = graded(lam)
    h, H = bdata(g)
    s = hs.solve_boundary(P(), lam, h, H, g)
    r = hs.pressure_recovery(s.u, s.Q, None, P(), g)
    assert np.abs(r.grad_p - s.grad_p).max() < 1e-6 * np.abs(s.grad_p).max()


def test_pressure_recovery_zero_and_gradient_forcing():
    g = hs.make_field_grid(2, 8.0, 32, x_max=10.0, kind="uniform", nx=200)
    z = hs.pressure_recovery(np.zeros((2, 32, 200)), np.zeros((2, 2, 32, 200)), None, P(), g)
    assert not np.any(z.grad_p)
    x1 = g.tangential_coords()[0][:, None]
    x = g.x[None]
    phi = np.exp(-(x1 - 4) ** 2 - (x - 3) ** 2)
    f = np.stack([-2 * (x1 - 4) * phi, -2 * (x - 3) * phi])
    r = hs.pressure_recovery(np.zeros((2, 32, 200)), np.zeros((2, 2, 32, 200)), f, P(), g)
    assert np.abs(r.grad_p - f).max() < 1e-5 * np.abs(f).max()


@pytest.mark.parametrize("fmt", ["binary", "csv"])
def test_field_io_roundtrip(tmp_path, fmt):
    g = graded(2.0, n=8)
    h, H = bdata(g)
    s = hs.solve_boundary(P(), 2.0, h, H, g)
    path = hs.write_fields(s, tmp_path / ("f." + ("csv" if fmt == "csv" else "bin")), fmt=fmt)
    r = hs.read_fields(path)
    assert np.allclose(r.u, np.real(s.u), rtol=0, atol=1e-15)
    assert np.allclose(r.Q, np.real(s.Q), rtol=0, atol=1e-15)
