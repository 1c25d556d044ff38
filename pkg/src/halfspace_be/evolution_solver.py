"""Linear evolution on the half-space (Laplace inversion along Re lam = gamma,
Crank-Nicolson), maximal-regularity surrogate norms, the nonlinear terms and
the Picard iteration for the local solution.

Time grid: t_n = n dt, n = 0..n_t (n_t intervals, n_t + 1 slices).
All spatial work goes through solve_resolvent_full on a uniform
cell-centered normal grid.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
import json
import math
import os

import numpy as np

from . import halfspace_resolvent_solver as hs
from . import spectral_symbols as ss
from .errors import ConfigError, ContourTooLow, NoContraction

PAD = 3            # transform window = PAD * T
GAMMA_T = 10.0     # gamma >= GAMMA_T / T, so e^{-gamma * window} <= e^{-30}
WRAP = 30.0        # window chosen so that e^{-gamma * window} <= e^{-WRAP}
SCHEMA = 1


# -------------------------------------------------------------------- data

@dataclass
class EvolutionData:
    """Samples on t_n = n dt.  h (n, N, *counts), H (n, N, N, *counts),
    f (n, N, *counts, nx), G (n, N, N, *counts, nx); n >= n_t + 1 (samples past
    T feed the transform window, missing ones count as zero)."""
    dt: float
    n_t: int
    h: np.ndarray | None = None
    H: np.ndarray | None = None
    f: np.ndarray | None = None
    G: np.ndarray | None = None
    u0: np.ndarray | None = None
    Q0: np.ndarray | None = None

    @property
    def T(self):
        return self.dt * self.n_t

    def is_real(self):
        return all(v is None or not np.iscomplexobj(v) for v in
                   (self.h, self.H, self.f, self.G, self.u0, self.Q0))

    def has_initial(self):
        return any(v is not None and np.any(v != 0) for v in (self.u0, self.Q0))


def _slices(arr, n, shape, dtype=float):
    """First n time slices of arr (zero padded / zero when None)."""
    out = np.zeros((n,) + shape, dtype)
    if arr is not None:
        m = min(n, arr.shape[0])
        out[:m] = arr[:m]
    return out


@dataclass
class Trajectory:
    t: np.ndarray
    grid: hs.FieldGrid          # geometry only
    u: np.ndarray               # (n_t+1, N, *counts, nx)
    Q: np.ndarray               # (n_t+1, N, N, *counts, nx)
    p: np.ndarray | None = None
    gamma: float = 0.0
    data: EvolutionData | None = None
    meta: dict = field(default_factory=dict)

    @property
    def dt(self):
        return float(self.t[1] - self.t[0])

    def invariants(self):
        Qs = self.Q
        N = self.grid.dim
        sym = float(np.abs(Qs - np.swapaxes(Qs, 1, 2)).max(initial=0.0))
        tr = float(np.abs(np.trace(Qs, axis1=1, axis2=2)).max(initial=0.0))
        fd = hs.fd_operators(self.grid.x)
        div = 0.0
        for n in range(self.u.shape[0]):
            g = hs.field_gradient(self.grid, self.u[n], fd)
            div = max(div, float(np.abs(sum(g[j, j] for j in range(N))).max()))
        return {"Q_asymmetry": sym, "Q_trace": tr, "div_u": div}


def check_compatibility(grid, data, tol=1e-6):
    """u0|0 = h(0), D_N Q0|0 = H(0), extrapolated to x_N = 0.  The allowed
    mismatch is tol * scale plus 4x the extrapolation error estimate
    (9-point vs 7-point one-sided stencils)."""
    if data.u0 is None and data.Q0 is None:
        return 0.0
    w9 = hs.fornberg_weights(0.0, grid.x[:9], 1)
    w7 = hs.fornberg_weights(0.0, grid.x[:7], 1)
    err = est = 0.0
    scale = 1.0
    for arr, bd, k in ((data.u0, data.h, 0), (data.Q0, data.H, 1)):
        if arr is None:
            continue
        tr = arr[..., :9] @ w9[k]
        est = max(est, float(np.abs(tr - arr[..., :7] @ w7[k]).max()))
        b0 = bd[0] if bd is not None else 0.0
        err = max(err, float(np.abs(tr - b0).max()))
        scale = max(scale, float(np.abs(arr).max()))
    if err > tol * scale + 4 * est:
        raise ConfigError(f"incompatible initial data: trace mismatch {err:.2e} (extrapolation error ~{est:.1e})")
    return err


# ------------------------------------------------------ frequency solves

def default_gamma(params, T):
    return max(params.gamma, 2 * params.r, GAMMA_T / T)


def _window(n_t, pad):
    n = pad * n_t + 1
    return n if n % 2 else n + 1      # odd: no Nyquist bin


def linear_operator(params, grid, u, Q, fd=None):
    """Spatial part of the linear system without pressure:
    (-Delta u + beta Div (Delta - a) Q,  (a - Delta) Q - beta D(u))."""
    fd = fd if fd is not None else hs.fd_operators(grid.x)
    N = grid.dim
    gu = hs.field_gradient(grid, u, fd)                 # gu[j, i] = d_j u_i
    lap = lambda A: sum(hs.field_gradient(grid, hs.field_gradient(grid, A, fd)[k], fd)[k] for k in range(N))
    lapQ = lap(Q)
    Lu = -lap(u)
    if params.beta != 0:
        M = lapQ - params.a * Q
        gM = hs.field_gradient(grid, M, fd)             # gM[j, k, l] = d_j M_kl
        Lu = Lu + params.beta * sum(gM[j, :, j] for j in range(N))
    Du = 0.5 * (gu + np.swapaxes(gu, 0, 1))
    LQ = params.a * Q - lapQ - params.beta * Du
    if not np.iscomplexobj(u) and not np.iscomplexobj(Q):
        Lu, LQ = np.real(Lu), np.real(LQ)
    return Lu, LQ


def lift_initial(params, grid, data, pad=PAD):
    """w = (u, Q) - (u0, Q0): zero initial data, forcing minus the linear
    operator on (u0, Q0) for all t >= 0, traces h - h(0), H - H(0)."""
    N = grid.dim
    counts = tuple(grid.counts)
    nx = grid.nx
    n = max(_window(data.n_t, pad), data.n_t + 1)
    u0 = data.u0 if data.u0 is not None else np.zeros((N,) + counts + (nx,))
    Q0 = data.Q0 if data.Q0 is not None else np.zeros((N, N) + counts + (nx,))
    Lu, LQ = linear_operator(params, grid, u0, Q0)
    dt_ = complex if not data.is_real() else float
    f = _slices(data.f, n, (N,) + counts + (nx,), dt_) - Lu[None]
    G = _slices(data.G, n, (N, N) + counts + (nx,), dt_) - LQ[None]
    h = _slices(data.h, n, (N,) + counts, dt_)
    H = _slices(data.H, n, (N, N) + counts, dt_)
    h = h - h[0][None]
    H = H - H[0][None]
    return EvolutionData(data.dt, data.n_t, h=h, H=H, f=f, G=G), u0, Q0


def _with_initial(solver, params, grid, data, pad=PAD, **kw):
    if not data.has_initial():
        return solver(data, **kw)
    lifted, u0, Q0 = lift_initial(params, grid, data, pad)
    tr = solver(lifted, **kw)
    tr.u = tr.u + u0[None]
    tr.Q = tr.Q + Q0[None]
    tr.data = data
    tr.meta["initial_data"] = "constant lift"
    return tr


def _transform_solve(params, grid, data, gamma, lam_of_s, forcing_fix, pad, threads):
    """Shared driver: weighted DFT of the data, one resolvent solve per
    time frequency, inverse transform.  lam_of_s maps s = gamma + i tau to the
    spectral parameter; forcing_fix(z) * F^0 is subtracted from the forcing
    transform (trapezoid forcing of Crank-Nicolson)."""
    N = grid.dim
    dt = data.dt
    Np = _window(data.n_t, pad)
    counts = tuple(grid.counts)
    nx = grid.nx
    real = data.is_real()
    n = np.arange(Np)
    rho = np.exp(-gamma * dt * n)
    fwd = (lambda a: np.fft.rfft(a, axis=0)) if real else (lambda a: np.fft.fft(a, axis=0))
    nk = Np // 2 + 1 if real else Np
    k = np.arange(nk) if real else np.fft.fftfreq(Np, 1.0 / Np)
    tau = 2 * np.pi * k / (Np * dt)
    s = gamma + 1j * tau
    lam = lam_of_s(s)
    # sector check on every sampled parameter
    bad = ~ss.in_sector(lam, params.theta, params.r)
    if np.any(bad):
        raise ContourTooLow(f"gamma={gamma:.3g}: {int(bad.sum())} of {lam.size} spectral parameters outside the sector")
    ty = float if real else complex
    wt = lambda a: a * rho.reshape((-1,) + (1,) * (a.ndim - 1))
    fh = fwd(wt(_slices(data.f, Np, (N,) + counts + (nx,), ty)))
    Gh = fwd(wt(_slices(data.G, Np, (N, N) + counts + (nx,), ty)))
    hh = fwd(wt(_slices(data.h, Np, (N,) + counts, ty)))
    Hh = fwd(wt(_slices(data.H, Np, (N, N) + counts, ty)))
    z = np.exp(s * dt)
    F0 = (_slices(data.f, 1, (N,) + counts + (nx,), ty)[0], _slices(data.G, 1, (N, N) + counts + (nx,), ty)[0])
    U = np.zeros((nk, N) + counts + (nx,), complex)
    QQ = np.zeros((nk, N, N) + counts + (nx,), complex)
    P = np.zeros((nk,) + counts + (nx,), complex)
    res = np.zeros(nk)

    def work(i):
        fi, Gi = fh[i], Gh[i]
        if forcing_fix is not None:
            cf = forcing_fix(z[i])
            fi = fi - cf * F0[0]
            Gi = Gi - cf * F0[1]
        if not (np.any(fi) or np.any(Gi) or np.any(hh[i]) or np.any(Hh[i])):
            return i, None
        sol = hs.solve_resolvent_full(params, lam[i], fi, Gi, hh[i], Hh[i], grid, check=False)
        return i, sol

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = ex.map(work, range(nk))
            for i, sol in results:
                if sol is not None:
                    U[i], QQ[i], P[i] = sol.u, sol.Q, sol.p
                    res[i] = max(sol.meta["wholespace_residual"], sol.meta["max_mode_residual"])
    else:
        for i in range(nk):
            _, sol = work(i)
            if sol is not None:
                U[i], QQ[i], P[i] = sol.u, sol.Q, sol.p
                res[i] = max(sol.meta["wholespace_residual"], sol.meta["max_mode_residual"])
    inv = (lambda a: np.fft.irfft(a, n=Np, axis=0)) if real else (lambda a: np.fft.ifft(a, axis=0))
    keep = data.n_t + 1
    unwt = lambda a: inv(a)[:keep] / rho[:keep].reshape((-1,) + (1,) * (a.ndim - 1))
    t = dt * np.arange(keep)
    meta = {"gamma": gamma, "window": Np, "n_freq": nk, "max_frequency_residual": float(res.max(initial=0.0)),
            "min_re_lambda": float(lam.real.min()), "real_data": real}
    return Trajectory(t, grid, unwt(U), unwt(QQ), unwt(P), gamma, data, meta)


def laplace_contour_solve(params, grid, data, gamma=None, pad=PAD, threads=1):
    """Inversion along Re lam = gamma: DFT of e^{-gamma t} data over a window
    of pad*T, resolvent solve at lam = gamma + i tau per frequency, inverse DFT
    times e^{gamma t}.  Initial data: constant lift (see lift_initial)."""
    hs._check_dim(params, grid)
    if gamma is None:
        # the lift switches forcing on abruptly; a small gamma keeps the
        # e^{gamma t} amplification of the resulting Gibbs error in check
        gamma = default_gamma(params, data.T) if not data.has_initial() else \
            max(params.gamma, 2 * params.r, 2.0 / data.T)
    pad = max(pad, math.ceil(WRAP / (gamma * data.T)))
    check_compatibility(grid, data)
    run = lambda d: _transform_solve(params, grid, d, gamma, lambda s: s, None, pad, threads)
    tr = _with_initial(run, params, grid, data, pad)
    tr.meta["method"] = "laplace"
    return tr


def cn_transfer_lambda(s, dt):
    """Spectral parameter seen by Crank-Nicolson at z = e^{s dt}."""
    return (2.0 / dt) * np.tanh(s * dt / 2)


def time_step_solve(params, grid, data, dt=None, method="transfer", gamma=None, pad=PAD, threads=1,
                    forcing=None):
    """Crank-Nicolson.  method='transfer': the exact CN sequence through its
    z-transform (resolvent at (2/dt) tanh(s dt/2)); initial data by the
    constant lift.
    method='march': implicit-midpoint stepping, one resolvent solve at
    lam = 2/dt per step; forcing(n, u, Q) -> (f, G) adds state-dependent
    forcing (Picard)."""
    hs._check_dim(params, grid)
    if dt is not None and abs(dt - data.dt) > 1e-14 * dt:
        raise ConfigError("dt must match the data sampling")
    check_compatibility(grid, data)
    if method == "transfer":
        if forcing is not None:
            raise ConfigError("state-dependent forcing needs method='march'")
        gamma = default_gamma(params, data.T) if gamma is None else gamma
        pad = max(pad, math.ceil(WRAP / (gamma * data.T)))
        fix = lambda z: z / (z + 1)
        run = lambda d: _transform_solve(params, grid, d, gamma, lambda s: cn_transfer_lambda(s, d.dt),
                                         fix, pad, threads)
        tr = _with_initial(run, params, grid, data, pad)
        tr.meta["method"] = "cn_transfer"
        return tr
    if method != "march":
        raise ConfigError(f"unknown time stepping method {method!r}")
    return _march(params, grid, data, forcing, threads)


def _march(params, grid, data, forcing, threads):
    N = grid.dim
    dt, nt = data.dt, data.n_t
    counts = tuple(grid.counts)
    nx = grid.nx
    shape_u = (N,) + counts + (nx,)
    shape_Q = (N, N) + counts + (nx,)
    dtype = complex if not data.is_real() else float
    f = _slices(data.f, nt + 1, shape_u, dtype)
    G = _slices(data.G, nt + 1, shape_Q, dtype)
    h = _slices(data.h, nt + 1, (N,) + counts, dtype)
    H = _slices(data.H, nt + 1, (N, N) + counts, dtype)
    u = np.zeros((nt + 1,) + shape_u, dtype)
    Q = np.zeros((nt + 1,) + shape_Q, dtype)
    p = np.zeros((nt,) + counts + (nx,), dtype)
    if data.u0 is not None:
        u[0] = data.u0
    if data.Q0 is not None:
        Q[0] = data.Q0
    lam = 2.0 / dt
    cast = (lambda a: a.real) if dtype is float else (lambda a: a)
    fn, Gn = f[0], G[0]
    if forcing is not None:
        a, b = forcing(0, u[0], Q[0])
        fn, Gn = fn + a, Gn + b
    res = 0.0
    for n in range(nt):
        f1, G1 = f[n + 1], G[n + 1]
        # explicit part of the trapezoid forcing uses the state at n only
        # (forcing at n+1 needs the new state: one correction sweep below)
        fb = 0.5 * (fn + f1)
        Gb = 0.5 * (Gn + G1)
        hb = 0.5 * (h[n] + h[n + 1])
        Hb = 0.5 * (H[n] + H[n + 1])
        sol = hs.solve_resolvent_full(params, lam, lam * u[n] + fb, lam * Q[n] + Gb, hb, Hb, grid,
                                      threads=threads, check=False)
        u[n + 1] = cast(2 * sol.u - u[n])
        Q[n + 1] = cast(2 * sol.Q - Q[n])
        p[n] = cast(sol.p)
        res = max(res, sol.meta["wholespace_residual"])
        fn, Gn = f1, G1
        if forcing is not None:
            a, b = forcing(n + 1, u[n + 1], Q[n + 1])
            fn, Gn = fn + a, Gn + b
    t = dt * np.arange(nt + 1)
    meta = {"method": "cn_march", "lambda": lam, "max_frequency_residual": res, "p_at": "half steps"}
    return Trajectory(t, grid, u, Q, p, 0.0, data, meta)


# -------------------------------------------------------- surrogate norms

def _slice_norm(grid, arr, order, q, fd):
    """W^{order,q} surrogate: sum_j ||D^j arr||_q."""
    from .bound_verifier import lq_norm
    tot = 0.0
    d = np.asarray(arr)
    lead = d.ndim - grid.dim
    for j in range(order + 1):
        tot += lq_norm(grid, d, q, d.ndim - grid.dim)
        if j < order:
            d = hs.field_gradient(grid, d, fd)
    return tot


def _lp_time(vals, dt, p):
    return float((np.sum(np.asarray(vals) ** p) * dt) ** (1.0 / p))


def half_derivative_series(series, dt, gamma, l):
    """e^{-gamma t} Lambda_{gamma,l} on the E_T extension (period 2T): the
    input is e^{-gamma t} f on t_0..t_{n_t}; returns samples on [0, 2T)."""
    nt = series.shape[0] - 1
    ext = np.concatenate([series, series[-2:0:-1]], axis=0)   # f(2T - t), period 2 n_t
    if l == 0:
        return ext
    M = ext.shape[0]
    tau = 2 * np.pi * np.fft.fftfreq(M, dt)
    mult = np.abs(gamma + 1j * tau) ** (l / 2)
    out = np.fft.ifft(np.fft.fft(ext, axis=0) * mult.reshape((-1,) + (1,) * (ext.ndim - 1)), axis=0)
    return out if np.iscomplexobj(series) else out.real


def _maxreg_sum(grid, series, dt, gamma, top, p, q, fd):
    tot = 0.0
    parts = {}
    for l in range(3):
        s = half_derivative_series(series, dt, gamma, l)
        vals = [_slice_norm(grid, s[i], top - l, q, fd) for i in range(s.shape[0])]
        parts[l] = _lp_time(vals, dt, p)
        tot += parts[l]
    return tot, parts


def maxreg_norms(traj, params, gamma=None, p=None, q=None, stride=1):
    """Discrete surrogate of both sides of the maximal-regularity estimate.
    Besov norms of the initial data are replaced by W^{2,q} / W^{3,q}."""
    grid = traj.grid
    p = params.p if p is None else p
    q = params.q if q is None else q
    gamma = (traj.gamma or default_gamma(params, traj.t[-1])) if gamma is None else gamma
    fd = hs.fd_operators(grid.x)
    t = traj.t[::stride]
    dt = float(t[1] - t[0])
    w = np.exp(-gamma * t)
    wts = lambda a: a[::stride] * w.reshape((-1,) + (1,) * (a.ndim - 1))
    lu, pu = _maxreg_sum(grid, wts(traj.u), dt, gamma, 2, p, q, fd)
    lQ, pQ = _maxreg_sum(grid, wts(traj.Q), dt, gamma, 3, p, q, fd)
    lhs = lu + lQ
    rep = {"u": lu, "Q": lQ, "u_parts": pu, "Q_parts": pQ}
    if traj.p is not None and traj.p.shape[0] >= t.size - 1:
        pp = traj.p[::stride][: t.size]
        vals = []
        for i in range(pp.shape[0]):
            g = hs.field_gradient(grid, pp[i], fd)
            vals.append(_slice_norm(grid, g, 0, q, fd) * w[min(i, w.size - 1)])
        rep["grad_p"] = _lp_time(vals, dt, p)
        lhs += rep["grad_p"]
    rhs = 0.0
    d = traj.data
    if d is not None:
        n = traj.t.size
        kappa = gamma ** 0.5 + 1.0
        ext = np.exp(-kappa * grid.x)
        for name, arr in (("h", d.h), ("H", d.H)):
            if arr is None:
                continue
            e = wts(arr[:n][..., None] * ext)
            v, _ = _maxreg_sum(grid, e, dt, gamma, 2, p, q, fd)
            rep[name] = v
            rhs += v
        if d.f is not None:
            e = wts(d.f[:n])
            rep["f"] = _lp_time([_slice_norm(grid, e[i], 0, q, fd) for i in range(e.shape[0])], dt, p)
            rhs += rep["f"]
        if d.G is not None:
            e = wts(d.G[:n])
            rep["G"] = _lp_time([_slice_norm(grid, e[i], 1, q, fd) for i in range(e.shape[0])], dt, p)
            rhs += rep["G"]
        if d.u0 is not None:
            rep["u0"] = _slice_norm(grid, d.u0, 2, q, fd)
            rhs += rep["u0"]
        if d.Q0 is not None:
            rep["Q0"] = _slice_norm(grid, d.Q0, 3, q, fd)
            rhs += rep["Q0"]
    rep.update({"lhs": lhs, "rhs": rhs, "ratio": lhs / rhs if rhs > 0 else None,
                "gamma": gamma, "p": p, "q": q, "initial_norm": "W^{2,q} x W^{3,q} surrogate"})
    return rep


# ----------------------------------------------------------- nonlinearity

@dataclass(frozen=True)
class NonlinearityParams:
    xi: float = 0.5
    a: float = 1.0
    b: float = 0.0
    c: float = 0.0
    dim: int = 2

    @property
    def beta(self):
        return 2.0 * self.xi / self.dim

    def consistent_with(self, params, tol=1e-12):
        return abs(self.beta - params.beta) <= tol * (1 + abs(params.beta)) and abs(self.a - params.a) <= tol


def _mm(A, B):
    return np.einsum("ij...,jk...->ik...", A, B)


def _ddot(A, B):
    return np.einsum("ij...,ij...->...", A, B)


def _eye(N, like):
    e = np.zeros((N, N) + like.shape[2:], like.dtype)
    for j in range(N):
        e[j, j] = 1.0
    return e


def traceless(A):
    N = A.shape[0]
    tr = np.trace(A, axis1=0, axis2=1)
    return A - tr[None, None] * _eye(N, A) / N


def _div(grid, A, fd):
    """(Div A)_k = sum_j d_j A_kj."""
    g = hs.field_gradient(grid, A, fd)       # g[j, k, l] = d_j A_kl
    N = A.shape[0]
    return sum(g[j, :, j] for j in range(N))


def nonlinearity_eval(u, Q, nl, grid, fd=None):
    """(f(u,Q), G(u,Q)) with (grad u)_ij = d_j u_i; derivatives tangentially
    spectral, normally by finite differences."""
    N = grid.dim
    fd = fd if fd is not None else hs.fd_operators(grid.x)
    xi, a, b, c = nl.xi, nl.a, nl.b, nl.c
    beta = nl.beta
    gu = np.swapaxes(hs.field_gradient(grid, u, fd), 0, 1)      # gu[i, j] = d_j u_i
    gQ = hs.field_gradient(grid, Q, fd)                          # gQ[k, a, b]
    lapQ = sum(hs.field_gradient(grid, gQ[k], fd)[k] for k in range(N))
    I = _eye(N, Q)
    Q2 = _mm(Q, Q)
    nQ2 = _ddot(Q, Q)
    calF = b * Q2 - c * nQ2 * Q
    HH = lapQ - a * Q + b * traceless(Q2) - c * nQ2 * Q
    HQ = _ddot(HH, Q)
    gQgQ = np.einsum("jab...,kab...->jk...", gQ, gQ)
    S = 2 * xi * HQ * (Q + I / N) - (xi + 1) * _mm(HH, Q) + (1 - xi) * _mm(Q, HH) - gQgQ
    ugu = np.einsum("j...,ij...->i...", u, gu)
    f = -ugu + _div(grid, S, fd) - beta * _div(grid, traceless(calF), fd)
    Du = 0.5 * (gu + np.swapaxes(gu, 0, 1))
    Wu = 0.5 * (gu - np.swapaxes(gu, 0, 1))
    ugQ = np.einsum("k...,kab...->ab...", u, gQ)
    Qgu = _ddot(Q, gu)
    G = (-ugQ + xi * (_mm(Du, Q) + _mm(Q, Du)) + _mm(Wu, Q) - _mm(Q, Wu)
         - 2 * xi * (Q + I / N) * Qgu + traceless(calF))
    if not np.iscomplexobj(u) and not np.iscomplexobj(Q):
        f, G = np.real(f), np.real(G)
    return f, G


# ------------------------------------------------------------------ Picard

def traj_norm(grid, u, Q, dt, p, q, fd):
    """||(u,Q)||_T surrogate: L^p_t W^{2,q} u + L^p_t W^{3,q} Q
    + L^p_t L^q d_t u + L^p_t W^{1,q} d_t Q."""
    du = np.gradient(u, dt, axis=0, edge_order=2)
    dQ = np.gradient(Q, dt, axis=0, edge_order=2)
    n = u.shape[0]
    parts = [[_slice_norm(grid, u[i], 2, q, fd) for i in range(n)],
             [_slice_norm(grid, Q[i], 3, q, fd) for i in range(n)],
             [_slice_norm(grid, du[i], 0, q, fd) for i in range(n)],
             [_slice_norm(grid, dQ[i], 1, q, fd) for i in range(n)]]
    return sum(_lp_time(v, dt, p) for v in parts)


@dataclass
class ContractionReport:
    d: list
    ratios: list
    norms: list
    kappa: float | None
    success: bool
    eps: float | None = None
    omega: float | None = None
    in_ball: bool = True
    informative: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def to_dict(self):
        out = asdict(self)
        for k in ("d", "ratios", "norms", "informative"):
            out[k] = [float(v) if np.isfinite(v) else None for v in out[k]]
        out["schema_version"] = SCHEMA
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def picard_iterate(params, nl, grid, u0, Q0, h, H, T, n_t, omega=None, max_iter=12, kappa_max=0.9,
                   min_ratios=4, floor=2e-11, p=None, q=None, raise_on_fail=True, threads=1,
                   method="transfer"):
    """(u,Q)_{n+1} = linear solve with forcing (f, G)(u_n, Q_n), data (h, H),
    initial data (u0, Q0) on (0, T); d_n = ||(u,Q)_{n+1} - (u,Q)_n||_T.
    Stops when d_n drops to the roundoff floor (relative to the iterate)."""
    if not nl.consistent_with(params):
        raise ConfigError("nonlinearity parameters inconsistent with beta = 2 xi / N or a")
    p = params.p if p is None else p
    q = params.q if q is None else q
    dt = T / n_t
    fd = hs.fd_operators(grid.x)
    N = grid.dim
    data = EvolutionData(dt, n_t, h=h, H=H, u0=u0, Q0=Q0)
    u = np.zeros((n_t + 1, N) + tuple(grid.counts) + (grid.nx,))
    Q = np.zeros((n_t + 1, N, N) + tuple(grid.counts) + (grid.nx,))
    d, norms, ratios = [], [], []
    traj = None
    in_ball = True
    stalled = False
    for it in range(max_iter):
        prev_u, prev_Q = u, Q
        F = [nonlinearity_eval(prev_u[n], prev_Q[n], nl, grid, fd) for n in range(n_t + 1)]
        data_n = EvolutionData(dt, n_t, h=h, H=H, u0=u0, Q0=Q0,
                               f=np.stack([x[0] for x in F]), G=np.stack([x[1] for x in F]))
        traj = time_step_solve(params, grid, data_n, method=method, threads=threads)
        u, Q = traj.u, traj.Q
        with np.errstate(over="ignore", invalid="ignore"):
            dn = traj_norm(grid, u - prev_u, Q - prev_Q, dt, p, q, fd)
            nn = traj_norm(grid, u, Q, dt, p, q, fd)
        d.append(dn)
        norms.append(nn)
        if omega is not None and not nn <= omega:
            in_ball = False
        if len(d) >= 2 and d[-2] > 0:
            ratios.append(d[-1] / d[-2])
            # stagnation: a sudden jump in the ratio once d_n is already tiny
            if len(ratios) >= 2 and ratios[-1] > 10 * max(ratios[:-1]) and dn <= 1e-8 * nn:
                stalled = True
                break
        if dn <= floor * max(nn, 1e-300) or dn == 0.0:
            break
        if not np.isfinite(dn) or dn > 1e8 * d[0]:
            break
    # the discrete map is reproduced only to ~1e-11 relative (FD derivatives of
    # roundoff); ratios on that floor or past a stagnation jump carry no information
    keep = ratios[:-1] if stalled else ratios
    informative = [r for r, dn, nn in zip(keep, d[1:], norms[1:]) if dn > floor * nn]
    kappa = max(informative) if informative else (max(ratios) if ratios else None)
    converged = stalled or d[-1] <= floor * max(norms[-1], 1e-300)
    zero = d[0] == 0.0
    success = zero or (kappa is not None and kappa < kappa_max and
                       (len(informative) >= min_ratios or converged))
    rep = ContractionReport(d, ratios, norms, kappa, bool(success), omega=omega, in_ball=in_ball,
                            informative=informative)
    rep.notes.append(f"{len(informative)} informative ratios above the roundoff floor")
    traj.meta["picard_iterations"] = len(d)
    if not success and raise_on_fail:
        raise NoContraction(f"no contraction: ratios {ratios}", ratios=ratios)
    return traj, rep


def smallness_threshold(params, nl, grid, T, n_t, eps0=1e-3, max_doublings=14, seed=0,
                        threads=1, **kw):
    """Double the initial-data size from eps0 until the Picard map stops
    contracting.  Returns (last contracting eps, first failing eps, reports)."""
    reports = []
    eps, good = eps0, None
    for _ in range(max_doublings):
        u0, Q0 = stream_function_data(grid, eps, seed=seed)
        _, rep = picard_iterate(params, nl, grid, u0, Q0, None, None, T, n_t,
                                raise_on_fail=False, threads=threads, **kw)
        rep.eps = eps
        reports.append(rep)
        if not rep.success:
            return good, eps, reports
        good = eps
        eps *= 2
    return good, None, reports


def stream_function_data(grid, eps, seed=0, support=1.0):
    """Small divergence-free u0 = curl psi and Q0 in S_0 with u0|0 = 0 and
    D_N Q0|0 = 0 (compatible with h = H = 0).  N = 2 and 3."""
    rng = np.random.default_rng(seed)
    N = grid.dim
    coords = np.meshgrid(*grid.tangential_coords(), indexing="ij")
    L = grid.lengths
    x = grid.x
    bump = np.exp(-sum(((c - l / 2) / support) ** 2 for c, l in zip(coords, L)))[..., None]
    # psi ~ x^2 e^{-x^2}: u0 = curl psi vanishes at x_N = 0
    prof = (x ** 2 * np.exp(-x ** 2))[None] * bump
    fd = hs.fd_operators(x)
    u0 = np.zeros((N,) + bump.shape[:-1] + (x.size,))
    if N == 2:
        g = np.real(hs.field_gradient(grid, prof, fd))
        u0[0], u0[1] = g[1], -g[0]
    else:
        c = rng.normal(size=3)
        psi = np.stack([ci * prof for ci in c])
        g = np.real(hs.field_gradient(grid, psi, fd))     # g[j, k] = d_j psi_k
        u0[0] = g[1, 2] - g[2, 1]
        u0[1] = g[2, 0] - g[0, 2]
        u0[2] = g[0, 1] - g[1, 0]
    # Q0 ~ S e^{-x^2} (1 + x^2 ... ) with zero normal derivative at 0: cos-like profile
    S = rng.normal(size=(N, N))
    S = S + S.T
    S -= np.trace(S) / N * np.eye(N)
    qprof = (np.exp(-x ** 2) * (1 + x ** 2))[None] * bump            # d/dx = -2x^3 e^{-x^2}, zero at 0
    Q0 = S.reshape((N, N) + (1,) * (qprof.ndim)) * qprof[None]
    Q0 = Q0.reshape((N, N) + bump.shape[:-1] + (x.size,))
    scale = eps / max(np.abs(u0).max(), np.abs(Q0).max())
    return u0 * scale, Q0 * scale


# ------------------------------------------------------------------- I/O

def write_trajectory(traj, directory, fmt="binary"):
    os.makedirs(directory, exist_ok=True)
    ext = "csv" if fmt == "csv" else "bin"
    files = []
    for n in range(traj.t.size):
        p = traj.p[min(n, traj.p.shape[0] - 1)] if traj.p is not None else np.zeros_like(traj.u[n][0])
        g = traj.grid.with_fields(u=traj.u[n], Q=traj.Q[n], p=p, meta={"t": float(traj.t[n])})
        name = f"step_{n:05d}.{ext}"
        hs.write_fields(g, os.path.join(directory, name), fmt=fmt)
        files.append(name)
    man = {"schema_version": SCHEMA, "t": traj.t.tolist(), "gamma": traj.gamma, "files": files,
           "meta": hs._json_meta(traj.meta)}
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(man, fh, indent=1)
    return directory


def read_trajectory(directory):
    with open(os.path.join(directory, "manifest.json")) as fh:
        man = json.load(fh)
    steps = [hs.read_fields(os.path.join(directory, f)) for f in man["files"]]
    g = steps[0]
    grid = hs.FieldGrid(g.lengths, g.counts, g.x, g.kind)
    return Trajectory(np.array(man["t"]), grid, np.stack([s.u for s in steps]),
                      np.stack([s.Q for s in steps]), np.stack([s.p for s in steps]),
                      man["gamma"], None, man.get("meta", {}))
