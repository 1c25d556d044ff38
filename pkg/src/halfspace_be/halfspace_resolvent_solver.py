"""Resolvent problem on a discretized half-space.

Tangential directions: periodic box (DFT).  Normal direction: either a
graded grid (ratio 1.05 toward x_N = 0, used for boundary-driven solves) or a
uniform cell-centered grid (needed whenever interior forcing enters, since the
whole-space part is done by FFT of the parity-extended data).

Conventions: f(x') = sum_k fhat_k e^{i xi_k x'} with fhat = fft(f)/M; Nyquist
coefficients of even-length axes are zeroed (they have no conjugate partner).
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
import json
import math
import os

import numpy as np

from . import coefficient_assembly as ca
from . import profile_evaluator as pe
from . import spectral_symbols as ss
from ._accel import njit, pick
from .errors import SymbolVanished, ConfigError

GRADING = 1.05


# --------------------------------------------------------------------- grid

@dataclass(frozen=True)
class FieldGrid:
    lengths: tuple
    counts: tuple
    x: np.ndarray
    kind: str = "graded"            # graded | uniform (cell-centered)
    u: np.ndarray | None = None     # (N, *counts, nx)
    p: np.ndarray | None = None     # (*counts, nx)
    Q: np.ndarray | None = None     # (N, N, *counts, nx)
    grad_p: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def dim(self):
        return len(self.counts) + 1

    @property
    def nx(self):
        return self.x.size

    @property
    def n_modes(self):
        return int(np.prod(self.counts))

    def with_fields(self, **kw):
        return replace(self, **kw)

    def tangential_coords(self):
        return [np.arange(n) * L / n for L, n in zip(self.lengths, self.counts)]

    def xi_modes(self):
        """(M, N-1) tangential frequencies in C order of counts."""
        ks = [2 * np.pi * np.fft.fftfreq(n, L / n) for L, n in zip(self.lengths, self.counts)]
        mesh = np.meshgrid(*ks, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def nyquist_mask(self):
        """True on modes kept (Nyquist rows of even axes dropped)."""
        masks = []
        for n in self.counts:
            m = np.ones(n, bool)
            if n % 2 == 0:
                m[n // 2] = False
            masks.append(m)
        mesh = np.meshgrid(*masks, indexing="ij")
        return np.logical_and.reduce([m.ravel() for m in mesh])

    @property
    def dx(self):
        if self.kind != "uniform":
            raise ConfigError("dx only defined on the uniform normal grid")
        return float(self.x[1] - self.x[0]) if self.nx > 1 else 2 * float(self.x[0])


def graded_normal_grid(x_max, h0, ratio=GRADING):
    """x_0 = 0, spacing h0 ratio^i, last point >= x_max."""
    n = int(math.ceil(math.log1p(x_max * (ratio - 1) / h0) / math.log(ratio))) + 1
    i = np.arange(n)
    return h0 * np.expm1(i * math.log(ratio)) / (ratio - 1)


def uniform_normal_grid(x_max, nx):
    d = x_max / nx
    return (np.arange(nx) + 0.5) * d


def make_field_grid(dim, lengths, counts, x_max, kind="graded", h0=None, nx=None, ratio=GRADING):
    lengths = tuple(float(v) for v in np.broadcast_to(lengths, (dim - 1,)))
    counts = tuple(int(v) for v in np.broadcast_to(counts, (dim - 1,)))
    if kind == "graded":
        x = graded_normal_grid(x_max, h0 if h0 is not None else 1e-2, ratio)
    elif kind == "uniform":
        if nx is None:
            raise ConfigError("uniform normal grid needs nx")
        x = uniform_normal_grid(x_max, nx)
    else:
        raise ConfigError(f"unknown normal grid kind {kind!r}")
    return FieldGrid(lengths, counts, x, kind)


def default_h0(lam, A_max=0.0):
    """First graded step: a twentieth of the thinnest boundary layer ~ 1/(|lam|^(1/2)+1+A)."""
    return 0.05 / (abs(lam) ** 0.5 + 1 + A_max)


def box_length_for_support(support, factor=16.0):
    return factor * support


# --------------------------------------------------------------- transforms

def _t_axes(grid, lead):
    return tuple(range(lead, lead + grid.dim - 1))


def to_modes(grid, arr, lead):
    """Tangential DFT: (*lead_shape, *counts, ...) -> (M, *lead_shape, ...)."""
    arr = np.asarray(arr)
    axes = _t_axes(grid, lead)
    a = np.fft.fftn(arr, axes=axes) / grid.n_modes
    a = np.moveaxis(a, axes, tuple(range(len(axes))))
    a = a.reshape((grid.n_modes,) + a.shape[len(axes):])
    return a * grid.nyquist_mask().reshape((-1,) + (1,) * (a.ndim - 1))


def from_modes(grid, a, lead):
    """Inverse of to_modes."""
    a = np.asarray(a)
    a = a.reshape(tuple(grid.counts) + a.shape[1:])
    nt = grid.dim - 1
    a = np.moveaxis(a, tuple(range(nt)), tuple(range(lead, lead + nt)))
    return np.fft.ifftn(a * grid.n_modes, axes=_t_axes(grid, lead))


# ----------------------------------------------------------- boundary solve

def _assemble_chunk(params, lam, xi, h, H):
    data = ca.BoundaryModeData(h, H)
    return ca.assemble_batch(params, lam, xi, data)


def _modes_to_profiles(params, lam, xi, h, H, x, order, threads, check):
    """Per-mode amplitudes and profiles; returns u (M,N,nx,...)."""
    M = xi.shape[0]
    N = params.dim
    ncomp = order + 1
    u = np.zeros((ncomp, M, N, x.size), complex)
    p = np.zeros((ncomp, M, x.size), complex)
    Q = np.zeros((ncomp, M, N, N, x.size), complex)
    resid = np.zeros(M)
    active = np.nonzero((np.abs(h).reshape(M, -1).max(axis=1) > 0)
                        | (np.abs(H).reshape(M, -1).max(axis=1) > 0))[0]
    chunks = [active[i:i + 256] for i in range(0, active.size, 256)]

    def work(idx):
        res = _assemble_chunk(params, lam, xi[idx], h[idx], H[idx])
        out = []
        for br, (sub, amps) in res.items():
            prof = pe.eval_profile(amps, x, order=order)
            r = None
            if check:
                d = ca.BoundaryModeData(h[idx][sub], H[idx][sub])
                rr = pe.mode_residual(params, amps, d)
                r = np.max(np.stack(list(rr.values())), axis=0)
            out.append((idx[sub], prof, r))
        return out

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(work, chunks))
    else:
        results = [work(c) for c in chunks]
    for chunk in results:
        for idx, prof, r in chunk:
            u[:, idx] = prof["u"]
            p[:, idx] = prof["p"]
            Q[:, idx] = prof["Q"]
            if r is not None:
                resid[idx] = r
    return u, p, Q, resid


def _boundary_modes(params, lam, h_hat, H_hat, grid, threads=1, check=True):
    """Mode-space boundary solve: returns dict of mode arrays."""
    xi = grid.xi_modes()
    N = params.dim
    h_hat = np.array(h_hat, complex)
    H_hat = np.array(H_hat, complex)
    h_hat[:, N - 1] = 0.0
    u, p, Q, resid = _modes_to_profiles(params, lam, xi, h_hat, H_hat, grid.x, 1, threads, check)
    ixi = 1j * xi
    gp = np.concatenate([ixi.T[:, :, None] * p[0][None], p[1][None]], axis=0)  # (N, M, nx)
    return {"u": u[0], "p": p[0], "Q": Q[0], "grad_p": gp, "residual": resid,
            "u_x": u[1], "Q_x": Q[1]}


def _check_dim(params, grid):
    if params.dim != grid.dim:
        raise ConfigError(f"params.dim = {params.dim} but the grid is {grid.dim}-dimensional")
    return params.dim


def solve_boundary(params, lam, h, H, grid, threads=1, check=True):
    """Boundary-driven solve (f = G = 0).  h: (N, *counts), H: (N, N, *counts)."""
    N = _check_dim(params, grid)
    if np.max(np.abs(np.asarray(h)[N - 1]), initial=0.0) > 1e-12 * (1 + np.max(np.abs(h))):
        raise ConfigError("h_N must vanish on the boundary")
    h_hat = to_modes(grid, h, 1)
    H_hat = to_modes(grid, H, 2)
    m = _boundary_modes(params, lam, h_hat, H_hat, grid, threads, check)
    return _fields_from_modes(grid, m, {"lambda": complex(lam), "max_mode_residual": float(m["residual"].max(initial=0.0))})


def _fields_from_modes(grid, m, meta):
    # mode arrays are (M, *lead, nx)
    u = from_modes(grid, m["u"], 1)
    p = from_modes(grid, m["p"], 0)
    Q = from_modes(grid, m["Q"], 2)
    gp = from_modes(grid, np.moveaxis(m["grad_p"], 0, 1), 1)
    return grid.with_fields(u=u, p=p, Q=Q, grad_p=gp, meta=dict(meta))


# ----------------------------------------------------------- extensions

def parity_table(N):
    """+1 even, -1 odd in x_N for the components of f (N,) and G (N, N)."""
    pf = np.ones(N)
    pf[N - 1] = -1
    pG = np.ones((N, N))
    pG[N - 1, :N - 1] = -1
    pG[:N - 1, N - 1] = -1
    return pf, pG


def extend_data(f, G, grid):
    """Parity extension to [-X, X] on the doubled cell-centered grid;
    returns (f_ext, G_ext) with the normal axis of length 2 nx, x from -X to X."""
    if grid.kind != "uniform":
        raise ConfigError("extension needs the uniform cell-centered normal grid")
    N = grid.dim
    pf, pG = parity_table(N)
    f = np.asarray(f)
    G = np.asarray(G)
    sf = pf.reshape((N,) + (1,) * (f.ndim - 1))
    sG = pG.reshape((N, N) + (1,) * (G.ndim - 2))
    fe = np.concatenate([sf * f[..., ::-1], f], axis=-1)
    Ge = np.concatenate([sG * G[..., ::-1], G], axis=-1)
    return fe, Ge


def restrict(arr_ext):
    n = arr_ext.shape[-1] // 2
    return arr_ext[..., n:]


# ---------------------------------------------------------- whole space

def wholespace_symbol(params, lam, xi2):
    """lam + |xi|^2 [1 + beta^2 (a + |xi|^2) / (2 (lam + a + |xi|^2))]."""
    a, b = params.a, params.beta
    return lam + xi2 * (1 + b * b * (a + xi2) / (2 * (lam + a + xi2)))


@dataclass
class WholeSpaceSolution:
    v_hat: np.ndarray        # (N, M, 2nx) coefficients (tangential modes flattened)
    V_hat: np.ndarray        # (N, N, M, 2nx)
    rho_hat: np.ndarray      # (M, 2nx)
    xiN: np.ndarray
    residual: float
    min_symbol: float

    def trace_v(self):
        """v(x' , 0) per tangential mode: (N, M)."""
        return self.v_hat.sum(axis=-1)

    def trace_DN_V(self):
        return (1j * self.xiN * self.V_hat).sum(axis=-1)


def solve_wholespace(params, lam, f_ext, G_ext, grid, tol=1e-12):
    """Full-frequency elimination of Q, Leray projection, scalar division."""
    N = params.dim
    n2 = f_ext.shape[-1]
    d = grid.dx
    xiN = 2 * np.pi * np.fft.fftfreq(n2, d)
    keepN = np.ones(n2, bool)
    if n2 % 2 == 0:
        keepN[n2 // 2] = False
    fm = to_modes(grid, f_ext, 1)                 # (M, N, n2)
    Gm = to_modes(grid, G_ext, 2)                 # (M, N, N, n2)
    fh = np.fft.fft(fm, axis=-1) / n2 * keepN
    Gh = np.fft.fft(Gm, axis=-1) / n2 * keepN
    xt = grid.xi_modes()                          # (M, N-1)
    M = xt.shape[0]
    xi = np.zeros((N, M, n2))
    xi[:N - 1] = xt.T[:, :, None]
    xi[N - 1] = xiN[None, :]
    xi2 = np.sum(xi * xi, axis=0)
    ixi = 1j * xi
    fh = np.moveaxis(fh, 1, 0)                    # (N, M, n2)
    Gh = np.moveaxis(Gh, (1, 2), (0, 1))          # (N, N, M, n2)
    a, b = params.a, params.beta
    sQ = lam + a + xi2
    if np.any(np.abs(sQ) == 0):
        raise SymbolVanished("lam + a + |xi|^2 vanished")
    divG = np.einsum("kmn,jkmn->jmn", ixi, Gh)
    rhs = fh + b * (xi2 + a) / sQ * divG
    sym = wholespace_symbol(params, lam, xi2)
    ms = np.abs(sym) / (abs(lam) + xi2)
    if np.any(ms < tol):
        raise SymbolVanished(f"whole-space symbol vanished (min normalized |sym| = {ms.min():.2e})")
    with np.errstate(invalid="ignore", divide="ignore"):
        proj = np.where(xi2 > 0, np.einsum("jmn,jmn->mn", xi, rhs) / np.where(xi2 > 0, xi2, 1), 0)
    grad_part = xi * proj                          # (I - P) rhs
    v = (rhs - grad_part) / sym
    rho = np.where(xi2 > 0, -1j * proj, 0)        # i xi rho = grad_part
    Dv = 0.5 * (ixi[:, None] * v[None, :] + ixi[None, :] * v[:, None])
    V = (Gh + b * Dv) / sQ
    # residuals of the Fourier equations
    r1 = (lam + xi2) * v + ixi * rho + b * (-xi2 - a) * np.einsum("kmn,jkmn->jmn", ixi, V) - fh
    r2 = sQ * V - b * Dv - Gh
    r3 = np.einsum("jmn,jmn->mn", ixi, v)
    scale = (1 + abs(lam)) * (np.abs(fh).max() + np.abs(Gh).max()) + 1e-300
    res = max(np.abs(r1).max(), np.abs(r2).max() * (1 + abs(lam)), np.abs(r3).max() * (1 + abs(lam))) / scale
    return WholeSpaceSolution(v, V, rho, xiN, float(res), float(ms.min()))


def wholespace_fields(grid, ws, x=None):
    """Evaluate the whole-space solution at the normal points x (default the
    grid, x >= 0); returns u (N,...), Q (N,N,...), grad_rho (N,...), rho."""
    x = grid.x if x is None else np.asarray(x)
    n2 = ws.xiN.size
    X = grid.nx * grid.dx
    # coefficient k multiplies e^{i xi_k (y + X)} on the extended grid y in [-X, X)
    # (cell centers shifted by dx/2 are absorbed in the sampling below)
    xe = np.concatenate([-grid.x[::-1], grid.x])
    E = np.exp(1j * np.outer(ws.xiN, x - xe[0]))   # (n2, nx)
    ev = lambda c: np.tensordot(c, E, axes=([-1], [0]))
    v = ev(ws.v_hat)
    V = ev(ws.V_hat)
    rho = ev(ws.rho_hat)
    M = grid.n_modes
    N = grid.dim
    xt = grid.xi_modes()
    grad_t = 1j * xt.T[:, :, None] * rho[None]
    grad_n = ev(1j * ws.xiN * ws.rho_hat)[None]
    g = np.concatenate([grad_t, grad_n], axis=0)
    return {"u": v, "Q": V, "rho": rho, "grad_rho": g}


# ------------------------------------------------------------- full solve

def solve_resolvent_full(params, lam, f, G, h, H, grid, threads=1, check=True):
    """u = v1|half + v2 with v2 the boundary solve for the corrected traces."""
    if grid.kind != "uniform":
        raise ConfigError("forcing needs the uniform cell-centered normal grid")
    N = _check_dim(params, grid)
    fe, Ge = extend_data(f, G, grid)
    ws = solve_wholespace(params, lam, fe, Ge, grid)
    wf = wholespace_fields(grid, ws)
    xe0 = -grid.x[-1]
    # traces at x_N = 0 from the trigonometric interpolant
    ph0 = np.exp(1j * ws.xiN * (0.0 - xe0))
    tv = np.tensordot(ws.v_hat, ph0, axes=([-1], [0]))                  # (N, M)
    tDV = np.tensordot(1j * ws.xiN * ws.V_hat, ph0, axes=([-1], [0]))   # (N, N, M)
    h_hat = to_modes(grid, h, 1) - tv.T
    H_hat = to_modes(grid, H, 2) - np.moveaxis(tDV, 2, 0)
    leak = float(np.abs(h_hat[:, N - 1]).max(initial=0.0))
    m = _boundary_modes(params, lam, h_hat, H_hat, grid, threads, check)
    u = wf["u"] + m["u"].transpose(1, 0, 2)
    Q = wf["Q"] + np.moveaxis(m["Q"], 0, 2)
    p = wf["rho"] + m["p"]
    gp = wf["grad_rho"] + m["grad_p"]
    meta = {"lambda": complex(lam), "wholespace_residual": ws.residual,
            "wholespace_min_symbol": ws.min_symbol,
            "max_mode_residual": float(m["residual"].max(initial=0.0)),
            "normal_trace_leak": leak}
    return grid.with_fields(u=from_modes(grid, np.moveaxis(u, 1, 0), 1),
                            p=from_modes(grid, p, 0),
                            Q=from_modes(grid, np.moveaxis(Q, 2, 0), 2),
                            grad_p=from_modes(grid, np.moveaxis(gp, 1, 0), 1),
                            meta=meta)


# ------------------------------------------------------- pressure recovery

STENCIL = 9


def fornberg_weights(z, nodes, m):
    """Finite-difference weights at z for derivatives 0..m on arbitrary nodes
    (Fornberg's recursion); returns (m+1, len(nodes))."""
    n = len(nodes)
    c = np.zeros((m + 1, n))
    c1, c4 = 1.0, nodes[0] - z
    c[0, 0] = 1.0
    for i in range(1, n):
        mn = min(i, m)
        c2, c5 = 1.0, c4
        c4 = nodes[i] - z
        for j in range(i):
            c3 = nodes[i] - nodes[j]
            c2 *= c3
            if j == i - 1:
                for k in range(mn, 0, -1):
                    c[k, i] = c1 * (k * c[k - 1, i - 1] - c5 * c[k, i - 1]) / c2
                c[0, i] = -c1 * c5 * c[0, i - 1] / c2
            for k in range(mn, 0, -1):
                c[k, j] = (c4 * c[k, j] - k * c[k - 1, j]) / c3
            c[0, j] = c4 * c[0, j] / c3
        c1 = c2
    return c


def fd_operators(x, m=3, width=STENCIL):
    """Stencil indices (nx, width) and weights (m+1, nx, width), centered where
    possible and one-sided near the ends."""
    n = x.size
    width = min(width, n)
    start = np.clip(np.arange(n) - width // 2, 0, n - width)
    idx = start[:, None] + np.arange(width)[None, :]
    W = np.stack([fornberg_weights(x[i], x[idx[i]], m) for i in range(n)], axis=1)
    return idx, W


def apply_fd(arr, idx, W, k):
    return np.einsum("ij,...ij->...i", W[k], arr[..., idx])


CONV_NODES = 6       # local interpolation degree 5


def field_gradient(grid, arr, fd=None):
    """(...lead, *counts, nx) -> (N, ...lead, *counts, nx): tangential
    derivatives spectrally, normal derivative by Fornberg differences."""
    nt = grid.dim - 1
    arr = np.asarray(arr)
    lead = arr.ndim - nt - 1
    m = to_modes(grid, arr, lead)
    xi = grid.xi_modes()
    out = []
    for k in range(nt):
        s = (1j * xi[:, k]).reshape((-1,) + (1,) * (m.ndim - 1))
        d = from_modes(grid, s * m, lead)
        out.append(d.real if not np.iscomplexobj(arr) else d)
    idx, W = fd if fd is not None else fd_operators(grid.x)
    out.append(apply_fd(arr, idx, W, 1))
    return np.stack(out)


def _mu_moments(c, nk=CONV_NODES):
    """mu_k(c) = int_0^1 e^{-c(1-s)} s^k ds, k < nk, for c >= 0 (any shape).
    Series below c = 2, upward recursion above."""
    c = np.asarray(c, float)
    out = np.empty(c.shape + (nk,))
    small = c < 2.0
    cs = c[small]
    for k in range(nk):
        s = np.zeros_like(cs)
        term_c = np.ones_like(cs)
        for n in range(36):
            s = s + term_c * (math.factorial(k) / math.factorial(k + n + 1))
            term_c = term_c * (-cs)
        out[small, k] = s
    cb = c[~small]
    mu = -np.expm1(-cb) / cb
    out[~small, 0] = mu
    for k in range(1, nk):
        mu = (1.0 - k * mu) / cb
        out[~small, k] = mu
    return out


class ExpConvolution:
    """J-(x) = int_0^x e^{-A(x-y)} phi dy and J+(x) = int_x^X e^{-A(y-x)} phi dy
    on the normal grid, per-interval quintic interpolation of phi with exact
    exponential moments.  A is one decay rate per mode (M,)."""

    def __init__(self, x, A):
        x = np.asarray(x, float)
        self.pad = x[0] > 0
        z = np.concatenate([[0.0], x]) if self.pad else x
        self.z = z
        n = z.size
        q = CONV_NODES
        if n < q:
            raise ConfigError(f"need at least {q} normal points")
        self.A = np.asarray(A, float)
        dz = np.diff(z)
        ni = n - 1
        start = np.clip(np.arange(ni) - (q // 2 - 1), 0, n - q)
        self.idx = start[:, None] + np.arange(q)[None, :]
        sig = (z[self.idx] - z[:-1, None]) / dz[:, None]             # (ni, q)
        V = sig[:, :, None] ** np.arange(q)[None, None, :]            # (ni, node, k)
        Vr = (1 - sig)[:, :, None] ** np.arange(q)[None, None, :]
        Vi = np.linalg.inv(V)                                         # (ni, k, node)
        Vri = np.linalg.inv(Vr)
        mu = _mu_moments(self.A[:, None] * dz[None, :])               # (M, ni, q)
        self.wm = dz[None, :, None] * np.einsum("mik,ikj->mij", mu, Vi)
        self.wp = dz[None, :, None] * np.einsum("mik,ikj->mij", mu, Vri)
        self.decay = np.exp(-self.A[:, None] * dz[None, :])           # (M, ni)
        # extrapolation of phi to 0 when the grid starts inside
        if self.pad:
            self.w0 = fornberg_weights(0.0, x[:q], 0)[0]

    def _nodes(self, phi):
        if self.pad:
            p0 = phi[..., :self.w0.size] @ self.w0
            return np.concatenate([p0[..., None], phi], axis=-1)
        return phi

    def apply(self, phi):
        """phi (M, ..., nx) -> (Jm, Jp) on the original grid."""
        ph = self._nodes(np.asarray(phi, complex))
        M = ph.shape[0]
        flat = ph.reshape(M, -1, ph.shape[-1])
        loc = flat[:, :, self.idx]                                     # (M, B, ni, q)
        inc_m = np.einsum("mij,mbij->mbi", self.wm, loc)
        inc_p = np.einsum("mij,mbij->mbi", self.wp, loc)
        Jm, Jp = _exp_recursions(self.decay, inc_m, inc_p)
        s = 1 if self.pad else 0
        shp = ph.shape[:-1] + (ph.shape[-1] - s,)
        return Jm[..., s:].reshape(shp), Jp[..., s:].reshape(shp)


def _exp_recursions_numpy(decay, inc_m, inc_p):
    M, B, ni = inc_m.shape
    Jm = np.zeros((M, B, ni + 1), complex)
    Jp = np.zeros((M, B, ni + 1), complex)
    d = decay[:, None, :]
    for i in range(ni):
        Jm[:, :, i + 1] = d[:, :, i] * Jm[:, :, i] + inc_m[:, :, i]
    for i in range(ni - 1, -1, -1):
        Jp[:, :, i] = d[:, :, i] * Jp[:, :, i + 1] + inc_p[:, :, i]
    return Jm, Jp


@njit(cache=True)
def _exp_recursions_kernel(decay, inc_m, inc_p, Jm, Jp):
    M, B, ni = inc_m.shape
    for m in range(M):
        for b in range(B):
            acc = 0j
            for i in range(ni):
                acc = decay[m, i] * acc + inc_m[m, b, i]
                Jm[m, b, i + 1] = acc
            acc = 0j
            for i in range(ni - 1, -1, -1):
                acc = decay[m, i] * acc + inc_p[m, b, i]
                Jp[m, b, i] = acc


def _exp_recursions_numba(decay, inc_m, inc_p):
    M, B, ni = inc_m.shape
    Jm = np.zeros((M, B, ni + 1), complex)
    Jp = np.zeros((M, B, ni + 1), complex)
    _exp_recursions_kernel(np.ascontiguousarray(decay), np.ascontiguousarray(inc_m),
                           np.ascontiguousarray(inc_p), Jm, Jp)
    return Jm, Jp


_exp_recursions = pick(_exp_recursions_numba, _exp_recursions_numpy)


def momentum_remainder_modes(params, u_m, Q_m, f_m, xi, x, fd=None):
    """F = Delta u - beta Div (Delta - a) Q + f per tangential mode
    (mode arrays (M, N, nx), (M, N, N, nx), (M, N, nx))."""
    N = params.dim
    idx, W = fd if fd is not None else fd_operators(x)
    A2 = np.sum(xi * xi, axis=-1)[:, None]
    ixi = 1j * xi
    D = lambda arr, k: apply_fd(arr, idx, W, k)
    F = D(u_m, 2) - A2[:, None] * u_m + f_m
    b, a = params.beta, params.a
    if b != 0:
        LQ = D(Q_m, 2) - (A2 + a)[:, None, None] * Q_m
        for k in range(N - 1):
            F = F - b * ixi[:, k, None, None] * LQ[:, :, k]
        F = F - b * (D(Q_m[:, :, N - 1], 3) - (A2 + a)[:, None] * D(Q_m[:, :, N - 1], 1))
    return F


def pressure_modes(F, xi, x):
    """Weak Neumann pressure per mode: returns (p_hat (M, nx), grad (N, M, nx)).
    Gauge: p -> 0 as x_N -> infinity on the zero tangential mode."""
    M, N, nx = F.shape
    A = np.sqrt(np.sum(xi * xi, axis=-1))
    g = np.einsum("mk,mkx->mx", 1j * xi, F[:, :N - 1])
    FN = F[:, N - 1]
    conv = ExpConvolution(x, A)
    Jm, Jp = conv.apply(np.stack([g, FN], axis=1))
    gm, gp = Jm[:, 0], Jp[:, 0]
    fm, fp = Jm[:, 1], Jp[:, 1]
    eAx = np.exp(-A[:, None] * x[None, :])
    # M[phi] = int_0^X e^{-Ay} phi: J+ continued down to 0
    Mg, Mf = _moment_at_zero(conv, g, gp, x, A), _moment_at_zero(conv, FN, fp, x, A)
    Mg, Mf = Mg[:, None], Mf[:, None]
    pos = A > 0
    Ai = np.where(pos, A, 1.0)[:, None]
    K = -(gm + gp + eAx * Mg) / (2 * Ai) + 0.5 * (fm - fp - eAx * Mf)
    K = np.where(pos[:, None], K, -fp)
    Kx = 0.5 * (gm - gp + eAx * Mg) + FN - 0.5 * A[:, None] * (fm + fp - eAx * Mf)
    grad = np.concatenate([1j * xi.T[:, :, None] * K[None], Kx[None]], axis=0)
    return K, grad


def _moment_at_zero(conv, phi, Jp, x, A):
    if not conv.pad:
        return Jp[:, 0]
    # one more backward step over [0, x_0]
    ph = conv._nodes(np.asarray(phi, complex))
    return conv.decay[:, 0] * Jp[:, 0] + np.einsum("mj,mj->m", conv.wp[:, 0], ph[:, conv.idx[0]])


def pressure_recovery(u, Q, f, params, grid):
    """grad p (and p) from (u, Q, f) on the grid; returns grid with p, grad_p."""
    xi = grid.xi_modes()
    u_m = to_modes(grid, u, 1)
    Q_m = to_modes(grid, Q, 2)
    f_m = to_modes(grid, f, 1) if f is not None else np.zeros_like(u_m)
    F = momentum_remainder_modes(params, u_m, Q_m, f_m, xi, grid.x)
    K, grad = pressure_modes(F, xi, grid.x)
    p = from_modes(grid, K, 0)
    gp = from_modes(grid, np.moveaxis(grad, 0, 1), 1)
    return grid.with_fields(u=u, Q=Q, p=p, grad_p=gp, meta=dict(grid.meta, pressure="weak_neumann"))


# ---------------------------------------------------------------- field I/O

FIELD_SCHEMA = 1


def component_names(N):
    names = [f"u{j + 1}" for j in range(N)] + ["p"]
    names += [f"Q{j + 1}{k + 1}" for j in range(N) for k in range(j, N)]
    return names


def stack_components(grid):
    N = grid.dim
    comps = [grid.u[j] for j in range(N)] + [grid.p]
    comps += [grid.Q[j, k] for j in range(N) for k in range(j, N)]
    return np.stack(comps)


def write_fields(grid, path, fmt=None, part="auto"):
    """Binary (raw float64, component-major, C order) or CSV, plus a JSON
    sidecar path + '.json'.  part: real | complex | auto (complex only when
    the imaginary part is above roundoff)."""
    path = os.fspath(path)
    fmt = fmt or ("csv" if path.endswith(".csv") else "binary")
    data = stack_components(grid)
    imag = float(np.abs(np.imag(data)).max(initial=0.0))
    if part == "auto":
        part = "complex" if imag > 1e-12 * (1 + np.abs(data).max(initial=0.0)) else "real"
    names = component_names(grid.dim)
    if part == "complex":
        arr = np.stack([data.real, data.imag], axis=1).reshape((-1,) + data.shape[1:])
        cols = [f"{n}_{s}" for n in names for s in ("re", "im")]
    else:
        arr = np.real(data)
        cols = names
    arr = np.ascontiguousarray(arr, dtype="<f8")
    if fmt == "binary":
        arr.tofile(path)
    elif fmt == "csv":
        coords = grid.tangential_coords() + [grid.x]
        mesh = np.meshgrid(*coords, indexing="ij")
        head = [f"x{k + 1}" for k in range(grid.dim)]
        table = np.column_stack([m.ravel() for m in mesh] + [c.ravel() for c in arr])
        np.savetxt(path, table, delimiter=",", header=",".join(head + cols), comments="", fmt="%.17g")
    else:
        raise ConfigError(f"unknown field format {fmt!r}")
    side = {"schema_version": FIELD_SCHEMA, "format": fmt, "dim": grid.dim,
            "lengths": list(grid.lengths), "counts": list(grid.counts), "kind": grid.kind,
            "x": grid.x.tolist(), "components": cols, "part": part, "dtype": "float64",
            "byte_order": "little", "shape": list(arr.shape),
            "dropped_imag_max": imag if part == "real" else 0.0,
            "meta": _json_meta(grid.meta)}
    with open(path + ".json", "w") as fh:
        json.dump(side, fh, indent=1)
    return path


def _json_meta(meta):
    out = {}
    for k, v in (meta or {}).items():
        if isinstance(v, complex):
            out[k] = [v.real, v.imag]
        elif isinstance(v, (np.floating, np.integer)):
            out[k] = v.item()
        else:
            out[k] = v
    return out


def read_fields(path):
    path = os.fspath(path)
    with open(path + ".json") as fh:
        side = json.load(fh)
    shape = tuple(side["shape"])
    if side["format"] == "binary":
        arr = np.fromfile(path, dtype="<f8").reshape(shape)
    else:
        table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        arr = table[:, side["dim"]:].T.reshape(shape)
    if side["part"] == "complex":
        arr = arr.reshape((-1, 2) + shape[1:])
        arr = arr[:, 0] + 1j * arr[:, 1]
    N = side["dim"]
    u = arr[:N]
    p = arr[N]
    Q = np.zeros((N, N) + arr.shape[1:], arr.dtype)
    i = N + 1
    for j in range(N):
        for k in range(j, N):
            Q[j, k] = Q[k, j] = arr[i]
            i += 1
    return FieldGrid(tuple(side["lengths"]), tuple(side["counts"]), np.array(side["x"]),
                     side["kind"], u=u, p=p, Q=Q, meta=side.get("meta", {}))
