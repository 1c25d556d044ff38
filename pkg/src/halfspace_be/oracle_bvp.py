"""Brute-force references that share no formula code with the assembly path.

oracle_mode_solve discretizes the Fourier-mode ODE system on [0, X] with
second-order differences on a mapped grid x(s) = X (e^{ks}-1)/(e^k-1),
pressure on the half nodes.  The momentum equation is used in the reduced
form obtained by inserting the Q equation and div u = 0,

    (lam + kappa (A^2 - D^2)) u_j + G_j p + beta lam sum_k G_k Q_jk = 0,

with G = (i xi', D) and kappa = 1 + beta^2/2.  The independent Q unknowns
are the upper triangle without (N,N); Q_NN = -sum_j Q_jj.
"""
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import SingularDiscretization


@dataclass
class OracleProfile:
    x: np.ndarray          # nodes (n+1,)
    u: np.ndarray          # (N, n+1)
    Q: np.ndarray          # (N, N, n+1)
    p_half: np.ndarray     # (n,) at half nodes
    x_half: np.ndarray
    X_max: float
    n: int
    richardson: dict | None = None

    @property
    def p(self):
        """Pressure interpolated to the interior nodes (linear), ends extrapolated."""
        return np.interp(self.x, self.x_half, self.p_half.real) + 1j * np.interp(
            self.x, self.x_half, self.p_half.imag)


def _q_index(N):
    pairs = [(j, k) for j in range(N) for k in range(j, N) if not (j == k == N - 1)]
    return pairs, {pr: m for m, pr in enumerate(pairs)}


def decay_rates(params, lam, xi_prime):
    """Decay rates of the mode from the quadratic in z (np.roots), used only to
    size the interval."""
    xi = np.atleast_1d(np.asarray(xi_prime, float))
    A2 = float(xi @ xi)
    lam = complex(lam)
    a, b2 = params.a, 0.5 * params.beta ** 2
    # (lam - z)(lam + a - z) + b2 (z^2 - a z) = (1+b2) z^2 - (2 lam + a + a b2) z + lam (lam + a)
    z = np.roots([1 + b2, -(2 * lam + a + a * b2), lam * (lam + a)])
    rates = [np.sqrt(A2 + lam + a + 0j)] + [np.sqrt(A2 + zz + 0j) for zz in z]
    if A2 > 0:
        rates.append(np.sqrt(A2) + 0j)
    return rates


def _grid(X, n, stretch):
    s = np.linspace(0.0, 1.0, n + 1)
    sh = 0.5 * (s[1:] + s[:-1])
    if stretch == 0:
        return s * X, sh * X, np.full(n + 1, X), np.full(n, X)
    den = np.expm1(stretch)
    x = X * np.expm1(stretch * s) / den
    xh = X * np.expm1(stretch * sh) / den
    xs = X * stretch * np.exp(stretch * s) / den
    xsh = X * stretch * np.exp(stretch * sh) / den
    return x, xh, xs, xsh


def _assemble(params, lam, xi, n, X, stretch):
    N = params.dim
    pairs, qi = _q_index(N)
    nq = len(pairs)
    nb = N + nq + 1
    size = n * nb + N + nq
    x, xh, xs, xsh = _grid(X, n, stretch)
    ds = 1.0 / n
    A2 = float(xi @ xi)
    kap = 1.0 + 0.5 * params.beta ** 2
    beta, a = params.beta, params.a
    lam = complex(lam)
    ixi = 1j * np.asarray(xi, float)

    def U(i, j): return i * nb + j
    def Qv(i, m): return i * nb + N + m
    def Pv(h): return h * nb + N + nq

    rows, cols, vals = [], [], []

    def add(r, c, v):
        rows.append(np.broadcast_to(r, np.shape(v) if np.ndim(v) else np.shape(r)))
        cols.append(np.broadcast_to(c, rows[-1].shape))
        vals.append(np.broadcast_to(np.asarray(v, complex), rows[-1].shape))

    def addQ(r, i, j, k, coef):
        # coefficient on Q_jk at nodes i (vector), honouring symmetry and Q_NN
        j, k = min(j, k), max(j, k)
        if j == k == N - 1:
            for l in range(N - 1):
                add(r, Qv(i, qi[(l, l)]), -coef)
        else:
            add(r, Qv(i, qi[(j, k)]), coef)

    I = np.arange(1, n)                       # interior nodes
    c2m = 1.0 / (xs[I] * ds * xsh[I - 1] * ds)  # second difference weights
    c2p = 1.0 / (xs[I] * ds * xsh[I] * ds)
    c1 = 1.0 / (2 * ds * xs[I])
    # momentum rows at interior nodes
    for j in range(N):
        r = U(I, j)
        add(r, U(I, j), lam + kap * A2 + kap * (c2m + c2p))
        add(r, U(I - 1, j), -kap * c2m)
        add(r, U(I + 1, j), -kap * c2p)
        if j < N - 1:
            add(r, Pv(I - 1), 0.5 * ixi[j])
            add(r, Pv(I), 0.5 * ixi[j])
        else:
            g = 1.0 / (ds * xs[I])
            add(r, Pv(I), g)
            add(r, Pv(I - 1), -g)
        for k in range(N):
            if k < N - 1:
                addQ(r, I, j, k, beta * lam * ixi[k])
            else:
                addQ(r, I + 1, j, k, beta * lam * c1)
                addQ(r, I - 1, j, k, -beta * lam * c1)
    # Q rows at interior nodes: (lam + a + A^2 - D^2) Q_jk - beta/2 (G_j u_k + G_k u_j) = 0
    for m, (j, k) in enumerate(pairs):
        r = Qv(I, m)
        add(r, Qv(I, m), lam + a + A2 + c2m + c2p)
        add(r, Qv(I - 1, m), -c2m)
        add(r, Qv(I + 1, m), -c2p)
        for (g, comp) in ((j, k), (k, j)):
            if g < N - 1:
                add(r, U(I, comp), -0.5 * beta * ixi[g])
            else:
                add(r, U(I + 1, comp), -0.5 * beta * c1)
                add(r, U(I - 1, comp), 0.5 * beta * c1)
    # divergence at half nodes
    Hh = np.arange(n)
    for k in range(N - 1):
        add(Pv(Hh), U(Hh, k), 0.5 * ixi[k])
        add(Pv(Hh), U(Hh + 1, k), 0.5 * ixi[k])
    gh = 1.0 / (ds * xsh)
    add(Pv(Hh), U(Hh + 1, N - 1), gh)
    add(Pv(Hh), U(Hh, N - 1), -gh)
    # boundary rows: u(0) = h, D_N Q(0) = H (one-sided, second order); u = Q = 0 at X
    for j in range(N):
        add(U(0, j), U(0, j), 1.0)
        add(U(n, j), U(n, j), 1.0)
    w = 1.0 / (2 * ds * xs[0])
    for m in range(nq):
        add(Qv(0, m), Qv(0, m), -3 * w)
        add(Qv(0, m), Qv(1, m), 4 * w)
        add(Qv(0, m), Qv(2, m), -w)
        add(Qv(n, m), Qv(n, m), 1.0)
    Mx = sp.csc_matrix((np.concatenate([np.ravel(v) for v in vals]),
                        (np.concatenate([np.ravel(r) for r in rows]),
                         np.concatenate([np.ravel(c) for c in cols]))), shape=(size, size))
    gauge = A2 == 0.0
    if gauge:
        # zero tangential mode: pressure fixed by p = 0 at the last half node,
        # replacing the (then redundant) last divergence row
        Mx = Mx.tolil()
        Mx.rows[Pv(n - 1)] = [Pv(n - 1)]
        Mx.data[Pv(n - 1)] = [1.0 + 0j]
        Mx = Mx.tocsc()
    lay = dict(N=N, nq=nq, nb=nb, size=size, pairs=pairs, x=x, xh=xh, U=U, Qv=Qv, Pv=Pv, gauge=gauge)
    return Mx, lay


def _rhs(lay, n, h_hat, H_hat):
    b = np.zeros(lay["size"], complex)
    N = lay["N"]
    for j in range(N):
        b[lay["U"](0, j)] = h_hat[j]
    for m, (j, k) in enumerate(lay["pairs"]):
        b[lay["Qv"](0, m)] = H_hat[j, k]
    return b


def _unpack(sol, lay, n):
    N, nb, nq = lay["N"], lay["nb"], lay["nq"]
    u = np.empty((N, n + 1), complex)
    Q = np.zeros((N, N, n + 1), complex)
    for j in range(N):
        u[j] = sol[lay["U"](np.arange(n + 1), j)]
    for m, (j, k) in enumerate(lay["pairs"]):
        Q[j, k] = Q[k, j] = sol[lay["Qv"](np.arange(n + 1), m)]
    Q[N - 1, N - 1] = -sum(Q[l, l] for l in range(N - 1))
    p = sol[lay["Pv"](np.arange(n))]
    return u, Q, p


def _default_stretch(rates):
    rmin = min(r.real for r in rates)
    rmax = max(abs(r) for r in rates)
    return float(np.clip(4.5 + np.log(rmax / max(rmin, 1e-12)), 3.0, 10.0))


def default_X(params, lam, xi_prime, factor=40.0):
    return factor / min(r.real for r in decay_rates(params, lam, xi_prime))


def _solve_once(params, lam, xi, h_hat, H_hat, X, n, stretch):
    Mx, lay = _assemble(params, lam, xi, n, X, stretch)
    b = _rhs(lay, n, h_hat, H_hat)
    try:
        lu = spla.splu(Mx)
        sol = lu.solve(b)
    except RuntimeError as exc:
        raise SingularDiscretization(f"discrete BVP singular: {exc}") from exc
    if not np.all(np.isfinite(sol)):
        raise SingularDiscretization("non-finite discrete solution")
    u, Q, p = _unpack(sol, lay, n)
    return OracleProfile(lay["x"], u, Q, p, lay["xh"], X, n)


def oracle_mode_solve(params, lam, xi_prime, h_hat, H_hat, X_max=None, n=4096,
                      stretch=None, richardson=True):
    """Finite-difference solution of one Fourier mode.

    stretch: grading parameter of the map (default 4.5 + ln(rate_max/rate_min)
    clipped to [3, 10]).  With richardson=True the n/2 and 2n solves are also
    run and the observed order and a self-reported error are attached."""
    if n < 64:
        raise ValueError("n too small")
    xi = np.atleast_1d(np.asarray(xi_prime, float))
    h_hat = np.asarray(h_hat, complex)
    H_hat = np.asarray(H_hat, complex)
    rates = decay_rates(params, lam, xi)
    rmin = min(r.real for r in rates)
    if rmin <= 0:
        raise SingularDiscretization("non-decaying mode: lambda outside the admissible region")
    if X_max is None:
        X_max = 40.0 / rmin
    if X_max * rmin < 15:
        raise SingularDiscretization(f"truncation too short: X_max * rate = {X_max * rmin:.3g}")
    if stretch is None:
        stretch = _default_stretch(rates)
    prof = _solve_once(params, lam, xi, h_hat, H_hat, X_max, n, stretch)
    if richardson:
        coarse = _solve_once(params, lam, xi, h_hat, H_hat, X_max, n // 2, stretch)
        fine = _solve_once(params, lam, xi, h_hat, H_hat, X_max, 2 * n, stretch)
        e1 = _nodal_l2(coarse.u, coarse.Q, prof.u[:, ::2], prof.Q[..., ::2], coarse.x)
        e2 = _nodal_l2(prof.u, prof.Q, fine.u[:, ::2], fine.Q[..., ::2], prof.x)
        order = float(np.log2(e1 / e2)) if e2 > 0 and e1 > 0 else float("nan")
        scale = _nodal_l2(fine.u, fine.Q, 0 * fine.u, 0 * fine.Q, fine.x)
        prof.richardson = {"order": order, "diff_coarse": e1, "diff_fine": e2,
                           "est_rel_error": e2 / (2 ** max(order, 1.0) - 1) / max(scale, 1e-300)}
    return prof


def _nodal_l2(u1, Q1, u2, Q2, x):
    d = np.sum(np.abs(u1 - u2) ** 2, axis=0) + np.sum(np.abs(Q1 - Q2) ** 2, axis=(0, 1))
    return float(np.sqrt(np.trapezoid(d, x)))


def relative_l2(prof, u, Q, p=None):
    """Relative L2(0, X) difference between the oracle and given nodal profiles
    (u: (N, n+1), Q: (N, N, n+1)); p (at half nodes) included when given."""
    num = _nodal_l2(prof.u, prof.Q, u, Q, prof.x) ** 2
    den = _nodal_l2(prof.u, prof.Q, 0 * u, 0 * Q, prof.x) ** 2
    if p is not None:
        num += float(np.trapezoid(np.abs(prof.p_half - p) ** 2, prof.x_half))
        den += float(np.trapezoid(np.abs(prof.p_half) ** 2, prof.x_half))
    return float(np.sqrt(num / den)) if den > 0 else float(np.sqrt(num))


def oracle_uniqueness_probe(params, lam, xi_prime, X_max=None, n=512, iters=30, seed=0):
    """Smallest singular value of the row-equilibrated discrete BVP matrix,
    by inverse iteration on M^H M (normalised by the largest, estimated by
    power iteration)."""
    xi = np.atleast_1d(np.asarray(xi_prime, float))
    rates = decay_rates(params, lam, xi)
    rmin = min(r.real for r in rates)
    if X_max is None:
        X_max = 40.0 / max(rmin, 1e-3)
    stretch = _default_stretch(rates)
    Mx, lay = _assemble(params, lam, xi, n, X_max, stretch)
    rs = np.asarray(abs(Mx).max(axis=1).todense()).ravel()
    Mx = sp.diags(1.0 / rs) @ Mx
    Mx = Mx.tocsc()
    rng = np.random.default_rng(seed)
    try:
        lu = spla.splu(Mx)
    except RuntimeError:
        return {"sigma_min": 0.0, "sigma_max": float("nan"), "normalized": 0.0, "rate_min": rmin}
    v = rng.normal(size=Mx.shape[0]) + 1j * rng.normal(size=Mx.shape[0])
    v /= np.linalg.norm(v)
    s_inv = 0.0
    for _ in range(iters):
        w = lu.solve(lu.solve(v), trans="H")
        s_inv = np.linalg.norm(w)
        if not np.isfinite(s_inv):
            return {"sigma_min": 0.0, "sigma_max": float("nan"), "normalized": 0.0, "rate_min": rmin}
        v = w / s_inv
    smin = 1.0 / np.sqrt(s_inv)
    v = rng.normal(size=Mx.shape[0]) + 1j * rng.normal(size=Mx.shape[0])
    v /= np.linalg.norm(v)
    MH = Mx.conj().T.tocsc()
    smax2 = 0.0
    for _ in range(iters):
        w = MH @ (Mx @ v)
        smax2 = np.linalg.norm(w)
        v = w / smax2
    smax = np.sqrt(smax2)
    return {"sigma_min": float(smin), "sigma_max": float(smax), "normalized": float(smin / smax),
            "rate_min": float(rmin)}
