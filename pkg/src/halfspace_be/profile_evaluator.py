"""Mode profiles u(x), p(x), Q(x) and residuals of the Fourier system."""
import math

import numpy as np

from ._accel import njit, pick

SERIES_CUT = 1e-3


def _eval_M_numpy(g1, g2, t):
    g1 = np.asarray(g1, dtype=complex)
    g2 = np.asarray(g2, dtype=complex)
    t = np.asarray(t, dtype=float)
    g1, g2, t = np.broadcast_arrays(g1, g2, t)
    d = g1 - g2
    gm = 0.5 * (g1 + g2)
    small = np.abs(d) * t < SERIES_CUT
    y = 0.5 * d * t
    y2 = y * y
    # sinh(y)/y, four terms are plenty for |y| < 5e-4
    ser = 1 + y2 / 6 * (1 + y2 / 20 * (1 + y2 / 42 * (1 + y2 / 72)))
    out = -t * np.exp(-gm * t) * ser
    big = ~small
    if np.any(big):
        out[big] = (np.exp(-g1[big] * t[big]) - np.exp(-g2[big] * t[big])) / d[big]
    return out


@njit(cache=True)
def _eval_M_kernel(g1, g2, t, out):
    for i in range(out.size):
        a = g1[i]
        b = g2[i]
        x = t[i]
        d = a - b
        if abs(d) * x < SERIES_CUT:
            y = 0.5 * d * x
            y2 = y * y
            ser = 1 + y2 / 6 * (1 + y2 / 20 * (1 + y2 / 42 * (1 + y2 / 72)))
            out[i] = -x * np.exp(-0.5 * (a + b) * x) * ser
        else:
            out[i] = (np.exp(-a * x) - np.exp(-b * x)) / d


def _eval_M_numba(g1, g2, t):
    g1 = np.asarray(g1, dtype=complex)
    g2 = np.asarray(g2, dtype=complex)
    t = np.asarray(t, dtype=float)
    g1, g2, t = np.broadcast_arrays(g1, g2, t)
    shape = g1.shape
    out = np.empty(g1.size, dtype=complex)
    _eval_M_kernel(np.ascontiguousarray(g1).ravel(), np.ascontiguousarray(g2).ravel(),
                   np.ascontiguousarray(t).ravel(), out)
    return out.reshape(shape)


_eval_M_impl = pick(_eval_M_numba, _eval_M_numpy)


def eval_M(gamma1, gamma2, t):
    """(e^{-g1 t} - e^{-g2 t})/(g1 - g2), confluent-safe."""
    out = _eval_M_impl(gamma1, gamma2, t)
    return out[()] if out.ndim == 0 else out


def _exp_derivs(gam, x, order):
    """[(-g)^k e^{-g x}] for k = 0..order, shape (order+1, M, nx)."""
    e = np.exp(-gam[:, None] * x[None, :])
    return np.stack([(-gam[:, None]) ** k * e for k in range(order + 1)])


def _M_derivs(g1, g2, x, order):
    """Derivatives of M(g1, g2, x) in x up to 'order', via
    d/dx M = -e^{-g1 x} - g2 M."""
    Mx = eval_M(g1[:, None], g2[:, None], x[None, :])
    e1 = _exp_derivs(g1, x, order)
    out = [Mx]
    for k in range(1, order + 1):
        out.append(-e1[k - 1] - g2[:, None] * out[-1])
    return np.stack(out)


def profile_terms(amps):
    """Coefficients and rates of the stable representation, batched."""
    br = amps.branch
    if br == "regular":
        S = amps.A1 + amps.A2
        T = amps.A2 * (amps.L2 - amps.L1)[..., None]
        SQ = amps.Q1 + amps.Q2
        TQ = amps.Q2 * (amps.L2 - amps.L1)[..., None, None]
        gs, g1, g2 = amps.L1, amps.L2, amps.L1
    elif br == "degenerate":
        S, T = amps.A1, -amps.A2
        SQ, TQ = amps.Q1, -amps.Q2
        gs = g1 = g2 = amps.L1
    else:
        S, T = amps.A2, np.zeros_like(amps.A2)
        SQ, TQ = amps.Q2, np.zeros_like(amps.Q2)
        gs = g1 = g2 = amps.L2
    return S, T, SQ, TQ, gs, g1, g2


def eval_profile(amps, x, order=0, form="standard"):
    """Profiles and x-derivatives.

    Returns dict with 'u' (order+1, [M,] N, nx), 'p' (order+1, [M,] nx),
    'Q' (order+1, [M,] N, N, nx).  form='volhevic' evaluates u as
    h e^{-Ax} + S (L1-A) M(L1, A, x) + T M(L2, L1, x) (regular branch)."""
    single = np.ndim(amps.C) == 0
    if single:
        amps = _batch1(amps)
    x = np.asarray(x, dtype=float)
    S, T, SQ, TQ, gs, g1, g2 = profile_terms(amps)
    A = np.asarray(amps.A, dtype=complex)
    eA = _exp_derivs(A, x, order)
    eB = _exp_derivs(amps.B, x, order)
    eS = _exp_derivs(gs, x, order)
    mM = _M_derivs(g1, g2, x, order)
    if form == "volhevic" and amps.branch == "regular":
        h = amps.A0 + amps.A1 + amps.A2
        mA = _M_derivs(amps.L1, A, x, order)
        u = (h[None, :, :, None] * eA[:, :, None, :]
             + (S * (amps.L1 - A)[:, None])[None, :, :, None] * mA[:, :, None, :]
             + T[None, :, :, None] * mM[:, :, None, :])
    else:
        u = (amps.A0[None, :, :, None] * eA[:, :, None, :]
             + S[None, :, :, None] * eS[:, :, None, :]
             + T[None, :, :, None] * mM[:, :, None, :])
    Q = (amps.Ajk[None, ..., None] * eA[:, :, None, None, :]
         + amps.P[None, ..., None] * eB[:, :, None, None, :]
         + SQ[None, ..., None] * eS[:, :, None, None, :]
         + TQ[None, ..., None] * mM[:, :, None, None, :])
    p = amps.C[None, :, None] * eA + amps.D[None, :, None] * eB
    if single:
        u, p, Q = u[:, 0], p[:, 0], Q[:, 0]
    return {"u": u, "p": p, "Q": Q}


def _batch1(amps):
    from .coefficient_assembly import AmplitudeSet

    def g(v):
        return None if v is None else np.asarray(v)[None]
    return AmplitudeSet(g(amps.C), g(amps.D), g(amps.A0), g(amps.A1), g(amps.A2), g(amps.Ajk),
                        g(amps.P), g(amps.Q1), g(amps.Q2), g(amps.E), amps.branch, g(amps.lam),
                        g(amps.A), g(amps.B), g(amps.L1), g(amps.L2), g(amps.xi))


def _slowest_rate(amps):
    r = np.minimum(np.minimum(np.real(amps.B), np.real(amps.L1)), np.real(amps.L2))
    A = np.real(amps.A)
    return np.where(A > 0, np.minimum(r, A), r)


def default_x_grid(amps, n=256, factor=40.0):
    """Grid on [0, X_max] with X_max = factor / slowest decay rate,
    clustered toward 0 (x = X s^2)."""
    rates = [np.real(amps.B), np.real(amps.L1), np.real(amps.L2)]
    A = float(np.real(amps.A))
    if A > 0:
        rates.append(A)
    xmax = factor / min(rates)
    s = np.linspace(0.0, 1.0, n)
    return xmax * s * s


def _rate_roots(params, amps):
    """z with gamma^2 = A^2 + z for the rates gs (S term) and g1 (M term),
    taken from the characteristic roots rather than gamma^2 - A^2."""
    from .coefficient_assembly import _block_roots
    return _block_roots(params, np.asarray(amps.lam, complex), np.asarray(amps.A, complex),
                        amps.L1, amps.branch)


class _Basis:
    """Profiles as coefficients over e^{-Ax}, e^{-Bx}, e^{-gs x}, M(g1, gs, x).

    d/dx and A^2 - d^2/dx^2 act on the coefficients exactly (A^2 - B^2 =
    -(lam+a), A^2 - L^2 = -z), so residuals are formed before any
    exponential is summed and large cancelling amplitudes do not leak
    roundoff into them."""

    def __init__(self, params, amps):
        _, _, _, _, gs, g1, g2 = profile_terms(amps)
        self.gam = (np.asarray(amps.A, complex), amps.B, gs)
        self.g1 = g1
        zs, z1 = _rate_roots(params, amps)
        self.q = (np.zeros_like(self.gam[0]), -(amps.lam + params.a), -zs)
        self.q1 = -z1

    def _b(self, v, c):
        return v.reshape(v.shape + (1,) * (c.ndim - 1))

    def d(self, c):
        out = np.empty_like(c)
        for i in range(3):
            out[i] = -self._b(self.gam[i], c[i]) * c[i]
        out[2] -= c[3]
        out[3] = -self._b(self.g1, c[3]) * c[3]
        return out

    def kq(self, c):
        """(A^2 - d^2/dx^2) c."""
        out = np.empty_like(c)
        for i in range(3):
            out[i] = self._b(self.q[i], c[i]) * c[i]
        out[3] = self._b(self.q1, c[3]) * c[3]
        out[2] -= self._b(self.g1 + self.gam[2], c[3]) * c[3]
        return out

    def values(self, x):
        e = [np.exp(-g[:, None] * x[None, :]) for g in self.gam]
        e.append(eval_M(self.g1[:, None], self.gam[2][:, None], x[None, :]))
        return np.stack(e)

    def evaluate(self, c, x):
        V = self.values(x)
        V = V.reshape(V.shape[:2] + (1,) * (c.ndim - 2) + V.shape[-1:])
        return np.sum(c[..., None] * V, axis=0)


def _coeffs(amps):
    S, T, SQ, TQ, *_ = profile_terms(amps)
    z = np.zeros_like
    u = np.stack([amps.A0, z(amps.A0), S, T])
    Q = np.stack([amps.Ajk, amps.P, SQ, TQ])
    p = np.stack([amps.C, amps.D, z(amps.C), z(amps.C)])
    return u, p, Q


def fourier_residual_fields(params, amps, x):
    """Pointwise residuals of momentum, divergence, Q equation (batched)."""
    single = np.ndim(amps.C) == 0
    if single:
        amps = _batch1(amps)
    N = params.dim
    beta, a = params.beta, params.a
    x = np.asarray(x, float)
    bs = _Basis(params, amps)
    u, p, Q = _coeffs(amps)
    lam = amps.lam
    ixi = 1j * amps.xi  # (M, N-1)

    def grad(k, c):
        # k-th component of (i xi', d/dx) on a coefficient stack
        if k < N - 1:
            return bs._b(ixi[:, k], c[0]) * c
        return bs.d(c)

    # (lam + A^2 - D^2) u_j + grad_j p + beta sum_k grad_k (D^2 - A^2 - a) Q_jk
    mom = np.empty(u.shape[:2] + (N,), complex)
    kqQ = bs.kq(Q)
    for j in range(N):
        r = lam * u[..., j] + bs.kq(u[..., j]) + grad(j, p)
        for k in range(N):
            r = r - beta * grad(k, kqQ[..., j, k] + a * Q[..., j, k])
        mom[..., j] = r
    div = grad(N - 1, u[..., N - 1])
    for k in range(N - 1):
        div = div + grad(k, u[..., k])
    qeq = np.empty(Q.shape, complex)
    for j in range(N):
        for k in range(N):
            r = (lam + a) * Q[..., j, k] + kqQ[..., j, k]
            qeq[..., j, k] = r - 0.5 * beta * (grad(j, u[..., k]) + grad(k, u[..., j]))
    return bs.evaluate(mom, x), bs.evaluate(div, x), bs.evaluate(qeq, x), None


def mode_residual(params, amps, data, x_grid=None, parabolic=False):
    """Sup-norm residuals normalised by (1+|lam|)(|h|+|H|); batched over modes
    when amps is batched (then data must carry (M, N) / (M, N, N) arrays).
    parabolic=True uses (1+|lam|+A^2) instead, the natural size of the
    operator when A^2 >> |lam|."""
    single = np.ndim(amps.C) == 0
    if single:
        amps = _batch1(amps)
    if x_grid is None:
        x_grid = default_x_grid(amps.mode(int(np.argmin(_slowest_rate(amps)))))
    x = np.asarray(x_grid, float)
    N = params.dim
    mom, div, qeq, prof = fourier_residual_fields(params, amps, x)
    h = np.asarray(data.h_hat, complex).reshape(-1, N)
    H = np.asarray(data.H_hat, complex).reshape(-1, N, N)
    size = 1 + np.abs(amps.lam) + (np.abs(amps.A) ** 2 if parabolic else 0.0)
    scale = size * (np.linalg.norm(h, axis=-1) + np.linalg.norm(H.reshape(H.shape[0], -1), axis=-1))
    scale = np.where(scale == 0, 1.0, scale)
    u0 = eval_profile(amps, np.array([0.0]), order=1)
    bc_u = np.max(np.abs(u0["u"][0][..., 0] - h), axis=-1)
    bc_Q = np.max(np.abs(u0["Q"][1][..., 0] - H).reshape(H.shape[0], -1), axis=-1)
    out = {
        "momentum": np.max(np.abs(mom), axis=(1, 2)) / scale,
        "divergence": np.max(np.abs(div), axis=1) / scale,
        "q_equation": np.max(np.abs(qeq), axis=(1, 2, 3)) / scale,
        "boundary": np.maximum(bc_u, bc_Q) / scale,
    }
    if single:
        out = {k: float(v[0]) for k, v in out.items()}
    return out
