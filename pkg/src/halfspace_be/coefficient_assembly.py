"""Mode amplitudes of the exponential representation and the scalar
functions calC, calA, F_a, G_a.

Authoritative path: every exponential rate (A, B_a, L_1, L_2, or the
confluent rate L_0 as a 2x2 Jordan block) is substituted into the Fourier
system; the coefficient identities, the boundary conditions and the
E-relation are stacked into one square complex system and solved with
partial pivoting (batched LU over modes).  The closed forms below are used
as diagnostics only.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import BetaZero, DegenerateLambda, SingularSystem
from . import spectral_symbols as ss


# ---------------------------------------------------------------- data types

@dataclass
class BoundaryModeData:
    h_hat: np.ndarray
    H_hat: np.ndarray

    def __post_init__(self):
        self.h_hat = np.asarray(self.h_hat, dtype=complex)
        self.H_hat = np.asarray(self.H_hat, dtype=complex)
        N = self.h_hat.shape[-1]
        if self.H_hat.shape[-2:] != (N, N):
            raise ValueError("H_hat must be N x N")

    def check(self, tol=1e-12):
        h, H = self.h_hat, self.H_hat
        scale = 1.0 + np.max(np.abs(h)) + np.max(np.abs(H))
        errs = []
        if np.max(np.abs(h[..., -1])) > tol * scale:
            errs.append("h_N must vanish")
        if np.max(np.abs(H - np.swapaxes(H, -1, -2))) > tol * scale:
            errs.append("H must be symmetric")
        if np.max(np.abs(np.trace(H, axis1=-2, axis2=-1))) > tol * scale:
            errs.append("H must be traceless")
        return errs

    @classmethod
    def zeros(cls, N):
        return cls(np.zeros(N, complex), np.zeros((N, N), complex))

    @classmethod
    def random(cls, N, rng, scale=1.0):
        h = rng.normal(size=N) + 1j * rng.normal(size=N)
        h[-1] = 0
        H = rng.normal(size=(N, N)) + 1j * rng.normal(size=(N, N))
        H = 0.5 * (H + H.T)
        H -= np.trace(H) / N * np.eye(N)
        return cls(scale * h, scale * H)


@dataclass
class AmplitudeSet:
    """Amplitudes of one mode (or of a stack of M modes when batched).

    Regular branch:  u = A0 e^{-Ax} + A1 e^{-L1 x} + A2 e^{-L2 x}.
    Degenerate branch: u = A0 e^{-Ax} + At1 e^{-L0 x} + At2 x e^{-L0 x}
    (A1/A2 then hold the tilde amplitudes At1/At2, likewise Q1/Q2).
    Decoupled (beta = 0): u = A0 e^{-Ax} + A2 e^{-L2 x}, A1 = 0, L2 = sqrt(A^2+lam).
    """
    C: np.ndarray
    D: np.ndarray
    A0: np.ndarray
    A1: np.ndarray
    A2: np.ndarray
    Ajk: np.ndarray
    P: np.ndarray
    Q1: np.ndarray
    Q2: np.ndarray
    E: np.ndarray | None
    branch: str
    lam: np.ndarray
    A: np.ndarray
    B: np.ndarray
    L1: np.ndarray
    L2: np.ndarray
    xi: np.ndarray
    extra: dict = field(default_factory=dict)

    def mode(self, i):
        """Single-mode view of a batched set."""
        def g(v):
            return None if v is None else v[i]
        return AmplitudeSet(g(self.C), g(self.D), g(self.A0), g(self.A1), g(self.A2),
                            g(self.Ajk), g(self.P), g(self.Q1), g(self.Q2), g(self.E),
                            self.branch, g(self.lam), g(self.A), g(self.B), g(self.L1),
                            g(self.L2), g(self.xi))


# ------------------------------------------------------------ scalar forms

def _I1(beta, A, B):
    return beta * A ** 2 / (B ** 2 - A ** 2) * (2 * A ** 2 - A * (B ** 2 + A ** 2) / B)


def _brace(A, B, L):
    return 2 * A ** 2 * L - (B ** 2 + A ** 2) * (L ** 2 + A ** 2) / (2 * B)


def _I2(beta, A, B, L1, L2):
    return (-beta * L1 * (L2 - A) / (B ** 2 - L1 ** 2) * _brace(A, B, L1)
            + beta * L2 * (L1 - A) / (B ** 2 - L2 ** 2) * _brace(A, B, L2))


def _I2_over_diff(beta, A, B, L1, L2):
    den = 2 * B * (B ** 2 - L1 ** 2) * (B ** 2 - L2 ** 2)
    s, p = L1 + L2, L1 * L2
    t1 = 4 * beta * A ** 2 * B * (p * (B ** 2 + p) - A * B ** 2 * s)
    t2 = beta * (B ** 2 + A ** 2) * ((B ** 2 + A ** 2) * p * s
                                     - A * B ** 2 * (L1 ** 2 + p + L2 ** 2 + A ** 2)
                                     + A * p * (p - A ** 2))
    return (t1 - t2) / den


def _small_diffs(A, B, L1, L2, s, z1, z2):
    """e = B_a - A, d_j = L_j - A, m_j = B_a^2 - L_j^2 without cancellation."""
    e = s / (B + A)
    d1 = z1 / (L1 + A)
    d2 = z2 / (L2 + A)
    return e, d1, d2, s - z1, s - z2


def mode_roots(params, lam, L1, L2):
    """(lam + a, z1, z2) per mode; the confluent root where L1 == L2."""
    lam = np.asarray(lam, dtype=complex)
    z1, z2 = ss.characteristic_roots(params, lam)
    z1, z2 = np.asarray(z1), np.asarray(z2)
    if params.beta != 0:
        conf = np.asarray(L1 == L2)
        if conf.any():
            z = ss.confluent_root(params)
            z1 = np.where(conf, z, z1)
            z2 = np.where(conf, z, z2)
    return lam + params.a, z1, z2


def _calC_core(beta, A, B, L1, L2, s, z1, z2):
    """I1 + I2/(L2-L1) with the divided difference taken out by hand and the
    polynomial expanded in e = B_a - A, d_j = L_j - A, so that the large-A
    cancellations are exact."""
    e, d1, d2, m1, m2 = _small_diffs(A, B, L1, L2, s, z1, z2)
    i1 = -beta * A ** 3 * e / (B * (B + A))
    q = (A ** 4 * 4 * e * (e * e - d1 * d2 - d1 * e - d2 * e)
         + A ** 3 * (2 * d1 ** 2 * d2 ** 2 - 4 * d1 * d2 * e * (d1 + d2) - 2 * e * e * (d1 ** 2 + d2 ** 2)
                     - 16 * d1 * d2 * e * e + 2 * e ** 4)
         + A ** 2 * (2 * d1 ** 2 * d2 ** 2 * e - 10 * d1 * d2 * e * e * (d1 + d2) - 8 * d1 * d2 * e ** 3)
         - A * e * e * (d1 ** 2 * d2 ** 2 + 4 * d1 * d2 * e * (d1 + d2) + 3 * d1 * d2 * e * e)
         - d1 * d2 * e ** 4 * (d1 + d2))
    return i1 + beta * q / (2 * B * m1 * m2)


def _hbar_coef_over_diff(beta, A, B, L1, L2, s, z1, z2):
    """hbar/((L2-L1) i xi'.h'), expanded like _calC_core."""
    e, d1, d2, m1, m2 = _small_diffs(A, B, L1, L2, s, z1, z2)
    q = (A ** 4 * 4 * (e * e + e * (d1 + d2) - d1 * d2)
         + A ** 3 * (-4 * d1 * d2 * (d1 + d2) + 4 * e * (d1 ** 2 + d2 ** 2) + 8 * e * e * (d1 + d2) + 8 * e ** 3)
         + A ** 2 * (-2 * d1 ** 2 * d2 ** 2 - 4 * d1 * d2 * e * (d1 + d2) + 6 * e * e * (d1 ** 2 + d2 ** 2)
                     + 4 * d1 * d2 * e * e + 8 * e ** 3 * (d1 + d2) + 4 * e ** 4)
         + A * e * (-2 * d1 ** 2 * d2 ** 2 - 2 * d1 * d2 * e * (d1 + d2) + 4 * e * e * (d1 ** 2 + d2 ** 2)
                    + 4 * d1 * d2 * e * e + 3 * e ** 3 * (d1 + d2))
         + e * e * (-d1 ** 2 * d2 ** 2 + e * e * (d1 ** 2 + d1 * d2 + d2 ** 2)))
    return beta * q / (2 * B * m1 * m2)


def _hbar_coef_naive(beta, A, B, L1, L2):
    return beta * (L1 / (B ** 2 - L1 ** 2) * _brace(A, B, L1)
                   - L2 / (B ** 2 - L2 ** 2) * _brace(A, B, L2))


def _B_script(A, B, L1, L2):
    """The bracket multiplying i xi_k calE_h/(lam calC) in E_k; the same
    bracket multiplies the H-parts of C in E_k."""
    den = (B + L1) * (B + L2)
    return (2 * A * B / (B + A) ** 2
            - 2 * ((L2 * B * B - A * A * B) * (L1 - A) + (A * L1 * L2 + A * B * L1) * (A - B))
            / ((B * B - A * A) * den)
            - (A * B + L1 * L2) / den)


def _calA(A, B, L1, L2, s=None, z1=None, z2=None):
    if s is None:
        return B * (B ** 2 - A ** 2) * (L1 + L2) - A ** 2 * (B - L1) * (B - L2)
    # B_a - L_j = (s - z_j)/(B_a + L_j)
    return B * s * (L1 + L2) - A ** 2 * (s - z1) * (s - z2) / ((B + L1) * (B + L2))


def _calA_defining(A, B, L1, L2):
    return B ** 3 * (L1 + L2) - A ** 2 * B ** 2 - A ** 2 * L1 * L2


def _H1(A, B, xi, H):
    N = H.shape[-1]
    ixi = 1j * xi
    out = A ** 2 * H[..., N - 1, N - 1]
    out = out - (B ** 2 + A ** 2) / B * np.einsum("...j,...j->...", ixi, H[..., :N - 1, N - 1])
    out = out + np.einsum("...j,...k,...jk->...", ixi, ixi, H[..., :N - 1, :N - 1])
    return out


def _mode_arrays(params, lam, xi_prime, force_regular=False, lam_per_mode=False):
    """Vectorised (lam, A, B, L1, L2, degenerate-mask) for a stack of modes."""
    xi = np.atleast_2d(np.asarray(xi_prime, dtype=float))
    lam = np.broadcast_to(np.asarray(lam, dtype=complex), xi.shape[:1]).copy()
    deg = np.zeros(lam.shape, bool)
    z1, z2 = ss.characteristic_roots(params, lam)
    z1 = np.asarray(z1).copy()
    z2 = np.asarray(z2).copy()
    if params.beta != 0 and not force_regular:
        deg = np.asarray(ss.is_degenerate(params, lam))
        if deg.any():
            eta = ss.eta_point(params)
            z = ss.confluent_root(params)
            lam[deg] = eta
            z1[deg] = z
            z2[deg] = z
    A, B, L1, L2 = ss.wave_numbers(params, lam, xi, roots=(z1, z2))
    return xi, lam, A, B, L1, L2, deg


@dataclass
class ScalarFunctions:
    calC: complex
    calA: complex
    F_a: complex
    G_a: complex
    I1: complex
    I2_over_diff: complex
    hbar_over_diff: complex | None
    H1: complex | None
    E_h: complex
    B_script: complex


def scalar_functions(params, lam, xi_prime, data=None):
    if params.beta == 0:
        raise BetaZero("scalar functions need beta != 0")
    xi, lam, A, B, L1, L2, deg = _mode_arrays(params, lam, xi_prime, force_regular=True)
    beta = params.beta
    sz = mode_roots(params, lam, L1, L2)
    core = _calC_core(beta, A, B, L1, L2, *sz)
    calC = core / lam
    t = A / np.sqrt(lam + params.a)
    hb = H1 = None
    if data is not None:
        N = params.dim
        ixh = np.einsum("...j,...j->...", 1j * xi, np.atleast_2d(data.h_hat)[..., :N - 1])
        hb = _hbar_coef_over_diff(beta, A, B, L1, L2, *sz) * ixh
        H1 = _H1(A, B, xi, np.atleast_3d(data.H_hat) if data.H_hat.ndim == 2 else data.H_hat)
        if np.ndim(H1) and data.H_hat.ndim == 2:
            H1 = H1.reshape(-1)
    sq = lambda v: v[0] if np.ndim(v) and np.size(v) == 1 else v
    return ScalarFunctions(
        calC=sq(calC), calA=sq(_calA(A, B, L1, L2, *sz)),
        F_a=sq(F_a_from_t(params, lam, t)), G_a=sq(G_a_from_t(params, lam, t)),
        I1=sq(_I1(beta, A, B)), I2_over_diff=sq(_I2_over_diff(beta, A, B, L1, L2)),
        hbar_over_diff=None if hb is None else sq(hb), H1=None if H1 is None else sq(H1),
        E_h=sq(_hbar_coef_over_diff(beta, A, B, L1, L2, *sz)), B_script=sq(_B_script(A, B, L1, L2)))


def _check_not_degenerate(params, lam):
    if params.beta != 0 and np.any(ss.is_degenerate(params, lam)):
        raise DegenerateLambda("lambda within the degeneracy threshold of eta")


def eval_calC(params, lam, xi_prime, allow_degenerate=False):
    """calC = (I1 + I2/(L2-L1))/lam in the rearranged form.

    The rearranged form has no divided difference, so it is also valid at
    lam = eta when allow_degenerate is set (this gives the tilde value)."""
    if params.beta == 0:
        raise BetaZero("calC needs beta != 0")
    if not allow_degenerate:
        _check_not_degenerate(params, lam)
    xi, lam_, A, B, L1, L2, deg = _mode_arrays(params, lam, xi_prime,
                                               force_regular=not allow_degenerate)
    out = _calC_core(params.beta, A, B, L1, L2, *mode_roots(params, lam_, L1, L2)) / lam_
    return out[0] if np.ndim(lam) == 0 and np.atleast_2d(xi_prime).shape[0] == 1 else out


def eval_calC_degenerate(params, xi_prime):
    """Tilde value of calC at lam = eta."""
    if params.beta == 0:
        raise BetaZero("no confluent point for beta = 0")
    return eval_calC(params, ss.eta_point(params), xi_prime, allow_degenerate=True)


def eval_calC_naive(params, lam, xi_prime):
    if params.beta == 0:
        raise BetaZero("calC needs beta != 0")
    _check_not_degenerate(params, lam)
    xi, lam_, A, B, L1, L2, _ = _mode_arrays(params, lam, xi_prime, force_regular=True)
    out = (_I1(params.beta, A, B) + _I2(params.beta, A, B, L1, L2) / (L2 - L1)) / lam_
    return out[0] if np.ndim(lam) == 0 and np.atleast_2d(xi_prime).shape[0] == 1 else out


def eval_calA(params, lam, xi_prime, defining=False):
    xi, lam_, A, B, L1, L2, _ = _mode_arrays(params, lam, xi_prime, force_regular=True)
    if defining:
        out = _calA_defining(A, B, L1, L2)
    else:
        out = _calA(A, B, L1, L2, *mode_roots(params, lam_, L1, L2))
    return out[0] if np.ndim(lam) == 0 and np.atleast_2d(xi_prime).shape[0] == 1 else out


def eval_calA_tilde(params, xi_prime):
    eta = ss.eta_point(params)
    xi = np.atleast_2d(np.asarray(xi_prime, float))
    A = np.sqrt(np.sum(xi ** 2, axis=-1))
    B = np.sqrt(eta + params.a + A ** 2)
    L0 = np.sqrt(A ** 2 + ss.confluent_root(params))
    return 2 * B ** 3 * L0 - A ** 2 * B ** 2 - A ** 2 * L0 ** 2


# ----------------------------------------------------------- normalized forms

def _tilde_roots(params, lam):
    lam = np.asarray(lam, dtype=complex)
    z1, z2 = ss.characteristic_roots(params, lam)
    return np.asarray(z1) / (lam + params.a), np.asarray(z2) / (lam + params.a)


def physical_t(params, lam, A):
    """t = |xi'|/sqrt(lam+a) for real A >= 0."""
    return np.asarray(A) / np.sqrt(np.asarray(lam, dtype=complex) + params.a)


def F_terms(params, lam, t, zt=None):
    """(F1, F2^1..F2^4) of the normalized expansion, written in t."""
    zt1, zt2 = _tilde_roots(params, lam) if zt is None else zt
    t = np.asarray(t, dtype=complex)
    s1 = np.sqrt(t * t + zt1)
    s2 = np.sqrt(t * t + zt2)
    b = np.sqrt(1 + t * t)
    den = (1 - zt1) * (1 - zt2)
    p = s1 * s2
    F1 = t * t * (2 * t * t - t * b - t ** 3 / b)
    F21 = 2 * t * t * (p * (t * t + 1 + p) - t * (t * t + 1) * (s1 + s2)) / den
    F22 = -(2 * t * t + 1) ** 2 * p * (s1 + s2) / (2 * b * den)
    F23 = t * (2 * t * t + 1) * (t * t + 1) * (3 * t * t + zt1 + zt2 + p) / (2 * b * den)
    F24 = -t * (2 * t * t + 1) * p * (p - t * t) / (2 * b * den)
    return F1, F21, F22, F23, F24


def F_a_sum(params, lam, t, zt=None):
    """F_a as the plain sum of the expansion terms (large-t cancellation)."""
    return sum(F_terms(params, lam, t, zt))


def F_a_from_t(params, lam, t, zt=None):
    """F_a via the rearranged calC form in normalized variables
    (A -> t, B_a -> sqrt(1+t^2), L_j -> sqrt(t^2+zt_j)); no cancellation."""
    zt1, zt2 = _tilde_roots(params, lam) if zt is None else zt
    t = np.asarray(t, dtype=complex)
    Bn = np.sqrt(1 + t * t)
    l1 = np.sqrt(t * t + zt1)
    l2 = np.sqrt(t * t + zt2)
    return _calC_core(1.0, t, Bn, l1, l2, 1.0, zt1, zt2)


def G_a_from_t(params, lam, t, zt=None):
    zt1, zt2 = _tilde_roots(params, lam) if zt is None else zt
    t = np.asarray(t, dtype=complex)
    Bn = np.sqrt(1 + t * t)
    l1 = np.sqrt(t * t + zt1)
    l2 = np.sqrt(t * t + zt2)
    return _calA(t, Bn, l1, l2, 1.0, zt1, zt2)


def G_a_defining(params, lam, t, zt=None):
    zt1, zt2 = _tilde_roots(params, lam) if zt is None else zt
    t = np.asarray(t, dtype=complex)
    s1 = np.sqrt(t * t + zt1)
    s2 = np.sqrt(t * t + zt2)
    return (t * t + 1) ** 1.5 * (s1 + s2) - t * t * (t * t + 1) - t * t * s1 * s2


def F_tail(zt1, zt2):
    return -zt1 * zt2 / (2 * (1 - zt1) * (1 - zt2))


# --------------------------------------------------------- the linear system

class _Layout:
    def __init__(self, N, block_sizes, with_R, with_E):
        self.N = N
        n = 0
        self.C, self.D = 0, 1
        n = 2
        self.A0 = n; n += N
        self.Ajk = n; n += N * N
        self.P = n; n += N * N
        self.U = []
        self.R = []
        for m in block_sizes:
            self.U.append(n); n += N * m
            if with_R:
                self.R.append(n); n += N * N * m
            else:
                self.R.append(None)
        self.E = None
        if with_E:
            self.E = n; n += N - 1
        self.n = n
        self.m = list(block_sizes)

    def a0(self, k): return self.A0 + k
    def ajk(self, j, k): return self.Ajk + j * self.N + k
    def p(self, j, k): return self.P + j * self.N + k
    def u(self, b, k): return self.U[b] + k * self.m[b]
    def r(self, b, j, k): return self.R[b] + (j * self.N + k) * self.m[b]


def _jordan(gamma, m):
    M = gamma.shape[0]
    J = np.zeros((M, m, m), complex)
    for c in range(m):
        J[:, c, c] = -gamma
    if m == 2:
        J[:, 0, 1] = 1.0
    return J


def _refined_solve(K, rhs, steps=2):
    """LU solve plus iterative refinement with the residual accumulated in
    extended precision.  When L1, L2, B_a crowd A (|xi'|^2 >> |lam|) the
    columns are nearly parallel and plain LU loses ~7 digits; the extended
    residual recovers most of them."""
    y = np.linalg.solve(K, rhs[..., None])[..., 0]
    if np.clongdouble == np.complex128:
        return y
    Kl = K.astype(np.clongdouble)
    bl = rhs.astype(np.clongdouble)
    yl = y.astype(np.clongdouble)
    for _ in range(steps):
        r = bl - np.einsum("mij,mj->mi", Kl, yl)
        dy = np.linalg.solve(K, r.astype(complex)[..., None])[..., 0]
        yl = yl + dy.astype(np.clongdouble)
    return yl.astype(complex)


def _solve_system(params, lam, xi, A, B, blocks, h, H, branch):
    """Assemble and solve the stacked system for M modes.

    blocks: list of (gamma (M,), m); branch in {regular, degenerate, decoupled}.
    Returns the solution vectors (M, n) and the layout."""
    N = params.dim
    M = lam.shape[0]
    beta, a = params.beta, params.a
    decoupled = branch == "decoupled"
    with_E = branch == "regular"
    lay = _Layout(N, [m for _, m, _ in blocks], with_R=not decoupled, with_E=with_E)
    n = lay.n
    K = np.zeros((M, n, n), complex)
    rhs = np.zeros((M, n), complex)
    ixi = 1j * xi  # (M, N-1)
    gA = np.concatenate([ixi, -A[:, None]], axis=1).astype(complex)
    gB = np.concatenate([ixi, -B[:, None]], axis=1)
    A2 = A * A
    row = 0
    # A block: momentum
    for j in range(N):
        K[:, row, lay.a0(j)] += lam
        K[:, row, lay.C] += gA[:, j]
        for k in range(N):
            K[:, row, lay.ajk(j, k)] += -beta * a * gA[:, k]
        row += 1
    # A block: Q equation
    for j in range(N):
        for k in range(N):
            K[:, row, lay.ajk(j, k)] += lam + a
            K[:, row, lay.a0(k)] += -0.5 * beta * gA[:, j]
            K[:, row, lay.a0(j)] += -0.5 * beta * gA[:, k]
            row += 1
    # L blocks
    for b, (gam, m, z) in enumerate(blocks):
        J = _jordan(gam, m)
        Im = np.broadcast_to(np.eye(m), (M, m, m))
        G = [ixi[:, k, None, None] * Im for k in range(N - 1)] + [J]
        if not decoupled:
            # lam + a + A^2 - gamma^2 = lam + a - z, without the subtraction
            opQ = (lam + a - z)[:, None, None] * Im - (J @ J - (gam * gam)[:, None, None] * Im)
            for j in range(N):
                for k in range(N):
                    rs = slice(row, row + m)
                    K[:, rs, lay.r(b, j, k):lay.r(b, j, k) + m] += opQ
                    K[:, rs, lay.u(b, k):lay.u(b, k) + m] += -0.5 * beta * G[j]
                    K[:, rs, lay.u(b, j):lay.u(b, j) + m] += -0.5 * beta * G[k]
                    row += m
        rs = slice(row, row + m)
        for k in range(N):
            K[:, rs, lay.u(b, k):lay.u(b, k) + m] += G[k]
        row += m
    # B block: momentum
    jrange = [N - 1] if decoupled else range(N)
    for j in jrange:
        K[:, row, lay.D] += gB[:, j]
        for k in range(N):
            K[:, row, lay.p(j, k)] += beta * lam * gB[:, k]
        row += 1
    # Neumann condition
    for j in range(N):
        for k in range(N):
            K[:, row, lay.ajk(j, k)] += -A
            K[:, row, lay.p(j, k)] += -B
            if not decoupled:
                for b, (gam, m, _) in enumerate(blocks):
                    K[:, row, lay.r(b, j, k)] += -gam
                    if m == 2:
                        K[:, row, lay.r(b, j, k) + 1] += 1.0
            rhs[:, row] = H[:, j, k]
            row += 1
    # velocity trace
    for k in range(N):
        K[:, row, lay.a0(k)] += 1.0
        for b in range(len(blocks)):
            K[:, row, lay.u(b, k)] += 1.0
        rhs[:, row] = h[:, k]
        row += 1
    # tangential zero mode: the u_N trace row is redundant, fix the gauge C = 0
    zero = A == 0
    if zero.any():
        r0 = row - 1
        K[zero, r0, :] = 0
        K[zero, r0, lay.C] = 1.0
        rhs[zero, r0] = 0
    if with_E:
        L1 = blocks[0][0]
        L2 = blocks[1][0]
        calA = _calA(A, B, L1, L2)
        d1 = B * B - L1 * L1
        d2 = B * B - L2 * L2
        w = d1 * L2 * (B * L2 - A2)
        for j in range(N - 1):
            K[:, row, lay.u(0, j)] += (L2 - L1) * calA
            K[:, row, lay.E + j] += d1 * d2
            K[:, row, lay.a0(j)] += w
            rhs[:, row] = w * h[:, j]
            row += 1
    assert row == n, (row, n)
    # equilibrate rows and columns before LU
    rs = np.max(np.abs(K), axis=2)
    rs[rs == 0] = 1.0
    K /= rs[:, :, None]
    rhs = rhs / rs
    cs = np.max(np.abs(K), axis=1)
    cs[cs == 0] = 1.0
    K /= cs[:, None, :]
    try:
        y = _refined_solve(K, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc))
    x = y / cs
    if not np.all(np.isfinite(x)):
        raise SingularSystem("non-finite amplitudes")
    return x, lay


def _unpack(x, lay, N, blocks, branch):
    M = x.shape[0]
    C = x[:, lay.C]
    D = x[:, lay.D]
    A0 = x[:, lay.A0:lay.A0 + N]
    Ajk = x[:, lay.Ajk:lay.Ajk + N * N].reshape(M, N, N)
    P = x[:, lay.P:lay.P + N * N].reshape(M, N, N)
    U = []
    R = []
    for b, (_, m, _) in enumerate(blocks):
        U.append(x[:, lay.U[b]:lay.U[b] + N * m].reshape(M, N, m))
        if lay.R[b] is not None:
            R.append(x[:, lay.R[b]:lay.R[b] + N * N * m].reshape(M, N, N, m))
        else:
            R.append(np.zeros((M, N, N, m), complex))
    E = x[:, lay.E:lay.E + N - 1] if lay.E is not None else None
    return C, D, A0, Ajk, P, U, R, E


def _as_batch(data, N, M):
    h = np.asarray(data.h_hat, complex)
    H = np.asarray(data.H_hat, complex)
    h = np.broadcast_to(h.reshape(-1, N), (M, N)) if h.ndim == 1 else h
    H = np.broadcast_to(H.reshape(-1, N, N), (M, N, N)) if H.ndim == 2 else H
    return np.ascontiguousarray(h), np.ascontiguousarray(H)


def assemble_batch(params, lam, xi_prime, data, force_regular=False):
    """Batched amplitude assembly over M modes (xi_prime: (M, N-1)).

    Modes flagged degenerate are routed to the confluent system; beta = 0
    uses the decoupled system.  Returns a dict branch -> (index array,
    AmplitudeSet)."""
    N = params.dim
    xi, lamv, A, B, L1, L2, deg = _mode_arrays(params, lam, xi_prime, force_regular)
    M = xi.shape[0]
    h, H = _as_batch(data, N, M)
    out = {}
    if params.beta == 0:
        idx = np.arange(M)
        out["decoupled"] = (idx, _assemble_group(params, lamv, xi, A, B, L1, L2, h, H, "decoupled"))
        return out
    for br, mask in (("regular", ~deg), ("degenerate", deg)):
        idx = np.nonzero(mask)[0]
        if idx.size:
            out[br] = (idx, _assemble_group(params, lamv[idx], xi[idx], A[idx], B[idx],
                                            L1[idx], L2[idx], h[idx], H[idx], br))
    return out


def _block_roots(params, lam, A, L1, branch):
    """z_j with L_j^2 = A^2 + z_j, matched to L1 (degenerate: confluent root,
    decoupled: z = lam)."""
    if branch == "decoupled":
        return lam, lam
    if branch == "degenerate":
        z = np.full(lam.shape, ss.confluent_root(params), complex)
        return z, z
    z1, z2 = ss.characteristic_roots(params, lam)
    z1, z2 = np.asarray(z1, complex), np.asarray(z2, complex)
    zl = L1 * L1 - A * A
    swap = np.abs(zl - z2) < np.abs(zl - z1)
    return np.where(swap, z2, z1), np.where(swap, z1, z2)


def _assemble_group(params, lam, xi, A, B, L1, L2, h, H, branch):
    N = params.dim
    z1, z2 = _block_roots(params, lam, A, L1, branch)
    if branch == "regular":
        blocks = [(L1, 1, z1), (L2, 1, z2)]
    elif branch == "degenerate":
        blocks = [(L1, 2, z1)]
    else:
        blocks = [(L2, 1, z2)]
    x, lay = _solve_system(params, lam, xi, A, B, blocks, h, H, branch)
    C, D, A0, Ajk, P, U, R, E = _unpack(x, lay, N, blocks, branch)
    M = lam.shape[0]
    if branch == "regular":
        A1, A2 = U[0][..., 0], U[1][..., 0]
        Q1, Q2 = R[0][..., 0], R[1][..., 0]
    elif branch == "degenerate":
        A1, A2 = U[0][..., 0], U[0][..., 1]
        Q1, Q2 = R[0][..., 0], R[0][..., 1]
    else:
        A1 = np.zeros((M, N), complex)
        A2 = U[0][..., 0]
        Q1 = np.zeros((M, N, N), complex)
        Q2 = R[0][..., 0]
    return AmplitudeSet(C, D, A0, A1, A2, Ajk, P, Q1, Q2, E, branch, lam, A, B, L1, L2, xi)


def _single(params, lam, xi_prime, data, force_regular):
    res = assemble_batch(params, lam, np.atleast_2d(np.asarray(xi_prime, float)),
                         data, force_regular=force_regular)
    (br, (idx, amps)), = res.items()
    return amps.mode(0)


def assemble_amplitudes(params, lam, xi_prime, data, force_regular=False):
    """Regular-branch amplitudes for one mode (beta = 0 gives the decoupled set)."""
    if params.beta != 0 and not force_regular and ss.is_degenerate(params, lam):
        raise DegenerateLambda("lambda within the degeneracy threshold of eta; "
                               "use assemble_amplitudes_degenerate")
    return _single(params, lam, xi_prime, data, force_regular)


def assemble_amplitudes_degenerate(params, xi_prime, data):
    """Tilde amplitudes at lam = eta (confluent rate L0 as a Jordan block)."""
    if params.beta == 0:
        raise BetaZero("no confluent point for beta = 0")
    if params.a <= 0:
        raise ValueError("the confluent branch needs a > 0")
    return _single(params, ss.eta_point(params), xi_prime, data, False)


# ------------------------------------------------------------ diagnostics

def closed_form_C(params, amps, data):
    """C from [hbar/(L2-L1) + H1] lam/(A calC), rearranged pieces only."""
    beta = params.beta
    lam, A, B, L1, L2, xi = amps.lam, amps.A, amps.B, amps.L1, amps.L2, amps.xi
    N = params.dim
    sz = mode_roots(params, lam, L1, L2)
    core = _calC_core(beta, A, B, L1, L2, *sz)
    ixh = np.sum(1j * xi * np.asarray(data.h_hat)[..., :N - 1], axis=-1)
    rhs = _hbar_coef_over_diff(beta, A, B, L1, L2, *sz) * ixh + _H1(A, B, xi, np.asarray(data.H_hat))
    return rhs / (A * core / lam)


def E_formula(params, amps, data, with_i=True):
    """E_j from the closed expression; with_i=False reproduces the printed
    H_jk sum without the factor i."""
    beta = params.beta
    N = params.dim
    lam, A, B, L1, L2, xi = amps.lam, amps.A, amps.B, amps.L1, amps.L2, amps.xi
    H = np.asarray(data.H_hat)
    ixi = 1j * xi
    out = np.zeros(N - 1, complex)
    for j in range(N - 1):
        s = 2 * ixi[j] * B / (beta ** 2 * lam) * amps.D
        s -= 2 * A / beta * (np.sum(ixi * amps.Ajk[j, :N - 1]) - B * amps.Ajk[j, N - 1])
        s += ixi[j] * (L1 * amps.A1[N - 1] / (B + L1) + L2 * amps.A2[N - 1] / (B + L2))
        hs = np.sum((ixi if with_i else xi) * H[j, :N - 1])
        s -= 2 / beta * (hs - B * H[j, N - 1])
        out[j] = s
    return out


def relation_residuals(params, amps, data):
    """Relative residuals of the printed coefficient identities (regular branch)."""
    beta, a = params.beta, params.a
    N = params.dim
    lam, A, B, L1, L2, xi = amps.lam, amps.A, amps.B, amps.L1, amps.L2, amps.xi
    h = np.asarray(data.h_hat)
    H = np.asarray(data.H_hat)
    ixi = 1j * xi
    gA = np.concatenate([ixi, [-A]])
    C, D = amps.C, amps.D
    res = {}

    def rel(lhs, rhs):
        lhs = np.asarray(lhs); rhs = np.asarray(rhs)
        sc = max(np.max(np.abs(lhs)), np.max(np.abs(rhs)), 1e-300)
        return float(np.max(np.abs(lhs - rhs)) / sc)

    scale = np.linalg.norm(h) + np.linalg.norm(H)
    res["A0"] = rel(amps.A0, -gA * C / lam)
    res["Ajk"] = rel(amps.Ajk, -beta * np.outer(gA, gA) * C / (lam * (lam + a)))
    ixh = np.sum(ixi * h[:N - 1])
    res["A1_N"] = rel(amps.A1[N - 1] * (L2 - L1), -(A / lam) * (L2 - A) * C - ixh)
    res["A2_N"] = rel(amps.A2[N - 1] * (L2 - L1), (A / lam) * (L1 - A) * C + ixh)
    calA = _calA(A, B, L1, L2, *mode_roots(params, lam, L1, L2))
    d1, d2 = B * B - L1 * L1, B * B - L2 * L2
    E = amps.E
    lhs1 = (L2 - L1) * calA * amps.A1[:N - 1]
    rhs1 = -((d2 * E - L2 * (B * L2 - A * A) * (h[:N - 1] - amps.A0[:N - 1])) * d1)
    res["A1_k"] = rel(lhs1, rhs1) if N > 1 else 0.0
    lhs2 = (L2 - L1) * calA * amps.A2[:N - 1]
    rhs2 = (d1 * E - L1 * (B * L1 - A * A) * (h[:N - 1] - amps.A0[:N - 1])) * d2
    res["A2_k"] = rel(lhs2, rhs2)
    for name, Qx, Ax, L, d in (("Q1", amps.Q1, amps.A1, L1, d1), ("Q2", amps.Q2, amps.A2, L2, d2)):
        g = np.concatenate([ixi, [-L]])
        pred = beta * (np.outer(g, Ax) + np.outer(Ax, g)) / (2 * d)
        res[name] = rel(Qx, pred)
    res["P"] = rel(amps.P, -(A * amps.Ajk + L1 * amps.Q1 + L2 * amps.Q2 + H) / B)
    res["D"] = rel(D, beta * lam / B * (np.sum(ixi * amps.P[N - 1, :N - 1]) - B * amps.P[N - 1, N - 1]))
    if A > 0:
        res["C_closed"] = rel(C, closed_form_C(params, amps, data))
    res["E_with_i"] = rel(E, E_formula(params, amps, data, True))
    res["E_printed"] = rel(E, E_formula(params, amps, data, False))
    res["trace_Ajk"] = float(abs(np.trace(amps.Ajk)) / max(np.max(np.abs(amps.Ajk)), 1e-300))
    for nm in ("Ajk", "P", "Q1", "Q2"):
        Mx = getattr(amps, nm)
        res["sym_" + nm] = float(np.max(np.abs(Mx - Mx.T)) / max(np.max(np.abs(Mx)), 1e-300))
    res["_scale"] = scale
    return res


def tilde_relation_residuals(params, amps, data):
    """Residuals of the printed confluent-point identities."""
    beta = params.beta
    N = params.dim
    eta = ss.eta_point(params)
    A, B, L0, xi = amps.A, amps.B, amps.L1, amps.xi
    h = np.asarray(data.h_hat)
    ixi = 1j * xi
    Ct = amps.C
    At1, At2 = amps.A1, amps.A2
    res = {}

    def rel(lhs, rhs):
        sc = max(np.max(np.abs(lhs)), np.max(np.abs(rhs)), 1e-300)
        return float(np.max(np.abs(np.asarray(lhs) - np.asarray(rhs))) / sc)

    pred1 = np.concatenate([h[:N - 1] + ixi * Ct / eta, [-A * Ct / eta]])
    res["At1"] = rel(At1, pred1)
    # x e^{-L0 x} carries the coefficient of -M(L2, L1, x) in the limit
    res["At2_N"] = rel(At2[N - 1], -A * (L0 - A) / eta * Ct - np.sum(ixi * h[:N - 1]))
    d0 = B * B - L0 * L0
    g = np.concatenate([ixi, [-L0]])
    Qt2 = beta * (np.outer(g, At2) + np.outer(At2, g)) / (2 * d0)
    res["Qt2"] = rel(amps.Q2, Qt2)
    # Qt1 (first-order corrections in At2)
    Qt1 = np.zeros((N, N), complex)
    for j in range(N - 1):
        for k in range(N - 1):
            Qt1[j, k] = (beta * (ixi[k] * At1[j] + ixi[j] * At1[k]) / (2 * d0)
                         - beta * L0 * (ixi[k] * At2[j] + ixi[j] * At2[k]) / d0 ** 2)
    for k in range(N - 1):
        v = (beta * (ixi[k] * At1[N - 1] - L0 * At1[k]) / (2 * d0)
             + beta * ((B * B + L0 * L0) * At2[k] - 2 * ixi[k] * L0 * At2[N - 1]) / (2 * d0 ** 2))
        Qt1[N - 1, k] = Qt1[k, N - 1] = v
    Qt1[N - 1, N - 1] = (-beta * L0 * At1[N - 1] / d0
                         + beta * (B * B + L0 * L0) * At2[N - 1] / d0 ** 2)
    res["Qt1"] = rel(amps.Q1, Qt1)
    # C tilde from the rearranged calC at eta
    if A > 0:
        sz = mode_roots(params, eta, L0, L0)
        core = _calC_core(beta, A, B, L0, L0, *sz)
        ixh = np.sum(ixi * h[:N - 1])
        rhs = _hbar_coef_over_diff(beta, A, B, L0, L0, *sz) * ixh + _H1(A, B, xi, np.asarray(data.H_hat))
        res["C_closed"] = rel(Ct, rhs / (A * core / eta))
    # At2_k from E tilde; the limit of L2 A2_N/(B+L2) - ... leaves the At2_N term
    calAt = 2 * B ** 3 * L0 - A * A * B * B - A * A * L0 * L0
    Et = np.zeros(N - 1, complex)
    H = np.asarray(data.H_hat)
    for k in range(N - 1):
        Et[k] = (2 * ixi[k] * B / (beta ** 2 * eta) * amps.D
                 - 2 * A / beta * (np.sum(ixi * amps.Ajk[k, :N - 1]) - B * amps.Ajk[k, N - 1])
                 + ixi[k] * L0 * At1[N - 1] / (B + L0)
                 - ixi[k] * B * At2[N - 1] / (B + L0) ** 2
                 - 2 / beta * (np.sum(ixi * H[k, :N - 1]) - B * H[k, N - 1]))
    pred = -(d0 * (d0 * Et - L0 * (B * L0 - A * A) * (h[:N - 1] - amps.A0[:N - 1]))) / calAt
    res["At2_k"] = rel(At2[:N - 1], pred)
    return res


def det_crosscheck(params, lam, xi_prime):
    """Determinant of the (2N-1)x(2N-1) reduced matrix vs its product formula."""
    N = params.dim
    beta = params.beta
    xi, lam_, A, B, L1, L2, _ = _mode_arrays(params, lam, xi_prime, force_regular=True)
    lam_, A, B, L1, L2, xi = lam_[0], A[0], B[0], L1[0], L2[0], xi[0]
    a1 = lam_ * beta ** 2 * L1 * (A * A - B * L1) / (2 * B * (B * B - L1 * L1))
    a2 = lam_ * beta ** 2 * L2 * (A * A - B * L2) / (2 * B * (B * B - L2 * L2))
    aC = A * beta ** 2 / B ** 2 * (
        A * (B - A) ** 2 / (B * B - A * A)
        + L2 * (A * A + L2 * L2 - 3 * B * L2 + B * B) * (L1 - A) / (2 * (B * B - L2 * L2) * (L2 - L1))
        - L1 * (A * A + L1 * L1 - 3 * B * L1 + B * B) * (L2 - A) / (2 * (B * B - L1 * L1) * (L2 - L1)))
    Lam = L1 * A * (L2 - A) / (lam_ * (L2 - L1))
    n1 = N - 1
    Mx = np.zeros((2 * n1 + 1, 2 * n1 + 1), complex)
    Mx[:n1, :n1] = a1 * np.eye(n1)
    Mx[:n1, n1:2 * n1] = a2 * np.eye(n1)
    Mx[:n1, -1] = 1j * aC * xi
    Mx[n1, :n1] = 1j * xi
    Mx[n1, -1] = Lam
    Mx[n1 + 1:, :n1] = np.eye(n1)
    Mx[n1 + 1:, n1:2 * n1] = np.eye(n1)
    Mx[n1 + 1:, -1] = -1j * xi / lam_
    det_num = np.linalg.det(Mx)
    det_formula = (-1) ** (N - 1) * (a1 - a2) ** (N - 2) * (A * A * (a2 / lam_ + aC) + Lam * (a1 - a2))
    bracket = A * A * (a2 / lam_ + aC) + Lam * (a1 - a2)
    bracket_calC = -beta * A / B * _calC_core(beta, A, B, L1, L2, *mode_roots(params, lam_, L1, L2))
    return {"det_numeric": det_num, "det_formula": det_formula,
            "bracket": bracket, "bracket_from_calC": bracket_calC}


def eval_E_decomposition(params, lam, xi_prime):
    """Coefficients of E_k = E_k^h i xi'.h' + sum_{jl} E_k^{H_jl} H_jl.

    Returns (E_h (N-1,), E_H (N-1, N, N), calE_h, B_script); the H
    coefficients are returned against the full matrix H with the (j,N) and
    (N,j) contributions merged onto the (j,N) slot."""
    if params.beta == 0:
        raise BetaZero("E decomposition needs beta != 0")
    _check_not_degenerate(params, lam)
    N = params.dim
    beta = params.beta
    xi, lam_, A, B, L1, L2, _ = _mode_arrays(params, lam, xi_prime, force_regular=True)
    lam_, A, B, L1, L2, xi = lam_[0], A[0], B[0], L1[0], L2[0], xi[0]
    ixi = 1j * xi
    sz = mode_roots(params, lam_, L1, L2)
    calC = _calC_core(beta, A, B, L1, L2, *sz) / lam_
    calE = _hbar_coef_over_diff(beta, A, B, L1, L2, *sz)
    Bs = _B_script(A, B, L1, L2)
    den12 = (B + L1) * (B + L2)
    rest = (-2 * (B * B * (L1 + L2) - A * A * B + L1 * L2 * B) / ((B * B - A * A) * den12)
            + B / den12)
    Eh = ixi * (calE / (lam_ * calC) * Bs + rest)
    EH = np.zeros((N - 1, N, N), complex)
    for k in range(N - 1):
        EH[k, N - 1, N - 1] = ixi[k] * Bs / (lam_ * calC) * A * A + 2 * ixi[k] * B * B / (beta * (B * B - A * A))
        for j in range(N - 1):
            EH[k, j, N - 1] = (-(B * B + A * A) * ixi[k] * ixi[j] * Bs / (B * lam_ * calC)
                               - 4 * ixi[j] * ixi[k] * B / (beta * (B * B - A * A))
                               + (2 * B / beta if j == k else 0.0))
            for l in range(N - 1):
                EH[k, j, l] = (ixi[j] * ixi[k] * ixi[l] * Bs / (lam_ * calC)
                               + 2 * ixi[j] * ixi[k] * ixi[l] / (beta * (B * B - A * A))
                               - (2 / beta * ixi[l] if j == k else 0.0))
    return Eh, EH, calE, Bs


def apply_E_decomposition(params, lam, xi_prime, data):
    N = params.dim
    Eh, EH, _, _ = eval_E_decomposition(params, lam, xi_prime)
    xi = np.atleast_1d(np.asarray(xi_prime, float))
    h = np.asarray(data.h_hat)
    H = np.asarray(data.H_hat)
    ixh = np.sum(1j * xi * h[:N - 1])
    return Eh * ixh + np.einsum("kjl,jl->k", EH, H)
