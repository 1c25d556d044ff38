"""Scalar spectral quantities of a tangential mode (lambda, xi').

Everything here is vectorised over lambda (and over the mode index when
xi' is given as an array of shape (M, N-1)).
"""
from dataclasses import dataclass, field, asdict
import math

import numpy as np

from .errors import BranchViolation, BetaZero

DEGENERACY_RTOL = 1e-4


@dataclass(frozen=True)
class ModelParams:
    a: float = 1.0
    beta: float = 1.0
    xi: float | None = None
    b: float = 0.0
    c: float = 0.0
    dim: int = 2
    theta: float = math.pi / 3
    r: float = 1.0
    gamma: float = 0.0
    p: float = 2.0
    q: float = 2.0

    @classmethod
    def from_xi(cls, xi, dim=2, **kw):
        return cls(beta=2.0 * xi / dim, xi=xi, dim=dim, **kw)

    @property
    def kappa(self):
        # 1 + beta^2/2 shows up everywhere
        return 1.0 + 0.5 * self.beta ** 2

    @property
    def coupled(self):
        return self.beta != 0.0

    def validate(self):
        errs = []
        if self.dim < 2:
            errs.append("dim must be >= 2")
        if not (0.0 < self.theta < math.pi / 2):
            errs.append("theta must lie in (0, pi/2)")
        if self.r <= 0:
            errs.append("r must be > 0")
        if self.a < 0:
            errs.append("a must be >= 0")
        if self.coupled:
            if math.tan(self.theta) < abs(self.beta) / math.sqrt(2) * (1 - 1e-12):
                errs.append("tan(theta) < |beta|/sqrt(2): sector too wide for this coupling")
        for name in ("p", "q"):
            if getattr(self, name) <= 1:
                errs.append(f"{name} must be > 1")
        if self.xi is not None and abs(self.beta - 2 * self.xi / self.dim) > 1e-14 * (1 + abs(self.beta)):
            errs.append("beta inconsistent with 2*xi/dim")
        return errs

    def to_dict(self):
        return asdict(self)


def theta0(params):
    return math.atan(abs(params.beta) / math.sqrt(2.0))


def char_poly(params, lam, z):
    """L(z) = (lam - z)(lam + a - z) + beta^2/2 (z^2 - a z)."""
    a, b2 = params.a, 0.5 * params.beta ** 2
    return (lam - z) * (lam + a - z) + b2 * (z * z - a * z)


def characteristic_roots(params, lam):
    """Roots z1 (+ sign) and z2 (- sign) of L(z), principal square root.

    The root with the smaller numerator is recovered from the product
    z1 z2 = lam (lam + a) / kappa to avoid cancellation.
    """
    lam = np.asarray(lam, dtype=complex)
    a, k = params.a, params.kappa
    bq = 2.0 * lam + a * k
    s = np.sqrt(a * a * k * k - 2.0 * lam ** 2 * params.beta ** 2 + 0j)
    num_p = bq + s
    num_m = bq - s
    prod = lam * (lam + a) / k
    zp = num_p / (2 * k)
    zm = num_m / (2 * k)
    with np.errstate(divide="ignore", invalid="ignore"):
        use_p = np.abs(num_p) >= np.abs(num_m)
        zm_alt = prod / zp
        zp_alt = prod / zm
    zm = np.where(use_p & (np.abs(num_p) > 0), zm_alt, zm)
    zp = np.where(~use_p & (np.abs(num_m) > 0), zp_alt, zp)
    if zp.ndim == 0:
        return complex(zp), complex(zm)
    return zp, zm


def eta_point(params):
    if params.beta == 0:
        raise BetaZero("eta does not exist for beta = 0")
    return params.a * params.kappa / (math.sqrt(2.0) * abs(params.beta))


def confluent_root(params):
    """Double root z(eta) = a/2 + eta/kappa."""
    return 0.5 * params.a + eta_point(params) / params.kappa


def limit_roots(params):
    """|lambda| -> infinity limits (z_minus, z_plus) of z_j/(lambda+a)."""
    k, bb = params.kappa, abs(params.beta)
    zm = (2 - 1j * bb * math.sqrt(2)) / (2 * k)
    zp = (2 + 1j * bb * math.sqrt(2)) / (2 * k)
    return zm, zp


def normalized_roots(params, lam):
    lam = np.asarray(lam, dtype=complex)
    z1, z2 = characteristic_roots(params, lam)
    zm, zp = limit_roots(params)
    return z1 / (lam + params.a), z2 / (lam + params.a), zm, zp


def _check_re(name, val, tol=0.0):
    v = np.asarray(val)
    bad = ~(v.real > tol)
    if np.any(bad):
        idx = np.argwhere(bad)
        first = tuple(idx[0]) if idx.size else ()
        raise BranchViolation(f"Re({name}) <= 0 at index {first}: {v[first] if first else v}")


def wave_numbers(params, lam, xi_prime, check=True, roots=None):
    """A = |xi'|, B_a = sqrt(lam+a+A^2), L_j = sqrt(A^2+z_j).

    xi_prime may be a vector (N-1,) or a stack (M, N-1); lam broadcasts
    against the leading shape.
    """
    xi = np.asarray(xi_prime, dtype=float)
    if xi.ndim == 0:
        xi = xi.reshape(1)
    A = np.sqrt(np.sum(xi * xi, axis=-1))
    lam = np.asarray(lam, dtype=complex)
    if roots is None:
        z1, z2 = characteristic_roots(params, lam)
    else:
        z1, z2 = roots
    A2 = A * A
    B = np.sqrt(lam + params.a + A2)
    L1 = np.sqrt(A2 + z1)
    L2 = np.sqrt(A2 + z2)
    if check:
        _check_re("B_a", B)
        _check_re("L1", L1)
        _check_re("L2", L2)
    return A, B, L1, L2


def _angle_distance(lam, theta, r):
    """Euclidean distance from lam to the boundary of Sigma_{theta,r}."""
    lam = np.asarray(lam, dtype=complex)
    phi = math.pi - theta
    out = np.full(lam.shape, np.inf)
    # two rays {t e^{+-i phi}: t >= r}
    for sgn in (1.0, -1.0):
        d = np.exp(1j * sgn * phi)
        t = np.maximum((lam * np.conj(d)).real, r)
        out = np.minimum(out, np.abs(lam - t * d))
    # arc |z| = r, |arg z| <= phi
    ang = np.angle(lam)
    on_arc = np.abs(ang) <= phi
    rad = np.abs(np.abs(lam) - r)
    ends = np.minimum(np.abs(lam - r * np.exp(1j * phi)), np.abs(lam - r * np.exp(-1j * phi)))
    out = np.minimum(out, np.where(on_arc, rad, ends))
    return out


def in_sector(lam, theta, r, closed=False):
    lam = np.asarray(lam, dtype=complex)
    phi = math.pi - theta
    ang = np.abs(np.angle(lam))
    mod = np.abs(lam)
    if closed:
        return (ang <= phi + 1e-14) & (mod >= r * (1 - 1e-14))
    return (ang < phi) & (mod > r)


def sector_admissibility(params, lam):
    lam = np.asarray(lam, dtype=complex)
    inside = in_sector(lam, params.theta, params.r)
    dist = _angle_distance(lam, params.theta, params.r)
    rep = {
        "inside": inside if inside.ndim else bool(inside),
        "distance": dist if dist.ndim else float(dist),
        "theta0": theta0(params),
        "theta_ok": math.tan(params.theta) >= abs(params.beta) / math.sqrt(2) * (1 - 1e-12),
    }
    return rep


def is_degenerate(params, lam):
    if params.beta == 0:
        return np.zeros(np.shape(lam), dtype=bool) if np.ndim(lam) else False
    eta = eta_point(params)
    d = np.abs(np.asarray(lam, dtype=complex) - eta) <= DEGENERACY_RTOL * (1 + eta)
    return d if np.ndim(d) else bool(d)


@dataclass
class ModeContext:
    lam: complex
    xi_prime: np.ndarray
    A: float
    B: complex
    z1: complex
    z2: complex
    L1: complex
    L2: complex
    eta: float | None
    degenerate: bool
    branch: str = field(default="regular")  # regular | degenerate | decoupled

    @property
    def decay_rate(self):
        rates = [self.B.real, self.L1.real, self.L2.real]
        if self.A > 0:
            rates.append(self.A)
        return min(rates)

    def x_max(self, factor=40.0):
        return factor / self.decay_rate


def mode_context(params, lam, xi_prime, force_regular=False):
    """Scalar context for a single mode.  At the confluent point (or within
    the degeneracy threshold) the double root replaces z1, z2."""
    lam = complex(lam)
    xi = np.atleast_1d(np.asarray(xi_prime, dtype=float))
    if params.beta == 0:
        z1, z2 = characteristic_roots(params, lam)
        A, B, L1, L2 = wave_numbers(params, lam, xi, roots=(z1, z2))
        return ModeContext(lam, xi, float(A), complex(B), z1, z2, complex(L1), complex(L2),
                           None, False, "decoupled")
    eta = eta_point(params)
    deg = (not force_regular) and is_degenerate(params, lam)
    if deg:
        lam = complex(eta)
        z = confluent_root(params)
        z1 = z2 = complex(z)
    else:
        z1, z2 = characteristic_roots(params, lam)
    A, B, L1, L2 = wave_numbers(params, lam, xi, roots=(z1, z2))
    return ModeContext(lam, xi, float(A), complex(B), z1, z2, complex(L1), complex(L2),
                       eta, bool(deg), "degenerate" if deg else "regular")
