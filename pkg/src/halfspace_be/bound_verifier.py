"""Finite-grid checks of the scalar estimates behind the resolvent bounds:
non-vanishing of F_a / G_a, Laurent tails, multiplier-class derivative
bounds, root bounds and empirical resolvent ratios.

These are numerical witnesses on grids, not certificates.  R-boundedness
itself is not tested; uniform scalar bounds are the surrogate.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
import csv
import json
import math

import numpy as np

from . import spectral_symbols as ss
from . import coefficient_assembly as ca
from . import profile_evaluator as pe
from .errors import BetaZero, FloorViolated, UnstableConstant

LAM_MAX = 1e6
XI_MAX = 1e3
T_MAX = 1e3
STABLE_RTOL = 0.2
UNSTABLE_FACTOR = 2.0
FD_NOISE = 1e-5   # eps (w/h)^2 (tau/h_tau) for O(1) symbols


# ------------------------------------------------------------------ reports

def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, (complex, np.complexfloating)):
        return [float(v.real), float(v.imag)]
    if isinstance(v, np.ndarray):
        return [_jsonable(x) for x in v.tolist()]
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


@dataclass
class VerificationReport:
    kind: str
    params: dict
    level: int
    values: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)
    stable: bool | None = None
    notes: list = field(default_factory=list)

    def to_dict(self):
        return _jsonable(asdict(self))

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), sort_keys=True, **kw)


# --------------------------------------------------------------------- grid

@dataclass
class ScanGrid:
    lam: np.ndarray          # complex samples in the closed sector
    A: np.ndarray            # |xi'| samples (A = 0 included)
    t_abs: np.ndarray        # |t| samples for the normalized scans
    directions: np.ndarray   # unit vectors in R^2 for derivative checks
    level: int
    seed: int
    lam_max: float
    xi_max: float

    @property
    def size(self):
        return self.lam.size * self.t_abs.size


def _eta_ray(params, n):
    """lam -> eta along three rays (plus eta itself)."""
    if params.beta == 0:
        return np.zeros(0, complex)
    eta = ss.eta_point(params)
    eps = np.logspace(-4, -1, n)
    pts = [eta + 0j]
    for phi in (0.0, math.pi / 4, math.pi / 2):
        pts.extend(eta * (1 + eps * np.exp(1j * phi)))
        pts.extend(eta * (1 + eps * np.exp(-1j * phi)))
    pts = np.array(pts)
    return pts[ss.in_sector(pts, params.theta, params.r, closed=True)]


def make_grid(params, level=2, lam_max=LAM_MAX, xi_max=XI_MAX, t_max=T_MAX, seed=0,
              jitter=0.0, eta_ray=True):
    """Log-radial x angular lambda grid over the closed sector, |t| grid in
    [0, t_max], A grid in [0, xi_max].  Level l doubles the resolution of
    level l-1; with jitter > 0 radii/angles get a seeded perturbation."""
    n_rad = 6 * 2 ** level
    n_ang = 4 * 2 ** level + 1
    rng = np.random.default_rng(seed)
    rad = np.logspace(math.log10(params.r), math.log10(lam_max), n_rad)
    phi_max = math.pi - params.theta
    ang = np.linspace(-phi_max, phi_max, n_ang)
    if jitter > 0:
        rad = rad * np.exp(jitter * rng.uniform(-1, 1, n_rad) * math.log(lam_max / params.r) / n_rad)
        rad = np.clip(rad, params.r, lam_max)
        ang = np.clip(ang + jitter * rng.uniform(-1, 1, n_ang) * phi_max / n_ang, -phi_max, phi_max)
    lam = (rad[:, None] * np.exp(1j * ang[None, :])).ravel()
    if eta_ray:
        lam = np.concatenate([lam, _eta_ray(params, 2 + level)])
    n_t = 6 * 2 ** level
    t_abs = np.concatenate([[0.0], np.logspace(-3, math.log10(t_max), n_t)])
    A = np.concatenate([[0.0], np.logspace(-3, math.log10(xi_max), n_t)])
    phis = np.linspace(0.3, 0.3 + math.pi / 2, 1 + level)
    dirs = np.stack([np.cos(phis), np.sin(phis)], axis=-1)
    return ScanGrid(lam, A, t_abs, dirs, level, seed, lam_max, xi_max)


CHUNK = 1024


def _chunks(n, size=CHUNK):
    return [(lo, min(lo + size, n)) for lo in range(0, n, size)]


def _pmap(fn, n, threads=1, size=CHUNK):
    """Apply fn(lo, hi) over fixed index chunks; results in chunk order, so
    the reduction does not depend on the thread count."""
    parts = _chunks(n, size)
    if threads <= 1 or len(parts) <= 1:
        return [fn(lo, hi) for lo, hi in parts]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(lambda p: fn(*p), parts))


def _roots_tilde(params, lam):
    """z_j/(lam+a), with the confluent value exactly at eta."""
    lam = np.asarray(lam, complex)
    z1, z2 = ss.characteristic_roots(params, lam)
    z1, z2 = np.array(z1, complex, ndmin=1), np.array(z2, complex, ndmin=1)
    if params.beta != 0:
        at = lam.ravel() == ss.eta_point(params)
        z1[at] = z2[at] = ss.confluent_root(params)
    s = lam + params.a
    return z1.reshape(lam.shape) / s, z2.reshape(lam.shape) / s


def _t_complex(params, lam, t_abs):
    """Physical t = A/sqrt(lam+a) has arg -arg(lam+a)/2."""
    ph = np.exp(-0.5j * np.angle(lam + params.a))
    return t_abs * ph


# --------------------------------------------------------------- nonvanish

def scan_nonvanishing(params, grid, floor=1e-6, threads=1, raise_on_floor=True):
    """min |F_a| and min |G_a|/(1+|t|^2) over (lambda, |t|), plus the tilde
    value of calC at eta over the A grid."""
    if params.beta == 0:
        raise BetaZero("F_a is defined for beta != 0 only")
    lam = grid.lam
    zt1, zt2 = _roots_tilde(params, lam)

    def work(lo, hi):
        L = lam[lo:hi, None]
        t = _t_complex(params, L, grid.t_abs[None, :])
        zt = (zt1[lo:hi, None], zt2[lo:hi, None])
        F = np.abs(ca.F_a_from_t(params, L, t, zt))
        G = np.abs(ca.G_a_from_t(params, L, t, zt)) / (1 + grid.t_abs[None, :] ** 2)
        iF = np.unravel_index(np.argmin(F), F.shape)
        iG = np.unravel_index(np.argmin(G), G.shape)
        return (F[iF], lo + iF[0], iF[1]), (G[iG], lo + iG[0], iG[1])

    res = _pmap(work, lam.size, threads)
    bF = min((r[0] for r in res), key=lambda v: v[0])
    bG = min((r[1] for r in res), key=lambda v: v[0])
    vals = {
        "min_abs_F_a": float(bF[0]),
        "argmin_F_a": {"lambda": complex(lam[bF[1]]), "t_abs": float(grid.t_abs[bF[2]])},
        "min_G_a_normalized": float(bG[0]),
        "argmin_G_a": {"lambda": complex(lam[bG[1]]), "t_abs": float(grid.t_abs[bG[2]])},
        "n_points": int(grid.size),
        "floor": floor,
    }
    xi = grid.A[:, None]
    Ct = np.abs(ca.eval_calC_degenerate(params, xi))
    vals["min_abs_calC_tilde"] = float(Ct.min())
    vals["argmin_calC_tilde_A"] = float(grid.A[int(np.argmin(Ct))])
    rep = VerificationReport("nonvanishing", params.to_dict(), grid.level, vals)
    for key, arg in (("min_abs_F_a", "argmin_F_a"), ("min_G_a_normalized", "argmin_G_a")):
        if not vals[key] > floor:
            rep.notes.append(f"{key} below floor")
            if raise_on_floor:
                raise FloorViolated(f"{key} = {vals[key]:.3e} <= {floor:g}", vals[arg])
    return rep


def nonvanishing_refinement(params, level=2, floor=1e-6, threads=1, **kw):
    """Run the scan at level and level+1; stable if both minima move < 20%."""
    r0 = scan_nonvanishing(params, make_grid(params, level, **kw), floor, threads)
    r1 = scan_nonvanishing(params, make_grid(params, level + 1, **kw), floor, threads)
    ch = {}
    for key in ("min_abs_F_a", "min_G_a_normalized", "min_abs_calC_tilde"):
        ch[key] = abs(r1.values[key] - r0.values[key]) / r0.values[key]
    rep = VerificationReport("nonvanishing_refinement", params.to_dict(), level,
                             {"coarse": r0.values, "fine": r1.values, "relative_change": ch})
    rep.stable = all(v < STABLE_RTOL for v in ch.values())
    return rep


# ------------------------------------------------------------ Laurent tails

def laurent_tail_check(params, t_values, grid=None):
    """sup over the lambda grid of |F_a - F_tail| and |G_a/(2t^2) - 1| per
    |t|, with a least-squares decay exponent in log-log."""
    t_values = np.asarray(t_values, float)
    if params.beta == 0:
        rep = VerificationReport("laurent_tail", params.to_dict(), -1,
                                 {"skipped": "BetaZero"})
        rep.notes.append("beta = 0: 1 - zt2 = 0, tail undefined; decoupled path")
        return rep
    if np.any(np.diff(t_values) <= 0):
        raise ValueError("t_values must be increasing")
    if grid is None:
        grid = make_grid(params, 1, eta_ray=True)
    lam = grid.lam[:, None]
    zt1, zt2 = _roots_tilde(params, grid.lam)
    zt = (zt1[:, None], zt2[:, None])
    t = _t_complex(params, lam, t_values[None, :])
    F = ca.F_a_from_t(params, lam, t, zt)
    G = ca.G_a_from_t(params, lam, t, zt)
    dF = np.abs(F - ca.F_tail(*zt)).max(axis=0)
    dG = np.abs(G / (2 * t * t) - 1).max(axis=0)
    slope = float(np.polyfit(np.log(t_values), np.log(dF), 1)[0]) if t_values.size > 1 else float("nan")
    slopeG = float(np.polyfit(np.log(t_values), np.log(dG), 1)[0]) if t_values.size > 1 else float("nan")
    rows = [{"t": float(tv), "sup_F_dev": float(a), "sup_G_dev": float(b)}
            for tv, a, b in zip(t_values, dF, dG)]
    vals = {"decay_exponent_F": slope, "decay_exponent_G": slopeG,
            "monotone_F": bool(np.all(np.diff(dF) < 0)),
            "decades": float(np.log10(t_values[-1] / t_values[0])) if t_values.size else 0.0}
    return VerificationReport("laurent_tail", params.to_dict(), grid.level, vals, rows)


# -------------------------------------------------------------- multipliers

@dataclass
class MultiplierCheckSpec:
    symbol_id: str
    order: float
    type: int
    fn: object = field(repr=False, default=None)
    max_alpha: int = 2
    needs_beta: bool = False


class _Ctx:
    __slots__ = ("lam", "s", "A", "B", "z1", "z2", "L1", "L2", "beta")

    def __init__(self, params, lam, xi, ref=None):
        lam = np.asarray(lam, complex)
        z1, z2 = ss.characteristic_roots(params, lam)
        z1, z2 = np.asarray(z1), np.asarray(z2)
        if ref is not None:
            r1, r2 = ref
            swap = np.abs(z1 - r1) + np.abs(z2 - r2) > np.abs(z1 - r2) + np.abs(z2 - r1)
            z1, z2 = np.where(swap, z2, z1), np.where(swap, z1, z2)
        A = np.sqrt(np.sum(xi * xi, axis=-1))
        self.lam, self.s, self.A, self.z1, self.z2 = lam, lam + params.a, A, z1, z2
        self.B = np.sqrt(self.s + A * A)
        self.L1 = np.sqrt(A * A + z1)
        self.L2 = np.sqrt(A * A + z2)
        self.beta = params.beta

    def L(self, j):
        return self.L1 if j == 1 else self.L2

    def z(self, j):
        return self.z1 if j == 1 else self.z2


def _LmA(c, j):   # L_j - A
    return c.z(j) / (c.L(j) + c.A)


def _LmB(c, j):   # L_j - B_a
    return (c.z(j) - c.s) / (c.L(j) + c.B)


def _BmA(c):
    return c.s / (c.B + c.A)


def _calC(c):
    return ca._calC_core(c.beta, c.A, c.B, c.L1, c.L2, c.s, c.z1, c.z2) / c.lam


def _calA(c):
    return ca._calA(c.A, c.B, c.L1, c.L2, c.s, c.z1, c.z2)


def symbol_registry(params):
    """Registered symbols with their claimed (order, type)."""
    R = []

    def add(sid, s, ty, fn, beta=False):
        R.append(MultiplierCheckSpec(sid, s, ty, fn, needs_beta=beta))

    for p in (1, -1, 2, -2):
        add(f"B_a^{p}", p, 1, lambda c, p=p: c.B ** p)
    for p in (1, 2):
        add(f"A^{p}", p, 2, lambda c, p=p: c.A ** p + 0j)
    for j in (1, 2):
        for p in (1, -1):
            add(f"L_{j}^{p}", p, 1, lambda c, j=j, p=p: c.L(j) ** p)
    add("(A+B_a)^-1", -1, 2, lambda c: 1 / (c.A + c.B))
    for j in (1, 2):
        add(f"(L_{j}+A)^-1", -1, 2, lambda c, j=j: 1 / (c.L(j) + c.A))
        add(f"(L_{j}+B_a)^-1", -1, 1, lambda c, j=j: 1 / (c.L(j) + c.B))
        for k in (1, 2):
            # contains -A, so only type 2 can hold (D^2 A ~ 1/A)
            add(f"(L_{j}-A)/(B_a^2-L_{k}^2)", -1, 2, lambda c, j=j, k=k: _LmA(c, j) / (c.s - c.z(k)))
            add(f"(L_{j}-B_a)/(B_a^2-L_{k}^2)", -1, 1, lambda c, j=j, k=k: _LmB(c, j) / (c.s - c.z(k)))
        add(f"(L_{j}-A)/(B_a^2-A^2)", -1, 2, lambda c, j=j: _LmA(c, j) / c.s)
        add(f"(L_{j}-B_a)/(B_a^2-A^2)", -1, 1, lambda c, j=j: _LmB(c, j) / c.s)
        add(f"(B_a-A)/(B_a^2-L_{j}^2)", -1, 2, lambda c, j=j: _BmA(c) / (c.s - c.z(j)))
        add(f"(B_a-L_{j})/sqrt(lam+a)", 0, 1, lambda c, j=j: -_LmB(c, j) / np.sqrt(c.s))
        # grows like A/sqrt(|lam|): order 1, not 0
        add(f"((B_a-L_{j})/sqrt(lam+a))^-1", 1, 1, lambda c, j=j: -np.sqrt(c.s) / _LmB(c, j))
        add(f"(L_{j}-A)/sqrt(lam+a)", 0, 2, lambda c, j=j: _LmA(c, j) / np.sqrt(c.s))
    add("(L_1-L_2)/sqrt(lam+a)", 0, 1, lambda c: (c.z1 - c.z2) / ((c.L1 + c.L2) * np.sqrt(c.s)))
    add("(B_a-A)/sqrt(lam+a)", 0, 2, lambda c: _BmA(c) / np.sqrt(c.s))
    add("(lam+a)/lam", 0, 1, lambda c: c.s / c.lam)
    add("lam/(lam+a)", 0, 1, lambda c: c.lam / c.s)
    add("calC", 0, 2, _calC, True)
    add("calC^-1", 0, 2, lambda c: 1 / _calC(c), True)
    add("(lam+a)/calA", -2, 1, lambda c: c.s / _calA(c))
    add("calA/((lam+a)B_a^2)", 0, 1, lambda c: _calA(c) / (c.s * c.B ** 2))
    add("E_h", 1, 2, lambda c: ca._hbar_coef_over_diff(c.beta, c.A, c.B, c.L1, c.L2, c.s, c.z1, c.z2), True)
    add("B_script", 0, 2, lambda c: ca._B_script(c.A, c.B, c.L1, c.L2), True)
    return [m for m in R if params.beta != 0 or not m.needs_beta]


_D1 = ((-2, 1 / 12), (-1, -8 / 12), (1, 8 / 12), (2, -1 / 12))
_D2 = ((-2, -1 / 12), (-1, 16 / 12), (0, -30 / 12), (1, 16 / 12), (2, -1 / 12))
ALPHAS = ((0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2))


def _stencil(alpha, ell):
    st = [((0, 0, 0), 1.0)]
    for ax, order in enumerate(tuple(alpha) + (ell,)):
        if order == 0:
            continue
        base = _D1 if order == 1 else _D2
        st = [(tuple(o + (d if i == ax else 0) for i, o in enumerate(off)), w * bw)
              for off, w in st for d, bw in base]
    return st


def multiplier_grid(params, level=1, lam_max=LAM_MAX, xi_max=XI_MAX, a_min=1e-2, eta_gap=0.05):
    """(lam, xi) points for derivative checks; xi in R^2 so mixed
    derivatives exist.  Points with |lam - eta| < eta_gap (1+eta) are dropped:
    individual roots have a branch point there and a finite-difference stencil
    cannot straddle it."""
    n_rad = 12 * 2 ** level
    n_ang = 2 * 2 ** level + 1
    phi_max = math.pi - params.theta
    # radii clustered toward r: the worst constants sit at |lam| = O(1)
    u = np.linspace(0.0, 1.0, n_rad)
    rad = params.r * (lam_max / params.r) ** (u * u)
    ang = np.linspace(-phi_max, phi_max, n_ang)
    lam = (rad[:, None] * np.exp(1j * ang[None, :])).ravel()
    if params.beta != 0:
        eta = ss.eta_point(params)
        lam = lam[np.abs(lam - eta) >= eta_gap * (1 + eta)]
    A = np.logspace(math.log10(a_min), math.log10(xi_max), 16 * 2 ** level)
    phis = np.array([0.3, 1.1])
    dirs = np.stack([np.cos(phis), np.sin(phis)], axis=-1)
    xi = (A[:, None, None] * dirs[None, :, :]).reshape(-1, 2)
    L, X = np.meshgrid(np.arange(lam.size), np.arange(xi.shape[0]), indexing="ij")
    return lam[L.ravel()], xi[X.ravel()]


def _derivative_tables(params, specs, lam, xi, clamp):
    """For every (alpha, ell): array (n_specs, n_points) of D^alpha (tau d_tau)^ell m.

    h_xi = 1e-3 w with w = |lam|^(1/2) + 1 + |xi'|, the scale on which the
    symbols vary; clamp=True (type 2, singular at xi' = 0) also caps it at
    |xi'|/8 so the stencil stays away from the origin."""
    A = np.sqrt(np.sum(xi * xi, axis=-1))
    tau = lam.imag
    hx = 1e-3 * (np.abs(lam) ** 0.5 + 1 + A)
    if clamp:
        hx = np.minimum(hx, A / 8)
    ht = 1e-3 * (1 + np.abs(tau))
    c0 = _Ctx(params, lam, xi)
    ref = (c0.z1, c0.z2)
    cache = {}

    def values(off):
        if off not in cache:
            if off == (0, 0, 0):
                c = c0
            else:
                x = xi + np.stack([off[0] * hx, off[1] * hx], axis=-1)
                c = _Ctx(params, lam + 1j * off[2] * ht, x, ref)
            with np.errstate(all="ignore"):
                cache[off] = np.stack([np.broadcast_to(m.fn(c), lam.shape) for m in specs])
        return cache[off]

    out = {}
    for alpha in ALPHAS:
        for ell in (0, 1):
            acc = 0
            for off, w in _stencil(alpha, ell):
                acc = acc + w * values(off)
            scale = hx ** (-sum(alpha)) * (tau / ht) ** ell
            out[(alpha, ell)] = acc * scale
    return out, A


def _constants(params, specs, lam, xi, threads=1):
    groups = [(ty, [m for m in specs if m.type == ty]) for ty in (1, 2)]

    def work(lo, hi):
        res = {}
        for ty, group in groups:
            if not group:
                continue
            tabs, A = _derivative_tables(params, group, lam[lo:hi], xi[lo:hi], clamp=ty == 2)
            w0 = np.abs(lam[lo:hi]) ** 0.5 + 1 + A
            for (alpha, ell), D in tabs.items():
                na = sum(alpha)
                for i, m in enumerate(group):
                    if na > m.max_alpha:
                        continue
                    if ty == 1:
                        w = w0 ** (m.order - na)
                    else:
                        w = w0 ** m.order * A ** (-na)
                    r = np.abs(D[i]) / w
                    r = np.where(np.isfinite(r), r, np.inf)
                    k = int(np.argmax(r))
                    res[(m.symbol_id, alpha, ell)] = (float(r[k]), lo + k)
        return res

    parts = _pmap(work, lam.size, threads)
    best = {}
    for part in parts:
        for key, v in part.items():
            if key not in best or v[0] > best[key][0]:
                best[key] = v
    return best


def multiplier_class_check(params, specs=None, level=1, threads=1, raise_unstable=True, **grid_kw):
    """Worst constants sup |D^alpha (tau d_tau)^ell m| / w at level and
    level+1.  Rows carry the fine-level constant and the relative change."""
    if specs is None:
        specs = symbol_registry(params)
    elif isinstance(specs, MultiplierCheckSpec):
        specs = [specs]
    lam0, xi0 = multiplier_grid(params, level, **grid_kw)
    lam1, xi1 = multiplier_grid(params, level + 1, **grid_kw)
    c0 = _constants(params, specs, lam0, xi0, threads)
    c1 = _constants(params, specs, lam1, xi1, threads)
    rows = []
    bad = []
    for key in sorted(c0, key=lambda k: ([m.symbol_id for m in specs].index(k[0]), ALPHAS.index(k[1]), k[2])):
        sid, alpha, ell = key
        v0, _ = c0[key]
        v1, k1 = c1[key]
        if max(v0, v1) < FD_NOISE:
            change = 0.0    # identically zero up to difference noise
        else:
            change = abs(v1 - v0) / max(v0, 1e-300)
        finite = math.isfinite(v1)
        grew = (v1 > UNSTABLE_FACTOR * v0) or not finite
        if grew:
            bad.append(key)
        rows.append({"symbol_id": sid, "alpha": "".join(map(str, alpha)), "ell": ell,
                     "level": level + 1, "constant": v1, "coarse_constant": v0,
                     "relative_change": change, "stable": bool(finite and change < STABLE_RTOL),
                     "argmax_lambda_re": float(lam1[k1].real), "argmax_lambda_im": float(lam1[k1].imag),
                     "argmax_xi": float(np.linalg.norm(xi1[k1]))})
    rep = VerificationReport("multiplier_class", params.to_dict(), level, rows=rows)
    rep.values = {"n_symbols": len(specs), "n_points_coarse": int(lam0.size),
                  "n_points_fine": int(lam1.size), "n_unstable": len(bad),
                  "n_not_stable": sum(not r["stable"] for r in rows)}
    rep.stable = rep.values["n_not_stable"] == 0
    rep.notes.append("scalar bounds only; R-boundedness is not tested")
    if bad and raise_unstable:
        sid, alpha, ell = bad[0]
        raise UnstableConstant(f"{sid} alpha={alpha} ell={ell}: constant grew > {UNSTABLE_FACTOR}x under refinement")
    return rep


MULTIPLIER_CSV_COLUMNS = ("symbol_id", "alpha", "ell", "level", "constant",
                          "argmax_lambda_re", "argmax_lambda_im", "argmax_xi")


def write_multiplier_csv(report, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MULTIPLIER_CSV_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for row in report.rows:
            w.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k])
                        for k in MULTIPLIER_CSV_COLUMNS})


# -------------------------------------------------------------- root bounds

def _dz_dlam(params, lam, z):
    b2 = 0.5 * params.beta ** 2
    g = 2 * lam + params.a - 2 * z
    return g / (g - b2 * (2 * z - params.a))


def _root_bounds(params, grid):
    lam = grid.lam
    z1, z2 = ss.characteristic_roots(params, lam)
    zt1, zt2 = _roots_tilde(params, lam)
    s = lam + params.a
    tau = lam.imag
    absl = np.abs(lam)
    out = {}
    zt = np.abs(np.stack([zt1, zt2]))
    out["K_m"] = float(zt.min())
    out["K_M"] = float(zt.max())
    az = np.abs(np.stack([z1, z2])) / (absl + 1)
    out["C1_z"] = float(az.min())
    out["C2_z"] = float(az.max())
    aw = np.abs(np.stack([s - z1, s - z2])) / (absl + 1)
    out["C1_lam_a_minus_z"] = float(aw.min())
    out["C2_lam_a_minus_z"] = float(aw.max())
    alphas = [params.a] + ([ss.eta_point(params)] if params.beta != 0 else [])
    out["lam_plus_alpha_min"] = float(min((np.abs(lam + al) / (absl + al)).min() for al in alphas))
    with np.errstate(all="ignore"):
        td = [np.abs(tau * _dz_dlam(params, lam, z)) / absl for z in (z1, z2)]
    td = np.where(tau == 0, 0.0, np.stack(td))
    out["tau_dz_over_lam_max"] = float(np.nanmax(td))
    zz = np.concatenate([np.ravel(z1), np.ravel(z2)])
    out["z_on_negative_axis"] = int(np.sum((np.abs(zz.imag) <= 1e-14 * np.abs(zz)) & (zz.real <= 0)))
    A = grid.A
    _, B, L1, L2 = ss.wave_numbers(params, lam[:, None], A[None, :, None],
                                   roots=(z1[:, None], z2[:, None]))
    w = absl[:, None] ** 0.5 + 1 + A[None, :]
    out["c_ReL"] = float(min((L1.real / w).min(), (L2.real / w).min()))
    big = absl >= absl.max() * (1 - 1e-12)
    zm, zp = ss.limit_roots(params)
    out["large_lam_abs_zt"] = sorted([float(np.abs(zt1[big]).mean()), float(np.abs(zt2[big]).mean())])
    out["limit_abs_z_pm"] = [abs(zm), abs(zp)]
    return out


def root_bound_check(params, level=2, threads=1, **grid_kw):
    """Empirical K_m, K_M, c, C1, C2 at level and level+1."""
    r0 = _root_bounds(params, make_grid(params, level, **grid_kw))
    r1 = _root_bounds(params, make_grid(params, level + 1, **grid_kw))
    change = {}
    for k, v in r0.items():
        if isinstance(v, float) and v != 0:
            change[k] = abs(r1[k] - v) / abs(v)
    rep = VerificationReport("root_bounds", params.to_dict(), level,
                             {"coarse": r0, "fine": r1, "relative_change": change})
    pos = ("K_m", "C1_z", "C1_lam_a_minus_z", "lam_plus_alpha_min", "c_ReL")
    rep.stable = (all(r1[k] > 0 for k in pos) and r1["z_on_negative_axis"] == 0
                  and all(v < STABLE_RTOL for v in change.values()))
    return rep


# ----------------------------------------------------------- residual suite

def sector_samples(params, n, rng, lam_max=1e4, t_max=10.0, dim=None):
    """n random (lam, xi') pairs: |lam| log-uniform in [r, lam_max], Arg lam
    uniform in the open sector, |xi'| log-uniform in [1e-2, t_max (1+|lam|)^1/2]
    with a random direction (every 20th sample has xi' = 0)."""
    N = params.dim if dim is None else dim
    phi_max = math.pi - params.theta
    rad = params.r * np.exp(rng.uniform(0, math.log(lam_max / params.r), n))
    lam = rad * np.exp(1j * rng.uniform(-phi_max, phi_max, n) * 0.999)
    top = t_max * np.sqrt(1 + rad)
    A = np.exp(rng.uniform(0, 1, n) * np.log(top / 1e-2)) * 1e-2
    A[::20] = 0.0
    d = rng.normal(size=(n, N - 1))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return lam, A[:, None] * d


def residual_suite(params, n=200, seed=0, lam_max=1e4, t_max=10.0, nx=256, parabolic=False):
    """Assemble amplitudes for n random sector modes with random admissible
    boundary data and return the normalized sup-residuals of the Fourier
    system (momentum, divergence, Q equation, boundary).  parabolic=True
    normalizes by 1+|lam|+|xi'|^2 instead of 1+|lam|."""
    rng = np.random.default_rng(seed)
    N = params.dim
    lam, xi = sector_samples(params, n, rng, lam_max, t_max)
    h = np.zeros((n, N), complex)
    H = np.zeros((n, N, N), complex)
    for i in range(n):
        d = ca.BoundaryModeData.random(N, rng)
        h[i], H[i] = d.h_hat, d.H_hat
    groups = ca.assemble_batch(params, lam, xi, ca.BoundaryModeData(h, H))
    keys = ("momentum", "divergence", "q_equation", "boundary")
    res = {k: np.zeros(n) for k in keys}
    branch = np.empty(n, object)
    for br, (idx, amps) in groups.items():
        for j, i in enumerate(idx):
            a = amps.mode(j)
            x = pe.default_x_grid(a, n=nx)
            r = pe.mode_residual(params, a, ca.BoundaryModeData(h[i], H[i]), x, parabolic)
            for k in keys:
                res[k][i] = r[k]
            branch[i] = br
    worst = np.max(np.stack([res[k] for k in keys]), axis=0)
    i = int(np.argmax(worst))
    vals = {k: float(res[k].max()) for k in keys}
    vals.update(max_residual=float(worst.max()), n=n,
                argmax_lambda=complex(lam[i]), argmax_xi=xi[i].tolist(),
                branches={br: int(idx.size) for br, (idx, _) in groups.items()})
    rows = [{"lambda": complex(lam[i]), "A": float(np.linalg.norm(xi[i])), "branch": branch[i],
             "residual": float(worst[i])} for i in range(n)]
    return VerificationReport("residual_suite", params.to_dict(), -1, vals, rows)


# ---------------------------------------------------------- oracle compare

def oracle_compare(params, n_modes=20, n=4096, seed=0, lam_max=100.0, t_max=3.0, threads=1):
    """Closed-form profiles vs the finite-difference BVP on n_modes random
    sector modes (the first is lam = 4i, xi' = (1, 0..)).  Reports the
    relative L2 difference (u, Q and staggered p) and the observed
    Richardson order of the oracle per mode."""
    from . import oracle_bvp as ob
    rng = np.random.default_rng(seed)
    N = params.dim
    lam, xi = sector_samples(params, n_modes, rng, lam_max, t_max)
    lam[0] = 4j
    xi[0] = 0.0
    xi[0, 0] = 1.0
    data = [ca.BoundaryModeData.random(N, rng) for _ in range(n_modes)]

    def one(i):
        d = data[i]
        prof = ob.oracle_mode_solve(params, lam[i], xi[i], d.h_hat, d.H_hat, n=n)
        am = ca.assemble_amplitudes(params, lam[i], xi[i], d, force_regular=params.beta == 0)
        cf = pe.eval_profile(am, prof.x)
        cfh = pe.eval_profile(am, prof.x_half)
        return {"lambda": complex(lam[i]), "A": float(np.linalg.norm(xi[i])),
                "rel_l2": ob.relative_l2(prof, cf["u"][0], cf["Q"][0], cfh["p"][0]),
                "rel_l2_uQ": ob.relative_l2(prof, cf["u"][0], cf["Q"][0]),
                "order": prof.richardson["order"],
                "est_rel_error": prof.richardson["est_rel_error"]}

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            rows = list(ex.map(one, range(n_modes)))
    else:
        rows = [one(i) for i in range(n_modes)]
    orders = np.array([r["order"] for r in rows])
    vals = {"n_modes": n_modes, "n": n, "max_rel_l2": max(r["rel_l2"] for r in rows),
            "min_order": float(orders.min()), "max_order": float(orders.max()),
            "mean_order": float(orders.mean())}
    rep = VerificationReport("oracle_compare", params.to_dict(), -1, vals, rows)
    rep.stable = bool(np.all(np.abs(orders - 2.0) <= 0.2))
    return rep


# ------------------------------------------------------------ eta continuity

ETA_EPS = (1e-2, 1e-3, 1e-4)
ETA_PHIS = (0.0, math.pi / 4, math.pi / 2)


def _eta_coeffs(amps):
    """Coefficient combinations that have a limit at eta: the single-rate
    amplitudes and the stable-representation pair (S, T) with T symmetrized
    about the mean rate on the regular branch."""
    S, T, SQ, TQ, *_ = pe.profile_terms(amps)
    if amps.branch == "regular":
        dl = (amps.L2 - amps.L1)
        T = T - 0.5 * dl[:, None] * S
        TQ = TQ - 0.5 * dl[:, None, None] * SQ
    M = S.shape[0]
    return {"C": amps.C, "D": amps.D, "A0": amps.A0, "Ajk": amps.Ajk.reshape(M, -1),
            "P": amps.P.reshape(M, -1), "S": S, "T": T, "SQ": SQ.reshape(M, -1),
            "TQ": TQ.reshape(M, -1)}


def eta_continuity(params, A_values=(0.1, 0.5, 1.0, 2.0, 5.0), eps=ETA_EPS, phis=ETA_PHIS, seed=0):
    """max over the xi' grid of |coeff(eta(1+e e^{i phi})) - coeff_tilde|,
    relative to the tilde size, for each approach ray; fitted order in e."""
    if params.beta == 0:
        raise BetaZero("no confluent point for beta = 0")
    rng = np.random.default_rng(seed)
    N = params.dim
    eta = ss.eta_point(params)
    xi = np.zeros((len(A_values), N - 1))
    xi[:, 0] = A_values
    data = [ca.BoundaryModeData.random(N, rng) for _ in A_values]
    h = np.stack([d.h_hat for d in data])
    H = np.stack([d.H_hat for d in data])
    bd = ca.BoundaryModeData(h, H)
    (_, (_, tl)), = ca.assemble_batch(params, eta, xi, bd).items()
    ref = _eta_coeffs(tl)
    scale = {k: np.abs(v).reshape(len(A_values), -1).max(axis=1) for k, v in ref.items()}
    rows, orders = [], []
    for phi in phis:
        errs = []
        for e in eps:
            lam = eta * (1 + e * np.exp(1j * phi))
            (_, (_, am)), = ca.assemble_batch(params, lam, xi, bd, force_regular=True).items()
            cur = _eta_coeffs(am)
            err = 0.0
            for k, v in cur.items():
                d = np.abs(v - ref[k]).reshape(len(A_values), -1).max(axis=1)
                s = np.where(scale[k] > 0, scale[k], 1.0)
                err = max(err, float((d / s).max()))
            errs.append(err)
            rows.append({"phi": phi, "eps": e, "max_rel_diff": err})
        order = float(np.polyfit(np.log(eps), np.log(errs), 1)[0])
        orders.append(order)
    vals = {"eta": eta, "orders": orders, "min_order": min(orders),
            "max_diff_at_smallest_eps": max(r["max_rel_diff"] for r in rows if r["eps"] == min(eps))}
    rep = VerificationReport("eta_continuity", params.to_dict(), -1, vals, rows)
    rep.stable = min(orders) >= 1 - 0.1
    return rep


# --------------------------------------------------------- resolvent ratio

@dataclass
class ResolventSample:
    lam: complex
    h: np.ndarray                 # (N, *counts) boundary trace
    H: np.ndarray                 # (N, N, *counts)
    f: np.ndarray | None = None   # (N, *counts, nx) on a uniform grid
    G: np.ndarray | None = None


def normal_weights(x, kind):
    """Quadrature weights on the normal grid (midpoint for the cell-centered
    grid, trapezoid otherwise)."""
    if kind == "uniform":
        return np.full(x.size, x[1] - x[0])
    w = np.zeros(x.size)
    d = np.diff(x)
    w[:-1] += d / 2
    w[1:] += d / 2
    return w


def lq_norm(grid, arr, q, comp_axes):
    """Discrete L^q norm of the pointwise Euclidean magnitude over comp_axes."""
    mag = np.sqrt(np.sum(np.abs(arr) ** 2, axis=tuple(range(comp_axes)))) if comp_axes else np.abs(arr)
    wt = np.prod([L / n for L, n in zip(grid.lengths, grid.counts)])
    w = normal_weights(grid.x, grid.kind) * wt
    return float(np.sum(mag ** q * w) ** (1.0 / q))


def _derivs(grid, arr, order, fd):
    from .halfspace_resolvent_solver import field_gradient
    ds = [np.asarray(arr, complex)]
    for _ in range(order):
        ds.append(field_gradient(grid, ds[-1], fd))
    return ds


def extend_boundary_data(grid, h, lam):
    """h(x') e^{-(|lam|^(1/2)+1) x_N}: the lambda-adapted extension used on
    the data side of the estimate."""
    kappa = abs(lam) ** 0.5 + 1.0
    return np.asarray(h)[..., None] * np.exp(-kappa * grid.x)


def resolvent_lhs_rhs(params, sample, sol, q=None):
    """LHS and RHS of the resolvent estimate with discrete L^q norms."""
    from .halfspace_resolvent_solver import fd_operators
    q = params.q if q is None else q
    grid = sol
    fd = fd_operators(grid.x)
    lam = abs(sample.lam)
    N = params.dim
    du = _derivs(grid, sol.u, 2, fd)
    dQ = _derivs(grid, sol.Q, 3, fd)
    nrm = lambda a: lq_norm(grid, a, q, a.ndim - grid.dim)
    lhs = (lam * nrm(du[0]) + lam ** 0.5 * nrm(du[1]) + nrm(du[2]) + nrm(sol.grad_p)
           + lam ** 1.5 * nrm(dQ[0]) + lam * nrm(dQ[1]) + lam ** 0.5 * nrm(dQ[2]) + nrm(dQ[3]))
    rhs = 0.0
    for data in (sample.h, sample.H):
        e = _derivs(grid, extend_boundary_data(grid, data, sample.lam), 2, fd)
        rhs += lam * nrm(e[0]) + lam ** 0.5 * nrm(e[1]) + nrm(e[2])
    if sample.f is not None:
        rhs += nrm(np.asarray(sample.f))
    if sample.G is not None:
        eG = _derivs(grid, sample.G, 1, fd)
        rhs += lam ** 0.5 * nrm(eG[0]) + nrm(eG[1])
    return lhs, rhs


def resolvent_samples(params, n=20, lam_min=2.0, lam_max=2000.0, counts=32, support=1.0,
                      seed=0, x_factor=40.0):
    """n (lambda, boundary data, grid) samples: |lambda| log-spaced, angles
    cycling through the sector, one smooth bump h and H per sample."""
    from . import halfspace_resolvent_solver as hs
    rng = np.random.default_rng(seed)
    N = params.dim
    L = hs.box_length_for_support(support)
    rad = np.logspace(math.log10(lam_min), math.log10(lam_max), n)
    phi_max = math.pi - params.theta
    angs = phi_max * np.array([0.0, 0.45, -0.7, 0.85])
    out = []
    for i, r in enumerate(rad):
        lam = complex(r * np.exp(1j * angs[i % angs.size]))
        xmax = x_factor * L / (2 * math.pi)
        A_max = math.pi * counts / L
        grid = hs.make_field_grid(N, L, counts, x_max=xmax, kind="graded", h0=hs.default_h0(lam, A_max))
        coords = np.meshgrid(*grid.tangential_coords(), indexing="ij")
        bump = np.exp(-sum(((c - L / 2) / support) ** 2 for c in coords))
        h = np.zeros((N,) + bump.shape)
        cu = rng.normal(size=N - 1)
        h[:N - 1] = cu.reshape((-1,) + (1,) * bump.ndim) * bump
        S = rng.normal(size=(N, N))
        S = S + S.T
        S -= np.trace(S) / N * np.eye(N)
        H = S.reshape((N, N) + (1,) * bump.ndim) * bump
        out.append((ResolventSample(lam, h, H), grid))
    return out


def resolvent_ratio_check(params, sample_set, q=None, threads=1, small_cut=20.0):
    """Empirical LHS/RHS of the resolvent estimate on (sample, grid) pairs.
    Report only.  growth = max ratio over all samples / max ratio over the
    samples with |lambda| <= small_cut; stable when growth < 2."""
    from . import halfspace_resolvent_solver as hs
    rows = []
    notes = []
    for smp, grid in sample_set:
        nz = any(d is not None and np.any(np.asarray(d) != 0) for d in (smp.h, smp.H, smp.f, smp.G))
        if not nz:
            notes.append(f"lambda={smp.lam}: zero data, ratio 0/0 skipped")
            continue
        if smp.f is None and smp.G is None:
            sol = hs.solve_boundary(params, smp.lam, smp.h, smp.H, grid, threads=threads)
        else:
            N = params.dim
            f = smp.f if smp.f is not None else np.zeros((N,) + tuple(grid.counts) + (grid.nx,))
            G = smp.G if smp.G is not None else np.zeros((N, N) + tuple(grid.counts) + (grid.nx,))
            sol = hs.solve_resolvent_full(params, smp.lam, f, G, smp.h, smp.H, grid, threads=threads)
        lhs, rhs = resolvent_lhs_rhs(params, smp, sol, q)
        rows.append({"lambda_re": smp.lam.real, "lambda_im": smp.lam.imag, "abs_lambda": abs(smp.lam),
                     "lhs": lhs, "rhs": rhs, "ratio": lhs / rhs, "nx": grid.nx})
    vals = {}
    stable = None
    if rows:
        ratios = np.array([r["ratio"] for r in rows])
        absl = np.array([r["abs_lambda"] for r in rows])
        vals["max_ratio"] = float(ratios.max())
        vals["min_ratio"] = float(ratios.min())
        small = absl <= small_cut
        if small.any():
            vals["max_ratio_small"] = float(ratios[small].max())
            vals["growth"] = vals["max_ratio"] / vals["max_ratio_small"]
            stable = bool(np.isfinite(vals["growth"]) and vals["growth"] < UNSTABLE_FACTOR)
        vals["decades"] = float(math.log10(absl.max() / absl.min())) if absl.size > 1 else 0.0
    return VerificationReport("resolvent_ratio", params.to_dict(), 0, vals, rows, stable, notes)
